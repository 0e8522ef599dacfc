import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pcstream.errors import ConfigError, ManifestParseError, ManifestValidationError
from pcstream.media import (SizeProfile, TileGrid, TileManifest, action_to_choice, choice_to_action,
                            chunk_size_vector, generate_synthetic_manifest, load_manifest,
                            manifest_to_dict, parse_manifest, save_manifest, serialize_manifest)

from conftest import uniform_manifest


def minimal_doc(comp=10, uncomp=20):
    return {
        "version": 1, "video_id": "v", "chunk_duration_ms": 330.0, "chunks": 1,
        "grid": {"nx": 1, "ny": 1, "nz": 1, "extent": [1.0, 1.0, 1.0], "origin": [0.0, 0.0, 0.0]},
        "tiles": [{"id": [0, 0, 0], "levels": [[
            {"level": 1, "comp_bytes": comp, "uncomp_bytes": uncomp, "psnr_db": 30.0, "decode_cost": 0.5},
        ]]}],
    }


def test_grid_indexing_is_x_major():
    g = TileGrid(3, 3, 4)
    assert g.tile_count == 36
    assert g.tile_index(0, 0, 1) == 1
    assert g.tile_index(0, 1, 0) == 4
    assert g.tile_index(1, 0, 0) == 12
    for t in range(g.tile_count):
        assert g.tile_index(*g.tile_coords(t)) == t


def test_grid_rejects_bad_dimensions():
    with pytest.raises(ConfigError):
        TileGrid(0, 1, 1)
    with pytest.raises(ConfigError):
        TileGrid(1, 1, 1, extent=(1.0, 0.0, 1.0))


def test_tile_bounds_and_center():
    g = TileGrid(2, 1, 1, (0.5, 1.0, 2.0), (1.0, 0.0, 0.0))
    lo, hi = g.tile_bounds()
    np.testing.assert_array_equal(lo[1], [1.5, 0.0, 0.0])
    np.testing.assert_array_equal(hi[1], [2.0, 1.0, 2.0])
    np.testing.assert_array_equal(g.center, [1.5, 0.5, 1.0])


def test_minimal_manifest_parses():
    m = parse_manifest(json.dumps(minimal_doc()))
    assert (m.tile_count, m.chunk_count, m.levels) == (1, 1, 1)
    v = m.variant(0, 0, 1)
    assert (v.compressed_size, v.uncompressed_size, v.psnr, v.decode_cost) == (10, 20, 30.0, 0.5)


def test_compressed_not_smaller_is_rejected():
    with pytest.raises(ManifestValidationError) as err:
        parse_manifest(json.dumps(minimal_doc(comp=20, uncomp=20)))
    assert err.value.tile == 0 and err.value.level == 1


def test_parse_errors_carry_a_path():
    doc = minimal_doc()
    del doc["tiles"][0]["levels"][0][0]["psnr_db"]
    with pytest.raises(ManifestParseError) as err:
        parse_manifest(json.dumps(doc))
    assert "tiles[0]" in err.value.path
    with pytest.raises(ManifestParseError):
        parse_manifest(b"{not json")
    doc = minimal_doc()
    doc["version"] = 2
    with pytest.raises(ManifestParseError) as err:
        parse_manifest(json.dumps(doc))
    assert err.value.path == "$.version"


def test_psnr_must_increase():
    comp = np.array([[[10, 20]]])
    with pytest.raises(ManifestValidationError) as err:
        TileManifest(TileGrid(1, 1, 1), 330.0, comp, comp * 2, [[[31.0, 31.0]]], [[[1.0, 1.0]]])
    assert err.value.level == 2


def test_decode_cost_must_not_decrease():
    comp = np.array([[[10, 20]]])
    with pytest.raises(ManifestValidationError):
        TileManifest(TileGrid(1, 1, 1), 330.0, comp, comp * 2, [[[30.0, 31.0]]], [[[2.0, 1.0]]])


def test_manifest_arrays_are_read_only(small_manifest):
    with pytest.raises(ValueError):
        small_manifest.comp_bytes[0, 0, 0] = 1


def test_synthetic_determinism_and_counts():
    g = TileGrid(3, 3, 4)
    a = generate_synthetic_manifest(5, g, 30)
    b = generate_synthetic_manifest(5, g, 30)
    assert a == b
    assert a.comp_bytes.size == 5400
    assert generate_synthetic_manifest(6, g, 30) != a


def test_synthetic_compression_ratio_is_exact():
    m = generate_synthetic_manifest(1, TileGrid(2, 2, 2), 4, SizeProfile(compression_ratio=0.5))
    np.testing.assert_array_equal(m.comp_bytes, np.rint(0.5 * m.uncomp_bytes).astype(np.int64))


def test_synthetic_linear_levels_follow_sample_ratio():
    prof = SizeProfile(density_sigma=0.0, chunk_jitter=0.0, base_tile_bytes=1e6)
    m = generate_synthetic_manifest(2, TileGrid(1, 1, 1), 1, prof)
    np.testing.assert_array_equal(m.uncomp_bytes[0, 0], [200000, 400000, 600000, 800000, 1000000])
    assert m.sample_ratio(5) == 1.0


def test_synthetic_rejects_degenerate_profile():
    with pytest.raises(ConfigError):
        generate_synthetic_manifest(1, TileGrid(1, 1, 1), 1, SizeProfile(compression_ratio=1.0))
    with pytest.raises(ConfigError):
        generate_synthetic_manifest(1, TileGrid(1, 1, 1), 1, SizeProfile(base_tile_bytes=-5))


@given(st.integers(0, 2 ** 31 - 1), st.integers(1, 3), st.integers(1, 3), st.integers(1, 2),
       st.integers(1, 4), st.integers(1, 5))
def test_serialize_parse_roundtrip(seed, nx, ny, nz, chunks, levels):
    m = generate_synthetic_manifest(seed, TileGrid(nx, ny, nz, (0.3, 0.4, 0.5), (1.0, -2.0, 0.25)),
                                    chunks, SizeProfile(levels=levels))
    blob = serialize_manifest(m)
    back = parse_manifest(blob)
    assert back == m
    assert serialize_manifest(back) == blob
    # floats survive bit for bit
    assert back.psnr.tobytes() == m.psnr.tobytes()
    assert back.decode_cost.tobytes() == m.decode_cost.tobytes()


def test_file_roundtrip(tmp_path, small_manifest):
    p = tmp_path / "m.json"
    save_manifest(small_manifest, p)
    assert load_manifest(p) == small_manifest
    doc = json.loads(p.read_bytes())
    assert doc["version"] == 1 and len(doc["tiles"]) == 8
    assert set(doc["tiles"][0]["levels"][0][0]) == {"level", "comp_bytes", "uncomp_bytes", "psnr_db", "decode_cost"}
    assert manifest_to_dict(small_manifest) == doc


def test_action_mapping():
    assert action_to_choice(0, 5) == (1, True)
    assert action_to_choice(4, 5) == (5, True)
    assert action_to_choice(5, 5) == (1, False)
    assert action_to_choice(9, 5) == (5, False)
    for a in range(10):
        assert choice_to_action(*action_to_choice(a, 5), 5) == a
    with pytest.raises(ValueError):
        action_to_choice(10, 5)


def test_chunk_sizes_all_visible_uniform():
    m = uniform_manifest(2, 2, 1, levels=3, comp=100, uncomp=250)
    v = chunk_size_vector(m, 0, range(4))
    np.testing.assert_array_equal(v, [400, 800, 1200, 1000, 2000, 3000])


def test_chunk_sizes_nothing_visible():
    m = uniform_manifest(2, 2, 1, levels=3, comp=100, uncomp=250)
    v = chunk_size_vector(m, 1, ())
    assert np.all(v == v[0]) and v[0] == 400


def test_chunk_sizes_out_of_range():
    m = uniform_manifest()
    with pytest.raises(IndexError):
        chunk_size_vector(m, 2, ())


@given(st.integers(0, 10 ** 6), st.sets(st.integers(0, 7)), st.integers(0, 5))
def test_chunk_sizes_match_per_tile_sum(seed, visible, chunk):
    m = generate_synthetic_manifest(seed % 97, TileGrid(2, 2, 2), 6)
    v = chunk_size_vector(m, chunk, visible)
    L = m.levels
    for a in range(2 * L):
        level, comp = action_to_choice(a, L)
        total = 0
        for t in range(m.tile_count):
            var = m.variant(t, chunk, level if t in visible else 1)
            if t in visible:
                total += var.compressed_size if comp else var.uncompressed_size
            else:
                total += var.compressed_size
        assert v[a] == total
    assert np.all(np.diff(v[:L]) >= 0) and np.all(np.diff(v[L:]) >= 0)


@given(st.integers(0, 10 ** 6))
def test_synthetic_variants_monotone(seed):
    m = generate_synthetic_manifest(seed, TileGrid(2, 1, 2), 3, SizeProfile(level_growth=1.7))
    for arr in (m.comp_bytes, m.uncomp_bytes, m.decode_cost):
        assert np.all(np.diff(arr, axis=2) >= 0)
    assert np.all(np.diff(m.psnr, axis=2) > 0)
    assert np.all(m.uncomp_bytes > m.comp_bytes) and np.all(m.comp_bytes > 0)

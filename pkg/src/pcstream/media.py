"""Tiled point cloud video model and the JSON manifest (MPD analog).

A manifest holds, for every tile of an ``nx * ny * nz`` grid, every chunk and
every quality level, the compressed and uncompressed byte sizes, the
point-to-point PSNR and the abstract decode cost of the compressed variant.
Tables are numpy arrays of shape ``(tiles, chunks, levels)``; tiles are
ordered x-major, i.e. ``tile = (ix * ny + iy) * nz + iz``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ManifestParseError, ManifestValidationError

MANIFEST_VERSION = 1


@dataclass(frozen=True)
class TileGrid:
    nx: int
    ny: int
    nz: int
    extent: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        for name in ("nx", "ny", "nz"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"grid dimension {name} must be >= 1")
        if len(self.extent) != 3 or any(not e > 0 for e in self.extent):
            raise ConfigError(f"tile extent must be three positive lengths, got {self.extent}")
        if len(self.origin) != 3:
            raise ConfigError("grid origin must have three coordinates")
        object.__setattr__(self, "extent", tuple(float(e) for e in self.extent))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def tile_count(self) -> int:
        return self.nx * self.ny * self.nz

    def tile_index(self, ix: int, iy: int, iz: int) -> int:
        return (ix * self.ny + iy) * self.nz + iz

    def tile_coords(self, tile: int) -> tuple[int, int, int]:
        ix, rest = divmod(tile, self.ny * self.nz)
        iy, iz = divmod(rest, self.nz)
        return ix, iy, iz

    def tile_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Return (lo, hi) corner arrays of shape (tiles, 3) in meters."""
        idx = np.array([self.tile_coords(t) for t in range(self.tile_count)], dtype=float)
        ext = np.asarray(self.extent)
        lo = np.asarray(self.origin) + idx * ext
        return lo, lo + ext

    @property
    def center(self) -> np.ndarray:
        return np.asarray(self.origin) + 0.5 * np.asarray(self.extent) * [self.nx, self.ny, self.nz]


@dataclass(frozen=True)
class TileVariant:
    level: int
    compressed_size: int
    uncompressed_size: int
    psnr: float
    decode_cost: float
    sample_ratio: float


@dataclass(frozen=True, eq=False)
class TileManifest:
    """Immutable per-(tile, chunk, level) variant table.

    ``comp_bytes`` and ``uncomp_bytes`` are int64, ``psnr`` and
    ``decode_cost`` float64; all share shape ``(tiles, chunks, levels)``.
    """

    grid: TileGrid
    chunk_duration_ms: float
    comp_bytes: np.ndarray
    uncomp_bytes: np.ndarray
    psnr: np.ndarray
    decode_cost: np.ndarray
    video_id: str = "synthetic"
    _frozen: bool = field(default=False, repr=False)

    def __post_init__(self):
        arrays = {}
        for name, dtype in (("comp_bytes", np.int64), ("uncomp_bytes", np.int64),
                            ("psnr", np.float64), ("decode_cost", np.float64)):
            a = np.array(getattr(self, name), dtype=dtype, copy=True)
            if a.ndim != 3:
                raise ManifestValidationError(f"{name} must be 3-D (tiles, chunks, levels)")
            a.setflags(write=False)
            arrays[name] = a
            object.__setattr__(self, name, a)
        shapes = {a.shape for a in arrays.values()}
        if len(shapes) != 1:
            raise ManifestValidationError(f"variant tables disagree in shape: {sorted(shapes)}")
        tiles, chunks, levels = self.comp_bytes.shape
        if tiles != self.grid.tile_count:
            raise ManifestValidationError(
                f"variant table has {tiles} tiles, grid has {self.grid.tile_count}")
        if chunks < 1 or levels < 1:
            raise ManifestValidationError("manifest needs at least one chunk and one level")
        if not self.chunk_duration_ms > 0:
            raise ManifestValidationError("chunk_duration must be > 0")
        validate_variants(self)

    @property
    def tile_count(self) -> int:
        return self.comp_bytes.shape[0]

    @property
    def chunk_count(self) -> int:
        return self.comp_bytes.shape[1]

    @property
    def levels(self) -> int:
        return self.comp_bytes.shape[2]

    @property
    def n_actions(self) -> int:
        return 2 * self.levels

    @property
    def chunk_duration_s(self) -> float:
        return self.chunk_duration_ms / 1000.0

    def sample_ratio(self, level: int) -> float:
        return level / self.levels

    def variant(self, tile: int, chunk: int, level: int) -> TileVariant:
        i = level - 1
        return TileVariant(
            level=level,
            compressed_size=int(self.comp_bytes[tile, chunk, i]),
            uncompressed_size=int(self.uncomp_bytes[tile, chunk, i]),
            psnr=float(self.psnr[tile, chunk, i]),
            decode_cost=float(self.decode_cost[tile, chunk, i]),
            sample_ratio=self.sample_ratio(level),
        )

    def __eq__(self, other):
        if not isinstance(other, TileManifest):
            return NotImplemented
        return (self.grid == other.grid and self.video_id == other.video_id
                and self.chunk_duration_ms == other.chunk_duration_ms
                and all(np.array_equal(getattr(self, n), getattr(other, n))
                        for n in ("comp_bytes", "uncomp_bytes", "psnr", "decode_cost")))

    __hash__ = None


def validate_variants(m: TileManifest) -> None:
    """Raise ManifestValidationError naming the first offending tile/chunk/level."""

    def first_bad(mask):
        t, c, l = np.argwhere(mask)[0]
        return int(t), int(c), int(l) + 1

    for name in ("psnr", "decode_cost"):
        if not np.all(np.isfinite(getattr(m, name))):
            t, c, l = first_bad(~np.isfinite(getattr(m, name)))
            raise ManifestValidationError(f"{name} is not finite", t, c, l)
    if np.any(m.comp_bytes <= 0):
        t, c, l = first_bad(m.comp_bytes <= 0)
        raise ManifestValidationError("compressed size must be > 0", t, c, l)
    bad = m.uncomp_bytes <= m.comp_bytes
    if np.any(bad):
        t, c, l = first_bad(bad)
        raise ManifestValidationError(
            "uncompressed size must exceed compressed size", t, c, l)
    if np.any(m.decode_cost < 0):
        t, c, l = first_bad(m.decode_cost < 0)
        raise ManifestValidationError("decode cost must be >= 0", t, c, l)
    if m.levels > 1:
        checks = (
            (np.diff(m.psnr, axis=2) <= 0, "psnr must strictly increase with level"),
            (np.diff(m.comp_bytes, axis=2) < 0, "compressed size must not decrease with level"),
            (np.diff(m.uncomp_bytes, axis=2) < 0, "uncompressed size must not decrease with level"),
            (np.diff(m.decode_cost, axis=2) < 0, "decode cost must not decrease with level"),
        )
        for mask, msg in checks:
            if np.any(mask):
                t, c, l = first_bad(mask)
                raise ManifestValidationError(msg, t, c, l + 1)


# -- JSON manifest ------------------------------------------------------------

def manifest_to_dict(m: TileManifest) -> dict:
    g = m.grid
    tiles = []
    for t in range(m.tile_count):
        per_chunk = []
        for c in range(m.chunk_count):
            per_chunk.append([
                {
                    "level": l + 1,
                    "comp_bytes": int(m.comp_bytes[t, c, l]),
                    "uncomp_bytes": int(m.uncomp_bytes[t, c, l]),
                    "psnr_db": float(m.psnr[t, c, l]),
                    "decode_cost": float(m.decode_cost[t, c, l]),
                }
                for l in range(m.levels)
            ])
        tiles.append({"id": list(g.tile_coords(t)), "levels": per_chunk})
    return {
        "version": MANIFEST_VERSION,
        "video_id": m.video_id,
        "grid": {"nx": g.nx, "ny": g.ny, "nz": g.nz,
                 "extent": list(g.extent), "origin": list(g.origin)},
        "chunk_duration_ms": float(m.chunk_duration_ms),
        "chunks": m.chunk_count,
        "tiles": tiles,
    }


def serialize_manifest(m: TileManifest) -> bytes:
    """Canonical encoding: sorted keys, compact separators, UTF-8."""
    return json.dumps(manifest_to_dict(m), sort_keys=True, separators=(",", ":")).encode("utf-8")


def _require(obj, key, path, kind):
    if not isinstance(obj, dict):
        raise ManifestParseError("expected an object", path)
    if key not in obj:
        raise ManifestParseError(f"missing key {key!r}", path)
    value = obj[key]
    if kind is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif kind is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    else:
        ok = isinstance(value, kind)
    if not ok:
        raise ManifestParseError(f"expected {kind.__name__}", f"{path}.{key}")
    return value


def parse_manifest(data: bytes | str) -> TileManifest:
    try:
        doc = json.loads(data)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ManifestParseError(f"invalid JSON: {exc}", "$") from None
    version = _require(doc, "version", "$", int)
    if version != MANIFEST_VERSION:
        raise ManifestParseError(f"unsupported manifest version {version}", "$.version")
    video_id = _require(doc, "video_id", "$", str)
    gdoc = _require(doc, "grid", "$", dict)
    dims = [_require(gdoc, k, "$.grid", int) for k in ("nx", "ny", "nz")]
    extent = _require(gdoc, "extent", "$.grid", list)
    origin = _require(gdoc, "origin", "$.grid", list)
    for key, vec in (("extent", extent), ("origin", origin)):
        if len(vec) != 3 or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in vec):
            raise ManifestParseError("expected three numbers", f"$.grid.{key}")
    try:
        grid = TileGrid(*dims, extent=tuple(extent), origin=tuple(origin))
    except ConfigError as exc:
        raise ManifestValidationError(str(exc)) from None
    duration = _require(doc, "chunk_duration_ms", "$", float)
    chunks = _require(doc, "chunks", "$", int)
    tiles = _require(doc, "tiles", "$", list)
    if len(tiles) != grid.tile_count:
        raise ManifestParseError(f"expected {grid.tile_count} tiles, found {len(tiles)}", "$.tiles")
    if chunks < 1:
        raise ManifestValidationError("chunks must be >= 1")

    levels = None
    tables = None
    for t, tdoc in enumerate(tiles):
        tpath = f"$.tiles[{t}]"
        if "id" in tdoc and list(tdoc["id"]) != list(grid.tile_coords(t)):
            raise ManifestParseError(f"tile id {tdoc['id']} out of x-major order", f"{tpath}.id")
        per_chunk = _require(tdoc, "levels", tpath, list)
        if len(per_chunk) != chunks:
            raise ManifestParseError(f"expected {chunks} chunks, found {len(per_chunk)}", f"{tpath}.levels")
        for c, lv in enumerate(per_chunk):
            cpath = f"{tpath}.levels[{c}]"
            if not isinstance(lv, list) or not lv:
                raise ManifestParseError("expected a non-empty list of levels", cpath)
            if levels is None:
                levels = len(lv)
                tables = {k: np.zeros((grid.tile_count, chunks, levels), dtype=d)
                          for k, d in (("comp", np.int64), ("uncomp", np.int64),
                                       ("psnr", np.float64), ("decode", np.float64))}
            if len(lv) != levels:
                raise ManifestParseError(f"expected {levels} levels, found {len(lv)}", cpath)
            for i, vdoc in enumerate(lv):
                vpath = f"{cpath}[{i}]"
                if _require(vdoc, "level", vpath, int) != i + 1:
                    raise ManifestParseError("levels must be listed 1..L in order", f"{vpath}.level")
                tables["comp"][t, c, i] = _require(vdoc, "comp_bytes", vpath, int)
                tables["uncomp"][t, c, i] = _require(vdoc, "uncomp_bytes", vpath, int)
                tables["psnr"][t, c, i] = _require(vdoc, "psnr_db", vpath, float)
                tables["decode"][t, c, i] = _require(vdoc, "decode_cost", vpath, float)
    return TileManifest(grid=grid, chunk_duration_ms=float(duration),
                        comp_bytes=tables["comp"], uncomp_bytes=tables["uncomp"],
                        psnr=tables["psnr"], decode_cost=tables["decode"], video_id=video_id)


def load_manifest(path) -> TileManifest:
    with open(path, "rb") as fh:
        return parse_manifest(fh.read())


def save_manifest(m: TileManifest, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_manifest(m))


# -- synthetic content --------------------------------------------------------

@dataclass(frozen=True)
class SizeProfile:
    """Size model for synthetic manifests.

    ``base_tile_bytes`` is the mean uncompressed size of a tile at the top
    level. Lower levels scale by ``level / levels`` (the sampling ratio)
    unless ``level_growth`` is set, in which case each level down divides by
    it. ``density_sigma`` spreads occupancy across tiles (lognormal) and
    ``chunk_jitter`` varies sizes chunk to chunk.
    """

    base_tile_bytes: float = 2.5e6
    level_growth: float | None = None
    compression_ratio: float = 0.4
    psnr_base: float = 30.0
    psnr_step: float = 3.0
    psnr_jitter: float = 1.0
    decode_per_mb: float = 1.0
    density_sigma: float = 0.5
    chunk_jitter: float = 0.05
    levels: int = 5
    chunk_duration_ms: float = 330.0

    def validate(self):
        if not self.base_tile_bytes > 0:
            raise ConfigError("base_tile_bytes must be > 0")
        if not 0 < self.compression_ratio < 1:
            raise ConfigError("compression_ratio must lie in (0, 1)")
        if self.level_growth is not None and not self.level_growth > 1:
            raise ConfigError("level_growth must exceed 1")
        if not self.psnr_step > 0:
            raise ConfigError("psnr_step must be > 0")
        if self.decode_per_mb < 0 or self.density_sigma < 0 or self.chunk_jitter < 0 or self.psnr_jitter < 0:
            raise ConfigError("spread and cost parameters must be >= 0")
        if self.levels < 1 or not self.chunk_duration_ms > 0:
            raise ConfigError("levels must be >= 1 and chunk_duration_ms > 0")


def generate_synthetic_manifest(seed: int, grid: TileGrid, chunks: int,
                                profile: SizeProfile | None = None,
                                video_id: str | None = None) -> TileManifest:
    profile = profile or SizeProfile()
    profile.validate()
    if chunks < 1:
        raise ConfigError("chunks must be >= 1")
    rng = np.random.default_rng(seed)
    T, L = grid.tile_count, profile.levels

    density = rng.lognormal(-0.5 * profile.density_sigma ** 2, profile.density_sigma, size=T)
    jitter = np.clip(1.0 + profile.chunk_jitter * rng.standard_normal((T, chunks)), 0.5, 1.5)
    levels = np.arange(1, L + 1)
    if profile.level_growth is None:
        scale = levels / L
    else:
        scale = profile.level_growth ** (levels - L)
    top = profile.base_tile_bytes * density[:, None] * jitter
    uncomp = np.rint(top[:, :, None] * scale[None, None, :]).astype(np.int64)
    # the smallest tile still needs comp >= 1 and comp < uncomp
    floor = int(np.ceil(2.0 / min(profile.compression_ratio, 1 - profile.compression_ratio))) + 1
    uncomp = np.maximum(uncomp, floor)
    uncomp = np.maximum.accumulate(uncomp, axis=2)
    comp = np.rint(profile.compression_ratio * uncomp).astype(np.int64)
    if np.any(comp <= 0) or np.any(comp >= uncomp):
        raise ConfigError("profile produces degenerate compressed sizes")

    offset = profile.psnr_jitter * rng.standard_normal((T, chunks))
    psnr = profile.psnr_base + offset[:, :, None] + profile.psnr_step * (levels - 1)[None, None, :]
    decode = profile.decode_per_mb * comp / 1e6
    return TileManifest(grid=grid, chunk_duration_ms=profile.chunk_duration_ms,
                        comp_bytes=comp, uncomp_bytes=uncomp, psnr=psnr,
                        decode_cost=decode,
                        video_id=video_id if video_id is not None else f"synthetic-{seed}")


# -- action space -------------------------------------------------------------
# Action a in [0, 2L): a < L is level a+1 compressed, a >= L is level a-L+1
# uncompressed. Level-change distance is |a - a_prev| over this index.

def action_to_choice(action: int, levels: int) -> tuple[int, bool]:
    if not 0 <= action < 2 * levels:
        raise ValueError(f"action {action} outside [0, {2 * levels})")
    if action < levels:
        return action + 1, True
    return action - levels + 1, False


def choice_to_action(level: int, compressed: bool, levels: int) -> int:
    if not 1 <= level <= levels:
        raise ValueError(f"level {level} outside [1, {levels}]")
    return level - 1 if compressed else levels + level - 1


def chunk_size_vector(manifest: TileManifest, chunk: int, visible) -> np.ndarray:
    """Bytes of the next chunk for each of the 2L actions.

    Visible tiles take the action's variant; every other tile is charged its
    level-1 compressed size.
    """
    if not 0 <= chunk < manifest.chunk_count:
        raise IndexError(f"chunk {chunk} outside [0, {manifest.chunk_count})")
    mask = np.zeros(manifest.tile_count, dtype=bool)
    mask[list(visible)] = True
    comp = manifest.comp_bytes[:, chunk, :]
    uncomp = manifest.uncomp_bytes[:, chunk, :]
    base = int(comp[~mask, 0].sum())
    return np.concatenate([comp[mask].sum(axis=0), uncomp[mask].sum(axis=0)]).astype(np.int64) + base

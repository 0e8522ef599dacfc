import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from pcstream.media import SizeProfile, TileGrid, TileManifest, generate_synthetic_manifest
from pcstream.traces import BandwidthTrace, ComputeBudget, FovTrace

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def uniform_manifest(nx=1, ny=1, nz=1, chunks=2, levels=3, comp=1000, uncomp=3000,
                     decode=1.0, chunk_ms=330.0):
    """Every tile has sizes ``comp*level`` / ``uncomp*level`` and decode ``decode*level``."""
    grid = TileGrid(nx, ny, nz)
    T = grid.tile_count
    lv = np.arange(1, levels + 1)
    shape = (T, chunks, levels)
    return TileManifest(grid=grid, chunk_duration_ms=chunk_ms,
                        comp_bytes=np.broadcast_to(comp * lv, shape),
                        uncomp_bytes=np.broadcast_to(uncomp * lv, shape),
                        psnr=np.broadcast_to(30.0 + 2.0 * lv, shape),
                        decode_cost=np.broadcast_to(decode * lv, shape),
                        video_id="uniform")


def constant_bw(mbps, duration=1000.0):
    return BandwidthTrace([0.0, duration / 2], [mbps, mbps], "const")


def still_fov(pose=(-3.0, 0.5, 0.5, 0.0, 0.0, 0.0), duration=1000.0):
    return FovTrace([0.0, duration / 2], [list(pose), list(pose)])


@pytest.fixture
def small_manifest():
    grid = TileGrid(2, 2, 2, (0.5, 0.5, 0.5), (-0.5, -0.5, 0.0))
    return generate_synthetic_manifest(11, grid, 6, SizeProfile(base_tile_bytes=2e5))


@pytest.fixture
def budget():
    return ComputeBudget(10.0)


# acceptance results, printed after the run as one PASS/FAIL line each
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def record_acceptance(name: str, ok: bool, detail: str = "") -> bool:
    ACCEPTANCE[name] = (bool(ok), detail)
    return bool(ok)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name, (ok, detail) in ACCEPTANCE.items():
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")

"""Per-tile selection under byte and decode budgets.

Every tile gets exactly one (level, compressed?) variant. A plan is feasible
when its bytes fit the per-chunk byte budget and the decode cost of its
compressed tiles fits the compute budget; uncompressed tiles cost no decode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, SelectionGuardError
from .media import TileGrid, TileManifest

DEFAULT_GUARD = 2_000_000


# -- visibility ---------------------------------------------------------------

@dataclass(frozen=True)
class Frustum:
    """View volume. ``h_fov_deg >= 360`` switches to an omnidirectional shell."""

    h_fov_deg: float = 90.0
    v_fov_deg: float = 90.0
    near: float = 0.1
    far: float = 10.0

    def __post_init__(self):
        if not (0 < self.h_fov_deg < 180 or self.h_fov_deg >= 360):
            raise ConfigError("h_fov_deg must lie in (0, 180) or be >= 360")
        if not 0 < self.v_fov_deg < 180:
            raise ConfigError("v_fov_deg must lie in (0, 180)")
        if not 0 <= self.near < self.far:
            raise ConfigError("need 0 <= near < far")

    @property
    def omni(self) -> bool:
        return self.h_fov_deg >= 360


def view_basis(yaw: float, pitch: float, roll: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Forward, left and up unit vectors; z is up, yaw=pitch=0 looks along +x."""
    y, p, r = np.radians([yaw, pitch, roll])
    cy, sy, cp, sp, cr, sr = np.cos(y), np.sin(y), np.cos(p), np.sin(p), np.cos(r), np.sin(r)
    rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
    ry = np.array([[cp, 0, -sp], [0, 1, 0], [sp, 0, cp]])  # positive pitch looks up
    rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
    rot = rz @ ry @ rx
    return rot[:, 0], rot[:, 1], rot[:, 2]


def frustum_planes(pose, frustum: Frustum) -> list[tuple[np.ndarray, float]]:
    """Inward planes ``(n, d)``: a point p is inside when ``n @ p + d >= 0`` for all."""
    eye = np.asarray(pose[:3], dtype=float)
    fwd, left, up = view_basis(*pose[3:6])
    planes = [(fwd, -(fwd @ eye) - frustum.near), (-fwd, fwd @ eye + frustum.far)]
    for half, side in ((math.radians(frustum.h_fov_deg) / 2, left), (math.radians(frustum.v_fov_deg) / 2, up)):
        for sign in (1.0, -1.0):
            n = math.sin(half) * fwd + sign * math.cos(half) * side
            planes.append((n, -(n @ eye)))
    return planes


def visible_tiles(grid: TileGrid | TileManifest, pose, frustum: Frustum | None = None) -> tuple[int, ...]:
    """Tiles whose bounding box is not entirely outside any frustum plane.

    This is the usual conservative box/frustum test: boxes near frustum
    edges may be reported although they miss the volume.
    """
    if isinstance(grid, TileManifest):
        grid = grid.grid
    frustum = frustum or Frustum()
    pose = np.asarray(pose, dtype=float)
    if pose.shape != (6,) or not np.all(np.isfinite(pose)):
        raise ValueError("viewport must be six finite numbers")
    lo, hi = grid.tile_bounds()
    eye = pose[:3]
    if frustum.omni:
        nearest = np.clip(eye, lo, hi)
        farthest = np.where(np.abs(lo - eye) > np.abs(hi - eye), lo, hi)
        dmin = np.linalg.norm(nearest - eye, axis=1)
        dmax = np.linalg.norm(farthest - eye, axis=1)
        keep = (dmin <= frustum.far) & (dmax >= frustum.near)
        return tuple(int(i) for i in np.flatnonzero(keep))
    keep = np.ones(grid.tile_count, dtype=bool)
    for n, d in frustum_planes(pose, frustum):
        pos_vertex = np.where(n > 0, hi, lo)
        keep &= pos_vertex @ n + d >= 0
    return tuple(int(i) for i in np.flatnonzero(keep))


# -- plans ----------------------------------------------------------------------

@dataclass(frozen=True)
class Budget:
    bytes: float
    compute: float

    def __post_init__(self):
        if not (self.bytes >= 0 and self.compute >= 0):
            raise ConfigError("budgets must be >= 0")

    @classmethod
    def from_bandwidth(cls, mbps: float, chunk_duration_s: float, compute: float) -> "Budget":
        return cls(bytes=max(mbps, 0.0) * 1e6 / 8.0 * chunk_duration_s, compute=compute)


@dataclass(frozen=True, eq=False)
class SelectionPlan:
    chunk: int
    levels: np.ndarray
    compressed: np.ndarray
    total_bytes: int
    total_decode_cost: float
    bytes_ok: bool
    compute_ok: bool
    visible: tuple[int, ...] = ()

    @property
    def feasible(self) -> bool:
        return self.bytes_ok and self.compute_ok

    @property
    def flipped(self) -> tuple[int, ...]:
        """Tiles sent uncompressed."""
        return tuple(int(i) for i in np.flatnonzero(~self.compressed))

    def __eq__(self, other):
        if not isinstance(other, SelectionPlan):
            return NotImplemented
        return (self.chunk == other.chunk and np.array_equal(self.levels, other.levels)
                and np.array_equal(self.compressed, other.compressed)
                and self.total_bytes == other.total_bytes
                and self.total_decode_cost == other.total_decode_cost
                and self.bytes_ok == other.bytes_ok and self.compute_ok == other.compute_ok)

    __hash__ = None


def plan_totals(manifest: TileManifest, chunk: int, levels, compressed) -> tuple[int, float]:
    """Bytes and decode cost of an assignment, summed straight from the manifest."""
    levels = np.asarray(levels)
    compressed = np.asarray(compressed, dtype=bool)
    tiles = np.arange(manifest.tile_count)
    comp = manifest.comp_bytes[tiles, chunk, levels - 1]
    uncomp = manifest.uncomp_bytes[tiles, chunk, levels - 1]
    nbytes = int(np.where(compressed, comp, uncomp).sum())
    decode = math.fsum(manifest.decode_cost[tiles, chunk, levels - 1][compressed])
    return nbytes, decode


def make_plan(manifest, chunk, levels, compressed, budget: Budget, visible=()) -> SelectionPlan:
    levels = np.asarray(levels, dtype=np.int64).copy()
    compressed = np.asarray(compressed, dtype=bool).copy()
    if levels.shape != (manifest.tile_count,) or compressed.shape != levels.shape:
        raise ValueError("plan needs one level and one flag per tile")
    if np.any(levels < 1) or np.any(levels > manifest.levels):
        raise ValueError("plan level outside 1..L")
    nbytes, decode = plan_totals(manifest, chunk, levels, compressed)
    levels.setflags(write=False)
    compressed.setflags(write=False)
    return SelectionPlan(chunk=chunk, levels=levels, compressed=compressed,
                         total_bytes=nbytes, total_decode_cost=decode,
                         bytes_ok=nbytes <= budget.bytes, compute_ok=decode <= budget.compute,
                         visible=tuple(sorted(int(v) for v in visible)))


def realize_plan(manifest: TileManifest, chunk: int, visible, action: tuple[int, bool],
                 budget: Budget) -> SelectionPlan:
    """Apply a chunk-level action to the FoV tiles and repair decode overruns.

    FoV tiles take the action's (level, compressed) variant, the rest level 1
    compressed. While the decode budget is exceeded, compressed tiles are
    switched to uncompressed in order of decode cost saved per extra byte;
    a pruning pass then switches back the largest ones that still fit. A
    byte-budget overrun is reported via ``bytes_ok`` and left for the
    caller to absorb as a longer download.
    """
    level, compressed_flag = action
    if not 1 <= level <= manifest.levels:
        raise ValueError(f"action level {level} outside 1..{manifest.levels}")
    vis = np.zeros(manifest.tile_count, dtype=bool)
    vis[list(visible)] = True
    levels = np.where(vis, level, 1)
    compressed = np.where(vis, bool(compressed_flag), True)

    tiles = np.arange(manifest.tile_count)
    cost = manifest.decode_cost[tiles, chunk, levels - 1]
    extra = (manifest.uncomp_bytes[tiles, chunk, levels - 1]
             - manifest.comp_bytes[tiles, chunk, levels - 1]).astype(float)
    _, decode = plan_totals(manifest, chunk, levels, compressed)
    if decode > budget.compute:
        ratio = cost / extra
        order = sorted(np.flatnonzero(compressed), key=lambda t: (-ratio[t], t))
        flipped = []
        for t in order:
            if decode <= budget.compute:
                break
            compressed[t] = False
            flipped.append(t)
            decode = math.fsum(cost[compressed])
        for t in sorted(flipped, key=lambda t: (-extra[t], t)):
            compressed[t] = True
            trial = math.fsum(cost[compressed])
            if trial <= budget.compute:
                decode = trial
            else:
                compressed[t] = False
    return make_plan(manifest, chunk, levels, compressed, budget, visible)


# -- exhaustive oracle ----------------------------------------------------------

def fov_quality_utility(manifest: TileManifest, chunk: int, visible, weights):
    """Per-tile share of alpha*PSNR + beta*level; tiles outside the FoV score 0."""
    vis = frozenset(int(v) for v in visible)
    share = weights.beta / len(vis) if vis else 0.0

    def utility(tile, level, compressed):
        if tile not in vis:
            return 0.0
        return weights.alpha * float(manifest.psnr[tile, chunk, level - 1]) + share * level

    return utility


def brute_force_best_plan(manifest: TileManifest, chunk: int, visible, budget: Budget,
                          utility, allowed_levels=None, allowed_flags=None,
                          guard: int = DEFAULT_GUARD, block: int = 1 << 18):
    """Exact utility maximizer over all per-tile (level, flag) assignments.

    Options per tile are ordered (level ascending, compressed first) and tile
    0 is the most significant digit, so the first maximum found is the
    lexicographically smallest one. ``allowed_levels`` and ``allowed_flags``
    optionally map a tile to the levels / compressed flags it may take.
    Returns None when nothing is feasible.
    """
    T = manifest.tile_count
    opts = []
    for t in range(T):
        lv = range(1, manifest.levels + 1) if allowed_levels is None or t not in allowed_levels \
            else sorted(allowed_levels[t])
        fl = (True, False) if allowed_flags is None or t not in allowed_flags \
            else [c for c in (True, False) if c in allowed_flags[t]]
        opts.append([(l, c) for l in lv for c in fl])
    states = 1
    for o in opts:
        states *= len(o)
        if states > guard:
            raise SelectionGuardError(f"more than {guard} enumeration states")
    k = max(len(o) for o in opts)
    U = np.full((T, k), -np.inf)
    B = np.zeros((T, k))
    D = np.zeros((T, k))
    for t, o in enumerate(opts):
        for j, (l, c) in enumerate(o):
            U[t, j] = utility(t, l, c)
            B[t, j] = manifest.comp_bytes[t, chunk, l - 1] if c else manifest.uncomp_bytes[t, chunk, l - 1]
            D[t, j] = manifest.decode_cost[t, chunk, l - 1] if c else 0.0
    radix = np.array([len(o) for o in opts], dtype=np.int64)
    weights = np.ones(T, dtype=np.int64)
    for t in range(T - 2, -1, -1):
        weights[t] = weights[t + 1] * radix[t + 1]

    best_u, best_idx = -np.inf, -1
    for start in range(0, states, block):
        idx = np.arange(start, min(start + block, states), dtype=np.int64)
        u = np.zeros(idx.size)
        b = np.zeros(idx.size)
        d = np.zeros(idx.size)
        for t in range(T):
            digit = (idx // weights[t]) % radix[t]
            u += U[t, digit]
            b += B[t, digit]
            d += D[t, digit]
        ok = (b <= budget.bytes) & (d <= budget.compute)
        if not ok.any():
            continue
        u = np.where(ok, u, -np.inf)
        j = int(np.argmax(u))
        if u[j] > best_u:
            best_u, best_idx = u[j], int(idx[j])
    if best_idx < 0:
        return None
    levels = np.empty(T, dtype=np.int64)
    compressed = np.empty(T, dtype=bool)
    for t in range(T):
        l, c = opts[t][(best_idx // weights[t]) % radix[t]]
        levels[t], compressed[t] = l, c
    return make_plan(manifest, chunk, levels, compressed, budget, visible)


def plan_utility(plan: SelectionPlan, utility) -> float:
    return float(sum(utility(t, int(plan.levels[t]), bool(plan.compressed[t]))
                     for t in range(plan.levels.size)))

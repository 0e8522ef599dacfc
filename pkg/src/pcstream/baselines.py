"""Rule-based ABR baselines: buffer-based, queue-occupancy (QUETRA-style), robust MPC.

All three return an action index over the 2L action space. None of them
reasons about decode cost, so they ask for compressed variants; the tile
selector switches tiles to uncompressed when the compute budget demands it.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ConfigError
from .sim import StreamState


@dataclass(frozen=True)
class BaselineConfig:
    reservoir_s: float = 0.1
    cushion_s: float = 1.0
    horizon: int = 5
    error_window: int = 5

    def __post_init__(self):
        if not 0 <= self.reservoir_s < self.cushion_s:
            raise ConfigError("need 0 <= reservoir < cushion")
        if self.horizon < 1 or self.error_window < 1:
            raise ConfigError("horizon and error_window must be >= 1")


def _levels(state: StreamState) -> int:
    return state.next_sizes.size // 2


def bb_select(state: StreamState, config: BaselineConfig = BaselineConfig()) -> int:
    """Map buffer occupancy linearly between the reservoir and the cushion."""
    L = _levels(state)
    buf = state.buffer_ms / 1000.0
    if buf <= config.reservoir_s:
        level = 1
    elif buf >= config.cushion_s:
        level = L
    else:
        frac = (buf - config.reservoir_s) / (config.cushion_s - config.reservoir_s)
        level = min(int(math.floor(frac * (L - 1))) + 1, L)
    return level - 1


# -- QUETRA-style ----------------------------------------------------------------

def poisson_pmf(k_max: int, rate: float) -> np.ndarray:
    k = np.arange(k_max + 1)
    if rate == 0:
        return (k == 0).astype(float)
    lg = np.array([math.lgamma(i + 1) for i in k])
    return np.exp(k * math.log(rate) - rate - lg)


def md1k_occupancy(rho: float, capacity: int) -> float:
    """Time-average number in an M/D/1/K system (K = ``capacity`` >= 1).

    Solved through the departure-epoch embedded chain: arrivals per service
    time are Poisson(``rho``).
    """
    K = int(capacity)
    if K < 1:
        raise ValueError("capacity must be >= 1")
    if rho <= 0:
        return 0.0
    if K == 1:
        # departure-epoch chain is a single state
        return rho / (1.0 + rho)
    a = poisson_pmf(K, rho)
    n = K
    P = np.zeros((n, n))
    for i in range(n):
        base = max(i - 1, 0)
        for j in range(base, n - 1):
            P[i, j] = a[j - base]
        P[i, n - 1] = max(1.0 - P[i, :n - 1].sum(), 0.0)
    A = P.T - np.eye(n)
    A[-1, :] = 1.0
    rhs = np.zeros(n)
    rhs[-1] = 1.0
    pi_d = np.linalg.solve(A, rhs)
    denom = pi_d[0] + rho
    p = np.append(pi_d / denom, 1.0 - 1.0 / denom)
    return float(np.arange(K + 1) @ p)


def quetra_select(state: StreamState, config: BaselineConfig = BaselineConfig()) -> int:
    """Pick the compressed level whose steady-state buffer sits nearest half full.

    The buffer is an M/D/1/K queue of chunks: playback serves one chunk per
    chunk duration, downloads arrive at ``throughput / bitrate`` chunks per
    chunk duration, and K is the buffer capacity in chunks.
    """
    L = _levels(state)
    bw = state.predicted_bw
    if not bw > 0:
        return 0
    K = _capacity_chunks(state)
    best, best_gap = 0, math.inf
    for level in range(1, L + 1):
        megabits = state.next_sizes[level - 1] * 8.0 / 1e6
        rho = bw / megabits * _chunk_s(state)
        gap = abs(md1k_occupancy(rho, K) - K / 2.0)
        if gap < best_gap:
            best, best_gap = level - 1, gap
    return best


def _chunk_s(state: StreamState) -> float:
    return state.chunk_duration_ms / 1000.0


def _capacity_chunks(state: StreamState) -> int:
    return max(int(state.buffer_capacity_ms // state.chunk_duration_ms), 1)


# -- robust MPC ---------------------------------------------------------------------

def harmonic_mean(values) -> float:
    v = np.asarray(values, dtype=float)
    if v.size == 0 or np.any(v <= 0):
        return 0.0
    return float(v.size / np.sum(1.0 / v))


def robust_throughput(state: StreamState, window: int = 5) -> float:
    """Harmonic-mean forecast discounted by the worst recent relative error.

    Past errors are re-derived from the history: sample i is compared with
    the harmonic mean of the ``window`` samples before it.
    """
    hist = [h for h in state.bw_history]
    if not hist:
        return state.predicted_bw
    forecast = harmonic_mean(hist[-window:])
    errs = []
    for i in range(max(len(hist) - window, 1), len(hist)):
        prior = hist[max(0, i - window):i]
        if prior and hist[i] > 0:
            errs.append(abs(harmonic_mean(prior) - hist[i]) / hist[i])
    return forecast / (1.0 + (max(errs) if errs else 0.0))


def _mpc_values(seqs, state, quality, weights, bw_mbps):
    """Total QoE of each action sequence (rows of ``seqs``) under the buffer model."""
    n, h = seqs.shape
    dur = _chunk_s(state)
    cap = state.buffer_capacity_ms / 1000.0
    buf = np.full(n, state.buffer_ms / 1000.0)
    prev = np.full(n, -1 if state.last_level is None else state.last_level)
    total = np.zeros(n)
    for k in range(h):
        a = seqs[:, k]
        dl = state.next_sizes[a] * 8.0 / 1e6 / bw_mbps if bw_mbps > 0 else np.full(n, np.inf)
        rebuf = np.maximum(dl - buf, 0.0) if state.playing else np.zeros(n)
        buf = np.minimum(np.maximum(buf - dl, 0.0) + dur, cap)
        change = np.where(prev < 0, 0.0, np.abs(a - prev))
        total += quality[a] - weights.gamma * np.where(np.isfinite(rebuf), rebuf, 1e9) - weights.delta * change
        prev = a
    return total


@lru_cache(maxsize=8)
def action_sequences(n_actions: int, horizon: int) -> np.ndarray:
    """All ``n_actions ** horizon`` sequences in lexicographic order (read-only)."""
    seqs = np.array(list(itertools.product(range(n_actions), repeat=horizon)), dtype=np.int64)
    seqs.setflags(write=False)
    return seqs


def rmpc_select(state: StreamState, quality, weights, config: BaselineConfig = BaselineConfig()) -> int:
    """First action of the best ``horizon``-chunk plan under a robust throughput estimate.

    ``quality[a]`` is the expected quality term for action ``a``; future chunks
    are assumed to repeat the next chunk's sizes and quality. Decode time is
    not modelled. Ties go to the lexicographically smallest sequence.
    """
    n_actions = state.next_sizes.size
    quality = np.asarray(quality, dtype=float)
    bw = robust_throughput(state, config.error_window)
    seqs = action_sequences(n_actions, config.horizon)
    values = _mpc_values(seqs, state, quality, weights, bw)
    return int(seqs[int(np.argmax(values)), 0])


ALGORITHMS = ("bb", "quetra", "rmpc")

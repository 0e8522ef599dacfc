"""Bandwidth, viewport and compute-capacity traces.

Bandwidth CSV: header ``ts_s,mbps``. FoV CSV: header ``ts_s,x,y,z,yaw,pitch,roll``.
Throughput between samples is linearly interpolated; past the final sample a
trace wraps around to its start (traces are replayed in a loop).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, TraceError

BW_HEADER = ["ts_s", "mbps"]
FOV_HEADER = ["ts_s", "x", "y", "z", "yaw", "pitch", "roll"]


def wrap_degrees(a):
    """Map angles onto [-180, 180)."""
    return (np.asarray(a, dtype=float) + 180.0) % 360.0 - 180.0


@dataclass(frozen=True, eq=False)
class BandwidthTrace:
    times: np.ndarray
    mbps: np.ndarray
    mobility_tag: str = ""

    def __post_init__(self):
        t = np.array(self.times, dtype=float)
        v = np.array(self.mbps, dtype=float)
        if t.ndim != 1 or t.shape != v.shape or t.size == 0:
            raise TraceError("bandwidth trace needs matching non-empty 1-D times and values")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(v))):
            raise TraceError("bandwidth trace contains non-finite values")
        if np.any(np.diff(t) <= 0):
            raise TraceError("timestamps must be strictly increasing", int(np.argmax(np.diff(t) <= 0)) + 2)
        if np.any(v < 0):
            raise TraceError("throughput must be >= 0", int(np.argmax(v < 0)) + 1)
        t.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "mbps", v)

    def __eq__(self, other):
        if not isinstance(other, BandwidthTrace):
            return NotImplemented
        return (self.mobility_tag == other.mobility_tag and np.array_equal(self.times, other.times)
                and np.array_equal(self.mbps, other.mbps))

    __hash__ = None

    @property
    def start(self) -> float:
        return float(self.times[0])

    @property
    def duration(self) -> float:
        # the last sample's value holds for one mean sampling interval
        if self.times.size == 1:
            return 1.0
        return float(self.times[-1] - self.times[0]) + float(np.mean(np.diff(self.times)))

    def throughput_at(self, t):
        """Interpolated Mbps at absolute time ``t`` (looped past the end)."""
        return np.interp(self._fold(t), self._knots_t, self._knots_v)

    # Looping is modelled over one period [start, start + duration): the
    # period's closing knot repeats the first sample so the ramp back is linear.
    @property
    def _knots_t(self):
        return np.append(self.times, self.start + self.duration)

    @property
    def _knots_v(self):
        return np.append(self.mbps, self.mbps[0])

    def _fold(self, t):
        return self.start + np.mod(np.asarray(t, dtype=float) - self.start, self.duration)

    def _cumulative_megabits(self):
        kt, kv = self._knots_t, self._knots_v
        seg = 0.5 * (kv[1:] + kv[:-1]) * np.diff(kt)
        return kt, kv, np.concatenate([[0.0], np.cumsum(seg)])

    def megabits_between(self, t0: float, t1: float) -> float:
        """Integral of throughput over [t0, t1] in megabits."""
        return self._megabits_to(t1) - self._megabits_to(t0)

    def _megabits_to(self, t: float) -> float:
        kt, kv, cum = self._cumulative_megabits()
        period = cum[-1]
        laps, rem = divmod(t - self.start, self.duration)
        x = self.start + rem
        i = min(int(np.searchsorted(kt, x, side="right")) - 1, len(kt) - 2)
        dt = x - kt[i]
        slope = (kv[i + 1] - kv[i]) / (kt[i + 1] - kt[i])
        return laps * period + cum[i] + kv[i] * dt + 0.5 * slope * dt * dt

    def time_to_transfer(self, t0: float, megabits: float) -> float:
        """Seconds needed from ``t0`` to move ``megabits`` at the trace rate."""
        if megabits <= 0:
            return 0.0
        kt, kv, cum = self._cumulative_megabits()
        period = cum[-1]
        if period <= 0:
            raise TraceError("trace carries no throughput; transfer never completes")
        target = self._megabits_to(t0) + megabits
        laps, rem = divmod(target, period)
        i = min(max(int(np.searchsorted(cum, rem, side="left")) - 1, 0), len(kt) - 2)
        need = rem - cum[i]
        a = 0.5 * (kv[i + 1] - kv[i]) / (kt[i + 1] - kt[i])
        b = kv[i]
        root = math.sqrt(max(b * b + 4.0 * a * need, 0.0))
        # stable root of a*dt^2 + b*dt = need
        dt = 2.0 * need / (b + root) if b + root > 0 else 0.0
        t_end = laps * self.duration + kt[i] + dt
        return max(0.0, t_end - t0)


@dataclass(frozen=True, eq=False)
class FovTrace:
    """Viewer poses: ``poses[:, :3]`` position (m), ``poses[:, 3:]`` yaw/pitch/roll (deg)."""

    times: np.ndarray
    poses: np.ndarray

    def __post_init__(self):
        t = np.array(self.times, dtype=float)
        p = np.array(self.poses, dtype=float)
        if t.ndim != 1 or t.size == 0 or p.shape != (t.size, 6):
            raise TraceError("FoV trace needs times (n,) and poses (n, 6)")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(p))):
            raise TraceError("FoV trace contains non-finite values")
        if np.any(np.diff(t) <= 0):
            raise TraceError("timestamps must be strictly increasing", int(np.argmax(np.diff(t) <= 0)) + 2)
        ang = p[:, 3:]
        if np.any((ang < -180) | (ang > 180)):
            raise TraceError("orientation outside [-180, 180]", int(np.argmax(np.any((ang < -180) | (ang > 180), axis=1))) + 1)
        t.setflags(write=False)
        p.setflags(write=False)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "poses", p)

    def __eq__(self, other):
        if not isinstance(other, FovTrace):
            return NotImplemented
        return np.array_equal(self.times, other.times) and np.array_equal(self.poses, other.poses)

    __hash__ = None

    @property
    def duration(self) -> float:
        if self.times.size == 1:
            return 1.0
        return float(self.times[-1] - self.times[0]) + float(np.mean(np.diff(self.times)))

    def _fold(self, t):
        return self.times[0] + np.mod(np.asarray(t, dtype=float) - self.times[0], self.duration)

    def index_at(self, t: float) -> int:
        """Index of the newest sample at or before ``t`` (looped)."""
        x = float(self._fold(t))
        return max(int(np.searchsorted(self.times, x, side="right")) - 1, 0)

    def pose_at(self, t: float) -> np.ndarray:
        return self.poses[self.index_at(t)].copy()

    def window(self, t: float, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Up to ``k`` newest samples at or before ``t``, with unfolded timestamps.

        Fewer than ``k`` come back early in the first pass through the trace.
        """
        n = self.times.size
        lap = int(np.floor((float(t) - self.times[0]) / self.duration))
        newest = max(lap, 0) * n + self.index_at(t)
        g = np.arange(max(newest - k + 1, 0), newest + 1)
        laps, idx = np.divmod(g, n)
        ts = laps * self.duration + self.times[idx]
        return ts, self.poses[idx].copy()


@dataclass(frozen=True)
class ComputeBudget:
    """Decode capacity per chunk, optionally a per-chunk schedule (looped)."""

    capacity: float
    schedule: tuple[float, ...] | None = None

    def __post_init__(self):
        if not self.capacity >= 0 or not math.isfinite(self.capacity):
            raise ConfigError("compute capacity must be finite and >= 0")
        if self.schedule is not None:
            if not self.schedule or any(not (c >= 0 and math.isfinite(c)) for c in self.schedule):
                raise ConfigError("compute schedule entries must be finite and >= 0")
            object.__setattr__(self, "schedule", tuple(float(c) for c in self.schedule))

    def at(self, chunk: int) -> float:
        if self.schedule is None:
            return self.capacity
        return self.schedule[chunk % len(self.schedule)]


# -- CSV I/O -------------------------------------------------------------------

def _read_rows(path, header):
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].lstrip().startswith("#")]
    if not rows:
        raise TraceError("empty trace file")
    if [h.strip() for h in rows[0]] != header:
        raise TraceError(f"expected header {','.join(header)}", 0)
    out = []
    for n, row in enumerate(rows[1:], start=1):
        if len(row) != len(header):
            raise TraceError(f"expected {len(header)} fields, got {len(row)}", n)
        try:
            out.append([float(x) for x in row])
        except ValueError:
            raise TraceError("non-numeric field", n) from None
    return out


def _check_monotone(rows):
    for n in range(1, len(rows)):
        if rows[n][0] <= rows[n - 1][0]:
            raise TraceError("timestamp not strictly increasing", n + 1)


def load_bandwidth_trace(path, mobility_tag: str = "") -> BandwidthTrace:
    rows = _read_rows(path, BW_HEADER)
    if not rows:
        raise TraceError("trace has no samples")
    _check_monotone(rows)
    for n, (_, v) in enumerate(rows, start=1):
        if v < 0:
            raise TraceError("negative throughput", n)
    arr = np.asarray(rows)
    return BandwidthTrace(arr[:, 0], arr[:, 1], mobility_tag)


def write_bandwidth_trace(trace: BandwidthTrace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(BW_HEADER)
        for t, v in zip(trace.times, trace.mbps):
            w.writerow([repr(float(t)), repr(float(v))])


def load_fov_trace(path) -> FovTrace:
    rows = _read_rows(path, FOV_HEADER)
    if not rows:
        raise TraceError("trace has no samples")
    _check_monotone(rows)
    for n, row in enumerate(rows, start=1):
        if any(a < -180 or a > 180 for a in row[4:]):
            raise TraceError("orientation outside [-180, 180]", n)
    arr = np.asarray(rows)
    return FovTrace(arr[:, 0], arr[:, 1:])


def write_fov_trace(trace: FovTrace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(FOV_HEADER)
        for t, p in zip(trace.times, trace.poses):
            w.writerow([repr(float(t))] + [repr(float(x)) for x in p])


# -- synthetic generators --------------------------------------------------------

@dataclass(frozen=True)
class BandwidthModel:
    """AR(1) multiplicative noise around a (possibly regime-switching) mean.

    Each sample is ``mean * regime * max(0, 1 + volatility * z)`` where ``z``
    is a unit-variance AR(1) process. With ``switch_prob > 0`` the regime
    toggles between ``1 + regime_spread`` and ``1 - regime_spread``.
    """

    mean_mbps: float = 400.0
    volatility: float = 0.2
    switch_prob: float = 0.0
    regime_spread: float = 0.5
    correlation: float = 0.8
    interval_s: float = 1.0

    def validate(self):
        if not self.mean_mbps > 0:
            raise ConfigError("mean_mbps must be > 0")
        if not self.volatility >= 0:
            raise ConfigError("volatility must be >= 0")
        if not 0 <= self.switch_prob <= 1 or not 0 <= self.regime_spread < 1:
            raise ConfigError("switch_prob must lie in [0, 1] and regime_spread in [0, 1)")
        if not -1 < self.correlation < 1 or not self.interval_s > 0:
            raise ConfigError("correlation must lie in (-1, 1) and interval_s be > 0")


def generate_synthetic_bandwidth(seed: int, model: BandwidthModel, duration_s: float,
                                 mobility_tag: str = "synthetic") -> BandwidthTrace:
    model.validate()
    if not duration_s > 0:
        raise ConfigError("duration_s must be > 0")
    n = max(int(math.ceil(duration_s / model.interval_s)), 1)
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal(n)
    rho = model.correlation
    z = np.empty(n)
    z[0] = eps[0]
    innov = math.sqrt(1.0 - rho * rho)
    for i in range(1, n):
        z[i] = rho * z[i - 1] + innov * eps[i]
    regime = np.ones(n)
    if model.switch_prob > 0:
        flips = rng.random(n) < model.switch_prob
        state = np.cumsum(flips) % 2
        start_high = rng.random() < 0.5
        high = (state == 0) if start_high else (state == 1)
        regime = np.where(high, 1.0 + model.regime_spread, 1.0 - model.regime_spread)
    values = model.mean_mbps * regime * np.maximum(0.0, 1.0 + model.volatility * z)
    times = np.arange(n) * model.interval_s
    return BandwidthTrace(times, values, mobility_tag)


@dataclass(frozen=True)
class FovModel:
    """Random walk of the 6-DoF pose, optionally mean-reverting to ``start``."""

    start: tuple[float, ...] = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    position_step: float = 0.02
    angle_step: float = 2.0
    reversion: float = 0.0
    rate_hz: float = 30.0

    def validate(self):
        if len(self.start) != 6 or not all(math.isfinite(s) for s in self.start):
            raise ConfigError("start pose must have six finite values")
        if self.position_step < 0 or self.angle_step < 0:
            raise ConfigError("step scales must be >= 0")
        if not 0 <= self.reversion <= 1 or not self.rate_hz > 0:
            raise ConfigError("reversion must lie in [0, 1] and rate_hz be > 0")


def generate_synthetic_fov(seed: int, model: FovModel, duration_s: float) -> FovTrace:
    model.validate()
    if not duration_s > 0:
        raise ConfigError("duration_s must be > 0")
    n = max(int(math.ceil(duration_s * model.rate_hz)), 1)
    rng = np.random.default_rng(seed)
    steps = rng.standard_normal((n, 6))
    steps[:, :3] *= model.position_step
    steps[:, 3:] *= model.angle_step
    start = np.asarray(model.start, dtype=float)
    start[3:] = wrap_degrees(start[3:])
    poses = np.empty((n, 6))
    cur = start.copy()
    poses[0] = cur
    for i in range(1, n):
        drift = start - cur
        drift[3:] = wrap_degrees(drift[3:])
        cur = cur + model.reversion * drift + steps[i]
        cur[3:] = wrap_degrees(cur[3:])
        poses[i] = cur
    times = np.arange(n) / model.rate_hz
    return FovTrace(times, poses)

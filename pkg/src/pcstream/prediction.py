"""Bandwidth and viewport predictors.

Bandwidth: EWMA over the trailing 30 s of throughput samples.
Viewport: each of the six pose dimensions is predicted on its own, either by
repeating the newest sample (LAST) or by a least-squares line through the
last eight samples (LR). Angles are unwrapped before fitting.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateFit, PredictionUnavailable
from .traces import wrap_degrees

DEFAULT_SMOOTHING = 0.3
DEFAULT_WINDOW_S = 30.0
DEFAULT_FOV_HISTORY = 8


@dataclass
class EwmaState:
    smoothing: float = DEFAULT_SMOOTHING
    current_estimate: float | None = None
    history_window: float = DEFAULT_WINDOW_S

    def __post_init__(self):
        if not 0 < self.smoothing <= 1:
            raise ConfigError(f"smoothing must lie in (0, 1], got {self.smoothing}")
        if not self.history_window > 0:
            raise ConfigError("history_window must be > 0")


def ewma_predict(state: EwmaState, observations, now: float | None = None) -> float:
    """Predict the next second of throughput (Mbps).

    ``observations`` is either a sequence of Mbps values (all considered in
    window) or an ``(n, 2)`` array of ``(timestamp_s, mbps)`` rows; rows older
    than ``history_window`` before ``now`` (default: the newest timestamp)
    are dropped. The recurrence starts from the oldest in-window value.
    The result is also stored in ``state.current_estimate``.
    """
    obs = np.asarray(observations, dtype=float)
    if obs.ndim == 2:
        if obs.shape[1] != 2:
            raise ValueError("timestamped observations must have shape (n, 2)")
        if obs.shape[0]:
            ref = obs[-1, 0] if now is None else now
            obs = obs[obs[:, 0] >= ref - state.history_window, 1]
        else:
            obs = obs[:, 1]
    if obs.size == 0:
        raise PredictionUnavailable("no throughput observations in window")
    a = state.smoothing
    est = obs[0]
    for x in obs[1:]:
        est = a * x + (1.0 - a) * est
    state.current_estimate = float(est)
    return float(est)


class FovWindow:
    """Ring of the most recent viewport samples (timestamp + 6 pose values)."""

    def __init__(self, capacity: int = DEFAULT_FOV_HISTORY):
        if capacity < 1:
            raise ConfigError("FoV window capacity must be >= 1")
        self.capacity = capacity
        self._times = deque(maxlen=capacity)
        self._poses = deque(maxlen=capacity)

    def push(self, t: float, pose) -> None:
        pose = np.asarray(pose, dtype=float)
        if pose.shape != (6,):
            raise ValueError("pose must have six values")
        self._times.append(float(t))
        self._poses.append(pose.copy())

    def extend(self, times, poses) -> None:
        for t, p in zip(times, poses):
            self.push(t, p)

    def __len__(self):
        return len(self._times)

    @property
    def times(self) -> np.ndarray:
        return np.array(self._times)

    @property
    def poses(self) -> np.ndarray:
        return np.array(self._poses).reshape(len(self), 6)

    @classmethod
    def from_arrays(cls, times, poses, capacity: int = DEFAULT_FOV_HISTORY) -> "FovWindow":
        w = cls(capacity)
        w.extend(times, poses)
        return w


def fov_predict_last(window: FovWindow) -> np.ndarray:
    if len(window) == 0:
        raise PredictionUnavailable("empty viewport window")
    return window.poses[-1].copy()


def fov_predict_lr(window: FovWindow, horizon: float, fallback_last: bool = False) -> np.ndarray:
    """Extrapolate each pose dimension ``horizon`` seconds past the newest sample."""
    n = len(window)
    if n == 0:
        raise PredictionUnavailable("empty viewport window")
    t = window.times
    poses = window.poses
    tc = t - t.mean()
    sxx = float(tc @ tc)
    if n < 2 or sxx <= 0.0:
        if fallback_last:
            return fov_predict_last(window)
        raise DegenerateFit("viewport window needs two distinct timestamps")
    y = poses.copy()
    y[:, 3:] = np.unwrap(y[:, 3:], period=360.0, axis=0)
    slope = tc @ (y - y.mean(axis=0)) / sxx
    pred = y.mean(axis=0) + slope * (t[-1] + horizon - t.mean())
    pred[3:] = wrap_degrees(pred[3:])
    return pred

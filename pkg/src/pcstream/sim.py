"""Trace-driven playback environment.

Per chunk: predict the viewport and bandwidth, turn the action into a tile
plan, download it over the bandwidth trace, decode it, then update the
playback buffer. Download and decode run back to back and both drain the
buffer. When the buffer would overflow, the player idles until the chunk fits.

Playback starts once the buffer reaches ``startup_threshold_ms``; time spent
before that is startup delay, not rebuffering. Over an episode

    wall clock = played content + total rebuffer + startup delay

holds, where played content is the downloaded duration minus what is still
buffered at the end.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, EpisodeFinished, PredictionUnavailable
from .media import TileManifest, action_to_choice, chunk_size_vector
from .prediction import EwmaState, FovWindow, ewma_predict, fov_predict_last, fov_predict_lr
from .qoe import ChunkOutcome, decode_penalty, qoe_score, weights_for_distance, WEIGHT_TABLE
from .tiles import Budget, Frustum, SelectionPlan, realize_plan, visible_tiles
from .traces import BandwidthTrace, ComputeBudget, FovTrace

BW_HISTORY = 12
LOG_COLUMNS = ["chunk", "level", "compressed", "bytes", "download_s", "decode_s",
               "rebuffer_s", "psnr_sum", "delta_l", "qoe"]


@dataclass(frozen=True)
class PlayerConfig:
    buffer_capacity_ms: float = 5000.0
    chunk_duration_ms: float = 330.0
    startup_threshold_ms: float | None = None  # defaults to one chunk
    seed: int = 0
    random_start: bool = True
    frustum: Frustum = field(default_factory=Frustum)
    fov_history: int = 8
    fov_predictor: str = "lr"
    ewma_smoothing: float = 0.3
    ewma_window_s: float = 30.0
    bw_prior_mbps: float = 100.0
    weight_table: tuple = WEIGHT_TABLE
    quality_floor: int = 1  # actions below this level are raised to it

    def __post_init__(self):
        if not self.chunk_duration_ms > 0:
            raise ConfigError("chunk_duration_ms must be > 0")
        if not self.buffer_capacity_ms >= self.chunk_duration_ms:
            raise ConfigError("buffer capacity must hold at least one chunk")
        thr = self.startup_threshold
        if not 0 <= thr <= self.buffer_capacity_ms:
            raise ConfigError("startup threshold must lie within [0, capacity]")
        if self.fov_predictor not in ("lr", "last"):
            raise ConfigError("fov_predictor must be 'lr' or 'last'")
        if not self.bw_prior_mbps > 0:
            raise ConfigError("bw_prior_mbps must be > 0")
        if self.quality_floor < 1:
            raise ConfigError("quality_floor must be >= 1")

    @property
    def startup_threshold(self) -> float:
        return self.chunk_duration_ms if self.startup_threshold_ms is None else self.startup_threshold_ms


@dataclass(frozen=True)
class StreamState:
    """What the agent observes before choosing the next chunk's action."""

    last_level: int | None
    buffer_ms: float
    predicted_bw: float
    last_download_s: float
    next_sizes: np.ndarray
    chunks_remaining: int
    bw_history: tuple[float, ...]
    total_chunks: int
    buffer_capacity_ms: float
    chunk_duration_ms: float = 330.0
    playing: bool = False
    wall_clock_s: float = 0.0

    def __eq__(self, other):
        if not isinstance(other, StreamState):
            return NotImplemented
        a, b = self.__dict__.copy(), other.__dict__.copy()
        sa, sb = a.pop("next_sizes"), b.pop("next_sizes")
        return a == b and np.array_equal(sa, sb)

    __hash__ = None


@dataclass(frozen=True)
class StepOutcome:
    outcome: ChunkOutcome
    action: int
    reward: float
    wall_advance_s: float
    download_s: float
    decode_s: float
    idle_s: float
    startup_s: float
    infeasible: bool
    plan: SelectionPlan
    weights: object


def state_vector(state: StreamState) -> np.ndarray:
    """Flatten a state into network features.

    Layout: 12 past throughputs (/100 Mbps, zero-padded on the left), 2L next
    chunk sizes (MB), one-hot last action over 2L, buffer / capacity,
    last download time / 10 s, remaining / total chunks.
    """
    n_actions = state.next_sizes.size
    bw = np.zeros(BW_HISTORY)
    hist = np.asarray(state.bw_history[-BW_HISTORY:], dtype=float)
    if hist.size:
        bw[-hist.size:] = hist / 100.0
    onehot = np.zeros(n_actions)
    if state.last_level is not None:
        onehot[state.last_level] = 1.0
    scalars = [state.buffer_ms / state.buffer_capacity_ms,
               state.last_download_s / 10.0,
               state.chunks_remaining / state.total_chunks]
    return np.concatenate([bw, state.next_sizes / 1e6, onehot, scalars])


def feature_length(n_actions: int) -> int:
    return BW_HISTORY + 2 * n_actions + 3


class StreamingEnv:
    """One client's playback session over a manifest and its traces."""

    def __init__(self, manifest: TileManifest, bw_trace: BandwidthTrace, fov_trace: FovTrace,
                 budget: ComputeBudget, config: PlayerConfig | None = None):
        self.manifest = manifest
        self.bw_trace = bw_trace
        self.fov_trace = fov_trace
        self.budget = budget
        self.config = config or PlayerConfig(chunk_duration_ms=manifest.chunk_duration_ms)
        if not math.isclose(self.config.chunk_duration_ms, manifest.chunk_duration_ms):
            raise ConfigError("player chunk duration differs from the manifest's")
        if self.config.quality_floor > manifest.levels:
            raise ConfigError(f"quality_floor {self.config.quality_floor} above the top level {manifest.levels}")
        video_s = manifest.chunk_count * manifest.chunk_duration_s
        if bw_trace.duration < video_s:
            raise ConfigError(f"bandwidth trace ({bw_trace.duration:.3f} s) shorter than video ({video_s:.3f} s)")
        if fov_trace.duration < video_s:
            raise ConfigError(f"viewport trace ({fov_trace.duration:.3f} s) shorter than video ({video_s:.3f} s)")
        self.rng = np.random.default_rng(self.config.seed)
        self.state: StreamState | None = None

    @property
    def n_actions(self) -> int:
        return self.manifest.n_actions

    @property
    def done(self) -> bool:
        return self.state is None or self.state.chunks_remaining == 0

    # -- episode ---------------------------------------------------------------

    def reset(self, seed: int | None = None) -> StreamState:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        start = self.bw_trace.start
        if self.config.random_start:
            start += float(self.rng.uniform(0.0, self.bw_trace.duration))
        self.t0 = start
        self.t = start
        self.buffer_ms = 0.0
        self.playing = self.config.startup_threshold <= 0
        self.startup_s = 0.0
        self.rebuffer_s = 0.0
        self.idle_s = 0.0
        self.delivered_ms = 0.0
        self.throughputs: list[tuple[float, float]] = []
        self.ewma = EwmaState(self.config.ewma_smoothing, None, self.config.ewma_window_s)
        self.log: list[dict] = []
        self.state = self._observe(last_level=None, last_download=0.0,
                                   remaining=self.manifest.chunk_count)
        return self.state

    def _fov_offset(self) -> float:
        # viewport trace runs on the same wall clock, anchored at episode start
        return self.fov_trace.times[0] - self.t0

    def _predict_pose(self, horizon_s: float) -> np.ndarray:
        ts, poses = self.fov_trace.window(self.t + self._fov_offset(), self.config.fov_history)
        win = FovWindow.from_arrays(ts, poses, self.config.fov_history)
        if self.config.fov_predictor == "last" or len(win) < 2:
            return fov_predict_last(win)
        return fov_predict_lr(win, horizon_s, fallback_last=True)

    def _predict_bw(self) -> float:
        try:
            return ewma_predict(self.ewma, np.asarray(self.throughputs).reshape(-1, 2), now=self.t)
        except PredictionUnavailable:
            return self.config.bw_prior_mbps

    def _observe(self, last_level, last_download, remaining) -> StreamState:
        if remaining > 0:
            chunk = self.manifest.chunk_count - remaining
            pose = self._predict_pose(self.buffer_ms / 1000.0)
            self.predicted_pose = pose
            self.predicted_visible = visible_tiles(self.manifest, pose, self.config.frustum)
            sizes = chunk_size_vector(self.manifest, chunk, self.predicted_visible).astype(float)
        else:
            self.predicted_pose = None
            self.predicted_visible = ()
            sizes = np.zeros(self.n_actions)
        sizes.setflags(write=False)
        return StreamState(
            last_level=last_level, buffer_ms=self.buffer_ms, predicted_bw=self._predict_bw(),
            last_download_s=last_download, next_sizes=sizes, chunks_remaining=remaining,
            bw_history=tuple(v for _, v in self.throughputs[-BW_HISTORY:]),
            total_chunks=self.manifest.chunk_count,
            buffer_capacity_ms=self.config.buffer_capacity_ms,
            chunk_duration_ms=self.manifest.chunk_duration_ms,
            playing=self.playing, wall_clock_s=self.t - self.t0,
        )

    def step(self, action: int) -> tuple[StreamState, StepOutcome]:
        state = self.state
        if state is None or state.chunks_remaining == 0:
            raise EpisodeFinished("no chunks left; call reset()")
        action = int(action)
        level, compressed = action_to_choice(action, self.manifest.levels)
        if level < self.config.quality_floor:
            level = self.config.quality_floor
            action = level - 1 + (0 if compressed else self.manifest.levels)
        m = self.manifest
        chunk = m.chunk_count - state.chunks_remaining
        dur_s = m.chunk_duration_s
        dur_ms = m.chunk_duration_ms

        capacity = self.budget.at(chunk)
        budget = Budget.from_bandwidth(state.predicted_bw, dur_s, capacity)
        plan = realize_plan(m, chunk, self.predicted_visible, (level, compressed), budget)

        megabits = plan.total_bytes * 8.0 / 1e6
        download_s = self.bw_trace.time_to_transfer(self.t, megabits)
        if plan.total_decode_cost > 0:
            decode_s = plan.total_decode_cost / capacity * dur_s
        else:
            decode_s = 0.0
        elapsed = download_s + decode_s

        rebuffer = 0.0
        startup = 0.0
        if self.playing:
            rebuffer = max(0.0, elapsed - self.buffer_ms / 1000.0)
            self.buffer_ms = max(0.0, self.buffer_ms - elapsed * 1000.0)
        else:
            startup = elapsed
        self.buffer_ms += dur_ms
        self.delivered_ms += dur_ms
        idle = 0.0
        if self.buffer_ms > self.config.buffer_capacity_ms:
            idle = (self.buffer_ms - self.config.buffer_capacity_ms) / 1000.0
            self.buffer_ms = self.config.buffer_capacity_ms
        if not self.playing and self.buffer_ms >= self.config.startup_threshold:
            self.playing = True
        advance = elapsed + idle

        if download_s > 0:
            self.throughputs.append((self.t + download_s, megabits / download_s))
        self.t += advance
        self.rebuffer_s += rebuffer
        self.startup_s += startup
        self.idle_s += idle

        # the chunk plays once the content queued ahead of it has drained
        play_at = self.t + max(self.buffer_ms - dur_ms, 0.0) / 1000.0
        pose = self.fov_trace.pose_at(play_at + self._fov_offset())
        seen = visible_tiles(m, pose, self.config.frustum)
        psnr_sum = float(sum(m.psnr[t, chunk, plan.levels[t] - 1] for t in seen))
        distance = max(float(np.linalg.norm(pose[:3] - m.grid.center)), 1e-6)
        weights = weights_for_distance(distance, self.config.weight_table)
        delta = 0.0 if state.last_level is None else float(abs(action - state.last_level))
        outcome = ChunkOutcome(fov_psnr_sum=psnr_sum, level=level, rebuffer=rebuffer,
                               level_change=delta, decode_penalty=decode_penalty(decode_s, dur_s),
                               viewer_distance=distance)
        reward = qoe_score(outcome, weights)

        step = StepOutcome(outcome=outcome, action=action, reward=reward, wall_advance_s=advance,
                           download_s=download_s, decode_s=decode_s, idle_s=idle, startup_s=startup,
                           infeasible=not plan.bytes_ok, plan=plan, weights=weights)
        self.log.append({
            "chunk": chunk, "level": level, "compressed": int(compressed),
            "bytes": plan.total_bytes, "download_s": download_s, "decode_s": decode_s,
            "rebuffer_s": rebuffer, "psnr_sum": psnr_sum, "delta_l": delta, "qoe": reward,
        })
        self.state = self._observe(last_level=action, last_download=download_s,
                                   remaining=state.chunks_remaining - 1)
        return self.state, step

    def predicted_quality(self):
        """Per-action quality term for the next chunk under the predicted viewport.

        Returns ``(scores, weights)``; ``scores[a]`` is alpha * FoV PSNR sum +
        beta * level for action ``a``. Uncompressed actions score like their
        compressed counterparts.
        """
        if self.done:
            raise EpisodeFinished("no chunks left; call reset()")
        m = self.manifest
        chunk = m.chunk_count - self.state.chunks_remaining
        distance = max(float(np.linalg.norm(self.predicted_pose[:3] - m.grid.center)), 1e-6)
        w = weights_for_distance(distance, self.config.weight_table)
        vis = list(self.predicted_visible)
        psnr = m.psnr[vis, chunk, :].sum(axis=0) if vis else np.zeros(m.levels)
        per_level = w.alpha * psnr + w.beta * np.arange(1, m.levels + 1)
        return np.concatenate([per_level, per_level]), w

    # -- accounting --------------------------------------------------------------

    @property
    def wall_clock_s(self) -> float:
        return self.t - self.t0

    @property
    def played_s(self) -> float:
        return (self.delivered_ms - self.buffer_ms) / 1000.0


def write_episode_log(rows, path, header_comment: str | None = None, columns=LOG_COLUMNS) -> None:
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.DictWriter(fh, fieldnames=list(columns))
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})

"""Distance-dependent QoE for tiled point cloud playback.

    quality = alpha * sum(PSNR over FoV tiles) + beta * level
    qoe     = quality - gamma * rebuffer_s - delta * level_change - epsilon * decode_penalty_s

The built-in coefficient rows are fitted per viewing distance (1, 2, 3 m).
Note that delta is negative in every row, so with the formula taken as
written a level change *raises* the score slightly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

from .errors import ConfigError


@dataclass(frozen=True)
class QoEWeights:
    alpha: float
    beta: float
    gamma: float
    delta: float
    epsilon: float
    distance: float

    def __post_init__(self):
        vals = (self.alpha, self.beta, self.gamma, self.delta, self.epsilon, self.distance)
        if not all(math.isfinite(v) for v in vals):
            raise ConfigError("QoE weights must be finite")


WEIGHT_TABLE = (
    QoEWeights(alpha=0.11, beta=0.61, gamma=12.58, delta=-0.13, epsilon=12.58, distance=1.0),
    QoEWeights(alpha=0.05, beta=0.12, gamma=12.68, delta=-0.01, epsilon=12.68, distance=2.0),
    QoEWeights(alpha=0.04, beta=0.10, gamma=13.29, delta=-0.05, epsilon=13.29, distance=3.0),
)


@dataclass(frozen=True)
class ChunkOutcome:
    fov_psnr_sum: float
    level: int
    rebuffer: float = 0.0
    level_change: float = 0.0
    decode_penalty: float = 0.0
    viewer_distance: float = 1.0

    def __post_init__(self):
        if self.rebuffer < 0 or self.decode_penalty < 0 or self.level_change < 0:
            raise ValueError("rebuffer, decode_penalty and level_change must be >= 0")


def quality_score(outcome: ChunkOutcome, w: QoEWeights) -> float:
    return w.alpha * outcome.fov_psnr_sum + w.beta * outcome.level


def qoe_score(outcome: ChunkOutcome, w: QoEWeights) -> float:
    return (quality_score(outcome, w)
            - w.gamma * outcome.rebuffer
            - w.delta * outcome.level_change
            - w.epsilon * outcome.decode_penalty)


def weights_for_distance(d: float, table=WEIGHT_TABLE) -> QoEWeights:
    """Row whose distance is nearest ``d``; ties go to the nearer (smaller) row."""
    if not d > 0:
        raise ConfigError(f"viewer distance must be > 0, got {d}")
    rows = sorted(table, key=lambda w: w.distance)
    return min(rows, key=lambda w: abs(w.distance - d))


def decode_penalty(decode_time: float, chunk_duration: float) -> float:
    if decode_time < 0 or chunk_duration < 0:
        raise ValueError("decode_time and chunk_duration must be >= 0")
    return max(0.0, decode_time - chunk_duration)


def load_weights(path) -> tuple[QoEWeights, ...]:
    """Read a JSON array of ``{distance_m, alpha, beta, gamma, delta, epsilon}`` rows."""
    with open(path) as fh:
        doc = json.load(fh)
    if not isinstance(doc, list) or not doc:
        raise ConfigError("weights file must hold a non-empty JSON array")
    rows = []
    for i, row in enumerate(doc):
        try:
            rows.append(QoEWeights(alpha=float(row["alpha"]), beta=float(row["beta"]),
                                   gamma=float(row["gamma"]), delta=float(row["delta"]),
                                   epsilon=float(row["epsilon"]), distance=float(row["distance_m"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"weights row {i}: {exc}") from None
        if not rows[-1].distance > 0:
            raise ConfigError(f"weights row {i}: distance_m must be > 0")
    return tuple(rows)


def save_weights(rows, path) -> None:
    with open(path, "w") as fh:
        json.dump([{"distance_m": w.distance, "alpha": w.alpha, "beta": w.beta,
                    "gamma": w.gamma, "delta": w.delta, "epsilon": w.epsilon} for w in rows],
                  fh, indent=2)

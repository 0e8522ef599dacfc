"""Actor-critic policy network with hand-written backpropagation.

Both networks share one layout. Input features are split into

* the throughput history, fed to a 1-D convolution (``filters`` kernels of
  width ``kernel``, stride 1),
* the 2L next-chunk sizes, fed to a second convolution of the same shape,
* the remaining scalars (last-action one-hot, buffer, download time,
  chunks left), fed to a dense layer of ``filters`` units,

all ReLU, concatenated into a ``hidden``-unit ReLU layer. The actor ends in
a softmax over the 2L actions, the critic in one linear unit. Parameters of
each network live in a single flat float64 vector so that updates can be
averaged and shipped as plain arrays.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, NonFiniteError, ShapeMismatch


@dataclass(frozen=True)
class Architecture:
    n_actions: int
    bw_len: int = 12
    filters: int = 128
    kernel: int = 4
    hidden: int = 128

    def __post_init__(self):
        if self.n_actions < 1 or self.filters < 1 or self.hidden < 1 or self.kernel < 1:
            raise ConfigError("architecture sizes must be >= 1")
        if self.kernel > self.bw_len or self.kernel > self.n_actions:
            raise ConfigError("convolution kernel wider than its input")

    @property
    def n_scalars(self) -> int:
        return self.n_actions + 3

    @property
    def n_features(self) -> int:
        return self.bw_len + self.n_actions + self.n_scalars

    @property
    def bw_out(self) -> int:
        return self.bw_len - self.kernel + 1

    @property
    def size_out(self) -> int:
        return self.n_actions - self.kernel + 1

    @property
    def merge_in(self) -> int:
        return (self.bw_out + self.size_out + 1) * self.filters

    def layout(self, n_out: int) -> list[tuple[str, tuple[int, ...]]]:
        k, f, h = self.kernel, self.filters, self.hidden
        return [
            ("bw_w", (k, f)), ("bw_b", (f,)),
            ("size_w", (k, f)), ("size_b", (f,)),
            ("scalar_w", (self.n_scalars, f)), ("scalar_b", (f,)),
            ("hidden_w", (self.merge_in, h)), ("hidden_b", (h,)),
            ("out_w", (h, n_out)), ("out_b", (n_out,)),
        ]

    def n_params(self, n_out: int) -> int:
        return sum(int(np.prod(s)) for _, s in self.layout(n_out))

    def to_dict(self) -> dict:
        return {"n_actions": self.n_actions, "bw_len": self.bw_len, "filters": self.filters,
                "kernel": self.kernel, "hidden": self.hidden}


def unpack(arch: Architecture, flat: np.ndarray, n_out: int) -> dict[str, np.ndarray]:
    """Named views into ``flat`` (no copies)."""
    if flat.shape != (arch.n_params(n_out),):
        raise ShapeMismatch(f"expected {arch.n_params(n_out)} parameters, got {flat.shape}")
    out, off = {}, 0
    for name, shape in arch.layout(n_out):
        size = int(np.prod(shape))
        out[name] = flat[off:off + size].reshape(shape)
        off += size
    return out


def _orthogonal(rng, rows, cols, gain):
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def init_params(arch: Architecture, n_out: int, rng, gain: float = 1.0) -> np.ndarray:
    """Orthogonal hidden weights, zero biases, zero output head."""
    flat = np.zeros(arch.n_params(n_out))
    p = unpack(arch, flat, n_out)
    for name in ("bw_w", "size_w", "scalar_w", "hidden_w"):
        rows, cols = p[name].shape
        p[name][...] = _orthogonal(rng, rows, cols, gain)
    return flat


def _split(arch: Architecture, X):
    b = arch.bw_len
    s = b + arch.n_actions
    return X[:, :b], X[:, b:s], X[:, s:]


def forward(arch: Architecture, flat: np.ndarray, X: np.ndarray, n_out: int):
    """Batch forward pass; returns (output, cache for backward)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != arch.n_features:
        raise ShapeMismatch(f"expected {arch.n_features} features, got {X.shape[1]}")
    if not np.all(np.isfinite(X)):
        raise NonFiniteError("non-finite input features")
    p = unpack(arch, flat, n_out)
    xb, xs, xc = _split(arch, X)
    wb = sliding_window_view(xb, arch.kernel, axis=1)       # (B, bw_out, k)
    ws = sliding_window_view(xs, arch.kernel, axis=1)       # (B, size_out, k)
    zb = wb @ p["bw_w"] + p["bw_b"]
    zs = ws @ p["size_w"] + p["size_b"]
    zc = xc @ p["scalar_w"] + p["scalar_b"]
    B = X.shape[0]
    merged = np.concatenate([np.maximum(zb, 0).reshape(B, -1),
                             np.maximum(zs, 0).reshape(B, -1),
                             np.maximum(zc, 0)], axis=1)
    zh = merged @ p["hidden_w"] + p["hidden_b"]
    h = np.maximum(zh, 0)
    out = h @ p["out_w"] + p["out_b"]
    cache = (wb, ws, xc, zb, zs, zc, merged, zh, h)
    return out, cache


def backward(arch: Architecture, flat: np.ndarray, cache, dout: np.ndarray, n_out: int) -> np.ndarray:
    """Gradient of ``sum(dout * output)`` with respect to the flat parameters."""
    wb, ws, xc, zb, zs, zc, merged, zh, h = cache
    p = unpack(arch, flat, n_out)
    grad = np.zeros_like(flat)
    g = unpack(arch, grad, n_out)
    B = dout.shape[0]

    g["out_w"][...] = h.T @ dout
    g["out_b"][...] = dout.sum(axis=0)
    dzh = (dout @ p["out_w"].T) * (zh > 0)
    g["hidden_w"][...] = merged.T @ dzh
    g["hidden_b"][...] = dzh.sum(axis=0)
    dmerged = dzh @ p["hidden_w"].T

    nb = arch.bw_out * arch.filters
    ns = arch.size_out * arch.filters
    dzb = dmerged[:, :nb].reshape(zb.shape) * (zb > 0)
    dzs = dmerged[:, nb:nb + ns].reshape(zs.shape) * (zs > 0)
    dzc = dmerged[:, nb + ns:] * (zc > 0)
    g["bw_w"][...] = np.einsum("bok,bof->kf", wb, dzb)
    g["bw_b"][...] = dzb.sum(axis=(0, 1))
    g["size_w"][...] = np.einsum("bok,bof->kf", ws, dzs)
    g["size_b"][...] = dzs.sum(axis=(0, 1))
    g["scalar_w"][...] = xc.T @ dzc
    g["scalar_b"][...] = dzc.sum(axis=0)

    for name, _ in arch.layout(n_out):
        if not np.all(np.isfinite(g[name])):
            raise NonFiniteError(f"non-finite gradient in layer {name}")
    return grad


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


# -- parameters and hyperparameters ---------------------------------------------

@dataclass(eq=False)
class PolicyParams:
    arch: Architecture
    actor: np.ndarray
    critic: np.ndarray
    iteration: int = 0

    def __post_init__(self):
        self.actor = np.asarray(self.actor, dtype=np.float64)
        self.critic = np.asarray(self.critic, dtype=np.float64)
        if self.actor.shape != (self.arch.n_params(self.arch.n_actions),):
            raise ShapeMismatch("actor vector does not match the architecture")
        if self.critic.shape != (self.arch.n_params(1),):
            raise ShapeMismatch("critic vector does not match the architecture")

    @classmethod
    def initial(cls, arch: Architecture, rng, gain: float = 1.0) -> "PolicyParams":
        rng = np.random.default_rng(rng)
        return cls(arch, init_params(arch, arch.n_actions, rng, gain), init_params(arch, 1, rng, gain))

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.arch, self.actor.copy(), self.critic.copy(), self.iteration)

    def __eq__(self, other):
        if not isinstance(other, PolicyParams):
            return NotImplemented
        return (self.arch == other.arch and self.iteration == other.iteration
                and np.array_equal(self.actor, other.actor) and np.array_equal(self.critic, other.critic))

    __hash__ = None


@dataclass(frozen=True)
class Hyperparams:
    """Training constants.

    ``reward_scale`` multiplies rewards before returns are formed so that
    value targets stay O(1)-O(100). ``max_grad_norm`` clips each network's
    summed gradient (None disables). The entropy weight decays linearly from
    ``entropy_start`` to ``entropy_end`` over ``entropy_decay_steps``
    environment steps and is then held.
    """

    gamma: float = 0.99
    lr_actor: float = 1e-4
    lr_critic: float = 1e-3
    entropy_start: float = 5.0
    entropy_end: float = 0.1
    entropy_decay_steps: int = 300_000
    local_steps: int = 16
    reward_scale: float = 1.0
    max_grad_norm: float | None = None

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ConfigError("gamma must lie in (0, 1]")
        if not (self.lr_actor > 0 and self.lr_critic > 0):
            raise ConfigError("learning rates must be > 0")
        if self.local_steps < 1 or self.entropy_decay_steps < 1:
            raise ConfigError("local_steps and entropy_decay_steps must be >= 1")
        if self.entropy_start < 0 or self.entropy_end < 0 or not self.reward_scale > 0:
            raise ConfigError("entropy weights must be >= 0 and reward_scale > 0")
        if self.max_grad_norm is not None and not self.max_grad_norm > 0:
            raise ConfigError("max_grad_norm must be > 0")

    def entropy_weight(self, iteration: int) -> float:
        frac = min(max(iteration, 0) / self.entropy_decay_steps, 1.0)
        return self.entropy_start + (self.entropy_end - self.entropy_start) * frac


# -- policy ----------------------------------------------------------------------

def forward_policy(params: PolicyParams, features) -> np.ndarray:
    """Action probabilities; 1-D input gives a 1-D result."""
    X = np.asarray(features, dtype=float)
    logits, _ = forward(params.arch, params.actor, X, params.arch.n_actions)
    probs = np.exp(log_softmax(logits))
    return probs[0] if X.ndim == 1 else probs


def forward_value(params: PolicyParams, features) -> np.ndarray:
    X = np.asarray(features, dtype=float)
    v, _ = forward(params.arch, params.critic, X, 1)
    return v[0, 0] if X.ndim == 1 else v[:, 0]


def sample_action(probs, rng) -> int:
    p = np.asarray(probs, dtype=float)
    if p.ndim != 1 or p.size == 0 or not np.all(np.isfinite(p)) or np.any(p < 0) or p.sum() <= 0:
        raise ValueError("invalid action distribution")
    cdf = np.cumsum(p)
    u = rng.random() * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), p.size - 1))


# -- learning -------------------------------------------------------------------

@dataclass
class Rollout:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    bootstrap: float = 0.0
    done: bool = False

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        self.actions = np.asarray(self.actions, dtype=np.int64)
        self.rewards = np.asarray(self.rewards, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        n = self.actions.size
        if n == 0:
            raise ValueError("empty rollout")
        if self.states.shape[0] != n or self.rewards.shape != (n,) or self.values.shape != (n,):
            raise ShapeMismatch("rollout fields disagree in length")
        if not np.all(np.isfinite(self.rewards)):
            raise NonFiniteError("non-finite reward in rollout")

    def __len__(self):
        return self.actions.size


def compute_returns(rewards, gamma: float, bootstrap: float = 0.0) -> np.ndarray:
    rewards = np.asarray(rewards, dtype=float)
    out = np.empty_like(rewards)
    running = float(bootstrap)
    for t in range(rewards.size - 1, -1, -1):
        running = rewards[t] + gamma * running
        out[t] = running
    return out


@dataclass(eq=False)
class GradientUpdate:
    actor: np.ndarray
    critic: np.ndarray
    client_id: int = 0
    round_id: int = 0
    sample_count: int = 0
    stats: dict = field(default_factory=dict)

    def __post_init__(self):
        self.actor = np.asarray(self.actor, dtype=np.float64)
        self.critic = np.asarray(self.critic, dtype=np.float64)

    def __eq__(self, other):
        if not isinstance(other, GradientUpdate):
            return NotImplemented
        return (self.client_id == other.client_id and self.round_id == other.round_id
                and self.sample_count == other.sample_count
                and self.actor.shape == other.actor.shape and self.critic.shape == other.critic.shape
                and self.actor.tobytes() == other.actor.tobytes()
                and self.critic.tobytes() == other.critic.tobytes())

    __hash__ = None


def actor_objective(params: PolicyParams, states, actions, advantages, beta: float) -> float:
    """sum_t A_t log pi(a_t|s_t) + beta * H(pi(.|s_t)); the quantity ascended."""
    logits, _ = forward(params.arch, params.actor, states, params.arch.n_actions)
    logp = log_softmax(logits)
    p = np.exp(logp)
    ent = -(p * logp).sum(axis=1)
    return float((advantages * logp[np.arange(len(actions)), actions]).sum() + beta * ent.sum())


def critic_loss(params: PolicyParams, states, returns) -> float:
    v, _ = forward(params.arch, params.critic, states, 1)
    return float(((returns - v[:, 0]) ** 2).sum())


def actor_gradient(params: PolicyParams, states, actions, advantages, beta: float) -> np.ndarray:
    arch = params.arch
    logits, cache = forward(arch, params.actor, states, arch.n_actions)
    logp = log_softmax(logits)
    p = np.exp(logp)
    ent = -(p * logp).sum(axis=1, keepdims=True)
    onehot = np.zeros_like(p)
    onehot[np.arange(len(actions)), actions] = 1.0
    dlogits = advantages[:, None] * (onehot - p) - beta * p * (logp + ent)
    return backward(arch, params.actor, cache, dlogits, arch.n_actions)


def critic_gradient(params: PolicyParams, states, returns) -> np.ndarray:
    v, cache = forward(params.arch, params.critic, states, 1)
    dv = -2.0 * (returns - v[:, 0])
    return backward(params.arch, params.critic, cache, dv[:, None], 1)


def _clip(g, max_norm):
    if max_norm is None:
        return g
    n = float(np.linalg.norm(g))
    return g * (max_norm / n) if n > max_norm else g


def accumulate_gradients(params: PolicyParams, rollout: Rollout, hyper: Hyperparams,
                         iteration: int | None = None) -> GradientUpdate:
    """Actor ascent direction and critic loss gradient for one rollout.

    Advantages use the current critic's values, held fixed for the actor.
    """
    it = params.iteration if iteration is None else iteration
    beta = hyper.entropy_weight(it)
    scaled = rollout.rewards * hyper.reward_scale
    returns = compute_returns(scaled, hyper.gamma, rollout.bootstrap)
    values = forward_value(params, rollout.states)
    advantages = returns - values
    g_actor = _clip(actor_gradient(params, rollout.states, rollout.actions, advantages, beta),
                    hyper.max_grad_norm)
    g_critic = _clip(critic_gradient(params, rollout.states, returns), hyper.max_grad_norm)
    logits, _ = forward(params.arch, params.actor, rollout.states, params.arch.n_actions)
    logp = log_softmax(logits)
    stats = {
        "critic_loss": float(np.mean(advantages ** 2)),
        "entropy": float(-(np.exp(logp) * logp).sum(axis=1).mean()),
        "reward": float(rollout.rewards.mean()),
        "beta": beta,
    }
    return GradientUpdate(g_actor, g_critic, sample_count=len(rollout), stats=stats)


def apply_update(params: PolicyParams, update: GradientUpdate, hyper: Hyperparams,
                 steps: int | None = None) -> PolicyParams:
    """SGD: ascend the actor objective, descend the critic loss.

    ``steps`` advances the iteration counter (default: the update's sample count).
    """
    if update.actor.shape != params.actor.shape or update.critic.shape != params.critic.shape:
        raise ShapeMismatch("update does not match parameter shapes")
    new = PolicyParams(params.arch,
                       params.actor + hyper.lr_actor * update.actor,
                       params.critic - hyper.lr_critic * update.critic,
                       params.iteration + (update.sample_count if steps is None else steps))
    if not (np.all(np.isfinite(new.actor)) and np.all(np.isfinite(new.critic))):
        raise NonFiniteError("parameters became non-finite after update")
    return new


# -- checkpoints -------------------------------------------------------------------

CHECKPOINT_MAGIC = b"PCSCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(params: PolicyParams, path, extra: dict | None = None) -> None:
    """Binary checkpoint: magic, version byte, JSON header, raw little-endian doubles."""
    header = {"arch": params.arch.to_dict(), "iteration": params.iteration,
              "actor_len": int(params.actor.size), "critic_len": int(params.critic.size)}
    if extra:
        header["extra"] = extra
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + bytes([CHECKPOINT_VERSION]) + struct.pack(">I", len(hb)) + hb)
        fh.write(params.actor.astype("<f8").tobytes())
        fh.write(params.critic.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[PolicyParams, dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    n = len(CHECKPOINT_MAGIC)
    if blob[:n] != CHECKPOINT_MAGIC:
        raise ConfigError("not a checkpoint file")
    if blob[n] != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {blob[n]}")
    (hlen,) = struct.unpack(">I", blob[n + 1:n + 5])
    header = json.loads(blob[n + 5:n + 5 + hlen])
    arch = Architecture(**header["arch"])
    off = n + 5 + hlen
    na, nc = header["actor_len"], header["critic_len"]
    if len(blob) != off + 8 * (na + nc):
        raise ConfigError("checkpoint payload length mismatch")
    actor = np.frombuffer(blob, dtype="<f8", count=na, offset=off).astype(np.float64)
    critic = np.frombuffer(blob, dtype="<f8", count=nc, offset=off + 8 * na).astype(np.float64)
    return PolicyParams(arch, actor, critic, int(header["iteration"])), header.get("extra", {})

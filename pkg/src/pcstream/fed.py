"""Federated actor-critic training.

Each round the server samples ``m = max(ceil(mu * K), 1)`` clients. Every
selected client starts from a copy of the global parameters, plays
``local_steps`` chunks in its own environment and returns the summed
actor/critic gradients of that rollout. The server averages actor and
critic gradients separately (weights normalized over the participants) and
takes one SGD step on the global model. Because plain SGD is linear in the
gradient, averaging gradients here is the same as averaging the clients'
one-step updated weights.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .agent import (GradientUpdate, Hyperparams, PolicyParams, Rollout, accumulate_gradients,
                    apply_update, compute_returns, forward_policy, forward_value, sample_action)
from .errors import ConfigError, NonFiniteError, RoundError, ShapeMismatch
from .sim import StreamingEnv, state_vector

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FedConfig:
    clients: int = 1
    participation: float = 1.0
    local_steps: int = 16
    rounds: int = 100
    weights: tuple[float, ...] | None = None
    seed: int = 0
    strict_denominator: bool = False

    def __post_init__(self):
        if self.clients < 1:
            raise ConfigError("need at least one client")
        if not 0 < self.participation <= 1:
            raise ConfigError("participation ratio must lie in (0, 1]")
        if self.local_steps < 1 or self.rounds < 0:
            raise ConfigError("local_steps must be >= 1 and rounds >= 0")
        if self.weights is not None:
            if len(self.weights) != self.clients or any(not w > 0 for w in self.weights):
                raise ConfigError("need one positive weight per client")

    @property
    def per_round(self) -> int:
        return max(math.ceil(self.participation * self.clients), 1)

    def weight(self, client_id: int) -> float:
        return 1.0 if self.weights is None else float(self.weights[client_id])


def select_clients(config: FedConfig, round_id: int, rng=None) -> list[int]:
    """Uniform sample without replacement; deterministic in (seed, round)."""
    if rng is None:
        rng = np.random.default_rng([config.seed, round_id, 0x5E1EC7])
    chosen = rng.choice(config.clients, size=config.per_round, replace=False)
    return sorted(int(c) for c in chosen)


def fedavg(updates: list[GradientUpdate], weights=None, denominator: float | None = None) -> GradientUpdate:
    """Weighted mean of client updates.

    Weights are normalized over the participants unless ``denominator`` is
    given, in which case ``sum(w_k * u_k) / denominator`` is returned. Updates
    are summed in client-id order so the result does not depend on the order
    of the input list.
    """
    if not updates:
        raise ValueError("fedavg needs at least one update")
    weights = [1.0] * len(updates) if weights is None else [float(w) for w in weights]
    if len(weights) != len(updates):
        raise ValueError("one weight per update required")
    ref = updates[0]
    for u in updates:
        if u.actor.shape != ref.actor.shape or u.critic.shape != ref.critic.shape:
            raise ShapeMismatch(f"update from client {u.client_id} does not match client {ref.client_id}")
        if not (np.all(np.isfinite(u.actor)) and np.all(np.isfinite(u.critic))):
            raise NonFiniteError(f"non-finite entry in update from client {u.client_id}")
    if any(not w > 0 for w in weights):
        raise ValueError("weights must be > 0")
    pairs = sorted(zip(updates, weights),
                   key=lambda p: (p[0].client_id, p[1], p[0].actor.tobytes(), p[0].critic.tobytes()))
    total = math.fsum(weights) if denominator is None else float(denominator)
    actor = np.zeros_like(ref.actor)
    critic = np.zeros_like(ref.critic)
    for u, w in pairs:
        actor += (w / total) * u.actor
        critic += (w / total) * u.critic
    return GradientUpdate(actor, critic, client_id=-1, round_id=ref.round_id,
                          sample_count=sum(u.sample_count for u in updates))


class Client:
    """A training participant: its own environment, RNG and episode position."""

    def __init__(self, client_id: int, env: StreamingEnv, seed: int = 0):
        self.client_id = client_id
        self.env = env
        self.rng = np.random.default_rng([seed, client_id, 0xAC7])
        self.state = None
        self.episode_rewards: list[float] = []
        self.finished_episodes: list[float] = []

    def collect(self, params: PolicyParams, steps: int, hyper: Hyperparams) -> Rollout:
        """Play up to ``steps`` chunks; stops early at the end of an episode."""
        if self.state is None or self.env.done:
            self.state = self.env.reset()
            self.episode_rewards = []
        feats, actions, rewards = [], [], []
        done = False
        for _ in range(steps):
            x = state_vector(self.state)
            a = sample_action(forward_policy(params, x), self.rng)
            self.state, out = self.env.step(a)
            feats.append(x)
            actions.append(a)
            rewards.append(out.reward)
            self.episode_rewards.append(out.reward)
            if self.env.done:
                done = True
                self.finished_episodes.append(float(np.mean(self.episode_rewards)))
                break
        states = np.asarray(feats)
        bootstrap = 0.0 if done else float(forward_value(params, state_vector(self.state)))
        return Rollout(states, actions, rewards, forward_value(params, states), bootstrap, done)

    def local_update(self, params: PolicyParams, hyper: Hyperparams, steps: int,
                     round_id: int = 0) -> GradientUpdate:
        rollout = self.collect(params, steps, hyper)
        update = accumulate_gradients(params, rollout, hyper)
        update.client_id = self.client_id
        update.round_id = round_id
        return update


@dataclass
class RoundMetrics:
    round_id: int
    participants: list[int]
    mean_reward: float
    critic_loss: float
    entropy: float
    beta: float
    steps: int
    failed: list[int] = field(default_factory=list)


def run_round(global_params: PolicyParams, config: FedConfig, clients: list[Client], round_id: int,
              hyper: Hyperparams, workers: int = 1,
              local_steps: int | None = None) -> tuple[PolicyParams, RoundMetrics]:
    selected = select_clients(config, round_id)
    steps_each = config.local_steps if local_steps is None else local_steps

    def work(cid):
        return clients[cid].local_update(global_params.copy(), hyper, steps_each, round_id)

    updates, failed = [], []
    if workers > 1 and len(selected) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {cid: pool.submit(work, cid) for cid in selected}
        results = {}
        for cid, fut in futures.items():
            try:
                results[cid] = fut.result()
            except Exception:
                log.exception("client %d failed in round %d", cid, round_id)
                failed.append(cid)
        updates = [results[c] for c in selected if c in results]
    else:
        for cid in selected:
            try:
                updates.append(work(cid))
            except Exception:
                log.exception("client %d failed in round %d", cid, round_id)
                failed.append(cid)
    if not updates:
        raise RoundError(f"round {round_id}: all {len(selected)} selected clients failed")

    weights = [config.weight(u.client_id) for u in updates]
    denom = config.participation * config.clients if config.strict_denominator else None
    agg = fedavg(updates, weights, denominator=denom)
    steps = max(u.sample_count for u in updates)
    new_params = apply_update(global_params, agg, hyper, steps=steps)
    n = sum(u.sample_count for u in updates)
    # sample-weighted means; equal weights if no client reported samples
    sw = [u.sample_count for u in updates] if n > 0 else [1] * len(updates)

    def mean(key):
        return sum(u.stats[key] * w for u, w in zip(updates, sw)) / sum(sw)

    metrics = RoundMetrics(
        round_id=round_id, participants=[u.client_id for u in updates],
        mean_reward=mean("reward"), critic_loss=mean("critic_loss"), entropy=mean("entropy"),
        beta=updates[0].stats["beta"], steps=n, failed=failed,
    )
    return new_params, metrics


class FederatedTrainer:
    """Round loop over persistent clients built by ``env_factory(client_id)``."""

    def __init__(self, params: PolicyParams, config: FedConfig, env_factory, hyper: Hyperparams,
                 workers: int = 1):
        self.params = params
        self.config = config
        self.hyper = hyper
        self.workers = workers
        self.clients = [Client(k, env_factory(k), config.seed) for k in range(config.clients)]
        self.history: list[RoundMetrics] = []
        self.round_id = 0

    def run(self, rounds: int | None = None, callback=None, local_steps: int | None = None) -> PolicyParams:
        for _ in range(self.config.rounds if rounds is None else rounds):
            self.params, metrics = run_round(self.params, self.config, self.clients, self.round_id,
                                             self.hyper, self.workers, local_steps)
            self.history.append(metrics)
            if callback is not None:
                callback(self.params, metrics)
            self.round_id += 1
        return self.params

    @property
    def env_steps(self) -> int:
        return sum(m.steps for m in self.history)


class CentralizedTrainer:
    """Plain synchronous A2C on a single environment (no aggregation)."""

    def __init__(self, params: PolicyParams, env: StreamingEnv, hyper: Hyperparams, seed: int = 0,
                 client_id: int = 0):
        self.params = params
        self.hyper = hyper
        self.client = Client(client_id, env, seed)
        self.history: list[dict] = []

    def step(self, max_steps: int | None = None) -> PolicyParams:
        steps = self.hyper.local_steps if max_steps is None else min(self.hyper.local_steps, max_steps)
        rollout = self.client.collect(self.params, steps, self.hyper)
        update = accumulate_gradients(self.params, rollout, self.hyper)
        self.params = apply_update(self.params, update, self.hyper)
        self.history.append(dict(update.stats, steps=len(rollout)))
        return self.params

    def run(self, updates: int) -> PolicyParams:
        for _ in range(updates):
            self.step()
        return self.params


def critic_mc_loss(params: PolicyParams, envs, hyper: Hyperparams, episodes: int = 2,
                   seed: int = 0) -> float:
    """Critic error against Monte-Carlo returns on fresh episodes of the global policy.

    Each environment plays ``episodes`` full episodes with actions sampled
    from the policy; returns-to-go use the scaled rewards and no bootstrap.
    The result is the mean squared error pooled over all visited states.
    """
    rng = np.random.default_rng([seed, 0x10C5])
    errs = []
    for k, env in enumerate(envs):
        for ep in range(episodes):
            state = env.reset(int(rng.integers(2 ** 31)))
            feats, rewards = [], []
            while not env.done:
                x = state_vector(state)
                state, out = env.step(sample_action(forward_policy(params, x), rng))
                feats.append(x)
                rewards.append(out.reward * hyper.reward_scale)
            returns = compute_returns(rewards, hyper.gamma, 0.0)
            errs.append((forward_value(params, np.asarray(feats)) - returns) ** 2)
    return float(np.concatenate(errs).mean())

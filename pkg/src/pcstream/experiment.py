"""Declarative experiments: build environments from a spec, train, evaluate.

A spec is a JSON object. Every section is optional except ``seed``::

    {
      "algorithm": "frl",                  # frl | rl | bb | quetra | rmpc | random
      "seed": 7,
      "manifest": {"synthetic": {"grid": [3, 3, 4], "chunks": 60, ...}} | {"path": "m.json"},
      "client_defaults": {"bandwidth": SOURCE, "fov": SOURCE, "compute": {"capacity": 40}},
      "clients": [{...per-client overrides...}],   # cycled when shorter than fed.clients
                                                   # (a client may also set "quality_floor")
      "eval": {"episodes": 5, "bandwidth": SOURCE, "fov": SOURCE, "compute": {...}},
      "fed": {"clients": 4, "participation": 1.0, "local_steps": 16, "rounds": 300},
      "hyper": {...Hyperparams fields...},
      "arch": {"filters": 128, "kernel": 4, "hidden": 128},
      "player": {...PlayerConfig fields, "frustum": {...}},
      "baseline": {...BaselineConfig fields},
      "qoe_weights": "weights.json",
      "checkpoint": "model.ckpt"
    }

A trace SOURCE is ``{"path": "..."}`` or ``{"synthetic": {...model fields...}}``.
Synthetic data are seeded from the spec seed plus a role tag, so two specs
with equal seeds and sources replay identical traces.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import zlib
from dataclasses import dataclass, fields

import numpy as np

from .agent import Architecture, Hyperparams, PolicyParams, forward_policy
from .baselines import BaselineConfig, bb_select, quetra_select, rmpc_select
from .errors import ConfigError
from .fed import CentralizedTrainer, FederatedTrainer, FedConfig
from .media import SizeProfile, TileGrid, generate_synthetic_manifest, load_manifest
from .qoe import WEIGHT_TABLE, load_weights
from .sim import PlayerConfig, StreamingEnv, feature_length, state_vector
from .tiles import Frustum
from .traces import (BandwidthModel, ComputeBudget, FovModel, generate_synthetic_bandwidth,
                     generate_synthetic_fov, load_bandwidth_trace, load_fov_trace)

ALGORITHMS = ("frl", "rl", "bb", "quetra", "rmpc", "random")
LEARNED = ("frl", "rl")

DEFAULT_SPEC = {
    "algorithm": "frl",
    "manifest": {"synthetic": {
        "grid": [3, 3, 4], "tile_extent": [0.5, 0.5, 0.5], "origin": [-0.75, -0.75, 0.0],
        "chunks": 60, "base_tile_bytes": 8e6, "level_growth": None, "compression_ratio": 0.12,
        "decode_per_mb": 1.0,
    }},
    "client_defaults": {
        "bandwidth": {"synthetic": {"mean_mbps": 400.0, "volatility": 0.2}},
        "fov": {"synthetic": {"start": [-3.0, 0.0, 1.2, 0.0, 0.0, 0.0], "position_step": 0.01,
                              "angle_step": 1.5, "reversion": 0.05}},
        "compute": {"capacity": 80.0},
    },
    "clients": [],
    "eval": {"episodes": 5},
    "fed": {"clients": 4, "participation": 1.0, "local_steps": 16, "rounds": 300},
    "hyper": {"reward_scale": 0.1, "max_grad_norm": 10.0},
    "arch": {},
    "player": {},
    "baseline": {},
}


TOP_LEVEL_KEYS = frozenset(DEFAULT_SPEC) | {"seed", "checkpoint", "out", "qoe_weights"}


def derive_seed(seed: int, *tags) -> int:
    """Stable 32-bit seed from the spec seed and role tags (strings or ints)."""
    words = [int(seed) & 0xFFFFFFFF]
    for t in tags:
        words.append(zlib.crc32(t.encode()) if isinstance(t, str) else int(t) & 0xFFFFFFFF)
    return int(np.random.SeedSequence(words).generate_state(1)[0])


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and not _is_source(v):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _is_source(d):
    return "path" in d or "synthetic" in d


def _build(cls, params, what):
    params = dict(params or {})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(params) - known)
    if unknown:
        raise ConfigError(f"{what}: unknown keys {unknown}")
    for k, v in params.items():
        if isinstance(v, list):
            params[k] = tuple(v)
    try:
        return cls(**params)
    except TypeError as exc:
        raise ConfigError(f"{what}: {exc}") from None


@dataclass
class ExperimentSpec:
    doc: dict
    base_dir: str = "."

    @property
    def algorithm(self) -> str:
        return self.doc["algorithm"]

    @property
    def seed(self) -> int:
        return self.doc["seed"]

    def hash(self) -> str:
        blob = json.dumps(self.doc, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def fed_config(self) -> FedConfig:
        fed = dict(self.doc["fed"])
        fed.setdefault("seed", self.seed)
        if self.algorithm == "rl":
            fed.update(clients=1, participation=1.0, weights=None)
        return _build(FedConfig, fed, "fed")

    def hyper(self) -> Hyperparams:
        h = dict(self.doc["hyper"])
        h.setdefault("local_steps", self.doc["fed"].get("local_steps", 16))
        return _build(Hyperparams, h, "hyper")

    def baseline(self) -> BaselineConfig:
        return _build(BaselineConfig, self.doc["baseline"], "baseline")

    def resolve(self, path: str) -> str:
        import os
        return path if os.path.isabs(path) else os.path.join(self.base_dir, path)


def resolve_spec(doc: dict, overrides: dict | None = None, base_dir: str = ".") -> ExperimentSpec:
    """Fill defaults, apply flag overrides and validate."""
    if not isinstance(doc, dict):
        raise ConfigError("spec must be a JSON object")
    unknown = sorted(set(doc) - TOP_LEVEL_KEYS)
    if unknown:
        raise ConfigError(f"unknown spec keys: {', '.join(unknown)}")
    merged = _merge(DEFAULT_SPEC, doc)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key in ("algorithm", "seed", "checkpoint"):
            merged[key] = value
        elif key in ("rounds", "clients", "participation", "local_steps"):
            merged["fed"][key] = value
        else:
            raise ConfigError(f"unknown override {key}")
    if "seed" not in merged or isinstance(merged["seed"], bool) or not isinstance(merged["seed"], int):
        raise ConfigError("spec needs an integer seed")
    if merged["algorithm"] not in ALGORITHMS:
        raise ConfigError(f"algorithm must be one of {ALGORITHMS}, got {merged['algorithm']!r}")
    if not isinstance(merged.get("clients"), list):
        raise ConfigError("clients must be a list")
    eps = merged["eval"].get("episodes", 5)
    if not isinstance(eps, int) or eps < 1:
        raise ConfigError("eval.episodes must be a positive integer")
    spec = ExperimentSpec(merged, base_dir)
    spec.fed_config()
    spec.hyper()
    spec.baseline()
    player_config(spec, 330.0)
    return spec


def load_spec(path, overrides=None) -> ExperimentSpec:
    import os
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON ({exc})") from None
    return resolve_spec(doc, overrides, os.path.dirname(os.path.abspath(path)))


# -- builders ------------------------------------------------------------------

def build_manifest(spec: ExperimentSpec):
    src = spec.doc["manifest"]
    if "path" in src:
        return load_manifest(spec.resolve(src["path"]))
    if "synthetic" not in src:
        raise ConfigError("manifest needs 'path' or 'synthetic'")
    syn = dict(src["synthetic"])
    try:
        nx, ny, nz = syn.pop("grid", [3, 3, 4])
    except ValueError:
        raise ConfigError("manifest grid must be [nx, ny, nz]") from None
    grid = TileGrid(int(nx), int(ny), int(nz), tuple(syn.pop("tile_extent", (1.0, 1.0, 1.0))),
                    tuple(syn.pop("origin", (0.0, 0.0, 0.0))))
    chunks = int(syn.pop("chunks", 60))
    profile = _build(SizeProfile, syn, "manifest.synthetic")
    return generate_synthetic_manifest(derive_seed(spec.seed, "manifest"), grid, chunks, profile)


def _bandwidth(spec, src, duration_s, tag):
    if "path" in src:
        return load_bandwidth_trace(spec.resolve(src["path"]), src.get("mobility_tag", ""))
    model = _build(BandwidthModel, src.get("synthetic", {}), "bandwidth.synthetic")
    return generate_synthetic_bandwidth(derive_seed(spec.seed, "bandwidth", *tag), model,
                                        max(duration_s, src.get("duration_s", 0.0)))


def _fov(spec, src, duration_s, tag):
    if "path" in src:
        return load_fov_trace(spec.resolve(src["path"]))
    model = _build(FovModel, src.get("synthetic", {}), "fov.synthetic")
    return generate_synthetic_fov(derive_seed(spec.seed, "fov", *tag), model,
                                  max(duration_s, src.get("duration_s", 0.0)))


def _compute(src):
    src = dict(src or {})
    return ComputeBudget(float(src.get("capacity", 40.0)), src.get("schedule"))


def player_config(spec: ExperimentSpec, chunk_duration_ms: float) -> PlayerConfig:
    p = dict(spec.doc["player"])
    p.setdefault("chunk_duration_ms", chunk_duration_ms)
    if "frustum" in p:
        p["frustum"] = _build(Frustum, p["frustum"], "player.frustum")
    if "qoe_weights" in spec.doc:
        p["weight_table"] = load_weights(spec.resolve(spec.doc["qoe_weights"]))
    else:
        p.setdefault("weight_table", WEIGHT_TABLE)
    return _build(PlayerConfig, p, "player")


def client_sources(spec: ExperimentSpec, client_id: int) -> dict:
    clients = spec.doc["clients"]
    over = clients[client_id % len(clients)] if clients else {}
    return _merge(spec.doc["client_defaults"], over)


def eval_sources(spec: ExperimentSpec) -> dict:
    ev = {k: v for k, v in spec.doc["eval"].items() if k in ("bandwidth", "fov", "compute", "quality_floor")}
    return _merge(client_sources(spec, 0), ev)


def build_env(spec: ExperimentSpec, manifest, sources: dict, tag, env_seed: int) -> StreamingEnv:
    video_s = manifest.chunk_count * manifest.chunk_duration_s
    # synthetic traces are drawn longer than one video so random starts vary
    span = 4.0 * video_s + 1.0
    bw = _bandwidth(spec, sources["bandwidth"], span, tag)
    fov = _fov(spec, sources["fov"], span, tag)
    cfg = player_config(spec, manifest.chunk_duration_ms)
    over = {"seed": env_seed}
    if "quality_floor" in sources:
        over["quality_floor"] = int(sources["quality_floor"])
    cfg = PlayerConfig(**{**{f.name: getattr(cfg, f.name) for f in fields(cfg)}, **over})
    return StreamingEnv(manifest, bw, fov, _compute(sources.get("compute")), cfg)


def client_env(spec: ExperimentSpec, manifest, client_id: int) -> StreamingEnv:
    return build_env(spec, manifest, client_sources(spec, client_id), ("client", client_id),
                     derive_seed(spec.seed, "client-env", client_id))


def eval_env(spec: ExperimentSpec, manifest) -> StreamingEnv:
    return build_env(spec, manifest, eval_sources(spec), ("eval",), derive_seed(spec.seed, "eval-env"))


def architecture(spec: ExperimentSpec, n_actions: int) -> Architecture:
    return _build(Architecture, {"n_actions": n_actions, **spec.doc["arch"]}, "arch")


def replay_key(spec: ExperimentSpec) -> str:
    """Digest of everything that determines the evaluation traces and content."""
    doc = spec.doc
    key = {"seed": doc["seed"], "manifest": doc["manifest"], "eval": eval_sources(spec),
           "episodes": doc["eval"].get("episodes", 5), "player": doc["player"],
           "qoe_weights": doc.get("qoe_weights")}
    return hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()[:16]


# -- policies and episodes ----------------------------------------------------------

def make_policy(algorithm: str, params: PolicyParams | None = None,
                baseline: BaselineConfig = BaselineConfig(), rng=None):
    """Return ``policy(state, env) -> action``. Learned policies act greedily."""
    if algorithm in LEARNED:
        if params is None:
            raise ConfigError(f"algorithm {algorithm} needs trained parameters")
        return lambda state, env: int(np.argmax(forward_policy(params, state_vector(state))))
    if algorithm == "bb":
        return lambda state, env: bb_select(state, baseline)
    if algorithm == "quetra":
        return lambda state, env: quetra_select(state, baseline)
    if algorithm == "rmpc":
        def rmpc(state, env):
            quality, weights = env.predicted_quality()
            return rmpc_select(state, quality, weights, baseline)
        return rmpc
    if algorithm == "random":
        rng = np.random.default_rng(rng)
        return lambda state, env: int(rng.integers(env.n_actions))
    raise ConfigError(f"unknown algorithm {algorithm!r}")


def run_episode(env: StreamingEnv, policy, seed: int | None = None) -> list[dict]:
    state = env.reset(seed)
    while not env.done:
        state, _ = env.step(policy(state, env))
    return list(env.log)


def evaluate(spec: ExperimentSpec, params: PolicyParams | None = None, manifest=None,
             env: StreamingEnv | None = None) -> tuple[list[dict], dict]:
    """Greedy/rule evaluation over the spec's eval episodes; returns (rows, summary)."""
    manifest = manifest if manifest is not None else build_manifest(spec)
    env = env if env is not None else eval_env(spec, manifest)
    if params is not None and params.arch.n_actions != env.n_actions:
        raise ConfigError("checkpoint action space does not match the manifest")
    if params is not None and params.arch.n_features != feature_length(env.n_actions):
        raise ConfigError("checkpoint input layout does not match the manifest")
    policy = make_policy(spec.algorithm, params, spec.baseline(), derive_seed(spec.seed, "random-policy"))
    rows = []
    for ep in range(spec.doc["eval"].get("episodes", 5)):
        for r in run_episode(env, policy, derive_seed(spec.seed, "episode", ep)):
            rows.append({"episode": ep, **r})
    return rows, summarize(rows, manifest.chunk_duration_s)


def summarize(rows, chunk_duration_s: float) -> dict:
    """Aggregate a per-chunk log. Every figure is recomputable from the rows.

    ``mean_psnr`` is the mean per-chunk FoV PSNR sum (dB); bandwidth use is
    delivered megabits over played content time.
    """
    if not rows:
        raise ValueError("no chunks to summarize")
    n = len(rows)
    return {
        "chunks": n,
        "mean_qoe": math.fsum(r["qoe"] for r in rows) / n,
        "mean_level": math.fsum(r["level"] for r in rows) / n,
        "mean_psnr": math.fsum(r["psnr_sum"] for r in rows) / n,
        "total_rebuffer_s": math.fsum(r["rebuffer_s"] for r in rows),
        "mean_bandwidth_mbps": math.fsum(r["bytes"] for r in rows) * 8.0 / 1e6 / (n * chunk_duration_s),
    }


# -- training ------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: PolicyParams
    curve: list[dict]
    env_steps: int


def train(spec: ExperimentSpec, manifest=None, callback=None, workers: int = 1,
          max_env_steps: int | None = None) -> TrainResult:
    """Federated (frl) or single-agent (rl) training for ``fed.rounds`` rounds.

    For rl each round is one local rollout and update on client 0's
    environment, so curves of the two algorithms line up round for round.
    With ``max_env_steps`` training instead runs until that many environment
    steps are spent. Rounds that would overshoot get their local rollout
    shortened to the remaining share, so runs with different ``local_steps``
    end within ``clients - 1`` steps of the budget.
    """
    if spec.algorithm not in LEARNED:
        raise ConfigError(f"algorithm {spec.algorithm} is not trainable")
    manifest = manifest if manifest is not None else build_manifest(spec)
    cfg = spec.fed_config()
    hyper = spec.hyper()
    arch = architecture(spec, manifest.n_actions)
    params = PolicyParams.initial(arch, derive_seed(spec.seed, "init"))
    curve = []

    def record(round_id, steps, reward, loss, entropy, beta, participants):
        row = {"round": round_id, "env_steps": steps, "mean_reward": reward, "critic_loss": loss,
               "entropy": entropy, "beta": beta, "participants": participants}
        curve.append(row)
        if callback is not None:
            callback(row)

    if spec.algorithm == "frl":
        trainer = FederatedTrainer(params, cfg, lambda k: client_env(spec, manifest, k), hyper, workers)
        total = 0

        def on_round(p, m):
            nonlocal total
            total += m.steps
            record(m.round_id, total, m.mean_reward, m.critic_loss, m.entropy, m.beta,
                   " ".join(str(c) for c in m.participants))

        if max_env_steps is None:
            trainer.run(cfg.rounds, on_round)
        else:
            while total < max_env_steps:
                share = math.ceil((max_env_steps - total) / cfg.per_round)
                trainer.run(1, on_round, min(cfg.local_steps, share))
        return TrainResult(trainer.params, curve, total)

    trainer = CentralizedTrainer(params, client_env(spec, manifest, 0), hyper, cfg.seed, 0)
    total = 0
    r = 0
    while (r < cfg.rounds) if max_env_steps is None else (total < max_env_steps):
        trainer.step(None if max_env_steps is None else max_env_steps - total)
        h = trainer.history[-1]
        total += h["steps"]
        record(r, total, h["reward"], h["critic_loss"], h["entropy"], h["beta"], "0")
        r += 1
    return TrainResult(trainer.params, curve, total)


CURVE_COLUMNS = ["round", "env_steps", "mean_reward", "critic_loss", "entropy", "beta", "participants"]
SUMMARY_KEYS = ["mean_qoe", "mean_level", "mean_psnr", "total_rebuffer_s", "mean_bandwidth_mbps"]

"""Command-line driver: train, eval, compare, init.

Exit codes: 0 ok, 2 configuration error, 3 I/O failure while running.
Every CSV written here starts with a ``# spec_hash=...`` comment line; JSON
outputs and checkpoints carry the same hash in a ``spec_hash`` field.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys

from . import experiment as ex
from .agent import load_checkpoint, save_checkpoint
from .errors import PCStreamError
from .sim import LOG_COLUMNS

EXIT_OK, EXIT_CONFIG, EXIT_IO = 0, 2, 3
log = logging.getLogger("pcstream")


class CliConfigError(Exception):
    pass


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


def _overrides(args) -> dict:
    return {
        "seed": getattr(args, "seed", None),
        "algorithm": getattr(args, "algo", None),
        "rounds": getattr(args, "rounds", None),
        "clients": getattr(args, "clients", None),
        "participation": getattr(args, "mu", None),
        "local_steps": getattr(args, "local_epochs", None),
    }


def _load(path, overrides) -> ex.ExperimentSpec:
    try:
        return ex.load_spec(path, overrides)
    except FileNotFoundError as exc:
        raise CliConfigError(f"spec not found: {exc.filename}") from None
    except PCStreamError as exc:
        raise CliConfigError(f"{path}: {exc}") from None


def _inputs(fn, *a, **kw):
    """Run an input-loading step; bad or missing inputs are configuration errors."""
    try:
        return fn(*a, **kw)
    except FileNotFoundError as exc:
        raise CliConfigError(f"input not found: {exc.filename}") from None
    except PCStreamError as exc:
        raise CliConfigError(str(exc)) from None


def _out_dir(args, spec) -> str:
    out = args.out or spec.doc.get("out") or "."
    os.makedirs(out, exist_ok=True)
    return out


def _write_csv(path, spec_hash, columns, rows):
    with open(path, "w", newline="") as fh:
        fh.write(f"# spec_hash={spec_hash}\n")
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(v) for k, v in r.items()})


def _write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _params_for(spec, checkpoint, manifest):
    if spec.algorithm not in ex.LEARNED:
        return None
    path = checkpoint or spec.doc.get("checkpoint")
    if not path:
        raise CliConfigError(f"algorithm {spec.algorithm} needs --checkpoint")
    params, _ = _inputs(load_checkpoint, spec.resolve(path) if not checkpoint else path)
    if params.arch != ex.architecture(spec, manifest.n_actions):
        raise CliConfigError("checkpoint architecture does not match the spec")
    return params


# -- commands ----------------------------------------------------------------------

def cmd_train(args) -> int:
    spec = _load(args.spec, _overrides(args))
    if spec.algorithm not in ex.LEARNED:
        raise CliConfigError(f"train needs a learned algorithm (frl or rl), got {spec.algorithm}")
    manifest = _inputs(ex.build_manifest, spec)
    # build every client environment up front so bad trace inputs fail as config errors
    cfg = spec.fed_config()
    for k in range(cfg.clients):
        _inputs(ex.client_env, spec, manifest, k)
    out = _out_dir(args, spec)
    h = spec.hash()
    curve_path = os.path.join(out, "curve.csv")
    with open(curve_path, "w", newline="") as fh:
        fh.write(f"# spec_hash={h}\n")
        w = csv.DictWriter(fh, fieldnames=ex.CURVE_COLUMNS)
        w.writeheader()

        def on_round(row):
            w.writerow({k: _fmt(v) for k, v in row.items()})
            fh.flush()
            if args.verbose:
                log.info("round %d steps %d reward %.4f", row["round"], row["env_steps"], row["mean_reward"])

        result = ex.train(spec, manifest, on_round, workers=args.workers)
    ckpt = os.path.join(out, "model.ckpt")
    save_checkpoint(result.params, ckpt, {"spec_hash": h, "algorithm": spec.algorithm,
                                          "env_steps": result.env_steps})
    print(f"wrote {curve_path} ({len(result.curve)} rounds) and {ckpt}")
    return EXIT_OK


def cmd_eval(args) -> int:
    spec = _load(args.spec, _overrides(args))
    manifest = _inputs(ex.build_manifest, spec)
    env = _inputs(ex.eval_env, spec, manifest)
    params = _params_for(spec, args.checkpoint, manifest)
    out = _out_dir(args, spec)
    rows, summary = ex.evaluate(spec, params, manifest, env)
    h = spec.hash()
    _write_csv(os.path.join(out, "chunks.csv"), h, ["episode"] + LOG_COLUMNS, rows)
    doc = {"spec_hash": h, "algorithm": spec.algorithm, "episodes": spec.doc["eval"]["episodes"],
           **summary}
    _write_json(os.path.join(out, "summary.json"), doc)
    print(json.dumps(doc, sort_keys=True))
    return EXIT_OK


def cmd_compare(args) -> int:
    specs = [_load(p, _overrides(args) | {"algorithm": None}) for p in args.spec]
    algos = args.algo or []
    if len(specs) == 1 and len(algos) > 1:
        specs = specs * len(algos)
    elif algos and len(algos) not in (1, len(specs)):
        raise CliConfigError("give one --algo, or one per --spec")
    if algos:
        algos = algos * len(specs) if len(algos) == 1 else algos
        specs = [ex.resolve_spec(s.doc, {"algorithm": a}, s.base_dir) if s.algorithm != a else s
                 for s, a in zip(specs, algos)]
    if len(specs) < 2:
        raise CliConfigError("compare needs at least two runs")
    keys = {ex.replay_key(s) for s in specs}
    if len(keys) != 1:
        raise CliConfigError("specs do not share the same manifest, traces and seed")
    manifest = _inputs(ex.build_manifest, specs[0])
    env = _inputs(ex.eval_env, specs[0], manifest)
    table = []
    for s in specs:
        params = _params_for(s, args.checkpoint, manifest)
        _, summary = ex.evaluate(s, params, manifest, env)
        table.append({"algorithm": s.algorithm, "spec_hash": s.hash(), **summary})
    out = _out_dir(args, specs[0])
    combined = hashlib.sha256("".join(s.hash() for s in specs).encode()).hexdigest()[:16]
    path = os.path.join(out, "compare.csv")
    _write_csv(path, combined, ["algorithm", "spec_hash"] + ex.SUMMARY_KEYS, table)
    for row in table:
        print(row["algorithm"], " ".join(f"{k}={row[k]:.4f}" for k in ex.SUMMARY_KEYS))
    return EXIT_OK


def cmd_init(args) -> int:
    doc = {k: v for k, v in ex.DEFAULT_SPEC.items()}
    doc["seed"] = args.seed
    if args.algo:
        doc["algorithm"] = args.algo
    ex.resolve_spec(doc)
    _write_json(args.path, doc)
    print(f"wrote {args.path}")
    return EXIT_OK


# -- argument parsing ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pcstream", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, multi_spec=False):
        if multi_spec:
            sp.add_argument("--spec", action="append", required=True, help="spec file (repeatable)")
            sp.add_argument("--algo", action="append", choices=ex.ALGORITHMS,
                            help="algorithm override (repeatable)")
        else:
            sp.add_argument("--spec", required=True, help="experiment spec (JSON)")
            sp.add_argument("--algo", choices=ex.ALGORITHMS)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--rounds", type=int)
        sp.add_argument("--clients", type=int)
        sp.add_argument("--mu", type=float, help="participation ratio")
        sp.add_argument("--local-epochs", type=int, dest="local_epochs")

    t = sub.add_parser("train", help="train frl or rl; writes curve.csv and model.ckpt")
    common(t)
    t.add_argument("--workers", type=int, default=1, help="threads for client rollouts")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate one algorithm; writes chunks.csv and summary.json")
    common(e)
    e.add_argument("--checkpoint")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="evaluate several runs on shared traces; writes compare.csv")
    common(c, multi_spec=True)
    c.add_argument("--checkpoint", help="checkpoint for learned algorithms lacking one in their spec")
    c.set_defaults(func=cmd_compare)

    i = sub.add_parser("init", help="write a default spec file")
    i.add_argument("path")
    i.add_argument("--seed", type=int, required=True)
    i.add_argument("--algo", choices=ex.ALGORITHMS)
    i.set_defaults(func=cmd_init)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PCStreamError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

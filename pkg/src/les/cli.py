"""``les`` command line: data generation, training, scoring, LSO, benchmarks.

Settings resolve in this order, later wins: built-in defaults, the
``--config`` file (INI-style ``[section]`` headers with ``key = value``
lines), then command-line flags.

Exit codes: 0 success, 2 usage error, 3 data or model error, 4 numerical error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import math
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import grammar
from .bo import LsoMethod, lso_run, run_config, write_manifest
from .checkpoint import CheckpointError, load_checkpoint, model_checksum, save_checkpoint
from .linalg import NumericalError
from .nn import TrainingError
from .scores import (
    GradientError,
    UndefinedMetricError,
    auroc_summary,
    build_train_cache,
    eval_scores_protocol,
    les_batch,
    likelihood_batch,
    polarity_batch,
    prior_batch,
)
from .vae import TrainConfig, decode_tokens, encode_mean, train

log = logging.getLogger("les")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

DEFAULTS: dict[str, dict[str, object]] = {
    "data": {"n": 20000, "seed": 1, "max_tokens": grammar.SEQ_LEN},
    "vae": {"beta": 0.1, "epochs": 100, "lr": 1e-3, "batch": 256, "latent_dim": 16, "hidden": 256},
    "scores": {"n_per_group": 500, "ood_std": 5.0},
    "lso": {"method": "les", "lambda": 0.05, "eta": 0.8, "seeds": 5, "init_n": 500, "budget": 500, "batch": 20},
    "paths": {"dataset": "data.txt", "checkpoint": "out/model.ckpt", "out_dir": "out"},
}


class UsageError(ValueError):
    pass


def _coerce(default, raw: str, where: str):
    try:
        if isinstance(default, bool):
            return raw.strip().lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise UsageError(f"{where}: cannot parse {raw!r}") from exc
    return raw


def load_config(path: str | None) -> dict[str, dict[str, object]]:
    """Defaults overlaid with a config file; unknown sections or keys are errors."""
    cfg = {sec: dict(vals) for sec, vals in DEFAULTS.items()}
    if path is None:
        return cfg
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise UsageError(f"malformed config {path}: {exc}") from exc
    for sec in parser.sections():
        if sec not in cfg:
            raise UsageError(f"unknown config section [{sec}]")
        for key, raw in parser.items(sec):
            if key not in cfg[sec]:
                raise UsageError(f"unknown config key {sec}.{key}")
            cfg[sec][key] = _coerce(DEFAULTS[sec][key], raw, f"{sec}.{key}")
    return cfg


def _override(cfg, args, mapping: dict[str, tuple[str, str]]) -> None:
    for attr, (sec, key) in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            cfg[sec][key] = value


def _seed(cfg, args) -> int:
    return args.seed if args.seed is not None else int(cfg["data"]["seed"])


def _out_dir(cfg, args) -> Path:
    out = Path(args.out if args.out is not None else cfg["paths"]["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _say(args, text: str) -> None:
    if not args.quiet:
        print(text)


def _positive(cfg, sec: str, *keys: str) -> None:
    for key in keys:
        if not cfg[sec][key] > 0:
            raise UsageError(f"{sec}.{key} must be positive, got {cfg[sec][key]}")


def _read_dataset(path) -> list[tuple[int, ...]]:
    data = grammar.read_dataset(path)
    if not data:
        raise grammar.GrammarError(f"dataset {path} is empty")
    return data


# -- commands -------------------------------------------------------------------------


def cmd_gen_data(args, cfg) -> int:
    _override(cfg, args, {"n": ("data", "n"), "max_tokens": ("data", "max_tokens")})
    _positive(cfg, "data", "n", "max_tokens")
    rng = np.random.default_rng(_seed(cfg, args))
    seqs = [grammar.sample_expression(rng, max_tokens=int(cfg["data"]["max_tokens"])) for _ in range(int(cfg["data"]["n"]))]
    out = Path(args.out if args.out is not None else cfg["paths"]["dataset"])
    out.parent.mkdir(parents=True, exist_ok=True)
    grammar.write_dataset(out, seqs)
    _say(args, f"wrote {len(seqs)} expressions ({len(set(seqs))} distinct) to {out}")
    return EXIT_OK


def cmd_train_vae(args, cfg) -> int:
    _override(
        cfg,
        args,
        {
            "beta": ("vae", "beta"),
            "epochs": ("vae", "epochs"),
            "lr": ("vae", "lr"),
            "batch": ("vae", "batch"),
            "latent_dim": ("vae", "latent_dim"),
            "hidden": ("vae", "hidden"),
            "dataset": ("paths", "dataset"),
        },
    )
    v = cfg["vae"]
    try:
        config = TrainConfig(
            beta=float(v["beta"]),
            epochs=int(v["epochs"]),
            learning_rate=float(v["lr"]),
            batch_size=int(v["batch"]),
            seed=_seed(cfg, args),
            latent_dim=int(v["latent_dim"]),
            hidden_width=int(v["hidden"]),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    data = _read_dataset(cfg["paths"]["dataset"])
    out = _out_dir(cfg, args)
    model, history = train(data, config)
    save_checkpoint(model, out / "model.ckpt")
    with open(out / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "ce", "kl", "total"])
        for row in history:
            w.writerow([row.epoch, repr(row.ce), repr(row.kl), repr(row.total)])
    last = history[-1]
    _say(args, f"final ce {last.ce:.4f} ({last.ce / model.seq_len:.4f}/token) kl {last.kl:.4f}; checkpoint {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_eval_auroc(args, cfg) -> int:
    _override(
        cfg,
        args,
        {
            "n_per_group": ("scores", "n_per_group"),
            "ood_std": ("scores", "ood_std"),
            "dataset": ("paths", "dataset"),
            "checkpoint": ("paths", "checkpoint"),
        },
    )
    _positive(cfg, "scores", "n_per_group", "ood_std")
    model = load_checkpoint(cfg["paths"]["checkpoint"])
    data = _read_dataset(cfg["paths"]["dataset"])
    out = _out_dir(cfg, args)
    rng = np.random.default_rng(_seed(cfg, args))
    cache = build_train_cache(model, data, rng)
    rows = eval_scores_protocol(model, cache, data, rng, int(cfg["scores"]["n_per_group"]), float(cfg["scores"]["ood_std"]))
    with open(out / "scores.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group", "valid", "les", "les_capped", "likelihood", "prior", "polarity", "train_distance"])
        for r in rows:
            w.writerow([r.group, int(r.valid), repr(r.les), int(r.les_capped), repr(r.likelihood), repr(r.prior), repr(r.polarity), repr(r.train_distance)])
    summary = auroc_summary(rows)
    with open(out / "auroc.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["score", "auroc", "n_valid", "n_invalid"])
        for a in summary:
            w.writerow([a.score, repr(float(a.auroc)), a.n_valid, a.n_invalid])
    _say(args, f"{'score':<16}{'auroc':>8}")
    for a in summary:
        _say(args, f"{a.score:<16}{a.auroc:>8.4f}")
    return EXIT_OK


def _stderr(values: list[float]) -> float:
    return statistics.stdev(values) / math.sqrt(len(values)) if len(values) > 1 else 0.0


def cmd_run_lso(args, cfg) -> int:
    _override(
        cfg,
        args,
        {
            "method": ("lso", "method"),
            "lam": ("lso", "lambda"),
            "eta": ("lso", "eta"),
            "seeds": ("lso", "seeds"),
            "init_n": ("lso", "init_n"),
            "budget": ("lso", "budget"),
            "batch": ("lso", "batch"),
            "checkpoint": ("paths", "checkpoint"),
        },
    )
    c = cfg["lso"]
    try:
        method = LsoMethod(str(c["method"]).lower())
    except ValueError as exc:
        raise UsageError(f"unknown method {c['method']!r}; choose from {[m.value for m in LsoMethod]}") from exc
    _positive(cfg, "lso", "eta", "seeds", "init_n", "budget", "batch")
    if c["lambda"] < 0:
        raise UsageError("lso.lambda must be >= 0")
    if c["budget"] % c["batch"]:
        raise UsageError(f"budget {c['budget']} is not a multiple of batch {c['batch']}")
    model = load_checkpoint(cfg["paths"]["checkpoint"])
    checksum = model_checksum(model)
    out = _out_dir(cfg, args)
    base = _seed(cfg, args)

    runs, failed = [], []
    for k in range(int(c["seeds"])):
        seed = base + k
        tag = f"{method.value}_seed{seed}"
        kwargs = dict(lam=float(c["lambda"]), seed=seed, init_n=int(c["init_n"]), budget=int(c["budget"]), batch=int(c["batch"]), eta=float(c["eta"]))
        t0 = time.perf_counter()
        try:
            history = lso_run(model, method, history_path=out / f"history_{tag}.csv", **kwargs)
        except (NumericalError, np.linalg.LinAlgError, GradientError, FloatingPointError) as exc:
            log.error("seed %d failed: %s", seed, exc)
            failed.append(seed)
            continue
        write_manifest(out / f"manifest_{tag}.json", run_config(method, **kwargs), checksum, time.perf_counter() - t0)
        runs.append(history)
        _say(args, f"seed {seed}: best {history.best():.4f} valid {history.valid_fraction():.3f}")

    best = [h.best() for h in runs]
    top = [h.top_mean(20) for h in runs]
    valid = [h.valid_fraction() for h in runs]
    aggregate = {
        "method": method.value,
        "lambda": float(c["lambda"]),
        "seeds": [h.seed for h in runs],
        "failed_seeds": failed,
        "best_mean": statistics.fmean(best) if best else None,
        "best_stderr": _stderr(best) if best else None,
        "top20_mean": statistics.fmean(top) if top else None,
        "top20_stderr": _stderr(top) if top else None,
        "valid_fraction": statistics.fmean(valid) if valid else None,
    }
    (out / f"aggregate_{method.value}.json").write_text(json.dumps(aggregate, indent=2, sort_keys=True) + "\n")
    _say(args, json.dumps(aggregate, sort_keys=True))
    return EXIT_NUMERIC if failed else EXIT_OK


def _median_time(fn, reps: int = 5) -> float:
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def bench_scores(model, z: np.ndarray, reps: int = 5) -> list[tuple[str, float]]:
    """Median seconds per batch for each score on the latent batch ``z``."""
    fns = {
        "les": lambda: les_batch(model, z),
        "likelihood": lambda: likelihood_batch(model, z),
        "prior": lambda: prior_batch(z),
        "polarity": lambda: polarity_batch(model, z),
    }
    for fn in fns.values():
        fn()  # warm-up
    return [(name, _median_time(fn, reps)) for name, fn in fns.items()]


def cmd_bench(args, cfg) -> int:
    _override(cfg, args, {"checkpoint": ("paths", "checkpoint")})
    model = load_checkpoint(cfg["paths"]["checkpoint"])
    out = _out_dir(cfg, args)
    z = np.random.default_rng(_seed(cfg, args)).standard_normal((args.points, model.latent_dim))
    rows = bench_scores(model, z)
    with open(out / "bench.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["score", "seconds_per_batch", "seconds_per_point"])
        for name, t in rows:
            w.writerow([name, f"{t:.6g}", f"{t / len(z):.6g}"])
    for name, t in rows:
        _say(args, f"{name:<12}{t:>12.6f} s/batch{t / len(z):>12.3e} s/point")
    return EXIT_OK


def grid_nodes(m: int) -> np.ndarray:
    """Grid coordinates with nodes exactly at 0 and 1, spanning about [-1, 2]."""
    q = max(1, (m - 1) // 3)
    return (np.arange(m) - q) / q


def plane_basis(a: np.ndarray, b: np.ndarray, mode: str, rng: np.random.Generator):
    """Origin and two spanning vectors for the plane through the anchors.

    ``basis``: origin 0, spanned by ``a`` and ``b``. ``pair``: origin ``a``,
    first axis ``b - a``, second axis a seeded orthogonal direction of equal norm.
    """
    if mode == "basis":
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0 or nb == 0 or abs(a @ b) / (na * nb) > 1 - 1e-12:
            raise UsageError("basis anchors are zero or collinear")
        return np.zeros_like(a), a, b
    if mode != "pair":
        raise UsageError(f"unknown plane mode {mode!r}")
    e1 = b - a
    n1 = np.linalg.norm(e1)
    if n1 == 0:
        raise UsageError("start and end anchors are identical")
    r = rng.standard_normal(len(a))
    r -= (r @ e1) / (n1 * n1) * e1
    if np.linalg.norm(r) < 1e-12:
        raise UsageError("cannot build a second axis in one dimension")
    return a, e1, r * (n1 / np.linalg.norm(r))


def _anchor(model, expr: str | None, latent: str | None, name: str) -> np.ndarray:
    if (expr is None) == (latent is None):
        raise UsageError(f"give exactly one of --{name}-expr or --{name}-latent")
    if expr is not None:
        seq = grammar.tokenize(expr)
        if not grammar.is_valid(seq):
            raise UsageError(f"--{name}-expr {expr!r} is not a valid expression")
        return encode_mean(model, seq)
    try:
        z = np.array([float(t) for t in latent.split(",")])
    except ValueError as exc:
        raise UsageError(f"--{name}-latent must be comma-separated numbers") from exc
    if z.shape != (model.latent_dim,):
        raise UsageError(f"--{name}-latent has {len(z)} values, model latent dimension is {model.latent_dim}")
    return z


def cmd_grid(args, cfg) -> int:
    _override(cfg, args, {"checkpoint": ("paths", "checkpoint")})
    if args.m < 2:
        raise UsageError("--m must be at least 2")
    model = load_checkpoint(cfg["paths"]["checkpoint"])
    a = _anchor(model, args.a_expr, args.a_latent, "a")
    b = _anchor(model, args.b_expr, args.b_latent, "b")
    origin, e1, e2 = plane_basis(a, b, args.plane, np.random.default_rng(_seed(cfg, args)))
    out = _out_dir(cfg, args)
    nodes = grid_nodes(args.m)
    uu, vv = np.meshgrid(nodes, nodes, indexing="ij")
    z = origin + uu.reshape(-1, 1) * e1 + vv.reshape(-1, 1) * e2
    les_vals, _ = les_batch(model, z)
    valid = [grammar.is_valid(t) for t in decode_tokens(model, z)]
    with open(out / "grid.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["u", "v", "les", "valid"])
        for u, v, s, ok in zip(uu.ravel(), vv.ravel(), les_vals, valid):
            w.writerow([repr(float(u)), repr(float(v)), repr(float(s)), int(ok)])
    _say(args, f"wrote {len(z)} grid cells ({sum(valid)} valid) to {out / 'grid.csv'}")
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------------


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # Subcommands repeat the global flags with suppressed defaults so a value
    # given before the subcommand name is not reset.
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI-style config file; flags override it", **kw)
    common.add_argument("--seed", type=int, help="random seed (default: [data] seed)", **kw)
    common.add_argument("--out", "--out-dir", dest="out", help="output file (gen-data) or directory", **kw)
    common.add_argument("--quiet", action="store_true", help="print nothing on success", **kw)
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags(suppress=True)
    p = argparse.ArgumentParser(prog="les", description="Latent Exploration Score tools", parents=[_global_flags(suppress=False)])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="sample expressions to a dataset file")
    g.add_argument("--n", type=int)
    g.add_argument("--max-tokens", dest="max_tokens", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train-vae", parents=[common], help="train the VAE and write a checkpoint")
    t.add_argument("--dataset")
    t.add_argument("--beta", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch", type=int)
    t.add_argument("--latent-dim", dest="latent_dim", type=int)
    t.add_argument("--hidden", type=int)
    t.set_defaults(func=cmd_train_vae)

    e = sub.add_parser("eval-auroc", parents=[common], help="score train/prior/OOD latents and report AUROC")
    e.add_argument("--checkpoint")
    e.add_argument("--dataset")
    e.add_argument("--n-per-group", dest="n_per_group", type=int)
    e.add_argument("--ood-std", dest="ood_std", type=float)
    e.set_defaults(func=cmd_eval_auroc)

    r = sub.add_parser("run-lso", parents=[common], help="latent-space optimisation over several seeds")
    r.add_argument("--checkpoint")
    r.add_argument("--method", choices=[m.value for m in LsoMethod])
    r.add_argument("--lambda", dest="lam", type=float)
    r.add_argument("--eta", type=float)
    r.add_argument("--seeds", type=int)
    r.add_argument("--init-n", dest="init_n", type=int)
    r.add_argument("--budget", type=int)
    r.add_argument("--batch", type=int)
    r.set_defaults(func=cmd_run_lso)

    b = sub.add_parser("bench", parents=[common], help="time the scores on a batch of latents")
    b.add_argument("--checkpoint")
    b.add_argument("--points", type=int, default=20)
    b.set_defaults(func=cmd_bench)

    gr = sub.add_parser("grid", parents=[common], help="LES and validity on a 2-D latent plane")
    gr.add_argument("--checkpoint")
    gr.add_argument("--plane", choices=("pair", "basis"), default="pair")
    gr.add_argument("--a-expr", dest="a_expr")
    gr.add_argument("--b-expr", dest="b_expr")
    gr.add_argument("--a-latent", dest="a_latent")
    gr.add_argument("--b-latent", dest="b_latent")
    gr.add_argument("--m", type=int, default=50)
    gr.set_defaults(func=cmd_grid)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"les: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except UndefinedMetricError as exc:
        print(f"les: UndefinedMetric: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (OSError, CheckpointError, grammar.GrammarError) as exc:
        print(f"les: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, TrainingError, GradientError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"les: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

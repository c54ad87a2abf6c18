"""Command-line front end.

Subcommands: gen-data, train, predict, solve, experiment, benchmark.
Exit codes: 0 success, 1 domain error (any MaxEntError), 2 usage error.

Configuration precedence is flags > --config JSON > built-in defaults. Every
stochastic command requires an explicit --seed; pass `--seed auto` to let the
tool pick one (the chosen value is recorded in the outputs). File outputs are
written atomically (temp file + rename).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import datagen, experiments, gp
from .closure import close_moments
from .errors import MaxEntError
from .med import MomentVector, SolverOptions, newton_solve
from .quadrature import DEFAULT_QUAD_ORDER, VelocityDomain, build_rule

_CONFIG_KEYS = ("n_moments", "v_min", "v_max", "quad_order", "b", "epsilon", "kernel", "seed", "threads")


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args, parser)
    except MaxEntError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


def _build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(
        prog="maxent-gp",
        description="Maximum-entropy moment closure with a GP surrogate for the multipliers.",
        formatter_class=fmt,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="JSON config file; flags override it")
    common.add_argument("--v-min", type=float, default=None, help="domain lower bound (default -10)")
    common.add_argument("--v-max", type=float, default=None, help="domain upper bound (default 10)")
    common.add_argument("--quad-order", type=int, default=None, help=f"quadrature order (default {DEFAULT_QUAD_ORDER})")

    p = sub.add_parser("gen-data", parents=[common], formatter_class=fmt, help="generate a training dataset")
    p.add_argument("--n", type=int, default=None, help="number of moments (4, 6 or 8; default 4)")
    p.add_argument("--count", type=int, required=True, help="number of accepted pairs")
    p.add_argument("--b", type=float, default=None, help="multiplier sampling half-width (default 10)")
    p.add_argument("--epsilon", type=float, default=None, help="standardization tolerance (default 1e-10)")
    p.add_argument("--seed", default=None, help="integer seed or 'auto' (required)")
    p.add_argument("--threads", type=int, default=None, help="worker threads (default: MAXENT_THREADS or all cores)")
    p.add_argument("--out", type=Path, required=True, help="output CSV path (sidecar .meta.json is added)")
    p.set_defaults(handler=_cmd_gen_data)

    p = sub.add_parser("train", parents=[common], formatter_class=fmt, help="train a GP model on a dataset")
    p.add_argument("--data", type=Path, required=True, help="dataset CSV produced by gen-data")
    p.add_argument("--kernel", default=None, choices=gp.KERNEL_FAMILIES, help="kernel family (default rbf)")
    p.add_argument("--m", type=int, default=None, help="train on the first M pairs only")
    p.add_argument("--starts", type=int, default=4, help="multi-start count for hyperparameter fitting")
    p.add_argument("--seed", default=None, help="integer seed or 'auto' (required)")
    p.add_argument("--out", type=Path, required=True, help="output model JSON path")
    p.set_defaults(handler=_cmd_train)

    p = sub.add_parser("predict", parents=[common], formatter_class=fmt, help="predict multipliers for raw moments")
    p.add_argument("--model", type=Path, required=True, help="model JSON produced by train")
    p.add_argument("--moments", required=True, help="comma-separated raw moments p_1..p_N")
    p.set_defaults(handler=_cmd_predict)

    p = sub.add_parser("solve", parents=[common], formatter_class=fmt, help="direct Newton solve for multipliers")
    p.add_argument("--moments", required=True, help="comma-separated raw moments p_1..p_N")
    p.add_argument("--n", type=int, default=None, help="number of moments (checked against --moments)")
    p.add_argument("--tol", type=float, default=1e-10, help="gradient tolerance")
    p.add_argument("--seed", default=None, help="integer seed or 'auto' (required; initializes the iterate)")
    p.set_defaults(handler=_cmd_solve)

    p = sub.add_parser("experiment", parents=[common], formatter_class=fmt, help="run a reproduction experiment")
    p.add_argument(
        "kind",
        choices=("bimodal", "noisy", "bgk", "bkw", "realizability", "kernels"),
        help="which experiment to run",
    )
    p.add_argument("--model", type=Path, action="append", default=[], help="model JSON (repeat per N)")
    p.add_argument("--model-m", action="append", default=[], metavar="M=PATH",
                   help="realizability only: model trained on M pairs (repeatable)")
    p.add_argument("--train-data", type=Path, default=None, help="kernels only: training dataset CSV")
    p.add_argument("--test-data", type=Path, default=None, help="kernels only: held-out dataset CSV")
    p.add_argument("--families", default="rbf,matern12,matern32,matern52", help="kernels only: families to compare")
    p.add_argument("--m-list", default="100,200,400,1000", help="kernels only: training sizes")
    p.add_argument("--family", default="D", choices=("D", "U", "S"), help="realizability only: scan family")
    p.add_argument("--noise-sigma", type=float, default=0.1, help="noisy only: noise standard deviation")
    p.add_argument("--nu", type=float, default=0.25, help="bgk only: collision frequency")
    p.add_argument("--times", default=None, help="bgk/bkw: comma-separated output times")
    p.add_argument("--seed", default=None, help="integer seed or 'auto' (required)")
    p.add_argument("--out", type=Path, required=True, help="output directory for report JSON/CSV")
    p.set_defaults(handler=_cmd_experiment)

    p = sub.add_parser("benchmark", parents=[common], formatter_class=fmt, help="GP vs Newton timing")
    p.add_argument("--model", type=Path, action="append", required=True, help="model JSON (repeat per N)")
    p.add_argument("--count", type=int, default=32, help="number of test moment vectors")
    p.add_argument("--repeats", type=int, default=5, help="timing repeats (median reported)")
    p.add_argument("--seed", default=None, help="integer seed or 'auto' (required)")
    p.set_defaults(handler=_cmd_benchmark)

    return parser


# --- helpers -----------------------------------------------------------------


def _load_config(args, parser) -> dict:
    if args.config is None:
        return {}
    try:
        doc = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as err:
        parser.error(f"cannot read config {args.config}: {err}")
    unknown = set(doc) - set(_CONFIG_KEYS)
    if unknown:
        parser.error(f"unknown config keys {sorted(unknown)}; allowed: {list(_CONFIG_KEYS)}")
    return doc


def _resolve(args, config, key, default):
    val = getattr(args, key, None)
    if val is not None:
        return val
    if key in config:
        return config[key]
    return default


def _resolve_seed(args, config, parser) -> int:
    raw = args.seed if args.seed is not None else config.get("seed")
    if raw is None:
        parser.error("this command is stochastic: pass --seed <int> or --seed auto")
    if isinstance(raw, str) and raw.lower() == "auto":
        seed = int(np.random.SeedSequence().entropy % (2**32))
        print(f"# seed auto -> {seed}", file=sys.stderr)
        return seed
    try:
        return int(raw)
    except (TypeError, ValueError):
        parser.error(f"--seed must be an integer or 'auto', got {raw!r}")


def _resolve_threads(args, config) -> int:
    val = getattr(args, "threads", None)
    if val is not None:
        return val
    if "threads" in config:
        return int(config["threads"])
    env = os.environ.get("MAXENT_THREADS")
    if env:
        return int(env)
    return os.cpu_count() or 1


def _resolve_rule(args, config):
    domain = VelocityDomain(
        float(_resolve(args, config, "v_min", -10.0)),
        float(_resolve(args, config, "v_max", 10.0)),
    )
    order = int(_resolve(args, config, "quad_order", DEFAULT_QUAD_ORDER))
    return build_rule(domain, order)


def _parse_moments(text: str, parser, expected_n: int | None = None) -> np.ndarray:
    try:
        vals = np.array([float(x) for x in text.split(",") if x.strip() != ""])
    except ValueError as err:
        parser.error(f"--moments must be comma-separated numbers: {err}")
    if expected_n is not None and vals.size != expected_n:
        parser.error(f"--moments has {vals.size} components but N={expected_n} was requested")
    if vals.size not in (4, 6, 8):
        parser.error(f"--moments must have 4, 6 or 8 components, got {vals.size}")
    return vals


def _load_models(paths, parser) -> list[gp.GPModel]:
    if not paths:
        parser.error("at least one --model is required")
    return [gp.load_model(p) for p in paths]


# --- command handlers -----------------------------------------------------------


def _cmd_gen_data(args, parser) -> int:
    config = _load_config(args, parser)
    seed = _resolve_seed(args, config, parser)
    rule = _resolve_rule(args, config)
    spec = datagen.SamplingSpec(
        n_moments=int(_resolve(args, config, "n", config.get("n_moments", 4))),
        b=float(_resolve(args, config, "b", 10.0)),
        epsilon=float(_resolve(args, config, "epsilon", 1e-10)),
    )
    threads = _resolve_threads(args, config)
    t0 = time.perf_counter()
    ds = datagen.generate_dataset(args.count, spec, rule=rule, seed=seed, threads=threads)
    datagen.save_dataset(ds, args.out)
    print(
        json.dumps(
            {
                "dataset": str(args.out),
                "count": ds.count,
                "n_moments": ds.n_moments,
                "seed": seed,
                "seconds": round(time.perf_counter() - t0, 3),
                "rejections": ds.rejections,
                "standardization_failures": ds.inner_failures,
            }
        )
    )
    return 0


def _cmd_train(args, parser) -> int:
    config = _load_config(args, parser)
    seed = _resolve_seed(args, config, parser)
    ds = datagen.load_dataset(args.data)
    if args.m is not None:
        ds = ds.subset(args.m)
    family = _resolve(args, config, "kernel", "rbf")
    t0 = time.perf_counter()
    model = gp.train_model(ds, family=family, opts=gp.FitOptions(n_starts=args.starts, seed=seed))
    gp.save_model(model, args.out)
    print(
        json.dumps(
            {
                "model": str(args.out),
                "family": family,
                "n_moments": model.n_moments,
                "train_count": model.train_count,
                "seed": seed,
                "seconds": round(time.perf_counter() - t0, 3),
            }
        )
    )
    return 0


def _cmd_predict(args, parser) -> int:
    config = _load_config(args, parser)
    model = gp.load_model(args.model)
    try:
        vals = np.array([float(x) for x in args.moments.split(",") if x.strip() != ""])
    except ValueError as err:
        parser.error(f"--moments must be comma-separated numbers: {err}")
    if vals.size != model.n_moments:
        parser.error(f"--moments has {vals.size} components but the model expects N={model.n_moments}")
    raw = vals
    rule = _resolve_rule(args, config)
    result = close_moments(model, MomentVector(raw), rule=rule)
    print(
        json.dumps(
            {
                "lambda": result.lambda_hat.tolist(),
                "variance": result.posterior_variance.tolist(),
                "reconstructed_moments": result.reconstructed_moments.values.tolist(),
                "mu": result.mu,
                "sigma": result.sigma,
                "out_of_box": result.out_of_box,
            }
        )
    )
    return 0


def _cmd_solve(args, parser) -> int:
    config = _load_config(args, parser)
    seed = _resolve_seed(args, config, parser)
    raw = _parse_moments(args.moments, parser, expected_n=args.n)
    rule = _resolve_rule(args, config)
    opts = SolverOptions(tol=args.tol)
    t0 = time.perf_counter()
    res = newton_solve(MomentVector(raw), opts=opts, rng_seed=seed, rule=rule)
    print(
        json.dumps(
            {
                "lambda": res.lam.tolist(),
                "iterations": res.iterations,
                "grad_norm": res.grad_norm,
                "seed": seed,
                "seconds": round(time.perf_counter() - t0, 6),
            }
        )
    )
    return 0


def _parse_times(text):
    return tuple(float(x) for x in text.split(",") if x.strip() != "")


def _cmd_experiment(args, parser) -> int:
    config = _load_config(args, parser)
    seed = _resolve_seed(args, config, parser)
    rule = build_rule(
        VelocityDomain(
            float(_resolve(args, config, "v_min", -10.0)),
            float(_resolve(args, config, "v_max", 10.0)),
        ),
        int(_resolve(args, config, "quad_order", experiments.EXPERIMENT_QUAD_ORDER)),
    )
    kind = args.kind
    if kind == "bimodal":
        report = experiments.run_bimodal(_load_models(args.model, parser), rule=rule, seed=seed)
    elif kind == "noisy":
        report = experiments.run_noisy_bimodal(
            _load_models(args.model, parser), noise_sigma=args.noise_sigma, seed=seed, rule=rule
        )
    elif kind == "bgk":
        spec = experiments.BGKSpec(nu=args.nu) if args.times is None else experiments.BGKSpec(
            nu=args.nu, times=_parse_times(args.times)
        )
        report = experiments.run_bgk(_load_models(args.model, parser), spec, rule=rule, seed=seed)
    elif kind == "bkw":
        spec = experiments.BKWSpec() if args.times is None else experiments.BKWSpec(times=_parse_times(args.times))
        report = experiments.run_bkw(_load_models(args.model, parser), spec, rule=rule, seed=seed)
    elif kind == "realizability":
        models_by_m = {}
        for item in args.model_m:
            if "=" not in item:
                parser.error(f"--model-m expects M=PATH, got {item!r}")
            m_str, path = item.split("=", 1)
            models_by_m[int(m_str)] = gp.load_model(path)
        if not models_by_m:
            parser.error("realizability needs at least one --model-m M=PATH")
        spec = experiments.RealizabilityScanSpec.for_family(args.family)
        report = experiments.realizability_scan(models_by_m, spec, rule=rule, seed=seed)
    else:  # kernels
        if args.train_data is None or args.test_data is None:
            parser.error("kernels needs --train-data and --test-data")
        ds_train = datagen.load_dataset(args.train_data)
        ds_test = datagen.load_dataset(args.test_data)
        report = experiments.kernel_comparison(
            ds_train,
            ds_test,
            families=tuple(x for x in args.families.split(",") if x),
            m_list=tuple(int(x) for x in args.m_list.split(",") if x),
            fit_opts=gp.FitOptions(seed=seed),
        )
    json_path, csv_path = report.save(args.out)
    print(json.dumps({"report": report.name, "json": str(json_path), "csv": str(csv_path), "rows": len(report.rows)}))
    return 0


def _cmd_benchmark(args, parser) -> int:
    config = _load_config(args, parser)
    seed = _resolve_seed(args, config, parser)
    rule = _resolve_rule(args, config)
    out = []
    for path in args.model:
        model = gp.load_model(path)
        spec = datagen.SamplingSpec(n_moments=model.n_moments)
        rng_rule = build_rule(rule.domain, DEFAULT_QUAD_ORDER)
        children = np.random.SeedSequence(seed).spawn(args.count)
        moments = np.array(
            [
                datagen.sample_standardized_pair(spec, rule=rng_rule, rng=np.random.default_rng(c))[1].values
                for c in children
            ]
        )
        res = experiments.benchmark_speedup(model, moments, repeats=args.repeats, rule=rule, seed=seed)
        out.append(
            {
                "model": str(path),
                "n_moments": res.n_moments,
                "train_count": res.train_count,
                "median_gp_seconds": res.median_gp_time,
                "median_newton_seconds": res.median_newton_time,
                "ratio": res.ratio,
                "cases": res.n_cases,
                "repeats": res.repeats,
                "seed": seed,
            }
        )
    print(json.dumps(out, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())

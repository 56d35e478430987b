"""Command-line interface.

Exit status is 0 on success, 1 on data errors (bad files, degenerate inputs)
and 2 on usage errors (bad flags or config keys).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .dataio import config_from_dict, load_csv, load_model, save_csv, save_model
from .dictionary import (CoherenceReport, assemble, check_bcomp_condition, coherence,
                         omp_max_sparsity)
from .errors import SharedTransferError
from .experiments import (SyntheticSpec, fit_iam, fit_kam, fit_linear, generate_synthetic,
                          predict_linear, rmse, scaling_ratios)
from .learner import THREADS_ENV, FitConfig, fit, predict_dataset
from .splines import build_design


class UsageError(Exception):
    pass


# options that may also come from --config, with their defaults
FIT_OPTIONS = {
    "L": 3, "nu": 1.0, "max_iterations": 30, "rel_objective_tol": 1e-6, "seed": 0,
    "repair_empty": True, "num_functions": 12, "degree": 3, "gram": "auto", "threads": None,
    "init": "auto", "refine_codes": True,
}


def _parse_L(text: str):
    try:
        values = [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"L must be an integer or a comma list, got {text!r}")
    return values[0] if len(values) == 1 else values


def _add_fit_options(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("fit options (flags override --config)")
    g.add_argument("--L", type=_parse_L, help="functions per covariate (int or comma list)")
    g.add_argument("--nu", type=float, help="ridge penalty on spline coefficients")
    g.add_argument("--max-iterations", dest="max_iterations", type=int)
    g.add_argument("--rel-objective-tol", dest="rel_objective_tol", type=float)
    g.add_argument("--num-functions", dest="num_functions", type=int, help="spline basis size")
    g.add_argument("--degree", type=int)
    g.add_argument("--gram", choices=["auto", "dense", "blocked"])
    g.add_argument("--init", choices=["auto", "spectral", "random"])
    g.add_argument("--no-repair", dest="repair_empty", action="store_const", const=False)
    g.add_argument("--no-refine", dest="refine_codes", action="store_const", const=False)
    g.add_argument("--config", type=Path, help="JSON file with fit options")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, help="seed for all randomness (default 0)")
    p.add_argument("--threads", type=int,
                   help=f"worker threads, 0 = all cores (default ${THREADS_ENV} or 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shared-transfer",
                                     description="Multi-task additive models with shared "
                                                 "transfer functions.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a model to a long-format CSV")
    p.add_argument("data", type=Path)
    p.add_argument("-o", "--output", type=Path, required=True, help="model JSON path")
    _add_common(p)
    _add_fit_options(p)

    p = sub.add_parser("predict", help="predict the tasks of a CSV with a fitted model")
    p.add_argument("model", type=Path)
    p.add_argument("data", type=Path)
    p.add_argument("-o", "--output", type=Path, required=True)

    p = sub.add_parser("synth", help="write a synthetic train/test pair and the truth")
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--p", type=int, default=10)
    p.add_argument("--N", type=int, default=200)
    p.add_argument("--L", type=int, default=3)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--test-n", dest="test_n", type=int, default=400)
    p.add_argument("--weight-scale", dest="weight_scale", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("coherence", help="coherence report of a model's dictionary")
    p.add_argument("model", type=Path)
    p.add_argument("data", type=Path, help="CSV whose covariates sample the atoms")

    p = sub.add_parser("eval", help="RMSE table of a model (and baselines) on a CSV")
    p.add_argument("model", type=Path)
    p.add_argument("data", type=Path)
    p.add_argument("--train", type=Path, help="training CSV (needed for baselines)")
    p.add_argument("--baselines", default="", help="comma list from iam,kam,lr")
    _add_common(p)

    p = sub.add_parser("export-tf", help="sample every transfer function on a grid")
    p.add_argument("model", type=Path)
    p.add_argument("--grid-size", dest="grid_size", type=int, default=101)
    p.add_argument("-o", "--output", type=Path, required=True)

    p = sub.add_parser("bench", help="iteration-time scaling in N and L")
    p.add_argument("--N", type=int, default=200)
    p.add_argument("--L", type=int, default=4)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--p", type=int, default=5)
    p.add_argument("--T", type=int, default=32)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    return parser


def resolve_fit_config(args) -> FitConfig:
    """Merge defaults, the optional config file and explicit flags."""
    values = dict(FIT_OPTIONS)
    if getattr(args, "config", None) is not None:
        try:
            loaded = json.loads(args.config.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = set(loaded) - set(FIT_OPTIONS)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        values.update(loaded)
    for key in FIT_OPTIONS:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    if values["threads"] is None:
        values["threads"] = _env_threads()
    try:
        return config_from_dict(values)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def _env_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "").strip()
    if not raw:
        return 1
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None


def cmd_fit(args) -> int:
    config = resolve_fit_config(args)
    data = load_csv(args.data)
    model = fit(data, config)
    save_model(model, args.output)
    for it, value in enumerate(model.objective_history, start=1):
        print(f"{it}\t{value!r}")
    return 0


def cmd_predict(args) -> int:
    model = load_model(args.model)
    data = load_csv(args.data)
    pred = predict_dataset(model, data)
    with args.output.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["task_id", "row", "prediction"])
        for m, tid in enumerate(data.task_ids):
            for i in range(data.n):
                writer.writerow([tid, i, repr(float(pred[m, i]))])
    return 0


def cmd_synth(args) -> int:
    spec = SyntheticSpec(n=args.n, p=args.p, N=args.N, L=args.L, noise_sigma=args.sigma,
                         test_n=args.test_n, weight_scale=args.weight_scale, seed=args.seed)
    train, test, truth = generate_synthetic(spec)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    save_csv(train, args.out_dir / "train.csv")
    save_csv(test, args.out_dir / "test.csv")
    doc = {
        "spec": {"n": spec.n, "p": spec.p, "N": spec.N, "L": spec.L,
                 "noise_sigma": spec.noise_sigma, "test_n": spec.test_n,
                 "weight_scale": spec.weight_scale, "seed": spec.seed},
        "bases": [{"knots": b.knots.tolist(), "column_means": b.column_means.tolist(),
                   "domain": list(b.domain), "degree": b.degree} for b in truth.bases],
        "coefficient_matrices": [B.tolist() for B in truth.coefficient_matrices],
        "tasks": [{"task_id": tid, "selected": [[k, l, c] for k, l, c in code.selected]}
                  for tid, code in zip(train.task_ids, truth.codes)],
    }
    (args.out_dir / "truth.json").write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
    return 0


def cmd_coherence(args) -> int:
    """Coherence of the model's functions sampled at a data file's covariates.

    The sign-split copies ``-B_j`` are left out since they would make every
    block trivially coherent.  With per-task covariates the worst case over
    tasks is reported.
    """
    model = load_model(args.model)
    data = load_csv(args.data)
    tasks = [0] if data.shared_covariates else range(data.N)
    reports = []
    for m in tasks:
        design = build_design(model.bases, data.covariates[m])
        reports.append(coherence(assemble([design.block(j) for j in range(model.p)],
                                          model.base_coefficients)))
    mu_intra = max(r.mu_intra for r in reports)
    mu_inter = max(r.mu_inter for r in reports)
    mu_global = max(r.mu_global for r in reports)
    out = CoherenceReport(mu_global, mu_intra, mu_inter, omp_max_sparsity(mu_global),
                          check_bcomp_condition(model.p, mu_intra, mu_inter))
    print(json.dumps(out.to_json_dict()))
    return 0


def cmd_eval(args) -> int:
    model = load_model(args.model)
    data = load_csv(args.data)
    names = [b for b in args.baselines.split(",") if b]
    bad = set(names) - {"iam", "kam", "lr"}
    if bad:
        raise UsageError(f"unknown baselines {sorted(bad)}")
    train = load_csv(args.train) if args.train else None
    if names and train is None:
        raise UsageError("--train is required to fit baselines")
    if train is not None and train.task_ids != data.task_ids:
        raise UsageError("training and evaluation files must list the same tasks")
    seed = 0 if args.seed is None else args.seed
    rows = [("proposed",
             rmse(predict_dataset(model, train), train.responses) if train else None,
             rmse(predict_dataset(model, data), data.responses))]
    cfg = model.config
    for name in names:
        if name == "iam":
            b = fit_iam(train, cfg.nu, cfg.num_functions, cfg.degree)
            rows.append((name, rmse(b.predict(train), train.responses),
                         rmse(b.predict(data), data.responses)))
        elif name == "kam":
            L = cfg.L if isinstance(cfg.L, int) else max(cfg.L)
            b = fit_kam(train, L, cfg.nu, np.random.default_rng(seed), cfg.num_functions,
                        cfg.degree)
            rows.append((name, rmse(b.predict(train), train.responses),
                         rmse(b.predict(data), data.responses)))
        else:
            fits = fit_linear(train, cfg.nu)
            rows.append((name, rmse(predict_linear(fits, train), train.responses),
                         rmse(predict_linear(fits, data), data.responses)))
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(["method", "train_rmse", "test_rmse"])
    for name, tr, te in rows:
        writer.writerow([name, "" if tr is None else repr(tr), repr(te)])
    return 0


def cmd_export_tf(args) -> int:
    model = load_model(args.model)
    if args.grid_size < 2:
        raise UsageError("--grid-size must be at least 2")
    names = model.covariate_names or [f"x{j + 1}" for j in range(model.p)]
    with args.output.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["covariate", "function", "z", "value"])
        for j, (basis, B) in enumerate(zip(model.bases, model.base_coefficients)):
            z = np.linspace(*basis.domain, args.grid_size)
            values = basis(z) @ B
            for l in range(B.shape[1]):
                for zi, v in zip(z, values[:, l]):
                    writer.writerow([names[j], l, repr(float(zi)), repr(float(v))])
    return 0


def cmd_bench(args) -> int:
    out = scaling_ratios(N=args.N, L=args.L, n=args.n, p=args.p, T=args.T,
                         repeats=args.repeats, seed=args.seed)
    print(json.dumps(out))
    return 0


COMMANDS = {"fit": cmd_fit, "predict": cmd_predict, "synth": cmd_synth,
            "coherence": cmd_coherence, "eval": cmd_eval, "export-tf": cmd_export_tf,
            "bench": cmd_bench}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (SharedTransferError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

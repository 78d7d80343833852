"""Command-line workbench.

Subcommands::

    enumerate   exact posterior by enumeration (p <= 20)
    lips        LIPS sampler: inclusion probabilities and predictions
    mc3         add/delete/swap Metropolis-Hastings baseline
    simulate    write a simulated data set
    predict     model-averaged prediction of held-out rows
    compare     repeated train/test splits with per-split ASE

Run settings may come from a JSON file (``--config``); flags given on the
command line take precedence.  Exit status is 0 on success, 2 for usage or
configuration errors, 3 for data errors and 4 for numeric failures.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .bayes import RegressionBayesFactor
from .config import build_prior, coef_prior_from_dict, load_config, parse_coef_prior, parse_prior_spec
from .errors import CapacityError, ConfigError, DataError, DomainError
from .exact import canonical_table, exact_pip, exact_posterior
from .lips import THREADS_ENV, LipsConfig, PredictionDelta, default_threads, run_lips
from .mc3 import mc3_estimate, mc3_run
from .models import ENUMERATION_LIMIT, ModelVector, popcount
from .proposal import default_lookahead
from .workbench import (
    SplitSpec, ase, fmt, load_csv, load_rows, simulate_dataset, write_csv,
)

log = logging.getLogger("pfsbma")

DEFAULTS = {
    "prior": "beta-binomial:1,1",
    "coef_prior": "g",
    "max_size": None,
    "response": None,
    "out": ".",
    "particles": 1000,
    "islands": 1,
    "lookahead": None,
    "seed": 0,
    "threads": None,
    "iterations": 100000,
    "burnin": 1000,
    "batches": 50,
    "method": "lips",
    "methods": "lips,null",
    "splits": 10,
    "n_train": None,
    "n_test": None,
    "variant": "ex3",
    "n": 100,
    "p": 100,
    "indices": None,
    "noise_sd": 10.0,
    "data": None,
    "train": None,
    "test": None,
    "predict": None,
    "output": None,
}

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


# ---------------------------------------------------------------------------
# Settings
# ---------------------------------------------------------------------------


def effective_settings(args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicitly given flags."""
    settings = dict(DEFAULTS)
    if getattr(args, "config", None):
        cfg = load_config(args.config)
        if not isinstance(cfg, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = set(cfg) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        settings.update(cfg)
    for key, val in vars(args).items():
        if val is not None and key not in ("func", "config", "verbose", "quiet"):
            settings[key] = val
    if settings["threads"] is None:
        settings["threads"] = default_threads()
    return settings


def _prior_spec(settings) -> dict:
    spec = settings["prior"]
    return dict(spec) if isinstance(spec, dict) else parse_prior_spec(str(spec))


def _coef_prior(settings, n):
    spec = settings["coef_prior"]
    if isinstance(spec, dict):
        return coef_prior_from_dict(spec, n)
    return parse_coef_prior(str(spec), n)


def _setup(dataset, settings):
    """Prior and Bayes factor for a data set; both stop at ``min(p, n - 2)`` unless told otherwise."""
    max_size = settings["max_size"]
    if max_size is None:
        max_size = dataset.regression.default_max_size()
    prior = build_prior(_prior_spec(settings), dataset.p, dataset.X, max_size)
    coef = _coef_prior(settings, dataset.n)
    bf = RegressionBayesFactor(dataset.regression, coef, max_size)
    return prior, coef, bf


def _lips_config(settings, p) -> LipsConfig:
    k = settings["lookahead"]
    return LipsConfig(particles=int(settings["particles"]), islands=int(settings["islands"]),
                      lookahead=default_lookahead(p) if k is None else int(k),
                      seed=int(settings["seed"]), threads=int(settings["threads"]))


def _out_dir(settings) -> Path:
    out = Path(settings["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc.strerror}") from None
    return out


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_summary(path: Path, record: dict) -> None:
    path.write_text(json.dumps(_jsonable(record), indent=2, sort_keys=True) + "\n")


def write_rows(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])


def write_pips(path: Path, names, pip, se, ess) -> None:
    ess = np.broadcast_to(np.asarray(ess, dtype=float), np.shape(pip))
    write_rows(path, ("variable", "pip", "se", "ess"),
               [(names[j], float(pip[j]), float(se[j]), float(ess[j])) for j in range(len(names))])


def write_predictions(path: Path, mean, se) -> None:
    write_rows(path, ("row", "mean", "se"), [(i + 1, float(m), float(s)) for i, (m, s) in enumerate(zip(mean, se))])


def _base_summary(command, settings, dataset, prior, coef) -> dict:
    return {
        "command": command,
        "version": __version__,
        "n": dataset.n,
        "p": dataset.p,
        "response": dataset.response,
        "prior": prior.name,
        "coefficient_prior": coef.describe(),
        "config": {k: v for k, v in settings.items() if k != "threads"},
    }


# ---------------------------------------------------------------------------
# Estimation shared by several subcommands
# ---------------------------------------------------------------------------


def _fit_lips(dataset, settings, x_new=None):
    prior, coef, bf = _setup(dataset, settings)
    config = _lips_config(settings, dataset.p)
    result = run_lips(prior, bf, config)
    pips = result.pips()
    pred = None
    if x_new is not None:
        pred = result.estimate(PredictionDelta(x_new, dataset.regression, coef))
        _check_finite(pred.value, "prediction")
    info = {"particles": config.particles, "islands": config.islands, "lookahead": config.lookahead,
            "island_ess": result.island_ess(), "proposals_built": result.proposals_built,
            "wall_time": result.wall_time}
    return prior, coef, (pips.value, pips.se, np.full(dataset.p, pips.ess)), pred_pair(pred), info


def pred_pair(est):
    return None if est is None else (np.asarray(est.value), np.asarray(est.se))


def _mc3_ess(pip, se):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(se > 0, pip * (1 - pip) / se ** 2, np.nan)


def _fit_mc3(dataset, settings, x_new=None):
    prior, coef, bf = _setup(dataset, settings)
    start = time.perf_counter()
    res = mc3_run(bf, prior, int(settings["iterations"]), int(settings["burnin"]),
                  seed=int(settings["seed"]), batches=int(settings["batches"]))
    pred = None
    if x_new is not None:
        pred = mc3_estimate(res, PredictionDelta(x_new, dataset.regression, coef), int(settings["batches"]))
        _check_finite(pred[0], "prediction")
    info = {"iterations": res.iterations, "burnin": res.burnin, "acceptance_rate": res.acceptance_rate,
            "wall_time": time.perf_counter() - start}
    return prior, coef, (res.pips, res.se, _mc3_ess(res.pips, res.se)), pred, info


def _check_finite(values, what):
    if not np.all(np.isfinite(values)):
        raise FloatingPointError(f"{what} is not finite")


FITTERS = {"lips": _fit_lips, "mc3": _fit_mc3}


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_enumerate(args, settings) -> None:
    dataset = load_csv(settings["data"], settings["response"])
    if dataset.p > ENUMERATION_LIMIT:
        raise CapacityError(f"enumeration needs p <= {ENUMERATION_LIMIT}, data have p={dataset.p}")
    prior, coef, bf = _setup(dataset, settings)
    start = time.perf_counter()
    post = exact_posterior(prior, bf)
    p = dataset.p
    masks, table = canonical_table(post, p)
    out = _out_dir(settings)
    rows = []
    for mask, prob in zip(masks, table):
        model = ModelVector(p, int(mask))
        rows.append((model.to_string(), popcount(int(mask)), float(prob)))
    write_rows(out / "posterior.csv", ("model", "size", "posterior"), rows)
    pip = exact_pip(post)
    write_pips(out / "pips.csv", dataset.names, pip, np.zeros(p), np.inf)
    summary = _base_summary("enumerate", settings, dataset, prior, coef)
    summary["wall_time"] = time.perf_counter() - start
    write_summary(out / "summary.json", summary)


def _predict_rows(settings, dataset):
    path = settings.get("predict")
    if not path:
        return None, None
    return load_rows(path, dataset.names, dataset.response)


def _sampler_command(method):
    def run(args, settings):
        dataset = load_csv(settings["data"], settings["response"])
        x_new, y_new = _predict_rows(settings, dataset)
        prior, coef, (pip, se, ess), pred, info = FITTERS[method](dataset, settings, x_new)
        out = _out_dir(settings)
        write_pips(out / "pips.csv", dataset.names, pip, se, ess)
        summary = _base_summary(method, settings, dataset, prior, coef)
        summary.update(info)
        summary["threads"] = settings["threads"]
        if pred is not None:
            write_predictions(out / "predictions.csv", *pred)
            if y_new is not None:
                summary["ase"] = ase(pred[0], y_new)
        write_summary(out / "summary.json", summary)
    return run


def cmd_simulate(args, settings) -> None:
    indices = settings["indices"]
    kw = {"noise_sd": float(settings["noise_sd"])}
    if indices:
        kw["indices"] = [int(i) for i in str(indices).split(",")] if isinstance(indices, str) else list(indices)
    ds = simulate_dataset(int(settings["n"]), int(settings["p"]), int(settings["seed"]), settings["variant"], **kw)
    target = settings.get("output")
    if not target:
        raise ConfigError("simulate needs --output")
    Path(target).parent.mkdir(parents=True, exist_ok=True)
    write_csv(target, ds.X, ds.y, ds.names, "y")


def cmd_predict(args, settings) -> None:
    train = load_csv(settings["train"], settings["response"])
    x_new, y_new = load_rows(settings["test"], train.names, train.response)
    method = settings["method"]
    if method not in FITTERS:
        raise ConfigError(f"unknown method {method!r}; use lips or mc3")
    prior, coef, _, pred, info = FITTERS[method](train, settings, x_new)
    out = _out_dir(settings)
    write_predictions(out / "predictions.csv", *pred)
    summary = _base_summary("predict", settings, train, prior, coef)
    summary.update(info)
    summary["threads"] = settings["threads"]
    summary["test_rows"] = int(x_new.shape[0])
    if y_new is not None:
        summary["ase"] = ase(pred[0], y_new)
    write_summary(out / "summary.json", summary)


def split_seed(seed: int, split: int) -> int:
    return int(np.random.SeedSequence([seed, split]).generate_state(1)[0])


def run_split(dataset, settings, split: int, methods) -> dict:
    """ASE of each method and inclusion probabilities of the samplers on one split."""
    n_train = settings["n_train"] or max(3, (2 * dataset.n) // 3)
    n_test = settings["n_test"] or dataset.n - n_train
    seed = split_seed(int(settings["seed"]), split)
    train_rows, test_rows = SplitSpec(int(n_train), int(n_test), seed).split(dataset.n, dataset.p)
    train, test = dataset.subset(train_rows), dataset.subset(test_rows)
    local = dict(settings, seed=seed, threads=1)
    row = {"split": split + 1}
    pips = {}
    for method in methods:
        if method == "null":
            row[method] = ase(np.full(test.n, train.y.mean()), test.y)
            continue
        _, _, (pip, _, _), pred, _ = FITTERS[method](train, local, test.X)
        row[method] = ase(pred[0], test.y)
        pips[method] = pip
    return {"ase": row, "pips": pips}


def cmd_compare(args, settings) -> None:
    dataset = load_csv(settings["data"], settings["response"])
    methods = [m.strip() for m in str(settings["methods"]).split(",") if m.strip()]
    bad = [m for m in methods if m not in ("lips", "mc3", "null")]
    if bad or not methods:
        raise ConfigError(f"unknown method {bad[0] if bad else ''!r}; choose from lips, mc3, null")
    splits = int(settings["splits"])
    if splits < 1:
        raise ConfigError("need at least one split")
    start = time.perf_counter()
    threads = int(settings["threads"])
    task = lambda s: run_split(dataset, settings, s, methods)  # noqa: E731
    if threads > 1 and splits > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(task, range(splits)))
    else:
        results = [task(s) for s in range(splits)]
    out = _out_dir(settings)
    write_rows(out / "ase.csv", ["split"] + methods,
               [[r["ase"]["split"]] + [float(r["ase"][m]) for m in methods] for r in results])
    samplers = [m for m in methods if m != "null"]
    if samplers:
        write_rows(out / "pips_by_split.csv", ("split", "method", "variable", "pip"),
                   [(r["ase"]["split"], m, dataset.names[j], float(r["pips"][m][j]))
                    for r in results for m in samplers for j in range(dataset.p)])
    table = np.array([[r["ase"][m] for m in methods] for r in results])
    summary = {"command": "compare", "version": __version__, "n": dataset.n, "p": dataset.p,
               "splits": splits, "methods": methods,
               "mean_ase": dict(zip(methods, table.mean(axis=0))),
               "config": {k: v for k, v in settings.items() if k != "threads"},
               "threads": threads, "wall_time": time.perf_counter() - start}
    write_summary(out / "summary.json", summary)


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _model_flags(sp):
    sp.add_argument("--response", help="response column name or 0-based index (default: last column)")
    sp.add_argument("--prior", help="model prior, e.g. beta-binomial:1,1, uniform-size:20, dilution:0.9")
    sp.add_argument("--coef-prior", dest="coef_prior", help="g, g:<value>, hyper-g or hyper-g:<a>")
    sp.add_argument("--max-size", dest="max_size", type=int, help="largest model size considered")
    sp.add_argument("--out", help="output directory (default: current directory)")


def _lips_flags(sp):
    sp.add_argument("--particles", type=int, help="particles per island")
    sp.add_argument("--islands", type=int, help="number of independent islands")
    sp.add_argument("--lookahead", type=int, help="look-ahead depth k (0 proposes from the prior)")


def _mc3_flags(sp):
    sp.add_argument("--iterations", type=int, help="retained MC3 iterations")
    sp.add_argument("--burnin", type=int, help="discarded MC3 iterations")
    sp.add_argument("--batches", type=int, help="batches for batch-means standard errors")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pfsbma", description="Bayesian model averaging with pFS priors and LIPS.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    parser.add_argument("-q", "--quiet", action="store_true", help="log errors only")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="JSON file of settings (flags take precedence)")
        sp.add_argument("--seed", type=int, help="random seed")
        sp.add_argument("--threads", type=int,
                        help=f"worker threads (default: ${THREADS_ENV} or 1)")

    sp = sub.add_parser("enumerate", help="exact posterior by enumeration")
    sp.add_argument("--data", help="training CSV")
    _model_flags(sp)
    common(sp)
    sp.set_defaults(func=cmd_enumerate)

    sp = sub.add_parser("lips", help="LIPS sampler")
    sp.add_argument("--data", help="training CSV")
    _model_flags(sp)
    _lips_flags(sp)
    sp.add_argument("--pips", action="store_true", help="write pips.csv (always written)")
    sp.add_argument("--predict", help="CSV of new rows to predict")
    common(sp)
    sp.set_defaults(func=_sampler_command("lips"))

    sp = sub.add_parser("mc3", help="MC3 baseline")
    sp.add_argument("--data", help="training CSV")
    _model_flags(sp)
    _mc3_flags(sp)
    sp.add_argument("--predict", help="CSV of new rows to predict")
    common(sp)
    sp.set_defaults(func=_sampler_command("mc3"))

    sp = sub.add_parser("simulate", help="write a simulated data set")
    sp.add_argument("--variant", choices=("ex3", "ex4"), help="response variant")
    sp.add_argument("--n", type=int, help="rows")
    sp.add_argument("--p", type=int, help="predictors")
    sp.add_argument("--indices", help="comma-separated 1-based signal indices (overrides the variant)")
    sp.add_argument("--noise-sd", dest="noise_sd", type=float, help="noise standard deviation")
    sp.add_argument("--output", "-o", help="CSV file to write")
    common(sp)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("predict", help="model-averaged prediction of held-out rows")
    sp.add_argument("--train", help="training CSV")
    sp.add_argument("--test", help="CSV of rows to predict (response column optional)")
    sp.add_argument("--method", choices=tuple(FITTERS), help="sampler")
    _model_flags(sp)
    _lips_flags(sp)
    _mc3_flags(sp)
    common(sp)
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("compare", help="repeated train/test splits")
    sp.add_argument("--data", help="full CSV to split")
    sp.add_argument("--splits", type=int, help="number of random splits")
    sp.add_argument("--n-train", dest="n_train", type=int, help="training rows per split")
    sp.add_argument("--n-test", dest="n_test", type=int, help="test rows per split")
    sp.add_argument("--methods", help="comma-separated subset of lips,mc3,null")
    _model_flags(sp)
    _lips_flags(sp)
    _mc3_flags(sp)
    common(sp)
    sp.set_defaults(func=cmd_compare)
    return parser


REQUIRED = {"enumerate": ("data",), "lips": ("data",), "mc3": ("data",), "predict": ("train", "test"),
            "compare": ("data",), "simulate": ()}


def main(argv=None) -> int:
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        level = logging.ERROR if args.quiet else logging.INFO if args.verbose else logging.WARNING
        logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
        settings = effective_settings(args)
        missing = [k for k in REQUIRED[args.command] if not settings.get(k)]
        if missing:
            raise ConfigError(f"{args.command} needs --{missing[0]}")
        args.func(args, settings)
    except SystemExit as exc:  # --help and --version
        return int(exc.code or 0)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, DomainError, CapacityError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())

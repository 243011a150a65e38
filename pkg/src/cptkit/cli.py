"""``cpt-kit`` command line: test | simulate | fit | diagnose | replay.

Exit codes: 0 success, 1 usage error, 2 data error (I/O, parsing, model/data
mismatch), 3 numerical or precondition error. Errors are reported on stderr
as one JSON object ``{"error": ..., "message": ...}``.

Every command writes a run manifest (``<output>.manifest.json``, or
``manifest.json`` inside the simulate output directory) holding the argument
vector; ``cpt-kit replay MANIFEST`` re-runs it.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from cptkit import __version__, streams
from cptkit.data import (
    DEFAULT_BANDWIDTH_MIN,
    DEFAULT_SCREEN_THRESHOLD,
    UnlabeledSet,
    fit_gaussian_linear,
    fit_kernel_gaussian,
    load_dataset_csv,
    load_rides_csv,
    rides_to_dataset,
    screen,
    sniff_schema,
)
from cptkit.diagnostics import chain_trace, gaussian_kl_sum, pinsker_tv_bound, write_trace_csv
from cptkit.errors import DataError, DomainError, PreconditionError
from cptkit.experiments import ExperimentConfig, run_suite, trace_experiment, worst_case_from_config
from cptkit.inference import STATISTICS, Statistic, run_cpt_test, run_crt_test
from cptkit.model import KernelGaussianModel, load_model, save_model
from cptkit.sampler import ChainConfig

log = logging.getLogger("cptkit")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
THREADS_ENV = "CPT_KIT_THREADS"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _threads(value: int | None) -> int:
    if value is not None:
        return max(1, value)
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _write_manifest(path: Path, argv: list[str], seed: int, config: dict, outputs: list[str], started: str) -> None:
    doc = {
        "argv": argv,
        "seed": seed,
        "config_hash": hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest(),
        "config": config,
        "version": __version__,
        "numpy_version": np.__version__,
        "outputs": outputs,
        "started": started,
        "finished": _now(),
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _reproducible_args(args: argparse.Namespace) -> dict:
    """Arguments that determine the outputs (thread count excluded by design)."""
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("threads", "func", "verbose", "argv")}


# -- data + model loading --------------------------------------------------------------


def _load_test_data(path: str, model, screen_threshold: float):
    if not Path(path).exists():
        raise DataError(f"data file not found: {path}")
    if sniff_schema(path) == "rides":
        records, report = load_rides_csv(path)
        if isinstance(model, KernelGaussianModel) and screen_threshold > 0:
            kept = screen(records, model, screen_threshold)
            log.info("screening kept %d of %d rides (N(z) >= %g)", len(kept), len(records), screen_threshold)
            records = kept
        if not records:
            raise PreconditionError("no observations left after screening")
        return rides_to_dataset(records)
    return load_dataset_csv(path)


# -- commands --------------------------------------------------------------------------


def cmd_test(args) -> int:
    started = _now()
    model = load_model(args.model)
    data = _load_test_data(args.data, model, args.screen_threshold)
    stat = Statistic(args.statistic, None if args.statistic == "abs_corr" else model)
    if data.categorical and args.statistic != "categorical_max_corr":
        raise PreconditionError("categorical y needs --statistic categorical_max_corr")
    if args.method == "CPT":
        result = run_cpt_test(
            data, model, stat, ChainConfig(args.S, args.M, args.seed),
            threads=_threads(args.threads), model_fitted_on_test_data=args.model_from_test_data,
        )
    else:
        result = run_crt_test(data, model, stat, args.M, args.seed, model_fitted_on_test_data=args.model_from_test_data)
    doc = result.to_dict(include_copies=args.include_copies)
    doc.update(alpha=args.alpha, reject=bool(result.p_value <= args.alpha), n=data.n)
    out = Path(args.output)
    out.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    verdict = "reject" if doc["reject"] else "do not reject"
    print(f"{result.method}: p = {result.p_value:.6g} (T = {result.t_observed:.6g}, M = {result.M}, n = {data.n}); "
          f"{verdict} at alpha = {args.alpha:g}")
    _write_manifest(out.with_name(out.name + ".manifest.json"), args.argv, args.seed, _reproducible_args(args), [str(out)], started)
    return EXIT_OK


def cmd_simulate(args) -> int:
    started = _now()
    config = ExperimentConfig.load(args.config)
    if args.seed is not None:
        config.seed = args.seed
    if args.alpha is not None:
        config.alpha = args.alpha
    outdir = Path(args.output)
    outdir.mkdir(parents=True, exist_ok=True)
    outputs = []
    if config.family == "trace":
        _, _, traces = trace_experiment(config)
        write_trace_csv(outdir / "trace.csv", traces)
        outputs.append("trace.csv")
    elif config.family == "worst_case":
        report = worst_case_from_config(config)
        (outdir / "worst_case.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        outputs.append("worst_case.json")
        print(f"d_TV = {report['tv']:.4g}, excess = {report['excess']:.4g} "
              f"(lower {report['lower_bound']:.4g}, upper {report['upper_bound']:.4g})")
    else:
        result = run_suite(config, threads=_threads(args.threads))
        result.write_csv(outdir / "results.csv")
        result.write_pvalues_csv(outdir / "pvalues.csv")
        outputs += ["results.csv", "pvalues.csv"]
        if result.errors:
            (outdir / "errors.json").write_text(json.dumps(result.errors, indent=2) + "\n")
            outputs.append("errors.json")
        for row in result.rows:
            print(f"{config.family} {row.grid_value:g} {row.method}: {row.rejection_rate:.3f} ± {row.stderr:.3f}")
    cfg = config.to_dict()
    _write_manifest(outdir / "manifest.json", args.argv, config.seed, {"config": cfg, "config_sha256": config.digest()}, outputs, started)
    return EXIT_OK


def _load_unlabeled(path: str) -> UnlabeledSet:
    if not Path(path).exists():
        raise DataError(f"data file not found: {path}")
    ds = load_dataset_csv(path)
    return UnlabeledSet(ds.x, np.asarray(ds.z, dtype=float))


def cmd_fit(args) -> int:
    started = _now()
    if args.kind == "gaussian_linear":
        model = fit_gaussian_linear(_load_unlabeled(args.data))
    else:
        if not Path(args.data).exists():
            raise DataError(f"data file not found: {args.data}")
        records, report = load_rides_csv(args.data)
        model = fit_kernel_gaussian(records, bandwidth_h=args.bandwidth)
    out = Path(args.output)
    save_model(model, out)
    print(f"fitted {model!r}")
    _write_manifest(out.with_name(out.name + ".manifest.json"), args.argv, 0, _reproducible_args(args), [str(out)], started)
    return EXIT_OK


def cmd_diagnose(args) -> int:
    started = _now()
    model = load_model(args.model)
    data = _load_test_data(args.data, model, args.screen_threshold)
    trace = chain_trace(data.x, data.z, model, args.steps, streams.substream(args.seed, streams.TRACE, 0))
    out = Path(args.output)
    write_trace_csv(out, trace, with_chain=False)
    outputs = [str(out)]
    if args.true_model:
        truth = load_model(args.true_model)
        kl = gaussian_kl_sum(truth, model, data.z)
        summary = {"kl_sum": kl, "pinsker_tv_bound": pinsker_tv_bound(kl), "n": data.n}
        summary_path = out.with_name(out.name + ".summary.json")
        summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        outputs.append(str(summary_path))
        print(f"KL sum = {kl:.6g}, TV <= {summary['pinsker_tv_bound']:.6g}")
    _write_manifest(out.with_name(out.name + ".manifest.json"), args.argv, args.seed, _reproducible_args(args), outputs, started)
    return EXIT_OK


def cmd_replay(args) -> int:
    try:
        doc = json.loads(Path(args.manifest).read_text())
        argv = doc["argv"]
    except FileNotFoundError:
        raise DataError(f"manifest not found: {args.manifest}") from None
    except (json.JSONDecodeError, KeyError, TypeError):
        raise DataError(f"{args.manifest}: not a run manifest") from None
    return main(argv)


# -- parser ----------------------------------------------------------------------------


def _level(text: str) -> float:
    value = float(text)
    if not 0 < value < 1:
        raise argparse.ArgumentTypeError(f"alpha must lie in (0, 1), got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cpt-kit", description="Conditional permutation / randomization tests.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def threads(sp):
        sp.add_argument("--threads", type=int, default=None,
                        help=f"parallelism cap (default: ${THREADS_ENV} or all cores); never changes results")

    t = sub.add_parser("test", help="run the CPT or CRT on a data file")
    t.add_argument("--data", required=True, help="dataset CSV (x,y,z1..zp) or ride CSV (duration_s,route,time_min,y)")
    t.add_argument("--model", required=True, help="conditional model JSON")
    t.add_argument("--method", choices=("CPT", "CRT"), default="CPT")
    t.add_argument("--statistic", choices=STATISTICS, default="abs_corr")
    t.add_argument("-M", dest="M", type=int, default=500, help="number of copies (default 500)")
    t.add_argument("-S", dest="S", type=int, default=50, help="chain steps per copy, CPT only (default 50)")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--alpha", type=_level, default=0.05, help="level for the reject field (default 0.05)")
    t.add_argument("--output", required=True, help="TestResult JSON path")
    t.add_argument("--include-copies", action="store_true", help="include copy statistics in the JSON")
    t.add_argument("--screen-threshold", type=float, default=DEFAULT_SCREEN_THRESHOLD,
                   help="kernel models: keep rides with N(z) >= this (0 disables; default 20)")
    t.add_argument("--model-from-test-data", action="store_true",
                   help="flag that the model was fitted on these data (recorded as a warning)")
    threads(t)
    t.set_defaults(func=cmd_test)

    s = sub.add_parser("simulate", help="run a simulation suite from a JSON config")
    s.add_argument("--config", required=True)
    s.add_argument("--output", required=True, help="output directory")
    s.add_argument("--seed", type=int, default=None, help="override the config's master seed")
    s.add_argument("--alpha", type=_level, default=None, help="override the config's level")
    threads(s)
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", help="fit a conditional model")
    f.add_argument("--data", required=True, help="training CSV")
    f.add_argument("--kind", choices=("gaussian_linear", "kernel_gaussian"), default="gaussian_linear")
    f.add_argument("--bandwidth", type=float, default=DEFAULT_BANDWIDTH_MIN, help="kernel bandwidth in minutes (default 20)")
    f.add_argument("--output", required=True, help="model JSON path")
    f.set_defaults(func=cmd_fit)

    d = sub.add_parser("diagnose", help="trace the pairwise chain; optional Pinsker bound")
    d.add_argument("--data", required=True)
    d.add_argument("--model", required=True)
    d.add_argument("--steps", type=int, default=250)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--output", required=True, help="trace CSV path (step,loglik,corr)")
    d.add_argument("--true-model", default=None, help="Gaussian model JSON for the KL / TV-bound summary")
    d.add_argument("--screen-threshold", type=float, default=DEFAULT_SCREEN_THRESHOLD)
    threads(d)
    d.set_defaults(func=cmd_diagnose)

    r = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    r.add_argument("manifest")
    r.set_defaults(func=cmd_replay)
    return p


def _fail(code: int, exc: BaseException) -> int:
    print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail(EXIT_USAGE, exc)
    args.argv = argv
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, exc)
    except (DataError, DomainError, OSError) as exc:
        return _fail(EXIT_DATA, exc)
    except (PreconditionError, FloatingPointError, np.linalg.LinAlgError) as exc:
        return _fail(EXIT_NUMERIC, exc)


if __name__ == "__main__":
    sys.exit(main())

"""Command line entry point.

Exit codes: 0 success, 2 configuration error, 3 evaluator or data error,
4 infeasible constraint, 5 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .ensemble import (
    LATENCY_MODES,
    OFA_THRESHOLDS,
    VOTINGS,
    CombinationError,
    PredictionError,
    ensemble_experiment,
    mimic_ofa_subset,
    synth_predictions,
)
from .genotype import OperatorConfig, decode
from .persistence import (
    DigestMismatchError,
    FormatVersionError,
    MalformedRecordError,
    PersistenceIOError,
    export_baseline_csv,
    export_ensemble_csv,
    export_front_csv,
    export_hv_csv,
    file_digest,
    load_front,
    load_latency_table,
    load_predictions,
    load_predictor,
    load_result,
    read_csv,
    save_baseline,
    save_front,
    save_latency_table,
    save_predictions,
    save_predictor,
    save_result,
)
from .search import (
    DEFAULT_REF_POINT,
    SPACES,
    InfeasibleError,
    SearchConfig,
    SearchError,
    hypervolume_progression,
    run_ofa_baseline,
    run_search,
)
from .surrogate import (
    AccuracyPredictor,
    ConfigurationError,
    EvaluationError,
    LatencyTable,
    PredictorEvaluator,
    SyntheticEvaluator,
    SyntheticSurrogate,
)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_INFEASIBLE, EXIT_IO = 0, 2, 3, 4, 5

log = logging.getLogger("ofa2")


class CliConfigError(Exception):
    pass


def _pair(text: str) -> tuple[float, float]:
    try:
        a, b = (float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'x,y', got {text!r}") from None
    return a, b


def _sweep(text: str) -> list[float]:
    try:
        lo, hi, step = (float(x) for x in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'start:stop:step', got {text!r}") from None
    if step <= 0 or hi < lo:
        raise argparse.ArgumentTypeError("sweep needs step > 0 and stop >= start")
    n = int(round((hi - lo) / step)) + 1
    return [lo + i * step for i in range(n)]


def _int_range(text: str) -> list[int]:
    try:
        if ":" in text:
            lo, hi = (int(x) for x in text.split(":"))
            return list(range(lo, hi + 1))
        return [int(x) for x in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'lo:hi' or a comma list, got {text!r}") from None


def _choices(allowed):
    def parse(text: str) -> list[str]:
        items = [x for x in text.split(",") if x]
        bad = [x for x in items if x not in allowed]
        if bad or not items:
            raise argparse.ArgumentTypeError(f"choose from {','.join(allowed)}")
        return items

    return parse


def _add_search_flags(p: argparse.ArgumentParser, baseline: bool = False) -> None:
    g = p.add_argument_group("search configuration (flags override --config)")
    g.add_argument("--config", type=Path, help="JSON file with SearchConfig fields")
    if not baseline:
        g.add_argument("--algorithm", choices=("nsga2", "sms-emoa"), help="default: nsga2")
    g.add_argument("--population-size", "--pop", type=int, help="default: 100")
    g.add_argument("--generations", "--gens", type=int, help="default: 1000")
    g.add_argument("--mutation-rate", type=float, help="per-gene resampling probability (default: 0.1)")
    g.add_argument("--seed", type=int, help="random seed (default: 0)")
    g.add_argument("--ref-point", "--ref", type=_pair, help="hypervolume reference 'error,latency' (default: 100,25)")
    g.add_argument("--space", choices=sorted(SPACES), help="default: full")
    g.add_argument("--retry-cap", type=int, help="baseline resampling rounds (default: 100)")
    g.add_argument("--threads", type=int, default=1, help="evaluation threads; affects speed only (default: 1)")
    e = p.add_argument_group("evaluator")
    e.add_argument("--synthetic", action="store_true", help="use the closed-form synthetic surrogate")
    e.add_argument("--synthetic-params", type=str, help="'a,b,c' for the synthetic surrogate (default: 2.7e-4,5,0.01)")
    e.add_argument("--predictor", type=Path, help="accuracy predictor weights file")
    e.add_argument("--latency-table", type=Path, help="latency lookup table file")


def _config(args, algorithm: str, **extra) -> SearchConfig:
    base: dict = {}
    if args.config is not None:
        try:
            base = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise PersistenceIOError(args.config, exc) from exc
        except json.JSONDecodeError as exc:
            raise CliConfigError(f"{args.config}: {exc}") from exc
        if not isinstance(base, dict):
            raise CliConfigError(f"{args.config}: expected a JSON object")
    ops = dict(base.pop("operators", {}) or {})
    if "mutation_rate" in base:
        ops["mutation_rate"] = base.pop("mutation_rate")
    if args.mutation_rate is not None:
        ops["mutation_rate"] = args.mutation_rate
    flags = {
        "algorithm": getattr(args, "algorithm", None),
        "population_size": args.population_size,
        "generations": args.generations,
        "seed": args.seed,
        "ref_point": args.ref_point,
        "space": args.space,
        "retry_cap": args.retry_cap,
    }
    merged = {**base, **{k: v for k, v in flags.items() if v is not None}, **extra}
    merged["algorithm"] = algorithm if algorithm else merged.get("algorithm", "nsga2")
    try:
        merged["operators"] = OperatorConfig(**ops)
        return SearchConfig.from_dict(merged)
    except (TypeError, ValueError) as exc:
        raise CliConfigError(str(exc)) from exc


def _evaluator(args):
    if args.synthetic:
        if args.predictor or args.latency_table:
            raise CliConfigError("--synthetic cannot be combined with --predictor/--latency-table")
        if args.synthetic_params:
            try:
                a, b, c = (float(x) for x in args.synthetic_params.split(","))
                return SyntheticEvaluator(SyntheticSurrogate(a, b, c))
            except ValueError as exc:
                raise CliConfigError(f"--synthetic-params: {exc}") from exc
        return SyntheticEvaluator()
    if args.predictor is None or args.latency_table is None:
        raise CliConfigError("give --predictor and --latency-table, or --synthetic")
    predictor = load_predictor(args.predictor)
    table = load_latency_table(args.latency_table)
    digests = {"predictor": file_digest(args.predictor), "latency_table": file_digest(args.latency_table)}
    return PredictorEvaluator(predictor, table, digests)


def cmd_search(args) -> int:
    cfg = _config(args, args.algorithm or None)
    evaluator = _evaluator(args)
    result = run_search(cfg, evaluator, workers=args.threads)
    out = Path(args.out)
    save_result(result, out / "result.json")
    save_front(result.front, out / "front.json")
    export_front_csv(result.front, out / "front.csv")
    export_hv_csv(hypervolume_progression(result), out / "hv.csv")
    final = result.hv_history[-1] if result.hv_history else 0.0
    print(f"front size: {len(result.front)}")
    print(f"final hypervolume: {final!r} (ref {cfg.ref_point[0]:g},{cfg.ref_point[1]:g})")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_baseline(args) -> int:
    if (args.latency_constraint is None) == (args.sweep is None):
        raise CliConfigError("give exactly one of --latency-constraint or --sweep")
    constraints = args.sweep if args.sweep is not None else [args.latency_constraint]
    evaluator = _evaluator(args)
    records = []
    for limit in sorted(constraints):
        cfg = _config(args, "ofa-baseline", latency_constraint=float(limit))
        best = run_ofa_baseline(cfg, evaluator, workers=args.threads)
        err, lat = best.objectives.as_tuple()
        records.append(
            {
                "latency_constraint": float(limit),
                "genes": best.genotype.to_list(),
                "architecture": decode(best.genotype).summary(),
                "top1_error": err,
                "latency_ms": lat,
            }
        )
        print(f"constraint {limit:g} ms: error {err:.4f} %, latency {lat:.4f} ms")
    out = Path(args.out)
    save_baseline(records, evaluator.identity(), out / "baseline.json")
    export_baseline_csv(records, out / "baseline.csv")
    return EXIT_OK


def _pool_from_file(path: Path):
    """Latencies and target accuracies of a front/pool or search-result file."""
    try:
        inds = load_front(path)
    except MalformedRecordError:
        inds = load_result(path).front
    inds = sorted(inds, key=lambda i: (i.objectives.latency, i.objectives.top1_error))
    err = np.array([i.objectives.top1_error for i in inds])
    lat = np.array([i.objectives.latency for i in inds])
    return 100.0 - err, lat


def cmd_ensemble(args) -> int:
    sources = [x is not None for x in (args.preds, args.synth_preds, args.pool)]
    if sum(sources) != 1:
        raise CliConfigError("give exactly one of --preds, --synth-preds, --pool")
    rng = np.random.default_rng(args.seed)
    if args.preds is not None:
        preds = load_predictions(args.preds)
    else:
        if args.synth_preds is not None:
            rows = read_csv(args.synth_preds)
            try:
                acc = np.array([float(r["accuracy"]) for r in rows])
                lat = np.array([float(r["latency_ms"]) for r in rows])
            except (KeyError, ValueError) as exc:
                raise CliConfigError(f"{args.synth_preds}: need accuracy,latency_ms columns ({exc})") from exc
        else:
            acc, lat = _pool_from_file(args.pool)
        if args.mimic_ofa:
            picks = [i for i in mimic_ofa_subset(lat, OFA_THRESHOLDS) if i is not None]
            acc, lat = acc[picks], lat[picks]
        preds = synth_predictions(acc, args.samples, args.classes, args.rho, rng, latencies=lat)
        if args.save_preds:
            save_predictions(preds, args.save_preds)
    exp = ensemble_experiment(preds, args.sizes, args.count, args.modes, args.votings, rng)
    export_ensemble_csv(exp, args.out)
    for size, msg in sorted(exp.errors.items()):
        print(f"warning: size {size} skipped: {msg}", file=sys.stderr)
    print(f"{len(exp.results)} ensembles, {sum(exp.nondominated)} non-dominated; wrote {args.out}")
    return EXIT_OK


def cmd_hv(args) -> int:
    result = load_result(args.result)
    series = hypervolume_progression(result, args.ref_point)
    if series and all(h == 0.0 for _, h in series):
        print(f"warning: no point improves on reference {args.ref_point}; hypervolume is zero", file=sys.stderr)
    if args.out:
        export_hv_csv(series, args.out)
    else:
        sys.stdout.write("generation,hypervolume\n")
        for g, h in series:
            sys.stdout.write(f"{g},{h!r}\n")
    return EXIT_OK


def cmd_export(args) -> int:
    result = load_result(args.result)
    if args.front_csv:
        export_front_csv(result.front, args.front_csv)
    if args.hv_csv:
        export_hv_csv(hypervolume_progression(result), args.hv_csv)
    if args.population_csv:
        export_front_csv(result.population, args.population_csv)
    return EXIT_OK


def cmd_synth(args) -> int:
    if args.what == "latency-table":
        params = SyntheticSurrogate()
        save_latency_table(LatencyTable.from_surrogate(params), args.out)
    elif args.what == "predictor":
        if args.kind == "additive":
            p = AccuracyPredictor.additive()
        else:
            p = AccuracyPredictor.random(np.random.default_rng(args.seed))
        save_predictor(p, args.out)
    else:
        if args.targets is None:
            raise CliConfigError("synth predictions needs --targets")
        rows = read_csv(args.targets)
        try:
            acc = [float(r["accuracy"]) for r in rows]
            lat = [float(r["latency_ms"]) for r in rows]
        except (KeyError, ValueError) as exc:
            raise CliConfigError(f"{args.targets}: need accuracy,latency_ms columns ({exc})") from exc
        preds = synth_predictions(acc, args.samples, args.classes, args.rho, np.random.default_rng(args.seed), latencies=lat)
        save_predictions(preds, args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ofa2", description="Multi-objective search over the OFA subnetwork space.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("search", help="run NSGA-II or SMS-EMOA")
    _add_search_flags(p)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("baseline", help="constrained single-objective search")
    _add_search_flags(p, baseline=True)
    p.add_argument("--latency-constraint", type=float, help="latency limit in ms")
    p.add_argument("--sweep", type=_sweep, help="constraints 'start:stop:step', e.g. 15:55:5")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("ensemble", help="hard/soft voting committee grid")
    p.add_argument("--preds", type=Path, help="prediction set file")
    p.add_argument("--synth-preds", type=Path, help="CSV with accuracy,latency_ms per model; predictions are synthesised")
    p.add_argument("--pool", type=Path, help="front/pool or search-result file; predictions are synthesised")
    p.add_argument("--mimic-ofa", action="store_true", help="keep only the models just under 15,20,...,55 ms")
    p.add_argument("--samples", type=int, default=10_000, help="synthetic samples (default: %(default)s)")
    p.add_argument("--classes", type=int, default=100, help="synthetic classes (default: %(default)s)")
    p.add_argument("--rho", type=float, default=0.3, help="synthetic inter-model correlation (default: %(default)s)")
    p.add_argument("--save-preds", type=Path, help="also write the synthesised prediction set")
    p.add_argument("--sizes", type=_int_range, default=list(range(2, 9)), help="ensemble sizes 'lo:hi' or a comma list (default: 2:8)")
    p.add_argument("--count", type=int, default=43, help="combinations per size (default: %(default)s)")
    p.add_argument("--modes", type=_choices(LATENCY_MODES), default=list(LATENCY_MODES), help="comma list of latency modes (default: sum,max)")
    p.add_argument("--votings", type=_choices(VOTINGS), default=list(VOTINGS), help="comma list of voting schemes (default: hard,soft)")
    p.add_argument("--seed", type=int, default=0, help="default: %(default)s")
    p.add_argument("--out", type=Path, required=True, help="results CSV")
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("hv", help="hypervolume progression of a saved result")
    p.add_argument("result", type=Path)
    p.add_argument("--ref-point", "--ref", type=_pair, default=DEFAULT_REF_POINT, help="reference 'error,latency' (default: 100,25)")
    p.add_argument("--out", type=Path, help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_hv)

    p = sub.add_parser("export", help="CSV exports of a saved result")
    p.add_argument("result", type=Path)
    p.add_argument("--front-csv", type=Path)
    p.add_argument("--hv-csv", type=Path)
    p.add_argument("--population-csv", type=Path)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("synth", help="write synthetic tables, predictors or prediction sets")
    p.add_argument("what", choices=("latency-table", "predictor", "predictions"))
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--kind", choices=("additive", "random"), default="additive", help="predictor flavour (default: %(default)s)")
    p.add_argument("--targets", type=Path, help="CSV with accuracy,latency_ms (predictions only)")
    p.add_argument("--samples", type=int, default=10_000, help="default: %(default)s")
    p.add_argument("--classes", type=int, default=100, help="default: %(default)s")
    p.add_argument("--rho", type=float, default=0.3, help="default: %(default)s")
    p.add_argument("--seed", type=int, default=0, help="default: %(default)s")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliConfigError, ConfigurationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except PersistenceIOError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (
        SearchError,
        EvaluationError,
        MalformedRecordError,
        FormatVersionError,
        DigestMismatchError,
        PredictionError,
        CombinationError,
    ) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``learnedsis <command> [options]``."""

import argparse
import json
import logging
import sys

import numpy as np

from . import experiment as ex
from .checks import GRADCHECK_TOL, gradcheck_suite, selftest
from .errors import LearnedSISError
from .models import SCENARIOS, ScenarioConfig, generate_scenario, scenario_dump, simulate
from .nn import load_proposal, save_proposal


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _on_off(value):
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected on or off")
    return value == "on"


def _common(p, snr=True):
    p.add_argument("--scenario", choices=SCENARIOS)
    if snr:
        p.add_argument("--snr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--particles", type=int)
    p.add_argument("--config", help="JSON file with ExperimentConfig fields")


def build_parser():
    parser = _Parser(prog="learnedsis", description="Learned proposals for SIS particle filters.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="dump a scenario and one trajectory as JSON")
    _common(p)
    p.add_argument("--out")

    p = sub.add_parser("train", help="train a proposal and serialize it")
    _common(p)
    p.add_argument("--runs", type=int, help="training runs")
    p.add_argument("--out", required=True)

    p = sub.add_parser("test", help="evaluate a serialized proposal")
    p.add_argument("--params", required=True)
    p.add_argument("--particles", type=int)
    p.add_argument("--runs", type=int, help="test runs")
    p.add_argument("--resample", type=_on_off)
    p.add_argument("--method", action="append", choices=ex.METHODS)
    p.add_argument("--rrmse-mode", choices=ex.RRMSE_MODES)
    p.add_argument("--out")

    p = sub.add_parser("sweep", help="SNR sweep of train+test trials, written as CSV")
    _common(p, snr=False)
    p.add_argument("--snr", type=float, action="append", help="repeatable; default 0,2,...,10")
    p.add_argument("--trials", type=int)
    p.add_argument("--runs", type=int, help="test runs per trial")
    p.add_argument("--training-runs", type=int)
    p.add_argument("--method", action="append", choices=ex.METHODS)
    p.add_argument("--resample", type=_on_off, help="restrict to the with/without-resampling variants")
    p.add_argument("--rrmse-mode", choices=ex.RRMSE_MODES)
    p.add_argument("--per-trial", action="store_true", default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out")

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--seed", type=int, default=0)
    p = sub.add_parser("selftest", help="quick property checks")
    p.add_argument("--seed", type=int, default=0)
    return parser


def _config(args):
    base = ex.load_config(args.config) if getattr(args, "config", None) else {}
    return base


def _pick(args, base, name, key=None, default=None):
    v = getattr(args, name, None)
    if v is not None:
        return v
    return base.get(key or name, default)


def _scenario_args(args):
    base = _config(args)
    scenario = _pick(args, base, "scenario", default="linear")
    snr = args.snr if args.snr is not None else (base.get("snr_grid_db") or [10.0])[0]
    seed = _pick(args, base, "seed", default=0)
    return base, ScenarioConfig(scenario, float(snr), int(seed))


def cmd_simulate(args):
    base, scen = _scenario_args(args)
    T = int(base.get("T", 12))
    model = generate_scenario(scen)
    xs, ys = simulate(model, T, np.random.default_rng([scen.seed, 1]))
    _emit(json.dumps(scenario_dump(model, scen, xs, ys)), args.out)
    return 0


def cmd_train(args):
    base, scen = _scenario_args(args)
    K = int(_pick(args, base, "particles", "K", 25))
    T = int(base.get("T", 12))
    runs = int(_pick(args, base, "runs", "training_runs", 200))
    model = generate_scenario(scen)
    hidden = base.get("hidden", list(ex.DEFAULT_HIDDEN))
    proposal, report, tcfg = ex.train_proposal(model, (scen.seed,), runs, K, T, hidden)
    meta = {"scenario": scen.scenario, "snr_db": scen.snr_db, "K": K, "T": T,
            "training": tcfg.to_dict(), "hidden": list(hidden)}
    save_proposal(proposal, args.out, seed=scen.seed, training_config=meta)
    with open(args.out + ".report.json", "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh)
        fh.write("\n")
    losses = [v for v in report.losses if np.isfinite(v)]
    print(f"trained {report.completed_runs} runs ({len(report.skipped)} skipped); "
          f"final J {losses[-1] if losses else float('nan'):.6g}; saved {args.out}")
    return 0


def evaluate_saved(params_path, methods=None, runs=100, K=None, mode="mean"):
    """Evaluate a serialized proposal on the scenario it was trained for."""
    proposal, meta = load_proposal(params_path)
    tc = meta.get("training_config") or {}
    scen = ScenarioConfig(tc["scenario"], float(tc["snr_db"]), int(meta["seed"]))
    model = generate_scenario(scen)
    K = int(K or tc.get("K", 25))
    methods = methods or ["learned"]
    scores = ex.evaluate_methods(model, methods, runs, K, proposal.horizon, (scen.seed,),
                                 proposal, mode)
    return scen, scores


def cmd_test(args):
    methods = args.method
    if args.resample is not None:
        methods = methods or ["learned"]
        methods = [m.replace("-resample", "") + ("-resample" if args.resample else "") for m in methods]
    scen, scores = evaluate_saved(args.params, methods, args.runs or 100, args.particles,
                              args.rrmse_mode or "mean")
    rows = []
    for m, (rr, ess) in scores.items():
        med, std = ex._summary(rr)
        rows.append(ex.MetricsRecord(scen.scenario, scen.snr_db, m, med, std, float(np.nanmean(ess)), 1))
    _emit(ex.records_to_csv(rows), args.out)
    return 0


def sweep_config(args):
    base = _config(args)
    d = dict(base)
    for name, key in [("scenario", None), ("seed", None), ("particles", "K"), ("trials", None),
                      ("runs", "test_runs"), ("training_runs", None), ("method", "methods"),
                      ("rrmse_mode", None), ("per_trial", None), ("out", "output")]:
        v = getattr(args, name, None)
        if v is not None:
            d[key or name] = v
    if args.snr:
        d["snr_grid_db"] = args.snr
    cfg = ex.ExperimentConfig.from_dict(d)
    if args.resample is not None:
        keep = [m for m in cfg.methods if m == "lln" or m.endswith("-resample") == args.resample]
        cfg = ex.ExperimentConfig.from_dict({**cfg.to_dict(), "methods": keep})
    return cfg


def cmd_sweep(args):
    cfg = sweep_config(args)
    if args.jobs < 1:
        raise UsageError("--jobs must be at least 1")
    records, _ = ex.run_experiment(cfg, jobs=args.jobs)
    _emit(ex.records_to_csv(records), cfg.output)
    return 0


def cmd_gradcheck(args):
    results = gradcheck_suite(args.seed)
    ok = True
    for name, err in results:
        passed = err < GRADCHECK_TOL
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {name} {err:.3e}")
    return 0 if ok else 1


def cmd_selftest(args):
    ok = True
    for name, passed, detail in selftest(args.seed):
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {name} {detail}".rstrip())
    return 0 if ok else 1


def _emit(text, path):
    if path:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text if text.endswith("\n") else text + "\n")
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "test": cmd_test,
    "sweep": cmd_sweep,
    "gradcheck": cmd_gradcheck,
    "selftest": cmd_selftest,
}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"learnedsis: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ValueError, KeyError, OSError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"learnedsis: error: {msg}", file=sys.stderr)
        return 2
    except LearnedSISError as exc:
        print(f"learnedsis: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

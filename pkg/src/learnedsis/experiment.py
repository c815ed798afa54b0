"""Train/test protocol, SNR sweeps and the relative-RMSE metric.

Every random draw comes from ``np.random.default_rng(words)`` where ``words``
names the purpose (scenario, training, test simulation, particles) and the
(trial, run, method) it belongs to. Results therefore do not depend on how
work is split across processes.
"""

import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .baselines import kalman_filter, lln_estimate
from .errors import LearnedSISError, ZeroTargetNorm
from .filter import LearnedSampler, OptimalGaussianProposal, run_filter
from .models import SCENARIOS, ScenarioConfig, generate_scenario, simulate
from .nn import DEFAULT_HIDDEN, LearnedProposal
from .training import TrainingConfig, train

log = logging.getLogger(__name__)

METHODS = ("lln", "mindeg", "mindeg-resample", "learned", "learned-resample")
RRMSE_MODES = ("mean", "final", "stacked")
CSV_HEADER = ("scenario", "snr_db", "method", "median_rrmse", "std_rrmse",
              "mean_final_ess", "trials_completed")

# Stream tags; method codes are fixed so adding a method never shifts others.
_SCENARIO, _INIT, _TRAIN, _TEST_SIM, _TEST_PARTICLES = 10, 11, 12, 13, 14
_METHOD_CODE = {m: i for i, m in enumerate(METHODS)}


def relative_rmse(estimates, targets, mode="mean"):
    """Relative error of ``estimates`` against ``targets``, both ``(T, N)``.

    ``mean`` averages the per-step ratios, ``final`` keeps the last step and
    ``stacked`` takes one ratio over the concatenated trajectory.
    """
    est = np.atleast_2d(np.asarray(estimates, dtype=np.float64))
    tgt = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if est.shape != tgt.shape:
        raise ValueError(f"estimates {est.shape} and targets {tgt.shape} differ")
    if mode not in RRMSE_MODES:
        raise ValueError(f"unknown rrmse mode {mode!r}")
    norms = np.linalg.norm(tgt, axis=1)
    errs = np.linalg.norm(est - tgt, axis=1)
    if mode == "stacked":
        total = float(np.linalg.norm(tgt))
        if total == 0.0:
            raise ZeroTargetNorm(t=None)
        return float(np.linalg.norm(est - tgt)) / total
    if mode == "final":
        norms, errs = norms[-1:], errs[-1:]
        offset = len(tgt) - 1
    else:
        offset = 0
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise ZeroTargetNorm(t=int(zero[0]) + offset)
    return float(np.mean(errs / norms))


@dataclass
class ExperimentConfig:
    scenario: str = "linear"
    snr_grid_db: list = field(default_factory=lambda: [0.0, 2.0, 4.0, 6.0, 8.0, 10.0])
    trials: int = 10
    test_runs: int = 100
    K: int = 25
    T: int = 12
    methods: list = None
    seed: int = 0
    output: str = None
    training_runs: int = 200
    rrmse_mode: str = "mean"
    per_trial: bool = False
    hidden: list = field(default_factory=lambda: list(DEFAULT_HIDDEN))

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        if self.methods is None:
            self.methods = [m for m in METHODS if m != "lln" or self.scenario == "linear"]
        self.methods = list(self.methods)
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ValueError(f"unknown methods {unknown}; choose from {METHODS}")
        if "lln" in self.methods and self.scenario != "linear":
            raise ValueError("lln needs the exact posterior, which only the linear scenario has")
        self.snr_grid_db = [float(s) for s in self.snr_grid_db]
        for s in self.snr_grid_db:
            if not 0.0 <= s <= 10.0:
                raise ValueError(f"snr {s} dB outside [0, 10]")
        if self.trials < 1 or self.test_runs < 1 or self.K < 1 or self.T < 1:
            raise ValueError("trials, test_runs, K and T must be positive")
        if self.training_runs < 0:
            raise ValueError("training_runs must be non-negative")
        if self.rrmse_mode not in RRMSE_MODES:
            raise ValueError(f"rrmse_mode must be one of {RRMSE_MODES}")
        self.hidden = [int(h) for h in self.hidden]

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config fields: {sorted(extra)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


@dataclass
class MetricsRecord:
    scenario: str
    snr_db: float
    method: str
    median_rrmse: float
    std_rrmse: float
    mean_final_ess: float
    trials_completed: int
    trial: int = None  # set only for per-trial rows

    def __post_init__(self):
        if self.median_rrmse < 0 or self.std_rrmse < 0:
            raise ValueError("rrmse statistics must be non-negative")


def _snr_code(snr_db):
    return int(round(snr_db * 1000))


def _int_seed(words):
    return int(np.random.SeedSequence(list(words)).generate_state(1)[0])


def train_proposal(model, words, runs, K, T, hidden=DEFAULT_HIDDEN):
    """Fresh proposal trained on ``model``; the seeds derive from ``words``."""
    p = LearnedProposal.initialize(model.state_dim, model.meas_dim, T,
                                   np.random.default_rng([*words, _INIT]),
                                   hidden=tuple(hidden), initial_input=model.mu0)
    cfg = TrainingConfig(num_runs=runs, K=K, T=T, seed=_int_seed([*words, _TRAIN]))
    report = train(p, model, cfg)
    return p, report, cfg


def evaluate_methods(model, methods, runs, K, T, words, proposal=None, mode="mean"):
    """Score every method on the same fresh trajectories.

    Returns ``{method: (rrmse (runs,), final_ess (runs,))}``; runs whose
    target has zero norm get NaN.
    """
    linear = model.scenario == "linear"
    optimal = OptimalGaussianProposal(model) if any(m.startswith("mindeg") for m in methods) else None
    learned = LearnedSampler(proposal) if proposal is not None else None
    if any(m.startswith("learned") for m in methods) and learned is None:
        raise ValueError("learned methods need a trained proposal")
    out = {m: (np.full(runs, np.nan), np.full(runs, np.nan)) for m in methods}
    for r in range(runs):
        xs, ys = simulate(model, T, np.random.default_rng([*words, _TEST_SIM, r]))
        states = kalman_filter(model, ys) if linear else None
        target = np.array([s.filtered_mean for s in states]) if linear else xs
        for m in methods:
            rng = np.random.default_rng([*words, _TEST_PARTICLES, r, _METHOD_CODE[m]])
            if m == "lln":
                est, ess = lln_estimate(model, ys, K, rng, states=states), float(K)
            else:
                sampler = optimal if m.startswith("mindeg") else learned
                res = run_filter(model, sampler, ys, K, resampling=m.endswith("-resample"), rng=rng)
                est, ess = res.estimates, float(res.ess[-1])
            try:
                out[m][0][r] = relative_rmse(est, target, mode)
            except ZeroTargetNorm as exc:
                log.warning("run %d excluded: %s", r, exc)
            out[m][1][r] = ess
    return out


def run_trial(cfg, snr_db, trial):
    """One train-then-test repetition; returns per-method score arrays."""
    scen = ScenarioConfig(cfg.scenario, snr_db, cfg.seed, T=cfg.T)
    model = generate_scenario(scen, np.random.default_rng([cfg.seed, _SCENARIO, trial]))
    words = (cfg.seed, _snr_code(snr_db), trial)
    proposal = None
    if any(m.startswith("learned") for m in cfg.methods):
        proposal, _, _ = train_proposal(model, words, cfg.training_runs, cfg.K, cfg.T, cfg.hidden)
    return evaluate_methods(model, cfg.methods, cfg.test_runs, cfg.K, cfg.T, words,
                            proposal, cfg.rrmse_mode)


def _trial_task(args):
    cfg_dict, snr_db, trial = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    try:
        scores = run_trial(cfg, snr_db, trial)
    except LearnedSISError as exc:
        log.warning("trial %d at %g dB failed: %s", trial, snr_db, exc)
        return snr_db, trial, None
    return snr_db, trial, {m: (a.tolist(), e.tolist()) for m, (a, e) in scores.items()}


def _summary(values):
    v = np.asarray(values, dtype=np.float64)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return float("nan"), float("nan")
    std = float(np.std(v, ddof=1)) if v.size > 1 else 0.0
    return float(np.median(v)), std


def run_experiment(cfg, jobs=1):
    """Run the sweep; returns ``(records, raw)`` with ``raw[(snr, trial)]`` scores."""
    tasks = [(cfg.to_dict(), snr, trial) for snr in cfg.snr_grid_db for trial in range(cfg.trials)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_trial_task, tasks))
    else:
        results = [_trial_task(t) for t in tasks]
    raw = {(snr, trial): scores for snr, trial, scores in sorted(results, key=lambda r: (r[0], r[1]))}
    records = []
    for snr in cfg.snr_grid_db:
        done = [raw[(snr, t)] for t in range(cfg.trials) if raw[(snr, t)] is not None]
        for m in cfg.methods:
            if cfg.per_trial:
                for t in range(cfg.trials):
                    sc = raw[(snr, t)]
                    if sc is None:
                        continue
                    med, std = _summary(sc[m][0])
                    records.append(MetricsRecord(cfg.scenario, snr, m, med, std,
                                                 float(np.nanmean(sc[m][1])), 1, trial=t))
                continue
            pooled = [v for sc in done for v in sc[m][0]]
            ess = [v for sc in done for v in sc[m][1]]
            med, std = _summary(pooled) if pooled else (float("nan"), float("nan"))
            mean_ess = float(np.nanmean(ess)) if ess else float("nan")
            records.append(MetricsRecord(cfg.scenario, snr, m, med, std, mean_ess, len(done)))
    return records, raw


def _fmt(x):
    if isinstance(x, float):
        if math.isnan(x):
            return "nan"
        return f"{x:.12g}"
    return str(x)


def records_to_csv(records):
    """Deterministic CSV text: fixed column order, 12 significant digits."""
    per_trial = any(r.trial is not None for r in records)
    header = list(CSV_HEADER)
    if per_trial:
        header.insert(3, "trial")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in records:
        row = [r.scenario, _fmt(float(r.snr_db)), r.method]
        if per_trial:
            row.append(str(r.trial))
        row += [_fmt(r.median_rrmse), _fmt(r.std_rrmse), _fmt(r.mean_final_ess), str(r.trials_completed)]
        w.writerow(row)
    return buf.getvalue()


def write_csv(records, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(records_to_csv(records))


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)

"""Acceptance criteria 1-8.

Each test appends one ``PASS``/``FAIL`` line to the summary printed at the end
of the session. Criteria 6 and 7 train the full-size proposal many times and
take over an hour on one core; deselect them with ``-m "not slow"``.
"""

import json
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE, ReplayStream
from learnedsis.baselines import kalman_filter
from learnedsis.checks import GRADCHECK_TOL, gradcheck_suite, kalman_oracle_error
from learnedsis.experiment import ExperimentConfig, relative_rmse, run_experiment, train_proposal
from learnedsis.filter import (
    OptimalGaussianProposal,
    ParticleEnsemble,
    effective_sample_size,
    normalized_weights,
    resample,
    run_filter,
    should_resample,
)
from learnedsis.models import ScenarioConfig, generate_scenario, simulate
from learnedsis.nn import LearnedProposal
from learnedsis.training import TrainingConfig, build_loss_graph, evaluate_degeneracy, train

ROOT = Path(__file__).resolve().parents[1]
REPORT = Path(os.environ.get("LEARNEDSIS_ACCEPTANCE_REPORT", ROOT / "acceptance_report.json"))
SEEDS = range(10)


def _verdict(n, ok, detail):
    ACCEPTANCE.append(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
    return ok


def _record(key, value):
    data = json.loads(REPORT.read_text()) if REPORT.exists() else {}
    data[key] = value
    REPORT.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def test_criterion_1_gradcheck():
    t0 = time.perf_counter()
    results = gradcheck_suite(0)
    elapsed = time.perf_counter() - t0
    worst_name, worst = max(results, key=lambda r: r[1])
    names = {n for n, _ in results}
    ok = worst < GRADCHECK_TOL and elapsed < 30 and {"cholesky", "proposal_moments", "loss_linear"} <= names
    assert _verdict(1, ok, f"{len(results)} checks, worst {worst:.2e} ({worst_name}), {elapsed:.1f}s")


def test_criterion_2_kalman_oracle():
    t0 = time.perf_counter()
    brute = kalman_oracle_error(np.random.default_rng(0), instances=20, N=2, T=4)
    worst = 0.0
    # Paper-scale instances: N=10, M=8, T=12; error is the per-step-averaged relative error.
    for seed in range(5):
        for snr in (0.0, 10.0):
            m = generate_scenario(ScenarioConfig("linear", snr, seed))
            _, ys = simulate(m, 12, np.random.default_rng([seed, 99]))
            res = run_filter(m, OptimalGaussianProposal(m), ys, 100_000, resampling=False,
                             rng=np.random.default_rng([seed, 98]))
            km = np.array([s.filtered_mean for s in kalman_filter(m, ys)])
            worst = max(worst, relative_rmse(res.estimates, km))
    elapsed = time.perf_counter() - t0
    ok = brute < 1e-8 and worst < 0.02 and elapsed < 120
    assert _verdict(2, ok, f"joint conditioning {brute:.1e}, K=1e5 SIS vs Kalman {worst:.4f}, "
                          f"{elapsed:.0f}s")


def test_criterion_3_zero_variance_increments():
    rng = np.random.default_rng(3)
    worst_spread, worst_marg = 0.0, 0.0
    for scenario in ("linear", "nonlinear"):
        m = generate_scenario(ScenarioConfig(scenario, 5.0, 1))
        opt = OptimalGaussianProposal(m)
        for t in (0, 1, 5):
            x_prev = None if t == 0 else np.tile(rng.standard_normal(10), (100, 1))
            y = rng.standard_normal(8)
            x, log_q = opt.propose(t, x_prev, y, rng, 100)
            if t == 0:
                prior, m_prior, P = m.log_initial_density(x), m.mu0, m.Sigma0
            else:
                prior, m_prior, P = m.log_transition_density(x, x_prev), m.transition_mean(x_prev[:1])[0], m.Sigma_v
            inc = m.log_measurement_density(y, x) + prior - log_q
            S = m.Sigma_w + m.C_meas @ P @ m.C_meas.T
            r = y - m.C_meas @ m_prior
            _, logdet = np.linalg.slogdet(S)
            marg = -0.5 * r @ np.linalg.solve(S, r) - 0.5 * logdet - 4 * np.log(2 * np.pi)
            worst_spread = max(worst_spread, float(np.ptp(inc)))
            worst_marg = max(worst_marg, float(np.max(np.abs(inc - marg))))
    ok = worst_spread < 1e-10 and worst_marg < 1e-8
    assert _verdict(3, ok, f"pairwise spread {worst_spread:.1e}, marginal error {worst_marg:.1e}")


def test_criterion_4_loss_bound():
    T, K = 12, 25
    bound = -T * K * np.log(K)
    m = generate_scenario(ScenarioConfig("linear", 10.0, 0))
    p = LearnedProposal.initialize(10, 8, T, np.random.default_rng(1), initial_input=m.mu0)
    _, ys = simulate(m, T, np.random.default_rng(2))
    J_same = float(build_loss_graph(p, m, ys, K, ReplayStream(np.random.default_rng(4).standard_normal(10)))
                   .value.reshape(()))
    report = train(p, m, TrainingConfig(num_runs=20, seed=5))
    worst = max(report.losses)
    ok = abs(J_same - bound) < 1e-9 and abs(bound + 965.66) < 5e-3 and worst <= bound
    assert _verdict(4, ok, f"identical particles J={J_same:.9f} (bound {bound:.9f}); "
                          f"max J over 20 training runs {worst:.2f}")


def test_criterion_5_ess_and_resampling():
    rng = np.random.default_rng(5)
    ess_ok, fire_ok = True, True
    for _ in range(2000):
        K = int(rng.integers(1, 60))
        lw = rng.standard_normal(K) * rng.uniform(0, 30)
        ess = effective_sample_size(lw)
        ess_ok &= 1.0 - 1e-12 <= ess <= K + 1e-9
        fire_ok &= should_resample(ess, K) == (ess < K / 3)
    fire_ok &= should_resample(8.33, 25) and not should_resample(25 / 3, 25)
    K = 25
    states = rng.standard_normal((1, K, 3))
    ens = ParticleEnsemble(states, rng.standard_normal(K) * 2)
    target = normalized_weights(ens) @ states[0]
    means, reset = [], True
    for _ in range(10_000):
        new, _ = resample(ens, rng)
        means.append(new.current.mean(axis=0))
        reset &= bool(np.all(new.log_weights == new.log_weights[0]))
    means = np.array(means)
    z = np.abs(means.mean(axis=0) - target) / (means.std(axis=0) / np.sqrt(len(means)))
    ok = ess_ok and fire_ok and reset and bool(np.all(z < 4))
    assert _verdict(5, ok, f"ESS range {ess_ok}, threshold {fire_ok}, reset {reset}, "
                          f"max |z| {z.max():.2f}")


@pytest.mark.slow
def test_criterion_6_training_trend():
    improved, ess_up, rows = 0, 0, []
    for seed in SEEDS:
        m = generate_scenario(ScenarioConfig("linear", 10.0, seed))
        init, _, _ = train_proposal(m, (seed,), 0, 25, 12)
        p, report, _ = train_proposal(m, (seed,), 200, 25, 12)
        J = np.asarray(report.losses)
        first, last = float(np.nanmean(J[:20])), float(np.nanmean(J[-20:]))
        ess_init = float(evaluate_degeneracy(init, m, 100, 25, np.random.default_rng([seed, 60]))[-1])
        ess_trained = float(evaluate_degeneracy(p, m, 100, 25, np.random.default_rng([seed, 60]))[-1])
        improved += last > first
        ess_up += ess_trained > ess_init
        rows.append({"seed": seed, "J_first20": first, "J_last20": last,
                     "final_ess_init": ess_init, "final_ess_trained": ess_trained,
                     "skipped": len(report.skipped)})
    _record("criterion_6", rows)
    ok = improved >= 8 and ess_up >= 8
    assert _verdict(6, ok, f"(a) J rose in {improved}/10 seeds, (b) final ESS rose in {ess_up}/10 seeds")


def _sweep_medians(scenario, seed):
    cfg = ExperimentConfig(scenario=scenario, snr_grid_db=[0.0, 10.0], trials=10, test_runs=100,
                           methods=["mindeg", "learned"], seed=seed)
    records, _ = run_experiment(cfg, jobs=int(os.environ.get("LEARNEDSIS_JOBS", "1")))
    return {(r.snr_db, r.method): r.median_rrmse for r in records}


@pytest.mark.slow
def test_criterion_7_figure_trend():
    wins = {0.0: 0, 10.0: 0}
    rows = []
    for seed in SEEDS:
        med = _sweep_medians("linear", seed)
        for snr in wins:
            wins[snr] += med[(snr, "learned")] <= med[(snr, "mindeg")]
            rows.append({"seed": seed, "snr_db": snr, "learned": med[(snr, "learned")],
                         "mindeg": med[(snr, "mindeg")]})
    _record("criterion_7_linear", rows)
    # Reported but not gated: one seed of the same protocol per scenario.
    for scenario in ("nonlinear", "uniform"):
        med = _sweep_medians(scenario, 0)
        _record(f"criterion_7_{scenario}",
                [{"seed": 0, "snr_db": s, "learned": med[(s, "learned")], "mindeg": med[(s, "mindeg")]}
                 for s in (0.0, 10.0)])
    ok = all(w >= 7 for w in wins.values())
    assert _verdict(7, ok, f"learned <= mindeg median RRMSE in {wins[0.0]}/10 seeds at 0 dB, "
                          f"{wins[10.0]}/10 at 10 dB")


def _sweep_bytes(tmp_path, name, threads, jobs):
    out = tmp_path / name
    env = dict(os.environ, OPENBLAS_NUM_THREADS=str(threads), OMP_NUM_THREADS=str(threads),
               MKL_NUM_THREADS=str(threads))
    subprocess.run([sys.executable, "-m", "learnedsis.cli", "sweep", "--config", str(tmp_path / "cfg.json"),
                    "--jobs", str(jobs), "--out", str(out)], check=True, env=env)
    return out.read_bytes()


def test_criterion_8_determinism(tmp_path):
    (tmp_path / "cfg.json").write_text(json.dumps({
        "scenario": "linear", "snr_grid_db": [0.0, 10.0], "trials": 2, "test_runs": 5,
        "training_runs": 5, "seed": 3}))
    runs = [_sweep_bytes(tmp_path, "a.csv", 1, 1), _sweep_bytes(tmp_path, "b.csv", 1, 1),
            _sweep_bytes(tmp_path, "c.csv", 4, 1), _sweep_bytes(tmp_path, "d.csv", 1, 2)]
    same = all(r == runs[0] for r in runs)
    assert _verdict(8, same, f"{len(runs)} sweeps (repeat, 4 BLAS threads, 2 jobs) "
                             f"{'byte-identical' if same else 'differ'}")

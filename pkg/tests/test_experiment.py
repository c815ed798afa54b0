import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from learnedsis.errors import ZeroTargetNorm
from learnedsis.experiment import (
    CSV_HEADER,
    METHODS,
    ExperimentConfig,
    MetricsRecord,
    _summary,
    evaluate_methods,
    records_to_csv,
    relative_rmse,
    run_experiment,
    train_proposal,
)
from learnedsis.models import ScenarioConfig, generate_scenario

seeds = st.integers(0, 2**32 - 1)


def test_relative_rmse_examples():
    t = np.array([[3.0, 4.0]])
    assert relative_rmse(t, t) == 0.0
    assert relative_rmse(np.array([[3.0, 4.5]]), t) == pytest.approx(0.1)
    assert relative_rmse(t * 1.2, t) == pytest.approx(0.2)


def test_relative_rmse_modes():
    tgt = np.array([[1.0, 0.0], [0.0, 2.0]])
    est = np.array([[1.5, 0.0], [0.0, 2.0]])
    assert relative_rmse(est, tgt, "mean") == pytest.approx(0.25)
    assert relative_rmse(est, tgt, "final") == 0.0
    assert relative_rmse(est, tgt, "stacked") == pytest.approx(0.5 / np.sqrt(5))


def test_relative_rmse_zero_target():
    with pytest.raises(ZeroTargetNorm):
        relative_rmse(np.ones((2, 2)), np.array([[1.0, 1.0], [0.0, 0.0]]))
    with pytest.raises(ValueError):
        relative_rmse(np.ones((2, 2)), np.ones((2, 3)))


@given(seeds, st.floats(1e-3, 1e3))
def test_relative_rmse_scale_invariant(seed, c):
    r = np.random.default_rng(seed)
    est, tgt = r.standard_normal((4, 3)), r.standard_normal((4, 3)) + 3
    for mode in ("mean", "final", "stacked"):
        assert relative_rmse(c * est, c * tgt, mode) == pytest.approx(relative_rmse(est, tgt, mode))


def test_config_validation():
    assert "lln" not in ExperimentConfig(scenario="nonlinear").methods
    assert ExperimentConfig().methods == list(METHODS)
    with pytest.raises(ValueError):
        ExperimentConfig(scenario="uniform", methods=["lln"])
    with pytest.raises(ValueError):
        ExperimentConfig(snr_grid_db=[11.0])
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"bogus": 1})
    cfg = ExperimentConfig(trials=2)
    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg


def test_metrics_record_validation():
    with pytest.raises(ValueError):
        MetricsRecord("linear", 0.0, "lln", -1.0, 0.0, 25.0, 1)


def test_summary_ignores_nan():
    med, std = _summary([1.0, np.nan, 3.0])
    assert med == 2.0 and std == pytest.approx(np.sqrt(2.0))
    assert np.isnan(_summary([np.nan])[0])


def test_mindeg_improves_with_particles():
    m = generate_scenario(ScenarioConfig("linear", 6.0, 0))
    small = evaluate_methods(m, ["mindeg"], 5, 25, 12, (0,))["mindeg"][0]
    large = evaluate_methods(m, ["mindeg"], 5, 10_000, 12, (0,))["mindeg"][0]
    assert np.median(large) < np.median(small)
    assert np.median(large) < 0.05


def test_lln_large_k_small_error():
    m = generate_scenario(ScenarioConfig("linear", 6.0, 1))
    rr, ess = evaluate_methods(m, ["lln"], 3, 100_000, 12, (1,))["lln"]
    assert np.all(rr < 0.02)
    np.testing.assert_array_equal(ess, 100_000)


def test_learned_needs_proposal():
    m = generate_scenario(ScenarioConfig("linear", 6.0, 1))
    with pytest.raises(ValueError):
        evaluate_methods(m, ["learned"], 1, 5, 12, (1,))


def test_method_streams_independent_of_selection():
    m = generate_scenario(ScenarioConfig("nonlinear", 6.0, 2))
    a = evaluate_methods(m, ["mindeg"], 3, 25, 12, (2,))["mindeg"][0]
    b = evaluate_methods(m, ["mindeg-resample", "mindeg"], 3, 25, 12, (2,))["mindeg"][0]
    np.testing.assert_array_equal(a, b)


def _tiny(**kw):
    d = dict(snr_grid_db=[0.0, 10.0], trials=2, test_runs=3, training_runs=2, hidden=[8, 8])
    d.update(kw)
    return ExperimentConfig(**d)


def test_csv_header_and_rows():
    records, raw = run_experiment(_tiny())
    text = records_to_csv(records)
    lines = text.splitlines()
    assert lines[0] == ",".join(CSV_HEADER)
    assert len(lines) == 1 + 2 * len(METHODS)
    assert all(r.trials_completed == 2 for r in records)
    assert set(raw) == {(0.0, 0), (0.0, 1), (10.0, 0), (10.0, 1)}


def test_csv_deterministic():
    a = records_to_csv(run_experiment(_tiny(methods=["mindeg", "learned"]))[0])
    b = records_to_csv(run_experiment(_tiny(methods=["mindeg", "learned"]))[0])
    assert a == b


def test_per_trial_rows():
    records, _ = run_experiment(_tiny(methods=["mindeg"], per_trial=True))
    text = records_to_csv(records).splitlines()
    assert text[0].split(",")[3] == "trial"
    assert len(text) == 1 + 2 * 2


def test_scenario_shared_across_snr(monkeypatch):
    # A trial uses the same graph at every SNR; only the noise scale changes.
    import learnedsis.experiment as ex

    seen = {}
    real = ex.evaluate_methods

    def spy(model, *a, **kw):
        seen[(model.Sigma_v[0, 0], model.A.tobytes())] = model
        return real(model, *a, **kw)

    monkeypatch.setattr(ex, "evaluate_methods", spy)
    ex.run_trial(_tiny(methods=["mindeg"]), 0.0, 1)
    ex.run_trial(_tiny(methods=["mindeg"]), 10.0, 1)
    ex.run_trial(_tiny(methods=["mindeg"]), 10.0, 0)
    graphs = [k[1] for k in seen]
    assert graphs[0] == graphs[1] and graphs[1] != graphs[2]


@settings(max_examples=5)
@given(st.integers(0, 50))
def test_train_proposal_reproducible(seed):
    m = generate_scenario(ScenarioConfig("linear", 10.0, seed))
    p, rep, _ = train_proposal(m, (seed,), 1, 5, 12, (4, 4))
    q, rep2, _ = train_proposal(m, (seed,), 1, 5, 12, (4, 4))
    np.testing.assert_array_equal(p.flat, q.flat)
    assert rep.losses == rep2.losses

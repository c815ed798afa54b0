"""Sequential importance sampling with pluggable proposals.

Weights live in the log domain. At every step each particle draws
``x_t ~ pi(. | x_{t-1}, y_t)`` and its log-weight grows by::

    log p(y_t | x_t) + log p(x_t | x_{t-1}) - log pi(x_t | x_{t-1}, y_t)

with the initial density standing in for the transition at ``t = 0``.

A proposal is any object with ``propose(t, x_prev, y, rng, K)`` returning
``(x (K, N), log_q (K,))``; ``x_prev`` is ``None`` at ``t = 0``.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .baselines import optimal_conditional
from .errors import AllWeightsDegenerate, DimensionMismatch

RESAMPLE_FRACTION = 1.0 / 3.0


@dataclass
class ParticleEnsemble:
    trajectories: np.ndarray  # (t + 1, K, N)
    log_weights: np.ndarray  # (K,)
    last_increment: np.ndarray = None

    @property
    def K(self):
        return self.log_weights.shape[0]

    @property
    def time(self):
        return self.trajectories.shape[0] - 1

    @property
    def current(self):
        return self.trajectories[-1]


class BootstrapProposal:
    """Sample from the model's own prior/transition."""

    def __init__(self, model):
        self.model = model

    def propose(self, t, x_prev, y, rng, K):
        m = self.model
        if x_prev is None:
            x = m.sample_initial(rng, K)
            return x, m.log_initial_density(x)
        x = m.sample_transition(x_prev, rng)
        return x, m.log_transition_density(x, x_prev)


class OptimalGaussianProposal:
    """Minimum-degeneracy proposal ``p(x_t | x_{t-1}, y_t)`` for Gaussian models.

    For the uniform-noise model this is the proposal of the *assumed*
    Gaussian model.
    """

    def __init__(self, model):
        self.model = model
        self.initial = optimal_conditional(model, initial=True)
        self.step = optimal_conditional(model)

    def moments(self, t, x_prev, y):
        if x_prev is None:
            return self.initial.mean(self.model.mu0, y), self.initial
        return self.step.mean(self.model.transition_mean(x_prev), y), self.step

    def propose(self, t, x_prev, y, rng, K):
        mean, cond = self.moments(t, x_prev, y)
        eta = rng.standard_normal((K, cond.dim))
        x = mean + eta @ cond.chol.T
        r = np.linalg.solve(cond.chol, (x - mean).T).T
        log_q = (-0.5 * np.sum(r * r, axis=1) - np.sum(np.log(np.diag(cond.chol)))
                 - 0.5 * cond.dim * np.log(2.0 * np.pi))
        return x, log_q

    def weight_increment(self, t, x_prev, y):
        """The exact increment, which does not depend on the sampled ``x_t``."""
        m = self.model
        if x_prev is None:
            return self.initial.log_marginal(m.mu0, y)
        return self.step.log_marginal(m.transition_mean(x_prev), y)


class LearnedSampler:
    """Adapter exposing a :class:`~learnedsis.nn.LearnedProposal` to the filter."""

    def __init__(self, proposal):
        self.proposal = proposal

    def propose(self, t, x_prev, y, rng, K):
        if x_prev is None:
            return self.proposal.sample_initial(K, y, rng)
        return self.proposal.sample(t, x_prev, y, rng)


def _clean(log_w):
    return np.where(np.isnan(log_w), -np.inf, log_w)


def sis_step(ensemble, model, proposal, y_t, rng, K=None, t=None):
    """Advance ``ensemble`` (``None`` before ``t = 0``) by one step."""
    y_t = np.asarray(y_t, dtype=np.float64)
    if y_t.shape != (model.meas_dim,):
        raise DimensionMismatch(f"y_t has shape {y_t.shape}, expected ({model.meas_dim},)")
    if ensemble is None:
        if K is None:
            raise ValueError("K is required for the first step")
        t = 0 if t is None else t
        x, log_q = proposal.propose(0, None, y_t, rng, K)
        log_prior = model.log_initial_density(x)
        prev_w = np.zeros(K)
        traj = x[None]
    else:
        t = ensemble.time + 1 if t is None else t
        x_prev = ensemble.current
        x, log_q = proposal.propose(t, x_prev, y_t, rng, ensemble.K)
        log_prior = model.log_transition_density(x, x_prev)
        prev_w = ensemble.log_weights
        traj = np.concatenate([ensemble.trajectories, x[None]], axis=0)
    with np.errstate(invalid="ignore"):
        inc = _clean(model.log_measurement_density(y_t, x) + log_prior - log_q)
        log_w = _clean(prev_w + inc)
    if not np.any(log_w > -np.inf):
        raise AllWeightsDegenerate(t=t)
    return ParticleEnsemble(traj, log_w, inc)


def normalized_weights(ensemble_or_log_weights):
    lw = getattr(ensemble_or_log_weights, "log_weights", ensemble_or_log_weights)
    lw = _clean(np.asarray(lw, dtype=np.float64))
    if lw.size == 0 or not np.any(lw > -np.inf):
        raise AllWeightsDegenerate()
    out = np.exp(lw - logsumexp(lw))
    return out / out.sum()


def effective_sample_size(ensemble_or_weights, normalized=False):
    """``1 / sum(w^2)`` of the normalized weights."""
    if normalized:
        w = np.asarray(ensemble_or_weights, dtype=np.float64)
    else:
        w = normalized_weights(ensemble_or_weights)
    return float(1.0 / np.sum(w * w))


def should_resample(ess, K):
    return ess < K * RESAMPLE_FRACTION


def resample(ensemble, rng):
    """Multinomial resampling of whole trajectories; weights become uniform."""
    w = normalized_weights(ensemble)
    K = ensemble.K
    idx = rng.choice(K, size=K, replace=True, p=w)
    return ParticleEnsemble(
        ensemble.trajectories[:, idx].copy(),
        np.full(K, -np.log(K)),
        None if ensemble.last_increment is None else ensemble.last_increment[idx],
    ), idx


def estimate_state(ensemble):
    """Weighted mean of the current states."""
    return normalized_weights(ensemble) @ ensemble.current


@dataclass
class FilterResult:
    estimates: np.ndarray  # (T, N), recorded before any resampling at t
    ess: np.ndarray  # (T,)
    weights: np.ndarray  # (T, K) normalized, before resampling
    resampled: np.ndarray  # (T,) bool
    increments: list = field(default_factory=list)

    def to_dict(self):
        return {
            "ess": self.ess.tolist(),
            "weights": self.weights.tolist(),
            "estimates": self.estimates.tolist(),
            "resampled": [bool(r) for r in self.resampled],
        }


def run_filter(model, proposal, measurements, K, resampling=False, rng=None,
               keep_increments=False):
    """Run SIS over all measurements, optionally resampling when ESS < K/3."""
    if rng is None:
        raise ValueError("a random stream is required")
    measurements = np.asarray(measurements, dtype=np.float64)
    T = measurements.shape[0]
    N = model.state_dim
    est = np.empty((T, N))
    ess = np.empty(T)
    weights = np.empty((T, K))
    flags = np.zeros(T, dtype=bool)
    incs = []
    ens = None
    for t in range(T):
        try:
            ens = sis_step(ens, model, proposal, measurements[t], rng, K=K, t=t)
        except AllWeightsDegenerate as exc:
            raise AllWeightsDegenerate(t=t) from exc
        w = normalized_weights(ens)
        weights[t] = w
        est[t] = w @ ens.current
        ess[t] = effective_sample_size(w, normalized=True)
        if keep_increments:
            incs.append(ens.last_increment.copy())
        if resampling and should_resample(ess[t], K):
            ens, _ = resample(ens, rng)
            flags[t] = True
    return FilterResult(est, ess, weights, flags, incs)

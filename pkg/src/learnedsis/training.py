"""Unsupervised training of the learned proposal.

The SIS filter is unrolled over the whole horizon as one differentiable
graph. Particles are reparametrized as ``mu + L eta`` with ``eta`` held
constant, so gradients reach every network through the samples, the model
densities and the proposal density. The objective is the sum over time and
particles of the log normalized weights, maximized with ADAM.
"""

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import LearnedSISError, NonFiniteGradient, TooManyDivergedRuns
from .filter import LearnedSampler, run_filter
from .linalg import LOG_2PI
from .models import simulate
from .nn import AdamState, LearnedProposal, adam_step, proposal_moments

log = logging.getLogger(__name__)

# Substream tags mixed into per-run seeds.
_SIM_STREAM = 0
_PARTICLE_STREAM = 1


@dataclass
class TrainingConfig:
    num_runs: int = 200
    K: int = 25
    T: int = 12
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0
    fixed_sequence: bool = False
    max_grad_norm: float = None
    max_diverged_fraction: float = 0.2

    def __post_init__(self):
        if self.num_runs < 0 or self.K < 1 or self.T < 1:
            raise ValueError("num_runs must be >= 0 and K, T positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainingReport:
    losses: list = field(default_factory=list)
    mean_ess: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    diverged: bool = False
    proposal: LearnedProposal = None

    @property
    def completed_runs(self):
        return len(self.losses)

    def to_dict(self):
        return {
            "losses": [None if not np.isfinite(v) else float(v) for v in self.losses],
            "mean_ess": [None if not np.isfinite(v) else float(v) for v in self.mean_ess],
            "skipped": list(self.skipped),
            "diverged": bool(self.diverged),
        }


@dataclass
class LossTrace:
    loss: ad.Node
    log_weights: list  # per-t (K,) arrays of cumulative log-weights
    particles: list  # per-t (N, K) nodes


def _ess(log_w):
    w = np.exp(log_w - np.max(log_w))
    w /= w.sum()
    return 1.0 / np.sum(w * w)


def build_loss_graph(proposal, model, measurements, K, rng, tape=None, return_trace=False):
    """Unrolled SIS filter whose root is ``sum_t sum_k log w~_t^(k)``."""
    tape = ad.Tape() if tape is None else tape
    measurements = np.asarray(measurements, dtype=np.float64)
    T = measurements.shape[0]
    N, M = proposal.state_dim, proposal.meas_dim
    x_prev = tape.constant(np.tile(proposal.initial_input.reshape(-1, 1), (1, K)))
    log_w, loss = None, None
    lw_values, particles = [], []
    const = -0.5 * N * LOG_2PI
    for t in range(T):
        y = measurements[t]
        y_cols = tape.constant(np.tile(y.reshape(-1, 1), (1, K)))
        mean, cov = proposal_moments(proposal, t, x_prev, y_cols)
        L = ad.cholesky(cov, proposal.rel_jitter)
        # Same draw layout as the plain sampler: one row of N normals per particle.
        eta = tape.constant(np.asarray(rng.standard_normal((K, N))).T)
        x = ad.add(mean, ad.lower_triangular_matvec(L, eta))
        u = ad.triangular_solve(L, ad.subtract(x, mean))
        log_q = ad.add(
            ad.subtract(ad.scalar_multiply(ad.sum_(ad.square(u), axis=0), -0.5),
                        ad.log_diagonal_sum(L)),
            const,
        )
        if t == 0:
            log_prior = model.graph_log_initial_density(x)
        else:
            log_prior = model.graph_log_transition_density(x, x_prev)
        log_lik = model.graph_log_measurement_density(y.reshape(-1, 1), x)
        inc = ad.subtract(ad.add(log_lik, log_prior), log_q)
        log_w = inc if log_w is None else ad.add(log_w, inc)
        term = ad.sum_(ad.subtract(log_w, ad.logsumexp_over_entries(log_w)))
        loss = term if loss is None else ad.add(loss, term)
        lw_values.append(log_w.value.reshape(-1).copy())
        particles.append(x)
        x_prev = x
    if return_trace:
        return LossTrace(loss, lw_values, particles)
    return loss


def measurements_from_model(model, T):
    """Measurement-only generator: simulates and discards the latent states."""

    def source(run, rng):
        _, ys = simulate(model, T, rng)
        return ys

    return source


def _clip(grads, max_norm):
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if total > max_norm:
        scale = max_norm / total
        grads = [g * scale for g in grads]
    return grads


def train(proposal, model, cfg, measurement_source=None):
    """Fit ``proposal`` in place by gradient ascent on the loss.

    ``measurement_source(run, rng)`` yields one measurement sequence per run;
    by default fresh sequences are simulated from ``model``. The trainer never
    sees latent states.
    """
    if proposal.horizon != cfg.T:
        raise ValueError(f"proposal horizon {proposal.horizon} != T={cfg.T}")
    if measurement_source is None:
        measurement_source = measurements_from_model(model, cfg.T)
    params = [proposal.flat]
    state = AdamState.for_params(params, learning_rate=cfg.learning_rate,
                                 beta1=cfg.beta1, beta2=cfg.beta2)
    report = TrainingReport(proposal=proposal)
    fixed = None
    for run in range(cfg.num_runs):
        sim_run = 0 if cfg.fixed_sequence else run
        if fixed is not None:
            ys = fixed
        else:
            ys = measurement_source(sim_run, np.random.default_rng([cfg.seed, _SIM_STREAM, sim_run]))
            if cfg.fixed_sequence:
                fixed = ys
        rng = np.random.default_rng([cfg.seed, _PARTICLE_STREAM, run])
        try:
            with np.errstate(all="ignore"):
                tr = build_loss_graph(proposal, model, ys, cfg.K, rng, return_trace=True)
                value = float(tr.loss.value.reshape(()))
                if not np.isfinite(value):
                    raise NonFiniteGradient(f"loss is {value}")
                tape = tr.loss.tape
                tape.backward(tr.loss)
                grads = [proposal.flat_gradient(tape, sign=-1.0)]
            if cfg.max_grad_norm is not None:
                grads = _clip(grads, cfg.max_grad_norm)
            adam_step(params, grads, state)
        except (LearnedSISError, FloatingPointError) as exc:
            log.warning("training run %d skipped: %s", run, exc)
            report.skipped.append(run)
            report.losses.append(float("nan"))
            report.mean_ess.append(float("nan"))
            continue
        report.losses.append(value)
        report.mean_ess.append(float(np.mean([_ess(lw) for lw in tr.log_weights])))
    if cfg.num_runs and len(report.skipped) > cfg.max_diverged_fraction * cfg.num_runs:
        report.diverged = True
        raise TooManyDivergedRuns(
            f"{len(report.skipped)} of {cfg.num_runs} training runs diverged", report
        )
    report.diverged = bool(report.skipped)
    return report


def evaluate_degeneracy(proposal, model, num_runs, K, rng, T=None):
    """Mean ESS per step over ``num_runs`` filters without resampling."""
    sampler = LearnedSampler(proposal) if isinstance(proposal, LearnedProposal) else proposal
    if T is None:
        T = proposal.horizon if isinstance(proposal, LearnedProposal) else 12
    total = np.zeros(T)
    for _ in range(num_runs):
        _, ys = simulate(model, T, rng)
        res = run_filter(model, sampler, ys, K, resampling=False, rng=rng)
        total += res.ess
    return total / max(num_runs, 1)

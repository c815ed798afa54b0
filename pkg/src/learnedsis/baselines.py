"""Closed-form references for Gaussian models.

The Kalman filter gives the exact posterior mean for the linear-Gaussian
scenario; :func:`lln_estimate` averages draws from that exact marginal
posterior; :class:`GaussianConditional` holds the minimum-degeneracy proposal
``p(x_t | x_{t-1}, y_t)`` for (non)linear-Gaussian transitions.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .errors import SingularInnovationCovariance
from .linalg import LOG_2PI, symmetric_inverse
from .models import LinearGaussianModel, NonlinearGaussianModel


@dataclass
class KalmanState:
    filtered_mean: np.ndarray
    filtered_cov: np.ndarray


def _chol(m, what):
    try:
        return np.linalg.cholesky(0.5 * (m + m.T))
    except np.linalg.LinAlgError:
        raise SingularInnovationCovariance(f"{what} is not positive definite") from None


def kalman_filter(model, measurements):
    """Filtered means and covariances ``m_{t|t}, P_{t|t}`` for ``t = 0..T-1``.

    Uses the Joseph form for the covariance update.
    """
    if isinstance(model, NonlinearGaussianModel):
        raise TypeError("the Kalman filter needs a linear model")
    A, C = model.A, model.C_meas
    Sv, Sw = model.Sigma_v, model.Sigma_w
    N = model.state_dim
    eye = np.eye(N)
    out = []
    m, P = model.mu0.copy(), model.Sigma0.copy()
    for t, y in enumerate(np.asarray(measurements, dtype=np.float64)):
        if t > 0:
            m = A @ m
            P = A @ P @ A.T + Sv
        S = C @ P @ C.T + Sw
        Ls = _chol(S, "innovation covariance")
        gain = cho_solve((Ls, True), C @ P).T
        m = m + gain @ (y - C @ m)
        IKC = eye - gain @ C
        P = IKC @ P @ IKC.T + gain @ Sw @ gain.T
        P = 0.5 * (P + P.T)
        out.append(KalmanState(m.copy(), P.copy()))
    return out


def lln_estimate(model, measurements, K, rng, states=None):
    """Per-step averages of ``K`` exact posterior draws of ``x_t``."""
    if states is None:
        states = kalman_filter(model, measurements)
    est = np.empty((len(states), model.state_dim))
    for t, st in enumerate(states):
        L = np.linalg.cholesky(st.filtered_cov + 1e-14 * np.trace(st.filtered_cov) * np.eye(model.state_dim))
        eta = rng.standard_normal((K, model.state_dim))
        est[t] = st.filtered_mean + (eta @ L.T).mean(axis=0)
    return est


class GaussianConditional:
    """``p(x | y) ∝ N(y; C x, Sw) N(x; m_prior, Sp)`` with cached factors.

    ``cov`` does not depend on ``m_prior`` or ``y``; only :meth:`mean` does.
    """

    def __init__(self, prior_cov, C, Sw):
        prec = symmetric_inverse(prior_cov) + C.T @ symmetric_inverse(Sw) @ C
        self.cov = symmetric_inverse(prec)
        self.chol = np.linalg.cholesky(self.cov)
        self._from_prior = self.cov @ symmetric_inverse(prior_cov)
        self._from_meas = self.cov @ C.T @ symmetric_inverse(Sw)
        self.C = C
        pred = Sw + C @ prior_cov @ C.T
        self.pred_cov = 0.5 * (pred + pred.T)
        self._pred_chol = np.linalg.cholesky(self.pred_cov)
        self._pred_norm = float(-np.sum(np.log(np.diag(self._pred_chol))) - 0.5 * C.shape[0] * LOG_2PI)
        self.dim = prior_cov.shape[0]

    def mean(self, m_prior, y):
        """Rows of ``m_prior (K, N)`` (or one vector) and one ``y``."""
        return m_prior @ self._from_prior.T + self._from_meas @ np.asarray(y)

    def log_marginal(self, m_prior, y):
        """``log N(y; C m_prior, Sw + C Sp C^T)`` per row of ``m_prior``."""
        resid = np.asarray(y) - m_prior @ self.C.T
        r = solve_triangular(self._pred_chol, np.atleast_2d(resid).T, lower=True).T
        out = -0.5 * np.sum(r * r, axis=-1) + self._pred_norm
        return out if np.ndim(m_prior) > 1 else float(out[0])


def _conditionals(model):
    cache = getattr(model, "_optimal_cache", None)
    if cache is None:
        cache = (
            GaussianConditional(model.Sigma0, model.C_meas, model.Sigma_w),
            GaussianConditional(model.Sigma_v, model.C_meas, model.Sigma_w),
        )
        model._optimal_cache = cache
    return cache


def optimal_conditional(model, initial=False):
    """Cached :class:`GaussianConditional` for ``t = 0`` or ``t >= 1``."""
    if not isinstance(model, LinearGaussianModel):
        raise TypeError("optimal proposal needs a Gaussian-density model")
    return _conditionals(model)[0 if initial else 1]


def optimal_proposal_params(model, x_prev, y_t):
    """Mean and covariance of ``p(x_t | x_{t-1}, y_t)``.

    ``x_prev=None`` means ``t = 0``, where the prior ``N(mu0, Sigma0)`` takes
    the place of the transition.
    """
    if x_prev is None:
        cond = optimal_conditional(model, initial=True)
        return cond.mean(model.mu0, y_t), cond.cov
    cond = optimal_conditional(model)
    return cond.mean(model.transition_mean(x_prev), y_t), cond.cov

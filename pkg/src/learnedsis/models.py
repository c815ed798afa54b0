"""Benchmark state-space models and the random scenario generator.

All three models share the linear-Gaussian density machinery:

* ``LinearGaussianModel``: ``x_t = A x_{t-1} + v_t``, ``y_t = C x_t + w_t``.
* ``NonlinearGaussianModel``: ``x_t = |A x_{t-1}| + v_t`` (entrywise).
* ``LinearUniformModel``: the linear system driven by i.i.d. uniform noise,
  while its densities report the *assumed* Gaussian model.

Plain-array methods take particles as rows ``(K, N)``; the ``graph_*``
methods take autodiff nodes with particles as columns ``(N, K)`` and return
``(1, K)`` log-density rows.
"""

from dataclasses import asdict, dataclass
from itertools import combinations

import numpy as np
from scipy.spatial import Delaunay, QhullError

from . import autodiff as ad
from .errors import DegenerateGeometry, DimensionMismatch
from .linalg import LOG_2PI, cholesky, random_covariance, spectral_norm

SCENARIOS = ("linear", "nonlinear", "uniform")
SQRT3 = float(np.sqrt(3.0))


class _GaussianDensity:
    """``N(., S)`` with a cached factor, evaluated row-wise or on a graph."""

    def __init__(self, cov):
        self.cov = np.asarray(cov, dtype=np.float64)
        self.chol = cholesky(self.cov).lower
        self.inv_chol = np.linalg.solve(self.chol, np.eye(self.cov.shape[0]))
        self.dim = self.cov.shape[0]
        self.log_norm = float(-np.sum(np.log(np.diag(self.chol))) - 0.5 * self.dim * LOG_2PI)

    def log_pdf(self, diff):
        """``diff`` is ``(K, n)`` or ``(n,)``."""
        diff = np.asarray(diff, dtype=np.float64)
        r = diff @ self.inv_chol.T
        return -0.5 * np.sum(r * r, axis=-1) + self.log_norm

    def graph_log_pdf(self, diff):
        """``diff`` is an ``(n, K)`` node; returns ``(1, K)``."""
        r = ad.matmul(self.inv_chol, diff)
        return ad.add(ad.scalar_multiply(ad.sum_(ad.square(r), axis=0), -0.5), self.log_norm)

    def noise(self, rng, size):
        eta = rng.standard_normal((size, self.dim))
        return eta @ self.chol.T


class LinearGaussianModel:
    scenario = "linear"

    def __init__(self, A, C_meas, mu0, Sigma0, Sigma_v, Sigma_w):
        self.A = np.asarray(A, dtype=np.float64)
        self.C_meas = np.asarray(C_meas, dtype=np.float64)
        self.mu0 = np.asarray(mu0, dtype=np.float64).reshape(-1)
        N = self.A.shape[0]
        M = self.C_meas.shape[0]
        if self.A.shape != (N, N) or self.C_meas.shape != (M, N) or self.mu0.shape != (N,):
            raise DimensionMismatch("A, C_meas and mu0 have inconsistent shapes")
        self.Sigma0 = np.asarray(Sigma0, dtype=np.float64)
        self.Sigma_v = np.asarray(Sigma_v, dtype=np.float64)
        self.Sigma_w = np.asarray(Sigma_w, dtype=np.float64)
        self._init = _GaussianDensity(self.Sigma0)
        self._trans = _GaussianDensity(self.Sigma_v)
        self._meas = _GaussianDensity(self.Sigma_w)
        self.meta = {}

    @property
    def state_dim(self):
        return self.A.shape[0]

    @property
    def meas_dim(self):
        return self.C_meas.shape[0]

    # -- dynamics ---------------------------------------------------------

    def transition_mean(self, x_prev):
        return np.asarray(x_prev, dtype=np.float64) @ self.A.T

    def graph_transition_mean(self, x_prev):
        return ad.matmul(self.A, x_prev)

    def measurement_mean(self, x):
        return np.asarray(x, dtype=np.float64) @ self.C_meas.T

    # -- sampling ---------------------------------------------------------

    def _initial_noise(self, rng, size):
        return self._init.noise(rng, size)

    def _transition_noise(self, rng, size):
        return self._trans.noise(rng, size)

    def _measurement_noise(self, rng, size):
        return self._meas.noise(rng, size)

    @staticmethod
    def _rows(x):
        x = np.asarray(x, dtype=np.float64)
        return (x[None], True) if x.ndim == 1 else (x, False)

    def sample_initial(self, rng, size=None):
        k = 1 if size is None else size
        out = self.mu0 + self._initial_noise(rng, k)
        return out[0] if size is None else out

    def sample_transition(self, x_prev, rng):
        X, single = self._rows(x_prev)
        out = self.transition_mean(X) + self._transition_noise(rng, X.shape[0])
        return out[0] if single else out

    def sample_measurement(self, x, rng):
        X, single = self._rows(x)
        out = self.measurement_mean(X) + self._measurement_noise(rng, X.shape[0])
        return out[0] if single else out

    # -- densities --------------------------------------------------------

    def _check(self, x, n, what):
        if np.shape(x)[-1] != n:
            raise DimensionMismatch(f"{what} has trailing dim {np.shape(x)[-1]}, expected {n}")

    def log_initial_density(self, x):
        self._check(x, self.state_dim, "x")
        return self._init.log_pdf(np.asarray(x) - self.mu0)

    def log_transition_density(self, x, x_prev):
        self._check(x, self.state_dim, "x")
        self._check(x_prev, self.state_dim, "x_prev")
        return self._trans.log_pdf(np.asarray(x) - self.transition_mean(x_prev))

    def log_measurement_density(self, y, x):
        self._check(y, self.meas_dim, "y")
        self._check(x, self.state_dim, "x")
        return self._meas.log_pdf(np.asarray(y) - self.measurement_mean(x))

    def graph_log_initial_density(self, x):
        return self._init.graph_log_pdf(ad.subtract(x, self.mu0.reshape(-1, 1)))

    def graph_log_transition_density(self, x, x_prev):
        return self._trans.graph_log_pdf(ad.subtract(x, self.graph_transition_mean(x_prev)))

    def graph_log_measurement_density(self, y, x):
        """``y`` is an ``(M,)`` array or ``(M, 1)`` / ``(M, K)`` node."""
        if not isinstance(y, ad.Node):
            y = np.asarray(y, dtype=np.float64).reshape(-1, 1)
        return self._meas.graph_log_pdf(ad.subtract(y, ad.matmul(self.C_meas, x)))

    # -- persistence ------------------------------------------------------

    def to_dict(self):
        return {
            "scenario": self.scenario,
            "A": self.A.tolist(),
            "C_meas": self.C_meas.tolist(),
            "mu0": self.mu0.tolist(),
            "Sigma0": self.Sigma0.tolist(),
            "Sigma_v": self.Sigma_v.tolist(),
            "Sigma_w": self.Sigma_w.tolist(),
            **self.meta,
        }


class NonlinearGaussianModel(LinearGaussianModel):
    scenario = "nonlinear"

    def transition_mean(self, x_prev):
        return np.abs(np.asarray(x_prev, dtype=np.float64) @ self.A.T)

    def graph_transition_mean(self, x_prev):
        return ad.abs_(ad.matmul(self.A, x_prev))


class LinearUniformModel(LinearGaussianModel):
    """Linear dynamics with uniform noise; densities assume Gaussians.

    Noise entries are uniform on ``[-sigma*sqrt(3), sigma*sqrt(3)]`` (variance
    ``sigma^2``); initial entries are uniform on ``[1 - sqrt(3), 1 + sqrt(3)]``
    around ``mu0`` (unit variance).
    """

    scenario = "uniform"

    def __init__(self, A, C_meas, mu0, sigma):
        N, M = A.shape[0], C_meas.shape[0]
        self.sigma = float(sigma)
        super().__init__(A, C_meas, mu0, np.eye(N), self.sigma ** 2 * np.eye(N),
                         self.sigma ** 2 * np.eye(M))

    def _initial_noise(self, rng, size):
        return rng.uniform(-SQRT3, SQRT3, size=(size, self.state_dim))

    def _transition_noise(self, rng, size):
        h = self.sigma * SQRT3
        return rng.uniform(-h, h, size=(size, self.state_dim))

    def _measurement_noise(self, rng, size):
        h = self.sigma * SQRT3
        return rng.uniform(-h, h, size=(size, self.meas_dim))

    def to_dict(self):
        return {**super().to_dict(), "sigma": self.sigma}


def model_from_dict(d):
    A, C = np.array(d["A"]), np.array(d["C_meas"])
    mu0 = np.array(d["mu0"])
    if d["scenario"] == "uniform":
        model = LinearUniformModel(A, C, mu0, d["sigma"])
    else:
        cls = NonlinearGaussianModel if d["scenario"] == "nonlinear" else LinearGaussianModel
        model = cls(A, C, mu0, np.array(d["Sigma0"]), np.array(d["Sigma_v"]), np.array(d["Sigma_w"]))
    model.meta = {k: d[k] for k in ("seed", "snr_db") if k in d}
    return model


# -- scenario generation ------------------------------------------------------

@dataclass(frozen=True)
class ScenarioConfig:
    scenario: str = "linear"
    snr_db: float = 10.0
    seed: int = 0
    N: int = 10
    M: int = 8
    T: int = 12

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}; expected one of {SCENARIOS}")
        if not 0.0 <= self.snr_db <= 10.0:
            raise ValueError(f"snr_db={self.snr_db} outside the swept range [0, 10]")
        if min(self.N, self.M, self.T) < 1:
            raise ValueError("N, M and T must be positive")


def snr_linear(snr_db):
    return 10.0 ** (snr_db / 10.0)


def random_planar_adjacency(n, rng, max_attempts=100):
    """Adjacency of the Delaunay triangulation of ``n`` uniform points."""
    for _ in range(max_attempts):
        pts = rng.uniform(size=(n, 2))
        try:
            tri = Delaunay(pts)
        except QhullError:
            continue
        A = np.zeros((n, n))
        for simplex in tri.simplices:
            for i, j in combinations(simplex, 2):
                A[i, j] = A[j, i] = 1.0
        if np.all(A.sum(axis=1) > 0):
            return A
    raise DegenerateGeometry(f"no valid triangulation after {max_attempts} attempts")


def random_pair_measurements(m, n, rng):
    """``m`` rows each summing two distinct state entries."""
    pairs = list(combinations(range(n), 2))
    idx = rng.choice(len(pairs), size=m, replace=m > len(pairs))
    C = np.zeros((m, n))
    for row, k in enumerate(idx):
        i, j = pairs[k]
        C[row, i] = C[row, j] = 1.0
    return C


def generate_scenario(cfg, rng=None):
    """Draw a random model for ``cfg``.

    Random draws never depend on ``cfg.snr_db``: the same seed gives the same
    graph, measurement pattern and covariance shapes at every SNR.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    N, M = cfg.N, cfg.M
    adj = random_planar_adjacency(N, rng)
    A = adj / spectral_norm(adj)
    C = random_pair_measurements(M, N, rng)
    mu0 = np.ones(N)
    ratio = snr_linear(cfg.snr_db)
    if cfg.scenario == "uniform":
        sigma2 = float(mu0 @ mu0) / ratio
        model = LinearUniformModel(A, C, mu0, np.sqrt(sigma2))
    else:
        # SNR = |mu0|^2 / |Sigma_v|_2^2  =>  |Sigma_v|_2 = |mu0| / sqrt(SNR).
        s = float(np.sqrt(float(mu0 @ mu0) / ratio))
        Sv = random_covariance(N, s, rng)
        Sw = random_covariance(M, s, rng)
        cls = NonlinearGaussianModel if cfg.scenario == "nonlinear" else LinearGaussianModel
        model = cls(A, C, mu0, np.eye(N), Sv, Sw)
    model.meta = {"seed": cfg.seed, "snr_db": cfg.snr_db}
    return model


def simulate(model, T, rng):
    """Ancestral sampling; returns ``(states (T, N), measurements (T, M))``."""
    if T < 1:
        raise ValueError("T must be at least 1")
    xs = np.empty((T, model.state_dim))
    ys = np.empty((T, model.meas_dim))
    x = model.sample_initial(rng)
    for t in range(T):
        if t > 0:
            x = model.sample_transition(x, rng)
        xs[t] = x
        ys[t] = model.sample_measurement(x, rng)
    return xs, ys


def scenario_dump(model, cfg=None, states=None, measurements=None):
    out = {"model": model.to_dict()}
    if cfg is not None:
        out["config"] = asdict(cfg)
    if states is not None:
        out["states"] = np.asarray(states).tolist()
    if measurements is not None:
        out["measurements"] = np.asarray(measurements).tolist()
    return out

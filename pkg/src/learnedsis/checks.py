"""Built-in verification suites used by the ``gradcheck`` and ``selftest`` commands."""

import numpy as np

from . import autodiff as ad
from .baselines import kalman_filter
from .filter import (
    OptimalGaussianProposal,
    effective_sample_size,
    normalized_weights,
    resample,
    run_filter,
    should_resample,
    ParticleEnsemble,
)
from .linalg import random_covariance
from .models import LinearGaussianModel, NonlinearGaussianModel, simulate
from .nn import LearnedProposal, proposal_moments
from .training import build_loss_graph

GRADCHECK_TOL = 1e-4


def _weighted(node, W):
    """Scalar ``sum(W * node)`` so every output entry gets a distinct weight."""
    return ad.sum_(ad.elementwise_multiply(node, node.tape.constant(W)))


def _spd(rng, n, B=None):
    if B is None:
        G = rng.standard_normal((n, n))
        return G @ G.T + n * np.eye(n)
    G = rng.standard_normal((B, n, n))
    return G @ np.swapaxes(G, 1, 2) + n * np.eye(n)


def _lower(rng, n, B=None):
    shape = (n, n) if B is None else (B, n, n)
    L = np.tril(rng.standard_normal(shape))
    idx = np.arange(n)
    if B is None:
        L[idx, idx] = 1.0 + np.abs(L[idx, idx])
    else:
        L[:, idx, idx] = 1.0 + np.abs(L[:, idx, idx])
    return L


def _op_cases(rng):
    """``(name, f(tape, nodes), params)`` for every graph op."""
    n, B = 3, 4
    a, b = rng.standard_normal((n, B)), rng.standard_normal((n, B))
    row = rng.standard_normal((1, B))
    pos = rng.uniform(0.5, 2.0, (n, B))
    # Output weights are drawn once so every evaluation sees the same scalar map.
    w_nb, w_bnn, w_nn = (rng.standard_normal(s) for s in [(n, B), (B, n, n), (n, n)])
    w_1b, w_n1, w_2nb, w_bn = (rng.standard_normal(s) for s in [(1, B), (n, 1), (2 * n, B), (B, n)])
    S1, Sb = _spd(rng, n), _spd(rng, n, B)
    L1, Lb = _lower(rng, n), _lower(rng, n, B)
    v1 = rng.standard_normal((n, 1))
    M = rng.standard_normal((n, n))
    z1, zb = rng.standard_normal((n, 1)), rng.standard_normal((n, B))

    def sym_in(f):
        # Symmetric inputs: perturb a free matrix and symmetrize inside the graph.
        return lambda t, x: f(t, [ad.symmetrize(x[0])])

    return [
        ("add", lambda t, x: _weighted(ad.add(x[0], x[1]), w_nb), [a, b]),
        ("add_broadcast", lambda t, x: _weighted(ad.add(x[0], x[1]), w_nb), [a, row]),
        ("subtract", lambda t, x: _weighted(ad.subtract(x[0], x[1]), w_nb), [a, row]),
        ("elementwise_multiply", lambda t, x: _weighted(ad.elementwise_multiply(x[0], x[1]), w_nb), [a, b]),
        ("scalar_multiply", lambda t, x: _weighted(ad.scalar_multiply(x[0], -2.5), w_nb), [a]),
        ("negate", lambda t, x: _weighted(ad.negate(x[0]), w_nb), [a]),
        ("tanh", lambda t, x: _weighted(ad.tanh(x[0]), w_nb), [a]),
        ("exp", lambda t, x: _weighted(ad.exp(x[0]), w_nb), [a]),
        ("log", lambda t, x: _weighted(ad.log(x[0]), w_nb), [pos]),
        ("square", lambda t, x: _weighted(ad.square(x[0]), w_nb), [a]),
        ("abs", lambda t, x: _weighted(ad.abs_(x[0]), w_nb), [pos * np.sign(a)]),
        ("sum_all", lambda t, x: ad.scalar_multiply(ad.sum_(x[0]), 1.7), [a]),
        ("sum_axis0", lambda t, x: _weighted(ad.sum_(x[0], axis=0), w_1b), [a]),
        ("sum_axis1", lambda t, x: _weighted(ad.sum_(x[0], axis=1), w_n1), [a]),
        ("logsumexp", lambda t, x: ad.logsumexp_over_entries(x[0]), [a]),
        ("matmul", lambda t, x: _weighted(ad.matmul(x[0], x[1]), w_nb), [M, a]),
        ("matvec", lambda t, x: _weighted(ad.matvec(x[0], x[1]), w_n1), [M, v1]),
        ("concat_rows", lambda t, x: _weighted(ad.concat_rows(x[0], x[1]), w_2nb), [a, b]),
        ("transpose", lambda t, x: _weighted(ad.transpose(x[0]), w_bn), [a]),
        ("symmetrize", lambda t, x: _weighted(ad.symmetrize(x[0]), w_nn), [M]),
        ("lower_triangular_matvec", lambda t, x: _weighted(ad.lower_triangular_matvec(x[0], x[1]), w_n1), [L1, v1]),
        ("lower_triangular_matvec_batched", lambda t, x: _weighted(ad.lower_triangular_matvec(x[0], x[1]), w_nb), [Lb, a]),
        ("triangular_solve", lambda t, x: _weighted(ad.triangular_solve(x[0], x[1]), w_n1), [L1, v1]),
        ("triangular_solve_batched", lambda t, x: _weighted(ad.triangular_solve(x[0], x[1]), w_nb), [Lb, a]),
        ("log_diagonal_sum", lambda t, x: ad.log_diagonal_sum(x[0]), [L1]),
        ("log_diagonal_sum_batched", lambda t, x: _weighted(ad.log_diagonal_sum(x[0]), w_1b), [Lb]),
        ("cholesky", sym_in(lambda t, x: _weighted(ad.cholesky(x[0]), np.tril(w_nn))), [S1]),
        ("cholesky_batched", sym_in(lambda t, x: _weighted(ad.cholesky(x[0]), np.tril(w_bnn))), [Sb]),
        ("gaussian_kernel", lambda t, x: _weighted(ad.gaussian_kernel(x[0]), w_nn), [z1]),
        ("gaussian_kernel_batched", lambda t, x: _weighted(ad.gaussian_kernel(x[0]), w_bnn), [zb]),
        ("congruence", lambda t, x: _weighted(ad.congruence(x[0], x[1]), w_nn), [M, S1]),
        ("congruence_batched", lambda t, x: _weighted(ad.congruence(x[0], x[1]), w_bnn), [M, Sb]),
    ]


def _bound_proposal(proposal):
    """``f`` adapter: evaluate a graph with the proposal's arrays set from nodes."""
    def wrap(build):
        def f(tape, nodes):
            q = proposal.copy()
            for arr, node in zip(q.parameters(), nodes):
                arr[...] = node.value.reshape(arr.shape)
                tape.bind(arr, node)
            return build(tape, q)
        return f
    return wrap


def toy_problem(rng, cls=LinearGaussianModel, N=2, M=2, T=2):
    A = 0.5 * rng.standard_normal((N, N))
    C = rng.standard_normal((M, N))
    Sv = random_covariance(N, 1.0, rng) + 0.2 * np.eye(N)
    Sw = random_covariance(M, 1.0, rng) + 0.2 * np.eye(M)
    model = cls(A, C, np.ones(N), np.eye(N), Sv, Sw)
    _, ys = simulate(model, T, rng)
    proposal = LearnedProposal.initialize(N, M, T, rng, hidden=(5, 4), mix_scale=0.7)
    return model, ys, proposal


def gradcheck_suite(seed=0):
    """Relative errors of every op, proposal_moments and the toy-filter loss."""
    rng = np.random.default_rng(seed)
    results = []
    for name, f, params in _op_cases(rng):
        results.append((name, ad.gradcheck(f, params)))

    model, ys, p = toy_problem(rng)
    wrap = _bound_proposal(p)
    x_prev = rng.standard_normal((2, 3))
    y_cols = np.tile(ys[1].reshape(-1, 1), (1, 3))
    wm, wc = rng.standard_normal((2, 3)), rng.standard_normal((3, 2, 2))

    def moments(tape, q):
        mean, cov = proposal_moments(q, 1, tape.constant(x_prev), tape.constant(y_cols))
        return ad.add(_weighted(mean, wm), _weighted(cov, wc))

    results.append(("proposal_moments", ad.gradcheck(wrap(moments), p.parameters())))
    for cls in (LinearGaussianModel, NonlinearGaussianModel):
        model, ys, p = toy_problem(rng, cls)
        wrap = _bound_proposal(p)
        loss = lambda tape, q: build_loss_graph(q, model, ys, 3, np.random.default_rng(seed + 7), tape=tape)
        results.append((f"loss_{model.scenario}", ad.gradcheck(wrap(loss), p.parameters())))
    return results


def _brute_force_posterior(model, ys):
    """Filtering means by conditioning the joint Gaussian of all states and measurements."""
    T, N = len(ys), model.state_dim
    A, C = model.A, model.C_meas
    # x_t = A^t x_0 + sum_s A^{t-s} v_s, stacked as x = G u with u = (x_0, v_1..v_{T-1}).
    G = np.zeros((T * N, T * N))
    for t in range(T):
        for s in range(t + 1):
            G[t * N:(t + 1) * N, s * N:(s + 1) * N] = np.linalg.matrix_power(A, t - s)
    cov_u = np.zeros((T * N, T * N))
    cov_u[:N, :N] = model.Sigma0
    for s in range(1, T):
        cov_u[s * N:(s + 1) * N, s * N:(s + 1) * N] = model.Sigma_v
    mean_x = G @ np.concatenate([model.mu0, np.zeros((T - 1) * N)])
    cov_x = G @ cov_u @ G.T
    means = []
    for t in range(T):
        H = np.kron(np.eye(t + 1), C)
        idx = slice(0, (t + 1) * N)
        Sxy = cov_x[:, idx] @ H.T
        Syy = H @ cov_x[idx, idx] @ H.T + np.kron(np.eye(t + 1), model.Sigma_w)
        resid = ys[:t + 1].reshape(-1) - H @ mean_x[idx]
        post = mean_x + Sxy @ np.linalg.solve(Syy, resid)
        means.append(post[t * N:(t + 1) * N])
    return np.array(means)


def kalman_oracle_error(rng, instances=20, N=2, T=4):
    worst = 0.0
    for _ in range(instances):
        model = LinearGaussianModel(
            0.6 * rng.standard_normal((N, N)), rng.standard_normal((N, N)),
            rng.standard_normal(N), random_covariance(N, 1.0, rng) + 0.1 * np.eye(N),
            random_covariance(N, 1.0, rng) + 0.1 * np.eye(N),
            random_covariance(N, 1.0, rng) + 0.1 * np.eye(N),
        )
        _, ys = simulate(model, T, rng)
        km = np.array([s.filtered_mean for s in kalman_filter(model, ys)])
        worst = max(worst, float(np.max(np.abs(km - _brute_force_posterior(model, ys)))))
    return worst


def selftest(seed=0):
    """Quick property checks; returns ``(name, passed, detail)`` triples."""
    rng = np.random.default_rng(seed)
    out = []
    worst = max(err for _, err in gradcheck_suite(seed))
    out.append(("gradcheck", worst < GRADCHECK_TOL, f"max rel err {worst:.2e}"))
    err = kalman_oracle_error(rng, instances=5)
    out.append(("kalman_vs_joint_conditioning", err < 1e-8, f"max abs err {err:.2e}"))

    model, ys, _ = toy_problem(rng, N=3, M=2, T=3)
    opt = OptimalGaussianProposal(model)
    x_prev = rng.standard_normal((50, 3))
    x, log_q = opt.propose(1, x_prev[:1].repeat(50, axis=0), ys[1], rng, 50)
    inc = (model.log_measurement_density(ys[1], x)
           + model.log_transition_density(x, x_prev[:1].repeat(50, axis=0)) - log_q)
    spread = float(np.ptp(inc))
    out.append(("optimal_increment_constant", spread < 1e-10, f"spread {spread:.2e}"))

    lw = rng.standard_normal(25) * 3
    ess = effective_sample_size(lw)
    ok = 1.0 <= ess <= 25.0 and should_resample(ess, 25) == (ess < 25 / 3)
    out.append(("ess_bounds", ok, f"ess {ess:.3f}"))

    ens = ParticleEnsemble(rng.standard_normal((1, 25, 3)), lw)
    new, _ = resample(ens, rng)
    w = normalized_weights(new)
    out.append(("resample_uniform", bool(np.allclose(w, 1.0 / 25)), ""))

    res = run_filter(model, opt, ys, 25, resampling=True, rng=rng)
    ok = bool(np.all((res.ess >= 1.0 - 1e-12) & (res.ess <= 25 + 1e-9)))
    out.append(("filter_ess_range", ok, ""))
    return out

"""Mean/covariance networks for the learned proposal, and ADAM.

The proposal at step ``t`` is ``N(mu_t(x_prev, y_t), Sigma(x_prev, y_t))``
where ``mu_t`` is a per-step MLP and ``Sigma = C D C^T`` with ``D`` the
Gaussian-kernel Gram matrix of another (time-shared) MLP's output.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import kernels
from .errors import NonFiniteGradient, ShapeMismatch, TimeIndexOutOfRange
from .linalg import LOG_2PI, REL_JITTER, cholesky_relative

DEFAULT_HIDDEN = (256, 512)


@dataclass
class Mlp:
    """Affine layers with tanh between them and an identity output."""

    weights: list
    biases: list

    def __post_init__(self):
        if not self.weights or len(self.weights) != len(self.biases):
            raise ShapeMismatch("an Mlp needs at least one layer and one bias per layer")
        for prev, (W, b) in zip(self.layer_dims, zip(self.weights, self.biases)):
            if W.shape[1] != prev or b.shape != (W.shape[0], 1):
                raise ShapeMismatch(f"layer shapes disagree: W {W.shape}, b {b.shape}")

    @property
    def layer_dims(self):
        return [self.weights[0].shape[1]] + [W.shape[0] for W in self.weights]

    def parameters(self):
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend((W, b))
        return out

    def apply(self, X):
        """Plain forward pass on columns ``X`` of shape ``(n_in, B)``."""
        Z = X
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            Z = W @ Z + b
            if i < last:
                Z = np.tanh(Z)
        return Z


def init_params(dims, rng):
    """Glorot-uniform weights and zero biases for layer sizes ``dims``."""
    dims = [int(d) for d in dims]
    if len(dims) < 2 or min(dims) < 1:
        raise ShapeMismatch(f"invalid layer dims {dims}")
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros((fan_out, 1)))
    return Mlp(weights, biases)


def mlp_forward(net, x):
    """Graph forward pass; parameters become tape parameters of ``x.tape``."""
    if x.shape[0] != net.layer_dims[0]:
        raise ShapeMismatch(f"input has {x.shape[0]} rows, net expects {net.layer_dims[0]}")
    tape = x.tape
    z = x
    last = len(net.weights) - 1
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        z = ad.add(ad.matmul(tape.parameter(W), z), tape.parameter(b))
        if i < last:
            z = ad.tanh(z)
    return z


@dataclass
class LearnedProposal:
    mean_nets: list
    cov_net: Mlp
    mix: np.ndarray
    state_dim: int
    meas_dim: int
    horizon: int
    initial_input: np.ndarray = None
    rel_jitter: float = REL_JITTER

    def __post_init__(self):
        if len(self.mean_nets) != self.horizon:
            raise ShapeMismatch("need exactly one mean network per time step")
        n_in = self.state_dim + self.meas_dim
        for net in [*self.mean_nets, self.cov_net]:
            dims = net.layer_dims
            if dims[0] != n_in or dims[-1] != self.state_dim:
                raise ShapeMismatch(f"network dims {dims} do not fit N={self.state_dim}, M={self.meas_dim}")
        if self.mix.shape != (self.state_dim, self.state_dim):
            raise ShapeMismatch(f"mixing matrix has shape {self.mix.shape}")
        if self.initial_input is None:
            self.initial_input = np.ones(self.state_dim)
        self.initial_input = np.asarray(self.initial_input, dtype=np.float64).reshape(-1)
        self._flatten()

    def _flatten(self):
        """Move every parameter into one contiguous buffer, keeping views."""
        params = self.parameters()
        self.flat = np.empty(sum(p.size for p in params))
        offset = 0
        views = []
        for p in params:
            view = self.flat[offset:offset + p.size].reshape(p.shape)
            view[...] = p
            views.append(view)
            offset += p.size
        it = iter(views)
        for net in [*self.mean_nets, self.cov_net]:
            for i in range(len(net.weights)):
                net.weights[i] = next(it)
                net.biases[i] = next(it)
        self.mix = next(it)

    def flat_gradient(self, tape, sign=1.0):
        """Gather the tape's parameter adjoints into one buffer like :attr:`flat`."""
        out = np.empty_like(self.flat)
        offset = 0
        for p in self.parameters():
            g = tape.grad_of(p)
            out[offset:offset + p.size] = g.reshape(-1)
            offset += p.size
        if sign != 1.0:
            out *= sign
        return out

    @classmethod
    def initialize(cls, state_dim, meas_dim, horizon, rng, hidden=DEFAULT_HIDDEN,
                   mix_scale=0.1, initial_input=None):
        dims = [state_dim + meas_dim, *hidden, state_dim]
        mean_nets = [init_params(dims, rng) for _ in range(horizon)]
        cov_net = init_params(dims, rng)
        return cls(mean_nets, cov_net, mix_scale * np.eye(state_dim), state_dim,
                   meas_dim, horizon, initial_input)

    def parameters(self):
        """Every trainable array, in a fixed order."""
        out = []
        for net in self.mean_nets:
            out.extend(net.parameters())
        out.extend(self.cov_net.parameters())
        out.append(self.mix)
        return out

    def copy(self):
        return LearnedProposal(
            [Mlp([W.copy() for W in n.weights], [b.copy() for b in n.biases]) for n in self.mean_nets],
            Mlp([W.copy() for W in self.cov_net.weights], [b.copy() for b in self.cov_net.biases]),
            self.mix.copy(), self.state_dim, self.meas_dim, self.horizon,
            self.initial_input.copy(), self.rel_jitter,
        )

    def _check_t(self, t):
        if not 0 <= t < self.horizon:
            raise TimeIndexOutOfRange(f"t={t} outside [0, {self.horizon})")

    def moments(self, t, x_prev, y):
        """Plain-array moments for columns ``x_prev (N, K)`` and ``y`` ``(M,)``.

        Returns the mean ``(N, K)`` and covariance stack ``(K, N, N)``.
        """
        self._check_t(t)
        K = x_prev.shape[1]
        inp = np.vstack([x_prev, np.broadcast_to(np.reshape(y, (-1, 1)), (self.meas_dim, K))])
        mean = self.mean_nets[t].apply(inp)
        z = self.cov_net.apply(inp)
        D = kernels.gaussian_gram_batched(np.ascontiguousarray(z.T))
        cov = self.mix @ D @ self.mix.T
        cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
        return mean, cov

    def sample(self, t, x_prev, y, rng):
        """Draw one state per row of ``x_prev (K, N)``; returns ``(x, log_q)``."""
        if x_prev is None:
            raise ValueError("use sample_initial for t = 0")
        mean, cov = self.moments(t, np.ascontiguousarray(x_prev.T), y)
        L, _ = cholesky_relative(cov, self.rel_jitter)
        K = x_prev.shape[0]
        eta = rng.standard_normal((K, self.state_dim))
        x = mean.T + kernels.lower_matvec_batched(L, eta)
        u = kernels.solve_lower_batched(L, x - mean.T)
        logdiag = np.log(np.diagonal(L, axis1=1, axis2=2)).sum(axis=1)
        log_q = -0.5 * np.sum(u * u, axis=1) - logdiag - 0.5 * self.state_dim * LOG_2PI
        return x, log_q

    def sample_initial(self, K, y, rng):
        x_prev = np.broadcast_to(self.initial_input, (K, self.state_dim))
        return self.sample(0, x_prev, y, rng)


def proposal_moments(p, t, x_prev, y_t):
    """Graph moments: ``x_prev`` is ``(N, K)`` and ``y_t`` is ``(M, K)``.

    For ``K = 1`` the covariance node is a single ``(N, N)`` matrix, otherwise
    a ``(K, N, N)`` stack.
    """
    p._check_t(t)
    if x_prev.shape[0] != p.state_dim or y_t.shape[0] != p.meas_dim:
        raise ShapeMismatch(f"x_prev {x_prev.shape} / y_t {y_t.shape} do not match N, M")
    inp = ad.concat_rows(x_prev, y_t)
    mean = mlp_forward(p.mean_nets[t], inp)
    z = mlp_forward(p.cov_net, inp)
    D = ad.gaussian_kernel(z)
    cov = ad.symmetrize(ad.congruence(inp.tape.parameter(p.mix), D))
    return mean, cov


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moments: list = field(default_factory=list)
    second_moments: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, **kw):
        return cls(
            first_moments=[np.zeros_like(p) for p in params],
            second_moments=[np.zeros_like(p) for p in params],
            **kw,
        )


def _flat_view(a):
    if a.flags.c_contiguous and a.dtype == np.float64:
        return a.reshape(-1)
    return None


def adam_step(params, grads, state):
    """One bias-corrected ADAM descent step, updating ``params`` in place."""
    if not state.first_moments:
        state.first_moments = [np.zeros_like(p) for p in params]
        state.second_moments = [np.zeros_like(p) for p in params]
    if len(grads) != len(params):
        raise ShapeMismatch("one gradient per parameter is required")
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient("gradient contains non-finite entries")
    state.step_count += 1
    b1, b2, lr, eps = state.beta1, state.beta2, state.learning_rate, state.epsilon
    c1 = 1.0 - b1 ** state.step_count
    c2 = 1.0 - b2 ** state.step_count
    for p, g, m, v in zip(params, grads, state.first_moments, state.second_moments):
        pf = _flat_view(p)
        if pf is None:
            work = p.astype(np.float64).reshape(-1)
            kernels.adam_update(work, np.ascontiguousarray(g, dtype=np.float64).reshape(-1),
                                m.reshape(-1), v.reshape(-1), lr, b1, b2, eps, c1, c2)
            p[...] = work.reshape(p.shape)
        else:
            kernels.adam_update(pf, np.ascontiguousarray(g, dtype=np.float64).reshape(-1),
                                m.reshape(-1), v.reshape(-1), lr, b1, b2, eps, c1, c2)
    return params, state


# -- serialization ------------------------------------------------------------

def _net_to_dict(net):
    return {"layers": [{"A": W.tolist(), "b": b.reshape(-1).tolist()}
                       for W, b in zip(net.weights, net.biases)]}


def _net_from_dict(d):
    ws = [np.array(layer["A"], dtype=np.float64) for layer in d["layers"]]
    bs = [np.array(layer["b"], dtype=np.float64).reshape(-1, 1) for layer in d["layers"]]
    return Mlp(ws, bs)


def proposal_to_dict(p, seed=None, training_config=None):
    return {
        "state_dim": p.state_dim,
        "meas_dim": p.meas_dim,
        "horizon": p.horizon,
        "hidden_activation": "tanh",
        "output_activation": "identity",
        "mean_nets": [{"t": t, **_net_to_dict(net)} for t, net in enumerate(p.mean_nets)],
        "cov_net": _net_to_dict(p.cov_net),
        "mix": p.mix.tolist(),
        "initial_input": p.initial_input.tolist(),
        "rel_jitter": p.rel_jitter,
        "seed": seed,
        "training_config": training_config,
    }


def proposal_from_dict(d):
    nets = sorted(d["mean_nets"], key=lambda e: e["t"])
    return LearnedProposal(
        [_net_from_dict(e) for e in nets],
        _net_from_dict(d["cov_net"]),
        np.array(d["mix"], dtype=np.float64),
        int(d["state_dim"]), int(d["meas_dim"]), int(d["horizon"]),
        np.array(d.get("initial_input") or np.ones(d["state_dim"]), dtype=np.float64),
        float(d.get("rel_jitter", REL_JITTER)),
    )


def save_proposal(p, path, seed=None, training_config=None):
    # json writes floats with repr, which round-trips float64 exactly.
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(proposal_to_dict(p, seed, training_config), fh)
        fh.write("\n")


def load_proposal(path):
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    return proposal_from_dict(d), d

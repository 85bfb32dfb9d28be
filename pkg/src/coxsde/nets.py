"""Dense networks with hand-written backward passes, and the Adam optimizer.

The networks here are deliberately small and framework-free: tanh hidden
layers, linear output, parameters kept as explicit weight/bias arrays with a
flat-vector view for the optimizer. Everything is vectorised over a leading
batch axis. Reverse-mode derivatives come in three flavours:

* per-row parameter gradients (``vjp``), for the forward-Jacobian integrator,
* input-only gradients (``vjp_inputs``), cheap enough to call inside a
  simulation loop,
* weight-summed parameter gradients (``vjp_summed``), a couple of GEMMs, used
  by the training-time gradient accumulator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteGradient, ShapeMismatch
from .sde import Seed


class Mlp:
    """Fully connected net: tanh on hidden layers, identity on the output.

    Weight matrices are (n_in, n_out); the flat parameter layout is, per
    layer, row-major weights followed by the bias.
    """

    def __init__(self, sizes, seed: Seed = 0, output_scale: float = 1.0):
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        self.sizes = list(sizes)
        rng = np.random.default_rng(seed)
        self.weights = []
        self.biases = []
        for l, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            limit = np.sqrt(6.0 / (n_in + n_out))
            w = rng.uniform(-limit, limit, size=(n_in, n_out))
            if l == len(sizes) - 2:
                w = w * output_scale
            self.weights.append(w)
            self.biases.append(np.zeros(n_out))

    @property
    def n_inputs(self) -> int:
        return self.sizes[0]

    @property
    def n_outputs(self) -> int:
        return self.sizes[-1]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def get_params(self) -> np.ndarray:
        return np.concatenate(
            [np.concatenate([w.ravel(), b]) for w, b in zip(self.weights, self.biases)]
        )

    def set_params(self, flat: np.ndarray):
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (self.n_params,):
            raise ShapeMismatch(f"expected {self.n_params} parameters, got {flat.shape}")
        pos = 0
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            self.weights[l] = flat[pos:pos + w.size].reshape(w.shape).copy()
            pos += w.size
            self.biases[l] = flat[pos:pos + b.size].copy()
            pos += b.size

    def forward(self, x: np.ndarray):
        """Returns (output (B, n_out), cache of layer activations)."""
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.n_inputs:
            raise ShapeMismatch(f"expected input (B, {self.n_inputs}), got {x.shape}")
        acts = [x]
        n_layers = len(self.weights)
        h = x
        for l in range(n_layers):
            h = h @ self.weights[l] + self.biases[l]
            if l < n_layers - 1:
                h = np.tanh(h)
                acts.append(h)
        return h, acts

    def _backward_deltas(self, acts, seed):
        """Per-layer error signals working backwards from the output seed."""
        deltas = [None] * len(self.weights)
        delta = np.asarray(seed, dtype=float)
        for l in range(len(self.weights) - 1, -1, -1):
            deltas[l] = delta
            delta = delta @ self.weights[l].T
            if l > 0:
                delta = delta * (1.0 - acts[l] ** 2)
        return deltas, delta  # delta is now d/d_input

    def vjp(self, acts, seed):
        """Per-row gradients: (d_input (B, n_in), d_params (B, P))."""
        deltas, d_input = self._backward_deltas(acts, seed)
        B = acts[0].shape[0]
        chunks = []
        for l, delta in enumerate(deltas):
            chunks.append(np.einsum("bi,bj->bij", acts[l], delta).reshape(B, -1))
            chunks.append(delta)
        return d_input, np.concatenate(chunks, axis=1)

    def vjp_inputs(self, acts, seed) -> np.ndarray:
        """Input gradients only; skips the parameter outer products."""
        _, d_input = self._backward_deltas(acts, seed)
        return d_input

    def vjp_summed(self, acts, seed) -> np.ndarray:
        """Row-summed parameter gradient sum_b seed_b * dy_b/dparams, shape (P,)."""
        deltas, _ = self._backward_deltas(acts, seed)
        chunks = []
        for l, delta in enumerate(deltas):
            chunks.append((acts[l].T @ delta).ravel())
            chunks.append(delta.sum(axis=0))
        return np.concatenate(chunks)

    def vjp_mixed(self, acts, seed):
        """Per-row input gradients plus row-summed parameter gradient."""
        deltas, d_input = self._backward_deltas(acts, seed)
        chunks = []
        for l, delta in enumerate(deltas):
            chunks.append((acts[l].T @ delta).ravel())
            chunks.append(delta.sum(axis=0))
        return d_input, np.concatenate(chunks)


def mlp_eval_with_grads(net: Mlp, x):
    """Scalar-output evaluation with exact input and parameter gradients."""
    if net.n_outputs != 1:
        raise ShapeMismatch("mlp_eval_with_grads requires a scalar-output net")
    x = np.asarray(x, dtype=float).reshape(1, -1)
    y, acts = net.forward(x)
    d_input, d_params = net.vjp(acts, np.ones((1, 1)))
    return float(y[0, 0]), d_input[0], d_params[0]


class DriftNet:
    """Scalar drift b(z, t) backed by an Mlp over inputs (z, t)."""

    def __init__(self, hidden=(64, 64), seed: Seed = 0, output_scale: float = 0.1):
        self.net = Mlp([2, *hidden, 1], seed=seed, output_scale=output_scale)

    @property
    def n_params(self) -> int:
        return self.net.n_params

    def get_params(self):
        return self.net.get_params()

    def set_params(self, flat):
        self.net.set_params(flat)

    def _inputs(self, z, t):
        z = np.atleast_1d(np.asarray(z, dtype=float))
        return np.stack([z, np.full_like(z, t)], axis=1)

    def value(self, z, t):
        y, _ = self.net.forward(self._inputs(z, t))
        return y[:, 0]

    def drift_with_grads(self, z, t):
        """(b, db/dz, db/dtheta) for a batch of states at one time."""
        x = self._inputs(z, t)
        y, acts = self.net.forward(x)
        d_in, d_params = self.net.vjp(acts, np.ones((x.shape[0], 1)))
        return y[:, 0], d_in[:, 0], d_params

    def value_and_dz(self, z, t):
        x = self._inputs(z, t)
        y, acts = self.net.forward(x)
        d_in = self.net.vjp_inputs(acts, np.ones((x.shape[0], 1)))
        return y[:, 0], d_in[:, 0]

    def as_drift_fn(self):
        return lambda z, t: self.value(z, t)


class DeepSetsEncoder:
    """Posterior drift correction u(z, t, T', events) = sigma * rho(t, T', pooled).

    ``psi`` maps each future event's features (z, gap to previous event,
    time-to-event horizon) to an r-vector; the feature vectors are summed
    (ascending event time, so the result is independent of storage order) and
    fed to ``rho`` together with (t, T'). The outer diffusion factor and its
    z-derivative are supplied by the caller so the encoder stays agnostic of
    the diffusion model. Parameters are the concatenation (psi, rho).
    """

    def __init__(self, pooled_dim: int = 32, psi_hidden=(64,), rho_hidden=(64,),
                 seed: Seed = 0):
        self.pooled_dim = pooled_dim
        self.psi = Mlp([3, *psi_hidden, pooled_dim], seed=(seed, 0))
        self.rho = Mlp([2 + pooled_dim, *rho_hidden, 1], seed=(seed, 1))

    @property
    def n_params(self) -> int:
        return self.psi.n_params + self.rho.n_params

    def get_params(self):
        return np.concatenate([self.psi.get_params(), self.rho.get_params()])

    def set_params(self, flat):
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (self.n_params,):
            raise ShapeMismatch(f"expected {self.n_params} parameters, got {flat.shape}")
        self.psi.set_params(flat[: self.psi.n_params])
        self.rho.set_params(flat[self.psi.n_params:])

    def future_features(self, t: float, horizon: float, events):
        """(gap, horizon - tau) rows for events with t < tau <= horizon."""
        times = events.times
        lo = int(np.searchsorted(times, t, side="right"))
        hi = int(np.searchsorted(times, horizon + 1e-12, side="right"))
        taus = times[lo:hi]
        gaps = events.interarrival_times()[lo:hi]
        return np.stack([gaps, horizon - taus], axis=1)

    def _pooled_forward(self, z, feats):
        """psi forward over (B paths) x (K events); returns pooled (B, r) + cache."""
        B = z.shape[0]
        K = feats.shape[0]
        if K == 0:
            return np.zeros((B, self.pooled_dim)), None
        x = np.empty((B * K, 3))
        x[:, 0] = np.repeat(z, K)
        x[:, 1:] = np.tile(feats, (B, 1))
        out, acts = self.psi.forward(x)
        pooled = out.reshape(B, K, self.pooled_dim).sum(axis=1)
        return pooled, acts

    def _rho_forward(self, z, t, horizon, pooled):
        B = z.shape[0]
        x = np.empty((B, 2 + self.pooled_dim))
        x[:, 0] = t
        x[:, 1] = horizon
        x[:, 2:] = pooled
        return self.rho.forward(x)

    def value(self, z, t, horizon, events, sigma_at):
        """u for a batch of states z at one time; no derivatives."""
        z = np.atleast_1d(np.asarray(z, dtype=float))
        feats = self.future_features(t, horizon, events)
        pooled, _ = self._pooled_forward(z, feats)
        rho_out, _ = self._rho_forward(z, t, horizon, pooled)
        return np.asarray(sigma_at) * rho_out[:, 0]

    def value_and_dz(self, z, t, horizon, events, sigma_at, dsigma_at):
        """(u, du/dz) -- the state derivative includes the diffusion chain term."""
        z = np.atleast_1d(np.asarray(z, dtype=float))
        B = z.shape[0]
        feats = self.future_features(t, horizon, events)
        K = feats.shape[0]
        pooled, psi_acts = self._pooled_forward(z, feats)
        rho_out, rho_acts = self._rho_forward(z, t, horizon, pooled)
        rho_val = rho_out[:, 0]
        d_rho_in = self.rho.vjp_inputs(rho_acts, np.ones((B, 1)))
        drho_dz = np.zeros(B)
        if K:
            seeds = np.repeat(d_rho_in[:, 2:], K, axis=0)
            d_psi_in = self.psi.vjp_inputs(psi_acts, seeds)
            drho_dz = d_psi_in[:, 0].reshape(B, K).sum(axis=1)
        sigma_at = np.asarray(sigma_at)
        u = sigma_at * rho_val
        du_dz = np.asarray(dsigma_at) * rho_val + sigma_at * drho_dz
        return u, du_dz

    def eval_with_grads(self, z, t, horizon, events, sigma_at, dsigma_at):
        """(u, du/dz, du/dbeta) with per-path parameter gradients."""
        z = np.atleast_1d(np.asarray(z, dtype=float))
        B = z.shape[0]
        feats = self.future_features(t, horizon, events)
        K = feats.shape[0]
        pooled, psi_acts = self._pooled_forward(z, feats)
        rho_out, rho_acts = self._rho_forward(z, t, horizon, pooled)
        rho_val = rho_out[:, 0]
        d_rho_in, d_rho_params = self.rho.vjp(rho_acts, np.ones((B, 1)))
        drho_dz = np.zeros(B)
        d_psi_params = np.zeros((B, self.psi.n_params))
        if K:
            seeds = np.repeat(d_rho_in[:, 2:], K, axis=0)
            d_psi_in, d_psi_params_rows = self.psi.vjp(psi_acts, seeds)
            drho_dz = d_psi_in[:, 0].reshape(B, K).sum(axis=1)
            d_psi_params = d_psi_params_rows.reshape(B, K, -1).sum(axis=1)
        sigma_at = np.asarray(sigma_at)
        dsigma_at = np.asarray(dsigma_at)
        u = sigma_at * rho_val
        du_dz = dsigma_at * rho_val + sigma_at * drho_dz
        du_dbeta = np.concatenate(
            [sigma_at[:, None] * d_psi_params, sigma_at[:, None] * d_rho_params], axis=1
        )
        return u, du_dz, du_dbeta

    def correction_fn(self, diffusion):
        """Adapter with the simulate_posterior correction signature."""
        def u_fn(z, t, horizon, events):
            return self.value(z, t, horizon, events, diffusion.value(z, t))
        return u_fn


def encoder_eval(enc: DeepSetsEncoder, z: float, t: float, horizon: float,
                 events, sigma_at: float, dsigma_at: float = 0.0):
    """Single-state convenience wrapper returning (u, du/dz, du/dbeta)."""
    u, du_dz, du_dbeta = enc.eval_with_grads(
        np.array([z]), t, horizon, events, np.array([sigma_at]), np.array([dsigma_at])
    )
    return float(u[0]), float(du_dz[0]), du_dbeta[0]


@dataclass
class AdamState:
    """Adam moments plus the gradient-clipping threshold."""

    m: np.ndarray
    v: np.ndarray
    step: int
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip: float = 5.0

    @classmethod
    def init(cls, n: int, lr: float, clip: float = 5.0) -> "AdamState":
        return cls(m=np.zeros(n), v=np.zeros(n), step=0, lr=lr, clip=clip)

    def to_dict(self):
        return {
            "m": self.m.tolist(), "v": self.v.tolist(), "step": self.step,
            "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
            "eps": self.eps, "clip": self.clip,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(m=np.asarray(d["m"], dtype=float), v=np.asarray(d["v"], dtype=float),
                   step=int(d["step"]), lr=float(d["lr"]), beta1=float(d["beta1"]),
                   beta2=float(d["beta2"]), eps=float(d["eps"]), clip=float(d["clip"]))


def clip_gradient(grad: np.ndarray, clip: float) -> np.ndarray:
    """Rescale to L2 norm <= clip (no-op when already inside the ball)."""
    norm = float(np.linalg.norm(grad))
    if clip > 0.0 and norm > clip:
        return grad * (clip / norm)
    return grad


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """One descent step; clips the gradient, then applies bias-corrected Adam.

    Mutates ``state`` and returns the updated parameter vector.
    """
    grad = np.asarray(grad, dtype=float)
    if grad.shape != params.shape:
        raise ShapeMismatch(f"grad shape {grad.shape} != params shape {params.shape}")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradient("gradient contains NaN/inf")
    grad = clip_gradient(grad, state.clip)
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad ** 2
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    return params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)

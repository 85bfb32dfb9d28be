"""Time grids, Brownian driving noise, and Euler-Maruyama integrators.

Three integrators live here:

* ``euler_maruyama``          -- the plain latent SDE  dZ = b dt + sigma dB
* ``simulate_posterior``      -- the same SDE with an observation-dependent
  drift correction  b + 1{t < T'} sigma * u  active on the conditioning window
* ``simulate_augmented``      -- the state jointly with its forward parameter
  Jacobians (sensitivities), sharing the Brownian increments

All integrators are vectorised over paths: state arrays carry an optional
leading path axis, and every callback receives/returns arrays of that shape.
States are clamped to a small positive floor after each step so that
square-root diffusions and event-time log-intensities stay defined; the clamp
is treated as having zero derivative where it is active.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import HorizonExceedsGrid, NonFiniteState

# Positivity floor for intensity states (and the sqrt-diffusion derivative).
EPS_POS = 1e-6

Seed = Union[int, Sequence[int]]


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on [0, T] with M steps (M+1 nodes)."""

    t_end: float
    steps: int

    def __post_init__(self):
        if not (self.t_end > 0.0 and np.isfinite(self.t_end)):
            raise ValueError(f"t_end must be positive and finite, got {self.t_end}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")

    @property
    def dt(self) -> float:
        return self.t_end / self.steps

    @property
    def nodes(self) -> np.ndarray:
        """Grid nodes t_j = j * dt, length steps + 1."""
        return np.linspace(0.0, self.t_end, self.steps + 1)

    def node_index(self, t: float) -> int:
        """Index of the node closest to ``t`` (t must be on or inside the grid)."""
        if t < 0.0 or t > self.t_end + 1e-12:
            raise HorizonExceedsGrid(f"time {t} outside [0, {self.t_end}]")
        return int(round(t / self.dt))


@dataclass(frozen=True)
class BrownianPath:
    """Gaussian increments dB_j ~ N(0, dt) on a grid.

    ``increments`` has shape (M,) for a single path or (n_paths, M) for an
    ensemble drawn together; the same seed always reproduces the same array.
    """

    grid: TimeGrid
    increments: np.ndarray
    seed: Optional[Seed] = None

    def __post_init__(self):
        if self.increments.shape[-1] != self.grid.steps:
            raise ValueError(
                f"need {self.grid.steps} increments per path, "
                f"got {self.increments.shape[-1]}"
            )

    @property
    def n_paths(self) -> int:
        return 1 if self.increments.ndim == 1 else self.increments.shape[0]


def sample_brownian(grid: TimeGrid, seed: Seed, n_paths: Optional[int] = None) -> BrownianPath:
    """Draw Brownian increments for one path (n_paths=None) or an ensemble.

    Deterministic in (seed, n_paths, grid): the full increment array comes
    from a single PCG64 stream.
    """
    rng = np.random.default_rng(seed)
    scale = np.sqrt(grid.dt)
    if n_paths is None:
        inc = rng.normal(0.0, scale, size=grid.steps)
    else:
        inc = rng.normal(0.0, scale, size=(n_paths, grid.steps))
    return BrownianPath(grid=grid, increments=inc, seed=seed)


DriftFn = Callable[[np.ndarray, float], np.ndarray]
DiffusionFn = Callable[[np.ndarray, float], np.ndarray]


@dataclass(frozen=True)
class SdeSpec:
    """Drift/diffusion pair and initial state for a scalar SDE.

    ``drift`` and ``diffusion`` must accept (state_array, time) and broadcast
    over the state array.
    """

    drift: DriftFn
    diffusion: DiffusionFn
    z0: float

    def __post_init__(self):
        if self.z0 < 0.0:
            raise ValueError(f"z0 must be >= 0, got {self.z0}")


def cir_spec(kappa: float = 0.3, mean: float = 80.0, z0: float = 5.0) -> SdeSpec:
    """Mean-reverting square-root model dZ = kappa (mean - Z) dt + sqrt(Z) dB."""
    return SdeSpec(
        drift=lambda z, t: kappa * (mean - z),
        diffusion=lambda z, t: np.sqrt(np.maximum(z, 0.0)),
        z0=z0,
    )


def linear_ramp_spec(kappa: float = 0.3, mean: float = 80.0, slope: float = 5.0,
                     z0: float = 5.0) -> SdeSpec:
    """Time-inhomogeneous variant: drift kappa (mean - Z) - slope * t."""
    return SdeSpec(
        drift=lambda z, t: kappa * (mean - z) - slope * t,
        diffusion=lambda z, t: np.sqrt(np.maximum(z, 0.0)),
        z0=z0,
    )


@dataclass(frozen=True)
class Trajectory:
    """States on the grid nodes; values shape (M+1,) or (n_paths, M+1)."""

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape[-1] != self.grid.steps + 1:
            raise ValueError(
                f"need {self.grid.steps + 1} node values, got {self.values.shape[-1]}"
            )

    @property
    def n_paths(self) -> int:
        return 1 if self.values.ndim == 1 else self.values.shape[0]

    def at(self, t: np.ndarray) -> np.ndarray:
        """Linear interpolation of the path(s) at times ``t``.

        Returns shape t.shape for a single path, (n_paths,) + t.shape for an
        ensemble.
        """
        return interp_at(self.grid, self.values, np.asarray(t, dtype=float))


@dataclass(frozen=True)
class AugmentedTrajectory:
    """State trajectory plus forward Jacobians w.r.t. two parameter groups.

    j_theta has shape (..., M+1, p) and j_beta (..., M+1, q); row 0 is zero
    because the initial state does not depend on parameters.
    """

    z: Trajectory
    j_theta: np.ndarray
    j_beta: np.ndarray


def interp_at(grid: TimeGrid, values: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Piecewise-linear interpolation of node values at arbitrary times."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    pos = np.clip(t / grid.dt, 0.0, grid.steps)
    lo = np.minimum(pos.astype(int), grid.steps - 1)
    w = pos - lo
    out = values[..., lo] * (1.0 - w) + values[..., lo + 1] * w
    return out


def _check_finite(arr: np.ndarray, what: str):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteState(f"{what} became non-finite (NaN/inf)")


def euler_maruyama(spec: SdeSpec, noise: BrownianPath,
                   floor: Optional[float] = EPS_POS) -> Trajectory:
    """Integrate dZ = b(Z,t) dt + sigma(Z,t) dB on the noise's grid.

    Each step is clamped at ``floor`` (pass None to allow signed states, e.g.
    for bridge-type dynamics). Raises NonFiniteState on blow-up.
    """
    grid = noise.grid
    dt = grid.dt
    dB = noise.increments
    shape = dB.shape[:-1]
    values = np.empty(shape + (grid.steps + 1,))
    z = np.full(shape, float(spec.z0))
    values[..., 0] = z
    t_nodes = grid.nodes
    for j in range(grid.steps):
        t = t_nodes[j]
        z = z + spec.drift(z, t) * dt + spec.diffusion(z, t) * dB[..., j]
        if floor is not None:
            z = np.maximum(z, floor)
        values[..., j + 1] = z
    _check_finite(values, "trajectory")
    return Trajectory(grid=grid, values=values)


CorrectionFn = Callable[[np.ndarray, float, float, "object"], np.ndarray]


def simulate_posterior(prior: SdeSpec, correction: CorrectionFn, events,
                       horizon: float, noise: BrownianPath,
                       floor: Optional[float] = EPS_POS,
                       return_u: bool = False):
    """Integrate the drift-corrected SDE dZ = [b + 1{t < T'} sigma u] dt + sigma dB.

    ``correction(z, t, horizon, events)`` supplies u at the left endpoint of
    each step; it is only called (and only acts) for steps starting strictly
    before ``horizon``, so the dynamics beyond the conditioning window are
    exactly the prior's. With ``return_u`` the per-step correction values
    (zeros beyond the horizon) are returned alongside the trajectory.
    """
    grid = noise.grid
    if horizon < 0.0 or horizon > grid.t_end + 1e-12:
        raise HorizonExceedsGrid(f"horizon {horizon} outside [0, {grid.t_end}]")
    if events is not None and len(events.times) and events.times[-1] > horizon + 1e-12:
        raise HorizonExceedsGrid(
            f"event at {events.times[-1]} beyond conditioning horizon {horizon}"
        )
    dt = grid.dt
    dB = noise.increments
    shape = dB.shape[:-1]
    values = np.empty(shape + (grid.steps + 1,))
    u_out = np.zeros(shape + (grid.steps,)) if return_u else None
    z = np.full(shape, float(prior.z0))
    values[..., 0] = z
    t_nodes = grid.nodes
    for j in range(grid.steps):
        t = t_nodes[j]
        drift = prior.drift(z, t)
        sig = prior.diffusion(z, t)
        if t < horizon:
            u = np.asarray(correction(z, t, horizon, events))
            drift = drift + sig * u
            if return_u:
                u_out[..., j] = u
        z = z + drift * dt + sig * dB[..., j]
        if floor is not None:
            z = np.maximum(z, floor)
        values[..., j + 1] = z
    _check_finite(values, "posterior trajectory")
    traj = Trajectory(grid=grid, values=values)
    if return_u:
        return traj, u_out
    return traj


def simulate_augmented(prior_net, encoder, events, horizon: float,
                       noise: BrownianPath, diffusion, z0: float,
                       floor: Optional[float] = EPS_POS) -> AugmentedTrajectory:
    """Jointly integrate the corrected state and its parameter Jacobians.

    The Jacobian recursions are the exact derivatives of the Euler step, so a
    frozen-noise finite difference of the simulated path w.r.t. any parameter
    reproduces them to O(h^2). ``prior_net`` parameterises the drift b(z, t)
    (p parameters), ``encoder`` the correction u(z, t, T', X) (q parameters),
    and ``diffusion`` must expose ``value(z, t)`` and ``dz(z, t)``.

    Where the positivity clamp binds, the step's derivative is zero, so both
    Jacobian rows are zeroed there.
    """
    grid = noise.grid
    if horizon < 0.0 or horizon > grid.t_end + 1e-12:
        raise HorizonExceedsGrid(f"horizon {horizon} outside [0, {grid.t_end}]")
    dt = grid.dt
    dB = noise.increments
    if dB.ndim == 1:
        dB = dB[None, :]
        squeeze = True
    else:
        squeeze = False
    n = dB.shape[0]
    p = prior_net.n_params
    q = encoder.n_params

    values = np.empty((n, grid.steps + 1))
    j_theta = np.zeros((n, grid.steps + 1, p))
    j_beta = np.zeros((n, grid.steps + 1, q))
    z = np.full(n, float(z0))
    values[:, 0] = z
    jt = np.zeros((n, p))
    jb = np.zeros((n, q))
    t_nodes = grid.nodes

    for j in range(grid.steps):
        t = t_nodes[j]
        b, b_z, b_theta = prior_net.drift_with_grads(z, t)
        sig = diffusion.value(z, t)
        sig_z = diffusion.dz(z, t)
        active = t < horizon
        if active:
            u, u_z, u_beta = encoder.eval_with_grads(z, t, horizon, events, sig, sig_z)
        else:
            u = u_z = np.zeros(n)
            u_beta = None

        # dZ/dparam of one Euler step, applied to both parameter groups.
        amp = 1.0 + b_z * dt + sig_z * dB[:, j]
        if active:
            amp = amp + (sig * u_z + sig_z * u) * dt
        jt = jt * amp[:, None] + b_theta * dt
        jb = jb * amp[:, None]
        if active:
            jb = jb + (sig[:, None] * u_beta) * dt

        drift = b + (sig * u if active else 0.0)
        z_new = z + drift * dt + sig * dB[:, j]
        if floor is not None:
            clamped = z_new < floor
            z_new = np.maximum(z_new, floor)
            if np.any(clamped):
                jt[clamped] = 0.0
                jb[clamped] = 0.0
        z = z_new
        values[:, j + 1] = z
        j_theta[:, j + 1] = jt
        j_beta[:, j + 1] = jb

    _check_finite(values, "augmented trajectory")
    if not (np.all(np.isfinite(j_theta)) and np.all(np.isfinite(j_beta))):
        raise NonFiniteState("parameter sensitivities became non-finite; "
                             "step size is likely too coarse")
    if squeeze:
        return AugmentedTrajectory(
            z=Trajectory(grid=grid, values=values[0]),
            j_theta=j_theta[0], j_beta=j_beta[0],
        )
    return AugmentedTrajectory(
        z=Trajectory(grid=grid, values=values), j_theta=j_theta, j_beta=j_beta
    )


class SqrtDiffusion:
    """sigma(z, t) = sqrt(z), with d sigma/dz floored near the origin."""

    kind = "sqrt"

    def value(self, z, t):
        return np.sqrt(np.maximum(z, 0.0))

    def dz(self, z, t):
        return 0.5 / np.sqrt(np.maximum(z, EPS_POS))


@dataclass(frozen=True)
class ConstantDiffusion:
    """sigma(z, t) = scale."""

    scale: float = 1.0
    kind: str = field(default="const", init=False)

    def value(self, z, t):
        return np.full_like(np.asarray(z, dtype=float), self.scale)

    def dz(self, z, t):
        return np.zeros_like(np.asarray(z, dtype=float))


def make_diffusion(kind: str, scale: float = 1.0):
    if kind == "sqrt":
        return SqrtDiffusion()
    if kind == "const":
        return ConstantDiffusion(scale)
    raise ValueError(f"unknown diffusion kind {kind!r}")

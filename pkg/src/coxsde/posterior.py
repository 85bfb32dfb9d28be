"""Posterior path sampling from the learned corrected SDE, and predictive scores."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyEnsemble
from .events import EventSequence
from .model import IntensityModel
from .sde import EPS_POS, Seed, TimeGrid, Trajectory, sample_brownian, simulate_posterior


@dataclass(frozen=True)
class PathEnsemble:
    """Stack of trajectories on one grid; values shape (n_samples, M+1)."""

    grid: TimeGrid
    values: np.ndarray
    provenance: str = "amortized"  # amortized | mcmc | prior

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[1] != self.grid.steps + 1:
            raise ValueError(
                f"expected (n, {self.grid.steps + 1}) values, got {self.values.shape}"
            )
        if self.values.shape[0] < 1:
            raise EmptyEnsemble("ensemble needs at least one path")

    @property
    def n_samples(self) -> int:
        return self.values.shape[0]

    @property
    def paths(self):
        return [Trajectory(grid=self.grid, values=v) for v in self.values]

    def mean_curve(self) -> np.ndarray:
        return self.values.mean(axis=0)

    def summary(self):
        """Per-node mean/std/5%/95% rows for CSV export."""
        return {
            "t": self.grid.nodes,
            "mean": self.values.mean(axis=0),
            "std": self.values.std(axis=0, ddof=1) if self.n_samples > 1
            else np.zeros(self.grid.steps + 1),
            "q05": np.quantile(self.values, 0.05, axis=0),
            "q95": np.quantile(self.values, 0.95, axis=0),
        }


def sample_amortized_posterior(model: IntensityModel, events: EventSequence,
                               horizon: float, n_samples: int, seed: Seed,
                               grid: TimeGrid) -> PathEnsemble:
    """Simulate the drift-corrected SDE n_samples times over [0, T].

    The correction acts on steps before ``horizon``; beyond it paths follow
    the learned prior from the reached state. Deterministic in the seed.
    """
    noise = sample_brownian(grid, seed, n_paths=n_samples)
    traj = simulate_posterior(model.prior_spec(), model.correction_fn(),
                              events, horizon, noise)
    return PathEnsemble(grid=grid, values=traj.values, provenance="amortized")


def sample_prior_ensemble(model: IntensityModel, n_samples: int, seed: Seed,
                          grid: TimeGrid) -> PathEnsemble:
    from .sde import euler_maruyama

    noise = sample_brownian(grid, seed, n_paths=n_samples)
    traj = euler_maruyama(model.prior_spec(), noise)
    return PathEnsemble(grid=grid, values=traj.values, provenance="prior")


def posterior_predictive_ll(ensemble: PathEnsemble, events: EventSequence,
                            window: tuple) -> float:
    """Average over paths of sum_{T'<tau<=T} log Z(tau) - int_{T'}^{T} Z dt.

    ``window`` is (T', T); events outside it are ignored. The integral is a
    left-endpoint sum over nodes in [T', T).
    """
    t_lo, t_hi = window
    grid = ensemble.grid
    if ensemble.n_samples < 1:
        raise EmptyEnsemble("empty ensemble")
    dt = grid.dt
    nodes = grid.nodes
    mask = (nodes[:-1] >= t_lo - 1e-12) & (nodes[:-1] < t_hi - 1e-12)
    integral = ensemble.values[:, :-1][:, mask].sum(axis=1) * dt
    taus = events.times[(events.times > t_lo + 1e-12) & (events.times <= t_hi + 1e-12)]
    if len(taus):
        pos = np.clip(taus / dt, 0.0, grid.steps)
        lo = np.minimum(pos.astype(int), grid.steps - 1)
        w = pos - lo
        za = ensemble.values[:, lo] * (1.0 - w) + ensemble.values[:, lo + 1] * w
        event_term = np.sum(np.log(np.maximum(za, EPS_POS)), axis=1)
    else:
        event_term = np.zeros(ensemble.n_samples)
    return float(np.mean(event_term - integral))

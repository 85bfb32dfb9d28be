"""Point-process observations: sampling, likelihood, and count statistics.

An :class:`EventSequence` is a sorted set of event times on (0, T'] together
with the observation horizon T'. Sampling from an intensity trajectory uses
thinning against the grid maximum; the piecewise-linear interpolant of the
trajectory is the rate, so the bound (with a small safety factor) is always
valid. The log-likelihood drops the unit-rate reference constant, a convention
applied consistently by every consumer in the package.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import EventBeyondHorizon, InsufficientReplications
from .sde import EPS_POS, Seed, TimeGrid, Trajectory, interp_at

# Safety factor on the thinning bound over the grid max.
THINNING_MARGIN = 0.01


@dataclass(frozen=True)
class EventSequence:
    """Strictly increasing event times in (0, horizon]."""

    times: np.ndarray
    horizon: float

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        object.__setattr__(self, "times", t)
        if self.horizon <= 0.0:
            raise ValueError(f"horizon must be > 0, got {self.horizon}")
        if t.ndim != 1:
            raise ValueError("times must be a 1-D array")
        if len(t):
            if t[0] <= 0.0:
                raise ValueError("event times must be > 0")
            if np.any(np.diff(t) <= 0.0):
                raise ValueError("event times must be strictly increasing")
            if t[-1] > self.horizon + 1e-12:
                raise EventBeyondHorizon(
                    f"event at {t[-1]} beyond horizon {self.horizon}"
                )

    @classmethod
    def from_unsorted(cls, times: Sequence[float], horizon: float) -> "EventSequence":
        return cls(times=np.sort(np.asarray(times, dtype=float)), horizon=horizon)

    def __len__(self) -> int:
        return len(self.times)

    def truncated(self, horizon: float) -> "EventSequence":
        """Restrict to events <= horizon and shrink the observation window."""
        return EventSequence(times=self.times[self.times <= horizon], horizon=horizon)

    def interarrival_times(self) -> np.ndarray:
        """Gaps tau_i - tau_{i-1} with tau_0 = 0."""
        return np.diff(self.times, prepend=0.0)


@dataclass(frozen=True)
class BinnedCounts:
    """Arrival counts in consecutive windows of width ``bin_width``."""

    bin_width: float
    counts: np.ndarray
    origin: float = 0.0


def sample_cox(intensity: Trajectory, seed: Seed) -> EventSequence:
    """Sample an inhomogeneous Poisson process with the trajectory as its rate.

    Thinning: candidates are homogeneous with rate (1 + margin) * max node
    value; each is kept with probability rate(t)/bound where the rate is the
    linear interpolant. Deterministic in the seed.
    """
    if intensity.values.ndim != 1:
        raise ValueError("sample_cox expects a single path")
    grid = intensity.grid
    z = intensity.values
    if np.any(z < 0.0):
        raise ValueError("intensity must be nonnegative")
    horizon = grid.t_end
    bound = float(np.max(z)) * (1.0 + THINNING_MARGIN)
    rng = np.random.default_rng(seed)
    if bound <= 0.0:
        return EventSequence(times=np.empty(0), horizon=horizon)
    n_cand = rng.poisson(bound * horizon)
    cand = np.sort(rng.uniform(0.0, horizon, size=n_cand))
    accept = rng.uniform(0.0, 1.0, size=n_cand) * bound < interp_at(grid, z, cand)
    return EventSequence(times=cand[accept], horizon=horizon)


def poisson_loglik(intensity: Trajectory, events: EventSequence,
                   upto: Optional[float] = None) -> np.ndarray:
    """log-likelihood sum(log Z(tau_i)) - int_0^T' Z dt, constant dropped.

    The integral is a left-endpoint Riemann sum over grid cells starting
    before ``upto``; intensities at event times come from the linear
    interpolant, floored at the positivity epsilon. Vectorised over paths:
    returns a scalar for a single path, (n_paths,) for a stacked trajectory.
    """
    grid = intensity.grid
    if upto is None:
        upto = grid.t_end
    if upto > grid.t_end + 1e-12:
        raise EventBeyondHorizon(f"upto {upto} beyond grid end {grid.t_end}")
    if len(events.times) and events.times[-1] > upto + 1e-12:
        raise EventBeyondHorizon(
            f"event at {events.times[-1]} beyond requested horizon {upto}"
        )
    z = intensity.values
    integral = _left_riemann(grid, z, 0.0, upto)
    if len(events.times):
        z_at = np.maximum(interp_at(grid, z, events.times), EPS_POS)
        event_term = np.sum(np.log(z_at), axis=-1)
    else:
        event_term = np.zeros(z.shape[:-1])
    out = event_term - integral
    return float(out) if out.ndim == 0 else out


def _left_riemann(grid: TimeGrid, values: np.ndarray, t0: float, t1: float) -> np.ndarray:
    """Left-endpoint integral of node values over [t0, t1] (partial cells ok)."""
    dt = grid.dt
    j0 = int(np.floor(t0 / dt + 1e-12))
    j1 = int(np.ceil(t1 / dt - 1e-12))
    j1 = min(j1, grid.steps)
    if j1 <= j0:
        return np.zeros(values.shape[:-1])
    widths = np.full(j1 - j0, dt)
    widths[0] = min((j0 + 1) * dt, t1) - t0
    if j1 * dt > t1:
        widths[-1] = t1 - max((j1 - 1) * dt, t0)
    return np.sum(values[..., j0:j1] * widths, axis=-1)


def bin_counts(events: EventSequence, bin_width: float) -> BinnedCounts:
    """Counts over half-open bins [k*width, (k+1)*width); a trailing partial
    bin is included so the bins always cover the horizon."""
    if bin_width <= 0.0:
        raise ValueError(f"bin_width must be > 0, got {bin_width}")
    n_bins = max(1, int(np.ceil(events.horizon / bin_width - 1e-12)))
    idx = np.minimum((events.times / bin_width).astype(int), n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    return BinnedCounts(bin_width=bin_width, counts=counts)


def count_in_window(events: EventSequence, start: float, width: float) -> int:
    t = events.times
    return int(np.sum((t >= start) & (t < start + width)))


def dispersion_curve(sequences: Sequence[EventSequence], deltas: Sequence[float],
                     at: float):
    """Across-replication mean and variance of counts in [at, at + delta).

    Returns a list of (delta, mean, variance) triples. Poisson data gives
    variance ~= mean (linear in delta); a random intensity adds a component
    quadratic in delta.
    """
    if len(sequences) < 2:
        raise InsufficientReplications("need >= 2 replications for a variance")
    for d in deltas:
        if at + d > min(s.horizon for s in sequences) + 1e-12:
            raise ValueError(f"window [{at}, {at + d}) exceeds a sequence horizon")
    out = []
    for d in deltas:
        counts = np.array([count_in_window(s, at, d) for s in sequences], dtype=float)
        out.append((float(d), float(np.mean(counts)), float(np.var(counts, ddof=1))))
    return out


def dispersion_quadratic_fit(sequences: Sequence[EventSequence],
                             deltas: Sequence[float], at: float,
                             n_boot: int = 200, seed: Seed = 0):
    """Fit variance(delta) ~ a*delta + c*delta^2 (through the origin).

    Returns (c, c_se, ratios) where ratios is the index of dispersion
    variance/mean per delta and c_se is a bootstrap standard error over
    replications.
    """
    deltas = np.asarray(deltas, dtype=float)
    count_mat = np.array(
        [[count_in_window(s, at, d) for d in deltas] for s in sequences], dtype=float
    )

    def fit(mat):
        var = np.var(mat, axis=0, ddof=1)
        basis = np.stack([deltas, deltas ** 2], axis=1)
        coef, *_ = np.linalg.lstsq(basis, var, rcond=None)
        return coef[1], var

    c, var = fit(count_mat)
    mean = np.mean(count_mat, axis=0)
    ratios = var / np.maximum(mean, 1e-12)
    rng = np.random.default_rng(seed)
    n = count_mat.shape[0]
    boots = np.empty(n_boot)
    for b in range(n_boot):
        take = rng.integers(0, n, size=n)
        boots[b], _ = fit(count_mat[take])
    return float(c), float(np.std(boots, ddof=1)), ratios

"""Quantitative comparison metrics between path ensembles and drift models.

The central metric is the empirical 2-Wasserstein distance between two
equal-size path ensembles under the grid L2 path metric, computed by exact
optimal assignment. Prior recovery is scored as the mean squared path
deviation under common driving noise (reported in its squared-integral form;
output headers state the convention).
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import GridMismatch, SizeMismatch
from .posterior import PathEnsemble
from .sde import SdeSpec, Seed, TimeGrid, Trajectory, euler_maruyama, sample_brownian


@dataclass(frozen=True)
class AssignmentResult:
    permutation: np.ndarray
    cost: float


def _check_grids(a: TimeGrid, b: TimeGrid):
    if a.steps != b.steps or abs(a.t_end - b.t_end) > 1e-12:
        raise GridMismatch(f"grids differ: {a} vs {b}")


def path_l2_distance(a: Trajectory, b: Trajectory) -> float:
    """sqrt of the left-endpoint Riemann sum of the squared node gap."""
    _check_grids(a.grid, b.grid)
    d = a.values - b.values
    return float(np.sqrt(np.sum(d[..., :-1] ** 2, axis=-1) * a.grid.dt))


def _sq_dist_matrix(mu: PathEnsemble, nu: PathEnsemble) -> np.ndarray:
    # ||x - y||^2 = ||x||^2 + ||y||^2 - 2 x.y on the dt-weighted nodes
    dt = mu.grid.dt
    X = mu.values[:, :-1]
    Y = nu.values[:, :-1]
    sq = (np.sum(X ** 2, axis=1)[:, None] + np.sum(Y ** 2, axis=1)[None, :]
          - 2.0 * X @ Y.T) * dt
    return np.maximum(sq, 0.0)


def wasserstein2(mu: PathEnsemble, nu: PathEnsemble) -> AssignmentResult:
    """Exact empirical 2-Wasserstein distance via optimal assignment.

    Solves the n x n matching over squared path distances (Hungarian method)
    and returns sqrt(mean matched squared distance) with the matching
    permutation gamma (mu path gamma[i] pairs with nu path i).
    """
    _check_grids(mu.grid, nu.grid)
    if mu.n_samples != nu.n_samples:
        raise SizeMismatch(f"{mu.n_samples} vs {nu.n_samples} paths")
    sq = _sq_dist_matrix(mu, nu)
    rows, cols = linear_sum_assignment(sq)
    perm = np.empty(mu.n_samples, dtype=int)
    perm[cols] = rows
    cost = float(np.sqrt(np.mean(sq[rows, cols])))
    return AssignmentResult(permutation=perm, cost=cost)


def prior_l2_deviation(learned: SdeSpec, truth: SdeSpec, grid: TimeGrid,
                       n_paths: int = 64, seed: Seed = 0) -> float:
    """Mean over common-noise path pairs of int (Z_learned - Z_truth)^2 dt.

    Both models are driven by the same Brownian realizations, so identical
    drifts give exactly zero. Reported in the squared-integral convention.
    """
    noise = sample_brownian(grid, seed, n_paths=n_paths)
    za = euler_maruyama(learned, noise).values
    zb = euler_maruyama(truth, noise).values
    sq = np.sum((za[:, :-1] - zb[:, :-1]) ** 2, axis=1) * grid.dt
    return float(np.mean(sq))


def mean_wasserstein_to_oracle(model, observations, horizon: float,
                               oracle_fn: Callable, n_paths: int, grid: TimeGrid,
                               seed: Seed = 0):
    """Mean and per-observation Wasserstein distances amortized-vs-oracle.

    ``oracle_fn(events, horizon, n_paths, seed)`` must return a PathEnsemble
    (typically the MCMC sampler); the amortized side simulates the corrected
    SDE with ``n_paths`` paths per observation.
    """
    from .posterior import sample_amortized_posterior

    dists = []
    for i, ev in enumerate(observations):
        amort = sample_amortized_posterior(model, ev.truncated(horizon), horizon,
                                           n_paths, (seed, 50, i), grid)
        oracle = oracle_fn(ev, horizon, n_paths, (seed, 51, i))
        dists.append(wasserstein2(amort, oracle).cost)
    dists = np.asarray(dists)
    return float(np.mean(dists)), dists


def amortization_gap_study(train_sizes: Sequence[int], make_dataset: Callable,
                           train_fn: Callable, oracle_fn: Callable,
                           horizon: float, grid: TimeGrid, n_paths: int = 32,
                           n_eval: int = 4, seed: Seed = 0):
    """Train-vs-test posterior quality as a function of training set size.

    For each n: trains a model on a fresh n-observation dataset, then compares
    amortized posterior ensembles against the MCMC oracle on ``n_eval``
    training observations and ``n_eval`` held-out ones. Returns a list of row
    dicts (n, train/test mean Wasserstein, per-group standard errors, gap).
    """
    rows = []
    for n in train_sizes:
        train_obs, test_obs = make_dataset(n, n_eval)
        model = train_fn(train_obs, n)
        _, d_train = mean_wasserstein_to_oracle(
            model, train_obs[:n_eval], horizon, oracle_fn, n_paths, grid,
            seed=(seed, n, 0))
        _, d_test = mean_wasserstein_to_oracle(
            model, test_obs, horizon, oracle_fn, n_paths, grid,
            seed=(seed, n, 1))
        se_train = float(np.std(d_train, ddof=1) / np.sqrt(len(d_train)))
        se_test = float(np.std(d_test, ddof=1) / np.sqrt(len(d_test)))
        rows.append({
            "n": int(n),
            "w_train": float(np.mean(d_train)),
            "w_test": float(np.mean(d_test)),
            "se_train": se_train,
            "se_test": se_test,
            "gap": float(np.mean(d_test) - np.mean(d_train)),
            "gap_se": float(np.sqrt(se_train ** 2 + se_test ** 2)),
        })
    return rows


def timing_harness(vi_fn: Callable, mcmc_fn: Callable, observations,
                   horizons: Sequence[float], T: float,
                   ll_tolerance: float = 0.05, budgets: Optional[Sequence[int]] = None):
    """Wall-clock comparison at matched predictive log-likelihood.

    For each conditioning horizon T': times the amortized sampler over all
    observations, then searches the MCMC budget ladder for the first budget
    whose mean predictive log-likelihood over (T', T] comes within
    ``ll_tolerance`` (relative) of the amortized one, and times MCMC at that
    budget. Returns rows (horizon, method, predictive_ll, wall_clock_s,
    budget).

    ``vi_fn(events, t_prime)`` -> (ensemble, predictive_ll);
    ``mcmc_fn(events, t_prime, budget)`` -> (ensemble, predictive_ll).
    """
    if budgets is None:
        budgets = [200, 400, 800, 1600, 3200]
    rows = []
    for t_prime in horizons:
        t0 = time.perf_counter()
        vi_lls = [vi_fn(ev, t_prime)[1] for ev in observations]
        vi_time = time.perf_counter() - t0
        vi_ll = float(np.mean(vi_lls))
        rows.append({"horizon": t_prime, "method": "vi",
                     "predictive_ll": vi_ll, "wall_clock_s": vi_time,
                     "budget": 1})

        chosen = budgets[-1]
        mc_ll = None
        mc_time = None
        for budget in budgets:
            t0 = time.perf_counter()
            lls = [mcmc_fn(ev, t_prime, budget)[1] for ev in observations]
            elapsed = time.perf_counter() - t0
            cand = float(np.mean(lls))
            mc_ll, mc_time, chosen = cand, elapsed, budget
            if abs(cand - vi_ll) <= ll_tolerance * abs(vi_ll):
                break
        rows.append({"horizon": t_prime, "method": "mcmc",
                     "predictive_ll": mc_ll, "wall_clock_s": mc_time,
                     "budget": chosen})
    return rows

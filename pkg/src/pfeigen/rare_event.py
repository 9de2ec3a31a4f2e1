"""Deviation probabilities ``P_x(sum_{p=1}^m U(X_p) > m delta)``: naive and
twisted importance sampling, the particle conditional estimator, and
log-eigenvalue curves with their convex dual."""
from __future__ import annotations

import csv
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .backward import run_backward, sample_twisted_chains
from .errors import InvalidArgumentError
from .forward import ForwardTrajectory, log_lambda_average, run_forward
from .kernel import (EXACT_TWISTED, NAIVE, REPLICATE, TWISTED, Dirac,
                     categorical_sample, make_stream)
from .oracle import GridEigenSystem, GridOperator


def resolve_threads(threads: int) -> int:
    if threads < 0:
        raise InvalidArgumentError("threads must be >= 0")
    if threads == 0:
        return os.cpu_count() or 1
    return threads


def mean_relvar(values) -> Tuple[float, float]:
    """Sample mean and relative variance ``var / mean^2`` (nan if mean is 0)."""
    v = np.asarray(values, float).ravel()
    mean = float(v.mean())
    if v.size < 2 or mean == 0.0:
        return mean, float("nan")
    return mean, float(v.var(ddof=1) / mean**2)


@dataclass(frozen=True)
class Estimate:
    method: str
    m: int
    delta: float
    alpha: float
    mean: float
    relvar: float
    replications: int

    @property
    def stderr(self) -> float:
        if np.isnan(self.relvar):
            return 0.0
        return abs(self.mean) * np.sqrt(self.relvar / self.replications)


@dataclass
class RareEventReport:
    m: int
    delta: float
    estimates: List[Estimate] = field(default_factory=list)
    oracle_bracket: Optional[Tuple[float, float]] = None


def _check_L(L):
    if L < 2:
        raise InvalidArgumentError("need at least 2 replications")


def naive_is_samples(model, m: int, delta: float, L: int, x0: float, seed: int) -> np.ndarray:
    """Indicators of ``sum U(X_p) > m delta`` for ``L`` chains driven by ``M``."""
    _check_L(L)
    if m == 0:
        return np.zeros(L)
    rng = make_stream(seed, NAIVE, m)
    x = np.full(L, float(x0))
    s = np.zeros(L)
    for _ in range(m):
        x = model.mutate(x, rng)
        s += model.score(x)
    return (s > m * delta).astype(float)


def naive_is(model, m: int, delta: float, L: int, x0: float = 0.0,
             seed: int = 0) -> Tuple[float, float]:
    """Crude Monte Carlo: ``(mean, relative variance)``."""
    return mean_relvar(naive_is_samples(model, m, delta, L, x0, seed))


def twisted_exact_is(eig: GridEigenSystem, op: GridOperator, m: int, delta: float,
                     L: int, x0: float = 0.0, seed: int = 0) -> Tuple[float, float]:
    """Importance sampling from the grid twisted kernel ``P*``.

    States live on the grid nodes (the start is moved to the nearest node);
    the weight is ``lambda*^m h*(X_0) / (h*(X_m) prod_{p<m} G(X_p))``.
    """
    _check_L(L)
    model = op.model
    if m == 0:
        return 0.0, float("nan")
    rng = make_stream(seed, EXACT_TWISTED, m)
    i0 = int(np.argmin(np.abs(op.nodes - x0)))
    idx = np.full(L, i0)
    log_g = model.log_potential(op.nodes)
    score = model.score(op.nodes)
    logw = np.full(L, m * eig.log_lambda_star + np.log(eig.h_star[i0]))
    s = np.zeros(L)
    for _ in range(m):
        logw -= log_g[idx]
        idx = categorical_sample(eig.p_star[idx], rng)
        s += score[idx]
    logw -= np.log(eig.h_star[idx])
    vals = np.where(s > m * delta, np.exp(logw), 0.0)
    return mean_relvar(vals)


def conditional_is_samples(traj: ForwardTrajectory, backward, m: int, delta: float,
                           L: int, x0: float, seed: int, replicate: int = 0) -> np.ndarray:
    """``L`` draws of the conditional estimator on one frozen particle system."""
    if m > backward.n:
        raise InvalidArgumentError("chain length exceeds the half horizon")
    if m == 0:
        return np.zeros(L)
    rng = make_stream(seed, TWISTED, replicate, m)
    paths, corr = sample_twisted_chains(traj, backward, x0, m, L, rng)
    s = traj.model.score(paths[:, 1:]).sum(axis=1)
    return np.where(s > m * delta, np.exp(corr), 0.0)


def conditional_particle_is(traj: ForwardTrajectory, backward, m: int, delta: float,
                            L: int, x0: float = 0.0, seed: int = 0,
                            replicate: int = 0) -> Tuple[float, float]:
    """Mean and relative variance of ``L`` conditional chains on one system."""
    _check_L(L)
    return mean_relvar(conditional_is_samples(traj, backward, m, delta, L, x0, seed, replicate))


def _replicate_chunk(args):
    model, N, two_n, ms, deltas, x0, seed, reps, initial = args
    out = np.empty((len(reps), len(ms), len(deltas)))
    for k, r in enumerate(reps):
        traj = run_forward(model, N, two_n, initial, seed, replicate=r)
        bw = run_backward(traj)
        for a, m in enumerate(ms):
            if m == 0:
                out[k, a] = 0.0
                continue
            rng = make_stream(seed, TWISTED, r, m)
            paths, corr = sample_twisted_chains(traj, bw, x0, m, 1, rng)
            s = model.score(paths[0, 1:]).sum()
            for b, d in enumerate(deltas):
                out[k, a, b] = np.exp(corr[0]) if s > m * d else 0.0
    return out


def conditional_is_replicates(model, N: int, two_n: int, ms: Sequence[int],
                              deltas: Sequence[float], reps: int, x0: float = 0.0,
                              seed: int = 0, threads: int = 1,
                              initial=None) -> np.ndarray:
    """One conditional chain per independent particle system, for every
    ``(m, delta)`` pair.

    Each replicate runs its own forward/backward pass keyed by the replicate
    index, so the result does not depend on ``threads``.

    Returns
    -------
    ndarray, shape (reps, len(ms), len(deltas))
    """
    ms = [int(m) for m in ms]
    if max(ms) > two_n // 2:
        raise InvalidArgumentError("chain length exceeds the half horizon")
    initial = Dirac(x0) if initial is None else initial
    workers = resolve_threads(threads)
    chunks = np.array_split(np.arange(reps), max(1, min(reps, 8 * workers)))
    jobs = [(model, N, two_n, ms, list(deltas), x0, seed, c.tolist(), initial)
            for c in chunks if c.size]
    if workers == 1:
        parts = [_replicate_chunk(j) for j in jobs]
    else:
        with ProcessPoolExecutor(workers) as ex:
            parts = list(ex.map(_replicate_chunk, jobs))
    return np.concatenate(parts, axis=0)


# ---------------------------------------------------------------------------
# log-eigenvalue curves


@dataclass(frozen=True)
class LambdaCurve:
    alphas: np.ndarray
    log_lambda_hat: np.ndarray
    stderr: np.ndarray
    N: int = 0
    n: int = 0
    seeds: int = 0

    def __post_init__(self):
        a = np.asarray(self.alphas, float)
        v = np.asarray(self.log_lambda_hat, float)
        s = np.zeros_like(v) if self.stderr is None else np.asarray(self.stderr, float)
        if not (a.shape == v.shape == s.shape) or a.ndim != 1 or a.size == 0:
            raise InvalidArgumentError("curve arrays must be 1-D with equal length")
        if np.any(np.diff(a) <= 0):
            raise InvalidArgumentError("alphas must be strictly increasing")
        object.__setattr__(self, "alphas", a)
        object.__setattr__(self, "log_lambda_hat", v)
        object.__setattr__(self, "stderr", s)

    def __call__(self, alpha):
        return np.interp(alpha, self.alphas, self.log_lambda_hat)


def _lambda_chunk(args):
    model_fn, alphas, N, n, initial, seed, reps = args
    two_n = n + (n % 2)
    out = np.empty((len(reps), len(alphas)))
    for k, r in enumerate(reps):
        for j, a in enumerate(alphas):
            traj = run_forward(model_fn(a), N, two_n, initial, seed, replicate=r,
                               store_denominators=False)
            out[k, j] = log_lambda_average(traj, n)
    return out


def lambda_curve(model_fn: Callable[[float], object], alphas: Sequence[float],
                 N: int, n: int, seeds: int, seed: int = 0, initial=None,
                 threads: int = 1) -> LambdaCurve:
    """Seed-averaged ``(1/n) sum_{p<n} log lambda_p^N`` for each tilt.

    The same streams are used for every ``alpha`` (common random numbers),
    which keeps finite differences in ``alpha`` smooth.  ``model_fn`` must be
    picklable when ``threads != 1``.
    """
    alphas = list(map(float, alphas))
    if not alphas:
        raise InvalidArgumentError("need at least one alpha")
    if seeds < 1 or n < 1:
        raise InvalidArgumentError("need seeds >= 1 and n >= 1")
    initial = Dirac(0.0) if initial is None else initial
    workers = resolve_threads(threads)
    chunks = [c for c in np.array_split(np.arange(seeds), min(seeds, 4 * workers)) if c.size]
    jobs = [(model_fn, alphas, N, n, initial, seed, c.tolist()) for c in chunks]
    if workers == 1:
        parts = [_lambda_chunk(j) for j in jobs]
    else:
        with ProcessPoolExecutor(workers) as ex:
            parts = list(ex.map(_lambda_chunk, jobs))
    vals = np.concatenate(parts, axis=0)
    se = vals.std(axis=0, ddof=1) / np.sqrt(seeds) if seeds > 1 else np.zeros(len(alphas))
    return LambdaCurve(np.array(alphas), vals.mean(axis=0), se, N, n, seeds)


def oracle_lambda_curve(model_fn: Callable[[float], object], alphas: Sequence[float],
                        grid_size: int = 1024, tol: float = 1e-12) -> LambdaCurve:
    """Grid power-iteration values ``log lambda*(alpha)``."""
    from .oracle import build_grid_operator, power_iteration
    vals = [power_iteration(build_grid_operator(model_fn(a), grid_size), tol).log_lambda_star
            for a in alphas]
    return LambdaCurve(np.asarray(alphas, float), np.array(vals), None)


def rate_function(curve: LambdaCurve, t):
    """``I(t) = max_alpha [t alpha - Lambda(alpha)]`` over the curve's grid.

    Returns ``(I, argmax_alpha)``, as floats for scalar ``t`` and arrays otherwise.
    """
    tt = np.atleast_1d(np.asarray(t, float))
    vals = tt[:, None] * curve.alphas[None, :] - curve.log_lambda_hat[None, :]
    k = np.argmax(vals, axis=1)
    I = vals[np.arange(tt.size), k]
    arg = curve.alphas[k]
    if np.ndim(t) == 0:
        return float(I[0]), float(arg[0])
    return I, arg


def lambda_derivative(curve: LambdaCurve, alpha: float, step: float) -> float:
    """Central difference of the linearly interpolated curve."""
    if step <= 0:
        raise InvalidArgumentError("step must be positive")
    lo, hi = alpha - step, alpha + step
    if lo < curve.alphas[0] - 1e-12 or hi > curve.alphas[-1] + 1e-12:
        raise InvalidArgumentError("alpha +/- step leaves the curve's range")
    return float((curve(hi) - curve(lo)) / (2 * step))


def convexity_violations(curve: LambdaCurve, k: float = 3.0) -> np.ndarray:
    """Interior indices lying above the chord of their neighbours by more
    than ``k`` pooled standard errors."""
    a, v, s = curve.alphas, curve.log_lambda_hat, curve.stderr
    if a.size < 3:
        return np.array([], dtype=int)
    t = (a[1:-1] - a[:-2]) / (a[2:] - a[:-2])
    chord = (1 - t) * v[:-2] + t * v[2:]
    pooled = np.sqrt(s[:-2] ** 2 + s[1:-1] ** 2 + s[2:] ** 2)
    return np.flatnonzero(v[1:-1] - chord > k * pooled) + 1


def decay_slope(ms, values) -> float:
    """Least-squares slope of ``log values`` against ``m``."""
    ms = np.asarray(ms, float)
    v = np.asarray(values, float)
    ok = v > 0
    if ok.sum() < 2:
        raise InvalidArgumentError("need at least two positive values")
    return float(np.polyfit(ms[ok], np.log(v[ok]), 1)[0])


def write_rare_event_csv(rows: Sequence[Estimate], out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "rare_event.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "m", "delta", "alpha", "mean", "relvar", "L"])
        for e in rows:
            w.writerow([e.method, e.m, repr(float(e.delta)), repr(float(e.alpha)),
                        repr(float(e.mean)), repr(float(e.relvar)), e.replications])


def write_lambda_curve_csv(curve: LambdaCurve, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "lambda_curve.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["alpha", "lambda_hat", "stderr"])
        for a, v, s in zip(curve.alphas, curve.log_lambda_hat, curve.stderr):
            w.writerow([repr(float(a)), repr(float(v)), repr(float(s))])


def write_rate_function_csv(ts, I, argmax, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "rate_function.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "I", "argmax_alpha"])
        for a, b, c in zip(ts, I, argmax):
            w.writerow([repr(float(a)), repr(float(b)), repr(float(c))])

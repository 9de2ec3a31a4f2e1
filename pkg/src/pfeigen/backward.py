"""Backward recursion for ``h_{p,2n}^N``, twisted kernels and the conditional chain."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import InvalidArgumentError, InvariantError
from .forward import ForwardTrajectory
from .kernel import (TWISTED, Dirac, EmpiricalMeasure, categorical_sample,
                     log_sum_exp, make_stream)


@dataclass(frozen=True)
class BackwardSolution:
    """``h_{p,2n}^N`` at the particles for ``p = n..2n``.

    ``h_values[k]`` holds layer ``p = n + k``; ``normalizers[k]`` is the
    layer mean, which equals one up to rounding.
    """

    n: int
    h_values: np.ndarray = field(repr=False)
    normalizers: np.ndarray = field(repr=False)

    def layer(self, p: int) -> np.ndarray:
        if not self.n <= p <= 2 * self.n:
            raise InvalidArgumentError(f"h is stored for p in {self.n}..{2 * self.n}")
        return self.h_values[p - self.n]

    def scaled(self, factor: float) -> "BackwardSolution":
        """Copy with every stored value multiplied by ``factor`` (fault injection)."""
        h = self.h_values * factor
        return BackwardSolution(self.n, h, h.mean(axis=1))


def _backward_step(traj: ForwardTrajectory, p: int, x: np.ndarray,
                   log_h_next: np.ndarray) -> np.ndarray:
    """``log h_p(x)`` from ``log h_{p+1}`` at the time-``(p+1)`` particles."""
    nxt = traj.layer(p + 1)
    lw = (traj.model.log_density_q(x[:, None], nxt[None, :])
          - traj.denominators(p + 1)[None, :] + log_h_next[None, :])
    return log_sum_exp(lw, axis=1)


def run_backward(traj: ForwardTrajectory) -> BackwardSolution:
    """Backward recursion from ``h_{2n,2n} = 1`` down to layer ``n``."""
    n = traj.n
    h = np.empty((n + 1, traj.N))
    h[n] = 1.0
    log_h = np.zeros(traj.N)
    for p in range(2 * n - 1, n - 1, -1):
        log_h = _backward_step(traj, p, traj.layer(p), log_h)
        h[p - n] = np.exp(log_h)
    if not np.all(h > 0) or not np.all(np.isfinite(h)):
        raise InvariantError("backward recursion produced non-positive h")
    norms = h.mean(axis=1)
    h.setflags(write=False)
    norms.setflags(write=False)
    return BackwardSolution(n, h, norms)


def eval_h(traj: ForwardTrajectory, backward: BackwardSolution, p: int, x):
    """``h_{p,2n}^N(x)`` by one backward step from the stored layer ``p + 1``.

    Returns a float for scalar ``x`` and an array otherwise.
    """
    n = backward.n
    if not n <= p <= 2 * n - 1:
        raise InvalidArgumentError(f"eval_h needs p in {n}..{2 * n - 1}")
    scalar = np.ndim(x) == 0
    xs = np.atleast_1d(np.asarray(x, float))
    traj.model.space.check(xs)
    out = np.exp(_backward_step(traj, p, xs, np.log(backward.layer(p + 1))))
    return float(out[0]) if scalar else out


def window_average_h(traj: ForwardTrajectory, backward: BackwardSolution, x,
                     m: Optional[int] = None):
    """``(1/m) sum_{p<m} h_{n+p,2n}^N(x)``; ``m`` defaults to ``n // 10``."""
    n = backward.n
    if m is None:
        m = max(n // 10, 1)
    if not 1 <= m <= n:
        raise InvalidArgumentError("window length must lie in 1..n")
    scalar = np.ndim(x) == 0
    xs = np.atleast_1d(np.asarray(x, float))
    acc = np.zeros(xs.size)
    for p in range(n, n + m):
        acc += eval_h(traj, backward, p, xs)
    acc /= m
    return float(acc[0]) if scalar else acc


@dataclass(frozen=True)
class TwistedRow:
    source: float
    time: int
    atom_indices: np.ndarray
    probabilities: np.ndarray
    log_normalizer: float

    @property
    def atoms(self) -> np.ndarray:
        return self.atom_indices


def _twisted_log_weights(traj, backward, p, x):
    n = backward.n
    if not n + 1 <= p <= 2 * n:
        raise InvalidArgumentError(f"twisted rows exist for p in {n + 1}..{2 * n}")
    xs = np.atleast_1d(np.asarray(x, float))
    traj.model.space.check(xs)
    return (traj.model.log_density_q(xs[:, None], traj.layer(p)[None, :])
            - traj.denominators(p)[None, :] + np.log(backward.layer(p))[None, :])


def twisted_row(traj: ForwardTrajectory, backward: BackwardSolution, p: int,
                x: float) -> TwistedRow:
    """Row ``P_{(p,2n)}^N(x, .)`` over the time-``p`` particles.

    The normalizer is the actual sum of the weights, which equals
    ``h_{p-1,2n}^N(x)`` algebraically.
    """
    lw = _twisted_log_weights(traj, backward, p, x)[0]
    lz = log_sum_exp(lw)
    probs = np.exp(lw - lz)
    probs /= probs.sum()
    return TwistedRow(float(x), int(p), np.arange(traj.N), probs, lz)


def sample_twisted_chains(traj: ForwardTrajectory, backward: BackwardSolution,
                          x0: float, m: int, count: int,
                          rng: np.random.Generator):
    """``count`` independent conditional chains started at ``x0`` at time ``n``.

    Returns
    -------
    paths : ndarray, shape (count, m + 1)
    log_correction : ndarray, shape (count,)
    """
    n = backward.n
    if not 0 <= m <= n:
        raise InvalidArgumentError("chain length must lie in 0..n")
    traj.model.space.check(x0, "chain start")
    paths = np.empty((count, m + 1))
    paths[:, 0] = x0
    corr = np.zeros(count)
    if m == 0:
        return paths, corr
    model = traj.model
    cur = paths[:, 0]
    idx = None
    for k in range(1, m + 1):
        p = n + k
        lw = _twisted_log_weights(traj, backward, p, cur)
        lz = log_sum_exp(lw, axis=1)
        if k == 1:
            corr += lz  # log h_{n,2n}^N(x0)
        probs = np.exp(lw - lz[:, None])
        probs /= probs.sum(axis=1, keepdims=True)
        idx = categorical_sample(probs, rng)
        corr += traj.log_lambda[p - 1] - model.log_potential(cur)
        cur = traj.layer(p)[idx]
        paths[:, k] = cur
    corr -= np.log(backward.layer(n + m)[idx])
    return paths, corr


def sample_twisted_chain(traj: ForwardTrajectory, backward: BackwardSolution,
                         x0: float, m: int, seed: int, replicate: int = 0):
    """One conditional chain; returns ``(path, log_correction)``."""
    rng = make_stream(seed, TWISTED, replicate)
    paths, corr = sample_twisted_chains(traj, backward, x0, m, 1, rng)
    return paths[0], float(corr[0])


MeasureLike = Union[Dirac, EmpiricalMeasure, np.ndarray]


def _source_points(traj: ForwardTrajectory, mu_prime: MeasureLike) -> np.ndarray:
    if isinstance(mu_prime, Dirac):
        traj.model.space.check(mu_prime.x0, "dirac location")
        return np.array([float(mu_prime.x0)])
    if isinstance(mu_prime, EmpiricalMeasure):
        return np.asarray(mu_prime.points)
    pts = np.atleast_1d(np.asarray(mu_prime, float))
    traj.model.space.check(pts)
    return pts


def semigroup_log_weights(traj: ForwardTrajectory, mu_prime: MeasureLike,
                          n: int, start: int = 0) -> np.ndarray:
    """Log masses that ``mu' Q_{start,n}^N`` puts on the time-``n`` particles.

    ``mu'`` is a Dirac mass or an equally weighted point set.  For
    ``n == start`` the result describes ``mu'`` itself and is returned as
    log weights over its own points.
    """
    if not 0 <= start <= n <= traj.horizon:
        raise InvalidArgumentError(f"need 0 <= start <= n <= {traj.horizon}")
    model = traj.model
    src = _source_points(traj, mu_prime)
    lw = np.full(src.size, -np.log(src.size))
    for p in range(start + 1, n + 1):
        cur = traj.layer(p)
        lq = model.log_density_q(src[:, None], cur[None, :]) + lw[:, None]
        lw = log_sum_exp(lq, axis=0) + traj.log_lambda[p - 1] - traj.denominators(p)
        src = cur
    return lw


def random_semigroup_apply(traj: ForwardTrajectory, mu_prime: MeasureLike,
                           phi: Callable, n: int, start: int = 0) -> float:
    """``mu' Q_{start,n}^N (phi)`` on the frozen particle system."""
    lw = semigroup_log_weights(traj, mu_prime, n, start)
    pts = traj.layer(n) if n > start else _source_points(traj, mu_prime)
    return float(np.sum(np.exp(lw) * np.asarray(phi(pts), float)))


def write_h_csv(x, h_window, out_dir: str, h_oracle=None) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "h_estimate.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "h_window", "h_oracle"])
        for i, (a, b) in enumerate(zip(x, h_window)):
            o = "" if h_oracle is None else repr(float(h_oracle[i]))
            w.writerow([repr(float(a)), repr(float(b)), o])


def write_twisted_path_csv(path: Sequence[float], out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "twisted_path.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "state"])
        for k, s in enumerate(path):
            w.writerow([k, repr(float(s))])

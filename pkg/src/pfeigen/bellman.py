"""Average-cost Bellman equation: value function ``V = -log h`` and average
cost ``varsigma = -log lambda`` from particle and grid eigen-solutions."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .backward import BackwardSolution, window_average_h
from .errors import InvalidArgumentError
from .forward import ForwardTrajectory, log_lambda_average
from .kernel import log_sum_exp
from .oracle import GridEigenSystem, GridOperator


@dataclass(frozen=True)
class ValueFunctionEstimate:
    eval_points: np.ndarray = field(repr=False)
    v_hat: np.ndarray = field(repr=False)
    varsigma_hat: float
    N: int
    n: int
    m: int
    seeds: int = 1

    @property
    def h_hat(self) -> np.ndarray:
        return np.exp(-self.v_hat)


def estimate_value_function(traj: ForwardTrajectory, backward: BackwardSolution,
                            eval_points, m: Optional[int] = None) -> ValueFunctionEstimate:
    """``V = -log`` of the window-averaged ``h`` and ``varsigma = -Lambda_n^N``."""
    n = backward.n
    if m is None:
        m = max(n // 10, 1)
    if not 1 <= m <= n:
        raise InvalidArgumentError("window length must lie in 1..n")
    x = np.atleast_1d(np.asarray(eval_points, float))
    h = window_average_h(traj, backward, x, m)
    v = -np.log(h)
    return ValueFunctionEstimate(x, v, -log_lambda_average(traj, n), traj.N, n, m)


def _markov_part(op: GridOperator) -> np.ndarray:
    """``M_ij = q_ij w_j / G_i``."""
    return op.matrix / op.g_values[:, None]


def bellman_residual(eig: GridEigenSystem, op: GridOperator) -> float:
    """``max |V + varsigma + log G + log M(e^{-V})|`` over the grid."""
    V = -np.log(eig.h_star)
    vs = -np.log(eig.lambda_star)
    M = _markov_part(op)
    logMe = log_sum_exp(np.log(M) - V[None, :], axis=1)
    return float(np.max(np.abs(V + vs + np.log(op.g_values) + logMe)))


def jensen_gap(op: GridOperator, V, h) -> np.ndarray:
    """``U + KL(M_h || M) + M_h(V) - (-log G - log M(e^{-V}))`` at every node.

    ``M_h(x, dy) = M(x, dy) h(y) / M(h)(x)`` is the ``h``-twisted kernel and
    ``U = -log G``.  The gap is nonnegative for every positive ``h``.
    """
    V = np.asarray(V, float)
    h = np.asarray(h, float)
    if np.any(h <= 0):
        raise InvalidArgumentError("twisting function must be positive")
    M = _markov_part(op)
    log_g = np.log(op.g_values)
    Mh = M * h[None, :]
    Mh /= Mh.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        kl = np.where(Mh > 0, Mh * (np.log(Mh) - np.log(M)), 0.0).sum(axis=1)
    lhs = -log_g + kl + Mh @ V
    rhs = -log_g - log_sum_exp(np.log(M) - V[None, :], axis=1)
    return lhs - rhs


def discontinuities(x, v, count: int = 2) -> np.ndarray:
    """Midpoints of the ``count`` largest jumps between adjacent points, sorted."""
    x = np.asarray(x, float)
    gaps = np.abs(np.diff(np.asarray(v, float)))
    idx = np.sort(np.argsort(gaps)[-count:])
    return 0.5 * (x[idx] + x[idx + 1])


def write_value_function_csv(est: ValueFunctionEstimate, out_dir: str,
                             v_oracle=None) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "value_function.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "v_hat", "v_oracle"])
        for i, (a, b) in enumerate(zip(est.eval_points, est.v_hat)):
            o = "" if v_oracle is None else repr(float(v_oracle[i]))
            w.writerow([repr(float(a)), repr(float(b)), o])

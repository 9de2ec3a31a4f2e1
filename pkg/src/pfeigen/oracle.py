"""Deterministic reference solutions on a uniform quadrature grid.

Power iteration for the principal eigen-triple, the twisted kernel, the
multiplicative-ergodic decay profile, finite-horizon approximants and a
certified dynamic program for deviation probabilities.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import Callable, Optional, Tuple, Union

import numpy as np

from .errors import InvalidArgumentError, ModelEvaluationError, NonConvergenceError
from .kernel import Dirac, DominatedKernelModel, Uniform


def trapezoid_weights(size: int) -> np.ndarray:
    """Composite trapezoid weights on a uniform grid, normalized to sum 1."""
    w = np.full(size, 2.0)
    w[0] = w[-1] = 1.0
    return w / (2.0 * (size - 1))


@dataclass(frozen=True)
class GridOperator:
    """Discretization ``A = q_ij w_j`` of ``Q`` on uniform nodes.

    ``scheme == "nodal"`` evaluates the density at the nodes.  ``"cell"``
    uses exact cell masses ``q_ij = G_i M(x_i, cell_j) / w_j`` where cell
    ``j`` is the node's trapezoid cell, which handles integrable
    singularities of the transition density.
    """

    model: DominatedKernelModel
    nodes: np.ndarray = field(repr=False)
    quad_weights: np.ndarray = field(repr=False)
    q_matrix: np.ndarray = field(repr=False)
    g_values: np.ndarray = field(repr=False)
    scheme: str = "nodal"

    @property
    def size(self) -> int:
        return self.nodes.size

    @property
    def matrix(self) -> np.ndarray:
        """``A_ij = q_ij w_j``: the mass ``Q(x_i, cell_j)``."""
        return self.q_matrix * self.quad_weights[None, :]

    @property
    def cell_edges(self) -> np.ndarray:
        mid = 0.5 * (self.nodes[1:] + self.nodes[:-1])
        return np.concatenate([[self.nodes[0]], mid, [self.nodes[-1]]])

    def rows_at(self, x) -> np.ndarray:
        """``Q(x, cell_j)`` for arbitrary states ``x``; shape (len(x), size)."""
        x = np.atleast_1d(np.asarray(x, float))
        model = self.model
        if self.scheme == "nodal":
            lq = model.log_density_q(x[:, None], self.nodes[None, :])
            return np.exp(lq) * self.quad_weights[None, :]
        F = model.transition_cdf(x[:, None], self.cell_edges[None, :])
        return model.potential(x)[:, None] * np.diff(F, axis=1)

    def grid_measure(self, initial) -> np.ndarray:
        """Probability weights over the nodes for an initial law.

        Dirac masses are moved to the nearest node.
        """
        if isinstance(initial, Dirac):
            self.model.space.check(initial.x0, "dirac location")
            mu = np.zeros(self.size)
            mu[int(np.argmin(np.abs(self.nodes - initial.x0)))] = 1.0
            return mu
        if isinstance(initial, Uniform):
            return self.quad_weights.copy()
        mu = np.asarray(initial, float)
        if mu.shape != (self.size,) or np.any(mu < 0):
            raise InvalidArgumentError("grid measure must be nonnegative weights per node")
        return mu


def build_grid_operator(model: DominatedKernelModel, grid_size: int,
                        scheme: str = "nodal") -> GridOperator:
    if grid_size < 8:
        raise InvalidArgumentError("grid_size must be >= 8")
    if scheme not in ("nodal", "cell"):
        raise InvalidArgumentError(f"unknown discretization scheme {scheme!r}")
    nodes = model.space.grid(grid_size)
    w = trapezoid_weights(grid_size)
    log_g = model.log_potential(nodes)
    if not np.all(np.isfinite(log_g)):
        raise ModelEvaluationError("potential is not finite at every node")
    if scheme == "nodal":
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            lq = model.log_density_q(nodes[:, None], nodes[None, :])
        bad = ~np.isfinite(lq)
        if np.any(bad):
            i, j = np.argwhere(bad)[0]
            raise ModelEvaluationError(
                f"log q not finite at ({nodes[i]!r}, {nodes[j]!r}); "
                "try the cell scheme")
        q = np.exp(lq)
    else:
        tmp = GridOperator(model, nodes, w, np.empty(0), np.exp(log_g), "cell")
        q = tmp.rows_at(nodes) / w[None, :]
        if not np.all(np.isfinite(q)):
            raise ModelEvaluationError("cell masses not finite")
        # far-tail cell masses underflow; keep the matrix strictly positive
        q = np.maximum(q, np.finfo(float).tiny)
    if not np.all(q > 0):
        raise ModelEvaluationError("discretized kernel is not strictly positive")
    for a in (nodes, w, q):
        a.setflags(write=False)
    return GridOperator(model, nodes, w, q, np.exp(log_g), scheme)


@dataclass(frozen=True)
class GridEigenSystem:
    """Principal eigen-triple on the grid.

    ``eta_star`` holds node probabilities, ``h_star`` node values with
    ``sum(eta_star * h_star) == 1``, and ``p_star`` the twisted Markov matrix.
    """

    lambda_star: float
    h_star: np.ndarray = field(repr=False)
    eta_star: np.ndarray = field(repr=False)
    p_star: np.ndarray = field(repr=False)
    rho: Optional[float]
    iterations: int
    residual: float
    residual_history: np.ndarray = field(repr=False, default=None)

    @property
    def log_lambda_star(self) -> float:
        return float(np.log(self.lambda_star))

    @property
    def pi_star(self) -> np.ndarray:
        return self.eta_star * self.h_star


def power_iteration(op: GridOperator, tol: float = 1e-10,
                    max_iter: int = 100_000) -> GridEigenSystem:
    """Simultaneous power iteration for the left (measure) and right (function)
    Perron vectors of the grid operator.

    Stops once successive eigenvalue estimates differ by less than ``tol``
    relative to the eigenvalue and both eigen-equation residuals, taken
    relative to the eigenvalue, are below ``tol``.
    """
    if not tol > 0:
        raise InvalidArgumentError("tol must be positive")
    A = op.matrix
    eta = op.quad_weights.copy()
    h = np.ones(op.size)
    lam_prev = np.inf
    history = []
    for it in range(1, int(max_iter) + 1):
        eta_next = eta @ A
        lam = eta_next.sum()
        eta_next /= lam
        h_next = A @ h
        h_next /= h_next.max()
        # residuals of the current iterates
        res_eta = np.abs(eta_next - eta).sum()
        Ah = A @ h_next
        lam_h = (eta_next @ Ah) / (eta_next @ h_next)
        res_h = np.max(np.abs(Ah - lam_h * h_next))
        eta, h = eta_next, h_next
        # function residual relative to lambda, under eta(h) = 1
        res = max(res_eta, res_h / (lam_h * (eta @ h)))
        history.append(res)
        if abs(lam - lam_prev) < tol * lam and res < tol:
            break
        lam_prev = lam
    else:
        raise NonConvergenceError(
            f"power iteration did not converge in {max_iter} iterations",
            residual=float(res), iterations=int(max_iter))
    lam = float((eta @ A).sum())
    h = h / (eta @ h)
    P = A * h[None, :] / (lam * h[:, None])
    P /= P.sum(axis=1, keepdims=True)
    rho = op.model.rho
    for a in (h, eta, P):
        a.setflags(write=False)
    return GridEigenSystem(lam, h, eta, P, rho, it, float(res), np.asarray(history))


def eigen_residuals(op: GridOperator, eig: GridEigenSystem) -> Tuple[float, float]:
    """``(||eta Q - lambda eta||_1, max |Q h - lambda h|)``."""
    A = op.matrix
    r_eta = np.abs(eig.eta_star @ A - eig.lambda_star * eig.eta_star).sum()
    r_h = np.max(np.abs(A @ eig.h_star - eig.lambda_star * eig.h_star))
    return float(r_eta), float(r_h)


def extend_h(op: GridOperator, eig: GridEigenSystem, x) -> np.ndarray:
    """Nystrom extension ``h(x) = Q(h)(x) / lambda`` off the grid."""
    return op.rows_at(x) @ eig.h_star / eig.lambda_star


def met_bound(model: DominatedKernelModel, n) -> np.ndarray:
    lo, hi = model.epsilon_bounds
    rho = 1.0 - lo / hi
    return 2.0 * rho ** np.asarray(n, float) * (hi / lo) ** 2


def met_decay_profile(op: GridOperator, eig: GridEigenSystem, n_max: int) -> np.ndarray:
    """``d_n = max_i sum_j |lambda^-n Q^n(i, j) - h_i eta_j|`` for ``n = 1..n_max``."""
    # With B h = h, eta B = eta and eta(h) = 1 the difference equals the n-th
    # power of the deflated operator; powering that avoids the round-off floor
    # left by subtracting two nearly equal matrices.
    D = op.matrix / eig.lambda_star - np.outer(eig.h_star, eig.eta_star)
    out = np.empty(n_max)
    Dn = np.eye(op.size)
    for k in range(n_max):
        Dn = Dn @ D
        out[k] = np.abs(Dn).sum(axis=1).max()
    return out


def _normalized_flow(op: GridOperator, mu: np.ndarray, steps: int):
    """``mu Q^steps`` normalized to a probability, plus the log of its mass."""
    A = op.matrix
    v = mu / mu.sum()
    log_mass = np.log(mu.sum())
    for _ in range(steps):
        v = v @ A
        s = v.sum()
        log_mass += np.log(s)
        v = v / s
    return v, log_mass


def deterministic_h_pn(op: GridOperator, initial, p: int, n: int) -> np.ndarray:
    """``h_{p,n} = Q^{n-p}(1) / eta_p Q^{n-p}(1)`` with ``eta_p`` the normalized flow."""
    if not 0 <= p <= n:
        raise InvalidArgumentError("need 0 <= p <= n")
    eta_p, _ = _normalized_flow(op, op.grid_measure(initial), p)
    A = op.matrix
    f = np.ones(op.size)
    for _ in range(n - p):
        f = A @ f
        f /= f.max()
    return f / (eta_p @ f)


def log_iterate_expectation(op: GridOperator, initial, phi, n: int) -> float:
    """``log mu Q^n (phi)`` for nonnegative ``phi`` given at the nodes."""
    if n < 0:
        raise InvalidArgumentError("n must be >= 0")
    v, log_mass = _normalized_flow(op, op.grid_measure(initial), n)
    return float(log_mass + np.log(v @ _grid_function(op, phi)))


def iterate_expectation(op: GridOperator, initial, phi, n: int) -> float:
    """``mu Q^n (phi)`` by repeated vector-matrix products."""
    if n < 0:
        raise InvalidArgumentError("n must be >= 0")
    v, log_mass = _normalized_flow(op, op.grid_measure(initial), n)
    return float(np.exp(log_mass) * (v @ _grid_function(op, phi)))


def flow_log_lambdas(op: GridOperator, initial, n: int) -> np.ndarray:
    """``log lambda_l = log eta_l Q(1)`` for ``l < n`` along the normalized flow."""
    A1 = op.matrix.sum(axis=1)
    v = op.grid_measure(initial)
    v = v / v.sum()
    out = np.empty(n)
    for k in range(n):
        out[k] = np.log(v @ A1)
        v = v @ op.matrix
        v /= v.sum()
    return out


def _grid_function(op, phi) -> np.ndarray:
    if callable(phi):
        return np.asarray(phi(op.nodes), float) * np.ones(op.size)
    f = np.asarray(phi, float)
    if f.shape == ():
        return np.full(op.size, float(f))
    if f.shape != (op.size,):
        raise InvalidArgumentError("grid function has wrong length")
    return f


def stationary_distribution(op: GridOperator, tol: float = 1e-13,
                            max_iter: int = 100_000) -> np.ndarray:
    """Invariant probability of the Markov part ``M`` on the grid."""
    M = op.matrix / op.matrix.sum(axis=1, keepdims=True)
    v = op.quad_weights.copy()
    for _ in range(max_iter):
        nxt = v @ M
        if np.abs(nxt - v).sum() < tol:
            return nxt
        v = nxt
    raise NonConvergenceError("stationary iteration did not converge")


# ---------------------------------------------------------------------------
# certified deviation probabilities


def brute_force_deviation_prob(model, m: int, delta: float, x0: float,
                               sum_bins: int = 2048, state_bins: int = 1024
                               ) -> Tuple[float, float]:
    """Certified bracket for ``P_x0(sum_{p=1}^m U(X_p) > m delta)`` under ``M``.

    Requires ``M`` stochastically monotone with an exact CDF and ``U``
    nondecreasing with bounds ``model.score_bounds``.  Two discretized
    chains are coupled with the true one through the inverse CDF: the lower
    one rounds states and partial sums down, the upper one rounds them up,
    so the lower chain's exceedance probability cannot exceed the true value
    and the upper chain's cannot fall below it.
    """
    if m < 1:
        raise InvalidArgumentError("m must be >= 1")
    if sum_bins < 64:
        raise InvalidArgumentError("sum_bins must be >= 64")
    u_lo, u_hi = model.score_bounds
    if delta >= u_hi:
        return 0.0, 0.0
    model.space.check(x0, "start")
    span = u_hi - u_lo
    per_unit = int(np.ceil(sum_bins / (m * span)))
    w = 1.0 / per_unit
    edges = model.space.grid(state_bins + 1)
    results = []
    for side in ("lower", "upper"):
        reps = edges[:-1] if side == "lower" else edges[1:]
        u = model.score(reps) / w
        d = np.floor(u + 1e-12) if side == "lower" else np.ceil(u - 1e-12)
        d = d.astype(np.int64)
        T = np.diff(model.transition_cdf(reps[:, None], edges[None, :]), axis=1)
        first = np.diff(model.transition_cdf(np.array([x0])[:, None], edges[None, :]), axis=1)[0]
        off = int(np.ceil(-m * u_lo * per_unit)) + 2
        width = off + int(np.ceil(m * u_hi * per_unit)) + 3
        P = np.zeros((state_bins, width))
        rows = np.arange(state_bins)
        P[rows, off + d] = first
        for _ in range(m - 1):
            tmp = T.T @ P
            P = np.zeros_like(tmp)
            cols = np.arange(width)[None, :] + d[:, None]
            keep = (cols >= 0) & (cols < width)
            P[np.broadcast_to(rows[:, None], cols.shape)[keep], cols[keep]] = tmp[keep]
        thresh = m * delta * per_unit
        if abs(thresh - round(thresh)) < 1e-9:
            thresh = round(thresh)
        results.append(float(P[:, (np.arange(width) - off) > thresh].sum()))
    lo, hi = results
    return min(lo, hi), max(lo, hi)


def write_oracle_csv(op: GridOperator, eig: GridEigenSystem, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    dens = eig.eta_star / (op.quad_weights * op.model.space.length)
    with open(os.path.join(out_dir, "oracle_eigen.csv"), "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["x", "h_star", "eta_star_density"])
        for a, b, c in zip(op.nodes, eig.h_star, dens):
            wr.writerow([repr(float(a)), repr(float(b)), repr(float(c))])


def write_met_csv(profile, bound, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "met_profile.csv"), "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["n", "d_n", "bound"])
        for k, (a, b) in enumerate(zip(profile, bound), start=1):
            wr.writerow([k, repr(float(a)), "" if b is None else repr(float(b))])

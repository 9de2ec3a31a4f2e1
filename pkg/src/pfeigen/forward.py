"""Forward interacting particle system: selection by ``G``, mutation by ``M``."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import (DegenerateWeightsError, InvalidArgumentError,
                     InvariantError, UnsupportedDiagnosticError)
from .kernel import (FORWARD, INITIAL, Dirac, DominatedKernelModel,
                     EmpiricalMeasure, InitialLaw, Uniform, categorical_sample,
                     log_sum_exp, make_stream, normalize_log_weights)


@dataclass(frozen=True)
class ForwardTrajectory:
    """Particle clouds ``zeta_p`` for ``p = 0..2n`` and cached statistics.

    Attributes
    ----------
    states : ndarray, shape (2n+1, N)
        Row ``p`` holds the particles at time ``p``.
    log_lambda : ndarray, shape (2n+1,)
        ``log((1/N) sum_i G(zeta_p^i))``.
    log_backward_denominators : ndarray, shape (2n, N) or None
        Row ``p - 1`` holds ``log sum_i q(zeta_{p-1}^i, zeta_p^j)`` for ``j = 1..N``.
    """

    model: DominatedKernelModel
    states: np.ndarray = field(repr=False)
    log_lambda: np.ndarray = field(repr=False)
    log_backward_denominators: Optional[np.ndarray] = field(repr=False)
    seed: int
    replicate: int = 0

    @property
    def N(self) -> int:
        return self.states.shape[1]

    @property
    def horizon(self) -> int:
        return self.states.shape[0] - 1

    @property
    def n(self) -> int:
        return self.horizon // 2

    @property
    def ensembles(self) -> Tuple[EmpiricalMeasure, ...]:
        return tuple(EmpiricalMeasure(row) for row in self.states)

    def layer(self, p: int) -> np.ndarray:
        return self.states[p]

    def denominators(self, p: int) -> np.ndarray:
        """``log sum_i q(zeta_{p-1}^i, zeta_p^j)`` as a length-N array, ``p >= 1``."""
        if not 1 <= p <= self.horizon:
            raise InvalidArgumentError(f"denominators exist for p in 1..{self.horizon}")
        if self.log_backward_denominators is None:
            return column_log_sums(self.model, self.states[p - 1], self.states[p])
        return self.log_backward_denominators[p - 1]


def column_log_sums(model: DominatedKernelModel, prev: np.ndarray, cur: np.ndarray) -> np.ndarray:
    """``log sum_i q(prev_i, cur_j)`` for each ``j``."""
    lq = model.log_density_q(prev[:, None], cur[None, :])
    return log_sum_exp(lq, axis=0)


def selection_probabilities(model: DominatedKernelModel, points: np.ndarray) -> np.ndarray:
    try:
        return normalize_log_weights(model.log_potential(points))
    except DegenerateWeightsError as exc:
        raise InvariantError("selection weights vanished although G > 0") from exc


def forward_step(model: DominatedKernelModel, points: np.ndarray,
                 rng: np.random.Generator, size: Optional[int] = None) -> np.ndarray:
    """``size`` iid draws (default ``len(points)``) from
    ``Phi(eta) = sum_j G(x_j) M(x_j, .) / sum_j G(x_j)`` for the cloud ``points``."""
    points = np.asarray(points, float)
    probs = selection_probabilities(model, points)
    ancestors = categorical_sample(probs, rng, size=points.size if size is None else size)
    return model.mutate(points[ancestors], rng)


def _initial_points(model, initial: InitialLaw, N: int, seed: int, replicate: int):
    if not isinstance(initial, (Dirac, Uniform)):
        raise InvalidArgumentError("initial law must be Dirac(x0) or Uniform()")
    rng = make_stream(seed, INITIAL, replicate)
    return initial.sample(model.space, N, rng)


def run_forward(model: DominatedKernelModel, N: int, two_n: int,
                initial: InitialLaw, seed: int, replicate: int = 0,
                store_denominators: bool = True) -> ForwardTrajectory:
    """Run the forward particle system for ``two_n`` steps.

    Each step draws ancestors multinomially with probabilities proportional
    to ``G`` and moves them through ``model.mutate``.  Randomness for step
    ``p`` comes from the stream ``(seed, FORWARD, replicate, p)``.

    Parameters
    ----------
    store_denominators : bool
        Cache the ``O(N^2)`` per-step column sums needed by the backward
        pass.  Eigenvalue-only runs can skip them.
    """
    if int(N) != N or N < 1:
        raise InvalidArgumentError("N must be a positive integer")
    if int(two_n) != two_n or two_n < 2 or two_n % 2:
        raise InvalidArgumentError("two_n must be an even integer >= 2")
    N, two_n = int(N), int(two_n)
    states = np.empty((two_n + 1, N))
    log_lambda = np.empty(two_n + 1)
    dens = np.empty((two_n, N)) if store_denominators else None

    states[0] = _initial_points(model, initial, N, seed, replicate)
    for p in range(two_n + 1):
        log_g = model.log_potential(states[p])
        if not np.all(np.isfinite(log_g)):
            raise InvariantError(f"non-finite potential at step {p}")
        log_lambda[p] = log_sum_exp(log_g) - np.log(N)
        if p == two_n:
            break
        rng = make_stream(seed, FORWARD, replicate, p + 1)
        probs = normalize_log_weights(log_g)
        ancestors = categorical_sample(probs, rng, size=N)
        states[p + 1] = model.mutate(states[p][ancestors], rng)
        if dens is not None:
            dens[p] = column_log_sums(model, states[p], states[p + 1])

    for arr in (states, log_lambda, dens):
        if arr is not None:
            arr.setflags(write=False)
    return ForwardTrajectory(model, states, log_lambda, dens, int(seed), int(replicate))


def log_lambda_average(traj: ForwardTrajectory, n: int) -> float:
    """``(1/n) sum_{p<n} log lambda_p^N``."""
    if not 1 <= n <= traj.horizon:
        raise InvalidArgumentError(f"n must lie in 1..{traj.horizon}")
    return float(np.mean(traj.log_lambda[:n]))


@dataclass(frozen=True)
class RatioReport:
    h_min: float
    h_max: float
    lower_bound: float
    upper_bound: float
    probes: int

    @property
    def passed(self) -> bool:
        return self.lower_bound <= self.h_min and self.h_max <= self.upper_bound


def pathwise_ratio_diagnostic(traj: ForwardTrajectory, backward, probe_points,
                              layers: Optional[Sequence[int]] = None,
                              rtol: float = 1e-12) -> RatioReport:
    """Check ``eps-/eps+ <= h_{p,2n}^N(x) <= eps+/eps-`` at probe points.

    ``layers`` defaults to every ``p`` in ``n..2n-1``.
    """
    from .backward import eval_h

    model = traj.model
    if model.epsilon_bounds is None:
        raise UnsupportedDiagnosticError(
            f"{model.label} declares no epsilon bounds")
    lo, hi = model.epsilon_bounds
    x = np.atleast_1d(np.asarray(probe_points, float))
    if layers is None:
        layers = range(backward.n, 2 * backward.n)
    vmin, vmax = np.inf, -np.inf
    for p in layers:
        h = eval_h(traj, backward, p, x)
        vmin = min(vmin, float(h.min()))
        vmax = max(vmax, float(h.max()))
    r = hi / lo
    return RatioReport(vmin, vmax, (1 - rtol) / r, (1 + rtol) * r, x.size)


def write_trajectory_csv(traj: ForwardTrajectory, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "trajectory.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["p", "i", "state"])
        for p, row in enumerate(traj.states):
            for i, s in enumerate(row):
                w.writerow([p, i, repr(float(s))])
    write_lambda_csv(traj, out_dir)


def write_lambda_csv(traj: ForwardTrajectory, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "lambda.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["p", "log_lambda"])
        for p, v in enumerate(traj.log_lambda):
            w.writerow([p, repr(float(v))])

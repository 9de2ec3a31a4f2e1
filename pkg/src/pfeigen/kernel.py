"""Dominated kernels, empirical measures and log-domain weight arithmetic.

A model describes a non-negative kernel ``Q(x, dy) = G(x) M(x, dy)`` on a
closed interval together with the density ``q(x, y) = dQ(x, .)/dnu (y)``
with respect to the uniform probability measure ``nu`` on that interval.
Everything is carried in log domain.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .errors import DegenerateWeightsError, InvalidArgumentError

# stream purposes; part of the counter key so independent uses never overlap
FORWARD = 1
TWISTED = 2
REPLICATE = 3
NAIVE = 4
EXACT_TWISTED = 5
INITIAL = 6


def make_stream(seed: int, *key: int) -> np.random.Generator:
    """Counter-based generator keyed by ``(seed, *key)``.

    Any two distinct keys give statistically independent streams, and the
    draws for a given key do not depend on what else has been drawn, so
    results are reproducible regardless of scheduling.
    """
    if seed < 0 or any(k < 0 for k in key):
        raise InvalidArgumentError("seed and stream key must be non-negative")
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class StateSpace:
    lower: float
    upper: float

    def __post_init__(self):
        if not (np.isfinite(self.lower) and np.isfinite(self.upper)):
            raise InvalidArgumentError("state space bounds must be finite")
        if not self.lower < self.upper:
            raise InvalidArgumentError("need lower < upper")

    @property
    def length(self) -> float:
        return self.upper - self.lower

    def contains(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all((x >= self.lower) & (x <= self.upper)))

    def check(self, x, what="state"):
        if not self.contains(x):
            raise InvalidArgumentError(
                f"{what} outside [{self.lower}, {self.upper}]")

    def grid(self, size: int) -> np.ndarray:
        return np.linspace(self.lower, self.upper, size)


class DominatedKernelModel:
    """Base class for kernels ``Q = G M`` satisfying a domination condition.

    Subclasses provide vectorized ``log_potential`` (log G), ``log_density_m``
    (log of the density of ``M(x, .)`` w.r.t. ``nu``) and ``mutate`` (a draw
    from ``M(x, .)`` for each entry of ``x``).  ``transition_cdf`` is optional
    and enables exact cell discretization and distribution tests.

    Attributes
    ----------
    space : StateSpace
    epsilon_bounds : tuple of float or None
        ``(eps_minus, eps_plus)`` with ``eps_minus <= q <= eps_plus``.
    label : str
    """

    space: StateSpace
    epsilon_bounds: Optional[Tuple[float, float]] = None
    label: str = "model"

    def log_potential(self, x):
        raise NotImplementedError

    def log_density_m(self, x, y):
        raise NotImplementedError

    def mutate(self, x, rng: np.random.Generator):
        raise NotImplementedError

    def transition_cdf(self, x, y):
        """``M(x, [lower, y])``; broadcasting over ``x`` and ``y``."""
        raise NotImplementedError

    @property
    def has_cdf(self) -> bool:
        try:
            self.transition_cdf(np.array([self.space.lower]),
                                np.array([self.space.upper]))
        except NotImplementedError:
            return False
        return True

    def log_density_q(self, x, y):
        x = np.asarray(x, dtype=float)
        return self.log_potential(x) + self.log_density_m(x, y)

    def potential(self, x):
        return np.exp(self.log_potential(x))

    @property
    def rho(self) -> Optional[float]:
        """Mixing rate ``1 - eps_minus / eps_plus`` when bounds are declared."""
        if self.epsilon_bounds is None:
            return None
        lo, hi = self.epsilon_bounds
        return 1.0 - lo / hi


def check_epsilon_bounds(model: DominatedKernelModel, probes: int = 64,
                         rtol: float = 1e-9) -> bool:
    """Verify ``eps_minus <= q <= eps_plus`` on a ``probes x probes`` grid."""
    if model.epsilon_bounds is None:
        raise InvalidArgumentError(f"{model.label} declares no epsilon bounds")
    lo, hi = model.epsilon_bounds
    g = model.space.grid(probes)
    q = np.exp(model.log_density_q(g[:, None], g[None, :]))
    return bool(q.min() >= lo * (1 - rtol) and q.max() <= hi * (1 + rtol))


@dataclass(frozen=True)
class EmpiricalMeasure:
    """Uniformly weighted atoms ``(1/N) sum_i delta_{points[i]}``."""

    points: np.ndarray = field(repr=False)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1)
        if pts.size < 1:
            raise InvalidArgumentError("an empirical measure needs N >= 1")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def N(self) -> int:
        return self.points.size

    def integrate(self, f) -> float:
        return float(np.mean(f(self.points)))


@dataclass(frozen=True)
class Dirac:
    x0: float

    def sample(self, space: StateSpace, n: int, rng) -> np.ndarray:
        space.check(self.x0, "dirac location")
        return np.full(n, float(self.x0))


@dataclass(frozen=True)
class Uniform:
    def sample(self, space: StateSpace, n: int, rng) -> np.ndarray:
        return space.lower + space.length * rng.random(n)


InitialLaw = Union[Dirac, Uniform]


def log_sum_exp(values, axis=None):
    """Stable ``log sum exp`` with max-shift.

    Raises on an empty input, and on inputs whose entries are all ``-inf``
    (along the reduced axis).
    """
    a = np.asarray(values, dtype=float)
    if a.size == 0:
        raise InvalidArgumentError("log_sum_exp of an empty list")
    m = np.max(a, axis=axis, keepdims=True)
    # nan and +inf both propagate into the max, so checking it suffices
    if not np.isfinite(m).all():
        if np.isnan(m).any() or np.isposinf(m).any():
            raise InvalidArgumentError("log weights must be finite or -inf")
        raise DegenerateWeightsError("all log weights are -inf")
    out = m + np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True))
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


@dataclass(frozen=True)
class LogWeightVector:
    log_values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "log_values",
                           np.asarray(self.log_values, dtype=float).reshape(-1))

    def normalize(self) -> np.ndarray:
        return normalize_log_weights(self)


def normalize_log_weights(w) -> np.ndarray:
    """Probabilities ``exp(w_i - logsumexp(w))``; ``w`` may be 2-D (per row)."""
    lv = w.log_values if isinstance(w, LogWeightVector) else np.asarray(w, float)
    axis = None if lv.ndim == 1 else -1
    lse = log_sum_exp(lv, axis=axis)
    if axis is not None:
        lse = np.expand_dims(lse, -1)
    p = np.exp(lv - lse)
    return p / p.sum(axis=axis, keepdims=axis is not None)


def categorical_sample(probs, rng: np.random.Generator, size=None):
    """Inverse-CDF categorical draws.

    ``probs`` 1-D: returns one index (``size=None``) or an array of ``size``
    indices.  ``probs`` 2-D: returns one index per row.
    """
    p = np.asarray(probs, dtype=float)
    if np.any(p < 0):
        raise InvalidArgumentError("negative probability")
    if p.ndim == 1:
        total = p.sum()
        if abs(total - 1.0) > 1e-9:
            raise InvalidArgumentError(f"probabilities sum to {total}, not 1")
        cum = np.cumsum(p)
        u = rng.random(size) * cum[-1]
        idx = np.searchsorted(cum, u, side="right")
        idx = np.minimum(idx, p.size - 1)
        return int(idx) if size is None else idx
    if p.ndim == 2:
        total = p.sum(axis=1)
        if np.any(np.abs(total - 1.0) > 1e-9):
            raise InvalidArgumentError("each row must sum to 1")
        cum = np.cumsum(p, axis=1)
        u = rng.random(p.shape[0]) * cum[:, -1]
        idx = np.sum(cum <= u[:, None], axis=1)
        return np.minimum(idx, p.shape[1] - 1)
    raise InvalidArgumentError("probs must be 1-D or 2-D")


def as_points(x: Sequence[float] | float) -> np.ndarray:
    return np.atleast_1d(np.asarray(x, dtype=float))

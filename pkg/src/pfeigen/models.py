"""Concrete kernels: neutron transport, truncated CIR with a well-shaped cost,
and a truncated-Gaussian chain with exponential tilting.

Every model uses ``nu`` = uniform probability on its interval, so a density
w.r.t. ``nu`` is the Lebesgue density times the interval length.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Tuple

import numpy as np
from scipy import optimize, special, stats

from .errors import InvalidArgumentError, ModelEvaluationError
from .kernel import DominatedKernelModel, StateSpace

LOG_SQRT_2PI = 0.5 * np.log(2 * np.pi)


def _extremes(f: Callable, a: float, b: float, kinks=(), grid: int = 4097
              ) -> Tuple[float, float]:
    """Min and max of a piecewise-smooth scalar function on ``[a, b]``.

    Dense evaluation followed by bounded refinement around the best grid
    points; ``kinks`` are always evaluated.
    """
    xs = np.union1d(np.linspace(a, b, grid),
                    [k for k in kinks if a <= k <= b])
    fx = f(xs)
    out = []
    for sign in (1.0, -1.0):
        i = int(np.argmin(sign * fx))
        best = sign * fx[i]
        lo, hi = xs[max(i - 1, 0)], xs[min(i + 1, xs.size - 1)]
        if hi > lo:
            r = optimize.minimize_scalar(
                lambda t: sign * float(f(np.array([t]))[0]),
                bounds=(lo, hi), method="bounded",
                options={"xatol": 1e-12})
            best = min(best, r.fun)
        out.append(sign * best)
    return out[0], out[1]


def _log_diff_ndtr(a, b):
    """``log(Phi(b) - Phi(a))`` for ``a < b``, accurate in both tails."""
    a, b = np.broadcast_arrays(np.asarray(a, float), np.asarray(b, float))
    # reflect so the difference is taken in the lower tail
    flip = a > 0
    lo = np.where(flip, -b, a)
    hi = np.where(flip, -a, b)
    lb = special.log_ndtr(hi)
    la = special.log_ndtr(lo)
    return lb + np.log1p(-np.exp(la - lb))


# ---------------------------------------------------------------------------
# neutron transport


def neutron_absorption(x, delta: float):
    """Double-well absorption potential ``U_delta`` (polynomial in 2x/3 - 1/2)."""
    s = 2.0 * np.asarray(x, float) / 3.0 - 0.5
    return delta * (1e-3 * s**6 - 300.0 * s**4 + 24.0 * s**2 + 28.0 / 5.0 * s)


@dataclass(frozen=True)
class NeutronModel(DominatedKernelModel):
    """One-dimensional neutron transport on ``[0, L]``.

    ``G(x) = exp(-U_delta(x)) (1 - (e^{-cx} + e^{-c(L-x)})/2)`` and ``M(x, .)``
    is a two-sided exponential jump of rate ``c`` conditioned to stay in
    ``[0, L]``.  Their product is ``Q(x, dy) = (c/2) e^{-U(x)} e^{-c|y-x|} dy``.
    """

    L: float
    c: float
    delta: float = 0.0
    space: StateSpace = field(init=False)
    epsilon_bounds: Tuple[float, float] = field(init=False)
    label: str = field(init=False)

    def __post_init__(self):
        if not (self.L > 0 and self.c > 0):
            raise InvalidArgumentError("neutron model needs L > 0 and c > 0")
        if self.delta < 0:
            raise InvalidArgumentError("delta must be >= 0")
        object.__setattr__(self, "space", StateSpace(0.0, float(self.L)))
        object.__setattr__(self, "label", f"neutron(L={self.L:g},c={self.c:g},delta={self.delta:g})")
        object.__setattr__(self, "epsilon_bounds", self._bounds())

    def _mass(self, x):
        # c * integral of e^{-c|y-x|} over [0, L]
        return 2.0 - np.exp(-self.c * x) - np.exp(-self.c * (self.L - x))

    def absorption(self, x):
        return neutron_absorption(x, self.delta)

    def log_potential(self, x):
        x = np.asarray(x, float)
        return -self.absorption(x) + np.log(0.5 * self._mass(x))

    def log_density_m(self, x, y):
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        return (np.log(self.L * self.c) - np.log(self._mass(x))
                - self.c * np.abs(y - x))

    def log_density_q(self, x, y):
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        return (np.log(0.5 * self.L * self.c) - self.absorption(x)
                - self.c * np.abs(y - x))

    def _bounds(self):
        L, c = self.L, self.c
        if self.delta == 0:
            return 0.5 * L * c * np.exp(-c * L), 0.5 * L * c
        # q = (Lc/2) e^{-U(x)} e^{-c|y-x|}; extremes in y are y=x and the far end
        lo, _ = _extremes(lambda x: -self.absorption(x) - c * np.maximum(x, L - x),
                          0.0, L, kinks=(L / 2,))
        _, hi = _extremes(lambda x: -self.absorption(x), 0.0, L)
        with np.errstate(over="ignore"):
            bounds = 0.5 * L * c * np.exp(lo), 0.5 * L * c * np.exp(hi)
        if not (np.isfinite(bounds[1]) and bounds[0] > 0):
            raise InvalidArgumentError(
                f"kernel bounds are not representable for L={L}, delta={self.delta}")
        return bounds

    def transition_cdf(self, x, y):
        x = np.asarray(x, float)
        y = np.clip(np.asarray(y, float), 0.0, self.L)
        c = self.c
        left = 1.0 - np.exp(-c * x)
        right = 1.0 - np.exp(-c * (self.L - x))
        below = np.exp(-c * np.abs(x - y)) - np.exp(-c * x)
        above = left + 1.0 - np.exp(-c * np.abs(y - x))
        return np.where(y < x, below, above) / (left + right)

    def mutate(self, x, rng):
        x = np.asarray(x, float)
        c = self.c
        left = 1.0 - np.exp(-c * x)
        right = -np.expm1(-c * (self.L - x))
        t = rng.random(x.shape) * (left + right)
        go_left = t < left
        with np.errstate(divide="ignore", invalid="ignore"):
            y_left = x + np.log(t + np.exp(-c * x)) / c
            y_right = x - np.log1p(-(t - left)) / c
        y = np.where(go_left, y_left, y_right)
        return np.clip(y, 0.0, self.L)


def neutron_model(L: float = np.pi / 2, c: float = 1.0, delta: float = 0.0) -> NeutronModel:
    return NeutronModel(L, c, delta)


# ---------------------------------------------------------------------------
# Cox-Ingersoll-Ross transition with well-shaped cost


def ncx2_logpdf(z, df: float, nc):
    """Log density of the noncentral chi-square law.

    Uses the exponentially scaled Bessel function; ``nc == 0`` falls back to
    the central law.  At ``z == 0`` the value is the right limit (``+inf``
    when ``df < 2``).
    """
    z, nc = np.broadcast_arrays(np.asarray(z, float), np.asarray(nc, float))
    v = df / 2.0 - 1.0
    out = np.empty(z.shape)
    central = nc <= 0
    with np.errstate(divide="ignore", invalid="ignore"):
        zc = z[central]
        out[central] = (v * np.log(zc) - zc / 2.0 - (df / 2.0) * np.log(2.0)
                        - special.gammaln(df / 2.0))
        zn, ncn = z[~central], nc[~central]
        s = np.sqrt(ncn * zn)
        ive = special.ive(v, s)
        out[~central] = (-np.log(2.0) - (zn + ncn) / 2.0
                         + 0.5 * v * (np.log(zn) - np.log(ncn))
                         + np.log(ive) + s)
        # z == 0 with nc > 0: right limit of the density
        zero = ~central & (z == 0)
    if np.any(zero):
        if v < 0:
            out[zero] = np.inf
        elif v == 0:
            out[zero] = -np.log(2.0) - nc[zero] / 2.0
        else:
            out[zero] = -np.inf
    bad = np.isnan(out) | (np.isposinf(out) & (z > 0))
    if np.any(bad):
        i = np.flatnonzero(bad.ravel())[0]
        raise ModelEvaluationError(
            f"noncentral chi-square density failed at z={z.ravel()[i]!r}, "
            f"nc={nc.ravel()[i]!r}, df={df!r}")
    return out


@dataclass(frozen=True)
class CIRBellmanModel(DominatedKernelModel):
    """CIR transition over one time step, truncated to ``[0, x_max]``.

    ``M(x, dy)`` is the exact CIR transition law (scaled noncentral
    chi-square) restricted to ``[0, x_max]`` and renormalized per source.
    ``G = exp(-U)`` with ``U = 2 * 1[0 <= x <= 10 - delta] + 1[x >= 10 + delta]``.
    No epsilon bounds are declared: the truncated kernel satisfies the
    domination condition only with an astronomically small lower constant.
    """

    theta: float = 2.0
    mu_rev: float = 10.0
    sigma: float = 20.0
    dt: float = 0.01
    x_max: float = 500.0
    delta: float = 5.0
    centre: float = 10.0
    max_tries: int = 10**6
    space: StateSpace = field(init=False)
    label: str = field(init=False)
    epsilon_bounds: Optional[Tuple[float, float]] = field(init=False, default=None)

    def __post_init__(self):
        for name in ("theta", "mu_rev", "sigma", "dt", "x_max", "delta"):
            if not getattr(self, name) > 0:
                raise InvalidArgumentError(f"CIR model needs {name} > 0")
        object.__setattr__(self, "space", StateSpace(0.0, float(self.x_max)))
        object.__setattr__(self, "label", f"cir(delta={self.delta:g})")

    @property
    def scale(self) -> float:
        """``2 c~`` with ``2 c~ X_{t+dt}`` noncentral chi-square."""
        return 4.0 * self.theta / (self.sigma**2 * -np.expm1(-self.theta * self.dt))

    @property
    def df(self) -> float:
        return 4.0 * self.theta * self.mu_rev / self.sigma**2

    def noncentrality(self, x):
        return self.scale * np.exp(-self.theta * self.dt) * np.asarray(x, float)

    def cost(self, x):
        x = np.asarray(x, float)
        lo, hi = self.centre - self.delta, self.centre + self.delta
        return 2.0 * ((x >= 0) & (x <= lo)) + 1.0 * (x >= hi)

    def log_potential(self, x):
        return -self.cost(x)

    def log_mass(self, x):
        """Log of the untruncated transition mass inside ``[0, x_max]``."""
        nc = self.noncentrality(x)
        tail = stats.ncx2.sf(self.scale * self.x_max, self.df, nc)
        return np.log1p(-tail)

    def log_density_m(self, x, y):
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        k = self.scale
        lp = np.log(k) + ncx2_logpdf(k * y, self.df, self.noncentrality(x))
        return lp - self.log_mass(x) + np.log(self.x_max)

    def transition_cdf(self, x, y):
        x = np.asarray(x, float)
        y = np.clip(np.asarray(y, float), 0.0, self.x_max)
        F = stats.ncx2.cdf(self.scale * y, self.df, self.noncentrality(x))
        return F / np.exp(self.log_mass(x))

    def mutate(self, x, rng):
        x = np.asarray(x, float)
        out = np.empty_like(x)
        todo = np.arange(x.size)
        flat = x.reshape(-1)
        res = out.reshape(-1)
        tries = 0
        while todo.size:
            tries += todo.size
            if tries > self.max_tries:
                raise ModelEvaluationError("CIR rejection sampler exceeded retry cap")
            draw = rng.noncentral_chisquare(self.df, self.noncentrality(flat[todo])) / self.scale
            ok = (draw > 0) & (draw <= self.x_max)
            res[todo[ok]] = draw[ok]
            todo = todo[~ok]
        return out


def cir_bellman_model(theta=2.0, mu_rev=10.0, sigma=20.0, dt=0.01, x_max=500.0,
                      delta=5.0) -> CIRBellmanModel:
    return CIRBellmanModel(theta, mu_rev, sigma, dt, x_max, delta)


# ---------------------------------------------------------------------------
# truncated Gaussian chain for rare events


def clamp_score(x):
    return np.clip(np.asarray(x, float), -1.0, 1.0)


@dataclass(frozen=True)
class RareEventModel(DominatedKernelModel):
    """Gaussian AR step ``N(x/2, 1)`` restricted to ``[-c, c]``, tilted by
    ``G_alpha = exp(alpha * U)`` with ``U`` the clamp of ``x`` to ``[-1, 1]``."""

    c: float
    alpha: float = 0.0
    space: StateSpace = field(init=False)
    epsilon_bounds: Tuple[float, float] = field(init=False)
    label: str = field(init=False)

    def __post_init__(self):
        if not self.c > 0:
            raise InvalidArgumentError("rare-event model needs c > 0")
        object.__setattr__(self, "space", StateSpace(-float(self.c), float(self.c)))
        object.__setattr__(self, "label", f"rare(c={self.c:g},alpha={self.alpha:g})")
        object.__setattr__(self, "epsilon_bounds", self._bounds())

    def with_alpha(self, alpha: float) -> "RareEventModel":
        return RareEventModel(self.c, alpha)

    def score(self, x):
        return clamp_score(x)

    score_bounds = (-1.0, 1.0)

    def log_potential(self, x):
        return self.alpha * clamp_score(x)

    def log_norm(self, x):
        x = np.asarray(x, float)
        return _log_diff_ndtr(-self.c - x / 2.0, self.c - x / 2.0)

    def log_density_m(self, x, y):
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        return (np.log(2.0 * self.c) - LOG_SQRT_2PI - 0.5 * (y - x / 2.0) ** 2
                - self.log_norm(x))

    def _bounds(self):
        c = self.c
        # for fixed x the density in y peaks at y = x/2 and is least at the far end
        hi_fn = lambda x: self.log_potential(x) - self.log_norm(x)
        lo_fn = lambda x: (self.log_potential(x) - self.log_norm(x)
                           - 0.5 * (c + np.abs(x) / 2.0) ** 2)
        lo, _ = _extremes(lo_fn, -c, c, kinks=(-1.0, 0.0, 1.0))
        _, hi = _extremes(hi_fn, -c, c, kinks=(-1.0, 0.0, 1.0))
        base = np.log(2.0 * c) - LOG_SQRT_2PI
        return float(np.exp(base + lo)), float(np.exp(base + hi))

    def transition_cdf(self, x, y):
        x = np.asarray(x, float)
        y = np.clip(np.asarray(y, float), -self.c, self.c)
        m = x / 2.0
        a = special.ndtr(-self.c - m)
        return (special.ndtr(y - m) - a) / (special.ndtr(self.c - m) - a)

    def mutate(self, x, rng):
        x = np.asarray(x, float)
        m = x / 2.0
        a = special.ndtr(-self.c - m)
        b = special.ndtr(self.c - m)
        u = rng.random(x.shape)
        y = m + special.ndtri(a + u * (b - a))
        return np.clip(y, -self.c, self.c)


def rare_event_model(c: float = 2.0, alpha: float = 0.0) -> RareEventModel:
    return RareEventModel(c, alpha)


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConstantPotentialModel(DominatedKernelModel):
    """``G == level`` with the Markov part borrowed from another model."""

    base: DominatedKernelModel
    level: float = 1.0
    space: StateSpace = field(init=False)
    epsilon_bounds: Optional[Tuple[float, float]] = field(init=False)
    label: str = field(init=False)

    def __post_init__(self):
        if not self.level > 0:
            raise InvalidArgumentError("constant potential must be positive")
        object.__setattr__(self, "space", self.base.space)
        object.__setattr__(self, "label", f"const({self.level:g})*{self.base.label}")
        eb = None
        if self.base.epsilon_bounds is not None:
            lo, hi = self.base.epsilon_bounds
            # m = q / G_base, so extremes of G_base convert q-bounds to m-bounds
            g = self.base.potential(self.base.space.grid(4097))
            eb = (self.level * lo / g.max(), self.level * hi / g.min())
        object.__setattr__(self, "epsilon_bounds", eb)

    def log_potential(self, x):
        return np.full(np.shape(x), np.log(self.level))

    def log_density_m(self, x, y):
        return self.base.log_density_m(x, y)

    def transition_cdf(self, x, y):
        return self.base.transition_cdf(x, y)

    def mutate(self, x, rng):
        return self.base.mutate(x, rng)

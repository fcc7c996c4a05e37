"""Piecewise-constant hazard arithmetic and the three-state marginal survival function.

A trial state space has three transitions: entry -> event (hazard ``lam1``),
entry -> crossover (``lam3``), and crossover -> event (``lam2``, possibly
depending on the crossover time).  Every hazard is piecewise constant on a
shared grid of cut points; the last piece extends to +infinity.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

__all__ = [
    "HazardError",
    "PiecewiseHazard",
    "MarkovCrossover",
    "SemiMarkovCrossover",
    "GeneralCrossover",
    "CrossoverKind",
    "marginal_survival",
    "marginal_density_and_hazard",
]


class HazardError(ValueError):
    """Raised for invalid hazard definitions or unattainable inversions."""


@dataclass(frozen=True)
class PiecewiseHazard:
    """Step-function hazard rate.

    ``cuts[j]`` is the left endpoint of piece ``j``; piece ``j`` spans
    ``(cuts[j], cuts[j+1]]`` and the final piece extends to +infinity at
    ``rates[-1]``.  ``cuts[0]`` must be 0 and cuts strictly increase.
    """

    cuts: tuple
    rates: tuple

    def __init__(self, cuts, rates):
        cuts = tuple(float(c) for c in np.asarray(cuts, dtype=float).ravel())
        rates = tuple(float(r) for r in np.asarray(rates, dtype=float).ravel())
        if len(cuts) != len(rates) or not cuts:
            raise HazardError("cuts and rates must have equal, positive length")
        if cuts[0] != 0.0:
            raise HazardError("cuts[0] must be 0")
        if any(b <= a for a, b in zip(cuts, cuts[1:])):
            raise HazardError("cuts must be strictly increasing")
        if any(not np.isfinite(r) or r < 0 for r in rates):
            raise HazardError("rates must be finite and >= 0")
        if any(not np.isfinite(c) for c in cuts):
            raise HazardError("cuts must be finite")
        object.__setattr__(self, "cuts", cuts)
        object.__setattr__(self, "rates", rates)
        c = np.asarray(cuts)
        r = np.asarray(rates)
        cum = np.concatenate(([0.0], np.cumsum(r[:-1] * np.diff(c))))
        object.__setattr__(self, "_cuts_arr", c)
        object.__setattr__(self, "_rates_arr", r)
        object.__setattr__(self, "_cum_at_cuts", cum)

    # -- basic queries -------------------------------------------------

    @property
    def total_cumulative_hazard(self) -> float:
        """Cumulative hazard at +infinity (inf when the last rate is > 0)."""
        if self.rates[-1] > 0.0:
            return np.inf
        return float(self._cum_at_cuts[-1])

    def rate_at(self, t):
        """Hazard rate at time ``t`` (rates apply on left-open pieces)."""
        t = np.asarray(t, dtype=float)
        idx = np.clip(np.searchsorted(self._cuts_arr, t, side="left") - 1, 0, len(self.rates) - 1)
        out = self._rates_arr[idx]
        return out if out.ndim else float(out)

    def cumulative_hazard(self, t):
        """Piecewise-linear cumulative hazard; ``t`` may be scalar or array."""
        t = np.asarray(t, dtype=float)
        if np.any(t < 0):
            raise HazardError("time must be >= 0")
        idx = np.clip(np.searchsorted(self._cuts_arr, t, side="right") - 1, 0, None)
        out = self._cum_at_cuts[idx] + self._rates_arr[idx] * (t - self._cuts_arr[idx])
        out = np.where(np.isinf(t) & (self._rates_arr[idx] == 0.0), self._cum_at_cuts[idx], out)
        return out if out.ndim else float(out)

    def survival(self, t):
        """exp(-cumulative hazard)."""
        return np.exp(-self.cumulative_hazard(np.asarray(t, dtype=float)))

    # -- inversion -----------------------------------------------------

    def inverse_cumulative_hazard(self, h, allow_inf: bool = False):
        """Smallest ``t`` with cumulative hazard >= ``h``.

        ``h`` beyond the total mass raises unless ``allow_inf`` (then +inf),
        which is what rejection-free random draws need.
        """
        h = np.asarray(h, dtype=float)
        if np.any(h < 0):
            raise HazardError("cumulative hazard must be >= 0")
        c, r, cum = self._cuts_arr, self._rates_arr, self._cum_at_cuts
        end = np.append(cum[1:], np.inf if r[-1] > 0 else cum[-1])
        beyond = h > end[-1]
        if np.any(beyond) and not allow_inf:
            raise HazardError("mass beyond horizon: hazard never accumulates that far")
        idx = np.clip(np.searchsorted(end, h, side="left"), 0, len(r) - 1)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = c[idx] + np.where(h > cum[idx], (h - cum[idx]) / r[idx], 0.0)
        t = np.where(beyond, np.inf, t)
        return t if t.ndim else float(t)

    def inverse_survival(self, p, allow_inf: bool = False):
        """Smallest ``t`` with survival(t) <= ``p``; exact inverse off the flats."""
        p = np.asarray(p, dtype=float)
        if np.any(p <= 0) or np.any(p > 1):
            raise HazardError("survival probability must lie in (0, 1]")
        return self.inverse_cumulative_hazard(-np.log(p), allow_inf=allow_inf)

    # -- construction helpers -------------------------------------------

    def scaled(self, factor: float) -> "PiecewiseHazard":
        """Same cut grid with every rate multiplied by ``factor``."""
        if factor < 0:
            raise HazardError("scale factor must be >= 0")
        return PiecewiseHazard(self.cuts, tuple(r * factor for r in self.rates))

    def to_dict(self) -> dict:
        return {"cuts": list(self.cuts), "rates": list(self.rates)}

    @classmethod
    def from_dict(cls, d: dict) -> "PiecewiseHazard":
        return cls(d["cuts"], d["rates"])


@dataclass(frozen=True)
class MarkovCrossover:
    """Post-crossover hazard indexed by time since entry: lam2(t | u) = hazard(t)."""

    hazard: PiecewiseHazard


@dataclass(frozen=True)
class SemiMarkovCrossover:
    """Post-crossover hazard indexed by time since crossover: lam2(t | u) = hazard(t - u)."""

    hazard: PiecewiseHazard


@dataclass(frozen=True)
class GeneralCrossover:
    """Arbitrary bivariate post-crossover hazard.

    ``conditional(u)`` returns the study-clock hazard applying after a
    crossover at ``u``; it should be piecewise constant on the scenario's
    shared cut grid.
    """

    conditional: Callable[[float], PiecewiseHazard]


CrossoverKind = Union[MarkovCrossover, SemiMarkovCrossover, GeneralCrossover]


def _post_crossover_cumhaz(kind: CrossoverKind, u: float, t) -> np.ndarray:
    """Integral of the post-crossover hazard from ``u`` to ``t`` (t >= u)."""
    t = np.asarray(t, dtype=float)
    if isinstance(kind, MarkovCrossover):
        return kind.hazard.cumulative_hazard(t) - kind.hazard.cumulative_hazard(u)
    if isinstance(kind, SemiMarkovCrossover):
        return kind.hazard.cumulative_hazard(t - u)
    h = kind.conditional(u)
    return h.cumulative_hazard(t) - h.cumulative_hazard(u)


def _adaptive_simpson(f, a: float, b: float, tol: float, max_depth: int = 48) -> float:
    """Adaptive Simpson quadrature with Richardson acceptance on each split."""
    fa, fb = f(a), f(b)
    m = 0.5 * (a + b)
    fm = f(m)
    whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb)

    def recurse(a, fa, m, fm, b, fb, whole, tol, depth):
        lm = 0.5 * (a + m)
        rm = 0.5 * (m + b)
        flm, frm = f(lm), f(rm)
        left = (m - a) / 6.0 * (fa + 4.0 * flm + fm)
        right = (b - m) / 6.0 * (fm + 4.0 * frm + fb)
        if depth >= max_depth or abs(left + right - whole) <= 15.0 * tol:
            return left + right + (left + right - whole) / 15.0
        return recurse(a, fa, lm, flm, m, fm, left, tol / 2.0, depth + 1) + recurse(
            m, fm, rm, frm, b, fb, right, tol / 2.0, depth + 1
        )

    return recurse(a, fa, m, fm, b, fb, whole, tol, 0)


def _integration_knots(t: float, *hazards: PiecewiseHazard, reflected: bool = False) -> np.ndarray:
    knots = {0.0, t}
    for h in hazards:
        for c in h.cuts:
            if 0.0 < c < t:
                knots.add(c)
            if reflected and 0.0 < t - c < t:
                knots.add(t - c)
    return np.array(sorted(knots))


def marginal_survival(
    lam1: PiecewiseHazard,
    lam3: PiecewiseHazard,
    kind: CrossoverKind,
    t,
    tol: float = 1e-10,
):
    """Survival function of the event time marginalized over the crossover path.

    S(t) = S1(t) S3(t) + int_0^t exp{-int_u^t lam2(s|u) ds} lam3(u) S1(u) S3(u) du.
    The inner integral is closed form for piecewise-constant hazards; the outer
    integral uses adaptive Simpson subdivided at every hazard cut point.
    """
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(t_arr < 0):
        raise HazardError("time must be >= 0")
    out = np.empty_like(t_arr)
    for i, ti in enumerate(t_arr):
        out[i] = _marginal_survival_scalar(lam1, lam3, kind, float(ti), tol)
    return out if np.ndim(t) else float(out[0])


def _marginal_survival_scalar(lam1, lam3, kind, t: float, tol: float) -> float:
    direct = lam1.survival(t) * lam3.survival(t)
    if t == 0.0 or all(r == 0.0 for r in lam3.rates):
        return float(direct)

    def integrand(u):
        inner = _post_crossover_cumhaz(kind, u, t)
        return np.exp(-inner) * lam3.rate_at(u) * lam1.survival(u) * lam3.survival(u)

    reflected = isinstance(kind, SemiMarkovCrossover)
    pieces = [lam1, lam3]
    if isinstance(kind, (MarkovCrossover, SemiMarkovCrossover)):
        pieces.append(kind.hazard)
    knots = _integration_knots(t, *pieces, reflected=reflected)
    total = 0.0
    for a, b in zip(knots[:-1], knots[1:]):
        total += _adaptive_simpson(integrand, float(a), float(b), tol * (b - a) / t)
    return float(direct + total)


def marginal_density_and_hazard(
    lam1: PiecewiseHazard,
    lam3: PiecewiseHazard,
    kind: CrossoverKind,
    t: float,
    tol: float = 1e-10,
):
    """(density, hazard) of the marginal event time at ``t``, by central finite
    difference of the survival function (step 1e-5 * max(1, t))."""
    t = float(t)
    if t < 0:
        raise HazardError("time must be >= 0")
    s = _marginal_survival_scalar(lam1, lam3, kind, t, tol)
    if s < 1e-12:
        raise HazardError("survival underflow: marginal survival below 1e-12")
    h = 1e-5 * max(1.0, t)
    lo = max(t - h, 0.0)
    hi = t + h
    s_lo = _marginal_survival_scalar(lam1, lam3, kind, lo, tol)
    s_hi = _marginal_survival_scalar(lam1, lam3, kind, hi, tol)
    density = (s_lo - s_hi) / (hi - lo)
    return density, density / s

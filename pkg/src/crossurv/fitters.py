"""Estimation kernels: Cox partial likelihood, Kaplan-Meier, log-rank,
Weibull AFT, pooled logistic regression, and conjugate gamma posteriors for
piecewise-constant hazards.

Everything here is deterministic given its inputs (the posterior sampler takes
an explicit generator).  The ``*_batched`` kernels vectorize many small fits
of the same shape; they are the hot path of the bootstrap and imputation
loops.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

__all__ = [
    "FitError",
    "SeparationError",
    "SurvDataset",
    "FitResult",
    "cox_fit",
    "cox_binary_batched",
    "cox_binary",
    "KaplanMeier",
    "km_estimate",
    "LogrankResult",
    "logrank",
    "weibull_aft_fit",
    "weibull_aft_batched",
    "pooled_logistic_fit",
    "piecewise_exposures",
    "PosteriorDraws",
    "gamma_posterior_draws",
    "piecewise_cumhaz_rows",
    "piecewise_inv_cumhaz_rows",
]

Z_95 = 1.959963984540054  # two-sided 95% normal quantile


class FitError(RuntimeError):
    """A fit cannot be computed from the given data."""


class SeparationError(FitError):
    """Perfect separation: the likelihood is monotone in a coefficient."""


@dataclass
class SurvDataset:
    """Counting-process rows (start, stop], event flag, covariates, weight."""

    start: np.ndarray
    stop: np.ndarray
    event: np.ndarray
    covariates: np.ndarray
    weight: np.ndarray

    def __post_init__(self):
        self.start = np.asarray(self.start, dtype=float)
        self.stop = np.asarray(self.stop, dtype=float)
        self.event = np.asarray(self.event, dtype=bool)
        x = np.asarray(self.covariates, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        self.covariates = x
        self.weight = np.asarray(self.weight, dtype=float)
        n = self.stop.shape[0]
        if not (self.start.shape == (n,) and self.event.shape == (n,) and self.weight.shape == (n,)):
            raise FitError("inconsistent row counts")
        if x.shape[0] != n:
            raise FitError("covariate rows do not match")
        if np.any(self.start >= self.stop):
            raise FitError("need start < stop on every row")
        if np.any(~np.isfinite(self.weight)) or np.any(self.weight <= 0):
            raise FitError("weights must be finite and positive")

    @classmethod
    def simple(cls, time, event, covariates, weight=None) -> "SurvDataset":
        time = np.asarray(time, dtype=float)
        if weight is None:
            weight = np.ones_like(time)
        return cls(np.zeros_like(time), time, event, covariates, weight)

    @property
    def n(self) -> int:
        return self.stop.shape[0]


@dataclass
class FitResult:
    """Point estimate on the log scale with model-based standard errors."""

    beta: np.ndarray
    se: np.ndarray
    loglik: float
    converged: bool
    iterations: int
    extra: dict = field(default_factory=dict)

    @property
    def ci(self):
        """(lo, hi) per coefficient; half-width is exactly 1.96 * se."""
        return self.beta - 1.96 * self.se, self.beta + 1.96 * self.se

    def to_dict(self) -> dict:
        lo, hi = self.ci
        return {
            "beta": [float(b) for b in np.atleast_1d(self.beta)],
            "se": [float(s) for s in np.atleast_1d(self.se)],
            "ci_lo": [float(v) for v in np.atleast_1d(lo)],
            "ci_hi": [float(v) for v in np.atleast_1d(hi)],
            "loglik": float(self.loglik),
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
        }


def _revcumsum(a: np.ndarray, axis: int = -1) -> np.ndarray:
    return np.flip(np.cumsum(np.flip(a, axis=axis), axis=axis), axis=axis)


# ---------------------------------------------------------------------------
# Cox partial likelihood
# ---------------------------------------------------------------------------


def _cox_terms(data: SurvDataset, beta: np.ndarray, ties: str):
    """(loglik, score, information) of the weighted partial likelihood."""
    x = data.covariates
    n, p = x.shape
    eta = x @ beta
    eta = np.clip(eta, -700, 700)
    r = data.weight * np.exp(eta)

    stop_order = np.argsort(data.stop, kind="stable")
    stop_sorted = data.stop[stop_order]
    start_sorted_vals = np.sort(data.start, kind="stable")
    start_order = np.argsort(data.start, kind="stable")

    rs = r[stop_order]
    xs = x[stop_order]
    rx = rs[:, None] * xs
    rxx = rx[:, :, None] * xs[:, None, :]

    cum_r = _revcumsum(rs, axis=0)
    cum_rx = _revcumsum(rx, axis=0)
    cum_rxx = _revcumsum(rxx, axis=0)

    ra = r[start_order]
    xa = x[start_order]
    rxa = ra[:, None] * xa
    rxxa = rxa[:, :, None] * xa[:, None, :]
    cum_ra = np.concatenate([_revcumsum(ra, axis=0), [0.0]])
    cum_rxa = np.concatenate([_revcumsum(rxa, axis=0), np.zeros((1, p))])
    cum_rxxa = np.concatenate([_revcumsum(rxxa, axis=0), np.zeros((1, p, p))])

    ev_sorted = data.event[stop_order]
    ev_times, grp_start = np.unique(stop_sorted[ev_sorted], return_index=True)
    # positions of each unique event time in the stop-sorted array
    pos_stop = np.searchsorted(stop_sorted, ev_times, side="left")
    pos_start = np.searchsorted(start_sorted_vals, ev_times, side="left")

    s0 = cum_r[pos_stop] - cum_ra[pos_start]
    s1 = cum_rx[pos_stop] - cum_rxa[pos_start]
    s2 = cum_rxx[pos_stop] - cum_rxxa[pos_start]

    ev_idx = stop_order[ev_sorted]
    w_ev = data.weight[ev_idx]
    x_ev = x[ev_idx]
    eta_ev = eta[ev_idx]
    t_ev = data.stop[ev_idx]
    grp = np.searchsorted(ev_times, t_ev)
    d_per = np.bincount(grp, minlength=ev_times.size).astype(float)

    loglik = float(np.sum(w_ev * eta_ev))
    score = (w_ev[:, None] * x_ev).sum(axis=0)
    info = np.zeros((p, p))

    if ties == "breslow" or np.all(d_per <= 1):
        wsum = np.bincount(grp, weights=w_ev, minlength=ev_times.size)
        mean1 = s1 / s0[:, None]
        loglik -= float(np.sum(wsum * np.log(s0)))
        score -= (wsum[:, None] * mean1).sum(axis=0)
        info += np.einsum("g,gij->ij", wsum, s2 / s0[:, None, None])
        info -= np.einsum("g,gi,gj->ij", wsum, mean1, mean1)
        return loglik, score, info

    # Efron: tied groups subtract a growing fraction of the tied-death mass.
    r_ev = r[ev_idx]
    rx_ev = r_ev[:, None] * x_ev
    rxx_ev = rx_ev[:, :, None] * x_ev[:, None, :]
    d0 = np.bincount(grp, weights=r_ev, minlength=ev_times.size)
    d1 = np.zeros_like(s1)
    d2 = np.zeros_like(s2)
    np.add.at(d1, grp, rx_ev)
    np.add.at(d2, grp, rxx_ev)
    wbar = np.bincount(grp, weights=w_ev, minlength=ev_times.size) / d_per

    for g in range(ev_times.size):
        d = int(d_per[g])
        frac = np.arange(d) / d
        denom = s0[g] - frac * d0[g]
        m1 = (s1[g][None, :] - frac[:, None] * d1[g][None, :]) / denom[:, None]
        m2 = (s2[g][None, :, :] - frac[:, None, None] * d2[g][None, :, :]) / denom[:, None, None]
        loglik -= wbar[g] * float(np.sum(np.log(denom)))
        score -= wbar[g] * m1.sum(axis=0)
        info += wbar[g] * (m2.sum(axis=0) - np.einsum("li,lj->ij", m1, m1))
    return loglik, score, info


def cox_fit(
    data: SurvDataset,
    ties: str = "efron",
    max_iter: int = 25,
    tol: float = 1e-9,
) -> FitResult:
    """Newton-Raphson maximizer of the weighted Cox partial likelihood.

    Efron tie handling by default (switchable to Breslow).  Convergence when
    the log-likelihood moves by less than ``tol``; step-halving up to 10 times
    per iteration guards against overshoot.  Raises ``FitError`` on collinear
    covariates and ``SeparationError`` on monotone likelihoods.
    """
    if ties not in ("efron", "breslow"):
        raise ValueError("ties must be 'efron' or 'breslow'")
    if not np.any(data.event):
        raise FitError("no events: partial likelihood is undefined")
    p = data.covariates.shape[1]
    beta = np.zeros(p)
    loglik, score, info = _cox_terms(data, beta, ties)
    _check_information(info)
    iterations = 0
    converged = False
    for iterations in range(1, max_iter + 1):
        step = np.linalg.solve(info, score)
        new_beta = beta + step
        new_ll, new_score, new_info = _cox_terms(data, new_beta, ties)
        halvings = 0
        while new_ll < loglik - 1e-12 and halvings < 10:
            step *= 0.5
            new_beta = beta + step
            new_ll, new_score, new_info = _cox_terms(data, new_beta, ties)
            halvings += 1
        if np.any(np.abs(new_beta) > 30):
            raise SeparationError("infinite estimate: a covariate separates the risk sets")
        delta = abs(new_ll - loglik)
        beta, loglik, score, info = new_beta, new_ll, new_score, new_info
        if delta < tol:
            converged = True
            break
    _check_information(info)
    cov = np.linalg.inv(info)
    se = np.sqrt(np.diag(cov))
    return FitResult(beta=beta, se=se, loglik=loglik, converged=converged, iterations=iterations)


def _check_information(info: np.ndarray) -> None:
    if not np.all(np.isfinite(info)):
        raise FitError("non-finite information matrix")
    if info.shape[0] == 1:
        if info[0, 0] <= 1e-12:
            raise FitError("collinear covariates: information matrix is singular")
        return
    cond = np.linalg.cond(info)
    if not np.isfinite(cond) or cond > 1e12:
        raise FitError("collinear covariates: information matrix is singular")


def cox_binary_batched(
    time: np.ndarray,
    event: np.ndarray,
    group: np.ndarray,
    weight: Optional[np.ndarray] = None,
    max_iter: int = 25,
    tol: float = 1e-9,
):
    """Breslow Cox fits of a single binary covariate, batched over rows.

    ``time``/``event``/``group`` are (K, n); each row is an independent
    dataset.  Intended for untied, right-censored data from time 0 (the
    transform/bootstrap loops).  Returns a dict of (K,) arrays: ``beta``,
    ``var``, ``loglik``, ``converged``, ``iterations``, ``ok``.
    """
    time = np.atleast_2d(np.asarray(time, dtype=float))
    event = np.atleast_2d(np.asarray(event, dtype=bool))
    group = np.atleast_2d(np.asarray(group, dtype=float))
    K, n = time.shape
    order = np.argsort(time, axis=1, kind="stable")
    ts = np.take_along_axis(time, order, axis=1)
    ev = np.take_along_axis(event, order, axis=1)
    g = np.take_along_axis(group, order, axis=1)
    if weight is None:
        w = np.ones_like(ts)
    else:
        w = np.take_along_axis(np.atleast_2d(np.asarray(weight, dtype=float)), order, axis=1)

    wg_ev = np.where(ev, w, 0.0)
    n_ev = wg_ev.sum(axis=1)
    base = (wg_ev * g).sum(axis=1)  # sum of weighted event covariates

    def terms(beta):
        ebg = np.exp(beta[:, None] * g)
        r = w * ebg
        s0 = _revcumsum(r, axis=1)
        s1 = _revcumsum(r * g, axis=1)
        mean1 = s1 / s0
        ll = beta * base - (wg_ev * np.log(s0)).sum(axis=1)
        score = base - (wg_ev * mean1).sum(axis=1)
        info = (wg_ev * mean1 * (1.0 - mean1)).sum(axis=1)
        return ll, score, info

    beta = np.zeros(K)
    ll, score, info = terms(beta)
    ok = (n_ev > 0) & (info > 1e-12)
    converged = np.zeros(K, dtype=bool)
    iterations = np.zeros(K, dtype=int)
    active = ok.copy()
    for it in range(1, max_iter + 1):
        if not np.any(active):
            break
        step = np.where(active & (info > 0), score / np.where(info > 0, info, 1.0), 0.0)
        new_beta = beta + step
        new_ll, new_score, new_info = terms(new_beta)
        for _ in range(10):
            worse = active & (new_ll < ll - 1e-12)
            if not np.any(worse):
                break
            step = np.where(worse, step * 0.5, step)
            new_beta = beta + step
            new_ll, new_score, new_info = terms(new_beta)
        moved = np.abs(new_ll - ll)
        beta = np.where(active, new_beta, beta)
        ll = np.where(active, new_ll, ll)
        score = np.where(active, new_score, score)
        info = np.where(active, new_info, info)
        iterations = np.where(active, it, iterations)
        done = active & (moved < tol)
        converged |= done
        active &= ~done
        diverged = np.abs(beta) > 30
        ok &= ~diverged
        active &= ok
    ok &= np.isfinite(beta) & (info > 1e-12)
    var = np.where(ok, 1.0 / np.where(info > 0, info, np.nan), np.nan)
    beta = np.where(ok, beta, np.nan)
    return {
        "beta": beta,
        "var": var,
        "loglik": ll,
        "converged": converged & ok,
        "iterations": iterations,
        "ok": ok,
    }


def cox_binary(time, event, group) -> FitResult:
    """Single unweighted Cox fit of a binary covariate via the batched kernel."""
    res = cox_binary_batched(time[None, :], event[None, :], group[None, :])
    if not res["ok"][0]:
        raise FitError("binary Cox fit failed (no events in a group or divergence)")
    return FitResult(
        beta=np.array([res["beta"][0]]),
        se=np.array([np.sqrt(res["var"][0])]),
        loglik=float(res["loglik"][0]),
        converged=bool(res["converged"][0]),
        iterations=int(res["iterations"][0]),
    )


# ---------------------------------------------------------------------------
# Kaplan-Meier and log-rank
# ---------------------------------------------------------------------------


@dataclass
class KaplanMeier:
    """Product-limit estimate as a right-continuous step function."""

    times: np.ndarray       # distinct event times
    survival: np.ndarray    # S(t) just after each event time
    at_risk: np.ndarray
    events: np.ndarray

    def at(self, t):
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.times, t, side="right") - 1
        out = np.where(idx >= 0, np.concatenate(([1.0], self.survival))[idx + 1], 1.0)
        return out if out.ndim else float(out)


def km_estimate(time, event, weight=None) -> KaplanMeier:
    time = np.asarray(time, dtype=float)
    event = np.asarray(event, dtype=bool)
    if weight is None:
        weight = np.ones_like(time)
    if not np.any(event):
        raise FitError("no events: Kaplan-Meier curve is undefined")
    order = np.argsort(time, kind="stable")
    t, e, w = time[order], event[order], weight[order]
    ev_times = np.unique(t[e])
    total = w.sum()
    cum_w = np.concatenate(([0.0], np.cumsum(w)))
    at_risk = total - cum_w[np.searchsorted(t, ev_times, side="left")]
    d = np.zeros_like(ev_times)
    idx = np.searchsorted(ev_times, t[e])
    np.add.at(d, idx, w[e])
    surv = np.cumprod(1.0 - d / at_risk)
    return KaplanMeier(times=ev_times, survival=surv, at_risk=at_risk, events=d)


@dataclass
class LogrankResult:
    chi2: float
    z: float
    p_value: float
    observed: float
    expected: float


def logrank(time, event, group) -> LogrankResult:
    """Two-group log-rank test; ``z`` is signed for group 1 versus group 0."""
    time = np.asarray(time, dtype=float)
    event = np.asarray(event, dtype=bool)
    group = np.asarray(group).astype(bool)
    if not np.any(event):
        raise FitError("no events: log-rank test is undefined")
    order = np.argsort(time, kind="stable")
    t, e, g = time[order], event[order], group[order]
    n = t.size
    ev_times = np.unique(t[e])
    pos = np.searchsorted(t, ev_times, side="left")
    n_at = n - pos
    cum_g = np.concatenate(([0], np.cumsum(g)))
    n1_at = g.sum() - cum_g[pos]
    d_tot = np.zeros(ev_times.size)
    d1 = np.zeros(ev_times.size)
    idx = np.searchsorted(ev_times, t[e])
    np.add.at(d_tot, idx, 1.0)
    np.add.at(d1, idx, g[e].astype(float))
    exp1 = d_tot * n1_at / n_at
    with np.errstate(invalid="ignore", divide="ignore"):
        var1 = d_tot * (n1_at / n_at) * (1.0 - n1_at / n_at) * (n_at - d_tot) / np.maximum(n_at - 1.0, 1.0)
    var1 = np.where(n_at > 1, var1, 0.0)
    o_minus_e = float(np.sum(d1 - exp1))
    v = float(np.sum(var1))
    if v <= 0:
        raise FitError("log-rank variance is zero")
    z = o_minus_e / np.sqrt(v)
    chi2 = z * z
    from scipy.stats import chi2 as chi2_dist

    return LogrankResult(chi2=chi2, z=z, p_value=float(chi2_dist.sf(chi2, 1)),
                         observed=float(np.sum(d1)), expected=float(np.sum(exp1)))


# ---------------------------------------------------------------------------
# Weibull AFT
# ---------------------------------------------------------------------------


def _weibull_terms(logt, event, X, weights, theta):
    """Log-likelihood, gradient and Hessian of the log-Weibull (Gumbel) AFT.

    theta = (mu, gamma..., log sigma); weights is (..., n) and may be batched.
    Returns batched (ll, grad, hess) with parameter dimension last.
    """
    p = X.shape[1]
    mu = theta[..., 0]
    gamma = theta[..., 1:1 + p]
    s = theta[..., 1 + p]
    sigma = np.exp(s)
    lin = mu[..., None] + np.einsum("...p,np->...n", gamma, X)
    z = (logt[None, :] - lin) / sigma[..., None]
    z = np.clip(z, -80, 80)
    ez = np.exp(z)
    d = event[None, :].astype(float)
    ll = (weights * (d * (-s[..., None] + z) - ez)).sum(axis=-1)

    # derivatives of z: dz/dmu = -1/sigma, dz/dgamma_j = -x_j/sigma, dz/ds = -z
    a = d - ez          # dll/dz per observation
    b = -ez             # d2ll/dz2 per observation
    grad = np.empty(theta.shape)
    hess = np.empty(theta.shape + (theta.shape[-1],))
    covs = [np.ones_like(logt)] + [X[:, j] for j in range(p)]
    for i, ci in enumerate(covs):
        grad[..., i] = (weights * a * (-ci[None, :] / sigma[..., None])).sum(axis=-1)
    grad[..., 1 + p] = (weights * (a * (-z) - d)).sum(axis=-1)
    for i, ci in enumerate(covs):
        for j, cj in enumerate(covs):
            hess[..., i, j] = (weights * b * (ci * cj)[None, :] / sigma[..., None] ** 2).sum(axis=-1)
        hij = (weights * (b * (-z) * (-ci[None, :] / sigma[..., None]) + a * ci[None, :] / sigma[..., None])).sum(axis=-1)
        hess[..., i, 1 + p] = hij
        hess[..., 1 + p, i] = hij
    hess[..., 1 + p, 1 + p] = (weights * (b * z * z + a * z)).sum(axis=-1)
    return ll, grad, hess


def weibull_aft_fit(
    time,
    event,
    covariates,
    weight=None,
    max_iter: int = 60,
    tol: float = 1e-9,
) -> FitResult:
    """MLE of log T = mu + gamma' x + sigma W with W standard minimum extreme value.

    ``beta`` in the result holds the acceleration coefficients ``gamma``
    (log acceleration factors); mu and sigma are reported in ``extra``.
    """
    time = np.asarray(time, dtype=float)
    event = np.asarray(event, dtype=bool)
    X = np.asarray(covariates, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if weight is None:
        weight = np.ones_like(time)
    weight = np.asarray(weight, dtype=float)
    if float(weight[event].sum()) < 2:
        raise FitError("need at least two events for a Weibull AFT fit")
    if np.any(time <= 0):
        raise FitError("durations must be positive")
    out = _weibull_newton(np.log(time), event, X, weight[None, :], max_iter, tol)
    if not out["ok"][0]:
        raise FitError("Weibull AFT fit failed to produce a usable estimate")
    theta = out["theta"][0]
    se = out["se"][0]
    p = X.shape[1]
    return FitResult(
        beta=theta[1:1 + p],
        se=se[1:1 + p],
        loglik=float(out["loglik"][0]),
        converged=bool(out["converged"][0]),
        iterations=int(out["iterations"][0]),
        extra={"mu": float(theta[0]), "sigma": float(np.exp(theta[1 + p])),
               "se_mu": float(se[0])},
    )


def weibull_aft_batched(time, event, covariates, weights, max_iter: int = 60, tol: float = 1e-9):
    """Weibull AFT fits sharing rows but with per-fit weights (B, n).

    Zero weights drop rows, so multinomial bootstrap resampling batches as a
    weight matrix.  Returns dict of batched arrays.
    """
    time = np.asarray(time, dtype=float)
    X = np.asarray(covariates, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    return _weibull_newton(np.log(time), np.asarray(event, dtype=bool), X,
                           np.asarray(weights, dtype=float), max_iter, tol)


def _weibull_newton(logt, event, X, weights, max_iter, tol):
    B = weights.shape[0]
    p = X.shape[1]
    npar = p + 2
    theta = np.zeros((B, npar))
    w_ev = weights * event[None, :].astype(float)
    ev_mass = w_ev.sum(axis=1)
    ok = ev_mass >= 2
    with np.errstate(invalid="ignore", divide="ignore"):
        theta[:, 0] = np.where(ok, (w_ev * logt[None, :]).sum(axis=1) / np.where(ev_mass > 0, ev_mass, 1.0), 0.0)
    # covariates with no weighted variation make the fit unidentifiable
    for j in range(p):
        xj = X[:, j]
        m = (weights * xj[None, :]).sum(axis=1) / np.maximum(weights.sum(axis=1), 1e-300)
        v = (weights * (xj[None, :] - m[:, None]) ** 2).sum(axis=1)
        ok &= v > 1e-12

    ll, grad, hess = _weibull_terms(logt, event, X, weights, theta)
    converged = np.zeros(B, dtype=bool)
    iterations = np.zeros(B, dtype=int)
    active = ok.copy()
    eye = np.eye(npar)
    for it in range(1, max_iter + 1):
        if not np.any(active):
            break
        h = -hess + 1e-10 * eye
        with np.errstate(invalid="ignore"):
            try:
                step = np.linalg.solve(h, grad[..., None])[..., 0]
            except np.linalg.LinAlgError:
                step = np.stack([
                    np.linalg.lstsq(h[b], grad[b], rcond=None)[0] for b in range(B)
                ])
        step = np.where(np.isfinite(step), step, 0.0)
        new_theta = np.where(active[:, None], theta + step, theta)
        new_ll, new_grad, new_hess = _weibull_terms(logt, event, X, weights, new_theta)
        for _ in range(12):
            worse = active & ((new_ll < ll - 1e-12) | ~np.isfinite(new_ll))
            if not np.any(worse):
                break
            step = np.where(worse[:, None], step * 0.5, step)
            new_theta = np.where(active[:, None], theta + step, theta)
            new_ll, new_grad, new_hess = _weibull_terms(logt, event, X, weights, new_theta)
        moved = np.abs(new_ll - ll)
        theta = np.where(active[:, None], new_theta, theta)
        ll = np.where(active, new_ll, ll)
        grad = np.where(active[:, None], new_grad, grad)
        hess = np.where(active[:, None, None], new_hess, hess)
        iterations = np.where(active, it, iterations)
        done = active & (moved < tol)
        converged |= done
        active &= ~done
        bad = ~np.isfinite(ll) | (np.abs(theta[:, 1 + p]) > np.log(1e3))
        ok &= ~bad
        active &= ok
    theta[:, 1 + p] = np.clip(theta[:, 1 + p], np.log(1e-3), np.log(1e3))
    se = np.full_like(theta, np.nan)
    for b in range(B):
        if not ok[b]:
            continue
        try:
            cov = np.linalg.inv(-hess[b])
            diag = np.diag(cov)
            if np.all(diag > 0):
                se[b] = np.sqrt(diag)
            else:
                ok[b] = False
        except np.linalg.LinAlgError:
            ok[b] = False
    return {"theta": theta, "se": se, "loglik": ll, "converged": converged & ok,
            "iterations": iterations, "ok": ok}


# ---------------------------------------------------------------------------
# Pooled logistic regression
# ---------------------------------------------------------------------------


def pooled_logistic_fit(design, outcome, weight=None, max_iter: int = 50, tol: float = 1e-9) -> FitResult:
    """Newton/IRLS logistic regression on a person-period table.

    The caller supplies the design matrix (including any intercept column).
    Raises ``SeparationError`` when the likelihood is monotone.
    """
    X = np.asarray(design, dtype=float)
    y = np.asarray(outcome, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, p = X.shape
    if weight is None:
        weight = np.ones(n)
    w = np.asarray(weight, dtype=float)
    beta = np.zeros(p)

    def terms(b):
        eta = np.clip(X @ b, -500, 500)
        mu = 1.0 / (1.0 + np.exp(-eta))
        ll = float(np.sum(w * (y * eta - np.log1p(np.exp(eta)))))
        grad = X.T @ (w * (y - mu))
        hw = w * mu * (1.0 - mu)
        hess = X.T @ (hw[:, None] * X)
        return ll, grad, hess, eta

    ll, grad, hess, eta = terms(beta)
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        try:
            step = np.linalg.solve(hess + 1e-12 * np.eye(p), grad)
        except np.linalg.LinAlgError as exc:
            raise FitError("singular information in logistic fit") from exc
        new_beta = beta + step
        new_ll, new_grad, new_hess, eta = terms(new_beta)
        halvings = 0
        while new_ll < ll - 1e-12 and halvings < 10:
            step *= 0.5
            new_beta = beta + step
            new_ll, new_grad, new_hess, eta = terms(new_beta)
            halvings += 1
        delta = abs(new_ll - ll)
        beta, ll, grad, hess = new_beta, new_ll, new_grad, new_hess
        if np.any(np.abs(beta) > 30):
            raise SeparationError("separation: fitted probabilities reach 0/1")
        if delta < tol:
            converged = True
            break
    cov = np.linalg.inv(hess + 1e-12 * np.eye(p))
    return FitResult(beta=beta, se=np.sqrt(np.diag(cov)), loglik=ll,
                     converged=converged, iterations=iterations)


# ---------------------------------------------------------------------------
# Conjugate gamma posterior for piecewise-constant hazards
# ---------------------------------------------------------------------------


def piecewise_exposures(duration, event, cuts, start=None):
    """Per-interval event counts and at-risk exposure on a cut grid.

    ``duration`` is the exit time on the relevant clock (``start`` defaults
    to 0; pass entry offsets for delayed-entry attribution).  The last
    interval extends to +infinity.  Returns (events (J,), exposure (J,)).
    """
    duration = np.asarray(duration, dtype=float)
    event = np.asarray(event, dtype=bool)
    cuts = np.asarray(cuts, dtype=float)
    if start is None:
        start = np.zeros_like(duration)
    start = np.asarray(start, dtype=float)
    J = cuts.size
    upper = np.append(cuts[1:], np.inf)
    lo = np.maximum(start[:, None], cuts[None, :])
    hi = np.minimum(duration[:, None], upper[None, :])
    exposure = np.clip(hi - lo, 0.0, None).sum(axis=0)
    d = np.zeros(J)
    idx = np.clip(np.searchsorted(cuts, duration[event], side="right") - 1, 0, J - 1)
    np.add.at(d, idx, 1.0)
    return d, exposure


@dataclass
class PosteriorDraws:
    """Independent gamma posterior draws of piecewise hazards, per path."""

    cuts: np.ndarray
    draws: dict            # path name -> (K, J) sampled rates
    events: dict           # path name -> (J,) event counts
    exposure: dict         # path name -> (J,) total at-risk time
    prior: tuple

    @property
    def k(self) -> int:
        return next(iter(self.draws.values())).shape[0]


def gamma_posterior_draws(path_data: dict, cuts, prior=(1.0, 2.0), k: int = 2000, rng=None) -> PosteriorDraws:
    """Exact draws from the product-gamma posterior of piecewise hazards.

    ``path_data`` maps a path name to ``(duration, event)`` or
    ``(duration, event, start)`` arrays on that path's own clock.  With a
    Gamma(a, b) prior (shape-rate) and d events over exposure E in an
    interval, the posterior is Gamma(a + d, b + E); intervals with no data
    keep the prior.
    """
    if rng is None:
        rng = np.random.default_rng()
    a, b = float(prior[0]), float(prior[1])
    if a <= 0 or b <= 0:
        raise ValueError("prior shape and rate must be positive")
    cuts = np.asarray(cuts, dtype=float)
    draws, events, exposure = {}, {}, {}
    for name in sorted(path_data):
        spec = path_data[name]
        d, e = piecewise_exposures(*spec[:2], cuts, start=spec[2] if len(spec) > 2 else None)
        shape = a + d
        rate = b + e
        draws[name] = rng.gamma(shape[None, :], 1.0 / rate[None, :], size=(k, cuts.size))
        events[name] = d
        exposure[name] = e
    return PosteriorDraws(cuts=cuts, draws=draws, events=events, exposure=exposure, prior=(a, b))


def piecewise_cumhaz_rows(rates: np.ndarray, cuts: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Cumulative hazard at ``t`` (K, m) for per-row rate matrices (K, J)."""
    cuts = np.asarray(cuts, dtype=float)
    cum = np.concatenate([np.zeros((rates.shape[0], 1)), np.cumsum(rates[:, :-1] * np.diff(cuts)[None, :], axis=1)], axis=1)
    idx = np.clip(np.searchsorted(cuts, t, side="right") - 1, 0, cuts.size - 1)
    if idx.ndim == 1:
        idx = np.broadcast_to(idx[None, :], t.shape if t.ndim == 2 else (rates.shape[0], idx.size)).copy()
    return np.take_along_axis(cum, idx, axis=1) + np.take_along_axis(rates, idx, axis=1) * (t - cuts[idx])


def piecewise_inv_cumhaz_rows(rates: np.ndarray, cuts: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Inverse cumulative hazard for per-row rate matrices; rates must be > 0."""
    cuts = np.asarray(cuts, dtype=float)
    K = rates.shape[0]
    cum = np.concatenate([np.zeros((K, 1)), np.cumsum(rates[:, :-1] * np.diff(cuts)[None, :], axis=1)], axis=1)
    end = np.concatenate([cum[:, 1:], np.full((K, 1), np.inf)], axis=1)
    idx = (h[:, :, None] > end[:, None, :]).sum(axis=2)
    cum_i = np.take_along_axis(cum, idx, axis=1)
    rate_i = np.take_along_axis(rates, idx, axis=1)
    return cuts[idx] + (h - cum_i) / rate_i

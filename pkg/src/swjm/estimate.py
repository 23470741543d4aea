"""Maximum likelihood fitting of mixed and joint models.

The objective is maximised over the transformed parameters with a BFGS
quasi-Newton method and an Armijo backtracking line search.  Gradients are
central finite differences; the Hessian at the optimum is obtained by
central differences of that gradient.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.stats import norm

from .likelihood import LikelihoodWorkspace, QuadratureSettings
from .model import (VARIANCE_NAMES, ModelSpec, ParameterVector, icc_from_variances, transform,
                    untransform)

EPS = np.finfo(float).eps
BOUNDARY_LOG_VARIANCE = -12.0
VARIANCE_FLOOR = 1e-4
RATE_FLOOR = 1e-6
# step caps on the transformed scale for exp-linked entries
_LOG_STEP_CAP = 3.0


@dataclass(frozen=True)
class FitOptions:
    """Optimiser settings.

    ``gtol`` bounds the infinity norm of the gradient of the log-likelihood
    with respect to the transformed parameters.  A step stalls when the
    relative change in the objective is below ``ftol`` and the gradient did
    not shrink.  ``stall_limit`` stalls in a row reset the inverse Hessian to
    its diagonal; a second such run ends the search.
    """

    max_iter: int = 500
    gtol: float = 1e-4
    ftol: float = 1e-8
    fd_step: float = EPS ** (1.0 / 3.0)
    hess_step: float = EPS ** 0.25
    quadrature: QuadratureSettings = field(default_factory=QuadratureSettings)
    level: float = 0.95
    batch_size: int = 64
    stall_limit: int = 5

    def __post_init__(self):
        for name in ("gtol", "ftol", "fd_step", "hess_step"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class FitResult:
    """Outcome of :func:`fit`.

    ``theta`` holds the transformed estimates and ``vcov`` their covariance;
    ``estimates``, ``se`` and the Wald limits are on the natural scale.
    Parameters whose design column has no observations are listed in
    ``dropped`` and reported as NaN.  ``history`` is the log-likelihood after
    each accepted step.
    """

    spec: ModelSpec
    theta: np.ndarray
    estimates: ParameterVector
    se: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    vcov: np.ndarray
    loglik: float
    iterations: int
    n_evals: int
    converged: bool
    reason: str
    gradient: np.ndarray
    icc: dict
    dropped: list = field(default_factory=list)
    boundary: bool = False
    history: list = field(default_factory=list)

    @property
    def names(self):
        return self.spec.layout.names

    def to_frame(self) -> pd.DataFrame:
        """One row per parameter (natural scale) plus the derived ICCs."""
        rows = [{"name": n, "estimate": e, "se": s, "ci_lo": lo, "ci_hi": hi}
                for n, e, s, lo, hi in zip(self.names, self.estimates.values, self.se,
                                           self.ci_lo, self.ci_hi)]
        for n, (e, s, lo, hi) in self.icc.items():
            rows.append({"name": n, "estimate": e, "se": s, "ci_lo": lo, "ci_hi": hi})
        return pd.DataFrame(rows, columns=["name", "estimate", "se", "ci_lo", "ci_hi"])

    def summary(self) -> dict:
        return {"loglik": self.loglik, "converged": bool(self.converged),
                "iterations": int(self.iterations), "reason": self.reason,
                "n_evals": int(self.n_evals), "boundary": bool(self.boundary),
                "dropped": list(self.dropped), "spec": self.spec.to_dict(),
                "estimates": self.estimates.to_dict(),
                "max_abs_gradient": float(np.nanmax(np.abs(self.gradient)))
                if self.gradient.size else 0.0}

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2)


def wald_ci(estimate, se, level=0.95, log=False):
    """Symmetric Wald interval, optionally built on the log scale.

    With ``log=True``, ``se`` is the standard error of ``log(estimate)`` and
    the interval is mapped back by exponentiation.
    """
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    z = norm.ppf(0.5 + level / 2.0)
    if log:
        centre = np.log(estimate)
        return np.exp(centre - z * se), np.exp(centre + z * se)
    return estimate - z * se, estimate + z * se


# ----------------------------------------------------------------------
# initial values

def _fixed_design(ws: LikelihoodWorkspace):
    return ws.X, ws.y


def initial_values(dataset, spec: ModelSpec, workspace=None) -> np.ndarray:
    """OLS fixed effects and moment-based variances on the transformed scale."""
    ws = workspace or LikelihoodWorkspace(dataset.longitudinal, dataset.survival, spec)
    lay = spec.layout
    theta = np.zeros(len(lay))
    coef, resid = _ols(ws)
    cols = ws.column_counts > 0
    theta[:lay.n_fixed][cols] = coef
    theta[lay.variances] = np.log(_anova_split(ws, resid))
    if spec.has_survival:
        persontime = float(np.sum(ws.tstop - ws.tstart))
        rate = ws.event.sum() / persontime if persontime > 0 else 0.0
        theta[lay.index["log_lambda"]] = np.log(max(rate, RATE_FLOOR))
    # ulp-level differences from input row order must not alter the search path
    return np.array([float(f"{v:.10g}") for v in theta])


def _ols(ws: LikelihoodWorkspace):
    """Least-squares fixed effects on the estimable columns and their residuals."""
    X, y = _fixed_design(ws)
    cols = ws.column_counts > 0
    if len(y) == 0:
        return np.zeros(cols.sum()), y
    coef = np.linalg.lstsq(X[:, cols], y, rcond=None)[0]
    return coef, y - X[:, cols] @ coef


def _anova_split(ws: LikelihoodWorkspace, e) -> np.ndarray:
    """Nested method-of-moments split of the residual variance."""
    if len(e) == 0:
        return np.ones(3)
    G = ws.G
    n_k = ws.n_obs
    has = n_k > 0
    sub_mean = np.zeros_like(n_k, dtype=float)
    sub_mean[has] = (G @ e)[has] / n_k[has]
    within = e - (G.T @ sub_mean)
    df_w = len(e) - has.sum()
    s2e = within @ within / df_w if df_w > 0 else e.var()

    cl = ws.cluster_of[has]
    means = sub_mean[has]
    C = ws.n_clusters
    m_c = np.bincount(cl, minlength=C)
    cmean = np.bincount(cl, weights=means, minlength=C) / np.maximum(m_c, 1)
    dev = means - cmean[cl]
    df_b = has.sum() - np.count_nonzero(m_c)
    s2b = dev @ dev / df_b if df_b > 0 else 0.0
    n_bar = n_k[has].mean()
    s2p = s2b - s2e / n_bar
    present = m_c > 0
    if present.sum() > 1:
        s2c = np.var(cmean[present], ddof=1)
        s2a = s2c - s2b / m_c[present].mean()
    else:
        s2a = 0.0
    return np.maximum([s2a, s2p, s2e], VARIANCE_FLOOR)


def start_from(result: FitResult, spec: ModelSpec, base: np.ndarray) -> np.ndarray:
    """Overwrite entries of ``base`` with the matching estimates of a previous fit.

    Log-variances that collapsed onto the boundary keep their value from
    ``base`` so the new search does not start on a flat ridge.
    """
    theta = np.array(base, dtype=float)
    src = dict(zip(result.names, result.theta))
    variances = set(VARIANCE_NAMES)
    for name, i in spec.layout.index.items():
        if name not in src or not np.isfinite(src[name]):
            continue
        if name in variances and src[name] < BOUNDARY_LOG_VARIANCE:
            continue
        theta[i] = src[name]
    return theta


# ----------------------------------------------------------------------
# objective and derivatives

class _Objective:
    """Negative log-likelihood over the free entries of the parameter vector."""

    def __init__(self, ws: LikelihoodWorkspace, theta_full, free, options: FitOptions):
        self.ws = ws
        self.base = np.array(theta_full, dtype=float)
        self.free = free
        self.opt = options
        self.n_evals = 0

    def full(self, x):
        x = np.atleast_2d(x)
        out = np.tile(self.base, (x.shape[0], 1))
        out[:, self.free] = x
        return out

    def values(self, xs):
        xs = np.atleast_2d(xs)
        out = np.empty(xs.shape[0])
        bs = self.opt.batch_size
        with np.errstate(all="ignore"):
            for i in range(0, xs.shape[0], bs):
                out[i:i + bs] = -self.ws.loglik(self.full(xs[i:i + bs]))
        self.n_evals += xs.shape[0]
        out[~np.isfinite(out)] = np.inf
        return out

    def value(self, x):
        return float(self.values(x)[0])

    def _steps(self, x, rel):
        h = rel * np.maximum(np.abs(x), 1.0)
        return (x + h) - x

    def gradient_points(self, x):
        d = len(x)
        h = self._steps(x, self.opt.fd_step)
        pts = np.repeat(x[None, :], 2 * d, axis=0)
        pts[np.arange(d), np.arange(d)] += h
        pts[d + np.arange(d), np.arange(d)] -= h
        return pts, h

    def gradient(self, x, f0=None):
        """Central-difference gradient and a diagonal curvature estimate."""
        pts, h = self.gradient_points(x)
        v = self.values(pts)
        d = len(x)
        g = (v[:d] - v[d:]) / (2.0 * h)
        curv = None
        if f0 is not None:
            curv = (v[:d] + v[d:] - 2.0 * f0) / (h * h)
        return g, curv

    def hessian(self, x):
        """Central differences of the central-difference gradient."""
        d = len(x)
        hh = self._steps(x, self.opt.hess_step)
        centres = np.repeat(x[None, :], 2 * d, axis=0)
        centres[np.arange(d), np.arange(d)] += hh
        centres[d + np.arange(d), np.arange(d)] -= hh
        blocks, steps = zip(*(self.gradient_points(c) for c in centres))
        v = self.values(np.concatenate(blocks)).reshape(2 * d, 2 * d)
        grads = (v[:, :d] - v[:, d:]) / (2.0 * np.asarray(steps))
        H = (grads[:d] - grads[d:]) / (2.0 * hh[:, None])
        return 0.5 * (H + H.T)


def _bfgs(obj: _Objective, x0, opt: FitOptions, log_mask):
    x = np.array(x0, dtype=float)
    f = obj.value(x)
    if not np.isfinite(f):
        return x, f, np.full_like(x, np.nan), 0, "non-finite objective at start", [f]
    g, curv = obj.gradient(x, f)
    history = [f]

    def diag_inverse(c):
        return np.diag(1.0 / np.maximum(np.abs(c), 1e-2))

    Hinv = diag_inverse(curv)
    fresh = True
    restarted = False
    stall = 0
    reason = "iteration limit"
    it = 0
    while it < opt.max_iter:
        if np.max(np.abs(g)) <= opt.gtol:
            reason = "gradient tolerance met"
            break
        it += 1
        d = -Hinv @ g
        slope = g @ d
        if not slope < 0:
            Hinv, fresh = diag_inverse(curv), True
            d = -Hinv @ g
            slope = g @ d
        big = np.max(np.abs(d[log_mask])) if log_mask.any() else 0.0
        if big > _LOG_STEP_CAP:
            d *= _LOG_STEP_CAP / big
            slope = g @ d
        t, accepted = 1.0, False
        for _ in range(40):
            fn = obj.value(x + t * d)
            if fn <= f + 1e-4 * t * slope:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            if not fresh:
                _, curv = obj.gradient(x, f)
                Hinv, fresh = diag_inverse(curv), True
                continue
            reason = "line search failed"
            break
        xn = x + t * d
        gn, curv_n = obj.gradient(xn, fn)
        s, yv = xn - x, gn - g
        sy = s @ yv
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(yv):
            rho = 1.0 / sy
            V = np.eye(len(x)) - rho * np.outer(s, yv)
            Hinv = V @ Hinv @ V.T + rho * np.outer(s, s)
            fresh = False
        # a tiny objective change only counts as a stall when the gradient
        # stopped shrinking too; near the optimum the decrease per step is far
        # below ftol long before the gradient tolerance is met
        rel = (f - fn) / max(abs(f), abs(fn), 1.0)
        shrinking = np.max(np.abs(gn)) < np.max(np.abs(g))
        stall = stall + 1 if (rel < opt.ftol and not shrinking) else 0
        x, f, g, curv = xn, fn, gn, curv_n
        history.append(f)
        if stall >= opt.stall_limit:
            if restarted:
                reason = "objective stalled"
                break
            # restart once from the diagonal curvature before giving up
            Hinv, fresh, restarted, stall = diag_inverse(curv), True, True, 0
        elif stall == 0:
            restarted = False
    if np.max(np.abs(g)) <= opt.gtol:
        reason = "gradient tolerance met"
    return x, f, g, it, reason, history


def _icc_inference(theta_var, cov_var, level):
    """Delta-method Wald inference for the two ICCs from log-variances."""
    v = np.exp(theta_var)
    ra, rd = icc_from_variances(*v)
    total = v.sum()
    # d rho / d log var_i = var_i * d rho / d var_i
    ja = np.array([v[0] * (1 - ra), v[1] * (1 - ra), -v[2] * ra]) / total
    jd = np.array([v[0] * (1 - rd), -v[1] * rd, -v[2] * rd]) / total
    out = {}
    for name, est, jac in (("rho_a", ra, ja), ("rho_d", rd, jd)):
        se = float(np.sqrt(jac @ cov_var @ jac)) if np.all(np.isfinite(cov_var)) else np.nan
        lo, hi = wald_ci(est, se, level)
        out[name] = (float(est), se, float(lo), float(hi))
    return out


def fit(dataset, spec: ModelSpec, options: FitOptions | None = None,
        start=None) -> FitResult:
    """Fit ``spec`` to ``dataset`` by maximum likelihood.

    ``start`` may be a transformed parameter array, a natural-scale
    :class:`ParameterVector` or a previous :class:`FitResult` whose shared
    parameters seed the search.  Statistical failures are reported through
    ``converged``/``reason`` rather than raised.
    """
    opt = options or FitOptions()
    ws = LikelihoodWorkspace(dataset.longitudinal,
                             dataset.survival if spec.has_survival else None,
                             spec, opt.quadrature)
    lay = spec.layout
    d = len(lay)
    theta0 = initial_values(dataset, spec, ws)
    if isinstance(start, FitResult):
        theta0 = start_from(start, spec, theta0)
    elif isinstance(start, ParameterVector):
        theta0 = transform(start)
    elif start is not None:
        theta0 = np.array(start, dtype=float)

    free = np.ones(d, bool)
    free[:lay.n_fixed] = ws.column_counts > 0
    dropped = [lay.names[i] for i in np.flatnonzero(~free)]
    theta0[~free] = 0.0

    log_mask = np.zeros(d, bool)
    log_mask[lay.variances] = True
    for n in ("log_lambda", "log_p"):
        if n in lay.index:
            log_mask[lay.index[n]] = True

    obj = _Objective(ws, theta0, free, opt)
    x, f, g, iters, reason, history = _bfgs(obj, theta0[free], opt, log_mask[free])
    theta = theta0.copy()
    theta[free] = x
    theta[~free] = np.nan
    loglik_path = [-v for v in history]
    grad = np.full(d, np.nan)
    grad[free] = -g

    nan = np.full(d, np.nan)
    if not np.isfinite(f):
        est = untransform(spec, theta)
        return FitResult(spec, theta, est, nan, nan, nan, np.full((d, d), np.nan), -np.inf,
                         iters, obj.n_evals, False, reason, grad,
                         {"rho_a": (np.nan,) * 4, "rho_d": (np.nan,) * 4}, dropped,
                         history=loglik_path)

    H = obj.hessian(x)
    cov = np.full((d, d), np.nan)
    try:
        eig = np.linalg.eigvalsh(H)
        negdef = bool(np.all(eig > 1e-10))
    except np.linalg.LinAlgError:
        negdef = False
    if negdef:
        cov_free = np.linalg.inv(H)
        cov[np.ix_(free, free)] = 0.5 * (cov_free + cov_free.T)

    grad_ok = np.max(np.abs(g)) <= opt.gtol
    boundary = bool(np.any(theta[lay.variances] < BOUNDARY_LOG_VARIANCE))
    converged = grad_ok and negdef and not boundary
    if not converged:
        if boundary:
            reason = "variance at boundary"
        elif not grad_ok:
            reason = reason if reason != "gradient tolerance met" else "gradient tolerance not met"
        elif not negdef:
            reason = "Hessian not negative definite"

    se_t = np.sqrt(np.diag(cov))
    est = untransform(spec, theta)
    se = se_t.copy()
    lo, hi = wald_ci(theta, se_t, opt.level)
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    iv = lay.variances
    se[iv] = est.values[iv] * se_t[iv]
    with np.errstate(over="ignore"):
        lo[iv], hi[iv] = np.exp(lo[iv]), np.exp(hi[iv])
    icc = _icc_inference(theta[iv], cov[np.ix_(iv, iv)], opt.level)
    return FitResult(spec, theta, est, se, lo, hi, cov, -f, iters, obj.n_evals,
                     converged, reason, grad, icc, dropped, boundary, loglik_path)

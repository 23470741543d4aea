"""Marginal log-likelihood by nested adaptive Gauss-Hermite quadrature.

Given the random intercepts, the longitudinal outcomes and the dropout
process are independent, so a subject's conditional log-density is the sum
of a Gaussian term and a piecewise-constant-covariate survival term.  The
subject intercept ``phi`` is integrated out first (inner integral), then
the cluster intercept ``alpha`` (outer integral).  Both integrals use
Gauss-Hermite nodes centred at the mode of the log-integrand and scaled by
its curvature.

Every subject's conditional log-density depends on the data only through a
handful of summaries (see :meth:`LikelihoodWorkspace.subject_terms`), which
lets one evaluation handle a whole batch of parameter vectors at once.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import pandas as pd
import scipy.sparse as sps
from scipy.special import logsumexp

from .model import ModelSpec, ParameterVector, transform

LOG2PI = np.log(2.0 * np.pi)
SQRT2 = np.sqrt(2.0)
MOMENT_NODES = 5


@dataclass(frozen=True)
class QuadratureSettings:
    """Gauss-Hermite options.

    ``tol`` applies to the gradient of the log-integrand measured in units
    of its curvature-implied standard deviation.
    """

    nodes: int = 7
    adaptive: bool = True
    tol: float = 1e-8
    max_iter: int = 50

    def __post_init__(self):
        if self.nodes < 1:
            raise ValueError("need at least one quadrature node")


def gauss_hermite(q: int):
    x, w = np.polynomial.hermite.hermgauss(q)
    return x, np.log(w)


def exposure_from_rows(lon: pd.DataFrame) -> np.ndarray:
    if "exposure" in lon.columns:
        return lon["exposure"].to_numpy()
    treated = lon[lon["treat"] == 1]
    xo = treated.groupby("cluster_id")["period"].min()
    first = lon["cluster_id"].map(xo).to_numpy()
    return np.where(lon["treat"].to_numpy() == 1, lon["period"].to_numpy() - first, -1)


def _check_start_stop(surv: pd.DataFrame):
    key = ["cluster_id", "subject_id"]
    s = surv.sort_values(key + ["tstart"], kind="mergesort")
    if np.any(s["tstart"].to_numpy() >= s["tstop"].to_numpy()):
        raise ValueError("start-stop rows need tstart < tstop")
    first = ~s.duplicated(key, keep="first").to_numpy()
    last = ~s.duplicated(key, keep="last").to_numpy()
    tstart, tstop = s["tstart"].to_numpy(), s["tstop"].to_numpy()
    if np.any(tstart[first] != 0):
        raise ValueError("each subject's first row must start at 0")
    cont = tstart[1:][~first[1:]] == tstop[:-1][~first[1:]]
    if not np.all(cont):
        raise ValueError("start-stop rows of a subject must be contiguous")
    if np.any(s["event"].to_numpy()[~last] != 0):
        raise ValueError("only a subject's last row may carry an event")
    return s


class LikelihoodWorkspace:
    """Grouped data views for fast repeated likelihood evaluation.

    Parameters
    ----------
    longitudinal : DataFrame
        Columns ``cluster_id, subject_id, period, treat, y, observed``
        (``exposure`` optional; derived from the treatment pattern if absent).
    survival : DataFrame or None
        Start-stop rows ``cluster_id, subject_id, tstart, tstop, treat, event``.
        Ignored when ``spec`` has no dropout submodel.
    spec : ModelSpec
    settings : QuadratureSettings
    """

    def __init__(self, longitudinal, survival, spec: ModelSpec,
                 settings: QuadratureSettings | None = None):
        self.spec = spec
        self.settings = settings or QuadratureSettings()
        key = ["cluster_id", "subject_id"]
        lon = longitudinal.copy()
        if "observed" not in lon.columns:
            lon["observed"] = True
        lon["exposure"] = exposure_from_rows(lon)
        # canonical row order keeps every per-subject sum independent of input order
        lon = lon[lon["observed"].astype(bool)].sort_values(key + ["period"], kind="mergesort")
        use_surv = spec.has_survival
        if use_surv:
            if survival is None or len(survival) == 0:
                raise ValueError("the joint model needs start-stop survival rows")
            surv = _check_start_stop(survival)
        frames = [lon[key]] + ([surv[key]] if use_surv else [])
        subjects = (pd.concat(frames).drop_duplicates()
                    .sort_values(key).reset_index(drop=True))
        self.subjects = subjects
        sid = pd.Series(np.arange(len(subjects)),
                        index=pd.MultiIndex.from_frame(subjects))
        self.n_subjects = K = len(subjects)
        cl = subjects["cluster_id"].to_numpy()
        self.cluster_ids, self.starts, counts = np.unique(cl, return_index=True,
                                                          return_counts=True)
        self.n_clusters = len(self.cluster_ids)
        self.cluster_of = np.repeat(np.arange(self.n_clusters), counts)

        # longitudinal design
        J = spec.n_periods
        period = lon["period"].to_numpy(int)
        if np.any((period < 1) | (period > J)):
            raise ValueError("period outside the model's range")
        treat = lon["treat"].to_numpy(int)
        X = np.zeros((len(lon), spec.layout.n_fixed))
        X[np.arange(len(lon)), period - 1] = 1.0
        if spec.outcome == "constant":
            X[:, J] = treat
        else:
            e = lon["exposure"].to_numpy(int)
            on = treat == 1
            if np.any(e[on] > spec.max_exposure) or np.any(e[on] < 0):
                raise ValueError("exposure index outside the model's range")
            X[np.flatnonzero(on), J + e[on]] = 1.0
        self.X = X
        self.y = lon["y"].to_numpy(float)
        rows = sid.loc[list(zip(lon["cluster_id"], lon["subject_id"]))].to_numpy() \
            if len(lon) else np.zeros(0, int)
        self.G = sps.csr_matrix((np.ones(len(lon)), (rows, np.arange(len(lon)))),
                                shape=(K, len(lon)))
        self.n_obs = np.asarray(self.G.sum(axis=1)).ravel()
        self.column_counts = X.sum(axis=0)

        if use_surv:
            srows = sid.loc[list(zip(surv["cluster_id"], surv["subject_id"]))].to_numpy()
            self.tstart = surv["tstart"].to_numpy(float)
            self.tstop = surv["tstop"].to_numpy(float)
            self.strt = surv["treat"].to_numpy(float)
            self.event = surv["event"].to_numpy(float)
            self.log_tstop = np.log(self.tstop)
            self.Gs = sps.csr_matrix((np.ones(len(surv)), (srows, np.arange(len(surv)))),
                                     shape=(K, len(surv)))
            self.n_events = np.asarray(self.Gs @ self.event).ravel()
        self.x, self.logw = gauss_hermite(self.settings.nodes)
        # node placement always uses an accurate inner rule, so Q = 1 is a
        # proper nested Laplace approximation
        self.xm, self.logwm = gauss_hermite(max(self.settings.nodes, MOMENT_NODES))
        self._build_index()
        self.n_fallback = 0

    def _build_index(self):
        lay = self.spec.layout
        idx = lay.index
        self._iv = lay.variances
        self._inu = idx.get("nu")
        if "omega" in idx:
            self._iw1 = self._iw2 = idx["omega"]
        else:
            self._iw1, self._iw2 = idx.get("omega_1"), idx.get("omega_2")
        self._ilam, self._ip = idx.get("log_lambda"), idx.get("log_p")

    # ------------------------------------------------------------------
    def subject_terms(self, theta):
        """Per-subject summaries for a batch of transformed parameters.

        Returns a dict of arrays with leading batch axis ``B``:
        ``S1, S2`` (sum and sum of squares of the fixed-effect residuals),
        ``A`` (cumulative hazard weight), ``E`` (event log-hazard terms),
        ``D`` (events), ``n`` (observations) and the scalar parameters.
        """
        theta = np.atleast_2d(np.asarray(theta, float))
        B = theta.shape[0]
        n_fixed = self.spec.layout.n_fixed
        resid = self.y[:, None] - self.X @ theta[:, :n_fixed].T
        S1 = np.asarray(self.G @ resid).T
        S2 = np.asarray(self.G @ resid ** 2).T
        s2a, s2p, s2e = np.exp(theta[:, self._iv]).T
        t = {"S1": S1, "S2": S2, "n": self.n_obs[None, :],
             "s2a": s2a, "s2p": s2p, "s2e": s2e}
        zeros = np.zeros(B)
        if self.spec.has_survival:
            nu = theta[:, self._inu]
            loglam = theta[:, self._ilam]
            logp = theta[:, self._ip] if self._ip is not None else zeros
            p = np.exp(logp)
            with np.errstate(divide="ignore"):
                cum = np.exp(loglam)[None, :] * (self.tstop[:, None] ** p[None, :]
                                                 - self.tstart[:, None] ** p[None, :])
            lin = nu[None, :] * self.strt[:, None]
            t["A"] = np.asarray(self.Gs @ (cum * np.exp(lin))).T
            ev = self.event[:, None] * (loglam + logp + (p - 1.0) * self.log_tstop[:, None]
                                        + lin)
            t["E"] = np.asarray(self.Gs @ ev).T
            t["D"] = self.n_events[None, :]
            t["w1"] = theta[:, self._iw1] if self._iw1 is not None else zeros
            t["w2"] = theta[:, self._iw2] if self._iw2 is not None else zeros
        else:
            t["A"] = np.zeros_like(S1)
            t["E"] = np.zeros_like(S1)
            t["D"] = np.zeros((1, self.n_subjects))
            t["w1"] = t["w2"] = zeros
        return t

    # ------------------------------------------------------------------
    def cluster_logliks(self, theta, return_flags=False):
        """Cluster contributions, shape ``(B, n_clusters)``."""
        t = self.subject_terms(theta)
        out, nfb = _nested_quadrature(t, self.cluster_of, self.starts,
                                      (self.x, self.logw), (self.xm, self.logwm),
                                      self.settings)
        self.n_fallback = nfb
        return (out, nfb) if return_flags else out

    def loglik(self, theta):
        """Total log-likelihood for one (1-D) or many (2-D) parameter vectors."""
        theta = np.asarray(theta, float)
        # exactly rounded, so the total does not depend on cluster order
        ll = np.array([math.fsum(row) for row in self.cluster_logliks(np.atleast_2d(theta))])
        return ll if theta.ndim == 2 else float(ll[0])


# ----------------------------------------------------------------------
# quadrature engine; shapes: B batch, K subjects, C clusters, trailing node axes

class _Terms:
    """Subject summaries broadcast to ``(B, K, *extra)``."""

    def __init__(self, t, extra=0):
        pad = (slice(None),) * 2 + (None,) * extra
        bpad = (slice(None),) + (None,) * (extra + 1)
        self.S1, self.S2 = t["S1"][pad], t["S2"][pad]
        self.n, self.A, self.E, self.D = t["n"][pad], t["A"][pad], t["E"][pad], t["D"][pad]
        for k in ("s2a", "s2p", "s2e", "w1", "w2"):
            setattr(self, k, np.asarray(t[k])[bpad])
        self.survival = bool(np.any(self.A != 0))
        self.const = (-0.5 * self.n * (LOG2PI + np.log(self.s2e)) + self.E
                      - 0.5 * (LOG2PI + np.log(self.s2p)))

    def expand(self) -> "_Terms":
        """Copy with one more trailing axis, for evaluation at quadrature nodes."""
        out = _Terms.__new__(_Terms)
        out.__dict__.update({k: v[..., None] if isinstance(v, np.ndarray) else v
                             for k, v in self.__dict__.items()})
        return out

    def h(self, phi, a):
        """Joint log-density of a subject's data and ``phi`` given ``alpha = a``."""
        c = a + phi
        ss = self.S2 - 2.0 * c * self.S1 + self.n * c * c
        lin = self.w1 * a + self.w2 * phi
        with np.errstate(over="ignore"):
            haz = self.A * np.exp(lin)
        return (self.const - 0.5 * ss / self.s2e + self.D * lin - haz
                - 0.5 * phi * phi / self.s2p)

    def derivs_phi(self, phi, a):
        with np.errstate(over="ignore"):
            haz = self.A * np.exp(self.w1 * a + self.w2 * phi)
        g = ((self.S1 - self.n * (a + phi)) / self.s2e + self.w2 * (self.D - haz)
             - phi / self.s2p)
        H = -self.n / self.s2e - self.w2 ** 2 * haz - 1.0 / self.s2p
        return g, H, haz

    def derivs_a(self, phi, a, haz):
        g = (self.S1 - self.n * (a + phi)) / self.s2e + self.w1 * (self.D - haz)
        H = -self.n / self.s2e - self.w1 ** 2 * haz
        return g, H


def _newton_phi(T: _Terms, a, phi, tol, max_iter):
    """Safeguarded Newton for the inner mode; returns (mode, curvature, ok)."""
    ok = np.zeros(np.broadcast(a, phi).shape, bool)
    for _ in range(max_iter):
        g, H, _ = T.derivs_phi(phi, a)
        ok = np.abs(g) * np.sqrt(-1.0 / H) <= tol
        if ok.all():
            break
        step = np.where(ok, 0.0, -g / H)
        big = np.abs(step) * np.sqrt(-H) > 1.0
        if big.any():
            h0 = T.h(phi, a)
            for _ in range(30):
                h1 = T.h(phi + step, a)
                worse = big & ~(h1 >= h0 - 1e-12 * np.abs(h0))
                if not worse.any():
                    break
                step = np.where(worse, 0.5 * step, step)
        phi = phi + step
    _, H, _ = T.derivs_phi(phi, a)
    return phi, H, ok


def _lse(v):
    m = v.max(axis=-1)
    return m + np.log(np.exp(v - m[..., None]).sum(axis=-1))


def _inner(T: _Terms, a, phi, H, x, logw, derivs=False):
    """log of the inner integral (and its first two derivatives in ``a``).

    The Gaussian part of the log-integrand is a quadratic in ``phi``, so at
    the nodes ``phi + s x`` it is evaluated as a polynomial in ``x``.
    """
    s = SQRT2 * np.sqrt(-1.0 / H)
    k2 = -0.5 * (T.n / T.s2e + 1.0 / T.s2p)
    k1 = (T.S1 - T.n * a) / T.s2e + T.D * T.w2
    k0 = (T.const - 0.5 * (T.S2 - 2.0 * a * T.S1 + T.n * a * a) / T.s2e
          + T.D * T.w1 * a)
    p0 = k0 + phi * (k1 + k2 * phi)
    p1 = ((k1 + 2.0 * k2 * phi) * s)[..., None]
    p2 = (k2 * s * s)[..., None]
    lw = (logw + x * x) + x * (p1 + p2 * x)
    if T.survival:
        with np.errstate(over="ignore"):
            scale = T.A * np.exp(T.w1 * a + T.w2 * phi)
            haz = scale[..., None] * np.exp((T.w2 * s)[..., None] * x)
        lw = lw - haz
    rest = _lse(lw)
    logI = 0.5 * np.log(2.0) + np.log(s / SQRT2) + p0 + rest
    if not derivs:
        return logI
    pw = np.exp(lw - rest[..., None])
    xs = s[..., None] * x
    if not T.survival:
        haz = 0.0
    T1 = T.expand()
    ga, Ha = T1.derivs_a(phi[..., None] + xs, a[..., None], haz)
    m1 = (pw * ga).sum(-1)
    m2 = (pw * (Ha + ga * ga)).sum(-1) - m1 * m1
    return logI, m1, m2


def _nested_quadrature(t, cluster_of, starts, rule, moment_rule, settings):
    x, logw = rule
    tol, max_iter = settings.tol, settings.max_iter
    B = t["S1"].shape[0]
    C = len(starts)
    T = _Terms(t)
    s2a = np.asarray(t["s2a"])[:, None]
    s2p = np.asarray(t["s2p"])[:, None]
    nfb = 0

    if settings.adaptive:
        a = np.zeros((B, C))
        phi = np.zeros_like(t["S1"])
        a_prev = g_prev = step = G2 = None
        outer_ok = np.zeros((B, C), bool)
        for _ in range(max_iter):
            asub = a[:, cluster_of]
            phi, H, ok = _newton_phi(T, asub, phi, tol, max_iter)
            logI, m1, m2 = _inner(T, asub, phi, H, *moment_rule, derivs=True)
            g = np.add.reduceat(logI, starts, axis=1) - 0.5 * a * a / s2a
            if a_prev is not None:
                worse = (np.abs(step) * np.sqrt(-G2) > 1.0) & (g < g_prev - 1e-10 * np.abs(g_prev))
                if worse.any():
                    step = np.where(worse, 0.5 * step, 0.0)
                    a = np.where(worse, a_prev + step, a)
                    continue
            G1 = np.add.reduceat(m1, starts, axis=1) - a / s2a
            G2 = np.minimum(np.add.reduceat(m2, starts, axis=1) - 1.0 / s2a, -1.0 / s2a)
            outer_ok = np.abs(G1) * np.sqrt(-1.0 / G2) <= tol
            if outer_ok.all():
                break
            a_prev, g_prev = a, g
            step = np.where(outer_ok, 0.0, -G1 / G2)
            a = a + step
        sd = np.sqrt(-1.0 / G2)
        if not outer_ok.all():
            nfb += int((~outer_ok).sum())
            a = np.where(outer_ok, a, 0.0)
            sd = np.where(outer_ok, sd, np.sqrt(s2a))
        asub = a[:, cluster_of]
        # warm start at each outer node from the linearised mode path
        _, Hp, haz = T.derivs_phi(phi, asub)
        dphi = -(-T.n / T.s2e - T.w1 * T.w2 * haz) / Hp
        a_nodes = a[..., None] + SQRT2 * sd[..., None] * x
        an_sub = a_nodes[:, cluster_of, :]
        phi0 = phi[..., None] + dphi[..., None] * (an_sub - asub[..., None])
        Tn = _Terms(t, extra=1)
        phin, Hn, okn = _newton_phi(Tn, an_sub, phi0, tol, max_iter)
        if not okn.all():
            nfb += int((~okn).sum())
            phin = np.where(okn, phin, 0.0)
            Hn = np.where(okn, Hn, -1.0 / s2p[..., None])
    else:
        a = np.zeros((B, C))
        sd = np.sqrt(s2a) * np.ones((B, C))
        a_nodes = SQRT2 * sd[..., None] * x
        an_sub = a_nodes[:, cluster_of, :]
        Tn = _Terms(t, extra=1)
        phin = np.zeros_like(an_sub)
        Hn = np.broadcast_to(-1.0 / s2p[..., None], an_sub.shape)

    logI = _inner(Tn, an_sub, phin, Hn, x, logw)
    inner_sum = np.add.reduceat(logI, starts, axis=1)
    prior = -0.5 * (LOG2PI + np.log(s2a[..., None])) - 0.5 * a_nodes ** 2 / s2a[..., None]
    lw = logw + x * x + inner_sum + prior
    out = 0.5 * np.log(2.0) + np.log(sd) + logsumexp(lw, axis=-1)
    return out, nfb


# ----------------------------------------------------------------------
# scalar reference functions

def longitudinal_conditional_logdensity(records: pd.DataFrame, params: ParameterVector,
                                        alpha: float, phi: float) -> float:
    """Sum of Gaussian log-densities of a subject's observed outcomes."""
    from .model import longitudinal_mean
    if "observed" in records.columns:
        records = records[records["observed"].astype(bool)]
    if len(records) == 0:
        return 0.0
    s2e = params["var_eps"]
    exposure = (records["exposure"] if "exposure" in records.columns
                else pd.Series([None] * len(records), index=records.index))
    total = 0.0
    for (_, r), e in zip(records.iterrows(), exposure):
        e = None if e is None or pd.isna(e) or e < 0 else int(e)
        mu = longitudinal_mean(params, int(r["period"]), e, int(r["treat"]), alpha, phi)
        total += -0.5 * (LOG2PI + np.log(s2e)) - 0.5 * (r["y"] - mu) ** 2 / s2e
    return float(total)


def survival_conditional_logdensity(rows: pd.DataFrame, params: ParameterVector,
                                    alpha: float, phi: float) -> float:
    """Exact start-stop log-likelihood of one subject's dropout process."""
    from .model import baseline_hazard, cumulative_baseline_hazard
    if not params.spec.has_survival:
        raise ValueError("model has no dropout submodel")
    rows = _check_start_stop(rows)
    total = 0.0
    for _, r in rows.iterrows():
        eta = params.nu * r["treat"] + params.omega_1 * alpha + params.omega_2 * phi
        cum = (cumulative_baseline_hazard(params.log_lambda, params.log_p, r["tstop"])
               - cumulative_baseline_hazard(params.log_lambda, params.log_p, r["tstart"]))
        if r["event"]:
            total += np.log(baseline_hazard(params.log_lambda, params.log_p, r["tstop"])) + eta
        total -= cum * np.exp(eta)
    return float(total)


def integrate_subject(longitudinal: pd.DataFrame, survival, params: ParameterVector,
                      alpha: float, settings: QuadratureSettings | None = None) -> float:
    """log of the integral over ``phi`` for one subject at a fixed ``alpha``."""
    ws = LikelihoodWorkspace(longitudinal, survival, params.spec, settings)
    if ws.n_subjects == 0:
        # no observed data: the integrand is the prior itself
        return 0.0
    if ws.n_subjects != 1:
        raise ValueError("expected the rows of exactly one subject")
    T = _Terms(ws.subject_terms(transform(params)))
    a = np.full((1, 1), float(alpha))
    st = ws.settings
    if st.adaptive:
        phi, H, ok = _newton_phi(T, a, np.zeros((1, 1)), st.tol, st.max_iter)
        if not ok.all():
            phi, H = np.zeros((1, 1)), -1.0 / T.s2p
    else:
        phi, H = np.zeros((1, 1)), -1.0 / T.s2p
    return float(_inner(T, a, phi, np.broadcast_to(H, (1, 1)), ws.x, ws.logw)[0, 0])


def cluster_loglik(longitudinal: pd.DataFrame, survival, params: ParameterVector,
                   settings: QuadratureSettings | None = None) -> float:
    """Log-likelihood contribution of a single cluster."""
    ws = LikelihoodWorkspace(longitudinal, survival, params.spec, settings)
    if ws.n_clusters != 1:
        raise ValueError("expected the rows of exactly one cluster")
    return ws.loglik(transform(params))


def total_loglik(dataset, params: ParameterVector,
                 settings: QuadratureSettings | None = None) -> float:
    """Marginal log-likelihood of a :class:`~swjm.simulate.TrialDataset`."""
    ws = LikelihoodWorkspace(dataset.longitudinal, dataset.survival, params.spec, settings)
    return ws.loglik(transform(params))

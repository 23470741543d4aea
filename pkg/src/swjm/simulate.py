"""Simulation of stepped wedge trials with (informative) dropout.

The generator follows three steps: longitudinal outcomes in the absence of
dropout, dropout times, then censoring plus start-stop assembly.  All
randomness comes from Philox substreams keyed by ``(master_seed, purpose,
cluster_id)``, so a cluster's draws do not depend on the order in which
clusters are generated.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Union

import numpy as np
import pandas as pd
from scipy.special import expit

from .design import StudyDesign

LONGITUDINAL_COLUMNS = ["cluster_id", "subject_id", "period", "time", "treat", "y",
                        "observed"]
SURVIVAL_COLUMNS = ["cluster_id", "subject_id", "tstart", "tstop", "treat", "event"]

LONGITUDINAL_FILE = "longitudinal.csv"
SURVIVAL_FILE = "survival.csv"

# substream purposes
_RANDOM_EFFECTS, _RESIDUAL, _WEIBULL_U, _LOGISTIC_U = 1, 2, 3, 4


@dataclass(frozen=True)
class NoDropout:
    kind = "none"

    def to_dict(self):
        return {"type": "none"}


@dataclass(frozen=True)
class WeibullDropout:
    """Proportional hazards dropout with a Weibull baseline.

    Hazard ``lambda p t^(p-1) exp(nu X(t) + omega_1 alpha + omega_2 phi)``.
    """

    log_lambda: float = -1.5
    log_shape: float = 0.0
    nu: float = 0.0
    omega_1: float = 0.0
    omega_2: float = 0.0
    kind = "weibull"

    def to_dict(self):
        return {"type": "weibull", "log_lambda": self.log_lambda,
                "log_shape": self.log_shape, "nu": self.nu,
                "omega_1": self.omega_1, "omega_2": self.omega_2}


@dataclass(frozen=True)
class LogisticDropout:
    """Per-period logistic dropout, a deliberately misspecified mechanism."""

    intercept: float = -1.5
    nu: float = 0.0
    omega_1: float = 0.0
    omega_2: float = 0.0
    standardize: bool = True
    kind = "logistic"

    def to_dict(self):
        return {"type": "logistic", "intercept": self.intercept, "nu": self.nu,
                "omega_1": self.omega_1, "omega_2": self.omega_2,
                "standardize": self.standardize}


Dropout = Union[NoDropout, WeibullDropout, LogisticDropout]


def dropout_from_dict(d: dict) -> Dropout:
    d = dict(d)
    kind = d.pop("type")
    if kind == "none":
        return NoDropout()
    if kind == "weibull":
        return WeibullDropout(**d)
    if kind == "logistic":
        return LogisticDropout(**d)
    raise ValueError(f"unknown dropout type {kind!r}")


@dataclass(frozen=True)
class SimConfig:
    """True data-generating parameters for one simulated trial.

    ``treatment_effect`` is a scalar for the constant intervention model or
    a sequence ``delta_0..delta_E`` for the general time-on-treatment model.
    """

    design: StudyDesign
    period_effects: tuple
    treatment_effect: Union[float, tuple]
    var_alpha: float
    var_phi: float
    var_eps: float
    dropout: Dropout = field(default_factory=NoDropout)
    master_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "period_effects",
                           tuple(float(b) for b in self.period_effects))
        if np.ndim(self.treatment_effect) == 0:
            object.__setattr__(self, "treatment_effect", float(self.treatment_effect))
        else:
            object.__setattr__(self, "treatment_effect",
                               tuple(float(d) for d in self.treatment_effect))
            if len(self.treatment_effect) != self.design.max_exposure + 1:
                raise ValueError(
                    f"general time on treatment needs {self.design.max_exposure + 1} "
                    f"effects, got {len(self.treatment_effect)}")
        if len(self.period_effects) != self.design.n_periods:
            raise ValueError("need one period effect per period")
        if self.var_alpha < 0 or self.var_phi < 0:
            raise ValueError("random-effect variances must be nonnegative")
        if self.var_eps <= 0:
            raise ValueError("residual variance must be positive")
        if not 0 <= int(self.master_seed) < 2 ** 64:
            raise ValueError("master_seed must be an unsigned 64-bit integer")
        if isinstance(self.dropout, WeibullDropout):
            if not (np.isfinite(self.dropout.log_lambda)
                    and np.isfinite(self.dropout.log_shape)):
                raise ValueError("Weibull scale and shape must be positive and finite")

    @property
    def general_time_on_treatment(self) -> bool:
        return isinstance(self.treatment_effect, tuple)

    def with_seed(self, seed: int) -> "SimConfig":
        return SimConfig(self.design, self.period_effects, self.treatment_effect,
                         self.var_alpha, self.var_phi, self.var_eps, self.dropout,
                         int(seed))

    def to_dict(self) -> dict:
        te = self.treatment_effect
        return {"design": self.design.to_dict(),
                "params": {"period_effects": list(self.period_effects),
                           "treatment_effect": list(te) if isinstance(te, tuple) else te,
                           "var_alpha": self.var_alpha, "var_phi": self.var_phi,
                           "var_eps": self.var_eps},
                "dropout": self.dropout.to_dict(),
                "seed": int(self.master_seed)}

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        p = d["params"]
        te = p["treatment_effect"]
        return cls(design=StudyDesign.from_dict(d["design"]),
                   period_effects=tuple(p["period_effects"]),
                   treatment_effect=tuple(te) if isinstance(te, list) else te,
                   var_alpha=p["var_alpha"], var_phi=p["var_phi"],
                   var_eps=p["var_eps"],
                   dropout=dropout_from_dict(d.get("dropout", {"type": "none"})),
                   master_seed=int(d.get("seed", 0)))


@dataclass
class TrialDataset:
    """Longitudinal and start-stop survival tables of one trial.

    ``alpha`` (per cluster) and ``phi`` (clusters x subjects) hold the true
    random effects when the data were simulated; they are never exported.
    """

    longitudinal: pd.DataFrame
    survival: pd.DataFrame
    alpha: np.ndarray | None = None
    phi: np.ndarray | None = None

    @property
    def observed(self) -> pd.DataFrame:
        return self.longitudinal[self.longitudinal["observed"]]

    def to_csv(self, out_dir) -> tuple[str, str]:
        os.makedirs(out_dir, exist_ok=True)
        lon = self.longitudinal[LONGITUDINAL_COLUMNS].copy()
        lon["y"] = lon["y"].where(lon["observed"])
        lon["observed"] = lon["observed"].astype(int)
        lpath = os.path.join(out_dir, LONGITUDINAL_FILE)
        spath = os.path.join(out_dir, SURVIVAL_FILE)
        lon.to_csv(lpath, index=False, float_format="%.17g", lineterminator="\n")
        self.survival[SURVIVAL_COLUMNS].to_csv(spath, index=False, float_format="%.17g",
                                               lineterminator="\n")
        return lpath, spath

    @classmethod
    def from_csv(cls, longitudinal_path, survival_path=None) -> "TrialDataset":
        lon = read_table(longitudinal_path, LONGITUDINAL_COLUMNS)
        lon["observed"] = lon["observed"].astype(bool)
        if survival_path is None:
            surv = pd.DataFrame({c: pd.Series(dtype=float) for c in SURVIVAL_COLUMNS})
        else:
            surv = read_table(survival_path, SURVIVAL_COLUMNS)
        return cls(lon, surv)


def read_table(path, columns) -> pd.DataFrame:
    """Read a CSV and insist on exactly ``columns`` in its header."""
    df = pd.read_csv(path, float_precision="round_trip")
    header = list(df.columns)
    extra = [c for c in header if c not in columns]
    missing = [c for c in columns if c not in header]
    if extra or missing:
        parts = ([f"unexpected column(s) {extra}"] if extra else []) + \
                ([f"missing column(s) {missing}"] if missing else [])
        raise ValueError(f"{path}: " + "; ".join(parts))
    return df[columns]


def _stream(seed: int, purpose: int, cluster_id: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=(purpose, int(cluster_id)))
    return np.random.Generator(np.random.Philox(ss))


def draw_random_effects(config: SimConfig, seed: int | None = None):
    """Cluster intercepts ``alpha`` (C,) and subject intercepts ``phi`` (C, n)."""
    seed = config.master_seed if seed is None else seed
    d = config.design
    sa, sp = np.sqrt(config.var_alpha), np.sqrt(config.var_phi)
    alpha = np.empty(d.n_clusters)
    phi = np.empty((d.n_clusters, d.subjects_per_cluster))
    for c in range(d.n_clusters):
        z = _stream(seed, _RANDOM_EFFECTS, c + 1).standard_normal(1 + d.subjects_per_cluster)
        alpha[c] = sa * z[0]
        phi[c] = sp * z[1:]
    return alpha, phi


def _skeleton(design: StudyDesign) -> pd.DataFrame:
    """One row per subject and period, measured at the period's end."""
    C, n, J = design.n_clusters, design.subjects_per_cluster, design.n_periods
    cluster = np.repeat(np.arange(1, C + 1), n * J)
    subject = np.tile(np.repeat(np.arange(1, n + 1), J), C)
    period = np.tile(np.arange(1, J + 1), C * n)
    xo = design.crossover_period_array()[cluster - 1]
    treat = (period >= xo).astype(int)
    exposure = np.where(treat == 1, period - xo, -1)
    return pd.DataFrame({"cluster_id": cluster, "subject_id": subject, "period": period,
                         "time": period.astype(float), "treat": treat,
                         "exposure": exposure})


def simulate_longitudinal(config: SimConfig, random_effects, seed: int | None = None):
    """Uncensored outcomes for every subject in every period."""
    seed = config.master_seed if seed is None else seed
    d = config.design
    alpha, phi = random_effects
    df = _skeleton(d)
    n, J = d.subjects_per_cluster, d.n_periods
    eps = np.concatenate([
        _stream(seed, _RESIDUAL, c + 1).standard_normal(n * J)
        for c in range(d.n_clusters)]) * np.sqrt(config.var_eps)
    beta = np.asarray(config.period_effects)
    if config.general_time_on_treatment:
        deltas = np.asarray(config.treatment_effect)
        effect = np.where(df["treat"] == 1, deltas[df["exposure"].clip(lower=0)], 0.0)
    else:
        effect = config.treatment_effect * df["treat"].to_numpy()
    ci = df["cluster_id"].to_numpy() - 1
    si = df["subject_id"].to_numpy() - 1
    df["y"] = beta[df["period"].to_numpy() - 1] + effect + alpha[ci] + phi[ci, si] + eps
    return df


def weibull_dropout_time(u, log_lambda, log_p, nu, re_lin, switch_time):
    """Closed-form inversion of the two-piece cumulative hazard.

    Treatment switches on at ``switch_time``.  Before it the cumulative
    hazard is ``lambda e^{re_lin} t^p``; after it the treated hazard
    ``lambda e^{nu + re_lin} p t^(p-1)`` applies.  Returns untruncated times.
    """
    u, re_lin, switch_time = np.broadcast_arrays(
        np.asarray(u, float), np.asarray(re_lin, float), np.asarray(switch_time, float))
    lam, p = np.exp(log_lambda), np.exp(log_p)
    target = -np.log(u)
    scale0 = lam * np.exp(re_lin)
    scale1 = lam * np.exp(nu + re_lin)
    with np.errstate(over="ignore", invalid="ignore"):
        tJp = switch_time ** p
        b = scale0 * tJp
        before = (target / scale0) ** (1.0 / p)
        after = ((target - scale0 * tJp + scale1 * tJp) / scale1) ** (1.0 / p)
    out = np.where(target < b, before, after)
    return out if out.ndim else float(out)


def _subject_index(design: StudyDesign):
    C, n = design.n_clusters, design.subjects_per_cluster
    return np.repeat(np.arange(1, C + 1), n), np.tile(np.arange(1, n + 1), C)


def simulate_dropout_weibull(config: SimConfig, random_effects, seed: int | None = None):
    """Per-subject dropout time and event flag, censored at ``T_J``."""
    seed = config.master_seed if seed is None else seed
    dr = config.dropout
    d = config.design
    alpha, phi = random_effects
    u = np.concatenate([_stream(seed, _WEIBULL_U, c + 1).random(d.subjects_per_cluster)
                        for c in range(d.n_clusters)])
    u = np.clip(u, np.finfo(float).tiny, None)
    cluster, subject = _subject_index(d)
    re_lin = dr.omega_1 * alpha[cluster - 1] + dr.omega_2 * phi.ravel()
    switch = d.crossover_period_array()[cluster - 1] - 1.0
    t = weibull_dropout_time(u, dr.log_lambda, dr.log_shape, dr.nu, re_lin, switch)
    event = t <= d.end_time
    return pd.DataFrame({"cluster_id": cluster, "subject_id": subject,
                         "time": np.where(event, t, d.end_time),
                         "event": event.astype(int)})


def simulate_dropout_logistic(config: SimConfig, random_effects, seed: int | None = None):
    """Discrete per-period dropout from a mixed-effects logistic model.

    The linear predictor net of the intercept is centred and scaled by its
    empirical mean and standard deviation over all subject-periods.  A
    dropout in period ``j`` is placed at the period's end, ``t = j``.
    """
    seed = config.master_seed if seed is None else seed
    dr = config.dropout
    d = config.design
    alpha, phi = random_effects
    C, n, J = d.n_clusters, d.subjects_per_cluster, d.n_periods
    periods = np.arange(1, J + 1)
    treat = (periods[None, :] >= d.crossover_period_array()[:, None]).astype(float)
    lin = (dr.nu * treat[:, None, :] + dr.omega_1 * alpha[:, None, None]
           + dr.omega_2 * phi[:, :, None])
    lin = np.broadcast_to(lin, (C, n, J))
    if dr.standardize:
        sd = lin.std()
        if sd > 1e-12 * max(1.0, abs(lin.mean())):
            lin = (lin - lin.mean()) / sd
    prob = expit(dr.intercept + lin)
    draws = np.stack([_stream(seed, _LOGISTIC_U, c + 1).random((n, J)) for c in range(C)])
    hit = draws < prob
    any_hit = hit.any(axis=2).ravel()
    first = hit.argmax(axis=2).ravel() + 1
    cluster, subject = _subject_index(d)
    return pd.DataFrame({"cluster_id": cluster, "subject_id": subject,
                         "time": np.where(any_hit, first, J).astype(float),
                         "event": any_hit.astype(int)})


def censor_and_assemble(longitudinal: pd.DataFrame, dropout: pd.DataFrame,
                        design: StudyDesign, random_effects=None) -> TrialDataset:
    """Censor outcomes after dropout and build start-stop survival rows.

    A measurement taken exactly at the dropout time is kept.  Survival rows
    are split at the cluster's crossover time.
    """
    key = ["cluster_id", "subject_id"]
    lsub = longitudinal[key].drop_duplicates().sort_values(key).to_numpy()
    dsub = dropout[key].sort_values(key).to_numpy()
    if lsub.shape != dsub.shape or np.any(lsub != dsub):
        raise ValueError("longitudinal and dropout tables cover different subjects")
    lon = longitudinal.merge(dropout[key + ["time"]].rename(columns={"time": "_ts"}),
                             on=key, how="left", sort=False)
    lon["observed"] = lon["time"].to_numpy() <= lon.pop("_ts").to_numpy()

    d = dropout.sort_values(key).reset_index(drop=True)
    tstop = d["time"].to_numpy(float)
    event = d["event"].to_numpy(int)
    switch = design.crossover_period_array()[d["cluster_id"].to_numpy() - 1] - 1.0
    split = tstop > switch
    rows_pre = pd.DataFrame({
        "cluster_id": d["cluster_id"], "subject_id": d["subject_id"],
        "tstart": 0.0, "tstop": np.where(split, switch, tstop), "treat": 0,
        "event": np.where(split, 0, event)})
    rows_post = pd.DataFrame({
        "cluster_id": d["cluster_id"][split], "subject_id": d["subject_id"][split],
        "tstart": switch[split], "tstop": tstop[split], "treat": 1,
        "event": event[split]})
    surv = (pd.concat([rows_pre, rows_post], ignore_index=True)
            .sort_values(key + ["tstart"], kind="mergesort").reset_index(drop=True))
    alpha, phi = random_effects if random_effects is not None else (None, None)
    return TrialDataset(lon.reset_index(drop=True), surv, alpha, phi)


def simulate_trial(config: SimConfig) -> TrialDataset:
    """Simulate one complete trial dataset from ``config``."""
    effects = draw_random_effects(config)
    lon = simulate_longitudinal(config, effects)
    d = config.design
    if isinstance(config.dropout, WeibullDropout):
        drop = simulate_dropout_weibull(config, effects)
    elif isinstance(config.dropout, LogisticDropout):
        drop = simulate_dropout_logistic(config, effects)
    else:
        cluster, subject = _subject_index(d)
        drop = pd.DataFrame({"cluster_id": cluster, "subject_id": subject,
                             "time": d.end_time, "event": 0})
    return censor_and_assemble(lon, drop, d, effects)

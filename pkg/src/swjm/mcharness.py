"""Monte Carlo performance studies comparing the mixed and joint models.

Every repetition draws its own seed from ``(master_seed, scenario label,
rep)``, so any single repetition can be re-run in isolation and results do
not depend on how work is spread over processes.
"""
from __future__ import annotations

import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .design import build_standard_design
from .estimate import FitOptions, fit
from .model import ModelSpec, icc_from_variances
from .simulate import LogisticDropout, SimConfig, WeibullDropout, simulate_trial

RAW_COLUMNS = ["scenario", "rep", "model", "estimand", "true", "estimate", "se",
               "ci_lo", "ci_hi", "converged"]
SUMMARY_COLUMNS = ["scenario", "model", "estimand", "measure", "value", "mcse",
                   "n_converged"]
MEASURES = ("bias", "rel_bias", "empse", "modse", "coverage", "convergence")
MODELS = ("LMM", "JM")
FLOAT_FORMAT = "%.17g"

# (clusters per sequence, subjects per cluster, repetitions)
SCALES = {"paper": (8, 50, 1000), "desk": (2, 20, 200)}

BASE = dict(n_sequences=4, n_periods=5, beta=30.0, var_alpha=2.0, var_phi=55.0,
            var_eps=40.0, log_lambda=-1.5, log_shape=0.0)
OMEGAS = {"0.5": math.log(0.5), "0.9": math.log(0.9), "1.0": 0.0, "2.0": math.log(2.0)}
STUDY_A_EFFECTS = (0.0, 5.0, 25.0)
STUDY_B_EFFECTS = ((0.0, 0.0, 0.0, 0.0), (0.0, 2.5, 5.0, 6.25), (0.0, 12.5, 25.0, 31.25))
NUS = (-0.2, 0.0)


@dataclass(frozen=True)
class Scenario:
    """One data-generating mechanism plus the number of repetitions."""

    label: str
    config: SimConfig
    n_reps: int
    metadata: dict = field(default_factory=dict, compare=False)

    @property
    def design(self):
        return self.config.design

    def model_specs(self) -> dict:
        """The LMM and the Weibull joint model with free association."""
        J = self.design.n_periods
        if self.config.general_time_on_treatment:
            kw = dict(outcome="gtot", max_exposure=self.design.max_exposure)
        else:
            kw = dict(outcome="constant")
        return {"LMM": ModelSpec.lmm(J, **kw),
                "JM": ModelSpec.joint(J, association="free", baseline="weibull", **kw)}

    def true_values(self) -> dict:
        cfg = self.config
        out = {f"beta_{j}": b for j, b in enumerate(cfg.period_effects, start=1)}
        if cfg.general_time_on_treatment:
            out.update({f"delta_{e}": d for e, d in enumerate(cfg.treatment_effect)})
        else:
            out["delta"] = cfg.treatment_effect
        out["rho_a"], out["rho_d"] = icc_from_variances(cfg.var_alpha, cfg.var_phi,
                                                        cfg.var_eps)
        return out

    def to_dict(self) -> dict:
        return {"label": self.label, "n_reps": self.n_reps,
                "config": self.config.to_dict(), "metadata": dict(self.metadata)}

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        return cls(d["label"], SimConfig.from_dict(d["config"]), int(d["n_reps"]),
                   dict(d.get("metadata", {})))


def _scale(scale: str):
    if scale not in SCALES:
        raise ValueError(f"unknown scale {scale!r}; choose from {sorted(SCALES)}")
    return SCALES[scale]


def _metadata(cfg: SimConfig, mechanism: str) -> dict:
    ra, rd = icc_from_variances(cfg.var_alpha, cfg.var_phi, cfg.var_eps)
    return {"hazard_ratio": float(np.exp(cfg.dropout.nu)), "rho_a": ra, "rho_d": rd,
            "dropout": mechanism,
            "standardize": bool(getattr(cfg.dropout, "standardize", False))}


def _scenario(label, n_clusters_seq, n_subjects, n_reps, effect, nu, omega,
              variances=None, dropout=None) -> Scenario:
    design = build_standard_design(BASE["n_sequences"], BASE["n_periods"],
                                   n_clusters_seq, n_subjects)
    va, vp, ve = variances or (BASE["var_alpha"], BASE["var_phi"], BASE["var_eps"])
    if dropout is None:
        dropout = WeibullDropout(BASE["log_lambda"], BASE["log_shape"], nu, omega, omega)
    cfg = SimConfig(design, (BASE["beta"],) * BASE["n_periods"], effect, va, vp, ve,
                    dropout)
    mechanism = "logistic" if isinstance(dropout, LogisticDropout) else "weibull"
    return Scenario(label, cfg, n_reps, _metadata(cfg, mechanism))


def _fmt(v) -> str:
    return f"{v:g}"


def build_paper_grid(study: str, scale: str = "paper", n_reps: int | None = None):
    """The 3 x 2 x 4 grid of effect size, dropout effect and association.

    Study ``"A"`` uses a constant intervention effect, study ``"B"`` a
    general time-on-treatment effect.
    """
    m, n, reps = _scale(scale)
    reps = n_reps or reps
    if study == "A":
        effects = STUDY_A_EFFECTS
    elif study == "B":
        effects = STUDY_B_EFFECTS
    else:
        raise ValueError(f"unknown study {study!r}; expected 'A' or 'B'")
    out = []
    for effect in effects:
        tag = _fmt(effect) if study == "A" else "-".join(_fmt(e) for e in effect)
        for nu in NUS:
            for wname, omega in OMEGAS.items():
                label = f"{study}_d{tag}_nu{_fmt(nu)}_w{wname}"
                out.append(_scenario(label, m, n, reps, effect, nu, omega))
    return out


def build_additional_scenarios(scale: str = "paper", n_reps: int | None = None):
    """Sensitivity scenarios around the informative base case.

    At desk scale the cluster counts are divided by four (rounded up) and
    cohort sizes are multiplied by 0.4, mirroring the desk preset.
    """
    m, n, reps = _scale(scale)
    reps = n_reps or reps
    nu, omega = -0.2, OMEGAS["0.9"]
    if scale == "paper":
        few, big = 3, 100
    else:
        few, big = math.ceil(3 / 4), round(100 * 0.4)
    return [
        _scenario("X1_3clusters", few, n, reps, 5.0, nu, omega),
        _scenario("X2_3clusters_100subjects", few, big, reps, 5.0, nu, omega),
        _scenario("X3_halved_variances", m, n, reps, 5.0, nu, omega, (1.0, 27.5, 40.0)),
        _scenario("X4_doubled_variances", m, n, reps, 5.0, nu, omega, (4.0, 110.0, 40.0)),
        _scenario("X5_logistic", m, n, reps, 5.0, nu, omega,
                  dropout=LogisticDropout(-1.5, nu, omega, omega, standardize=True)),
    ]


def repetition_seed(master_seed: int, label: str, rep: int) -> int:
    """64-bit seed for one repetition of one scenario."""
    ss = np.random.SeedSequence([int(master_seed), zlib.crc32(label.encode()), int(rep)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _rows(label, rep, model, truth, result):
    rows = []
    if result is None:
        for name, true in truth.items():
            rows.append((label, rep, model, name, true, np.nan, np.nan, np.nan, np.nan,
                         False))
        return rows
    frame = result.to_frame().set_index("name")
    for name, true in truth.items():
        if name in frame.index:
            r = frame.loc[name]
            rows.append((label, rep, model, name, true, r.estimate, r.se, r.ci_lo,
                         r.ci_hi, bool(result.converged)))
        else:
            rows.append((label, rep, model, name, true, np.nan, np.nan, np.nan, np.nan,
                         False))
    return rows


def run_repetition(scenario: Scenario, rep: int, master_seed: int = 0,
                   options: FitOptions | None = None) -> list:
    """Simulate one trial and fit both models; returns raw result tuples."""
    seed = repetition_seed(master_seed, scenario.label, rep)
    data = simulate_trial(scenario.config.with_seed(seed))
    truth = scenario.true_values()
    rows = []
    previous = None
    for model, spec in scenario.model_specs().items():
        try:
            result = fit(data, spec, options,
                         start=previous if spec.has_survival else None)
        except Exception:  # recorded as a failed fit, never aborts the scenario
            result = None
        if not spec.has_survival:
            previous = result
        rows.extend(_rows(scenario.label, rep, model, truth, result))
    return rows


def _task(args):
    scenario, rep, master_seed, options = args
    return run_repetition(scenario, rep, master_seed, options)


def sort_raw(df: pd.DataFrame, scenarios=None) -> pd.DataFrame:
    """Canonical row order: scenario order, rep, model, estimand."""
    order = {s: i for i, s in enumerate(scenarios or sorted(df["scenario"].unique()))}
    model_order = {m: i for i, m in enumerate(MODELS)}
    key = pd.DataFrame({
        "s": df["scenario"].map(order).fillna(len(order)),
        "r": df["rep"], "m": df["model"].map(model_order).fillna(len(MODELS)),
    })
    df = df.assign(_s=key["s"], _m=key["m"], _e=df.groupby(
        ["scenario", "rep", "model"], sort=False).cumcount())
    df = df.sort_values(["_s", "rep", "_m", "_e"], kind="stable")
    return df.drop(columns=["_s", "_m", "_e"]).reset_index(drop=True)


def run_scenarios(scenarios, workers: int = 1, master_seed: int = 0,
                  options: FitOptions | None = None, existing: pd.DataFrame | None = None,
                  n_reps: int | None = None) -> pd.DataFrame:
    """Raw results for several scenarios, reusing rows already in ``existing``.

    Only (scenario, rep) cells absent from ``existing`` are computed.
    """
    done = set()
    if existing is not None and len(existing):
        done = set(zip(existing["scenario"], existing["rep"].astype(int)))
    tasks = [(s, r, master_seed, options) for s in scenarios
             for r in range(1, (n_reps or s.n_reps) + 1) if (s.label, r) not in done]
    rows = []
    if workers <= 1 or len(tasks) <= 1:
        for t in tasks:
            rows.extend(_task(t))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for out in pool.map(_task, tasks, chunksize=1):
                rows.extend(out)
    new = pd.DataFrame(rows, columns=RAW_COLUMNS)
    frames = [f for f in (existing, new) if f is not None and len(f)]
    raw = pd.concat(frames, ignore_index=True) if frames else new
    raw["rep"] = raw["rep"].astype(int)
    raw["converged"] = raw["converged"].astype(bool)
    return sort_raw(raw, [s.label for s in scenarios])


def run_scenario(scenario: Scenario, workers: int = 1, master_seed: int = 0,
                 options: FitOptions | None = None, n_reps: int | None = None):
    return run_scenarios([scenario], workers, master_seed, options, n_reps=n_reps)


def write_raw(raw: pd.DataFrame, path):
    out = raw.copy()
    out["converged"] = out["converged"].astype(int)
    out.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def read_raw(path) -> pd.DataFrame:
    raw = pd.read_csv(path, float_precision="round_trip")
    missing = [c for c in RAW_COLUMNS if c not in raw.columns]
    if missing:
        raise ValueError(f"raw results file lacks columns {missing}")
    raw["converged"] = raw["converged"].astype(bool)
    return raw[RAW_COLUMNS]


def _cell_measures(g: pd.DataFrame):
    n = len(g)
    ok = g[g["converged"]]
    k = len(ok)
    true = float(g["true"].iloc[0])
    conv = k / n if n else np.nan
    out = {"convergence": (conv, math.sqrt(conv * (1 - conv) / n) if n else np.nan)}
    if k < 2:
        for m in MEASURES[:-1]:
            out[m] = (np.nan, np.nan)
        return out, k
    est = ok["estimate"].to_numpy(float)
    se = ok["se"].to_numpy(float)
    bias = est.mean() - true
    empse = est.std(ddof=1)
    out["bias"] = (bias, empse / math.sqrt(k))
    if true != 0:
        out["rel_bias"] = (bias / true, empse / math.sqrt(k) / abs(true))
    else:
        out["rel_bias"] = (np.nan, np.nan)
    out["empse"] = (empse, empse / math.sqrt(2 * (k - 1)))
    if np.all(np.isfinite(se)):
        modse = math.sqrt(np.mean(se ** 2))
        mc = math.sqrt(np.var(se ** 2, ddof=1) / (4 * k * modse ** 2)) if modse > 0 else np.nan
        out["modse"] = (modse, mc)
    else:
        out["modse"] = (np.nan, np.nan)
    lo, hi = ok["ci_lo"].to_numpy(float), ok["ci_hi"].to_numpy(float)
    cover = float(np.mean((lo <= true) & (true <= hi)))
    out["coverage"] = (cover, math.sqrt(cover * (1 - cover) / k))
    return out, k


def performance_measures(raw: pd.DataFrame) -> pd.DataFrame:
    """Long-format bias, relative bias, empirical and model SE, coverage, convergence.

    Measures use converged repetitions only; cells with fewer than two are
    reported as missing.  Relative bias is a fraction and is missing when
    the true value is zero.
    """
    rows = []
    for (scen, model, estimand), g in raw.groupby(["scenario", "model", "estimand"],
                                                  sort=False):
        measures, k = _cell_measures(g)
        for m in MEASURES:
            v, mc = measures[m]
            rows.append((scen, model, estimand, m, v, mc, k))
    return pd.DataFrame(rows, columns=SUMMARY_COLUMNS)


def plan_repetitions(pilot: pd.DataFrame, target: float, estimand: str = "delta",
                     model: str = "JM", absolute: bool = False) -> int:
    """Repetitions needed for MCSE(bias) to reach ``target``.

    ``target`` is a fraction of the absolute true value unless ``absolute``
    is set, in which case it is in the estimand's own units.
    """
    if target <= 0:
        raise ValueError("target must be positive")
    cell = pilot[(pilot["estimand"] == estimand) & (pilot["model"] == model)]
    ok = cell[cell["converged"].astype(bool)]
    if len(ok) < 10:
        raise ValueError(f"pilot has {len(ok)} converged repetitions; need at least 10")
    empse = ok["estimate"].std(ddof=1)
    if absolute:
        scale = target
    else:
        true = cell["true"].iloc[0]
        if true == 0:
            raise ValueError("true value is zero; give the target in absolute units")
        scale = target * abs(true)
    return int(math.ceil((empse / scale) ** 2))


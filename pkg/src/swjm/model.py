"""Model specifications, parameter vectors and shared primitives.

The parameter vector has a fixed layout for a given :class:`ModelSpec`::

    beta_1 .. beta_J,
    delta                      (constant intervention)
      or delta_0 .. delta_E    (general time on treatment),
    var_alpha, var_phi, var_eps,
    nu, <association>, log_lambda, [log_p]    (joint models only)

where ``<association>`` is ``omega_1, omega_2`` (free), ``omega`` (equal),
``omega_1`` (cluster only), ``omega_2`` (subject only) or nothing.
``log_p`` is present for a Weibull baseline only.

On the transformed (optimisation) scale the three variances are replaced by
their logarithms; every other entry is already unconstrained.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

OUTCOME_STRUCTURES = ("constant", "gtot")
DROPOUT_SUBMODELS = ("none", "ph")
BASELINES = ("exponential", "weibull")
ASSOCIATIONS = ("free", "equal", "cluster_only", "subject_only", "none")

VARIANCE_NAMES = ("var_alpha", "var_phi", "var_eps")


@dataclass(frozen=True)
class ModelSpec:
    """Which submodels and constraints are active.

    ``dropout="none"`` is the plain linear mixed model; ``dropout="ph"``
    adds the proportional hazards dropout submodel linked through the
    shared random intercepts.
    """

    n_periods: int
    outcome: str = "constant"
    dropout: str = "none"
    baseline: str = "weibull"
    association: str = "none"
    max_exposure: int = 0

    def __post_init__(self):
        if self.outcome not in OUTCOME_STRUCTURES:
            raise ValueError(f"unknown outcome structure {self.outcome!r}")
        if self.dropout not in DROPOUT_SUBMODELS:
            raise ValueError(f"unknown dropout submodel {self.dropout!r}")
        if self.baseline not in BASELINES:
            raise ValueError(f"unknown baseline hazard {self.baseline!r}")
        if self.association not in ASSOCIATIONS:
            raise ValueError(f"unknown association {self.association!r}")
        if self.dropout == "none" and self.association != "none":
            raise ValueError("an association structure requires the dropout submodel")
        if self.n_periods < 1 or self.max_exposure < 0:
            raise ValueError("n_periods must be >= 1 and max_exposure >= 0")

    @classmethod
    def lmm(cls, n_periods, outcome="constant", max_exposure=0):
        return cls(n_periods=n_periods, outcome=outcome, max_exposure=max_exposure)

    @classmethod
    def joint(cls, n_periods, outcome="constant", association="free",
              baseline="weibull", max_exposure=0):
        return cls(n_periods=n_periods, outcome=outcome, dropout="ph",
                   baseline=baseline, association=association,
                   max_exposure=max_exposure)

    @property
    def has_survival(self) -> bool:
        return self.dropout == "ph"

    @cached_property
    def layout(self) -> "ParameterLayout":
        return ParameterLayout(self)

    def to_dict(self) -> dict:
        return {"n_periods": self.n_periods, "outcome": self.outcome,
                "dropout": self.dropout, "baseline": self.baseline,
                "association": self.association,
                "max_exposure": self.max_exposure}


class ParameterLayout:
    """Index bookkeeping for a spec's parameter vector."""

    def __init__(self, spec: ModelSpec):
        J = spec.n_periods
        names = [f"beta_{j}" for j in range(1, J + 1)]
        if spec.outcome == "constant":
            names.append("delta")
        else:
            names += [f"delta_{e}" for e in range(spec.max_exposure + 1)]
        self.n_fixed = len(names)
        names += list(VARIANCE_NAMES)
        if spec.has_survival:
            names.append("nu")
            names += {"free": ["omega_1", "omega_2"], "equal": ["omega"],
                      "cluster_only": ["omega_1"], "subject_only": ["omega_2"],
                      "none": []}[spec.association]
            names.append("log_lambda")
            if spec.baseline == "weibull":
                names.append("log_p")
        self.names = tuple(names)
        self.index = {n: i for i, n in enumerate(names)}
        self.fixed = np.arange(self.n_fixed)
        self.variances = np.array([self.index[n] for n in VARIANCE_NAMES])
        self.n_periods = J

    def __len__(self):
        return len(self.names)

    def get(self, name):
        return self.index.get(name)


class ParameterVector:
    """Natural-scale parameter values laid out per :class:`ModelSpec`."""

    def __init__(self, spec: ModelSpec, values):
        values = np.asarray(values, dtype=float)
        if values.shape != (len(spec.layout),):
            raise ValueError(
                f"expected {len(spec.layout)} values, got shape {values.shape}")
        self.spec = spec
        self.values = values

    @classmethod
    def from_dict(cls, spec: ModelSpec, d: dict) -> "ParameterVector":
        """Build from a name -> value map.

        ``lambda`` and ``p`` are accepted in place of ``log_lambda`` and
        ``log_p``; ``omega_1``/``omega_2`` fill a single ``omega`` when they
        agree.
        """
        d = dict(d)
        if "lambda" in d and "log_lambda" not in d:
            d["log_lambda"] = np.log(d.pop("lambda"))
        if "p" in d and "log_p" not in d:
            d["log_p"] = np.log(d.pop("p"))
        if "omega" in spec.layout.index and "omega" not in d:
            if d.get("omega_1") != d.get("omega_2"):
                raise ValueError("equal association needs omega_1 == omega_2")
            d["omega"] = d["omega_1"]
        missing = [n for n in spec.layout.names if n not in d]
        if missing:
            raise ValueError(f"missing parameters: {missing}")
        return cls(spec, [d[n] for n in spec.layout.names])

    def __getitem__(self, name):
        return float(self.values[self.spec.layout.index[name]])

    @property
    def names(self):
        return self.spec.layout.names

    @property
    def beta(self):
        return self.values[:self.spec.n_periods]

    @property
    def delta(self):
        return self.values[self.spec.n_periods:self.spec.layout.n_fixed]

    @property
    def omega_1(self) -> float:
        idx = self.spec.layout.index
        if "omega" in idx:
            return self["omega"]
        return self["omega_1"] if "omega_1" in idx else 0.0

    @property
    def omega_2(self) -> float:
        idx = self.spec.layout.index
        if "omega" in idx:
            return self["omega"]
        return self["omega_2"] if "omega_2" in idx else 0.0

    @property
    def nu(self) -> float:
        return self["nu"] if self.spec.has_survival else 0.0

    @property
    def log_lambda(self) -> float:
        return self["log_lambda"]

    @property
    def log_p(self) -> float:
        return self["log_p"] if "log_p" in self.spec.layout.index else 0.0

    def to_dict(self) -> dict:
        """Flat map keyed by canonical names.

        Under the equal association the shared loading is reported as both
        ``omega_1`` and ``omega_2``.
        """
        out = {n: float(v) for n, v in zip(self.names, self.values)}
        if "omega" in out:
            w = out.pop("omega")
            out["omega_1"] = out["omega_2"] = w
        return out

    def __repr__(self):
        body = ", ".join(f"{n}={v:.6g}" for n, v in zip(self.names, self.values))
        return f"ParameterVector({body})"


def transform(params: ParameterVector) -> np.ndarray:
    """Map natural-scale parameters to the unconstrained optimisation scale."""
    theta = params.values.copy()
    iv = params.spec.layout.variances
    if np.any(theta[iv] <= 0):
        raise ValueError("variances must be strictly positive")
    theta[iv] = np.log(theta[iv])
    return theta


def untransform(spec: ModelSpec, theta) -> ParameterVector:
    values = np.array(theta, dtype=float)
    iv = spec.layout.variances
    values[iv] = np.exp(values[iv])
    return ParameterVector(spec, values)


def longitudinal_mean(params: ParameterVector, period: int, exposure, treat: int,
                      alpha: float = 0.0, phi: float = 0.0) -> float:
    """Conditional mean ``beta_j + treatment term + alpha + phi``."""
    spec = params.spec
    if not 1 <= period <= spec.n_periods:
        raise ValueError(f"period {period} out of range")
    mean = params.beta[period - 1] + alpha + phi
    if treat:
        if spec.outcome == "constant":
            mean += params["delta"]
        else:
            if exposure is None or not 0 <= exposure <= spec.max_exposure:
                raise ValueError(f"exposure index {exposure!r} out of range")
            mean += params.delta[exposure]
    return float(mean)


def _check_time(t):
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("time must be nonnegative")
    return t


def baseline_hazard(log_lambda, log_p, t):
    """Weibull baseline hazard ``lambda p t^(p-1)`` (exponential when log_p = 0)."""
    t = _check_time(t)
    lam, p = np.exp(log_lambda), np.exp(log_p)
    with np.errstate(divide="ignore"):
        return lam * p * t ** (p - 1.0)


def cumulative_baseline_hazard(log_lambda, log_p, t):
    """``lambda t^p``."""
    t = _check_time(t)
    return np.exp(log_lambda) * t ** np.exp(log_p)


def icc_from_variances(var_alpha, var_phi, var_eps):
    """Within-individual and between-individual intra-class correlations."""
    if min(var_alpha, var_phi, var_eps) < 0:
        raise ValueError("variances must be nonnegative")
    total = var_alpha + var_phi + var_eps
    if total <= 0:
        raise ValueError("at least one variance must be positive")
    return (var_alpha + var_phi) / total, var_alpha / total

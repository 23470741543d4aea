"""Closed-cohort stepped wedge designs.

Periods have unit length, so period ``j`` covers the calendar interval
``(j - 1, j]`` and the study ends at ``T_J = n_periods``.  Clusters are
numbered from 1, sequence-major: clusters ``1..m`` belong to sequence 1,
``m+1..2m`` to sequence 2 and so on.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class StudyDesign:
    """Sequences x periods layout of a stepped wedge trial.

    Parameters
    ----------
    n_sequences : int
        Number of intervention sequences.
    n_periods : int
        Number of calendar periods ``J``.
    clusters_per_sequence : int
        Clusters randomised to each sequence.
    subjects_per_cluster : int
        Closed-cohort size, recruited at ``t = 0``.
    crossover_periods : tuple of int
        First treated period of every sequence.  Must be strictly
        increasing and lie in ``[2, n_periods]``.
    """

    n_sequences: int
    n_periods: int
    clusters_per_sequence: int
    subjects_per_cluster: int
    crossover_periods: tuple[int, ...] = field(default=())

    def __post_init__(self):
        for name in ("n_sequences", "n_periods", "clusters_per_sequence",
                     "subjects_per_cluster"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        xo = tuple(int(s) for s in self.crossover_periods)
        object.__setattr__(self, "crossover_periods", xo)
        if len(xo) != self.n_sequences:
            raise ValueError(
                f"need one crossover period per sequence ({self.n_sequences}), got {len(xo)}")
        for s in xo:
            if not 2 <= s <= self.n_periods:
                raise ValueError(
                    f"crossover period {s} outside [2, {self.n_periods}]")
        if any(b <= a for a, b in zip(xo, xo[1:])):
            raise ValueError("crossover periods must be strictly increasing")

    @property
    def n_clusters(self) -> int:
        return self.n_sequences * self.clusters_per_sequence

    @property
    def n_subjects(self) -> int:
        return self.n_clusters * self.subjects_per_cluster

    @property
    def end_time(self) -> float:
        return float(self.n_periods)

    @property
    def max_exposure(self) -> int:
        """Largest exposure duration ``j - s`` that occurs in the design."""
        return self.n_periods - min(self.crossover_periods)

    def cluster_ids(self) -> np.ndarray:
        return np.arange(1, self.n_clusters + 1)

    def sequence_of(self, cluster_id: int) -> int:
        """1-based sequence of a cluster."""
        self._check_cluster(cluster_id)
        return (int(cluster_id) - 1) // self.clusters_per_sequence + 1

    def crossover_period(self, cluster_id: int) -> int:
        return self.crossover_periods[self.sequence_of(cluster_id) - 1]

    def crossover_time(self, cluster_id: int) -> float:
        """Calendar time at which the cluster switches to treatment."""
        return float(self.crossover_period(cluster_id) - 1)

    def crossover_period_array(self) -> np.ndarray:
        """Crossover period per cluster, indexed by ``cluster_id - 1``."""
        return np.repeat(np.asarray(self.crossover_periods), self.clusters_per_sequence)

    def _check_cluster(self, cluster_id):
        if int(cluster_id) != cluster_id or not 1 <= cluster_id <= self.n_clusters:
            raise ValueError(f"invalid cluster id {cluster_id!r}")

    def to_dict(self) -> dict:
        return {
            "n_sequences": self.n_sequences,
            "n_periods": self.n_periods,
            "clusters_per_sequence": self.clusters_per_sequence,
            "subjects_per_cluster": self.subjects_per_cluster,
            "crossover_periods": list(self.crossover_periods),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StudyDesign":
        d = dict(d)
        if "crossover_periods" not in d or d["crossover_periods"] is None:
            d.pop("crossover_periods", None)
            return build_standard_design(**d)
        d["crossover_periods"] = tuple(d["crossover_periods"])
        return cls(**d)


def build_standard_design(n_sequences, n_periods, clusters_per_sequence,
                          subjects_per_cluster) -> StudyDesign:
    """Staircase design: sequence ``s`` starts treatment in period ``s + 1``."""
    if n_periods < n_sequences + 1:
        raise ValueError(
            f"{n_periods} periods cannot host {n_sequences} sequences "
            "with an all-control first period")
    return StudyDesign(n_sequences, n_periods, clusters_per_sequence,
                       subjects_per_cluster,
                       tuple(range(2, n_sequences + 2)))


def period_of(t: float, design: StudyDesign) -> int:
    """Period ``j`` with ``T_{j-1} < t <= T_j``."""
    if not 0.0 < t <= design.end_time:
        raise ValueError(f"time {t} outside (0, {design.end_time}]")
    return int(math.ceil(t))


def treatment_indicator(design: StudyDesign, cluster_id: int, t: float) -> int:
    """1 if the cluster is on treatment at calendar time ``t``."""
    j = period_of(t, design)
    return int(j >= design.crossover_period(cluster_id))


def exposure_duration(design: StudyDesign, cluster_id: int, period: int):
    """Periods elapsed since crossover, ``j - s``, or None under control."""
    if int(period) != period or not 1 <= period <= design.n_periods:
        raise ValueError(f"invalid period {period!r}")
    s = design.crossover_period(cluster_id)
    return int(period - s) if period >= s else None

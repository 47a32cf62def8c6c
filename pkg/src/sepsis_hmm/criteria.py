"""Vital-sign portions of the sepsis-1 (SIRS) and qSOFA rules, applied per interval.

Only the observable items are evaluated: the PaCO2 and white cell count
components of SIRS and the mentation item of qSOFA are unavailable.
SIRS thresholds are strict, qSOFA thresholds are inclusive.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .model import PatientEpisode, VitalSigns

HR_MAX = 90.0
RR_MAX = 20.0
TEMP_LOW = 96.8
TEMP_HIGH = 100.4
QSOFA_SBP = 100.0
QSOFA_RR = 22.0

CRITERIA = ("sepsis1", "qsofa")


def _vitals(x):
    if isinstance(x, VitalSigns):
        return x.systolic_bp, x.respiratory_rate, x.heart_rate, x.temperature
    x = np.asarray(x, dtype=float)
    return x[..., 0], x[..., 3], x[..., 2], x[..., 4]


def sirs_flags(x) -> Tuple:
    """(heart rate, respiratory rate, temperature) SIRS conditions."""
    _, rr, hr, temp = _vitals(x)
    return hr > HR_MAX, rr > RR_MAX, (temp < TEMP_LOW) | (temp > TEMP_HIGH)


def _scalar(v):
    return bool(v) if np.ndim(v) == 0 else v


def sepsis1_met(x):
    """Two or more of the three evaluable SIRS conditions."""
    hr, rr, temp = sirs_flags(x)
    count = np.asarray(hr, dtype=int) + np.asarray(rr, dtype=int) + np.asarray(temp, dtype=int)
    return _scalar(count >= 2)


def qsofa_flags(x) -> Tuple:
    sbp, rr, _, _ = _vitals(x)
    return sbp <= QSOFA_SBP, rr >= QSOFA_RR


def qsofa_met(x):
    sbp, rr = qsofa_flags(x)
    return _scalar(np.logical_and(sbp, rr))


@dataclass
class CriteriaFlags:
    sirs_hr: np.ndarray
    sirs_rr: np.ndarray
    sirs_temp: np.ndarray
    sepsis1_met: np.ndarray
    qsofa_sbp: np.ndarray
    qsofa_rr: np.ndarray
    qsofa_met: np.ndarray

    FIELDS = ("sirs_hr", "sirs_rr", "sirs_temp", "sepsis1_met", "qsofa_sbp", "qsofa_rr", "qsofa_met")

    def __len__(self) -> int:
        return len(self.sepsis1_met)

    def get(self, which: str) -> np.ndarray:
        if which == "sepsis1":
            return self.sepsis1_met
        if which == "qsofa":
            return self.qsofa_met
        raise ValueError(f"unknown criterion {which!r}; expected one of {CRITERIA}")


def criteria_flags(vitals: np.ndarray) -> CriteriaFlags:
    """Flags for every row of a (T, 5) vital array."""
    vitals = np.atleast_2d(np.asarray(vitals, dtype=float))
    hr, rr, temp = sirs_flags(vitals)
    sbp_q, rr_q = qsofa_flags(vitals)
    s1 = (hr.astype(int) + rr.astype(int) + temp.astype(int)) >= 2
    return CriteriaFlags(hr, rr, temp, s1, sbp_q, rr_q, sbp_q & rr_q)


def episode_flags(episode: PatientEpisode) -> CriteriaFlags:
    return criteria_flags(episode.vitals)


Segments = List[Tuple[int, int]]


def flags_to_segments(flags) -> Segments:
    """Maximal half-open runs [start, end) of True."""
    f = np.asarray(flags, dtype=bool)
    if f.size == 0:
        return []
    padded = np.concatenate(([False], f, [False])).astype(np.int8)
    edges = np.flatnonzero(np.diff(padded))
    return [(int(s), int(e)) for s, e in zip(edges[::2], edges[1::2])]


def segments_to_flags(segments: Segments, n: int) -> np.ndarray:
    out = np.zeros(n, dtype=bool)
    for s, e in segments:
        if not 0 <= s < e <= n:
            raise ValueError(f"segment [{s}, {e}) outside [0, {n})")
        out[s:e] = True
    return out


def criteria_segments(episode: PatientEpisode, which: str) -> Segments:
    return flags_to_segments(episode_flags(episode).get(which))

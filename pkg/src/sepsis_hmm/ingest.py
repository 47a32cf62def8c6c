"""Six-hour binning of raw timestamped vitals into episodes."""
from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .model import VITALS, Covariates, Outcome, PatientEpisode

INTERVAL_MINUTES = 360
MAX_FILL = 2

RAW_COLUMNS = ["episode_id", "minute", "vital", "value"]
META_COLUMNS = ["episode_id", "age_z", "laps2_z", "cops2_z", "outcome"]


@dataclass(frozen=True)
class RawObservation:
    episode_id: str
    minute: int
    vital: str
    value: float

    def __post_init__(self):
        if self.vital not in VITALS:
            raise ValueError(f"unknown vital {self.vital!r}; expected one of {VITALS}")
        if int(self.minute) != self.minute or self.minute < 0:
            raise ValueError(f"minute must be a non-negative integer, got {self.minute!r}")


@dataclass(frozen=True)
class Rejection:
    episode_id: str
    reason: str                     # "no_observations" | "unfillable"
    interval: Optional[int] = None
    vital: Optional[str] = None

    def __str__(self) -> str:
        if self.reason == "unfillable":
            return f"{self.episode_id}: no value for {self.vital} at interval {self.interval}"
        return f"{self.episode_id}: {self.reason}"


class EpisodeRejected(ValueError):
    def __init__(self, rejection: Rejection):
        self.rejection = rejection
        super().__init__(str(rejection))


def bin_observations(observations: Iterable[RawObservation], outcome: Outcome,
                     covariates: Covariates, episode_id: Optional[str] = None) -> PatientEpisode:
    """Average each vital within [360 t, 360 (t+1)) minutes, forward-filling short gaps.

    A cell may be filled from the last observed value for at most ``MAX_FILL``
    consecutive intervals. Raises ``EpisodeRejected`` on the first cell that
    cannot be filled (in interval, then vital order) or when there are no
    observations.
    """
    obs = sorted(observations, key=lambda o: o.minute)
    if episode_id is None:
        episode_id = obs[0].episode_id if obs else ""
    if not obs:
        raise EpisodeRejected(Rejection(episode_id, "no_observations"))
    t_len = obs[-1].minute // INTERVAL_MINUTES + 1
    sums = np.zeros((t_len, len(VITALS)))
    counts = np.zeros((t_len, len(VITALS)), dtype=np.int64)
    for o in obs:
        t, d = o.minute // INTERVAL_MINUTES, VITALS.index(o.vital)
        sums[t, d] += o.value
        counts[t, d] += 1
    x = np.empty_like(sums)
    gap = np.zeros(len(VITALS), dtype=np.int64)
    for t in range(t_len):
        for d in range(len(VITALS)):
            if counts[t, d]:
                x[t, d] = sums[t, d] / counts[t, d]
                gap[d] = 0
            elif t > 0 and gap[d] < MAX_FILL:
                x[t, d] = x[t - 1, d]
                gap[d] += 1
            else:
                raise EpisodeRejected(Rejection(episode_id, "unfillable", t, VITALS[d]))
    return PatientEpisode(episode_id, covariates, x, Outcome(outcome))


def bin_cohort(observations: Iterable[RawObservation],
               meta: Dict[str, Tuple[Covariates, Outcome]]) -> Tuple[List[PatientEpisode], List[Rejection]]:
    """Bin every episode listed in ``meta``; ids are kept in ``meta`` order."""
    by_id: Dict[str, List[RawObservation]] = defaultdict(list)
    for o in observations:
        by_id[o.episode_id].append(o)
    unknown = sorted(set(by_id) - set(meta))
    if unknown:
        raise ValueError(f"observations for episode {unknown[0]!r} without covariates/outcome")
    episodes, rejections = [], []
    for eid, (cov, outcome) in meta.items():
        try:
            episodes.append(bin_observations(by_id.get(eid, []), outcome, cov, eid))
        except EpisodeRejected as exc:
            rejections.append(exc.rejection)
    return episodes, rejections


def read_raw_observations(path) -> List[RawObservation]:
    from .io import FormatError

    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != RAW_COLUMNS:
            raise FormatError(path, f"header {reader.fieldnames} != expected {RAW_COLUMNS}", 1)
        for row in reader:
            try:
                out.append(RawObservation(row["episode_id"], int(row["minute"]), row["vital"],
                                          float(row["value"])))
            except (TypeError, ValueError) as exc:
                raise FormatError(path, str(exc), reader.line_num) from None
    return out


def read_episode_meta(path) -> Dict[str, Tuple[Covariates, Outcome]]:
    from .io import FormatError

    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != META_COLUMNS:
            raise FormatError(path, f"header {reader.fieldnames} != expected {META_COLUMNS}", 1)
        for row in reader:
            try:
                if row["episode_id"] in out:
                    raise ValueError(f"duplicate episode {row['episode_id']!r}")
                cov = Covariates.from_array([float(row[k]) for k in META_COLUMNS[1:4]])
                out[row["episode_id"]] = (cov, Outcome(row["outcome"]))
            except (TypeError, ValueError) as exc:
                raise FormatError(path, str(exc), reader.line_num) from None
    return out


def write_rejections(path, rejections: Sequence[Rejection]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["episode_id", "reason", "interval_index", "vital"])
        for r in rejections:
            w.writerow([r.episode_id, r.reason, "" if r.interval is None else r.interval, r.vital or ""])

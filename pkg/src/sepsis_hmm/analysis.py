"""Outcome discrimination, criteria/state overlap, and trajectory records."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .criteria import CRITERIA, CriteriaFlags, Segments, episode_flags, flags_to_segments, segments_to_flags
from .model import TRANSIENT, VITALS, Covariates, Outcome, PatientEpisode

METRIC_KINDS = ("sepsis1", "qsofa", "s3")
DEFAULT_BINS = 20
S3 = 2


@dataclass
class FractionMetric:
    episode_id: str
    kind: str
    value: float
    outcome: Outcome


@dataclass
class ConditionalHistogramPair:
    edges: np.ndarray
    discharged: np.ndarray   # densities, unit area on [0, 1]
    died: np.ndarray
    n_discharged: int
    n_died: int

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.edges)

    def masses(self):
        return self.discharged * self.widths, self.died * self.widths


def fraction_flagged(episode: PatientEpisode, flags) -> float:
    f = np.asarray(flags, dtype=bool)
    if f.shape != (episode.n_intervals,):
        raise ValueError(f"episode {episode.episode_id}: {f.size} flags for "
                         f"{episode.n_intervals} intervals")
    return float(f.sum()) / episode.n_intervals


def fraction_metrics(episodes: Sequence[PatientEpisode], decoded_states: Sequence[np.ndarray],
                     flags: Optional[Sequence[CriteriaFlags]] = None) -> List[FractionMetric]:
    """Fraction of intervals meeting sepsis-1, qSOFA, or decoded as S3, per episode."""
    if flags is None:
        flags = [episode_flags(e) for e in episodes]
    out = []
    for e, z, f in zip(episodes, decoded_states, flags):
        for kind, v in (("sepsis1", f.sepsis1_met), ("qsofa", f.qsofa_met), ("s3", np.asarray(z) == S3)):
            out.append(FractionMetric(e.episode_id, kind, fraction_flagged(e, v), e.outcome))
    return out


def conditional_histograms(metrics: Sequence[FractionMetric], n_bins: int = DEFAULT_BINS,
                           kind: Optional[str] = None) -> ConditionalHistogramPair:
    """Unit-area histograms on [0, 1] of one metric kind, split by outcome.

    Censored episodes are dropped; the last bin is closed on the right.
    """
    if kind is not None:
        metrics = [m for m in metrics if m.kind == kind]
    kinds = {m.kind for m in metrics}
    if len(kinds) > 1:
        raise ValueError(f"metrics mix kinds {sorted(kinds)}; pass kind=")
    groups = {}
    for outcome in (Outcome.DISCHARGED, Outcome.DIED):
        vals = np.array([m.value for m in metrics if m.outcome == outcome])
        if vals.size == 0:
            raise ValueError(f"no {outcome.value} episodes to build a histogram from")
        groups[outcome] = vals
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    dens = {o: np.histogram(v, bins=edges, density=True)[0] for o, v in groups.items()}
    return ConditionalHistogramPair(edges, dens[Outcome.DISCHARGED], dens[Outcome.DIED],
                                    len(groups[Outcome.DISCHARGED]), len(groups[Outcome.DIED]))


def js_divergence(p, q, tol: float = 1e-9) -> float:
    """Jensen-Shannon divergence in nats between two probability vectors."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {q.shape}")
    for name, v in (("p", p), ("q", q)):
        if np.any(v < 0) or abs(v.sum() - 1.0) > tol:
            raise ValueError(f"{name} is not a probability vector (sum {v.sum()!r})")
    s = p + q

    # a / m written as 2a / (p + q): halving a subnormal mass would underflow to 0
    def kl(a):
        nz = a > 0
        return float(np.sum(a[nz] * np.log(2.0 * a[nz] / s[nz])))

    return 0.5 * kl(p) + 0.5 * kl(q)


def jsd_report(metrics: Sequence[FractionMetric], n_bins: int = DEFAULT_BINS) -> Dict:
    out = {"log_base": "e", "n_bins": n_bins, "jsd": {}, "histograms": {}}
    for kind in METRIC_KINDS:
        hist = conditional_histograms(metrics, n_bins, kind=kind)
        pm, qm = hist.masses()
        out["jsd"][kind] = js_divergence(pm / pm.sum(), qm / qm.sum())
        out["histograms"][kind] = hist
    return out


def overlap_stats(a: Segments, b: Segments, t_len: int):
    """(Jaccard, fraction of A covered by B, fraction of B covered by A)."""
    fa = segments_to_flags(a, t_len)
    fb = segments_to_flags(b, t_len)
    inter = int(np.sum(fa & fb))
    union = int(np.sum(fa | fb))
    na, nb = int(fa.sum()), int(fb.sum())
    jac = 1.0 if union == 0 else inter / union
    cov_a = 1.0 if na == 0 else inter / na
    cov_b = 1.0 if nb == 0 else inter / nb
    return jac, cov_a, cov_b


def severity_monotonicity_report(decoded_states: Sequence[np.ndarray],
                                 flags: Sequence[CriteriaFlags]) -> Dict[str, List[Optional[float]]]:
    """Per criterion, fraction of intervals flagged among those decoded S1, S2, S3.

    A state never decoded reports None.
    """
    z = np.concatenate([np.asarray(s) for s in decoded_states])
    out = {}
    for which in CRITERIA:
        f = np.concatenate([fl.get(which) for fl in flags])
        rates = []
        for k in range(3):
            sel = z == k
            rates.append(float(f[sel].mean()) if sel.any() else None)
        out[which] = rates
    return out


@dataclass
class TrajectoryRecord:
    episode_id: str
    outcome: Outcome
    covariates: Covariates
    vitals: np.ndarray        # (T, 5)
    states: np.ndarray        # (T,)
    probs: np.ndarray         # (T, 3)
    sepsis1_met: np.ndarray   # (T,)
    qsofa_met: np.ndarray     # (T,)

    def __len__(self) -> int:
        return len(self.states)

    def rows(self) -> List[dict]:
        out = []
        for t in range(len(self)):
            r = {"episode_id": self.episode_id, "interval_index": t}
            r.update({v: float(self.vitals[t, d]) for d, v in enumerate(VITALS)})
            r["state"] = TRANSIENT[int(self.states[t])]
            r.update({f"p_{s}": float(self.probs[t, k]) for k, s in enumerate(TRANSIENT)})
            r["sepsis1_met"] = bool(self.sepsis1_met[t])
            r["qsofa_met"] = bool(self.qsofa_met[t])
            out.append(r)
        return out

    def segments(self, which: str) -> Segments:
        if which == "s3":
            return flags_to_segments(self.states == S3)
        return flags_to_segments(self.sepsis1_met if which == "sepsis1" else self.qsofa_met)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TrajectoryRecord):
            return NotImplemented
        return (self.episode_id == other.episode_id and self.outcome == other.outcome
                and self.covariates == other.covariates
                and all(np.array_equal(getattr(self, f), getattr(other, f))
                        for f in ("vitals", "states", "probs", "sepsis1_met", "qsofa_met")))


def trajectory_export(episode: PatientEpisode, decoded, flags: Optional[CriteriaFlags] = None) -> TrajectoryRecord:
    """Per-interval vitals, decoded state, state probabilities and criteria bars."""
    flags = flags if flags is not None else episode_flags(episode)
    t_len = episode.n_intervals
    if len(decoded.states) != t_len or decoded.probs.shape != (t_len, 3) or len(flags) != t_len:
        raise ValueError(f"episode {episode.episode_id}: decode/flags not aligned with "
                         f"{t_len} intervals")
    return TrajectoryRecord(episode.episode_id, episode.outcome, episode.covariates,
                            episode.vitals.copy(), np.asarray(decoded.states, dtype=np.int64),
                            np.asarray(decoded.probs, dtype=float),
                            np.asarray(flags.sepsis1_met, dtype=bool),
                            np.asarray(flags.qsofa_met, dtype=bool))


@dataclass
class AnalysisReport:
    metrics: List[FractionMetric]
    jsd: Dict[str, float]
    histograms: Dict[str, ConditionalHistogramPair]
    overlap: List[dict] = field(default_factory=list)
    severity: Dict[str, list] = field(default_factory=dict)
    n_bins: int = DEFAULT_BINS


def analyze(records: Sequence[TrajectoryRecord], n_bins: int = DEFAULT_BINS) -> AnalysisReport:
    """Fraction metrics, outcome-conditioned histograms and JSDs, S3/criteria overlaps."""
    metrics = []
    overlap = []
    for r in records:
        t_len = len(r)
        for kind, f in (("sepsis1", r.sepsis1_met), ("qsofa", r.qsofa_met), ("s3", r.states == S3)):
            metrics.append(FractionMetric(r.episode_id, kind, float(np.mean(f)), r.outcome))
        s3 = r.segments("s3")
        for which in CRITERIA:
            jac, cov_s3, cov_c = overlap_stats(s3, r.segments(which), t_len)
            overlap.append({"episode_id": r.episode_id, "criterion": which, "jaccard": jac,
                            "s3_covered_by_criterion": cov_s3, "criterion_covered_by_s3": cov_c})
    rep = jsd_report(metrics, n_bins)
    flags = [_FlagView(r) for r in records]
    severity = severity_monotonicity_report([r.states for r in records], flags)
    return AnalysisReport(metrics, rep["jsd"], rep["histograms"], overlap, severity, n_bins)


class _FlagView:
    def __init__(self, r: TrajectoryRecord):
        self._r = r

    def get(self, which: str) -> np.ndarray:
        return self._r.sepsis1_met if which == "sepsis1" else self._r.qsofa_met


def mean_overlap(overlap: Sequence[dict]) -> Dict[str, Dict[str, float]]:
    out = {}
    for which in CRITERIA:
        rows = [o for o in overlap if o["criterion"] == which]
        out[which] = {k: (float(np.mean([o[k] for o in rows])) if rows else math.nan)
                      for k in ("jaccard", "s3_covered_by_criterion", "criterion_covered_by_s3")}
    return out

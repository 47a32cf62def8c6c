"""File formats: episode/state/flag/trajectory CSVs, params JSON, posterior JSON lines.

Floats are written with ``repr`` (shortest round-trip form), so every
format round-trips value-exactly.
"""
from __future__ import annotations

import csv
import json
import os
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from .criteria import CriteriaFlags
from .analysis import TrajectoryRecord
from .model import (
    COVARIATES,
    TRANSIENT,
    VITALS,
    Cohort,
    Covariates,
    ModelParams,
    Outcome,
    PatientEpisode,
    Standardization,
    param_names,
    validate_params,
)

EPISODE_COLUMNS = ["episode_id", "interval_index", *VITALS, "age_z", "laps2_z", "cops2_z", "outcome"]
STATE_COLUMNS = ["episode_id", "interval_index", "state"]
FLAG_COLUMNS = ["episode_id", "interval_index", *CriteriaFlags.FIELDS]
TRAJECTORY_COLUMNS = ["episode_id", "interval_index", *VITALS, "state",
                      *(f"p_{s}" for s in TRANSIENT), "sepsis1_met", "qsofa_met",
                      "outcome", "age_z", "laps2_z", "cops2_z"]

PARAMS_SCHEMA_VERSION = 1
POSTERIOR_FORMAT = "sepsis-hmm-posterior"
POSTERIOR_SCHEMA_VERSION = 1


class FormatError(ValueError):
    """Malformed input file; ``line`` is 1-based when known."""

    def __init__(self, path, message: str, line: Optional[int] = None):
        self.path = str(path)
        self.line = line
        where = f"{path}:{line}" if line is not None else str(path)
        super().__init__(f"{where}: {message}")


def fmt(x: float) -> str:
    return repr(float(x))


def _float(path, lineno, row, key) -> float:
    try:
        return float(row[key])
    except (TypeError, ValueError):
        raise FormatError(path, f"column {key!r}: not a number: {row[key]!r}", lineno) from None


def _bool(path, lineno, row, key) -> bool:
    v = row[key]
    if v not in ("0", "1"):
        raise FormatError(path, f"column {key!r}: expected 0 or 1, got {v!r}", lineno)
    return v == "1"


def _open_rows(path, columns):
    fh = open(path, newline="", encoding="utf-8")
    reader = csv.DictReader(fh)
    header = reader.fieldnames
    if header != columns:
        fh.close()
        if header is None:
            raise FormatError(path, "empty file; expected a header row", 1)
        raise FormatError(path, f"header {header} != expected {columns}", 1)
    return fh, reader


def _grouped(path, columns, reader):
    """Yield (episode_id, [(lineno, row), ...]) with contiguous interval_index from 0."""
    current, rows = None, []
    seen = set()
    for row in reader:
        lineno = reader.line_num
        if None in row or any(v is None for v in row.values()):
            raise FormatError(path, "wrong number of fields", lineno)
        eid = row["episode_id"]
        if eid != current:
            if current is not None:
                yield current, rows
            if eid in seen:
                raise FormatError(path, f"episode {eid!r} rows are not contiguous", lineno)
            seen.add(eid)
            current, rows = eid, []
        try:
            idx = int(row["interval_index"])
        except ValueError:
            raise FormatError(path, f"bad interval_index {row['interval_index']!r}", lineno) from None
        if idx != len(rows):
            raise FormatError(path, f"episode {eid!r}: interval_index {idx}, expected {len(rows)}",
                              lineno)
        rows.append((lineno, row))
    if current is not None:
        yield current, rows


# -- episodes ----------------------------------------------------------------

def write_episodes(path, episodes: Iterable[PatientEpisode],
                   standardization: Optional[Standardization] = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EPISODE_COLUMNS)
        for e in episodes:
            c = [fmt(v) for v in e.covariates.as_array()]
            for t in range(e.n_intervals):
                w.writerow([e.episode_id, t, *(fmt(v) for v in e.vitals[t]), *c, e.outcome.value])
    if standardization is not None:
        write_standardization(sidecar_path(path), standardization)


def read_episodes(path) -> Cohort:
    fh, reader = _open_rows(path, EPISODE_COLUMNS)
    episodes = []
    with fh:
        for eid, rows in _grouped(path, EPISODE_COLUMNS, reader):
            first_line, first = rows[0]
            const = tuple(first[k] for k in ("age_z", "laps2_z", "cops2_z", "outcome"))
            vitals = []
            for lineno, row in rows:
                if tuple(row[k] for k in ("age_z", "laps2_z", "cops2_z", "outcome")) != const:
                    raise FormatError(path, f"episode {eid!r}: covariates/outcome differ between rows",
                                      lineno)
                vitals.append([_float(path, lineno, row, v) for v in VITALS])
            try:
                outcome = Outcome(first["outcome"])
            except ValueError:
                raise FormatError(path, f"unknown outcome {first['outcome']!r}", first_line) from None
            cov = Covariates.from_array([_float(path, first_line, first, k)
                                         for k in ("age_z", "laps2_z", "cops2_z")])
            episodes.append(PatientEpisode(eid, cov, np.array(vitals), outcome))
    sidecar = sidecar_path(path)
    std = read_standardization(sidecar) if Path(sidecar).exists() else Standardization()
    return Cohort(episodes, std)


def sidecar_path(path) -> str:
    return str(path) + ".standardization.json"


def write_standardization(path, std: Standardization) -> None:
    doc = {"covariates": list(COVARIATES), "mean": [float(v) for v in std.mean],
           "sd": [float(v) for v in std.sd]}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def read_standardization(path) -> Standardization:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("covariates") != list(COVARIATES):
        raise FormatError(path, f"covariates must be {list(COVARIATES)}")
    return Standardization(tuple(doc["mean"]), tuple(doc["sd"]))


# -- true states / flags -----------------------------------------------------

def write_states(path, ids: Sequence[str], states: Sequence[np.ndarray]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STATE_COLUMNS)
        for eid, z in zip(ids, states):
            for t, k in enumerate(z):
                w.writerow([eid, t, TRANSIENT[int(k)]])


def read_states(path) -> Dict[str, np.ndarray]:
    fh, reader = _open_rows(path, STATE_COLUMNS)
    out = {}
    with fh:
        for eid, rows in _grouped(path, STATE_COLUMNS, reader):
            z = []
            for lineno, row in rows:
                if row["state"] not in TRANSIENT:
                    raise FormatError(path, f"unknown state {row['state']!r}", lineno)
                z.append(TRANSIENT.index(row["state"]))
            out[eid] = np.array(z, dtype=np.int64)
    return out


def write_flags(path, ids: Sequence[str], flags: Sequence[CriteriaFlags]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FLAG_COLUMNS)
        for eid, f in zip(ids, flags):
            cols = [getattr(f, k) for k in CriteriaFlags.FIELDS]
            for t in range(len(f)):
                w.writerow([eid, t, *(int(bool(c[t])) for c in cols)])


def read_flags(path) -> Dict[str, CriteriaFlags]:
    fh, reader = _open_rows(path, FLAG_COLUMNS)
    out = {}
    with fh:
        for eid, rows in _grouped(path, FLAG_COLUMNS, reader):
            cols = {k: np.array([_bool(path, ln, r, k) for ln, r in rows]) for k in CriteriaFlags.FIELDS}
            out[eid] = CriteriaFlags(**cols)
    return out


# -- trajectories --------------------------------------------------------------

def write_trajectories(path, records: Iterable[TrajectoryRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJECTORY_COLUMNS)
        for r in records:
            c = [fmt(v) for v in r.covariates.as_array()]
            for t in range(len(r)):
                w.writerow([r.episode_id, t, *(fmt(v) for v in r.vitals[t]),
                            TRANSIENT[int(r.states[t])], *(fmt(p) for p in r.probs[t]),
                            int(r.sepsis1_met[t]), int(r.qsofa_met[t]), r.outcome.value, *c])


def read_trajectories(path) -> List[TrajectoryRecord]:
    fh, reader = _open_rows(path, TRAJECTORY_COLUMNS)
    out = []
    with fh:
        for eid, rows in _grouped(path, TRAJECTORY_COLUMNS, reader):
            ln0, r0 = rows[0]
            vitals, states, probs, s1, qs = [], [], [], [], []
            for ln, r in rows:
                vitals.append([_float(path, ln, r, v) for v in VITALS])
                if r["state"] not in TRANSIENT:
                    raise FormatError(path, f"unknown state {r['state']!r}", ln)
                states.append(TRANSIENT.index(r["state"]))
                probs.append([_float(path, ln, r, f"p_{s}") for s in TRANSIENT])
                s1.append(_bool(path, ln, r, "sepsis1_met"))
                qs.append(_bool(path, ln, r, "qsofa_met"))
            try:
                outcome = Outcome(r0["outcome"])
            except ValueError:
                raise FormatError(path, f"unknown outcome {r0['outcome']!r}", ln0) from None
            cov = Covariates.from_array([_float(path, ln0, r0, k) for k in ("age_z", "laps2_z", "cops2_z")])
            out.append(TrajectoryRecord(eid, outcome, cov, np.array(vitals), np.array(states),
                                        np.array(probs), np.array(s1), np.array(qs)))
    return out


# -- params -------------------------------------------------------------------

def params_to_doc(mp: ModelParams) -> dict:
    tp, ep = mp.transition, mp.emission
    return {
        "schema_version": PARAMS_SCHEMA_VERSION,
        "transition": {
            "beta": {n: float(tp.beta[j]) for j, n in enumerate(COVARIATES)},
            "lambda": {s: float(tp.lam[k]) for k, s in enumerate(TRANSIENT)},
            "gamma": {s: float(tp.gamma[k]) for k, s in enumerate(TRANSIENT)},
        },
        "emission": {
            "mu": {s: {v: float(ep.mu[k, d]) for d, v in enumerate(VITALS)} for k, s in enumerate(TRANSIENT)},
            "sigma": {s: {v: float(ep.sigma[k, d]) for d, v in enumerate(VITALS)}
                      for k, s in enumerate(TRANSIENT)},
        },
    }


def _exact_keys(path, where: str, obj, keys) -> None:
    if not isinstance(obj, dict):
        raise FormatError(path, f"{where} must be an object")
    missing = [k for k in keys if k not in obj]
    if missing:
        raise FormatError(path, f"missing {where}[{missing[0]}]" if where else f"missing {missing[0]}")
    unknown = sorted(set(obj) - set(keys))
    if unknown:
        raise FormatError(path, f"unknown field {where + '.' if where else ''}{unknown[0]}")


def params_from_doc(doc: dict, path="<params>") -> ModelParams:
    if not isinstance(doc, dict) or "schema_version" not in doc:
        raise FormatError(path, "missing schema_version")
    if doc["schema_version"] != PARAMS_SCHEMA_VERSION:
        raise FormatError(path, f"schema_version {doc['schema_version']!r} unsupported "
                                f"(expected {PARAMS_SCHEMA_VERSION})")
    _exact_keys(path, "", doc, ["schema_version", "transition", "emission"])
    tr, em = doc["transition"], doc["emission"]
    _exact_keys(path, "transition", tr, ["beta", "lambda", "gamma"])
    _exact_keys(path, "emission", em, ["mu", "sigma"])
    _exact_keys(path, "transition.beta", tr["beta"], COVARIATES)
    flat = {f"beta.{n}": tr["beta"][n] for n in COVARIATES}
    for sym in ("lambda", "gamma"):
        _exact_keys(path, f"transition.{sym}", tr[sym], TRANSIENT)
        flat.update({f"{sym}.{s}": tr[sym][s] for s in TRANSIENT})
    for sym in ("mu", "sigma"):
        _exact_keys(path, f"emission.{sym}", em[sym], TRANSIENT)
        for s in TRANSIENT:
            _exact_keys(path, f"emission.{sym}[{s}]", em[sym][s], VITALS)
            flat.update({f"{sym}.{s}.{v}": em[sym][s][v] for v in VITALS})
    for k, v in flat.items():
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise FormatError(path, f"{k} must be a number, got {v!r}")
    mp = ModelParams.from_flat({k: float(v) for k, v in flat.items()})
    bad = validate_params(mp)
    if bad:
        raise FormatError(path, "invalid parameters: " + "; ".join(bad))
    return mp


def write_params(path, mp: ModelParams) -> None:
    Path(path).write_text(json.dumps(params_to_doc(mp), indent=2) + "\n", encoding="utf-8")


def read_params(path) -> ModelParams:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(path, f"invalid JSON: {exc.msg}", exc.lineno) from None
    return params_from_doc(doc, path)


# -- posterior chains -----------------------------------------------------------

def _timestamp() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class PosteriorWriter:
    """Append-only JSON-lines writer: one header line, then one line per kept sample."""

    def __init__(self, path, config: dict, timestamp: bool = True):
        self.path = Path(path)
        self._buf: List[str] = []
        # thread count is not echoed, so output is identical for any split
        config = {k: v for k, v in config.items() if k != "n_threads"}
        if not self.path.exists() or self.path.stat().st_size == 0:
            header = {"format": POSTERIOR_FORMAT, "schema_version": POSTERIOR_SCHEMA_VERSION,
                      "seed": config.get("seed"), "params": param_names(), "config": config}
            if timestamp:
                header["created"] = _timestamp()
            self.path.write_text(json.dumps(header, sort_keys=True) + "\n", encoding="utf-8")

    def append(self, sweep: int, row: Sequence[float]) -> None:
        rec = {"sweep": int(sweep)}
        rec.update(zip(param_names(), (float(v) for v in row)))
        self._buf.append(json.dumps(rec) + "\n")
        if len(self._buf) >= 256:
            self.flush()

    def flush(self) -> None:
        if self._buf:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.writelines(self._buf)
                fh.flush()
                os.fsync(fh.fileno())
            self._buf.clear()

    def truncate_after(self, sweep: int) -> None:
        """Drop samples drawn after ``sweep`` (left behind by an interrupted run)."""
        self.flush()
        lines = self.path.read_text(encoding="utf-8").splitlines(keepends=True)
        keep = lines[:1]
        for line in lines[1:]:
            try:
                if json.loads(line)["sweep"] <= sweep:
                    keep.append(line)
            except (json.JSONDecodeError, KeyError):
                break
        self.path.write_text("".join(keep), encoding="utf-8")

    def close(self) -> None:
        self.flush()


def write_posterior(path, chain, timestamp: bool = True) -> None:
    p = Path(path)
    if p.exists():
        p.unlink()
    w = PosteriorWriter(p, chain.config, timestamp)
    for s, row in zip(chain.sweeps, chain.values):
        w.append(int(s), row)
    w.close()


def read_posterior(path):
    from .inference.sampler import PosteriorChain

    names = param_names()
    with open(path, encoding="utf-8") as fh:
        lines = fh.readlines()
    if not lines:
        raise FormatError(path, "empty posterior file", 1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError:
        raise FormatError(path, "unreadable header", 1) from None
    if header.get("format") != POSTERIOR_FORMAT:
        raise FormatError(path, "not a posterior file", 1)
    if header.get("schema_version") != POSTERIOR_SCHEMA_VERSION:
        raise FormatError(path, f"schema_version {header.get('schema_version')!r} unsupported", 1)
    if header.get("params") != names:
        raise FormatError(path, "parameter list does not match this version", 1)
    sweeps, values = [], []
    for i, line in enumerate(lines[1:], start=2):
        if not line.endswith("\n"):
            raise FormatError(path, "truncated line", i)
        try:
            rec = json.loads(line)
        except json.JSONDecodeError:
            raise FormatError(path, "truncated or malformed line", i) from None
        if set(rec) != {"sweep", *names}:
            raise FormatError(path, "record fields do not match header", i)
        sweeps.append(rec["sweep"])
        values.append([rec[n] for n in names])
    return PosteriorChain(np.array(sweeps, dtype=np.int64),
                          np.array(values, dtype=float).reshape(-1, len(names)),
                          {}, header.get("config", {}))


# -- analysis outputs --------------------------------------------------------------

def write_analysis(out_dir, report, timestamp: bool = True) -> Dict[str, Path]:
    """fractions.csv, histograms.csv, overlap.csv and report.json under ``out_dir``."""
    from .analysis import METRIC_KINDS, mean_overlap

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {k: out / f"{k}.csv" for k in ("fractions", "histograms", "overlap")}
    paths["report"] = out / "report.json"

    by_ep: Dict[str, dict] = {}
    for m in report.metrics:
        by_ep.setdefault(m.episode_id, {"outcome": m.outcome.value})[m.kind] = m.value
    with open(paths["fractions"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["episode_id", "outcome", *METRIC_KINDS])
        for eid, row in by_ep.items():
            w.writerow([eid, row["outcome"], *(fmt(row[k]) for k in METRIC_KINDS)])

    with open(paths["histograms"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "bin_lo", "bin_hi", "density_discharged", "density_died"])
        for kind in METRIC_KINDS:
            h = report.histograms[kind]
            for b in range(len(h.discharged)):
                w.writerow([kind, fmt(h.edges[b]), fmt(h.edges[b + 1]),
                            fmt(h.discharged[b]), fmt(h.died[b])])

    cols = ["episode_id", "criterion", "jaccard", "s3_covered_by_criterion", "criterion_covered_by_s3"]
    with open(paths["overlap"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for o in report.overlap:
            w.writerow([o["episode_id"], o["criterion"], *(fmt(o[k]) for k in cols[2:])])

    any_hist = report.histograms[METRIC_KINDS[0]]
    doc = {
        "log_base": "e",
        "n_bins": report.n_bins,
        "n_discharged": any_hist.n_discharged,
        "n_died": any_hist.n_died,
        "jsd": {k: report.jsd[k] for k in METRIC_KINDS},
        "severity_monotonicity": {
            which: dict(zip(TRANSIENT, rates)) for which, rates in report.severity.items()},
        "mean_overlap": mean_overlap(report.overlap),
    }
    if timestamp:
        doc["created"] = _timestamp()
    paths["report"].write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return paths

"""Command-line interface.

Exit codes: 0 success, 1 internal error, 2 usage/config error, 3 bad input
files, 4 model error (infeasible or impossible parameters). Failures print
one JSON object ``{"error": <category>, "message": ...}`` on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from pathlib import Path
from typing import List, Optional, Sequence

from . import io
from .analysis import analyze, trajectory_export
from .criteria import episode_flags
from .ingest import bin_cohort, read_episode_meta, read_raw_observations, write_rejections
from .inference import DecodeConfig, SamplerConfig, decode_cohort, map_params, run_sampler
from .inference.kernels import ImpossiblePathError
from .inference.sampler import InitializationError
from .model import CovariateDomainError, InfeasibleParametersError
from .simulate import CohortSpec, as_cohort, default_ground_truth, simulate_cohort

ENV_CONFIG = "SEPSIS_HMM_CONFIG"

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_MODEL = 4

COMMANDS = ("simulate", "ingest", "fit", "map-estimate", "decode", "criteria", "analyze")

log = logging.getLogger("sepsis_hmm")


class CliError(Exception):
    def __init__(self, category: str, code: int, message: str):
        self.category = category
        self.code = code
        super().__init__(message)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", EXIT_USAGE, f"{self.prog}: {message}")


def _config_section(args, section: str) -> dict:
    """Config file section for one subcommand, with ``--set key=value`` applied."""
    path = args.config or os.environ.get(ENV_CONFIG)
    doc = {}
    if path:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise CliError("usage", EXIT_USAGE, f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise CliError("usage", EXIT_USAGE, f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from None
        if not isinstance(doc, dict):
            raise CliError("usage", EXIT_USAGE, f"{path}: top level must be an object")
        unknown = sorted(set(doc) - set(COMMANDS))
        if unknown:
            raise CliError("usage", EXIT_USAGE, f"{path}: unknown section {unknown[0]!r}")
    out = dict(doc.get(section, {}))
    for item in args.set or []:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise CliError("usage", EXIT_USAGE, f"--set expects key=value, got {item!r}")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    if args.seed is not None:
        out["seed"] = args.seed
    return out


def _build(cls, fields: dict, what: str):
    try:
        return cls.from_dict(fields) if hasattr(cls, "from_dict") else cls(**fields)
    except (TypeError, ValueError) as exc:
        raise CliError("usage", EXIT_USAGE, f"{what} config: {exc}") from None


def _read_cohort(path):
    cohort = io.read_episodes(path)
    if not cohort.episodes:
        raise CliError("input", EXIT_INPUT, f"{path}: no episodes")
    return cohort


# -- subcommands ---------------------------------------------------------------

def cmd_simulate(args) -> None:
    cfg = _config_section(args, "simulate")
    if args.n_patients is not None:
        cfg["n_patients"] = args.n_patients
    if "covariate_distribution" in cfg:
        cfg["covariate_distribution"] = tuple(tuple(p) for p in cfg["covariate_distribution"])
    spec = _build(CohortSpec, cfg, "simulate")
    mp = io.read_params(args.params) if args.params else default_ground_truth()
    sims = simulate_cohort(mp, spec)
    cohort = as_cohort(sims)
    io.write_episodes(args.out, cohort.episodes)
    if args.states_out:
        io.write_states(args.states_out, [s.episode.episode_id for s in sims],
                        [s.true_states for s in sims])
    if args.params_out:
        io.write_params(args.params_out, mp)
    log.info("simulated %d episodes", len(sims))


def cmd_ingest(args) -> None:
    obs = read_raw_observations(args.observations)
    meta = read_episode_meta(args.meta)
    try:
        episodes, rejected = bin_cohort(obs, meta)
    except ValueError as exc:
        raise CliError("input", EXIT_INPUT, str(exc)) from None
    io.write_episodes(args.out, episodes)
    if args.rejections:
        write_rejections(args.rejections, rejected)
    log.info("binned %d episodes, rejected %d", len(episodes), len(rejected))


def cmd_fit(args) -> None:
    cfg = _config_section(args, "fit")
    if args.threads is not None:
        cfg["n_threads"] = args.threads
    config = _build(SamplerConfig, cfg, "fit")
    cohort = _read_cohort(args.episodes)
    if args.resume and not (args.checkpoint and Path(args.checkpoint).exists()):
        raise CliError("usage", EXIT_USAGE, "--resume needs an existing --checkpoint file")
    if not args.resume and Path(args.out).exists():
        Path(args.out).unlink()
    writer = io.PosteriorWriter(args.out, config.to_dict(), timestamp=not args.no_timestamp)
    try:
        chain = run_sampler(cohort, config, checkpoint_path=args.checkpoint,
                            checkpoint_every=args.checkpoint_every if args.checkpoint else 0,
                            resume=args.resume, writer=writer, stop_after=args.stop_after,
                            progress_every=args.progress)
    finally:
        writer.close()
    if chain.acceptance:
        log.info("acceptance: %s", json.dumps(chain.acceptance))


def cmd_map_estimate(args) -> None:
    chain = io.read_posterior(args.posterior)
    try:
        mp = map_params(chain)
    except ValueError as exc:
        raise CliError("model", EXIT_MODEL, str(exc)) from None
    io.write_params(args.out, mp)


def cmd_decode(args) -> None:
    cfg = _config_section(args, "decode")
    if args.threads is not None:
        cfg["n_threads"] = args.threads
    config = _build(DecodeConfig, cfg, "decode")
    cohort = _read_cohort(args.episodes)
    mp = io.read_params(args.params)
    results = decode_cohort(cohort.episodes, mp, config)
    io.write_trajectories(args.out, [trajectory_export(e, r) for e, r in zip(cohort.episodes, results)])


def cmd_criteria(args) -> None:
    cohort = io.read_episodes(args.episodes)
    io.write_flags(args.out, [e.episode_id for e in cohort.episodes],
                   [episode_flags(e) for e in cohort.episodes])


def cmd_analyze(args) -> None:
    cfg = _config_section(args, "analyze")
    cfg.pop("seed", None)
    n_bins = cfg.pop("n_bins", 20)
    if cfg:
        raise CliError("usage", EXIT_USAGE, f"unknown analyze config fields: {sorted(cfg)}")
    if not isinstance(n_bins, int) or n_bins < 1:
        raise CliError("usage", EXIT_USAGE, f"n_bins must be a positive integer, got {n_bins!r}")
    records = io.read_trajectories(args.trajectories)
    try:
        report = analyze(records, n_bins)
    except ValueError as exc:
        raise CliError("input", EXIT_INPUT, str(exc)) from None
    paths = io.write_analysis(args.out_dir, report, timestamp=not args.no_timestamp)
    print(json.dumps({k: report.jsd[k] for k in ("sepsis1", "qsofa", "s3")}))
    log.info("wrote %s", ", ".join(str(p) for p in paths.values()))


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help=f"JSON config file with per-command sections "
                                         f"(default: ${ENV_CONFIG})")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config field; VALUE is parsed as JSON")
    common.add_argument("--seed", type=int, help="random seed")
    common.add_argument("--no-timestamp", action="store_true",
                        help="omit creation timestamps from output headers")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="sepsis-hmm", description="Covariate-modulated sepsis HMM toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", parents=[common], help="simulate a cohort")
    s.add_argument("--params", help="params JSON (default: built-in ground truth)")
    s.add_argument("--n-patients", type=int)
    s.add_argument("--out", required=True, help="episode CSV")
    s.add_argument("--states-out", help="true-state CSV")
    s.add_argument("--params-out", help="copy of the generating params")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("ingest", parents=[common], help="bin raw observations into episodes")
    s.add_argument("--observations", required=True, help="CSV: episode_id,minute,vital,value")
    s.add_argument("--meta", required=True, help="CSV: episode_id,age_z,laps2_z,cops2_z,outcome")
    s.add_argument("--out", required=True, help="episode CSV")
    s.add_argument("--rejections", help="CSV of rejected episodes")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("fit", parents=[common], help="run the MCMC sampler")
    s.add_argument("--episodes", required=True)
    s.add_argument("--out", required=True, help="posterior JSON-lines file")
    s.add_argument("--threads", type=int)
    s.add_argument("--checkpoint", help="checkpoint file")
    s.add_argument("--checkpoint-every", type=int, default=500)
    s.add_argument("--resume", action="store_true", help="continue from --checkpoint")
    s.add_argument("--stop-after", type=int, help=argparse.SUPPRESS)
    s.add_argument("--progress", type=int, default=0, help="log every N sweeps")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("map-estimate", parents=[common], help="marginal MAP from a posterior file")
    s.add_argument("--posterior", required=True)
    s.add_argument("--out", required=True, help="params JSON")
    s.set_defaults(func=cmd_map_estimate)

    s = sub.add_parser("decode", parents=[common], help="decode trajectories with fixed params")
    s.add_argument("--episodes", required=True)
    s.add_argument("--params", required=True)
    s.add_argument("--out", required=True, help="trajectory CSV")
    s.add_argument("--threads", type=int)
    s.set_defaults(func=cmd_decode)

    s = sub.add_parser("criteria", parents=[common], help="per-interval sepsis-1/qSOFA flags")
    s.add_argument("--episodes", required=True)
    s.add_argument("--out", required=True, help="flags CSV")
    s.set_defaults(func=cmd_criteria)

    s = sub.add_parser("analyze", parents=[common], help="outcome discrimination and overlap")
    s.add_argument("--trajectories", required=True, help="trajectory CSV from decode")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_analyze)
    return p


def _fail(category: str, message: str) -> None:
    print(json.dumps({"error": category, "message": message}), file=sys.stderr)


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except CliError as exc:
        _fail(exc.category, str(exc))
        return exc.code
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    with warnings.catch_warnings():
        warnings.simplefilter("default")
        try:
            args.func(args)
        except CliError as exc:
            _fail(exc.category, str(exc))
            return exc.code
        except (io.FormatError, FileNotFoundError, IsADirectoryError) as exc:
            _fail("input", str(exc))
            return EXIT_INPUT
        except (InfeasibleParametersError, CovariateDomainError, ImpossiblePathError,
                InitializationError) as exc:
            _fail("model", str(exc))
            return EXIT_MODEL
        except Exception as exc:  # pragma: no cover - last resort
            log.debug("internal error", exc_info=True)
            _fail("internal", f"{type(exc).__name__}: {exc}")
            return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point for Monte Carlo Pd sweeps.

Configuration comes from a preset, then an optional ``key = value`` file whose
keys are :class:`ExperimentConfig` field names, then the command-line flags.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import math
import sys
from pathlib import Path

from .detector import os_cfar_threshold, write_field_csv
from .errors import ActiveSenseError, ConfigurationError
from .harness import PRESETS, ExperimentConfig, build_setup, emit_outputs, make_scenario, run_sweep
from .strategy import run_acquisition, write_event_log

log = logging.getLogger("activesense")

THRESHOLD_FORMULA = ("block threshold: GPD exceedance quantile T = eta + beta/alpha * ((N*pfa/K)^(-alpha) - 1), "
                     "exponential limit when |alpha| < 1e-6")


def _parse_value(raw: str, default):
    raw = raw.strip()
    if isinstance(default, tuple):
        kind = type(default[0]) if default else float
        return tuple(kind(v) for v in raw.replace(",", " ").split())
    if default is None:
        return None if raw.lower() in ("", "none") else float(raw)
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes", "on")
    return type(default)(raw)


def read_config_file(path, base: ExperimentConfig) -> ExperimentConfig:
    """Apply ``key = value`` lines (``#`` starts a comment; lists are comma separated)."""
    defaults = {f.name: getattr(base, f.name) for f in dataclasses.fields(base)}
    changes = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config file {path}: {exc}") from exc
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or key not in defaults:
            raise ConfigurationError(f"{path}:{n}: unknown setting {line!r}")
        try:
            changes[key] = _parse_value(value, defaults[key])
        except ValueError as exc:
            raise ConfigurationError(f"{path}:{n}: bad value for {key}: {exc}") from exc
    return base.replace(**changes)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="activesense", description="Monte Carlo detection-probability sweeps "
                                "for active beam acquisition with OTFS and hybrid arrays.")
    p.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    p.add_argument("--config", type=Path, help="key = value file with ExperimentConfig fields")
    p.add_argument("--strategy", choices=["gs", "cs", "random"])
    p.add_argument("--blocks", help="B, a comma list of B values (a blocks sweep), or 'adaptive'")
    p.add_argument("--nrf", type=int, help="number of RF chains")
    p.add_argument("--trials", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--ranges", help="comma list of target ranges in metres")
    p.add_argument("--placement", choices=["single", "pair"])
    p.add_argument("--out", type=Path, default=Path("activesense-out"))
    p.add_argument("--trace", action="store_true",
                   help="also write the event log and metric field of trial 0 at the first sweep point")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def config_from_args(args) -> ExperimentConfig:
    cfg = PRESETS[args.preset]
    if args.config is not None:
        cfg = read_config_file(args.config, cfg)
    changes = {}
    if args.strategy:
        changes["strategy"] = args.strategy
    if args.nrf is not None:
        changes["n_rf"] = args.nrf
    if args.trials is not None:
        changes["trials"] = args.trials
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.placement:
        changes["placement"] = args.placement
    if args.ranges:
        try:
            changes["ranges_m"] = tuple(float(v) for v in args.ranges.split(","))
        except ValueError as exc:
            raise ConfigurationError(f"bad --ranges: {exc}") from exc
    if args.blocks:
        if args.blocks.strip().lower() == "adaptive":
            changes.update(blocks=(), sweep="range")
        else:
            try:
                blocks = tuple(int(v) for v in args.blocks.split(","))
            except ValueError as exc:
                raise ConfigurationError(f"bad --blocks: {exc}") from exc
            changes.update(blocks=blocks, sweep="blocks" if len(blocks) > 1 else "range")
    return cfg.replace(**changes)


def _write_trace(cfg: ExperimentConfig, out: Path) -> None:
    blocks = max(cfg.blocks) if cfg.blocks else None
    setup = build_setup(cfg, blocks)
    scenario = make_scenario(cfg, cfg.ranges_m[0], 0, setup.codebook.delta_deg)
    result = run_acquisition(scenario, cfg.strategy, setup)
    write_event_log(out / "events.csv", result)
    field = result.final_field
    thr = os_cfar_threshold(field, setup.cfar_window, setup.cfar_guard, setup.cfar_rank, setup.cfar_scale)
    write_field_csv(out / "field.csv", field, thr)
    for t in scenario.targets:
        log.info("trace target: range %.2f m, angle %.2f deg", t.range_m, math.degrees(t.angle_rad))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        log.info(THRESHOLD_FORMULA)
        log.info("strategy=%s placement=%s sweep=%s trials=%d seed=%d", cfg.strategy, cfg.placement,
                 cfg.sweep, cfg.trials, cfg.seed)
        curve = run_sweep(cfg)
        paths = emit_outputs(curve, args.out, config=cfg)
        if args.trace:
            _write_trace(cfg, args.out)
    except ConfigurationError as exc:
        print(f"activesense: configuration error: {exc}", file=sys.stderr)
        return 2
    except (ActiveSenseError, OSError) as exc:
        print(f"activesense: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    for x, pd, lo, hi in zip(curve.sweep_values, curve.pd, curve.ci_lo, curve.ci_hi):
        print(f"{curve.sweep_name}={x:g}  Pd={pd:.3f}  95% CI [{lo:.3f}, {hi:.3f}]")
    log.info("wrote %s", ", ".join(str(p) for p in paths))
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Operator entry point.

Subcommands (each reads one YAML config file):

* ``run``       execute a configured run; writes metrics.csv and manifest.json
* ``sweep``     execute a list of runs; writes sweep.csv
* ``calibrate`` print the calibrated noise variance and the epsilon(T) curve
* ``graph``     print topology and consensus-matrix diagnostics
* ``bound``     print the convergence-bound terms

Exit codes: 0 success, 1 error, 2 diverged. The only environment overrides
are SDM_DSGD_SEED and SDM_DSGD_OUT; all other inputs come from the config.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import yaml

from . import __version__
from .algorithms import convergence_bound
from .errors import ConfigParseError, ScheduleViolation, SdmDsgdError
from .graph import build_consensus_matrix, save_edge_list
from .privacy import PrivacyParams, alternative_design_epsilon, calibrate_sigma, sdm_dsgd_epsilon
from .simulator import (
    RunConfig,
    STATUS_DIVERGED,
    TopologySpec,
    run as run_simulation,
    sweep as run_sweep,
    write_metrics_csv,
    write_sweep_csv,
)

SCHEMA_VERSION = 1


def _load_config(path: str) -> dict:
    config_path = Path(path)
    if not config_path.is_file():
        raise ConfigParseError(f"config file not found: {config_path}")
    try:
        raw = yaml.safe_load(config_path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigParseError(f"{config_path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigParseError(f"{config_path}: config must be a mapping")
    version = raw.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigParseError(
            f"{config_path}: schema_version must be {SCHEMA_VERSION}, got {version!r}"
        )
    return raw


def _out_dir(args) -> Path:
    out = args.out or os.environ.get("SDM_DSGD_OUT") or "out"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _seed_override(args, raw: dict) -> dict:
    seed = args.seed
    if seed is None and "SDM_DSGD_SEED" in os.environ:
        seed = int(os.environ["SDM_DSGD_SEED"])
    if seed is not None:
        raw = dict(raw)
        raw["seed"] = int(seed)
    return raw


def _say(args, message: str) -> None:
    if not args.quiet:
        print(message)


def _run_config_from(raw: dict) -> RunConfig:
    body = {k: v for k, v in raw.items() if k != "schema_version"}
    return RunConfig.from_dict(body)


def cmd_run(args) -> int:
    raw = _seed_override(args, _load_config(args.config))
    config = _run_config_from(raw)
    result = run_simulation(config)
    out = _out_dir(args)
    write_metrics_csv(result.records, out / "metrics.csv")
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "package_version": __version__,
        "seed": config.seed,
        "status": result.status,
        "privacy_valid": result.privacy_valid,
        "iterations_recorded": len(result.records),
        "min_grad_norm_sq": result.min_grad_norm_sq,
        "final_loss": result.final_loss,
        "initial_loss": result.initial_loss,
        "wall_time_s": result.wall_time,
        "resolved_parameters": result.resolved,
        "resolved_config": config.to_dict(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    _say(args, f"status={result.status} records={len(result.records)} out={out}")
    return 2 if result.status == STATUS_DIVERGED else 0


def cmd_sweep(args) -> int:
    raw = _seed_override(args, _load_config(args.config))
    entries = raw.get("sweep")
    if not isinstance(entries, list) or not entries:
        raise ConfigParseError("sweep config needs a non-empty 'sweep' list")
    base = {
        k: v for k, v in raw.items() if k not in ("sweep", "schema_version")
    }
    configs = []
    for pos, entry in enumerate(entries):
        if not isinstance(entry, dict) or "id" not in entry:
            raise ConfigParseError(f"sweep entry {pos}: needs an 'id' field")
        merged = dict(base)
        for key, value in entry.items():
            if key == "id":
                continue
            if isinstance(value, dict) and isinstance(merged.get(key), dict):
                merged[key] = {**merged[key], **value}
            else:
                merged[key] = value
        configs.append((str(entry["id"]), _run_config_from(merged)))
    results = run_sweep(configs)
    out = _out_dir(args)
    write_sweep_csv(results, out / "sweep.csv")
    failures = [config_id for config_id, result, _ in results if result is None]
    _say(args, f"sweep: {len(results) - len(failures)}/{len(results)} runs ok, out={out}")
    return 1 if failures else 0


def _privacy_params_from(section: dict) -> PrivacyParams:
    try:
        return PrivacyParams(
            sigma2=float(section.get("sigma2", 1.0)),
            tau=float(section.get("tau", 1.0 / int(section["local_samples_m"]))),
            sensitivity_g=float(section["sensitivity_g"]),
            local_samples_m=int(section["local_samples_m"]),
            transmit_prob_p=float(section["transmit_prob"]),
            delta=float(section["delta"]),
            epsilon_target=float(section["epsilon_target"]),
            accounting=section.get("accounting", "expected"),
            alpha_mode=section.get("alpha_mode", "plus"),
        )
    except KeyError as exc:
        raise ConfigParseError(f"calibrate section missing field {exc}") from exc


def cmd_calibrate(args) -> int:
    raw = _load_config(args.config)
    section = raw.get("calibrate")
    if not isinstance(section, dict):
        raise ConfigParseError("config needs a 'calibrate' section")
    params = _privacy_params_from(section)
    iterations = int(section.get("iterations", 1))
    result = calibrate_sigma(params, iterations)
    print(f"sigma2: {result.sigma2!r}")
    print(f"valid: {'true' if result.valid else 'false'}")
    curve = section.get("curve_points") or [iterations]
    calibrated = params.with_sigma2(result.sigma2)
    print("T,epsilon_sdm,epsilon_alternative")
    for t_value in curve:
        t_value = int(t_value)
        if result.valid:
            eps_sdm, _ = sdm_dsgd_epsilon(calibrated, t_value)
            eps_alt, _ = alternative_design_epsilon(calibrated, t_value)
            print(f"{t_value},{eps_sdm!r},{eps_alt!r}")
        else:
            print(f"{t_value},invalid,invalid")
    return 0


def cmd_graph(args) -> int:
    raw = _seed_override(args, _load_config(args.config))
    section = raw.get("topology")
    if not isinstance(section, dict):
        raise ConfigParseError("config needs a 'topology' section")
    spec = TopologySpec(**section)
    topology = spec.build(int(raw.get("seed", 0)))
    w = build_consensus_matrix(topology)
    print(f"nodes: {topology.node_count}")
    print(f"edges: {topology.edge_count}")
    print(f"beta: {w.spectral.beta!r}")
    print(f"lambda_min: {w.spectral.lambda_min!r}")
    print(f"eigenvalue_max: {float(w.spectral.eigenvalues[0])!r}")
    print(f"eigenvalue_min: {float(w.spectral.eigenvalues[-1])!r}")
    if args.export:
        out = _out_dir(args) / "graph.edges"
        save_edge_list(topology, out)
        _say(args, f"edge list written to {out}")
    return 0


def cmd_bound(args) -> int:
    raw = _load_config(args.config)
    section = raw.get("bound")
    if not isinstance(section, dict):
        raise ConfigParseError("config needs a 'bound' section")
    try:
        terms = convergence_bound(
            c1=float(section["c1"]),
            sigma_tilde2=float(section.get("sigma_tilde2", 0.0)),
            m=int(section["m"]),
            tau=float(section.get("tau", 1.0)),
            sigma2=float(section.get("sigma2", 0.0)),
            n_nodes=int(section["n_nodes"]),
            dim=int(section["dim"]),
            grad_bound=float(section["grad_bound"]),
            beta=float(section["beta"]),
            lambda_min=float(section["lambda_min"]),
            smoothness=float(section["smoothness"]),
            gamma=float(section["gamma"]),
            theta=float(section["theta"]),
            transmit_prob=float(section["transmit_prob"]),
            iterations=int(section["iterations"]),
            form=section.get("form", "per_iteration"),
        )
    except KeyError as exc:
        raise ConfigParseError(f"bound section missing field {exc}") from exc
    print("term,value")
    print(f"I,{terms.term_i!r}")
    print(f"II,{terms.term_ii!r}")
    print(f"III,{terms.term_iii!r}")
    print(f"IV,{terms.term_iv!r}")
    print(f"total,{terms.total!r}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sdm-dsgd",
        description="Decentralized SGD simulator and privacy calibration tools",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, func, needs_export in (
        ("run", cmd_run, False),
        ("sweep", cmd_sweep, False),
        ("calibrate", cmd_calibrate, False),
        ("graph", cmd_graph, True),
        ("bound", cmd_bound, False),
    ):
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", required=True, help="YAML config file")
        cmd.add_argument("--out", default=None, help="output directory")
        cmd.add_argument("--seed", type=int, default=None, help="override the config seed")
        cmd.add_argument("--quiet", action="store_true", help="suppress progress messages")
        if needs_export:
            cmd.add_argument("--export", action="store_true", help="write the edge list")
        cmd.set_defaults(func=func)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ScheduleViolation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SdmDsgdError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: run experiments or theory checks, inspect and
validate configs, and emit every artifact the plotting component consumes."""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from . import theory
from .experiments import EXPERIMENTS, DeskConfig, write_manifest, write_results

ENV_OUT_DIR = "PPCNAV_OUT"

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG_ERROR = 2

# flat key=value override surface; every key maps onto a DeskConfig field
_INT_KEYS = {"T", "n_samples", "n_obstacles", "jobs", "rolling_window",
             "exp3_reference", "exp3_eval_points", "exp6_mode_period",
             "exp6_n_samples", "exp6_post_window", "exp6_pretrain_per_mode",
             "drgd_pretrain", "checks_seed"}
_INT_TUPLE_KEYS = {"seeds", "exp3_budgets", "exp4_obstacles"}
_FLOAT_TUPLE_KEYS = {"exp2_ratios", "exp5_speeds"}
_STR_TUPLE_KEYS = {"controllers"}
_STR_KEYS = {"out_dir"}

KNOWN_KEYS = _INT_KEYS | _INT_TUPLE_KEYS | _FLOAT_TUPLE_KEYS | _STR_TUPLE_KEYS | _STR_KEYS


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    """Desk-scale defaults plus the run target; round-trips through the flat
    key=value file form losslessly."""

    experiment: str = "exp1"
    out_dir: str = "results"
    checks_seed: int = 0
    desk: DeskConfig = field(default_factory=DeskConfig)

    def items(self) -> dict:
        out = {"out_dir": self.out_dir, "checks_seed": self.checks_seed}
        for f in fields(DeskConfig):
            if f.name == "planner":
                continue
            value = getattr(self.desk, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif value is None:
                value = ""
            out[f.name] = value
        return out

    def to_file_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in sorted(self.items().items()))


def _parse_value(key: str, raw: str, where: str):
    try:
        if key in _INT_KEYS:
            return int(raw)
        if key in _INT_TUPLE_KEYS:
            return tuple(int(v) for v in raw.split(",") if v != "")
        if key in _FLOAT_TUPLE_KEYS:
            return tuple(float(v) for v in raw.split(",") if v != "")
        if key in _STR_TUPLE_KEYS:
            vals = tuple(v for v in raw.split(",") if v != "")
            return vals or None
        return raw
    except ValueError as exc:
        raise ConfigError(f"{where}: invalid value for {key!r}: {raw!r}") from exc


def apply_overrides(config: RunConfig, overrides: dict[str, object], where: str) -> RunConfig:
    desk_updates = {}
    top_updates = {}
    for key, value in overrides.items():
        if key not in KNOWN_KEYS:
            raise ConfigError(f"{where}: unknown config key {key!r}")
        if key == "out_dir":
            top_updates["out_dir"] = value
        elif key == "checks_seed":
            top_updates["checks_seed"] = value
        else:
            desk_updates[key] = value
    desk = replace(config.desk, **desk_updates) if desk_updates else config.desk
    return replace(config, desk=desk, **top_updates)


def parse_config_file(path: Path) -> dict[str, object]:
    out: dict[str, object] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in KNOWN_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        out[key] = _parse_value(key, raw.strip(), f"{path}:{lineno}")
    return out


def _validate(config: RunConfig) -> None:
    if config.desk.T <= 0:
        raise ConfigError("T must be > 0")
    if not config.desk.seeds:
        raise ConfigError("seeds must be non-empty")
    if config.desk.n_samples <= 0:
        raise ConfigError("n_samples must be > 0")
    if config.desk.jobs < 1:
        raise ConfigError("jobs must be >= 1")


def load_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then config file, then the PPCNAV_OUT variable, then CLI flags."""
    config = RunConfig()
    if args.config:
        config = apply_overrides(config, parse_config_file(Path(args.config)), str(args.config))
    env_out = os.environ.get(ENV_OUT_DIR)
    if env_out:
        config = apply_overrides(config, {"out_dir": env_out}, ENV_OUT_DIR)
    flag_overrides: dict[str, object] = {}
    for key, attr in (("T", "T"), ("n_samples", "N"), ("jobs", "jobs")):
        value = getattr(args, attr, None)
        if value is not None:
            flag_overrides[key] = value
    if getattr(args, "seeds", None):
        flag_overrides["seeds"] = _parse_value("seeds", args.seeds, "--seeds")
    if getattr(args, "controllers", None):
        flag_overrides["controllers"] = _parse_value("controllers", args.controllers, "--controllers")
    if getattr(args, "out", None):
        flag_overrides["out_dir"] = args.out
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, raw = item.partition("=")
        if key not in KNOWN_KEYS:
            raise ConfigError(f"--set: unknown config key {key!r}")
        flag_overrides[key] = _parse_value(key, raw, "--set")
    config = apply_overrides(config, flag_overrides, "flags")
    _validate(config)
    return config


def _run_checks(config: RunConfig) -> int:
    reports = theory.default_check_suite(seed=config.checks_seed)
    failed = 0
    for report in reports:
        status = "PASS" if report.passed else "FAIL"
        extra = f" notes={','.join(report.notes)}" if report.notes else ""
        print(
            f"[{status}] {report.name}: worst={report.worst_violation:.3e} "
            f"tol={report.tolerance:.3e} probes={report.probe_count}{extra}"
        )
        failed += not report.passed
    print(f"checks: {len(reports) - failed}/{len(reports)} passed")
    return EXIT_OK if failed == 0 else EXIT_CHECK_FAILED


def _run_experiment(config: RunConfig, name: str) -> int:
    out_dir = Path(config.out_dir)
    manifest_items = dict(config.items())
    manifest_items["experiment"] = name
    write_manifest(out_dir, manifest_items)
    result = EXPERIMENTS[name](config.desk)
    write_results(result, out_dir)
    lines = {}
    for row in result.aggregate_rows:
        if row["metric"] in ("safety_rate", "normalized_cost"):
            lines.setdefault(row["group"], {})[row["metric"]] = row["mean"]
    summary = "; ".join(
        f"{group}: safety={vals.get('safety_rate', float('nan')):.3f}"
        + (f" cost={vals['normalized_cost']:.2f}" if "normalized_cost" in vals else "")
        for group, vals in sorted(lines.items())
    )
    print(f"{name} done -> {out_dir / name} | {summary}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ppcnav",
        description=(
            "Sample-based penalized predictive control benchmark. Desk-scale "
            "defaults: T=300, seeds=0,1,2, N=300 per step (exp6 uses N=25, "
            "mode switches every 40 steps); override any config key with --set."
        ),
    )
    parser.add_argument("--config", help="flat key=value config file")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment (exp1..exp6) or the theory checks")
    run.add_argument("target", choices=sorted(EXPERIMENTS) + ["checks", "all"])
    run.add_argument("--experiment", help="alias for the positional target", default=None)
    run.add_argument("--T", type=int, default=None, help="episode length")
    run.add_argument("--seeds", default=None, help="comma-separated seed list")
    run.add_argument("--N", type=int, default=None, help="feasibility samples per step")
    run.add_argument("--controllers", default=None, help="comma-separated controller subset")
    run.add_argument("--out", default=None, help="output directory")
    run.add_argument("--jobs", type=int, default=None, help="worker threads (default 1)")
    run.add_argument("--set", action="append", metavar="KEY=VALUE",
                     help="override any config key (repeatable)")

    show = sub.add_parser("show-config", help="print the effective configuration")
    validate = sub.add_parser("validate-config", help="validate a config file")
    for p in (show, validate):
        p.add_argument("--set", action="append", metavar="KEY=VALUE")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = load_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    if args.command == "show-config":
        sys.stdout.write(config.to_file_text())
        return EXIT_OK
    if args.command == "validate-config":
        print("config ok")
        return EXIT_OK
    target = args.experiment or args.target
    if target == "checks":
        return _run_checks(config)
    if target == "all":
        code = EXIT_OK
        for name in sorted(EXPERIMENTS):
            code = max(code, _run_experiment(config, name))
        return code
    return _run_experiment(config, target)


def console_main() -> None:
    raise SystemExit(main(sys.argv[1:]))


if __name__ == "__main__":
    console_main()

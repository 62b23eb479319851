"""Experiment runner.

    fedmosaic run --config pathological.toml [--modes local_only,fedmosaic]
                  [--outdir runs/x] [--dry-run]

For each seed and mode it writes ``<outdir>/<mode>/<seed>/`` containing
``run.json``, ``rounds.csv``, ``manifest.json`` and ``report.json``, and
finally ``<outdir>/summary.csv`` with per-client and mean final accuracy
(mean and standard deviation across seeds).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import re
import shutil
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import tomli_w

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .data import SCHEMES, PartitionSpec, ScenarioSpec, make_scenario, write_manifest
from .learner import DivergenceError
from .metrics import format_report, trend_checks
from .protocol import MODES, ConfigError, DPConfig, ProtocolConfig, run_experiment

log = logging.getLogger("fedmosaic")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3

_DATA_KEYS = {"num_classes", "dim", "per_class", "separation", "public_fraction",
              "test_per_client"}
_PARTITION_KEYS = {"scheme", "num_clients", "classes_per_client", "alpha", "domains",
                   "clients_per_domain", "target_classes"}
_SHIFT_KEYS = {"rotation", "scale_step", "bias_gap", "noise"}
_PROTOCOL_KEYS = {"num_rounds", "sync_period", "step_size", "batch_size", "expertise_variant",
                  "mode", "model_kind", "hidden", "n_jobs", "diagnostics"}
_DP_KEYS = {"epsilon", "clip_max"}


class ConfigValidationError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: ScenarioSpec
    protocol: ProtocolConfig
    modes: tuple = ("local_only", "fedmosaic")
    seeds: tuple = (0,)
    outdir: str = "runs"

    def for_seed(self, seed: int):
        part = dataclasses.replace(self.scenario.partition, seed=seed)
        return (dataclasses.replace(self.scenario, partition=part),
                self.protocol.replace(seed=seed))

    def to_dict(self) -> dict:
        s, p = self.scenario, self.scenario.partition
        partition = {k: getattr(p, k) for k in sorted(_PARTITION_KEYS) if k != "target_classes"}
        if p.target_classes is not None:
            partition["target_classes"] = list(p.target_classes)
        data = {k: getattr(s, k) for k in sorted(_DATA_KEYS)}
        data["partition"] = partition
        data["shift"] = {"rotation": s.rotation, "scale_step": s.scale_step,
                         "bias_gap": s.bias_gap, "noise": s.shift_noise}
        protocol = {k: getattr(self.protocol, k) for k in sorted(_PROTOCOL_KEYS)}
        if self.protocol.dp is not None:
            protocol["dp"] = dataclasses.asdict(self.protocol.dp)
        out = {"data": data, "protocol": protocol,
               "run": {"outdir": self.outdir, "modes": list(self.modes),
                       "seeds": list(self.seeds)}}
        if s.flipped_label_client is not None:
            out["scenario"] = {"flipped_label_client": s.flipped_label_client}
        return out

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())


def _line_of(text: str, section: str, key: Optional[str] = None) -> Optional[int]:
    """Best-effort line number of ``key`` inside table ``section``."""
    current = ""
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        m = re.match(r"^\[\s*([^\]]+?)\s*\]", line)
        if m:
            current = m.group(1)
            if key is None and current == section:
                return no
            continue
        if key is not None and current == section and re.match(rf"^{re.escape(key)}\s*=", line):
            return no
    return None


def _take(table: dict, allowed: set, section: str, text: str) -> dict:
    for k, v in table.items():
        if isinstance(v, dict):
            continue
        if k not in allowed:
            raise ConfigValidationError(f"unknown key {k!r} in [{section}]",
                                        _line_of(text, section, k))
    return {k: v for k, v in table.items() if k in allowed}


def parse_config(text: str) -> ExperimentConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigValidationError(str(exc), int(m.group(1)) if m else None) from None

    for k in raw:
        if k not in ("data", "protocol", "run", "scenario"):
            raise ConfigValidationError(f"unknown section [{k}]", _line_of(text, k))
    data = raw.get("data", {})
    d = _take(data, _DATA_KEYS, "data", text)
    part = _take(data.get("partition", {}), _PARTITION_KEYS, "data.partition", text)
    shift = _take(data.get("shift", {}), _SHIFT_KEYS, "data.shift", text)
    proto = raw.get("protocol", {})
    p = _take(proto, _PROTOCOL_KEYS, "protocol", text)
    dp = _take(proto.get("dp", {}), _DP_KEYS, "protocol.dp", text) if "dp" in proto else None
    scen = _take(raw.get("scenario", {}), {"flipped_label_client"}, "scenario", text)
    run = _take(raw.get("run", {}), {"outdir", "modes", "seeds"}, "run", text)

    def fail(msg, section, key=None):
        raise ConfigValidationError(msg, _line_of(text, section, key))

    if "scheme" not in part:
        fail("missing partition scheme", "data.partition")
    if part["scheme"] not in SCHEMES:
        fail(f"unknown scheme {part['scheme']!r}", "data.partition", "scheme")
    if "target_classes" in part:
        part["target_classes"] = tuple(part["target_classes"])
    try:
        partition = PartitionSpec(**part)
    except (TypeError, ValueError) as exc:
        fail(str(exc), "data.partition")
    try:
        scenario = ScenarioSpec(
            partition=partition,
            rotation=shift.get("rotation", ScenarioSpec.rotation),
            scale_step=shift.get("scale_step", ScenarioSpec.scale_step),
            bias_gap=shift.get("bias_gap", ScenarioSpec.bias_gap),
            shift_noise=shift.get("noise", ScenarioSpec.shift_noise),
            flipped_label_client=scen.get("flipped_label_client"),
            **d,
        )
    except TypeError as exc:
        fail(str(exc), "data")
    if scenario.num_classes < 2 or scenario.dim < 2 or scenario.per_class < 1:
        fail("need num_classes >= 2, dim >= 2, per_class >= 1", "data")
    if not 0 < scenario.public_fraction < 1:
        fail("public_fraction must lie in (0, 1)", "data", "public_fraction")
    flip = scenario.flipped_label_client
    if flip is not None and not 0 <= flip < partition.num_clients:
        fail(f"flipped_label_client {flip} not in [0, {partition.num_clients})",
             "scenario", "flipped_label_client")
    if partition.target_classes and any(not 0 <= c < scenario.num_classes
                                        for c in partition.target_classes):
        fail("target class out of range", "data.partition", "target_classes")

    try:
        protocol = ProtocolConfig(dp=DPConfig(**dp) if dp is not None else None, **p)
    except TypeError as exc:
        fail(str(exc), "protocol")
    modes = tuple(run.get("modes", ("local_only", "fedmosaic")))
    seeds = tuple(int(s) for s in run.get("seeds", (0,)))
    for mode in modes:
        if mode not in MODES:
            fail(f"unknown mode {mode!r}", "run", "modes")
    if len(seeds) < 1:
        fail("need at least one seed", "run", "seeds")
    cfg = ExperimentConfig(scenario, protocol, modes, seeds, run.get("outdir", "runs"))
    _validate_modes(cfg, text)
    return cfg


def _validate_modes(cfg: ExperimentConfig, text: str = ""):
    for mode in cfg.modes:
        try:
            cfg.protocol.replace(mode=mode, dp=cfg.protocol.dp if mode == "fedmosaic" else None) \
                .validate()
        except ConfigError as exc:
            raise ConfigValidationError(str(exc), _line_of(text, "protocol")) from None


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


def _summary_rows(results: dict) -> list:
    rows = []
    for mode, per_seed in results.items():
        accs = np.array([r.final_accuracies() for r in per_seed])
        n_seeds, m = accs.shape
        for i in range(m):
            rows.append([mode, i, accs[:, i].mean(), accs[:, i].std(), n_seeds])
        means = accs.mean(axis=1)
        rows.append([mode, "mean", means.mean(), means.std(), n_seeds])
    return rows


def write_summary(results: dict, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mode", "client_id", "mean_test_acc", "std_test_acc", "num_seeds"])
        for mode, cid, mean, std, n in _summary_rows(results):
            w.writerow([mode, cid, repr(float(mean)), repr(float(std)), n])


def dry_run(cfg: ExperimentConfig, out=None):
    out = out or sys.stdout
    for seed in cfg.seeds:
        spec, _ = cfg.for_seed(seed)
        sc = make_scenario(spec)
        print(f"seed {seed}: m={sc.num_clients} |U|={len(sc.pool)} "
              f"scheme={spec.partition.scheme} modes={','.join(cfg.modes)}", file=out)
        for i, classes in enumerate(sc.client_classes):
            dom = f" domain={sc.client_domains[i]}" if spec.partition.scheme in (
                "feature_shift", "hybrid") else ""
            print(f"  client {i}: n={len(sc.shards[i])} classes={classes}{dom}", file=out)


def run_all(cfg: ExperimentConfig, outdir: Path) -> dict:
    results = {mode: [] for mode in cfg.modes}
    created = []
    try:
        for seed in cfg.seeds:
            spec, proto = cfg.for_seed(seed)
            sc = make_scenario(spec)
            for mode in cfg.modes:
                pc = proto.replace(mode=mode, dp=proto.dp if mode == "fedmosaic" else None)
                record = run_experiment(sc.shards, sc.pool, sc.test_sets, pc, sc.pool_truth)
                results[mode].append(record)
                run_dir = outdir / mode / str(seed)
                if not run_dir.exists():
                    created.append(run_dir)
                run_dir.mkdir(parents=True, exist_ok=True)
                (run_dir / "run.json").write_text(record.to_json())
                (run_dir / "rounds.csv").write_text(record.rounds_csv())
                write_manifest(sc, run_dir / "manifest.json")
                if pc.num_rounds >= 8:
                    report = trend_checks(record)
                    (run_dir / "report.json").write_text(json.dumps(report, indent=1))
                    (run_dir / "report.txt").write_text(format_report(report) + "\n")
                log.info("%s seed=%d mean acc %.4f", mode, seed,
                         record.final_accuracies().mean())
        summary = outdir / "summary.csv"
        created.append(summary)
        write_summary(results, summary)
    except BaseException:
        for path in reversed(created):
            if path.is_dir():
                shutil.rmtree(path, ignore_errors=True)
            elif path.exists():
                path.unlink()
        raise
    return results


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedmosaic", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run experiments from a config file")
    run.add_argument("--config", required=True, help="TOML experiment config")
    run.add_argument("--modes", help="comma-separated modes, overrides [run].modes")
    run.add_argument("--outdir", help="output directory, overrides [run].outdir")
    run.add_argument("--dry-run", action="store_true",
                     help="print the resolved scenario and exit")
    run.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        if args.modes:
            modes = tuple(m.strip() for m in args.modes.split(",") if m.strip())
            bad = [m for m in modes if m not in MODES]
            if bad or not modes:
                raise ConfigValidationError(f"unknown mode(s) {bad} in --modes")
            cfg = dataclasses.replace(cfg, modes=modes)
            _validate_modes(cfg)
        if args.outdir:
            cfg = dataclasses.replace(cfg, outdir=args.outdir)
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigValidationError as exc:
        print(f"{args.config}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    if args.dry_run:
        try:
            dry_run(cfg)
        except ValueError as exc:
            print(f"{args.config}: config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        return EXIT_OK

    outdir = Path(cfg.outdir)
    try:
        run_all(cfg, outdir)
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, ValueError) as exc:
        print(f"{args.config}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"wrote {outdir / 'summary.csv'}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

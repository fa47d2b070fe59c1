"""``chanmap`` command-line interface.

Every command writes into ``--out``: a ``manifest.json`` plus the command's
outputs (checkpoints, ``history.csv``, ``summary.csv``/``summary.json``,
mapping artifacts). Failures exit nonzero after printing a single line
``error[<tag>]: <message>`` to stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import yaml

from .data import CIFAR_MEAN, CIFAR_STD, DATA_ENV, DataError, Dataset, gen_synthetic, load_cifar10_binary
from .export import ExportError, MappingArtifact, artifact_cost, export_network, verify_artifact
from .hwmodel import PlatformProfile, ProfileError, latency_cost, resolve_platform
from .netspec import NetworkSpec, SpecError, resolve_spec
from .network import Network, PhaseError, build_supernet
from .search import (
    HISTORY_FIELDS,
    SUMMARY_FIELDS,
    ParetoPoint,
    TrainConfig,
    evaluate,
    pareto_front,
    run_baseline,
    run_phase,
    sweep,
    write_rows,
)
from .tensor import make_rng

log = logging.getLogger("chanmap")

EXIT_CODES = {
    "usage": 2,
    "malformed-config": 3,
    "unknown-cu": 4,
    "conflicting-flags": 5,
    "data": 6,
    "phase-order": 7,
    "export": 8,
    "cost-mismatch": 9,
    "verify-failed": 10,
    "io": 11,
}


class CliError(Exception):
    def __init__(self, tag: str, message: str):
        super().__init__(message)
        self.tag = tag


# ----------------------------------------------------------------- inputs
def _load_config(args, base: TrainConfig | None = None) -> TrainConfig:
    d = base.to_dict() if base is not None else {}
    if args.config:
        try:
            loaded = yaml.safe_load(Path(args.config).read_text()) or {}
        except (OSError, yaml.YAMLError) as e:
            raise CliError("malformed-config", f"{args.config}: {e}") from e
        if not isinstance(loaded, dict):
            raise CliError("malformed-config", f"{args.config}: expected a mapping")
        d.update(loaded)
    d["seed"] = args.seed
    if getattr(args, "lam", None) is not None:
        d["lam"] = args.lam
    if getattr(args, "target", None):
        d["target"] = args.target
    if getattr(args, "lambda_mode", None):
        d["lambda_mode"] = args.lambda_mode
    if args.epochs:
        parts = [int(v) for v in args.epochs.split(",")]
        if len(parts) != 3:
            raise CliError("usage", "--epochs takes warmup,search,final")
        d["epochs"] = dict(zip(("warmup", "search", "final"), parts))
    if args.batch_size:
        d["batch_size"] = args.batch_size
    try:
        return TrainConfig.from_dict(d)
    except (TypeError, ValueError) as e:
        raise CliError("malformed-config", str(e)) from e


def _load_net_platform(args) -> tuple[NetworkSpec, PlatformProfile]:
    try:
        platform = resolve_platform(args.platform)
    except (ProfileError, TypeError, KeyError, yaml.YAMLError) as e:
        tag = "unknown-cu" if "CU" in str(e) else "malformed-config"
        raise CliError(tag, str(e)) from e
    try:
        spec = resolve_spec(args.net)
    except (SpecError, yaml.YAMLError) as e:
        raise CliError("malformed-config", str(e)) from e
    return spec, platform


def _load_data(args, config: TrainConfig, spec: NetworkSpec) -> tuple[Dataset, Dataset, Dataset, dict]:
    source = args.data or os.environ.get(DATA_ENV)
    if not source:
        raise CliError("data", f"no --data given and ${DATA_ENV} is unset")
    limit = args.limit
    if source.startswith("synthetic"):
        full = gen_synthetic(spec.num_classes, limit or 1000, args.seed, spec.input_shape, noise=args.noise)
        test = gen_synthetic(spec.num_classes, args.test_limit, args.seed, spec.input_shape, noise=args.noise, split="test")
        desc = {"source": "synthetic", "n": len(full), "noise": args.noise}
    else:
        try:
            full = load_cifar10_binary(source, limit, args.seed, "train")
            test = load_cifar10_binary(source, args.test_limit, args.seed, "test")
        except (DataError, OSError) as e:
            raise CliError("data", str(e)) from e
        desc = {"source": "cifar10", "path": str(Path(source).resolve()), "n": len(full), "mean": CIFAR_MEAN, "std": CIFAR_STD}
    if full.shape != spec.input_shape or full.classes != spec.num_classes:
        raise CliError("conflicting-flags", f"data {full.shape}/{full.classes} classes does not fit network {spec.input_shape}/{spec.num_classes}")
    train, val = full.split_validation(config.val_fraction, args.seed)
    return train, val, test, desc


# ---------------------------------------------------------------- outputs
def _hash(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()


def _write_manifest(out: Path, args, payload: dict, started: float):
    manifest = {
        "command": args.command,
        "argv": sys.argv[1:],
        "config_paths": {k: getattr(args, k, None) for k in ("net", "platform", "config", "from_")},
        "seed": args.seed,
        "content_hash": _hash(payload),
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "output_dir": str(out.resolve()),
        "normalization": {"mean": CIFAR_MEAN, "std": CIFAR_STD},
        "inputs": payload,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, default=str) + "\n")


def save_checkpoint(path: Path, net: Network, config: TrainConfig, extra: dict | None = None):
    meta = {
        "spec": net.spec.to_dict(),
        "platform": net.platform.to_dict(),
        "config": config.to_dict(),
        "completed": net.completed,
        **(extra or {}),
    }
    np.savez(path, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **net.state_dict())


def load_checkpoint(path: str | Path) -> tuple[Network, TrainConfig, dict]:
    try:
        with np.load(path) as z:
            meta = json.loads(bytes(z["__meta__"]).decode())
            state = {k: z[k] for k in z.files if k != "__meta__"}
    except (OSError, KeyError, ValueError) as e:
        raise CliError("io", f"cannot read checkpoint {path}: {e}") from e
    spec = NetworkSpec.from_dict(meta["spec"])
    platform = PlatformProfile.from_dict(meta["platform"])
    config = TrainConfig.from_dict(meta["config"])
    net = build_supernet(spec, platform, make_rng(config.seed), threshold=config.threshold)
    net.load_state_dict(state)
    net.completed = list(meta["completed"])
    net.set_quant("search" in net.completed or "final" in net.completed)
    return net, config, meta


def _check_same(args, net: Network):
    """``--net``/``--platform`` given next to ``--from`` must agree with the checkpoint."""
    if args.net:
        spec = resolve_spec(args.net)
        if spec.to_dict() != net.spec.to_dict():
            raise CliError("conflicting-flags", f"--net {args.net} differs from the checkpoint network {net.spec.name}")
    if args.platform:
        if resolve_platform(args.platform).to_dict() != net.platform.to_dict():
            raise CliError("conflicting-flags", f"--platform {args.platform} differs from the checkpoint platform {net.platform.name}")


def _point_row(p: ParetoPoint) -> dict:
    return asdict(p)


def _history_rows(phases) -> list[dict]:
    return [row for ph in phases for row in ph.history]


def _export(net: Network, val: Dataset, path: Path) -> MappingArtifact:
    try:
        art, _ = export_network(net, val.images[:32])
    except ExportError as e:
        raise CliError("export", str(e)) from e
    art.save(path)
    return art


# --------------------------------------------------------------- commands
def cmd_phase(args, out: Path) -> dict:
    phase = {"warmup": "warmup", "search": "search", "finetune": "final"}[args.command]
    if phase == "warmup":
        spec, platform = _load_net_platform(args)
        config = _load_config(args)
        net = build_supernet(spec, platform, make_rng(config.seed), threshold=config.threshold)
    else:
        if not args.from_:
            raise CliError("usage", f"{args.command} needs --from <checkpoint>")
        net, base, _ = load_checkpoint(args.from_)
        _check_same(args, net)
        config = _load_config(args, base)
        spec = net.spec
    train, val, test, desc = _load_data(args, config, spec)
    try:
        res = run_phase(phase, net, config, train, val, make_rng([config.seed, len(net.completed)]))
    except PhaseError as e:
        raise CliError("phase-order", str(e)) from e
    save_checkpoint(out / f"{phase}.npz", net, config)
    write_rows(out / "history.csv", res.history, HISTORY_FIELDS)
    _, report = latency_cost(net, net.platform, exact=True)
    summary = {"phase": phase, "val_acc": res.val_acc, "best_epoch": res.best_epoch, "cycles": report.total_cycles, "energy": report.energy_mw_cycles}
    if phase == "final":
        point = ParetoPoint(config.lam, evaluate(net, val), evaluate(net, test), report.total_cycles, report.energy_mw_cycles, "artifact.json")
        _export(net, val, out / "artifact.json")
        write_rows(out / "summary.csv", [_point_row(point)], SUMMARY_FIELDS)
    (out / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    return {"spec": spec.to_dict(), "platform": net.platform.to_dict(), "config": config.to_dict(), "data": desc, "from": args.from_}


def cmd_run(args, out: Path) -> dict:
    spec, platform = _load_net_platform(args)
    config = _load_config(args)
    train, val, test, desc = _load_data(args, config, spec)
    result = sweep([config.lam], spec, platform, config, train, val, test)
    run = result.runs[0]
    if run is None:
        raise CliError("phase-order", result.points[0].error)
    net = build_supernet(spec, platform, make_rng(config.seed), threshold=config.threshold)
    net.load_state_dict(run.state)
    net.completed = ["warmup", "search", "final"]
    net.set_quant(True)
    save_checkpoint(out / "final.npz", net, config)
    _export(net, val, out / "artifact.json")
    point = replace(run.point, artifact="artifact.json")
    write_rows(out / "history.csv", _history_rows([result.warmup] + run.phases), HISTORY_FIELDS)
    write_rows(out / "summary.csv", [_point_row(point)], SUMMARY_FIELDS)
    (out / "summary.json").write_text(json.dumps({"points": [_point_row(point)]}, indent=1) + "\n")
    return {"spec": spec.to_dict(), "platform": platform.to_dict(), "config": config.to_dict(), "data": desc}


def cmd_sweep(args, out: Path) -> dict:
    spec, platform = _load_net_platform(args)
    config = _load_config(args)
    try:
        lambdas = [float(v) for v in args.lambdas.split(",") if v.strip()]
    except ValueError as e:
        raise CliError("usage", f"--lambdas: {e}") from e
    if not lambdas:
        raise CliError("usage", "--lambdas needs at least one value")
    train, val, test, desc = _load_data(args, config, spec)
    result = sweep(lambdas, spec, platform, config, train, val, test, jobs=args.jobs)
    points = []
    for i, (p, run) in enumerate(zip(result.points, result.runs)):
        if run is not None:
            sub = out / f"lambda_{i}"
            sub.mkdir(exist_ok=True)
            net = build_supernet(spec, platform, make_rng(config.seed), threshold=config.threshold)
            net.load_state_dict(run.state)
            net.set_quant(True)
            _export(net, val, sub / "artifact.json")
            write_rows(sub / "history.csv", _history_rows(run.phases), HISTORY_FIELDS)
            p = replace(p, artifact=f"lambda_{i}/artifact.json")
        points.append(p)
    front = pareto_front(points)
    write_rows(out / "history.csv", result.warmup.history, HISTORY_FIELDS)
    write_rows(out / "summary.csv", [_point_row(p) for p in points], SUMMARY_FIELDS)
    write_rows(out / "front.csv", [_point_row(p) for p in front], SUMMARY_FIELDS)
    (out / "summary.json").write_text(
        json.dumps({"points": [_point_row(p) for p in points], "front": [_point_row(p) for p in front]}, indent=1) + "\n"
    )
    return {"spec": spec.to_dict(), "platform": platform.to_dict(), "config": config.to_dict(), "data": desc, "lambdas": lambdas}


def cmd_baseline(args, out: Path) -> dict:
    spec, platform = _load_net_platform(args)
    config = _load_config(args)
    if args.kind.startswith("all-on-cu"):
        name = args.kind.partition(":")[2]
        if name not in [c.name for c in platform.cus]:
            raise CliError("unknown-cu", f"platform {platform.name} has no CU {name!r}")
    train, val, test, desc = _load_data(args, config, spec)
    try:
        solution, run = run_baseline(args.kind, spec, platform, config, train, val, test)
    except ValueError as e:
        raise CliError("malformed-config", str(e)) from e
    net = build_supernet(spec, platform, make_rng(config.seed), threshold=config.threshold)
    net.load_state_dict(run.state)
    net.set_quant(True)
    _export(net, val, out / "artifact.json")
    point = replace(run.point, artifact="artifact.json")
    write_rows(out / "history.csv", _history_rows(run.phases), HISTORY_FIELDS)
    write_rows(out / "summary.csv", [_point_row(point)], SUMMARY_FIELDS)
    assignment = {k: v.tolist() for k, v in solution.assignment.items()}
    (out / "summary.json").write_text(json.dumps({"kind": args.kind, "point": _point_row(point), "assignment": assignment}, indent=1) + "\n")
    return {"spec": spec.to_dict(), "platform": platform.to_dict(), "config": config.to_dict(), "data": desc, "kind": args.kind}


def cmd_export(args, out: Path) -> dict:
    if not args.from_:
        raise CliError("usage", "export needs --from <checkpoint>")
    net, config, _ = load_checkpoint(args.from_)
    _check_same(args, net)
    net.set_quant(True)
    inputs = make_rng(args.seed).standard_normal((16,) + net.spec.input_shape).astype(np.float32)
    if args.data:
        _, val, _, _ = _load_data(args, config, net.spec)
        inputs = val.images[:32]
    try:
        art, _ = export_network(net, inputs)
    except ExportError as e:
        raise CliError("export", str(e)) from e
    art.save(out / "artifact.json")
    return {"from": args.from_, "seed": args.seed}


def cmd_eval_cost(args, out: Path) -> dict:
    art = _read_artifact(args)
    report = artifact_cost(art)
    (out / "cost.json").write_text(json.dumps(report.to_dict(), indent=1) + "\n")
    embedded = art.meta["cost"]
    print(json.dumps({"total_cycles": report.total_cycles, "energy_uj": report.energy_uj, "matches_artifact": report.to_dict() == embedded}))
    if report.to_dict() != embedded:
        raise CliError("cost-mismatch", "recomputed cost differs from the artifact's embedded report")
    return {"artifact": args.artifact}


def cmd_verify(args, out: Path) -> dict:
    art = _read_artifact(args)
    if not args.from_:
        raise CliError("usage", "verify needs --from <checkpoint> as the reference network")
    net, config, _ = load_checkpoint(args.from_)
    net.set_quant(True)
    if not net.is_hard():
        net.apply_assignment(net.assignment())
    inputs = make_rng(args.seed).standard_normal((16,) + net.spec.input_shape).astype(np.float32)
    try:
        rep = verify_artifact(art, net, inputs)
    except ExportError as e:
        raise CliError("export", str(e)) from e
    result = {"passed": rep.passed, "max_abs_dev": rep.max_abs_dev, "layer": rep.layer, "tolerance": rep.tolerance}
    (out / "verify.json").write_text(json.dumps(result | {"per_layer": rep.per_layer}, indent=1) + "\n")
    print(json.dumps(result))
    if not rep.passed:
        raise CliError("verify-failed", f"max deviation {rep.max_abs_dev:.3g} first at layer {rep.layer}")
    return {"artifact": args.artifact, "from": args.from_, "seed": args.seed}


def _read_artifact(args) -> MappingArtifact:
    if not args.artifact:
        raise CliError("usage", f"{args.command} needs --artifact <file>")
    try:
        return MappingArtifact.load(args.artifact)
    except (OSError, ValueError, KeyError) as e:
        raise CliError("io", f"cannot read artifact {args.artifact}: {e}") from e


COMMANDS = {
    "warmup": cmd_phase,
    "search": cmd_phase,
    "finetune": cmd_phase,
    "run": cmd_run,
    "sweep": cmd_sweep,
    "baseline": cmd_baseline,
    "export": cmd_export,
    "eval-cost": cmd_eval_cost,
    "verify": cmd_verify,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chanmap", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--net", help="builtin network name or spec YAML")
        p.add_argument("--platform", help="builtin platform name or profile YAML")
        p.add_argument("--data", help=f"CIFAR-10 binary directory, or 'synthetic' (default ${DATA_ENV})")
        p.add_argument("--config", help="training config YAML")
        p.add_argument("--from", dest="from_", help="checkpoint to continue from")
        p.add_argument("--artifact", help="mapping artifact JSON")
        p.add_argument("--epochs", help="warmup,search,final epoch counts")
        p.add_argument("--batch-size", type=int)
        p.add_argument("--limit", type=int, help="training samples to load (before the validation split)")
        p.add_argument("--test-limit", type=int, default=1000)
        p.add_argument("--noise", type=float, default=1.0, help="pixel noise of synthetic data")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("search", "run", "finetune", "sweep", "baseline"):
            p.add_argument("--target", choices=("latency", "energy"))
            p.add_argument("--lambda-mode", choices=("raw", "normalized"))
        if name in ("search", "run", "finetune"):
            p.add_argument("--lambda", dest="lam", type=float)
        if name == "sweep":
            p.add_argument("--lambdas", required=True, help="comma-separated lambda values")
            p.add_argument("--jobs", type=int, default=1)
        if name == "baseline":
            p.add_argument("--kind", required=True, help="all-on-cu:<name> | io-heuristic | min-cost")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "lam"):
        args.lam = None
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    needs_net = args.command in ("warmup", "run", "sweep", "baseline")
    try:
        if needs_net and not (args.net and args.platform):
            raise CliError("usage", f"{args.command} needs --net and --platform")
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        started = time.time()
        payload = COMMANDS[args.command](args, out)
        _write_manifest(out, args, payload | {"command": args.command}, started)
    except CliError as e:
        print(f"error[{e.tag}]: {e}", file=sys.stderr)
        return EXIT_CODES[e.tag]
    except (SpecError, ProfileError) as e:
        print(f"error[malformed-config]: {e}", file=sys.stderr)
        return EXIT_CODES["malformed-config"]
    except KeyError as e:
        print(f"error[unknown-cu]: {e.args[0]}", file=sys.stderr)
        return EXIT_CODES["unknown-cu"]
    except OSError as e:
        print(f"error[io]: {e}", file=sys.stderr)
        return EXIT_CODES["io"]
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line operator surface.

Commands: train, finetune, sample, evaluate, relax, protocol-check,
curves. Configuration is a single JSON document; --set key=value flags
override individual fields (flags win over the file). Exit codes: 0 ok,
2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import nnkit as nn
from .chem import Bag, Canvas, format_xyz, parse_formula, read_xyz, write_xyz
from .discovery import (
    BagMetrics,
    DiscoveryBuffer,
    ReferenceSet,
    evaluate_records,
    sample_protocol,
)
from .energy import CalculatorError, SurrogateCalculator, relax
from .env import AGENT_PRESETS, LinearSchedule, MolEnv, RewardConfig
from .molgraph import canonical_key, perceive_bonds
from .policy import NetConfig, Policy
from .ppo import Trainer, TrainConfig
from .protocol import ExternalCalculator, run_conformance_check

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


class ConfigError(ValueError):
    pass


DEFAULT_CONFIG = {
    "seed": 0,
    "agent": "AV",
    "calculator": "surrogate",
    "dipole_stub": False,
    "total_iters": 100,
    "checkpoints": 4,
    "bags": {"train": "builtin:mini"},
    "reward": {},
    "net": {},
    "train": {},
    "dipole_ramp": None,
}


def load_config(path: str | None, overrides: list[str] | None = None) -> dict:
    config = json.loads(json.dumps(DEFAULT_CONFIG))  # deep copy
    if path:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                user = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}")
        for key, value in user.items():
            if isinstance(value, dict) and isinstance(config.get(key), dict):
                config[key].update(value)
            else:
                config[key] = value
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = config
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return config


def _dataclass_from(cls, data: dict, context: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {context} fields: {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {context} config: {exc}")


def parse_ramp(text: str) -> LinearSchedule:
    parts = text.split(":")
    if len(parts) != 4:
        raise ConfigError(f"ramp must be start:end:v0:v1, got {text!r}")
    try:
        return LinearSchedule(int(parts[0]), int(parts[1]), float(parts[2]), float(parts[3]))
    except ValueError as exc:
        raise ConfigError(f"bad ramp {text!r}: {exc}")


def build_reward_config(config: dict) -> RewardConfig:
    agent = config.get("agent", "AV")
    extra = dict(config.get("reward", {}))
    ramp = config.get("dipole_ramp")
    if ramp:
        extra["dipole_schedule"] = parse_ramp(ramp) if isinstance(ramp, str) else (
            LinearSchedule(**ramp)
        )
    if isinstance(agent, str):
        if agent not in AGENT_PRESETS:
            raise ConfigError(
                f"unknown agent preset {agent!r}; known: {sorted(AGENT_PRESETS)}"
            )
        a, f, v = AGENT_PRESETS[agent]
        coefs = {"coef_A": a, "coef_F": f, "coef_V": v}
    elif isinstance(agent, dict):
        coefs = {k: float(agent.get(k, 0.0)) for k in ("coef_A", "coef_F", "coef_V")}
    else:
        raise ConfigError(f"agent must be a preset name or coefficient map: {agent!r}")
    try:
        return RewardConfig(**coefs, **extra)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad reward config: {exc}")


ADAPTER_ENV_VAR = "MOLRL_ADAPTER"


def build_calculator(config: dict):
    spec_str = config.get("calculator", "surrogate")
    if spec_str == "surrogate":
        return SurrogateCalculator(dipole_stub=bool(config.get("dipole_stub")))
    if isinstance(spec_str, str) and spec_str.startswith("external:"):
        return ExternalCalculator(spec_str[len("external:") :])
    if spec_str == "external":
        command = os.environ.get(ADAPTER_ENV_VAR, "").strip()
        if not command:
            raise ConfigError(
                f"calculator 'external' needs the adapter command in ${ADAPTER_ENV_VAR}"
            )
        return ExternalCalculator(command)
    raise ConfigError(
        f"calculator must be 'surrogate', 'external:<command>', or 'external'"
        f" (with ${ADAPTER_ENV_VAR} set), got {spec_str!r}"
    )


def load_bags(spec_str: str) -> list[Bag]:
    if spec_str == "builtin:mini":
        text = resources.files("molrl.data").joinpath("mini_bags.txt").read_text()
    else:
        if not os.path.exists(spec_str):
            raise ConfigError(f"bag file not found: {spec_str}")
        with open(spec_str, "r", encoding="utf-8") as fh:
            text = fh.read()
    bags = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            try:
                bags.append(parse_formula(line))
            except ValueError as exc:
                raise ConfigError(f"bad formula {line!r}: {exc}")
    if not bags:
        raise ConfigError(f"no formulas in bag spec {spec_str!r}")
    return bags


def resolved_config_hash(config: dict) -> str:
    return nn.config_hash(config)


def build_trainer(config: dict) -> Trainer:
    reward = build_reward_config(config)
    if reward.dipole_schedule is not None:
        calc_probe = build_calculator(config)
        if not getattr(calc_probe, "supports_dipole", False):
            raise ConfigError(
                "dipole ramp configured but the calculator computes no dipole;"
                " use an external adapter or set dipole_stub true"
            )
    net_cfg = _dataclass_from(NetConfig, dict(config.get("net", {})), "net")
    train_cfg = _dataclass_from(TrainConfig, dict(config.get("train", {})), "train")
    if reward.kill_distance >= net_cfg.d_min:
        raise ConfigError(
            f"kill_distance {reward.kill_distance} must stay below d_min {net_cfg.d_min}"
        )
    bags = load_bags(config.get("bags", {}).get("train", "builtin:mini"))
    seed = int(config.get("seed", 0))
    store = nn.ParamStore(seed=seed)
    policy = Policy(net_cfg, store)
    cfg_hash = resolved_config_hash(config)
    trainer = Trainer(
        policy,
        lambda: MolEnv(reward, build_calculator(config)),
        bags,
        train_cfg,
        seed,
        cfg_hash=cfg_hash,
    )
    return trainer


def _json_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":")) + "\n"


def _checkpoint_iters(total: int, count: int) -> list[int]:
    if count <= 0:
        return [total]
    spacing = max(total // count, 1)
    iters = list(range(spacing, total + 1, spacing))[:count]
    if iters and iters[-1] != total:
        iters[-1] = total
    return iters


def _train_loop(config: dict, out_dir: Path, trainer: Trainer, append: bool) -> int:
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    cfg_hash = resolved_config_hash(config)
    trainer.cfg_hash = cfg_hash
    with open(out_dir / "config.json", "w", encoding="utf-8") as fh:
        json.dump(config, fh, indent=2, sort_keys=True)
        fh.write("\n")

    total_iters = int(config["total_iters"])
    start = trainer.iteration
    ckpt_iters = [
        start + i
        for i in _checkpoint_iters(total_iters - start, int(config.get("checkpoints", 4)))
    ]
    seed = int(config.get("seed", 0))
    buffer = DiscoveryBuffer(keep_geometry=False)
    mode = "a" if append else "w"

    with open(out_dir / "metrics.jsonl", mode, encoding="utf-8") as mfh, open(
        out_dir / "discovery.jsonl", mode, encoding="utf-8"
    ) as dfh:
        if not append:
            header = {"type": "header", "config_hash": cfg_hash, "seed": seed}
            mfh.write(_json_line(header))
            dfh.write(_json_line(header))

        def sink(info: dict) -> None:
            key = buffer.record(
                info["bag"],
                info["canvas"],
                info["delta_e"],
                info["iteration"],
                valid=info["valid"],
            )
            record = {
                "iter": info["iteration"],
                "bag": info["bag"],
                "valid": info["valid"],
                "kill": info["kill"],
                "delta_e": info["delta_e"],
                "dipole": info["dipole"],
                "key": key,
                "unique_so_far": buffer.unique_count(info["bag"]),
            }
            dfh.write(_json_line(record))

        trainer.episode_sink = sink
        while trainer.iteration < total_iters:
            metrics = trainer.train_iteration()
            mfh.write(_json_line(metrics))
            if trainer.iteration in ckpt_iters:
                trainer.save(ckpt_dir / f"iter{trainer.iteration:06d}.ckpt")
    print(f"training complete at iteration {total_iters}, run dir {out_dir}")
    return EXIT_OK


def run_training(config: dict, out_dir: Path, resume: bool = False) -> int:
    trainer = build_trainer(config)
    print(f"policy parameters: {trainer.policy.n_parameters()}")
    append = False
    if resume:
        candidates = sorted((out_dir / "checkpoints").glob("iter*.ckpt"))
        if not candidates:
            raise ConfigError(f"--resume given but no checkpoints under {out_dir}")
        trainer.load(candidates[-1])
        append = True
        print(f"resumed from {candidates[-1]} at iteration {trainer.iteration}")
    return _train_loop(config, out_dir, trainer, append)


def _load_run(checkpoint: str, config_path: str | None):
    ckpt = Path(checkpoint)
    if config_path is None:
        candidate = ckpt.parent.parent / "config.json"
        if not candidate.exists():
            raise ConfigError(
                f"no config next to checkpoint ({candidate}); pass --config"
            )
        config_path = str(candidate)
    config = load_config(config_path)
    trainer = build_trainer(config)
    trainer.load(ckpt)
    return config, trainer


def cmd_train(args) -> int:
    config = load_config(args.config, args.set)
    if args.seed is not None:
        config["seed"] = args.seed
    return run_training(config, Path(args.out), resume=args.resume)


def cmd_finetune(args) -> int:
    ckpt = Path(args.checkpoint)
    if args.config:
        base_config = load_config(args.config, args.set)
    else:
        candidate = ckpt.parent.parent / "config.json"
        if not candidate.exists():
            raise ConfigError("no config next to checkpoint; pass --config")
        base_config = load_config(str(candidate), args.set)
    if args.reward != "dipole":
        raise ConfigError(f"only the dipole finetuning reward exists, got {args.reward!r}")
    parse_ramp(args.ramp)  # validate early
    base_config["dipole_ramp"] = args.ramp
    if not base_config.get("dipole_stub") and base_config.get("calculator") == "surrogate":
        raise ConfigError(
            "dipole finetuning needs a dipole source: external calculator or"
            " dipole_stub=true"
        )
    trainer = build_trainer(base_config)
    # a finetune intentionally forks the config, so the stored hash differs;
    # parameters + optimizer + worker streams all carry over
    _, extra = nn.load_checkpoint(ckpt, trainer.policy.store, expected_hash=None)
    if extra is not None:
        trainer.iteration = int(extra["iteration"])
        trainer.total_steps = int(extra["total_steps"])
        trainer.shuffle_rng.bit_generator.state = extra["shuffle_rng"]
        if len(extra["workers"]) == len(trainer.workers):
            for worker, snap in zip(trainer.workers, extra["workers"]):
                worker.restore(snap)
    base_config["total_iters"] = trainer.iteration + args.iters
    return _train_loop(base_config, Path(args.out), trainer, append=False)


def cmd_sample(args) -> int:
    config, trainer = _load_run(args.checkpoint, args.config)
    policy = trainer.policy
    if args.bags:
        if os.path.exists(args.bags):
            bags = load_bags(args.bags)
        else:
            bags = [parse_formula(f) for f in args.bags.split(",")]
    else:
        bags = load_bags(config.get("bags", {}).get("train", "builtin:mini"))
    reference = None
    if args.mode == "proportional":
        if not args.reference:
            raise ConfigError("proportional mode needs --reference")
        reference = ReferenceSet.from_jsonl(args.reference)
    reward = build_reward_config(config)
    make_env = lambda: MolEnv(reward, build_calculator(config))
    cfg_hash = resolved_config_hash(config)

    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    xyz_fh = open(args.xyz, "w", encoding="utf-8") if args.xyz else None
    count = 0
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write(
            _json_line(
                {"type": "header", "config_hash": cfg_hash, "seed": args.seed,
                 "checkpoint": str(args.checkpoint), "mode": args.mode,
                 "greedy": bool(args.greedy)}
            )
        )
        for rec in sample_protocol(
            policy,
            make_env,
            bags,
            mode=args.mode,
            count=args.n,
            proportionality=args.proportionality,
            reference=reference,
            seed=args.seed,
            greedy=args.greedy,
        ):
            canvas: Canvas = rec.pop("canvas")
            rec["xyz"] = format_xyz(canvas, f"{rec['bag']} sample={rec['sample_index']}")
            if rec["valid"]:
                rec["canonical_key"] = canonical_key(perceive_bonds(canvas)).key
            fh.write(_json_line(rec))
            if xyz_fh is not None:
                xyz_fh.write(rec["xyz"])
            count += 1
    if xyz_fh is not None:
        xyz_fh.close()
    print(f"sampled {count} molecules -> {out_path}")
    return EXIT_OK


_CSV_COLUMNS = [
    "formula",
    "n_sampled",
    "validity",
    "n_unique",
    "n_rediscovered",
    "n_novel",
    "rediscovery_ratio",
    "expansion_ratio",
    "mean_rrae",
    "n_rrae",
    "mean_rmsd",
    "relax_stability",
]


def _metrics_row(m: BagMetrics, columns: list[str]) -> list[str]:
    row = []
    for col in columns:
        val = getattr(m, col)
        if val is None:
            row.append("")
        elif isinstance(val, float):
            row.append(f"{val:.6f}")
        else:
            row.append(str(val))
    return row


def cmd_evaluate(args) -> int:
    records = []
    header = {}
    with open(args.molecules, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if rec.get("type") == "header":
                header = rec
                continue
            records.append(rec)
    reference = ReferenceSet.from_jsonl(args.reference) if args.reference else None
    calc = None
    if not args.no_relax:
        calc = (
            ExternalCalculator(args.calculator[len("external:") :])
            if args.calculator.startswith("external:")
            else SurrogateCalculator()
        )
    per_bag, agg = evaluate_records(
        records, reference, calc, include_uniqueness=args.include_uniqueness
    )
    columns = _CSV_COLUMNS + (["uniqueness"] if args.include_uniqueness else [])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8", newline="") as fh:
        fh.write(
            f"# config_hash={header.get('config_hash', '')}"
            f" seed={header.get('seed', '')}\n"
        )
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for m in per_bag:
            writer.writerow(_metrics_row(m, columns))
        if agg is not None:
            writer.writerow(_metrics_row(agg, columns))
    print(f"evaluated {len(records)} molecules over {len(per_bag)} bags -> {out}")
    return EXIT_OK


def cmd_relax(args) -> int:
    canvas = read_xyz(args.xyz)
    calc = (
        ExternalCalculator(args.calculator[len("external:") :])
        if args.calculator.startswith("external:")
        else SurrogateCalculator()
    )
    result = relax(canvas, calc, max_steps=args.max_steps, fmax=args.fmax)
    write_xyz(
        args.out,
        result.canvas,
        f"relaxed E={result.energy:.8f} eV steps={result.steps}"
        f" converged={result.converged} stalled={result.stalled}",
    )
    if args.trace:
        with open(args.trace, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["step", "energy_ev", "stalled"])
            for i, e in enumerate(result.trace):
                writer.writerow([i, f"{e:.10f}", str(result.stalled and i == len(result.trace) - 1).lower()])
    print(
        f"relaxed {args.xyz}: {result.steps} steps, E={result.energy:.6f} eV,"
        f" converged={result.converged}, stalled={result.stalled}"
    )
    return EXIT_OK


def cmd_protocol_check(args) -> int:
    report = run_conformance_check(args.adapter, timeout=args.timeout)
    print(report.summary())
    return EXIT_OK if report.passed else EXIT_RUNTIME


def cmd_curves(args) -> int:
    rows = []
    seed = ""
    with open(args.metrics, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if rec.get("type") == "header":
                seed = rec.get("seed", "")
                continue
            iteration = rec.get("iter")
            for key, val in rec.items():
                if key == "iter" or val is None or not isinstance(val, (int, float)):
                    continue
                rows.append((iteration, key, val, seed))
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["iteration", "metric", "value", "seed"])
        for row in rows:
            writer.writerow(row)
    print(f"wrote {len(rows)} curve points -> {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="molrl",
        description="Train and evaluate bag-constrained 3D molecule builders.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run PPO training")
    p.add_argument("--config", help="JSON config file (defaults apply otherwise)")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--resume", action="store_true", help="resume from latest checkpoint")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field (dotted path)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="continue training with a dipole reward ramp")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--reward", default="dipole")
    p.add_argument("--ramp", required=True, metavar="START:END:V0:V1")
    p.add_argument("--iters", type=int, required=True, help="additional iterations")
    p.add_argument("--out", required=True)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("sample", help="sample molecules from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--bags", default=None, help="comma-separated formulas or a file")
    p.add_argument("--mode", choices=["fixed_count", "proportional"], default="fixed_count")
    p.add_argument("--n", type=int, default=100, help="episodes per bag (fixed_count)")
    p.add_argument("--proportionality", "-P", type=int, default=100)
    p.add_argument("--reference", default=None, help="reference JSONL (proportional)")
    p.add_argument("--greedy", action="store_true", help="deterministic argmax collection")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="molecules JSONL path")
    p.add_argument("--xyz", default=None, help="optional multi-frame XYZ dump")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("evaluate", help="compute discovery/energy metrics")
    p.add_argument("--molecules", required=True)
    p.add_argument("--reference", default=None)
    p.add_argument("--out", required=True, help="report CSV path")
    p.add_argument("--calculator", default="surrogate")
    p.add_argument("--no-relax", action="store_true",
                   help="skip relaxation metrics (fast count-only report)")
    p.add_argument("--include-uniqueness", action="store_true",
                   help="add the unique/sampled column (misleading under "
                        "formula-conditioned sampling; off by default)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("relax", help="relax an XYZ geometry")
    p.add_argument("--xyz", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--trace", default=None, help="energy trace CSV")
    p.add_argument("--calculator", default="surrogate")
    p.add_argument("--max-steps", type=int, default=500)
    p.add_argument("--fmax", type=float, default=1e-3)
    p.set_defaults(func=cmd_relax)

    p = sub.add_parser("protocol-check", help="check an adapter's protocol conformance")
    p.add_argument("--adapter", required=True, help="adapter launch command")
    p.add_argument("--timeout", type=float, default=10.0)
    p.set_defaults(func=cmd_protocol_check)

    p = sub.add_parser("curves", help="metrics.jsonl -> long-format CSV")
    p.add_argument("--metrics", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_curves)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (
        CalculatorError,
        nn.CheckpointError,
        OSError,
        RuntimeError,
        ValueError,
        json.JSONDecodeError,
    ) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

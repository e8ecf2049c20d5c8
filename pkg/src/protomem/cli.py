"""Command line front end.

Subcommands:
    pretrain  build the dataset, pretrain on the base task, save a checkpoint
    run       full protocol (pretrain or load a checkpoint, then all sessions)
    ablate    one of the switch families, every arm on a shared pretrain
    report    re-render table.csv and accuracy.svg from an existing metrics.json

Config files are flat ``key = value`` lines; ``#`` starts a comment. Keys are
exactly the RunConfig field names. Exit codes: 0 success, 2 for config,
format, or data problems, 3 for numeric failures.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

from .checkpoint import load_pretrained, save_pretrained, save_session_state
from .errors import ConfigError, DataError, FormatError, NumericError
from .protocol import (
    RunConfig,
    assemble_state,
    build_dataset,
    prepare,
    run_ablation,
    run_protocol,
)
from .reporting import rerender, write_run_outputs

_BOOL_WORDS = {
    "true": True,
    "false": False,
    "yes": True,
    "no": False,
    "1": True,
    "0": False,
}


def _coerce(key: str, raw: str, target_type: type):
    if target_type is bool:
        try:
            return _BOOL_WORDS[raw.lower()]
        except KeyError:
            raise ConfigError(f"{key} expects a boolean, got {raw!r}") from None
    if target_type is int:
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key} expects an integer, got {raw!r}") from None
    if target_type is float:
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key} expects a number, got {raw!r}") from None
    return raw


def parse_config_text(text: str) -> RunConfig:
    fields = {f.name: f.type for f in dataclasses.fields(RunConfig)}
    types = {"str": str, "int": int, "float": float, "bool": bool}
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected key = value, got {line.strip()!r}")
        key, raw = (part.strip() for part in body.split("=", 1))
        if key not in fields:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate config key {key!r}")
        type_name = fields[key] if isinstance(fields[key], str) else fields[key].__name__
        values[key] = _coerce(key, raw, types[type_name])
    return RunConfig(**values)


def load_config(path: str | None, seed_override: int | None) -> tuple[RunConfig, str]:
    if path is None:
        text = ""
        cfg = RunConfig()
    else:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
        cfg = parse_config_text(text)
    if seed_override is not None:
        cfg = dataclasses.replace(cfg, seed=seed_override)
    cfg.validate()
    return cfg, text


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="path to a key = value config file")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", default="out", help="output directory (default: out)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protomem",
        description="prototype-memory class-incremental learning on graphs",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="pretrain on the base task and save a checkpoint")
    _add_common(p)

    p = sub.add_parser("run", help="run the full incremental protocol")
    _add_common(p)
    p.add_argument("--checkpoint", default=None, help="reuse a pretrain checkpoint")

    p = sub.add_parser("ablate", help="run every arm of one ablation family")
    _add_common(p)
    p.add_argument(
        "--family",
        required=True,
        choices=("mecs", "teacher", "graphinfo"),
        help="which switch family to sweep",
    )

    p = sub.add_parser("report", help="re-render artifacts from metrics.json")
    p.add_argument("--out", default="out", help="directory holding metrics.json")
    return parser


def cmd_pretrain(args) -> int:
    cfg, _ = load_config(args.config, args.seed)
    pre = prepare(cfg)
    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, "encoder.ckpt")
    save_pretrained(ckpt, cfg.seed, pre.encoder, pre.head0)
    losses_path = os.path.join(args.out, "pretrain_losses.csv")
    lines = ["epoch,loss"] + [f"{i},{v:.6f}" for i, v in enumerate(pre.pretrain_losses)]
    with open(losses_path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
    print(f"checkpoint: {ckpt}")
    print(f"base accuracy: {pre.base_acc:.4f}")
    return 0


def cmd_run(args) -> int:
    cfg, text = load_config(args.config, args.seed)
    if args.checkpoint:
        ckpt_seed, encoder, head = load_pretrained(args.checkpoint)
        if ckpt_seed != cfg.seed:
            raise ConfigError(
                f"checkpoint seed {ckpt_seed} does not match run seed {cfg.seed}"
            )
        g, base_task, sessions = build_dataset(cfg)
        if sorted(head.class_order) != [int(c) for c in base_task.classes]:
            raise DataError("checkpoint head classes do not match the base task")
        pre = assemble_state(cfg, g, base_task, sessions, encoder, head)
    else:
        pre = prepare(cfg)
    results = run_protocol(pre, cfg)
    paths = write_run_outputs(args.out, cfg, text, results, pre.base_acc)
    if not args.checkpoint:
        ckpt = os.path.join(args.out, "encoder.ckpt")
        save_pretrained(ckpt, cfg.seed, pre.encoder, pre.head0)
        paths["encoder.ckpt"] = ckpt
    primary = results[0]
    if primary.store is not None:
        state = os.path.join(args.out, "state.ckpt")
        save_session_state(state, cfg.seed, primary.store, primary.memory)
        paths["state.ckpt"] = state
    for name in sorted(paths):
        print(f"wrote {paths[name]}")
    for r in results:
        print(f"{r.name}: avg_acc={r.metrics.avg_acc:.4f} pd={r.metrics.pd:.4f}")
    return 0


def cmd_ablate(args) -> int:
    cfg, text = load_config(args.config, args.seed)
    pre = prepare(cfg)
    results = run_ablation(cfg, args.family, pre)
    paths = write_run_outputs(args.out, cfg, text, results, pre.base_acc)
    for name in sorted(paths):
        print(f"wrote {paths[name]}")
    for r in results:
        print(f"{r.name}: avg_acc={r.metrics.avg_acc:.4f} pd={r.metrics.pd:.4f}")
    return 0


def cmd_report(args) -> int:
    paths = rerender(args.out)
    for name in sorted(paths):
        print(f"wrote {paths[name]}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "pretrain": cmd_pretrain,
        "run": cmd_run,
        "ablate": cmd_ablate,
        "report": cmd_report,
    }
    try:
        return handlers[args.command](args)
    except (ConfigError, FormatError, DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

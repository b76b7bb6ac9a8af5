"""Command-line entry point: ``accnn <subcommand> [flags] [--section.key=value ...]``.

Exit codes: 0 success, 2 configuration error, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import config as C
from .checkpoint import CheckpointError
from .runner import (
    NumericAbort,
    SCALE_SETS,
    run_ablate,
    run_attend,
    run_eval,
    run_gen_data,
    run_train,
)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class _ArgError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _ArgError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat section.key=value file")
    p.add_argument("--seed", help="run seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("--variant", help="full, minus_G, minus_L or avg_global")
    p.add_argument("--scales", help="comma-separated local context scales, e.g. 0.8,1.2,1.8")
    p.add_argument("--iters", help="training iterations")
    p.add_argument("--lr", help="initial learning rate")
    p.add_argument("--k-grid", dest="k_grid", help="attention grid side K")
    p.add_argument("--t-steps", dest="t_steps", help="attention time steps T")
    p.add_argument("--ap-mode", dest="ap_mode", help="all-points or 11-point")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="accnn", description="Attention-based context detector on synthetic shapes.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (
        ("gen-data", "write the synthetic train/test corpus"),
        ("train", "train a model and write a checkpoint"),
        ("eval", "evaluate a checkpoint on the held-out split"),
        ("attend", "export attention maps for held-out images"),
        ("ablate", "train and compare variants over several seeds"),
    ):
        p = sub.add_parser(name, help=help_)
        _common(p)
        if name in ("eval", "attend"):
            p.add_argument("--checkpoint", help="checkpoint path (default <out>/model.ckpt)")
        if name == "ablate":
            p.add_argument("--variants", default="full,minus_G,minus_L,avg_global")
            p.add_argument("--scale-sets", dest="scale_sets", default=";".join(",".join(map(str, s)) for s in SCALE_SETS),
                           help="semicolon-separated scale sets; empty to skip")
            p.add_argument("--seeds", default="0,1,2")
    return parser


def _split_overrides(extra: list[str]) -> list[tuple[str, str]]:
    """Turn leftover ``--section.key=value`` / ``--section.key value`` into pairs."""
    pairs, i = [], 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or "." not in tok.split("=", 1)[0]:
            raise C.ConfigError(f"unrecognised argument {tok!r}")
        if "=" in tok:
            k, v = tok[2:].split("=", 1)
        else:
            if i + 1 >= len(extra):
                raise C.ConfigError(f"missing value for {tok}")
            k, v = tok[2:], extra[i + 1]
            i += 1
        pairs.append((k, v))
        i += 1
    return pairs


MODEL_SECTIONS = ("backbone.", "local.", "global.", "model.")


def _model_lines(path: Path) -> str:
    lines = path.read_text(encoding="utf-8").splitlines()
    return "\n".join(ln for ln in lines if ln.strip().startswith(MODEL_SECTIONS))


def resolve_config(args: argparse.Namespace, extra: list[str], base: str = "") -> C.RunConfig:
    """Defaults, then ``base`` lines, then the config file, then explicit flags."""
    cfg = C.RunConfig()
    if base:
        C.loads(base, cfg)
    if args.config:
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except OSError as e:
            raise C.ConfigError(f"cannot read config file: {e}") from e
        C.loads(text, cfg)
    for flag, key in C.SHORT_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            C.set_key(cfg, key, v)
    for k, v in _split_overrides(extra):
        C.set_key(cfg, k, v)
    return C.validate(cfg)


def _parse_scale_sets(text: str) -> list[tuple[float, ...]]:
    try:
        return [tuple(float(x) for x in part.split(",")) for part in text.split(";") if part.strip()]
    except ValueError as e:
        raise C.ConfigError(f"bad --scale-sets value {text!r}") from e


def _dispatch(args, cfg: C.RunConfig) -> dict:
    cmd = args.command
    if cmd == "gen-data":
        return {"corpus": str(run_gen_data(cfg))}
    if cmd == "train":
        res = run_train(cfg)
        return {"checkpoint": str(res.checkpoint), "final_loss": res.log[-1]["loss"] if res.log else None}
    if cmd in ("eval", "attend"):
        ckpt = Path(args.checkpoint) if args.checkpoint else Path(cfg.out) / "model.ckpt"
        if not ckpt.exists():
            raise C.ConfigError(f"checkpoint not found: {ckpt}")
        if cmd == "eval":
            rep = run_eval(ckpt, None, cfg)
            return {"map": rep["map"], "per_class_ap": rep["per_class_ap"], "mode": rep["mode"]}
        return {"files": len(run_attend(ckpt, None, cfg))}
    variants = tuple(v for v in args.variants.split(",") if v)
    for v in variants:
        if v not in ("full", "minus_G", "minus_L", "avg_global"):
            raise C.ConfigError(f"unknown variant {v!r}")
    try:
        seeds = tuple(int(s) for s in args.seeds.split(",") if s)
    except ValueError as e:
        raise C.ConfigError(f"bad --seeds value {args.seeds!r}") from e
    rows = run_ablate(cfg, variants, _parse_scale_sets(args.scale_sets), seeds)
    return {"runs": len(rows)}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except _ArgError as e:
        print(f"accnn: error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args, extra)
        if args.command in ("eval", "attend"):
            # architecture keys saved next to the checkpoint, so eval needs no repeated flags
            ckpt = Path(args.checkpoint) if args.checkpoint else Path(cfg.out) / "model.ckpt"
            saved = ckpt.parent / "config.txt"
            if saved.exists():
                cfg = resolve_config(args, extra, _model_lines(saved))
        summary = _dispatch(args, cfg)
    except (C.ConfigError, CheckpointError) as e:
        print(f"accnn: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericAbort as e:
        print(f"accnn: numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

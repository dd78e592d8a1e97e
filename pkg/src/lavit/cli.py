"""Command-line entry point: ``lavit {train,gradcheck,flops,saturate,inspect}``.

Exit codes: 0 success, 1 validation error (bad flags, files, configs), 2 runtime
failure. ``LAVIT_THREADS`` caps BLAS worker threads (default 1).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from lavit.checkpoint import CheckpointError, read_checkpoint
from lavit.config import PRESETS, ConfigError, ModelConfig, preset
from lavit.data import make_synthetic
from lavit.flops import flops_report, stage_tokens
from lavit.gradsuite import MODULES, run_suite
from lavit.losses import metric_rows_csv
from lavit.model import build, param_count
from lavit.tensor import ShapeError
from lavit.train import DivergenceError, TrainConfig, probe_rows, train

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    """Invalid invocation; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _load_config(path: str) -> ModelConfig:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {path}")
    return ModelConfig.load(p)


def _load_checkpoint(path: str):
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return read_checkpoint(path)


def cmd_train(args) -> int:
    cfg = preset(args.preset) if args.preset else _load_config(args.config)
    model = build(cfg, args.seed)
    data = make_synthetic(cfg, seed=args.seed)
    tc = TrainConfig(batch_size=args.batch_size, lr_max=args.lr, eval_interval=args.eval_interval,
                     checkpoint_every=args.checkpoint_every)
    records = train(model, data, tc, args.steps, collect=args.collect, out_dir=args.out)
    if records:
        last = records[-1]
        print(f"step {last['step']}: ce={last['ce']:.6g} dp={last['dp']:.6g} acc={last['acc']:.3f}")
    print(f"wrote {Path(args.out) / 'metrics.jsonl'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_suite(args.seed, args.module)
    width = max(len(r.name) for r in results)
    for r in results:
        status = "ok" if r.ok else "FAIL"
        print(f"{r.name:<{width}}  {r.module:<18}  {r.error:.3e}  (< {r.tol:.0e})  {status}")
    failed = [r.name for r in results if not r.ok]
    if failed:
        print(f"{len(failed)} check(s) failed: {', '.join(failed)}")
        return EXIT_RUNTIME
    print(f"all {len(results)} checks passed")
    return EXIT_OK


def cmd_flops(args) -> int:
    if args.preset:
        cfg = preset(args.preset)
        report = flops_report(cfg, args.image_size, preset_name=args.preset)
    else:
        cfg = _load_config(args.config)
        report = flops_report(cfg, args.image_size)
    print(report.to_text())
    if args.csv:
        Path(args.csv).write_text(report.to_csv(), encoding="utf-8")
        print(f"wrote {args.csv}")
    return EXIT_OK


def cmd_saturate(args) -> int:
    model = _load_checkpoint(args.checkpoint)
    data = make_synthetic(model.config, seed=args.seed)
    images, _ = data.probe_batch(args.probe_size)
    csv_text = metric_rows_csv(probe_rows(model, images))
    Path(args.out).write_text(csv_text, encoding="utf-8")
    print(csv_text, end="")
    return EXIT_OK


def cmd_inspect(args) -> int:
    if args.checkpoint:
        model = _load_checkpoint(args.checkpoint)
        cfg = model.config
        stored = model.params.num_scalars()
    else:
        cfg = _load_config(args.config)
        stored = None
    print(cfg.to_json())
    count = param_count(cfg)
    print(f"param_count: {count}")
    if stored is not None and stored != count:
        print(f"warning: checkpoint holds {stored} scalars")
    for m, n in enumerate(stage_tokens(cfg), start=1):
        st = cfg.stages[m - 1]
        print(f"stage {m}: tokens={n} channels={st.channels} heads={st.heads} "
              f"layers={''.join(k[0] for k in st.layer_kinds())}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lavit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train on the synthetic task")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--config", help="model config JSON")
    src.add_argument("--preset", choices=PRESETS, help="named model config")
    p.add_argument("--seed", type=int, default=0, help="init and data seed (default 0)")
    p.add_argument("--steps", type=int, default=2000, help="optimizer steps (default 2000)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--collect", choices=("none", "saturation"), default="none",
                   help="write per-layer probe CSVs every eval interval")
    p.add_argument("--batch-size", type=int, default=32, help="minibatch size (default 32)")
    p.add_argument("--lr", type=float, default=1e-3, help="peak learning rate (default 1e-3)")
    p.add_argument("--eval-interval", type=int, default=100, help="steps between probes (default 100)")
    p.add_argument("--checkpoint-every", type=int, default=0,
                   help="steps between checkpoints; 0 writes only final.lavt")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gradcheck", help="central-difference checks of every differentiable op")
    p.add_argument("--seed", type=int, default=0, help="input seed (default 0)")
    p.add_argument("--module", choices=MODULES, help="restrict to one module's checks")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("flops", help="static FLOPs and parameter report")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--preset", choices=PRESETS, help="named model config")
    src.add_argument("--config", help="model config JSON")
    p.add_argument("--image-size", type=int, help="square input side (default: config value)")
    p.add_argument("--csv", help="also write the per-layer table as CSV")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("saturate", help="per-layer similarity/symmetry CSV on a probe batch")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--seed", type=int, default=0, help="probe data seed (default 0)")
    p.add_argument("--out", required=True, help="CSV output path")
    p.add_argument("--probe-size", type=int, default=16, help="probe batch size (default 16)")
    p.set_defaults(func=cmd_saturate)

    p = sub.add_parser("inspect", help="echo config, parameter count and stage geometry")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", help="checkpoint file")
    src.add_argument("--config", help="model config JSON")
    p.set_defaults(func=cmd_inspect)
    return parser


def _threads() -> int:
    raw = os.environ.get("LAVIT_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"LAVIT_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"LAVIT_THREADS must be a positive integer, got {raw!r}")
    return n


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        threads = _threads()
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        with threadpool_limits(limits=threads):
            return args.func(args)
    except (UsageError, ConfigError, CheckpointError, ShapeError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (DivergenceError, OSError, RuntimeError, FloatingPointError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

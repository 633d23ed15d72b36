"""``s4former`` command line: train, eval, stream, check, bench.

Exit codes: 0 ok, 2 usage/config error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys

import torch

from . import bench as bench_mod
from .checkpoint import CheckpointError, load_checkpoint, load_into
from .checks import SUITES
from .config import RunConfig, load_config
from .conv_module import ConfigError
from .numerics import DTYPE
from .s4d import init_s4d
from .streaming import StaleStateError, open_stream, process_chunk
from .tasks import generate_task
from .training import DivergedTrainingError, build_model, evaluate, train

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


class UsageError(Exception):
    pass


def _load(args) -> RunConfig:
    return load_config(args.config).with_seed(args.seed)


def _model_from(cfg: RunConfig, checkpoint: str | None, required: bool = True):
    model = build_model(cfg.model, seed=cfg.train.seed)
    path = checkpoint or cfg.io.checkpoint
    if path is None:
        if required:
            raise UsageError("no checkpoint given (--checkpoint or io.checkpoint)")
        return model.eval()
    try:
        _, tensors = load_checkpoint(path, expected_digest=cfg.model_digest())
    except FileNotFoundError:
        raise UsageError(f"checkpoint not found: {path}") from None
    load_into(model, tensors)
    return model.eval()


def cmd_train(args) -> int:
    cfg = _load(args)
    model = build_model(cfg.model, seed=cfg.train.seed)
    ckpt = args.checkpoint or cfg.io.checkpoint
    train(model, cfg.task, cfg.train, log_path=cfg.io.log, checkpoint_path=ckpt,
          checkpoint_digest=cfg.model_digest())
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load(args)
    model = _model_from(cfg, args.checkpoint)
    loss, acc = evaluate(model, generate_task(cfg.task).eval)
    print(json.dumps({"split": "eval", "loss": loss, "accuracy": acc}))
    return EXIT_OK


def cmd_stream(args) -> int:
    cfg = _load(args)
    model = _model_from(cfg, args.checkpoint)
    if args.chunk_size < 1:
        raise UsageError("--chunk-size must be >= 1")
    state = open_stream(model)
    width = cfg.model.vocab
    buffer: list[list[float]] = []

    def flush():
        chunk = torch.tensor(buffer, dtype=DTYPE)
        out, _ = process_chunk(model, state, chunk)
        for row in out.tolist():
            print(" ".join(f"{v:.17g}" for v in row))
        sys.stdout.flush()
        buffer.clear()

    for lineno, line in enumerate(sys.stdin, 1):
        if not line.strip():
            continue
        try:
            row = [float(tok) for tok in line.split()]
        except ValueError:
            raise UsageError(f"stdin line {lineno}: not a row of numbers") from None
        if len(row) != width:
            raise UsageError(f"stdin line {lineno}: expected {width} values, got {len(row)}")
        buffer.append(row)
        if len(buffer) == args.chunk_size:
            flush()
    if buffer:
        flush()
    return EXIT_OK


def cmd_check(args) -> int:
    cfg = _load(args)
    model = _model_from(cfg, args.checkpoint, required=False)
    results = SUITES[args.suite](model, seed=cfg.train.seed)
    for res in results:
        print(res.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_RUNTIME


def cmd_bench(args) -> int:
    cfg = _load(args)
    m = cfg.model
    layer = init_s4d(m.scheme, m.n_state, m.h, seed=cfg.train.seed, dt_min=m.dt_min, dt_max=m.dt_max)
    rows, _ = bench_mod.bench(layer, reps=args.reps, seed=cfg.train.seed)
    sys.stdout.write(bench_mod.to_csv(rows))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="s4former", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, checkpoint=False, help=None):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", required=True, metavar="PATH")
        p.add_argument("--seed", type=int, default=None, metavar="U64")
        if checkpoint:
            p.add_argument("--checkpoint", default=None, metavar="PATH")
        p.set_defaults(func=func)
        return p

    add("train", cmd_train, checkpoint=True, help="train on the configured synthetic task")
    add("eval", cmd_eval, checkpoint=True, help="evaluate a checkpoint on the eval split")
    p = add("stream", cmd_stream, checkpoint=True, help="stream stdin frames through a checkpoint")
    p.add_argument("--chunk-size", type=int, default=1, metavar="U32")
    p = add("check", cmd_check, checkpoint=True, help="run an invariant suite")
    p.add_argument("--suite", required=True, choices=sorted(SUITES))
    p = add("bench", cmd_bench, help="time scan/conv execution paths (CSV)")
    p.add_argument("--reps", type=int, default=5)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, UsageError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointError as err:
        print(f"error: checkpoint: {err}", file=sys.stderr)
        return EXIT_USAGE
    except DivergedTrainingError as err:
        print(f"error: training diverged: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    except (StaleStateError, RuntimeError, OSError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

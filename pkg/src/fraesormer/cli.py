"""Command-line entry point. Every command logs CSV-parsable lines to stdout.

Exit codes: 0 success, 1 contract/config error, 2 I/O or corruption error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .accounting import count_macs, count_params
from .checkpoint import load_checkpoint
from .data import SyntheticSpec, gen_synthetic, read_image
from .errors import CheckpointError, FraesormerError
from .model import ModelConfig, build_model
from .tensor import Tensor, no_grad
from .train import LOG_HEADER, TrainConfig, evaluate, sweep_csv, sweep_k, train

EXIT_OK, EXIT_CONTRACT, EXIT_IO = 0, 1, 2


def _fractions(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated floats, got {text!r}") from None


def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 1 << 64:
        raise argparse.ArgumentTypeError(f"seed must fit in u64, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fraesormer", description="Desk-scale Fraesormer toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("params", help="parameter count per layer")
    s.add_argument("--config", required=True)
    s.add_argument("--csv", action="store_true", help="emit CSV instead of an aligned table")

    s = sub.add_parser("macs", help="MAC count per layer at a square input resolution")
    s.add_argument("--config", required=True)
    s.add_argument("--resolution", type=int, required=True)
    s.add_argument("--csv", action="store_true")

    s = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    s.add_argument("--seed", type=_u64, default=0)
    s.add_argument("--op-seeds", type=int, default=10)

    s = sub.add_parser("gen-data", help="write the seeded synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=_u64, required=True)

    s = sub.add_parser("train", help="train from scratch and write a checkpoint")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--epochs", type=int, required=True)
    s.add_argument("--lr", type=float, required=True)
    s.add_argument("--batch", type=int, required=True)
    s.add_argument("--seed", type=_u64, required=True)
    s.add_argument("--out-ckpt", required=True)
    s.add_argument("--no-clip", action="store_true")

    s = sub.add_parser("eval", help="top-1 accuracy of a checkpoint on a dataset")
    s.add_argument("--config", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)

    s = sub.add_parser("predict", help="class predictions for an image container")
    s.add_argument("--config", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--input", required=True)

    s = sub.add_parser("sweep-k", help="accuracy per fixed k fraction plus adaptive k")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--fractions", type=_fractions, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=_u64, required=True)
    s.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    s.add_argument("--lr", type=float, default=TrainConfig.lr)
    s.add_argument("--batch", type=int, default=TrainConfig.batch_size)
    s.add_argument("--ckpt", default=None, help="evaluate these weights instead of training per point")
    return p


def _emit(line: str) -> None:
    print(line, flush=True)


def _report(rep, as_csv: bool) -> None:
    print(rep.to_csv() if as_csv else rep.to_text(), end="" if as_csv else "\n")


def cmd_params(a) -> None:
    _report(count_params(build_model(ModelConfig.load(a.config))), a.csv)


def cmd_macs(a) -> None:
    _report(count_macs(build_model(ModelConfig.load(a.config)), a.resolution), a.csv)


def cmd_gradcheck(a) -> int:
    from .gradsuite import run_suite

    _emit("name,max_rel_err,tolerance,status")
    failed = 0
    for name, err, tol in run_suite(a.seed, a.op_seeds):
        ok = err < tol
        failed += not ok
        _emit(f"{name},{err:.3e},{tol:g},{'pass' if ok else 'FAIL'}")
    return EXIT_CONTRACT if failed else EXIT_OK


def cmd_gen_data(a) -> None:
    out = gen_synthetic(SyntheticSpec(seed=a.seed), a.n, a.out)
    _emit(f"wrote,{a.n},{out}")


def cmd_train(a) -> None:
    cfg = TrainConfig(epochs=a.epochs, batch_size=a.batch, lr=a.lr, seed=a.seed,
                      clip_norm=None if a.no_clip else TrainConfig.clip_norm)
    _emit(LOG_HEADER)
    train(ModelConfig.load(a.config), cfg, a.data, out_ckpt=a.out_ckpt, log=_emit)


def cmd_eval(a) -> None:
    m = evaluate(ModelConfig.load(a.config), a.ckpt, a.data)
    _emit("top1,correct,n")
    _emit(f"{m['top1']:.6f},{m['correct']},{m['n']}")


def cmd_predict(a) -> None:
    cfg = ModelConfig.load(a.config)
    model = build_model(cfg)
    load_checkpoint(model, a.ckpt)
    img = read_image(a.input)
    batch = img[None] if img.ndim == 3 else img
    with no_grad():
        logits = model(Tensor(batch.astype(np.float32))).data
    _emit("index,pred," + ",".join(f"logit{c}" for c in range(cfg.num_classes)))
    for i, row in enumerate(logits):
        _emit(f"{i},{int(np.argmax(row))}," + ",".join(f"{v:.6g}" for v in row))


def cmd_sweep_k(a) -> None:
    cfg = TrainConfig(epochs=a.epochs, batch_size=a.batch, lr=a.lr, seed=a.seed)
    _emit("mode,fraction,top1")
    rows = sweep_k(ModelConfig.load(a.config), a.data, a.fractions, cfg, ckpt=a.ckpt, log=_emit)
    Path(a.out).write_text(sweep_csv(rows))


COMMANDS = {
    "params": cmd_params, "macs": cmd_macs, "gradcheck": cmd_gradcheck, "gen-data": cmd_gen_data,
    "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict, "sweep-k": cmd_sweep_k,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        code = COMMANDS[args.command](args)
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except FraesormerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())

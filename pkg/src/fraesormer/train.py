"""Toy-scale training, evaluation and the fixed-vs-adaptive k sweep."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import functional as F
from .attention import as_fraction
from .checkpoint import load_checkpoint, save_checkpoint
from .data import load_dataset
from .errors import ConfigError, EmptyDatasetError, NonFiniteError
from .model import Fraesormer, ModelConfig, build_model
from .nn import nonfinite_probe
from .tensor import Tensor, no_grad

LOG_HEADER = "epoch,step,lr,loss,acc"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 25
    batch_size: int = 32
    lr: float = 1e-3
    warmup_epochs: float | None = None  # None: min(5, epochs / 10)
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    clip_norm: float | None = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be ≥ 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.warmup > self.epochs:
            raise ConfigError(f"warmup ({self.warmup} epochs) exceeds epochs ({self.epochs})")

    @property
    def warmup(self) -> float:
        if self.warmup_epochs is None:
            return min(5.0, self.epochs / 10)
        return float(self.warmup_epochs)


class WarmupCosine:
    """Linear ramp 0 -> peak over ``warmup_steps``, then cosine decay to 0 at ``total_steps``."""

    def __init__(self, peak: float, warmup_steps: int, total_steps: int):
        if not 0 <= warmup_steps <= total_steps or total_steps < 1:
            raise ConfigError("need 0 ≤ warmup_steps ≤ total_steps and total_steps ≥ 1")
        self.peak, self.warmup_steps, self.total_steps = peak, warmup_steps, total_steps

    def __call__(self, step: int) -> float:
        """Learning rate for update number ``step`` (1-based)."""
        w, t = self.warmup_steps, self.total_steps
        if step <= w:
            return self.peak * step / w
        progress = (step - w) / (t - w)
        return 0.5 * self.peak * (1.0 + math.cos(math.pi * min(progress, 1.0)))


class AdamW:
    """Adam with decoupled weight decay, applied only to conv/linear weights."""

    def __init__(self, named_params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.05):
        self.params = [p for _, p in named_params]
        self.decay = [name.endswith(".weight") and p.ndim > 1 for name, p in named_params]
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for p, m, v, decay in zip(self.params, self.m, self.v, self.decay):
            if p.grad is None:
                continue
            g = p.grad.astype(p.dtype)
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if decay:
                update = update + self.weight_decay * p.data
            p.data = (p.data - self.lr * update).astype(p.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def clip_grad_norm(params, max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if total > max_norm:
        scale = max_norm / (total + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


def predict_logits(model: Fraesormer, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    outs = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            outs.append(model(Tensor(images[start : start + batch_size])).data)
    return np.concatenate(outs)


def accuracy(model: Fraesormer, images: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        raise EmptyDatasetError("cannot evaluate on an empty dataset")
    # np.argmax breaks ties toward the lowest class index
    pred = predict_logits(model, images).argmax(axis=1)
    return float((pred == labels).mean())


@dataclass
class TrainResult:
    model: Fraesormer
    log: list[str] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)

    @property
    def final_acc(self) -> float:
        return float(self.log[-1].rsplit(",", 1)[1])


def _locate_nonfinite(model: Fraesormer, xb: Tensor) -> str:
    try:
        with no_grad(), nonfinite_probe():
            model(xb)
    except NonFiniteError as exc:
        return exc.layer or "?"
    return "loss"


def train_model(
    model: Fraesormer,
    images: np.ndarray,
    labels: np.ndarray,
    cfg: TrainConfig,
    log: Callable[[str], None] | None = None,
) -> TrainResult:
    n = len(labels)
    if n == 0:
        raise EmptyDatasetError("cannot train on an empty dataset")
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    sched = WarmupCosine(cfg.lr, round(cfg.warmup * steps_per_epoch), total)
    opt = AdamW(list(model.named_parameters()), cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay)
    order_rng = np.random.default_rng([cfg.seed, 0x5EED])
    result = TrainResult(model)
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        perm = order_rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            xb = Tensor(images[idx])
            try:
                loss = F.cross_entropy(model(xb), labels[idx])
                value = loss.item()
            except NonFiniteError:
                value = math.nan
            if not math.isfinite(value):
                layer = _locate_nonfinite(model, xb)
                raise NonFiniteError(f"loss became {value} at step {step + 1}; first non-finite layer: {layer}", layer)
            opt.zero_grad()
            loss.backward()
            if cfg.clip_norm is not None:
                clip_grad_norm(opt.params, cfg.clip_norm)
            step += 1
            opt.lr = sched(step)
            opt.step()
            result.losses.append(value)
            epoch_loss += value * len(idx)
        acc = accuracy(model, images, labels)
        line = f"{epoch},{step},{opt.lr:.10g},{epoch_loss / n:.8f},{acc:.6f}"
        result.log.append(line)
        if log:
            log(line)
    return result


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, data_dir, out_ckpt=None,
          log: Callable[[str], None] | None = None) -> TrainResult:
    images, labels = load_dataset(data_dir)
    model = build_model(model_cfg, train_cfg.seed)
    result = train_model(model, images, labels, train_cfg, log=log)
    if out_ckpt is not None:
        save_checkpoint(model, out_ckpt)
    return result


def evaluate(model_cfg: ModelConfig, ckpt, data_dir) -> dict:
    images, labels = load_dataset(data_dir)
    model = build_model(model_cfg, 0)
    load_checkpoint(model, ckpt)
    acc = accuracy(model, images, labels)
    return {"top1": acc, "n": len(labels), "correct": int(round(acc * len(labels)))}


def sweep_k(
    model_cfg: ModelConfig,
    data_dir,
    fractions: Sequence[float],
    train_cfg: TrainConfig | None = None,
    ckpt=None,
    log: Callable[[str], None] | None = None,
) -> list[tuple[str, str, float]]:
    """Top-1 per fixed k fraction plus the adaptive (gdtko) mode.

    Each point is trained from scratch with ``train_cfg`` unless ``ckpt`` is
    given, in which case those weights are evaluated under every mode.
    """
    train_cfg = train_cfg or TrainConfig()
    images, labels = load_dataset(data_dir)
    points = [("fixed", as_fraction(f)) for f in fractions] + [("gdtko", None)]
    rows = []
    for mode, frac in points:
        cfg = model_cfg.replace(topk_mode=mode, fixed_k_fraction=frac if frac is not None else 1)
        if ckpt is None:
            model = train_model(build_model(cfg, train_cfg.seed), images, labels, train_cfg).model
        else:
            model = build_model(cfg, 0)
            load_checkpoint(model, ckpt)
        top1 = accuracy(model, images, labels)
        row = (mode, "" if frac is None else f"{float(frac):g}", top1)
        rows.append(row)
        if log:
            log(f"{row[0]},{row[1]},{row[2]:.6f}")
    return rows


def sweep_csv(rows) -> str:
    return "mode,fraction,top1\n" + "".join(f"{m},{f},{a:.6f}\n" for m, f, a in rows)

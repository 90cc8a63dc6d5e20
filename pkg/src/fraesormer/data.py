"""Seeded synthetic 4-class image task.

Class ``c`` has bits ``(b1, b0) = (c >> 1, c & 1)``: ``b1`` picks horizontal
(0) or vertical (1) stripes, a coarse global cue; ``b0`` adds a small bright
square marker, a fine local cue. Solving the task needs both scales.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import read_tensors, write_tensors
from .errors import ContractError, EmptyDatasetError

LABELS_FILE = "labels.csv"


@dataclass(frozen=True)
class SyntheticSpec:
    seed: int = 0
    num_classes: int = 4
    size: int = 64
    channels: int = 3
    period: int = 16
    amplitude: float = 0.5  # peak-to-peak stripe contrast
    mean: float = 0.25
    marker: int = 4
    marker_value: float = 1.0
    noise: float = 0.1


def render(spec: SyntheticSpec, label: int, rng: np.random.Generator) -> np.ndarray:
    b1, b0 = label >> 1, label & 1
    phase = rng.uniform(0.0, spec.period)
    my, mx = rng.integers(0, spec.size - spec.marker + 1, size=2)
    t = np.arange(spec.size, dtype=np.float64)
    wave = spec.mean + 0.5 * spec.amplitude * np.sin(2.0 * np.pi * (t + phase) / spec.period)
    img = np.broadcast_to(wave[None, :] if b1 else wave[:, None], (spec.size, spec.size))
    img = np.repeat(img[None], spec.channels, axis=0)
    if b0:
        img[:, my : my + spec.marker, mx : mx + spec.marker] = spec.marker_value
    img = img + rng.normal(0.0, spec.noise, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate(spec: SyntheticSpec, n: int) -> tuple[np.ndarray, np.ndarray]:
    """In-memory images (n, C, S, S) and balanced labels (n,)."""
    if n < spec.num_classes:
        raise ContractError(f"n={n} must be at least num_classes={spec.num_classes}")
    rng = np.random.default_rng(spec.seed)
    labels = np.arange(n, dtype=np.int64) % spec.num_classes
    images = np.stack([render(spec, int(c), rng) for c in labels])
    return images, labels


def sample_name(i: int) -> str:
    return f"sample_{i:05d}.frsr"


def gen_synthetic(spec: SyntheticSpec, n: int, out_dir) -> Path:
    images, labels = generate(spec, n)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (img, lab) in enumerate(zip(images, labels)):
        write_tensors(out / sample_name(i), {"image": img})
        lines.append(f"{sample_name(i)},{int(lab)}\n")
    (out / LABELS_FILE).write_text("".join(lines))
    return out


def read_image(path) -> np.ndarray:
    tensors = read_tensors(path)
    if "image" not in tensors:
        raise ContractError(f"{path}: no tensor named 'image'")
    return tensors["image"]


def load_dataset(data_dir) -> tuple[np.ndarray, np.ndarray]:
    root = Path(data_dir)
    with open(root / LABELS_FILE, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        raise EmptyDatasetError(f"{root}: dataset is empty")
    images = np.stack([read_image(root / name) for name, _ in rows])
    labels = np.array([int(lab) for _, lab in rows], dtype=np.int64)
    return images, labels

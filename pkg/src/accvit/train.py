"""Toy training loop: full-batch SGD with momentum on label-smoothed cross-entropy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .image import MEAN, STD
from .model import AccVitModel
from .tensor import Tensor


@dataclass
class Dataset:
    images: np.ndarray  # [n, 3, h, w] float32, standardized
    labels: np.ndarray  # [n] int64


def brightness_dataset(n: int = 16, size: int = 64, seed: int = 0) -> Dataset:
    """Two classes: dark images (label 0) and bright images (label 1).

    Each image is a random base intensity plus per-pixel noise, so the classes
    differ in mean brightness but no two images are alike.
    """
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    base = np.where(labels == 1, rng.uniform(0.6, 0.9, n), rng.uniform(0.1, 0.4, n))
    noise = rng.uniform(-0.1, 0.1, (n, size, size, 3))
    img = np.clip(base[:, None, None, None] + noise, 0.0, 1.0).astype(np.float32)
    img = (img - MEAN) / STD
    return Dataset(np.ascontiguousarray(img.transpose(0, 3, 1, 2)), labels.astype(np.int64))


class SGD:
    """v ← μ·v + g;  p ← p − lr·v."""

    def __init__(self, params, lr: float, momentum: float = 0.9):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad.data
            p.data = p.data - self.lr * v

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def train_smoke(
    model: AccVitModel,
    data: Dataset,
    steps: int = 200,
    lr: float = 0.01,
    momentum: float = 0.9,
    label_smoothing: float = 0.1,
    callback=None,
) -> list[float]:
    """Full-batch training; returns the loss recorded before each update."""
    opt = SGD(model.parameters(), lr, momentum)
    x = Tensor(data.images)
    trace: list[float] = []
    for step in range(steps):
        opt.zero_grad()
        loss = F.cross_entropy(model(x), data.labels, label_smoothing)
        loss.backward()
        opt.step()
        trace.append(loss.item())
        if callback is not None:
            callback(step, trace[-1])
    return trace


def loss_ratio(trace: list[float], window: int = 10) -> float:
    """Mean of the last ``window`` losses over the first loss (nan when empty)."""
    if not trace:
        return float("nan")
    return float(np.mean(trace[-window:]) / trace[0])

"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad

# guards 0/0 when both gradients vanish identically
ZERO_FLOOR = 1e-12


@dataclass
class GradcheckResult:
    max_rel_error: float
    errors: list  # one relative error per checked tensor

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """‖a − b‖ / max(‖a‖, ‖b‖)."""
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom < ZERO_FLOOR:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def gradcheck(
    fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    eps: float = 1e-4,
    seed: int = 0,
    max_checks: int | None = None,
) -> GradcheckResult:
    """Compare backward against central differences of ``Σ fn() ⊙ R``.

    ``R`` is a fixed random projection so every output element contributes.
    ``fn`` must read ``tensors`` (which should be float64 leaves with
    ``requires_grad``). With ``max_checks`` only that many randomly chosen
    coordinates per tensor are perturbed.
    """
    rng = np.random.default_rng(seed)
    out = fn()
    proj = rng.standard_normal(out.shape)

    def loss_value() -> float:
        with no_grad():
            return float((fn().data * proj).sum())

    for t in tensors:
        t.grad = None
    out = fn()
    (out * Tensor(proj.astype(out.dtype))).sum().backward()
    errors = []
    for t in tensors:
        analytic = t.grad.data.reshape(-1) if t.grad is not None else np.zeros(t.size)
        if not t.data.flags.writeable:
            t.data = t.data.copy()
        flat = t.data.reshape(-1)
        idx = np.arange(t.size)
        if max_checks is not None and t.size > max_checks:
            idx = np.sort(rng.choice(t.size, max_checks, replace=False))
        numeric = np.empty(len(idx))
        for n, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            fp = loss_value()
            flat[i] = orig - eps
            fm = loss_value()
            flat[i] = orig
            numeric[n] = (fp - fm) / (2 * eps)
        errors.append(rel_error(analytic[idx], numeric))
    return GradcheckResult(max(errors) if errors else 0.0, errors)

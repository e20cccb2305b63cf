"""Central finite differences and analytic-vs-numeric gradient comparison."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def finite_diff_grad(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6,
                     indices: Sequence[int] | None = None) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` w.r.t. ``x``.

    ``x.data`` is perturbed in place and restored. When ``indices`` (flat)
    is given only those entries are estimated; the rest stay zero.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    flat = x.data.reshape(-1)
    grad = np.zeros(flat.shape, dtype=np.float64)
    todo = range(flat.size) if indices is None else indices
    for i in todo:
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x).data)
        flat[i] = orig - eps
        fm = float(f(x).data)
        flat[i] = orig
        grad[i] = (fp - fm) / (2 * eps)
    return grad.reshape(x.shape)


@dataclass
class InputReport:
    name: str
    max_abs: float
    max_rel: float
    worst_index: tuple
    checked: int


@dataclass
class GradReport:
    op: str
    tol: float
    inputs: list[InputReport] = field(default_factory=list)

    @property
    def max_rel(self) -> float:
        return max((r.max_rel for r in self.inputs), default=0.0)

    @property
    def worst(self) -> InputReport | None:
        return max(self.inputs, key=lambda r: r.max_rel, default=None)

    @property
    def passed(self) -> bool:
        return all(r.max_rel <= self.tol for r in self.inputs)

    def summary(self) -> str:
        w = self.worst
        where = f"{w.name}{list(w.worst_index)}" if w else "-"
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.op:<28s} worst_rel={self.max_rel:.3e}  at {where}"


def gradcheck(f: Callable[[], Tensor], inputs: dict[str, Tensor], tol: float = 1e-4,
              eps: float = 1e-6, floor: float = 1e-7, max_samples: int | None = None,
              seed: int = 0, op: str = "op") -> GradReport:
    """Compare backward() gradients of scalar ``f()`` with central differences.

    ``inputs`` maps names to leaf tensors that ``f`` closes over. With
    ``max_samples`` only that many randomly chosen entries per input are
    checked numerically. Failures are reported, never raised.
    """
    for t in inputs.values():
        t.requires_grad = True
        t.grad = None
    f().backward()
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros(t.shape)) for k, t in inputs.items()}
    rng = np.random.default_rng(seed)
    report = GradReport(op=op, tol=tol)
    for name, t in inputs.items():
        n = t.size
        if max_samples is not None and n > max_samples:
            idx = np.sort(rng.choice(n, size=max_samples, replace=False))
        else:
            idx = np.arange(n)
        numeric = finite_diff_grad(lambda _x: f(), t, eps=eps, indices=idx).reshape(-1)[idx]
        a = analytic[name].reshape(-1)[idx]
        diff = np.abs(a - numeric)
        rel = diff / np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
        k = int(np.argmax(rel)) if rel.size else 0
        worst = np.unravel_index(int(idx[k]), t.shape) if rel.size else ()
        report.inputs.append(InputReport(name, float(diff.max(initial=0.0)),
                                         float(rel.max(initial=0.0)),
                                         tuple(int(i) for i in worst), int(idx.size)))
    return report

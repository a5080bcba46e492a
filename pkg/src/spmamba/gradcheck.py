"""Central finite-difference check of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor, no_grad


class NonDeterminismError(RuntimeError):
    """Two forward passes at the same parameters disagreed."""


@dataclass
class GradCheckReport:
    tol: float
    max_rel_err: dict[str, float] = field(default_factory=dict)
    checked_entries: dict[str, int] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tol

    def failures(self) -> dict[str, float]:
        return {k: v for k, v in self.max_rel_err.items() if v >= self.tol}

    def summary(self) -> str:
        lines = [f"{k:50s} {v:.3e}" for k, v in self.max_rel_err.items()]
        lines.append(f"worst={self.worst:.3e} tol={self.tol:.1e} {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor), elementwise."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def check_gradients(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-5,
    tol: float = 1e-6,
    floor: float = 1e-8,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare reverse-mode gradients of the scalar ``f()`` to central differences.

    ``params`` maps names to leaf tensors that ``f`` reads. Every entry is
    perturbed unless ``max_entries`` caps the count per tensor, in which case
    a seeded subset is checked. Entries whose analytic and numeric gradients
    are both below ``floor`` compare on an absolute scale.
    """
    if not 1e-6 <= h <= 1e-4:
        raise ValueError("step h must lie in [1e-6, 1e-4]")
    params = dict(params)
    for t in params.values():
        t.grad = None
    out = f()
    if out.data.size != 1:
        raise ValueError("f must return a scalar")
    out.backward()
    analytic = {k: (np.zeros_like(t.data) if t.grad is None else t.grad.copy()) for k, t in params.items()}

    with no_grad():
        again = f().data
    if not np.array_equal(again, out.data):
        raise NonDeterminismError(f"forward passes differ: {out.item()!r} vs {float(again)!r}")

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol)
    with no_grad():
        for name, t in params.items():
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
            numeric = np.empty(idx.size)
            for j, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + h
                fp = f().item()
                flat[i] = orig - h
                fm = f().item()
                flat[i] = orig
                numeric[j] = (fp - fm) / (2.0 * h)
            err = relative_error(analytic[name].reshape(-1)[idx], numeric, floor)
            report.max_rel_err[name] = float(err.max()) if err.size else 0.0
            report.checked_entries[name] = int(idx.size)
    return report


def check_directional(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-5,
    tol: float = 1e-6,
    floor: float = 1e-8,
    seed: int = 0,
) -> GradCheckReport:
    """Per tensor, compare ``grad . v`` with the central difference of ``f`` along a
    random unit direction ``v``. Two forward passes per tensor exercise every entry
    at once, which makes this a cheap complement to :func:`check_gradients`.
    """
    if not 1e-6 <= h <= 1e-4:
        raise ValueError("step h must lie in [1e-6, 1e-4]")
    params = dict(params)
    for t in params.values():
        t.grad = None
    f().backward()
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol)
    with no_grad():
        for name, t in params.items():
            v = rng.normal(size=t.shape)
            v /= np.linalg.norm(v) or 1.0
            orig = t.data.copy()
            t.data[...] = orig + h * v
            fp = f().item()
            t.data[...] = orig - h * v
            fm = f().item()
            t.data[...] = orig
            analytic = 0.0 if t.grad is None else float(np.sum(t.grad * v))
            numeric = (fp - fm) / (2.0 * h)
            report.max_rel_err[name] = float(relative_error(np.array(analytic), np.array(numeric), floor))
            report.checked_entries[name] = t.data.size
    return report

"""Central finite-difference gradient checking (64-bit only)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class ParamCheck:
    name: str
    max_rel_err: float
    n_checked: int
    passed: bool
    n_skipped: int = 0  # entries whose +/- eps evaluations straddle a ReLU kink


@dataclass
class GradcheckReport:
    tol: float
    eps: float
    checks: list[ParamCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def max_rel_err(self) -> float:
        return max((c.max_rel_err for c in self.checks), default=0.0)

    def table(self) -> str:
        width = max([len(c.name) for c in self.checks] + [9])
        lines = [f"{'parameter':<{width}}  {'checked':>7}  {'skipped':>7}  {'max_rel_err':>11}  result"]
        for c in self.checks:
            lines.append(
                f"{c.name:<{width}}  {c.n_checked:>7}  {c.n_skipped:>7}  {c.max_rel_err:>11.3e}"
                f"  {'PASS' if c.passed else 'FAIL'}"
            )
        return "\n".join(lines)


def gradcheck(
    f: Callable[[], Tensor],
    params: Sequence[tuple[str, Tensor]] | Sequence[Tensor],
    eps: float = 1e-5,
    tol: float = 1e-4,
    max_checks: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradcheckReport:
    """Compare tape gradients of the scalar ``f()`` against central differences.

    ``f`` takes no arguments and reads ``params`` by reference; each param's
    ``data`` is perturbed in place and restored. Error per entry is
    |analytic - numeric| / max(1, |numeric|). With ``max_checks`` set, at most
    that many entries per parameter are sampled (all entries otherwise).

    A central difference across a ReLU kink measures a blend of two slopes, so
    an entry whose perturbed evaluations change any ReLU on/off pattern is
    skipped and, when sampling, replaced by another entry.
    """
    named = [(p.name or f"p{i}", p) if isinstance(p, Tensor) else p for i, p in enumerate(params)]
    for name, p in named:
        if p.dtype != np.float64:
            raise TypeError(f"gradcheck requires 64-bit tensors; {name} is {p.dtype}")
    rng = rng or np.random.default_rng(0)

    T.current_tape().clear()
    for _, p in named:
        p.grad = None
    loss = f()
    T.backward(loss)
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for name, p in named}

    def evaluate() -> tuple[float, list[bytes]]:
        with T.watch_kinks() as kinks:
            value = f().item()
        return value, kinks

    report = GradcheckReport(tol=tol, eps=eps)
    with T.no_grad():
        _, base = evaluate()
        for name, p in named:
            flat = p.data.reshape(-1)
            a_flat = analytic[name].reshape(-1)
            order = np.arange(flat.size) if max_checks is None else rng.permutation(flat.size)
            budget = flat.size if max_checks is None else min(max_checks, flat.size)
            worst, checked, skipped = 0.0, 0, 0
            for i in order:
                if checked == budget:
                    break
                orig = flat[i]
                flat[i] = orig + eps
                up, up_kinks = evaluate()
                flat[i] = orig - eps
                down, down_kinks = evaluate()
                flat[i] = orig
                if up_kinks != base or down_kinks != base:
                    skipped += 1
                    continue
                num = (up - down) / (2 * eps)
                worst = max(worst, abs(a_flat[i] - num) / max(1.0, abs(num)))
                checked += 1
            report.checks.append(ParamCheck(name, worst, checked, worst < tol and checked > 0, skipped))
    return report


def away_from_zero(x: np.ndarray, margin: float = 1e-3) -> np.ndarray:
    """Push entries with |x| < margin out to +/-margin (keeps ReLU inputs off the kink)."""
    x = np.array(x, copy=True)
    small = np.abs(x) < margin
    x[small] = np.where(x[small] >= 0, margin, -margin) * 2
    return x

"""Central finite-difference verification of reverse-mode gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


@dataclass
class ParamCheck:
    name: str
    size: int
    max_abs_err: float
    max_rel_err: float
    passed: bool


@dataclass
class GradcheckReport:
    params: list[ParamCheck]
    tol: float

    @property
    def passed(self) -> bool:
        return all(p.passed for p in self.params)

    @property
    def max_rel_err(self) -> float:
        return max((p.max_rel_err for p in self.params), default=0.0)

    def table(self) -> str:
        lines = [f"{'param':<16}{'size':>7}{'max_abs':>12}{'max_rel':>12}  status"]
        for p in self.params:
            lines.append(
                f"{p.name:<16}{p.size:>7}{p.max_abs_err:>12.3e}{p.max_rel_err:>12.3e}  "
                f"{'ok' if p.passed else 'FAIL'}"
            )
        return "\n".join(lines)


def _scalar(loss: Tensor) -> float:
    val = float(np.asarray(loss.data).reshape(()))
    if not np.isfinite(val):
        raise FloatingPointError("loss is not finite")
    return val


def gradcheck(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-6,
    denom_floor: float = 1e-8,
) -> GradcheckReport:
    """Compare reverse-mode gradients with (f(θ+h) − f(θ−h)) / 2h entrywise.

    ``loss_fn`` must be deterministic; any noise it uses has to be frozen by
    the caller. Relative error is |g − g_fd| / max(|g|, |g_fd|, denom_floor).
    """
    for p in params:
        p.zero_grad()
    loss = loss_fn()
    _scalar(loss)
    backward(loss)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]

    checks = []
    for idx, (p, g) in enumerate(zip(params, analytic)):
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        max_abs = 0.0
        max_rel = 0.0
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = _scalar(loss_fn())
            flat[j] = orig - h
            down = _scalar(loss_fn())
            flat[j] = orig
            fd = (up - down) / (2.0 * h)
            err = abs(gflat[j] - fd)
            rel = err / max(abs(gflat[j]), abs(fd), denom_floor)
            max_abs = max(max_abs, err)
            max_rel = max(max_rel, rel)
        checks.append(
            ParamCheck(p.name or f"param{idx}", flat.size, max_abs, max_rel, max_rel < tol)
        )
    for p in params:
        p.zero_grad()
    return GradcheckReport(checks, tol)

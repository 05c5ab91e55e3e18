"""Adam optimizer and a central finite-difference gradient checker."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .autodiff import Parameter, Tensor, no_grad
from .errors import CrowdMotionError, TrainingError


@dataclass
class AdamState:
    """Per-parameter-set Adam slots plus hyperparameters.

    First/second moment buffers are keyed by parameter name and allocated on
    first use; ``step_count`` is shared across the set and increments once per
    ``adam_step`` call.
    """

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Iterable[Parameter], state: AdamState) -> None:
    """Apply one bias-corrected Adam update in place and zero the gradients."""
    params = list(params)
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise TrainingError(f"non-finite gradient in parameter {p.name!r}")
    state.step_count += 1
    t = state.step_count
    bias1 = 1.0 - state.beta1**t
    bias2 = 1.0 - state.beta2**t
    for p in params:
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        v = state.v[p.name]
        g = p.grad
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.lr * (m / bias1) / (np.sqrt(v / bias2) + state.eps)
        p.grad[...] = 0.0


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


class GradCheckError(CrowdMotionError):
    """The gradient check could not run (non-finite objective)."""


@dataclass
class GradCheckReport:
    """Outcome of comparing reverse-mode gradients against finite differences."""

    per_param: dict[str, float]
    tol: float
    objective: float

    @property
    def max_rel_error(self) -> float:
        return max(self.per_param.values()) if self.per_param else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def worst(self) -> tuple[str, float]:
        name = max(self.per_param, key=self.per_param.get)
        return name, self.per_param[name]

    def __str__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        name, err = self.worst() if self.per_param else ("-", 0.0)
        return (
            f"grad check {status}: max relative error {self.max_rel_error:.3e} "
            f"(worst {name}, tol {self.tol:.1e})"
        )


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Parameter],
    h: float = 1e-5,
    tol: float = 1e-4,
    rel_floor: float = 1e-5,
) -> GradCheckReport:
    """Compare reverse-mode gradients of the scalar ``f()`` with central
    finite differences over every coordinate of ``params``.

    ``rel_floor`` guards the relative-error denominator against coordinates
    whose true gradient sits below the finite-difference noise floor.
    """
    params = list(params)
    zero_grads(params)
    out = f()
    value = out.item()
    if not np.isfinite(value):
        raise GradCheckError(f"objective is non-finite ({value}); check aborted")
    out.backward()
    analytic = {p.name: p.grad.copy() for p in params}
    zero_grads(params)

    per_param: dict[str, float] = {}
    with no_grad():
        for p in params:
            worst = 0.0
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                original = flat[i]
                flat[i] = original + h
                f_plus = f().item()
                flat[i] = original - h
                f_minus = f().item()
                flat[i] = original
                if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                    raise GradCheckError(
                        f"objective non-finite while perturbing {p.name!r}[{i}]"
                    )
                numeric = (f_plus - f_minus) / (2.0 * h)
                exact = analytic[p.name].reshape(-1)[i]
                denom = max(abs(numeric), abs(exact), rel_floor)
                worst = max(worst, abs(numeric - exact) / denom)
            per_param[p.name] = worst
    return GradCheckReport(per_param=per_param, tol=tol, objective=value)

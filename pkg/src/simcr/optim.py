"""Adam optimizer and the inverse-square-root learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.98
ADAM_EPS = 1e-8


@dataclass
class OptimState:
    """Per-parameter first/second moments plus the shared step counter."""

    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0

    @classmethod
    def for_params(cls, params: dict[str, Tensor]) -> "OptimState":
        return cls(
            first_moment={k: np.zeros_like(p.data) for k, p in params.items()},
            second_moment={k: np.zeros_like(p.data) for k, p in params.items()},
            step_count=0,
        )


def adam_step(
    params: dict[str, Tensor],
    state: OptimState,
    lr: float,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    eps: float = ADAM_EPS,
) -> None:
    """One bias-corrected Adam update in place; missing grads count as zero."""
    if lr < 0:
        raise ValueError(f"adam_step: lr={lr} must be >= 0")
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None or v is None:
            raise ShapeError(f"adam_step: no optimizer state for parameter {name!r}")
        if m.shape != p.data.shape:
            raise ShapeError(
                f"adam_step: state shape {m.shape} vs parameter {p.data.shape} for {name!r}"
            )
        g = p.grad
        if g is None:
            m *= beta1
            v *= beta2
        else:
            if g.shape != p.data.shape:
                raise ShapeError(
                    f"adam_step: grad shape {g.shape} vs parameter {p.data.shape} for {name!r}"
                )
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            v += (1.0 - beta2) * (g * g)
        if lr == 0.0:
            continue
        mhat = m / c1
        vhat = v / c2
        p.data -= lr * mhat / (np.sqrt(vhat) + eps)


def lr_inverse_sqrt(step: int, warmup: int, peak: float) -> float:
    """Linear ramp to peak over warmup steps, then decay as sqrt(warmup/step)."""
    if step < 1 or warmup < 1:
        raise ValueError(f"lr_inverse_sqrt: step={step}, warmup={warmup} must be >= 1")
    if step <= warmup:
        return peak * step / warmup
    return peak * (warmup / step) ** 0.5

from __future__ import annotations

from typing import Iterable

import numpy as np

from .nn import Parameter


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter {name!r}")
        self.name = name


def _named(params) -> list[tuple[str, Parameter]]:
    if isinstance(params, dict):
        return list(params.items())
    out = []
    for i, item in enumerate(params):
        out.append(item if isinstance(item, tuple) else (str(i), item))
    return out


def adam_step(params, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, then clear gradients.

    ``params`` is a list of Parameters, (name, Parameter) pairs or a dict.
    Every gradient is checked before anything moves; a NaN/Inf aborts the
    whole step and names the offending parameter.
    """
    named = _named(params)
    for name, p in named:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NonFiniteGradientError(name)
    for _, p in named:
        if p.grad is None:
            continue
        g = p.grad.astype(p.data.dtype, copy=False)
        p.step_count += 1
        t = p.step_count
        p.adam_m *= beta1
        p.adam_m += (1 - beta1) * g
        p.adam_v *= beta2
        p.adam_v += (1 - beta2) * (g * g)
        m_hat = p.adam_m / (1 - beta1 ** t)
        v_hat = p.adam_v / (1 - beta2 ** t)
        p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype, copy=False)
        p.grad = None


def global_grad_norm(params: Iterable[Parameter]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return float(np.sqrt(total))


def clip_grad_norm(params: Iterable[Parameter], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    params = list(params)
    norm = global_grad_norm(params)
    if np.isfinite(norm) and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * p.grad.dtype.type(scale)
    return norm

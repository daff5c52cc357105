"""SGD with Nesterov momentum and Adam, operating in place on tensors.

Both optimizers accept an explicit parameter list on every ``step`` call so
that callers can update only the parameters of the currently active paths.
Moment buffers are keyed by tensor identity and created on first use.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ShapeError
from .tensor import Tensor


@dataclass
class OptimState:
    kind: str
    lr: float
    momentum: float = 0.0  # beta1 for adam
    beta2: float = 0.999
    weight_decay: float = 0.0
    eps: float = 1e-8
    buffers: dict = field(default_factory=dict)
    step_count: int = 0

    def __post_init__(self):
        if self.kind not in ("sgd-nesterov", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum/beta1 must lie in [0, 1), got {self.momentum}")
        if not 0 <= self.beta2 < 1:
            raise ValueError(f"beta2 must lie in [0, 1), got {self.beta2}")
        if self.weight_decay < 0:
            raise ValueError(f"weight decay must be nonnegative, got {self.weight_decay}")
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")


def _buffer(state: OptimState, param: Tensor, name: str) -> np.ndarray:
    slot = state.buffers.setdefault(id(param), {})
    buf = slot.get(name)
    if buf is None:
        buf = slot[name] = np.zeros_like(param.data)
    elif buf.shape != param.data.shape:
        raise ShapeError(f"{name} buffer shape {buf.shape} does not match parameter shape {param.shape}")
    return buf


def sgd_nesterov_step(params: Iterable[Tensor], state: OptimState) -> None:
    """v <- mu*v + (grad + wd*w);  w <- w - lr*(g + mu*v).  Params without a
    gradient are skipped and keep their velocity."""
    if state.kind != "sgd-nesterov":
        raise ValueError(f"state is for {state.kind!r}, not sgd-nesterov")
    mu, lr, wd = state.momentum, state.lr, state.weight_decay
    for p in params:
        if p.grad is None:
            continue
        if p.grad.shape != p.data.shape:
            raise ShapeError(f"gradient shape {p.grad.shape} does not match parameter {p.shape}")
        g = p.grad + wd * p.data if wd else p.grad.copy()
        v = _buffer(state, p, "velocity")
        v *= mu
        v += g
        p.data -= lr * (g + mu * v)
    state.step_count += 1


def adam_step(params: Iterable[Tensor], state: OptimState, masks: Optional[Sequence[np.ndarray]] = None) -> None:
    """Bias-corrected Adam.

    ``masks`` optionally restricts the update of each parameter to the
    selected entries; unselected entries keep their value and moments. Bias
    correction uses per-entry update counts so a sparsely updated entry is
    corrected for the number of times it was actually stepped.
    """
    if state.kind != "adam":
        raise ValueError(f"state is for {state.kind!r}, not adam")
    b1, b2, lr, eps, wd = state.momentum, state.beta2, state.lr, state.eps, state.weight_decay
    params = list(params)
    if masks is not None and len(masks) != len(params):
        raise ShapeError(f"{len(masks)} masks for {len(params)} parameters")
    for idx, p in enumerate(params):
        if p.grad is None:
            continue
        if p.grad.shape != p.data.shape:
            raise ShapeError(f"gradient shape {p.grad.shape} does not match parameter {p.shape}")
        m = _buffer(state, p, "m")
        v = _buffer(state, p, "v")
        t = _buffer(state, p, "t")
        sel = np.ones(p.shape, dtype=bool) if masks is None else np.asarray(masks[idx], dtype=bool)
        if sel.shape != p.shape:
            raise ShapeError(f"mask shape {sel.shape} does not match parameter {p.shape}")
        g = p.grad + wd * p.data if wd else p.grad
        t[sel] += 1
        m[sel] = b1 * m[sel] + (1 - b1) * g[sel]
        v[sel] = b2 * v[sel] + (1 - b2) * g[sel] ** 2
        m_hat = m[sel] / (1 - b1 ** t[sel])
        v_hat = v[sel] / (1 - b2 ** t[sel])
        p.data[sel] -= lr * m_hat / (np.sqrt(v_hat) + eps)
    state.step_count += 1


class SGDNesterov:
    def __init__(self, lr: float = 0.05, momentum: float = 0.9, weight_decay: float = 4e-5):
        self.state = OptimState("sgd-nesterov", lr=lr, momentum=momentum, weight_decay=weight_decay)

    def step(self, params: Iterable[Tensor]) -> None:
        sgd_nesterov_step(params, self.state)


class Adam:
    def __init__(
        self,
        lr: float = 0.001,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.state = OptimState("adam", lr=lr, momentum=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay)

    def step(self, params: Iterable[Tensor], masks: Optional[Sequence[np.ndarray]] = None) -> None:
        adam_step(params, self.state, masks)

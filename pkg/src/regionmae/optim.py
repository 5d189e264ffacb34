"""AdamW with decoupled weight decay, plus global-norm gradient clipping."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .errors import TrainingError, ValidationError


def clip_global_norm(params: dict[str, Tensor], max_norm: float = 1.0) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``.

    Returns the pre-clip norm.
    """
    total = 0.0
    for t in params.values():
        if t.grad is not None:
            total += float((t.grad.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for t in params.values():
            if t.grad is not None:
                t.grad *= scale
    return norm


def adamw_step(
    params: dict[str, Tensor],
    state: dict,
    lr: float = 5e-5,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> dict:
    """One AdamW update over named parameters; missing grads are treated as 0.

    Weight decay is decoupled: params shrink by (1 - lr*wd) independently of
    the adaptive step. State holds bias-corrected moment buffers per name.
    """
    if not state:
        state = {
            "step": 0,
            "m": {k: np.zeros_like(v.data) for k, v in params.items()},
            "v": {k: np.zeros_like(v.data) for k, v in params.items()},
        }
    state["step"] += 1
    t = state["step"]
    b1, b2 = betas
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t

    for name, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
        g = g.astype(p.data.dtype, copy=False)
        m = state["m"][name]
        v = state["v"][name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        if weight_decay:
            p.data *= (1.0 - lr * weight_decay)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


class AdamW:
    """Object wrapper around :func:`adamw_step` bound to a parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float = 5e-5,
                 betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, clip_norm: float | None = 1.0):
        if lr < 0:
            raise ValidationError("lr must be non-negative")
        self.params = params
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.state: dict = {}

    def step(self) -> float:
        norm = clip_global_norm(self.params, self.clip_norm) \
            if self.clip_norm is not None else 0.0
        self.state = adamw_step(self.params, self.state, lr=self.lr,
                                betas=self.betas, eps=self.eps,
                                weight_decay=self.weight_decay)
        return norm

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

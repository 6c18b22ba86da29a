"""Adam optimizer over named parameter tensors."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .tensor import Tensor


class NumericalError(ArithmeticError):
    """Raised when a step would consume a non-finite gradient."""


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class AdamState:
    """First/second moment accumulators plus the shared step counter."""

    def __init__(self, params: Mapping[str, Tensor], cfg: AdamConfig = AdamConfig()):
        self.cfg = cfg
        self.t = 0
        self.m = {n: np.zeros(p.shape, dtype=p.data.dtype) for n, p in params.items()}
        self.v = {n: np.zeros(p.shape, dtype=p.data.dtype) for n, p in params.items()}


def adam_step(
    state: AdamState,
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    frozen: frozenset[str] = frozenset(),
) -> dict[str, Tensor]:
    """One bias-corrected Adam update; returns the new parameter mapping.

    Parameters that are frozen or have no gradient entry are returned
    unchanged (their moments stay zero).  A non-finite gradient aborts
    the step before any parameter is touched.
    """
    for name, g in grads.items():
        if name in frozen:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name!r}")

    state.t += 1
    cfg = state.cfg
    bias1 = 1.0 - cfg.beta1 ** state.t
    bias2 = 1.0 - cfg.beta2 ** state.t

    updated = dict(params)
    for name, p in params.items():
        if name in frozen or name not in grads:
            continue
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(
                f"gradient for {name!r} has shape {list(g.shape)}, parameter is {list(p.shape)}"
            )
        m, v = state.m[name], state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        m_hat = m / bias1
        v_hat = v / bias2
        updated[name] = Tensor(p.data - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps))
    return updated

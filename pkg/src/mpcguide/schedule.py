"""Variance-preserving noise schedules over integer diffusion steps."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor

SCHEDULE_KINDS = ("linear-beta", "cosine", "scaled-linear")


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Signal/noise coefficients ``alpha[t]``, ``sigma[t]`` for ``t = 0..T``."""

    kind: str
    T: int
    alpha: np.ndarray
    sigma: np.ndarray
    loss_weight: np.ndarray

    def check_step(self, t: int) -> int:
        if not 0 <= int(t) <= self.T or int(t) != t:
            raise ValueError(f"step {t!r} outside [0, {self.T}]")
        return int(t)

    def params(self) -> dict:
        return {"kind": self.kind, "T": self.T}

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, NoiseSchedule)
            and self.kind == other.kind
            and self.T == other.T
            and np.array_equal(self.alpha, other.alpha)
            and np.array_equal(self.loss_weight, other.loss_weight)
        )

    __hash__ = None


def _linear_beta_alpha_bar(T: int) -> np.ndarray:
    # DDPM betas 1e-4 -> 0.02 over 1000 steps, rescaled so any T covers the same range.
    scale = 1000.0 / T
    betas = np.linspace(scale * 1e-4, scale * 0.02, T)
    betas = np.minimum(betas, 0.999)
    return np.cumprod(1.0 - betas)


def _scaled_linear_alpha_bar(T: int) -> np.ndarray:
    # Stable Diffusion's betas: linear in sqrt(beta) from 0.00085 to 0.012 over 1000 steps.
    scale = 1000.0 / T
    betas = scale * np.linspace(0.00085**0.5, 0.012**0.5, T) ** 2
    return np.cumprod(1.0 - np.minimum(betas, 0.999))


def _cosine_alpha_bar(T: int, s: float = 0.008) -> np.ndarray:
    f = lambda u: math.cos((u + s) / (1 + s) * math.pi / 2) ** 2
    betas = np.array([min(1 - f((i + 1) / T) / f(i / T), 0.999) for i in range(T)])
    return np.cumprod(1.0 - betas)


def make_schedule(kind: str = "linear-beta", T: int = 100, loss_weight=None) -> NoiseSchedule:
    """Build a variance-preserving schedule with ``alpha[0] = 1, sigma[0] = 0``."""
    if int(T) != T or T < 2:
        raise ValueError(f"schedule needs T >= 2, got {T!r}")
    T = int(T)
    if kind == "linear-beta":
        abar = _linear_beta_alpha_bar(T)
    elif kind == "cosine":
        abar = _cosine_alpha_bar(T)
    elif kind == "scaled-linear":
        abar = _scaled_linear_alpha_bar(T)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")
    abar = np.concatenate([[1.0], abar])
    alpha = np.sqrt(abar)
    sigma = np.sqrt(1.0 - abar)
    if loss_weight is None:
        w = np.ones(T + 1)
    else:
        w = np.broadcast_to(np.asarray(loss_weight, dtype=np.float64), (T + 1,)).copy()
    for arr in (alpha, sigma, w):
        arr.setflags(write=False)
    return NoiseSchedule(kind, T, alpha, sigma, w)


def corrupt(x, t: int, eps, sched: NoiseSchedule):
    """Forward corruption ``alpha_t * x + sigma_t * eps``.

    Works on numpy arrays or on (possibly taped) tensors.
    """
    t = sched.check_step(t)
    if isinstance(x, Tensor) or isinstance(eps, Tensor):
        if as_tensor(x).shape != as_tensor(eps).shape:
            raise ValueError(f"corrupt: x shape {as_tensor(x).shape} != eps shape {as_tensor(eps).shape}")
        return as_tensor(x) * sched.alpha[t] + as_tensor(eps) * sched.sigma[t]
    x, eps = np.asarray(x, dtype=np.float64), np.asarray(eps, dtype=np.float64)
    if x.shape != eps.shape:
        raise ValueError(f"corrupt: x shape {x.shape} != eps shape {eps.shape}")
    return sched.alpha[t] * x + sched.sigma[t] * eps


def frac_to_step(f: float, sched_or_T) -> int:
    """Map a fractional time in [0, 1] to the nearest integer step, ties upward."""
    T = sched_or_T.T if isinstance(sched_or_T, NoiseSchedule) else int(sched_or_T)
    if not 0.0 <= f <= 1.0:
        raise ValueError(f"fraction {f!r} outside [0, 1]")
    # guard against products like 0.29 * 100 = 28.999999999999996
    return int(math.floor(round(f * T, 9) + 0.5))

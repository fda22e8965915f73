"""Noise-prediction combinators, including the MPC-approximated guides.

An MPC guide stands in for the conditional signal at step ``t`` when the
explicit guide can only be queried at ``t - delta``: simulate unconditional
denoising from ``t`` to ``t - delta`` on a tape, score the result with the
explicit guide, and backpropagate to ``z_t``.

Callables used here take and return :class:`~mpcguide.autodiff.Tensor`
values so they can sit inside a differentiable chain:

    uncond_eps(z, t) -> eps            # unconditional noise prediction
    cond_eps(z, t) -> eps              # conditional, class already bound
    classifier(z, t) -> log p_t(c|z)   # one value per row
    clean_classifier(x) -> log p(c|x)  # clean-data classifier
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, as_tensor, backward, stop_gradient
from .samplers import ddim_step
from .schedule import NoiseSchedule

SCALE_MODES = ("unscaled", "sigma-scaled")
MAX_DENOISE_STEPS = 10


@dataclass(frozen=True)
class GuidanceConfig:
    w: float = 2.0
    delta: int = 0
    k_denoise: int = 5
    rescale: bool = True
    classifier_scale_mode: str = "sigma-scaled"

    def __post_init__(self):
        if self.w < 0:
            raise ValueError(f"guidance weight must be >= 0, got {self.w}")
        if not 1 <= self.k_denoise <= MAX_DENOISE_STEPS:
            raise ValueError(f"k_denoise must be in [1, {MAX_DENOISE_STEPS}], got {self.k_denoise}")
        if self.delta < 0 or int(self.delta) != self.delta:
            raise ValueError(f"delta must be a non-negative step count, got {self.delta}")
        if self.classifier_scale_mode not in SCALE_MODES:
            raise ValueError(f"unknown classifier scale mode {self.classifier_scale_mode!r}")

    def with_delta(self, delta: int) -> "GuidanceConfig":
        return replace(self, delta=int(delta))


@dataclass
class GuideResult:
    xi: np.ndarray
    raw_norm: np.ndarray  # per-row norm before rescaling
    cosine_vs_reference: np.ndarray | None = None
    substeps: list[int] = field(default_factory=list)


def cfg_combine(eps_cond, eps_uncond, w: float):
    """Classifier-free guidance: ``(1 + w) eps_cond - w eps_uncond``.

    Evaluated as ``eps_cond + w (eps_cond - eps_uncond)`` so that ``w = 0``
    and equal inputs return ``eps_cond`` exactly.
    """
    if isinstance(eps_cond, Tensor) or isinstance(eps_uncond, Tensor):
        c = as_tensor(eps_cond)
        return c + (c - as_tensor(eps_uncond)) * w
    eps_cond, eps_uncond = np.asarray(eps_cond), np.asarray(eps_uncond)
    if eps_cond.shape != eps_uncond.shape:
        raise ValueError(f"cfg_combine: shapes {eps_cond.shape} and {eps_uncond.shape} differ")
    return eps_cond + w * (eps_cond - eps_uncond)


def classifier_guide(eps_uncond, grad_logp, t: int, mode: str, sched: NoiseSchedule) -> np.ndarray:
    """Shift the unconditional prediction against the classifier gradient.

    ``sigma-scaled`` multiplies the gradient by ``sigma_t``, which makes the
    result equal the exact conditional prediction for a Bayes classifier.
    """
    eps_uncond, grad_logp = np.asarray(eps_uncond), np.asarray(grad_logp)
    if eps_uncond.shape != grad_logp.shape:
        raise ValueError(f"classifier_guide: shapes {eps_uncond.shape} and {grad_logp.shape} differ")
    if mode == "unscaled":
        return eps_uncond - grad_logp
    if mode == "sigma-scaled":
        return eps_uncond - sched.sigma[sched.check_step(t)] * grad_logp
    raise ValueError(f"unknown classifier scale mode {mode!r}; expected {SCALE_MODES}")


def substep_times(t: int, t_end: int, k: int) -> list[int]:
    """Integer times from ``t`` down to ``t_end`` in at most ``k`` uniform jumps."""
    if t_end == t:
        return [t]
    raw = np.round(np.linspace(t, t_end, k + 1)).astype(int)
    return sorted(set(raw.tolist()), reverse=True)


def denoise(z: Tensor, t: int, delta: int, k: int, uncond_eps, sched: NoiseSchedule):
    """Differentiable unconditional DDIM traversal from ``t`` to ``t - delta``."""
    if not 0 <= delta <= t:
        raise ValueError(f"lookahead delta={delta} must lie in [0, t={t}]")
    times = substep_times(t, t - delta, k)
    for a, b in zip(times, times[1:]):
        z = ddim_step(z, a, b, uncond_eps(z, a), sched)
    return z, times


def _row_norms(x: np.ndarray) -> np.ndarray:
    return np.linalg.norm(x, axis=-1)


def rescale_to(xi: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Scale each row of ``xi`` to the norm of the matching row of ``target``.

    All-zero rows carry no direction and are left at zero.
    """
    n = _row_norms(xi)[..., None]
    factor = np.divide(_row_norms(target)[..., None], n, out=np.zeros_like(n), where=n > 0)
    return xi * factor


def _finish(xi: np.ndarray, z: np.ndarray, t: int, cfg: GuidanceConfig, uncond_eps, times) -> GuideResult:
    if not np.isfinite(xi).all():
        raise FloatingPointError(f"non-finite guide at t={t}; denoising sub-steps {times}")
    raw = _row_norms(xi)
    if cfg.rescale:
        xi = rescale_to(xi, uncond_eps(Tensor(z), t).data)
    return GuideResult(xi, raw, substeps=list(times))


def _check_finite_chain(z_end: Tensor, times) -> None:
    if not np.isfinite(z_end.data).all():
        raise FloatingPointError(f"non-finite latent after denoising through sub-steps {times}")


def mpc_guide_classifier(z, t: int, cfg: GuidanceConfig, classifier: Callable, uncond_eps: Callable,
                         sched: NoiseSchedule) -> GuideResult:
    """Gradient of the noised-classifier log-probability at ``t - delta``
    with respect to ``z_t`` (ascent direction)."""
    z = np.asarray(as_tensor(z).data)
    with Tape() as tape:
        zt = tape.watch(z)
        z_end, times = denoise(zt, t, cfg.delta, cfg.k_denoise, uncond_eps, sched)
        _check_finite_chain(z_end, times)
        objective = classifier(z_end, t - cfg.delta).sum()
    (grad,) = backward(objective, [zt])
    return _finish(grad, z, t, cfg, uncond_eps, times)


def mpc_guide_conditional(z, t: int, cfg: GuidanceConfig, cond_eps: Callable, uncond_eps: Callable,
                          sched: NoiseSchedule) -> GuideResult:
    """Negative gradient of ``||z_{t-delta} - z*||^2`` with ``z*`` detached.

    The target ``z* = z_{t-delta} + cond_eps(z_{t-delta})`` is built outside
    the tape, so at ``delta = 0`` the raw guide is exactly ``2 cond_eps(z_t)``.
    At ``delta = t`` an exact model predicts zero noise, the target equals
    ``z_0`` and the guide vanishes; rescaling keeps it at zero.
    """
    z = np.asarray(as_tensor(z).data)
    with Tape() as tape:
        zt = tape.watch(z)
        z_end, times = denoise(zt, t, cfg.delta, cfg.k_denoise, uncond_eps, sched)
        _check_finite_chain(z_end, times)
        frozen = stop_gradient(z_end)
        target = frozen + cond_eps(frozen, t - cfg.delta)
        loss = ad.square(z_end - target).sum()
    (grad,) = backward(loss, [zt])
    return _finish(-grad, z, t, cfg, uncond_eps, times)


def clean_data_guide(z, t: int, clean_classifier: Callable, uncond_eps: Callable, cfg: GuidanceConfig,
                     sched: NoiseSchedule) -> GuideResult:
    """Denoise all the way to step 0 (at most ``k_denoise`` jumps), score with a
    clean-data classifier, and backpropagate to ``z_t``."""
    z = np.asarray(as_tensor(z).data)
    with Tape() as tape:
        zt = tape.watch(z)
        x, times = denoise(zt, t, t, cfg.k_denoise, uncond_eps, sched)
        _check_finite_chain(x, times)
        objective = clean_classifier(x).sum()
    (grad,) = backward(objective, [zt])
    return _finish(grad, z, t, cfg, uncond_eps, times)


def guided_eps_fn(backend, c, cfg: GuidanceConfig, combine: bool = True):
    """Build a sampler callback ``(z, t, mode) -> eps`` for a backend.

    ``backend`` exposes ``eps(z, t, c)`` with ``c=None`` for the unconditional
    branch. Explicit steps use the conditional prediction, MPC steps swap in
    the approximate guide, and either is mixed with the unconditional
    prediction by classifier-free guidance. ``combine=False`` bypasses the
    combinator (only meaningful at ``w = 0``).
    """
    sched = backend.sched
    uncond = lambda z, t: backend.eps(z, t, None)
    cond = lambda z, t: backend.eps(z, t, c)

    def fn(z, t, mode):
        if mode == "unconditional":
            return uncond(Tensor(z), t).data
        if mode == "explicit":
            guide_eps = cond(Tensor(z), t).data
        else:
            step_cfg = cfg.with_delta(min(cfg.delta, t))
            guide_eps = mpc_guide_conditional(z, t, step_cfg, cond, uncond, sched).xi
        if not combine:
            return guide_eps
        return cfg_combine(guide_eps, uncond(Tensor(z), t).data, cfg.w)

    return fn

"""Deterministic DDIM and PLMS steppers with injected noise predictors.

A :class:`StepPlan` lists the times the sampler visits after its start time
(``T`` by default). Step ``i`` jumps from the previous time to ``times[i]``;
its guidance mode is ``modes[i]``. So the restricted-guidance plan

    times = [875, 750, 625, 500, 375, 250, 125, 0]
    modes = [mpc, explicit, mpc, explicit, mpc, explicit, explicit, explicit]

starts at z_T, uses an MPC guide for the jump into 875, and finishes with an
explicitly guided jump from 125 to 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor, as_tensor
from .schedule import NoiseSchedule, frac_to_step

MODES = ("explicit", "mpc", "unconditional")

# Adams-Bashforth weights on eps history, most recent first.
AB_WEIGHTS = (
    (1.0,),
    (3 / 2, -1 / 2),
    (23 / 12, -16 / 12, 5 / 12),
    (55 / 24, -59 / 24, 37 / 24, -9 / 24),
)


@dataclass(frozen=True)
class StepPlan:
    times: tuple[int, ...]
    modes: tuple[str, ...] = ()
    start: int | None = None

    def __post_init__(self):
        times = tuple(int(t) for t in self.times)
        modes = tuple(self.modes) or ("explicit",) * len(times)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "modes", modes)
        if not times:
            raise ValueError("step plan needs at least one time")
        if len(modes) != len(times):
            raise ValueError(f"{len(modes)} mode tags for {len(times)} plan times")
        bad = [m for m in modes if m not in MODES]
        if bad:
            raise ValueError(f"unknown guidance modes {bad}; expected {MODES}")
        if times[-1] != 0:
            raise ValueError(f"plan must end at 0, got {times[-1]}")
        if any(b >= a for a, b in zip(times, times[1:])):
            raise ValueError(f"plan times must strictly decrease: {times}")
        if self.start is not None and self.start <= times[0]:
            raise ValueError(f"start {self.start} must exceed the first plan time {times[0]}")

    def start_time(self, sched: NoiseSchedule) -> int:
        start = sched.T if self.start is None else self.start
        if start > sched.T or self.times[0] >= start:
            raise ValueError(f"plan {self.times} (start {start}) does not fit schedule with T={sched.T}")
        return start

    def steps(self, sched: NoiseSchedule):
        """Yield ``(t, t_next, mode)`` for each jump."""
        prev = self.start_time(sched)
        for t_next, mode in zip(self.times, self.modes):
            yield prev, t_next, mode
            prev = t_next

    def mode_at(self, t: int) -> str:
        return self.modes[self.times.index(t)]

    @classmethod
    def from_fractions(cls, fracs: Sequence[float], sched_or_T, modes: Sequence[str] = ()) -> "StepPlan":
        return cls(tuple(frac_to_step(f, sched_or_T) for f in fracs), tuple(modes))

    @classmethod
    def uniform(cls, n_steps: int, sched_or_T, mode: str = "explicit") -> "StepPlan":
        """``n_steps`` evenly spaced jumps from T down to 0."""
        fracs = [1 - (i + 1) / n_steps for i in range(n_steps)]
        return cls.from_fractions(fracs, sched_or_T, [mode] * n_steps)

    def fractions(self, sched: NoiseSchedule) -> list[float]:
        return [t / sched.T for t in self.times]


@dataclass
class PlmsState:
    eps_history: list = field(default_factory=list)  # most recent first, at most 4


@dataclass
class Trajectory:
    times: tuple[int, ...]  # start time followed by plan times
    latents: list  # latent at each time; the last is z_0

    @property
    def final(self) -> np.ndarray:
        return as_tensor(self.latents[-1]).data


def _check_jump(t: int, t_next: int, sched: NoiseSchedule) -> None:
    sched.check_step(t)
    sched.check_step(t_next)
    if t_next >= t:
        raise ValueError(f"jump must go backward in time: t={t}, t_next={t_next}")


def ddim_step(z, t: int, t_next: int, eps_tilde, sched: NoiseSchedule):
    """Deterministic jump: reconstruct x-hat at ``t``, re-corrupt at ``t_next``."""
    _check_jump(t, t_next, sched)
    a, s = sched.alpha[t], sched.sigma[t]
    a2, s2 = sched.alpha[t_next], sched.sigma[t_next]
    if isinstance(z, Tensor) or isinstance(eps_tilde, Tensor):
        x_hat = (as_tensor(z) - as_tensor(eps_tilde) * s) * (1.0 / a)
        return x_hat * a2 + as_tensor(eps_tilde) * s2
    x_hat = (np.asarray(z) - s * np.asarray(eps_tilde)) / a
    return a2 * x_hat + s2 * np.asarray(eps_tilde)


def plms_step(z, t: int, t_next: int, eps_now, state: PlmsState, sched: NoiseSchedule):
    """Adams-Bashforth combination of noise predictions, then a DDIM jump.

    Order ramps from 1 to 4 as history accumulates. Returns the new latent
    and the updated state; the input state is not modified.
    """
    _check_jump(t, t_next, sched)
    history = [eps_now] + list(state.eps_history)
    history = history[:4]
    weights = AB_WEIGHTS[len(history) - 1]
    if len(history) == 1:
        combined = eps_now
    elif any(isinstance(e, Tensor) for e in history):
        combined = as_tensor(history[0]) * weights[0]
        for w, e in zip(weights[1:], history[1:]):
            combined = combined + as_tensor(e) * w
    else:
        combined = sum(w * np.asarray(e) for w, e in zip(weights, history))
    return ddim_step(z, t, t_next, combined, sched), PlmsState(history)


EpsFn = Callable[[np.ndarray, int, str], np.ndarray]


def sample(z_init, plan: StepPlan, eps_fn: EpsFn, sched: NoiseSchedule, method: str = "ddim") -> Trajectory:
    """Run ``plan`` from ``z_init`` with guidance ``eps_fn(z, t, mode)``."""
    if method not in ("ddim", "plms"):
        raise ValueError(f"unknown sampler {method!r}; expected 'ddim' or 'plms'")
    z = np.array(z_init, dtype=np.float64)
    state = PlmsState()
    start = plan.start_time(sched)
    latents = [z]
    for t, t_next, mode in plan.steps(sched):
        try:
            eps = np.asarray(as_tensor(eps_fn(z, t, mode)).data)
        except Exception as exc:
            raise RuntimeError(f"noise prediction failed at step t={t} -> {t_next} (mode {mode})") from exc
        if eps.shape != z.shape:
            raise ValueError(f"eps_fn returned shape {eps.shape} for latent shape {z.shape}")
        if method == "ddim":
            z = ddim_step(z, t, t_next, eps, sched)
        else:
            z, state = plms_step(z, t, t_next, eps, state, sched)
        latents.append(z)
    return Trajectory((start,) + plan.times, latents)

"""Similarity and restricted-guidance studies at desk scale.

Both studies accept a *backend*: anything with ``sched``, ``num_classes``
and ``eps(z, t, c)``; the similarity study also uses ``class_log_prob`` and,
for ground truth, an :class:`~mpcguide.oracle.AnalyticMixture`.
"""

from __future__ import annotations

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .guidance import (GuidanceConfig, clean_data_guide, guided_eps_fn, mpc_guide_classifier,
                       mpc_guide_conditional)
from .metrics import GUIDE_KINDS, class_purity, mmd_rbf, rowwise_cosine, trajectory_divergence
from .oracle import AnalyticMixture
from .samplers import StepPlan, ddim_step, sample
from .schedule import frac_to_step

log = logging.getLogger(__name__)

DEFAULT_T_FRACS = (0.2, 0.4, 0.6, 0.8, 1.0)
DEFAULT_DELTA_FRACS = tuple(round(0.1 * i, 1) for i in range(10))

MPC_PLAN_FRACS = (0.875, 0.75, 0.625, 0.5, 0.375, 0.25, 0.125, 0.0)
MPC_PLAN_MODES = ("mpc", "explicit", "mpc", "explicit", "mpc", "explicit", "explicit", "explicit")
BASELINE_FRACS = (0.8, 0.6, 0.4, 0.2, 0.0)
GOLD_STEPS = 50


class CombinedBackend:
    """Pairs an eps model with a separately trained noised classifier."""

    def __init__(self, eps_model, classifier=None):
        self.eps_model = eps_model
        self.classifier = classifier
        self.sched = eps_model.sched
        self.num_classes = eps_model.num_classes
        self.dim = eps_model.dim

    def eps(self, z, t, c=None):
        return self.eps_model.eps(z, t, c)

    def class_log_prob(self, z, t, c):
        if self.classifier is None:
            raise ValueError("backend has no noised classifier")
        return self.classifier.class_log_prob(z, t, c)


def prior_latents(seeds, dim: int) -> np.ndarray:
    """One N(0, I) draw per seed; identical seeds give identical rows."""
    return np.stack([np.random.default_rng(int(s)).standard_normal(dim) for s in seeds])


def derive_seeds(root: int, n: int) -> list[int]:
    """``n`` distinct 32-bit seeds derived from one root seed."""
    return [int(np.random.SeedSequence([int(root), i]).generate_state(1)[0]) for i in range(n)]


def latent_hash(z: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(z, dtype=np.float64).tobytes()).hexdigest()


def unconditional_init(z_T: np.ndarray, t: int, backend, n_steps: int = 20) -> np.ndarray:
    """Deterministically denoise prior draws from T down to ``t`` with DDIM."""
    sched = backend.sched
    times = np.unique(np.round(np.linspace(sched.T, t, n_steps + 1)).astype(int))[::-1]
    z = z_T.copy()
    for a, b in zip(times, times[1:]):
        z = ddim_step(z, int(a), int(b), backend.eps(Tensor(z), int(a), None).data, sched)
    return z


@dataclass
class SimilarityConfig:
    t_fracs: tuple = DEFAULT_T_FRACS
    delta_fracs: tuple = DEFAULT_DELTA_FRACS
    replicates: int = 10
    classes: tuple | None = None
    guide_kinds: tuple = ("mpc-conditional",)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    seed: int = 0
    init_steps: int = 20
    threads: int = 1


def _similarity_cell(backend, oracle, kind, z, t, delta, classes, cfg: SimilarityConfig):
    sched = backend.sched
    gcfg = cfg.guidance.with_delta(delta)
    uncond = lambda x, s: backend.eps(x, s, None)
    if kind == "mpc-conditional":
        res = mpc_guide_conditional(z, t, gcfg, lambda x, s: backend.eps(x, s, classes), uncond, sched)
        ref = oracle.true_guide(z, t, classes).data
    elif kind == "mpc-classifier":
        res = mpc_guide_classifier(z, t, gcfg, lambda x, s: backend.class_log_prob(x, s, classes), uncond, sched)
        ref = oracle.grad_log_posterior(z, t, classes)
    else:
        res = clean_data_guide(z, t, lambda x: oracle.class_log_prob(x, 0, classes), uncond, gcfg, sched)
        ref = oracle.true_guide(z, t, classes).data
    return rowwise_cosine(res.xi, ref)


def similarity_study(backend, oracle: AnalyticMixture, cfg: SimilarityConfig = SimilarityConfig()) -> list[dict]:
    """Cosine between approximate guides and ground truth over a (t, delta) grid.

    For every start time, ``replicates`` prior draws per class are denoised
    unconditionally to ``t``. Rows come back sorted by
    ``(guide_kind, t, delta, class, replicate)``; a failing guide yields rows
    with ``cosine = nan`` and the error message.
    """
    sched = backend.sched
    bad = set(cfg.guide_kinds) - set(GUIDE_KINDS)
    if bad:
        raise ValueError(f"unknown guide kinds {sorted(bad)}; expected {GUIDE_KINDS}")
    classes = np.asarray(cfg.classes if cfg.classes is not None else range(backend.num_classes))
    cls = np.repeat(classes, cfg.replicates)
    reps = np.tile(np.arange(cfg.replicates), len(classes))
    seeds = [int(np.random.SeedSequence([cfg.seed, int(c), int(r)]).generate_state(1)[0]) for c, r in zip(cls, reps)]
    z_T = prior_latents(seeds, oracle.dim)

    jobs = []
    for tf in cfg.t_fracs:
        t = frac_to_step(tf, sched)
        for df in cfg.delta_fracs:
            delta = frac_to_step(df, sched)
            if delta > t:
                continue
            for kind in cfg.guide_kinds:
                jobs.append((kind, tf, t, df, delta))

    inits = {}
    for tf in cfg.t_fracs:
        t = frac_to_step(tf, sched)
        inits[t] = unconditional_init(z_T, t, backend, cfg.init_steps)

    def run(job):
        kind, tf, t, df, delta = job
        try:
            cos, err = _similarity_cell(backend, oracle, kind, inits[t], t, delta, cls, cfg), ""
        except Exception as exc:  # recorded as failed rows; the study continues
            log.warning("guide %s failed at t=%d delta=%d: %s", kind, t, delta, exc)
            cos, err = np.full(len(cls), np.nan), f"{type(exc).__name__}: {exc}"
        return [
            {"guide_kind": kind, "t": t, "t_frac": tf, "delta": delta, "delta_frac": df,
             "class": int(c), "replicate": int(r), "seed": s, "cosine": float(v), "error": err}
            for c, r, s, v in zip(cls, reps, seeds, cos)
        ]

    with ThreadPoolExecutor(max_workers=max(1, cfg.threads)) as pool:
        chunks = list(pool.map(run, jobs))
    rows = [row for chunk in chunks for row in chunk]
    rows.sort(key=lambda r: (r["guide_kind"], r["t"], r["delta"], r["class"], r["replicate"]))
    return rows


def median_by_delta(rows: list[dict], kind: str, t: int) -> dict[int, float]:
    out = {}
    for d in sorted({r["delta"] for r in rows if r["guide_kind"] == kind and r["t"] == t}):
        vals = [r["cosine"] for r in rows if r["guide_kind"] == kind and r["t"] == t and r["delta"] == d]
        out[d] = float(np.median(vals))
    return out


# restricted explicit guidance


@dataclass
class RestrictedConfig:
    guidance: GuidanceConfig = field(default_factory=lambda: GuidanceConfig(w=2.0, k_denoise=5))
    delta_frac: float = 0.125
    method: str = "ddim"
    mmd_permutations: int = 200
    mmd_seed: int = 0
    combine: bool = True
    arms: tuple = ("mpc", "reference", "baseline", "gold")


def restricted_plans(sched) -> dict[str, StepPlan]:
    T = sched.T
    return {
        "mpc": StepPlan.from_fractions(MPC_PLAN_FRACS, T, MPC_PLAN_MODES),
        "reference": StepPlan.from_fractions(MPC_PLAN_FRACS, T),
        "baseline": StepPlan.from_fractions(BASELINE_FRACS, T),
        "gold": StepPlan.uniform(GOLD_STEPS, T),
        "uncond-baseline": StepPlan.from_fractions(
            MPC_PLAN_FRACS, T, ["unconditional" if m == "mpc" else m for m in MPC_PLAN_MODES]),
    }


@dataclass
class RestrictedResult:
    plans: dict
    samples: dict  # arm -> (n, dim) terminal samples, rows ordered as (class, seed)
    trajectories: dict
    classes: np.ndarray
    seeds: np.ndarray
    z_T_hash: dict
    errors: dict
    summary: list[dict]
    divergence: np.ndarray | None


def run_arm(backend, plan: StepPlan, z_T: np.ndarray, classes: np.ndarray, cfg: RestrictedConfig):
    gcfg = cfg.guidance.with_delta(frac_to_step(cfg.delta_frac, backend.sched))
    fn = guided_eps_fn(backend, classes, gcfg, combine=cfg.combine)
    return sample(z_T, plan, fn, backend.sched, cfg.method)


def _restricted(backend, classes, seeds, cfg: RestrictedConfig, oracle, arms) -> RestrictedResult:
    sched = backend.sched
    plans = restricted_plans(sched)
    classes = np.asarray(classes)
    seeds = np.asarray(seeds)
    cls = np.repeat(classes, len(seeds))
    sd = np.tile(seeds, len(classes))
    z_T = prior_latents(sd, backend.dim)

    samples, trajs, errors, hashes = {}, {}, {}, {}
    for arm in arms:
        hashes[arm] = latent_hash(z_T)
        try:
            trajs[arm] = run_arm(backend, plans[arm], z_T, cls, cfg)
            samples[arm] = trajs[arm].final
        except Exception as exc:  # other arms proceed
            log.warning("arm %s failed: %s", arm, exc)
            errors[arm] = f"{type(exc).__name__}: {exc}"

    summary = []
    for arm in arms:
        if arm not in samples:
            summary.append({"arm": arm, "error": errors[arm]})
            continue
        row = {"arm": arm, "n_steps": len(plans[arm].times), "error": ""}
        for other in ("gold", "reference"):
            if other in samples:
                res = mmd_rbf(samples[arm], samples[other], cfg.mmd_permutations, cfg.mmd_seed)
                row[f"mmd_to_{other}"] = res.statistic
                row[f"mmd_null95_to_{other}"] = res.null_threshold
                row[f"median_l2_to_{other}"] = float(np.median(np.linalg.norm(samples[arm] - samples[other], axis=1)))
        if oracle is not None:
            row["class_purity"] = float(np.mean([
                class_purity(samples[arm][cls == c], int(c), oracle) for c in classes]))
        summary.append(row)

    div = None
    if "mpc" in trajs and "reference" in trajs:
        div = trajectory_divergence(trajs["mpc"], trajs["reference"])
    return RestrictedResult(plans, samples, trajs, cls, sd, hashes, errors, summary, div)


def restricted_guidance_study(backend, classes, seeds, cfg: RestrictedConfig = RestrictedConfig(),
                              oracle: AnalyticMixture | None = None) -> RestrictedResult:
    """Run the MPC, reference, baseline and gold-standard arms from shared z_T.

    Each (class, seed) pair gets one prior draw seeded by ``seed`` alone, so
    every arm starts from bit-identical latents.
    """
    return _restricted(backend, classes, seeds, cfg, oracle, cfg.arms)


def fifth_arm_uncond_baseline(backend, classes, seeds, cfg: RestrictedConfig = RestrictedConfig(),
                              oracle: AnalyticMixture | None = None) -> RestrictedResult:
    """MPC arm next to the 8-step plan with unconditional steps in place of MPC.

    Purity is compared softly: ``purity_ordering_ok`` is reported, never raised.
    """
    res = _restricted(backend, classes, seeds, cfg, oracle, ("mpc", "uncond-baseline"))
    purity = {r["arm"]: r.get("class_purity") for r in res.summary}
    ok = None
    if purity.get("mpc") is not None and purity.get("uncond-baseline") is not None:
        ok = purity["uncond-baseline"] <= purity["mpc"]
        if not ok:
            log.warning("unconditional baseline purity %.3f exceeds MPC purity %.3f",
                        purity["uncond-baseline"], purity["mpc"])
    for r in res.summary:
        r["purity_ordering_ok"] = ok
    return res

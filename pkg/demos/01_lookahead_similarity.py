"""How well does a lookahead guide track the true conditional signal?

Uses the closed-form mixture, so every guide can be compared with ground
truth. At delta = 0 the guide is the explicit conditional prediction; as the
lookahead grows, the unconditional rollout blurs the class signal.
"""

import numpy as np

from mpcguide.config import DEFAULTS, build_dataset, build_schedule
from mpcguide.experiments import SimilarityConfig, median_by_delta, similarity_study

sched = build_schedule(DEFAULTS)
oracle = build_dataset(DEFAULTS, with_samples=False).analytic(sched)
print(f"{oracle.num_classes}-class mixture in {oracle.dim} dimensions, {sched.kind} schedule, T={sched.T}")

# the decomposition behind classifier guidance holds to rounding error
rng = np.random.default_rng(0)
z = rng.standard_normal((5, oracle.dim))
lhs = oracle.optimal_eps(z, 60, 1).data - oracle.optimal_eps(z, 60).data
rhs = -sched.sigma[60] * oracle.grad_log_posterior(z, 60, 1)
print(f"eps_c - eps_null vs -sigma * grad log p: max deviation {np.abs(lhs - rhs).max():.1e}")

cfg = SimilarityConfig(t_fracs=(0.65, 1.0), delta_fracs=tuple(round(0.1 * i, 1) for i in range(10)),
                       replicates=10, guide_kinds=("mpc-conditional", "mpc-classifier"))
rows = similarity_study(oracle, oracle, cfg)
for kind in cfg.guide_kinds:
    for t in (65, 100):
        med = median_by_delta(rows, kind, t)
        line = " ".join(f"{d:>3}:{m:.3f}" for d, m in med.items())
        print(f"{kind:16s} t={t:3d}  {line}")

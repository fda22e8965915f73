"""Restricted explicit guidance on a trained model.

The conditional model may only be queried at every other step of an 8-step
plan; the MPC arm fills the gaps with lookahead guides. It is compared with
the fully guided 8-step reference, a 5-step baseline and a 50-step gold run,
all started from the same prior draws.

    python demos/02_restricted_guidance.py [training_steps]
"""

import sys
import time

from mpcguide.config import DEFAULTS, build_dataset, build_schedule
from mpcguide.experiments import RestrictedConfig, restricted_guidance_study
from mpcguide.models import TrainConfig, train_eps

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 20_000
sched = build_schedule(DEFAULTS)
data = build_dataset(DEFAULTS)
oracle = data.analytic(sched)

t0 = time.perf_counter()
model = train_eps(data, sched, TrainConfig(steps=steps))
print(f"trained {steps} steps in {time.perf_counter() - t0:.0f}s, final loss {model.history[-1][1]:.4f}")

for name, backend in (("analytic", oracle), ("trained", model)):
    res = restricted_guidance_study(backend, range(4), range(64), RestrictedConfig(), oracle)
    print(f"\n{name} backend")
    print(f"{'arm':10s} {'steps':>5s} {'MMD->gold':>11s} {'null95':>9s} {'L2->ref':>8s} {'purity':>6s}")
    for r in res.summary:
        print(f"{r['arm']:10s} {r['n_steps']:5d} {r['mmd_to_gold']:11.2e} {r['mmd_null95_to_gold']:9.1e} "
              f"{r['median_l2_to_reference']:8.4f} {r['class_purity']:6.2f}")

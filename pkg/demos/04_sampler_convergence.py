"""DDIM and PLMS on a Gaussian whose optimal noise prediction is known exactly."""

import numpy as np

from mpcguide.data import single_gaussian
from mpcguide.experiments import prior_latents
from mpcguide.metrics import mmd_rbf
from mpcguide.samplers import StepPlan, sample
from mpcguide.schedule import make_schedule

sched = make_schedule("linear-beta", 1000)
oracle = single_gaussian((1.0, -0.5), 0.5).analytic(sched)
fn = lambda z, t, mode: oracle.optimal_eps(z, t).data

z = prior_latents(range(512), 2)
data, _ = oracle.sample(512, np.random.default_rng(1))
ref = sample(z, StepPlan.uniform(1000, sched), fn, sched).final

print("steps  method  median err to 1000-step ref  terminal std  MMD to data")
for n in (5, 8, 10, 20, 50, 200):
    for method in ("ddim", "plms"):
        x = sample(z, StepPlan.uniform(n, sched), fn, sched, method).final
        err = np.median(np.linalg.norm(x - ref, axis=1))
        print(f"{n:5d}  {method:6s}  {err:27.4f}  {x.std():12.4f}  {mmd_rbf(x, data, 20).statistic:11.2e}")

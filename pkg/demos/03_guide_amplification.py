"""Small guide errors grow after classifier-free combination.

A guide that is 0.9999-similar to the truth is pushed through
(1 + w) guide - w uncond. When the combined prediction is shorter than
(1 + w) times the guide, an error orthogonal to both inputs is magnified.
"""

import numpy as np

from mpcguide.guidance import cfg_combine
from mpcguide.metrics import cosine

rng = np.random.default_rng(0)
a = rng.standard_normal(16)


def perturbed(a, u, cos):
    basis, _ = np.linalg.qr(np.stack([a, u], axis=1))
    p = rng.standard_normal(a.shape)
    p -= basis @ (basis.T @ p)
    return a + np.linalg.norm(a) * np.tan(np.arccos(cos)) * p / np.linalg.norm(p)


print(" w   |A|/((1+w)|a|)  cos before  cos after")
for w in (0.0, 1.0, 2.0, 5.0):
    for closeness in (0.0, 0.5, 0.9):
        u = closeness * a + (1 - closeness) * rng.standard_normal(16)
        a_hat = perturbed(a, u, 0.9999)
        A = cfg_combine(a, u, w)
        ratio = np.linalg.norm(A) / ((1 + w) * np.linalg.norm(a))
        print(f"{w:3.0f}   {ratio:12.3f}   {cosine(a_hat, a):.6f}   {cosine(cfg_combine(a_hat, u, w), A):.6f}")

"""Closed-form ground truth for isotropic Gaussian-mixture data.

For component ``c`` with mean ``mu_c`` and std ``s_c``, the noised marginal at
step ``t`` is ``N(alpha_t mu_c, v_c I)`` with ``v_c = alpha_t^2 s_c^2 + sigma_t^2``
and the optimal noise prediction is ``sigma_t (z - alpha_t mu_c) / v_c``.
The unconditional predictor is the posterior-weighted average of these.

Every quantity is written with tensor ops so the oracle can stand in for a
trained network inside differentiable denoising chains.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .schedule import NoiseSchedule


def _batch(z) -> tuple[Tensor, bool]:
    z = as_tensor(z)
    if z.ndim == 1:
        return z.reshape(1, -1), True
    return z, False


def class_weights(c, n: int, num_classes: int) -> np.ndarray | None:
    """One-hot rows for class ids; ``None`` means the unconditional branch."""
    if c is None:
        return None
    c = np.asarray(c)
    if c.ndim == 0:
        c = np.full(n, int(c))
    if c.shape != (n,):
        raise ValueError(f"class ids shape {c.shape} does not match batch of {n}")
    if (c < 0).any() or (c >= num_classes).any():
        raise ValueError(f"unknown class id in {np.unique(c).tolist()}; valid ids are 0..{num_classes - 1}")
    return np.eye(num_classes)[c]


class AnalyticMixture:
    def __init__(self, means, stds, class_probs, sched: NoiseSchedule):
        self.means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        self.stds = np.broadcast_to(np.asarray(stds, dtype=np.float64), (len(self.means),)).copy()
        self.class_probs = np.asarray(class_probs, dtype=np.float64)
        self.sched = sched

    @property
    def num_classes(self) -> int:
        return len(self.means)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def _terms(self, z: Tensor, t: int):
        t = self.sched.check_step(t)
        a, s = self.sched.alpha[t], self.sched.sigma[t]
        var = a * a * self.stds**2 + s * s  # (C,)
        n, d = z.shape
        diff = z.reshape(n, 1, d) - a * self.means  # (n, C, d)
        logp = (
            np.log(self.class_probs)
            - 0.5 * d * np.log(2 * np.pi * var)
            - ad.square(diff).sum(axis=-1) * (0.5 / var)
        )  # (n, C)
        log_post = logp - ad.logsumexp(logp, axis=1, keepdims=True)
        return s, var, diff, logp, log_post

    def optimal_eps(self, z, t: int, c=None) -> Tensor:
        """Exact minimizer of the noise-prediction loss; ``c=None`` is unconditional."""
        z, squeeze = _batch(z)
        s, var, diff, _, log_post = self._terms(z, t)
        per_class = diff * (s / var)[:, None]
        w = class_weights(c, z.shape[0], self.num_classes)
        w = ad.exp(log_post) if w is None else Tensor(w)
        out = (per_class * w.reshape(*w.shape, 1)).sum(axis=1)
        return out.reshape(-1) if squeeze else out

    eps = optimal_eps

    def true_guide(self, z, t: int, c) -> Tensor:
        if c is None:
            raise ValueError("true_guide needs a class")
        return self.optimal_eps(z, t, c)

    def log_posterior(self, z, t: int) -> Tensor:
        """Per-class log p_t(c | z), shape (n, C)."""
        z, squeeze = _batch(z)
        out = self._terms(z, t)[4]
        return out.reshape(-1) if squeeze else out

    def class_log_prob(self, z, t: int, c) -> Tensor:
        """log p_t(c | z) for the requested class of each row."""
        z, squeeze = _batch(z)
        lp = self._terms(z, t)[4]
        out = (lp * class_weights(c, z.shape[0], self.num_classes)).sum(axis=1)
        return out.reshape(()) if squeeze else out

    def marginal_logpdf(self, z, t: int) -> np.ndarray:
        z, squeeze = _batch(z)
        out = ad.logsumexp(self._terms(z, t)[3], axis=1).data
        return out[0] if squeeze else out

    def grad_log_posterior(self, z, t: int, c) -> np.ndarray:
        """Closed-form gradient of log p_t(c | z) with respect to z."""
        z, squeeze = _batch(np.asarray(as_tensor(z).data))
        _, var, diff, _, log_post = self._terms(z, t)
        score = -diff.data / var[:, None]  # per-component score of log N
        post = np.exp(log_post.data)
        onehot = class_weights(c, z.shape[0], self.num_classes)
        out = np.einsum("nc,ncd->nd", onehot, score) - np.einsum("nc,ncd->nd", post, score)
        return out[0] if squeeze else out

    def sample(self, n: int, rng: np.random.Generator, label: int | None = None):
        if label is None:
            labels = rng.choice(self.num_classes, size=n, p=self.class_probs)
        else:
            labels = np.full(n, int(label))
        x = self.means[labels] + self.stds[labels, None] * rng.standard_normal((n, self.dim))
        return x, labels

    def bayes_classify(self, x) -> np.ndarray:
        """Argmax class under the clean-data (t = 0) posterior."""
        return np.argmax(as_tensor(self.log_posterior(np.atleast_2d(x), 0)).data, axis=1)

"""Small MLP noise predictors and noised classifiers, trained with Adam.

One network serves both branches of classifier-free guidance: class ids
``0..C-1`` select a learned class embedding and ``None`` (or ``-1`` inside a
batch of ids) selects the dedicated null embedding.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, as_tensor, backward
from .data import MixtureDataset
from .schedule import NoiseSchedule, make_schedule

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
NULL_CLASS = -1


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 20_000
    batch_size: int = 256
    lr: float = 1e-3
    drop_prob: float = 0.1
    hidden: int = 128
    depth: int = 3
    time_freqs: int = 8
    class_embed_dim: int = 16
    seed: int = 0
    log_every: int = 100
    lr_decay: bool = True
    precondition: bool = True

    def __post_init__(self):
        if not 0.0 <= self.drop_prob <= 1.0:
            raise ValueError(f"drop_prob must lie in [0, 1], got {self.drop_prob}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1 or self.hidden < 1 or self.depth < 1:
            raise ValueError("batch_size, hidden and depth must be positive")


def time_embedding(t, T: int, n_freqs: int) -> np.ndarray:
    """Sinusoidal features of the fractional time ``t / T``, shape (n, 2 * n_freqs)."""
    tau = np.atleast_1d(np.asarray(t, dtype=np.float64)) / T
    freqs = np.pi * np.geomspace(1.0, 64.0, n_freqs)
    ang = tau[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _init_mlp(rng: np.random.Generator, sizes: list[int]) -> dict[str, np.ndarray]:
    params = {}
    for i, (fan_in, fan_out) in enumerate(zip(sizes, sizes[1:])):
        params[f"W{i}"] = rng.standard_normal((fan_in, fan_out)) * np.sqrt(1.0 / fan_in)
        params[f"b{i}"] = np.zeros(fan_out)
    return params


def _mlp(params: dict, h: Tensor, n_layers: int) -> Tensor:
    for i in range(n_layers):
        h = h @ params[f"W{i}"] + params[f"b{i}"]
        if i < n_layers - 1:
            h = ad.silu(h)
    return h


def _rows(z) -> tuple[Tensor, bool]:
    z = as_tensor(z)
    return (z.reshape(1, -1), True) if z.ndim == 1 else (z, False)


def _broadcast_t(t, n: int, sched: NoiseSchedule) -> np.ndarray:
    t = np.asarray(t)
    if t.ndim == 0:
        sched.check_step(int(t))
        return np.full(n, int(t))
    if t.min() < 0 or t.max() > sched.T:
        raise ValueError(f"steps outside [0, {sched.T}]")
    return t


class _Network:
    kind = ""

    def __init__(self, sched: NoiseSchedule, dim: int, num_classes: int, cfg: TrainConfig,
                 params: dict | None = None, data_std: float = 1.0):
        self.sched = sched
        self.dim = dim
        self.num_classes = num_classes
        self.cfg = cfg
        self.data_std = float(data_std)
        self.params = params if params is not None else self._init_params(np.random.default_rng(cfg.seed))
        self.history: list[tuple[int, float]] = []

    @property
    def n_layers(self) -> int:
        return self.cfg.depth + 1

    def _scales(self, t: np.ndarray):
        """Per-row (input scale, skip, output scale) for the preconditioned net.

        With ``v = alpha^2 s^2 + sigma^2`` the noise prediction is
        ``sigma z / v - (alpha s / sqrt(v)) F(z / sqrt(v))``: exact for Gaussian
        data of std ``s`` when ``F = 0``, and network error is damped by
        ``alpha`` at high noise where the class signal is weakest.
        """
        a, sg = self.sched.alpha[t], self.sched.sigma[t]
        if not self.cfg.precondition:
            one = np.ones_like(a)
            return one, np.zeros_like(a), one
        sd = self.data_std
        v = a * a * sd * sd + sg * sg
        return 1 / np.sqrt(v), sg / v, -a * sd / np.sqrt(v)

    def _init_params(self, rng) -> dict:
        raise NotImplementedError

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k]).tobytes())
        return h.hexdigest()


class EpsModel(_Network):
    """Noise predictor ``eps(z, t, c)`` with a null-class unconditional branch."""

    kind = "eps"

    def _init_params(self, rng) -> dict:
        cfg = self.cfg
        in_dim = self.dim + 2 * cfg.time_freqs + cfg.class_embed_dim
        params = _init_mlp(rng, [in_dim] + [cfg.hidden] * cfg.depth + [self.dim])
        # row 0 is the null embedding
        params["class_embed"] = rng.standard_normal((self.num_classes + 1, cfg.class_embed_dim))
        return params

    def _class_onehot(self, c, n: int) -> np.ndarray:
        if c is None:
            ids = np.full(n, NULL_CLASS)
        else:
            ids = np.asarray(c)
            if ids.ndim == 0:
                ids = np.full(n, int(ids))
            if ids.shape != (n,):
                raise ValueError(f"class ids shape {ids.shape} does not match batch of {n}")
        if (ids < NULL_CLASS).any() or (ids >= self.num_classes).any():
            raise ValueError(f"unknown class id in {np.unique(ids).tolist()}; "
                             f"valid ids are 0..{self.num_classes - 1} or None")
        return np.eye(self.num_classes + 1)[ids + 1]

    def forward(self, params: dict, z, t, c) -> Tensor:
        z, squeeze = _rows(z)
        n = z.shape[0]
        t = _broadcast_t(t, n, self.sched)
        c_in, c_skip, c_out = (x[:, None] for x in self._scales(t))
        temb = time_embedding(t, self.sched.T, self.cfg.time_freqs)
        cemb = Tensor(self._class_onehot(c, n)) @ params["class_embed"]
        out = _mlp(params, ad.concat([z * c_in, Tensor(temb), cemb], axis=1), self.n_layers)
        out = z * c_skip + out * c_out
        return out.reshape(-1) if squeeze else out

    def eps(self, z, t, c=None) -> Tensor:
        return self.forward(self.params, z, t, c)


class NoisedClassifier(_Network):
    """Time-conditioned classifier returning normalized log-probabilities."""

    kind = "classifier"

    def _init_params(self, rng) -> dict:
        cfg = self.cfg
        in_dim = self.dim + 2 * cfg.time_freqs
        return _init_mlp(rng, [in_dim] + [cfg.hidden] * cfg.depth + [self.num_classes])

    def forward(self, params: dict, z, t) -> Tensor:
        z, squeeze = _rows(z)
        t = _broadcast_t(t, z.shape[0], self.sched)
        c_in = self._scales(t)[0][:, None]
        temb = time_embedding(t, self.sched.T, self.cfg.time_freqs)
        logits = _mlp(params, ad.concat([z * c_in, Tensor(temb)], axis=1), self.n_layers)
        out = logits - ad.logsumexp(logits, axis=1, keepdims=True)
        return out.reshape(-1) if squeeze else out

    def log_probs(self, z, t) -> Tensor:
        return self.forward(self.params, z, t)

    def class_log_prob(self, z, t, c) -> Tensor:
        z, squeeze = _rows(z)
        ids = np.asarray(c)
        if ids.ndim == 0:
            ids = np.full(z.shape[0], int(ids))
        if (ids < 0).any() or (ids >= self.num_classes).any():
            raise ValueError(f"unknown class id in {np.unique(ids).tolist()}")
        out = (self.log_probs(z, t) * np.eye(self.num_classes)[ids]).sum(axis=1)
        return out.reshape(()) if squeeze else out


def eval_eps(model: EpsModel, z, t: int, c=None) -> Tensor:
    return model.eps(z, t, c)


class Adam:
    def __init__(self, params: dict, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.step_count = 0

    def step(self, params: dict, grads: dict, lr: float | None = None) -> None:
        self.step_count += 1
        lr = self.lr if lr is None else lr
        c1 = 1 - self.b1**self.step_count
        c2 = 1 - self.b2**self.step_count
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params[k] -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def _lr_at(cfg: TrainConfig, step: int) -> float:
    if not cfg.lr_decay:
        return cfg.lr
    return cfg.lr * 0.5 * (1 + np.cos(np.pi * step / cfg.steps))


def _fit(net: _Network, loss_fn, rng: np.random.Generator) -> None:
    cfg = net.cfg
    opt = Adam(net.params, cfg.lr)
    names = sorted(net.params)
    for step in range(cfg.steps):
        with Tape() as tape:
            watched = {k: tape.watch(net.params[k]) for k in names}
            loss = loss_fn(watched, rng)
        value = float(loss.data)
        if not np.isfinite(value):
            raise FloatingPointError(
                f"non-finite {net.kind} loss {value} at step {step}; "
                f"last logged losses {net.history[-3:]}")
        grads = dict(zip(names, backward(loss, [watched[k] for k in names])))
        opt.step(net.params, grads, _lr_at(cfg, step))
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            net.history.append((step, value))
            log.debug("%s step %d loss %.5f", net.kind, step, value)


def data_rms(data: MixtureDataset) -> float:
    """Root-mean-square data coordinate, used as the preconditioning scale."""
    return float(np.sqrt(np.mean(data.x**2)))


def _batch(data: MixtureDataset, cfg: TrainConfig, sched: NoiseSchedule, rng, t_min: int):
    idx = rng.integers(0, len(data.x), cfg.batch_size)
    t = rng.integers(t_min, sched.T + 1, cfg.batch_size)
    eps = rng.standard_normal((cfg.batch_size, data.dim))
    z = sched.alpha[t, None] * data.x[idx] + sched.sigma[t, None] * eps
    return z, t, eps, data.labels[idx]


def train_eps(data: MixtureDataset, sched: NoiseSchedule, cfg: TrainConfig = TrainConfig()) -> EpsModel:
    """Fit a noise predictor on uniformly drawn steps ``1..T``.

    Each example's label is replaced by the null class with probability
    ``cfg.drop_prob``.
    """
    if len(data.x) == 0:
        raise ValueError("dataset has no samples; call with_samples() first")
    model = EpsModel(sched, data.dim, data.num_classes, cfg, data_std=data_rms(data))
    rng = np.random.default_rng([cfg.seed, 1])
    model.null_fraction = 0.0
    counts = [0, 0]

    def loss_fn(params, rng):
        z, t, eps, labels = _batch(data, cfg, sched, rng, t_min=1)
        drop = rng.random(cfg.batch_size) < cfg.drop_prob
        counts[0] += int(drop.sum())
        counts[1] += cfg.batch_size
        labels = np.where(drop, NULL_CLASS, labels)
        pred = model.forward(params, z, t, labels)
        per_row = ad.square(pred - eps).sum(axis=1)
        return (per_row * sched.loss_weight[t]).mean()

    _fit(model, loss_fn, rng)
    model.null_fraction = counts[0] / counts[1]
    return model


def train_classifier(data: MixtureDataset, sched: NoiseSchedule, cfg: TrainConfig = TrainConfig()) -> NoisedClassifier:
    """Fit ``p_t(c | z_t)`` by cross-entropy on noised samples at steps ``0..T``."""
    if len(data.x) == 0:
        raise ValueError("dataset has no samples; call with_samples() first")
    model = NoisedClassifier(sched, data.dim, data.num_classes, cfg, data_std=data_rms(data))
    rng = np.random.default_rng([cfg.seed, 2])
    onehot = np.eye(data.num_classes)

    def loss_fn(params, rng):
        z, t, _, labels = _batch(data, cfg, sched, rng, t_min=0)
        return -(model.forward(params, z, t) * onehot[labels]).sum(axis=1).mean()

    _fit(model, loss_fn, rng)
    return model


def eps_loss(eps_fn, data: MixtureDataset, sched: NoiseSchedule, n: int, rng: np.random.Generator,
             conditional: bool = False) -> float:
    """Monte Carlo estimate of the weighted noise-prediction loss for ``eps_fn(z, t, c)``."""
    idx = rng.integers(0, len(data.x), n)
    t = rng.integers(1, sched.T + 1, n)
    eps = rng.standard_normal((n, data.dim))
    z = sched.alpha[t, None] * data.x[idx] + sched.sigma[t, None] * eps
    total = 0.0
    for step in np.unique(t):
        rows = t == step
        c = data.labels[idx][rows] if conditional else None
        pred = as_tensor(eps_fn(z[rows], int(step), c)).data
        total += float((sched.loss_weight[step] * ((pred - eps[rows]) ** 2).sum(axis=1)).sum())
    return total / n


# checkpoints

def save_checkpoint(path, model: _Network, extra: dict | None = None) -> None:
    """Write a versioned ``.npz`` checkpoint; weights round-trip bit-exactly."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "kind": model.kind,
        "schedule": {"kind": model.sched.kind, "T": model.sched.T,
                     "loss_weight": model.sched.loss_weight.tolist()},
        "dim": model.dim,
        "data_std": model.data_std,
        "num_classes": model.num_classes,
        "train_config": asdict(model.cfg),
        "seed": model.cfg.seed,
        "history": model.history,
        "extra": extra or {},
    }
    arrays = {f"param/{k}": v for k, v in model.params.items()}
    buf = io.BytesIO()
    np.savez(buf, meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8), **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def read_checkpoint_meta(path) -> dict:
    with np.load(path) as npz:
        return json.loads(npz["meta"].tobytes().decode())


def load_checkpoint(path) -> _Network:
    with np.load(path) as npz:
        meta = json.loads(npz["meta"].tobytes().decode())
        params = {k.split("/", 1)[1]: npz[k].copy() for k in npz.files if k.startswith("param/")}
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta.get('version')!r}")
    s = meta["schedule"]
    sched = make_schedule(s["kind"], s["T"], loss_weight=s["loss_weight"])
    cls = {"eps": EpsModel, "classifier": NoisedClassifier}[meta["kind"]]
    model = cls(sched, meta["dim"], meta["num_classes"], TrainConfig(**meta["train_config"]), params,
                data_std=meta["data_std"])
    model.history = [tuple(h) for h in meta["history"]]
    return model

"""TOML run configuration: one file describes data, model, training and studies.

Every section is optional; missing keys fall back to :data:`DEFAULTS`.
Unknown sections or keys are rejected so typos cannot silently change a run.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import tomli

from .data import MixtureDataset, circle_mixture, single_gaussian, sphere_mixture
from .guidance import GuidanceConfig
from .models import TrainConfig
from .samplers import StepPlan
from .schedule import NoiseSchedule, make_schedule

DEFAULTS: dict = {
    "seed": 0,
    "schedule": {"kind": "scaled-linear", "T": 100, "loss_weight": 1.0},  # scalar or T+1 list
    "data": {"kind": "sphere", "num_classes": 4, "dim": 32, "radius": 4.0, "std": 0.3,
             "mean": [1.0, -0.5], "n_samples": 50_000},
    "model": {"hidden": 128, "depth": 3, "time_freqs": 8, "class_embed_dim": 16, "precondition": True},
    "training": {"steps": 20_000, "batch_size": 256, "lr": 1e-3, "drop_prob": 0.1, "lr_decay": True,
                 "log_every": 100, "classifier": True, "classifier_steps": 5_000},
    "guidance": {"w": 2.0, "k_denoise": 5, "delta_frac": 0.125, "rescale": True,
                 "classifier_scale_mode": "sigma-scaled"},
    "sampling": {"method": "ddim", "steps": 50},
    "study": {
        "t_fracs": [0.2, 0.4, 0.6, 0.8, 1.0],
        "delta_fracs": [round(0.1 * i, 1) for i in range(10)],
        "replicates": 10,
        "guide_kinds": ["mpc-conditional"],
        "classes": [],  # empty means every class
        "n_seeds": 64,
        "method": "ddim",
        "mmd_permutations": 200,
        "arms": ["mpc", "reference", "baseline", "gold"],
        "init_steps": 20,
    },
    "plans": {},
}

DATA_KINDS = ("sphere", "circle", "single")


class ConfigError(ValueError):
    """Invalid configuration; the message names the file and offending line or key."""


def _merge(base: dict, override: dict, where: str, source: str) -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        path = f"{where}.{key}" if where else key
        if key not in base:
            raise ConfigError(f"{source}: unknown key {path!r}")
        if isinstance(base[key], dict) and key != "plans":
            if not isinstance(val, dict):
                raise ConfigError(f"{source}: {path!r} must be a table")
            out[key] = _merge(base[key], val, path, source)
        else:
            out[key] = val
    return out


def parse_config(text: str, source: str = "<string>") -> dict:
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        # tomli reports "(at line L, column C)"
        raise ConfigError(f"{source}: {exc}") from None
    cfg = _merge(DEFAULTS, raw, "", source)
    validate(cfg, source)
    return cfg


def load_config(path) -> dict:
    """Read a TOML config; ``None`` gives the defaults."""
    if path is None:
        return copy.deepcopy(DEFAULTS)
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(), str(path))


def validate(cfg: dict, source: str = "<config>") -> None:
    try:
        build_schedule(cfg)
        build_train_config(cfg)
        build_guidance(cfg)
        if cfg["data"]["kind"] not in DATA_KINDS:
            raise ValueError(f"data.kind must be one of {DATA_KINDS}, got {cfg['data']['kind']!r}")
        for name, spec in cfg["plans"].items():
            plan_from_table(spec, cfg["schedule"]["T"], name)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{source}: {exc}") from None


def config_hash(cfg: dict) -> str:
    """Stable digest of a resolved config (key order does not matter)."""
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def build_schedule(cfg: dict) -> NoiseSchedule:
    s = cfg["schedule"]
    return make_schedule(s["kind"], s["T"], loss_weight=s["loss_weight"])


def build_dataset(cfg: dict, with_samples: bool = True) -> MixtureDataset:
    import numpy as np

    d = cfg["data"]
    if d["kind"] == "sphere":
        ds = sphere_mixture(d["num_classes"], d["dim"], d["radius"], d["std"], seed=cfg["seed"])
    elif d["kind"] == "circle":
        ds = circle_mixture(d["num_classes"], d["radius"], d["std"])
    else:
        ds = single_gaussian(d["mean"], d["std"])
    if with_samples:
        ds = ds.with_samples(d["n_samples"], np.random.default_rng([cfg["seed"], 7]))
    return ds


def build_train_config(cfg: dict, classifier: bool = False) -> TrainConfig:
    m, tr = cfg["model"], cfg["training"]
    return TrainConfig(
        steps=tr["classifier_steps"] if classifier else tr["steps"],
        batch_size=tr["batch_size"], lr=tr["lr"], drop_prob=tr["drop_prob"],
        hidden=m["hidden"], depth=m["depth"], time_freqs=m["time_freqs"],
        class_embed_dim=m["class_embed_dim"], seed=cfg["seed"], log_every=tr["log_every"],
        lr_decay=tr["lr_decay"], precondition=m["precondition"],
    )


def build_guidance(cfg: dict) -> GuidanceConfig:
    g = cfg["guidance"]
    if not 0.0 <= g["delta_frac"] <= 1.0:
        raise ValueError(f"guidance.delta_frac must lie in [0, 1], got {g['delta_frac']}")
    return GuidanceConfig(w=float(g["w"]), k_denoise=int(g["k_denoise"]), rescale=bool(g["rescale"]),
                          classifier_scale_mode=g["classifier_scale_mode"])


def plan_from_table(spec: dict, T: int, name: str = "plan") -> StepPlan:
    """Build a StepPlan from ``{fractions|times, modes, start, T}``.

    ``T``, when given, must match the schedule so integer plans are not
    silently reinterpreted on a different grid.
    """
    allowed = {"fractions", "times", "modes", "start", "T"}
    unknown = set(spec) - allowed
    if unknown:
        raise ValueError(f"plan {name!r}: unknown keys {sorted(unknown)}")
    if "T" in spec and int(spec["T"]) != T:
        raise ValueError(f"plan {name!r} was written for T={spec['T']} but the schedule has T={T}")
    modes = tuple(spec.get("modes", ()))
    if ("fractions" in spec) == ("times" in spec):
        raise ValueError(f"plan {name!r} needs exactly one of 'fractions' or 'times'")
    if "fractions" in spec:
        return StepPlan.from_fractions(spec["fractions"], T, modes)
    times = [int(t) for t in spec["times"]]
    if max(times + [int(spec.get("start", 0))]) > T:
        raise ValueError(f"plan {name!r} has times beyond T={T}")
    return StepPlan(tuple(times), modes, spec.get("start"))


def load_plan(path, T: int) -> StepPlan:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"plan file not found: {path}")
    try:
        spec = tomli.loads(path.read_text())
        return plan_from_table(spec, T, path.name)
    except (tomli.TOMLDecodeError, ValueError, TypeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None

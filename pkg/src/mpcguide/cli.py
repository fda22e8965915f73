"""Command-line entry point: ``mpcguide {train,sample,study,inspect-checkpoint}``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
Outputs land in ``--out`` or, by default, under ``$MPCGUIDE_OUT`` (``./runs``
when unset) in a directory named after the command and config hash.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io
from .config import (ConfigError, build_dataset, build_guidance, build_schedule, build_train_config,
                     config_hash, load_config, load_plan)
from .experiments import (CombinedBackend, RestrictedConfig, SimilarityConfig, derive_seeds,
                          prior_latents, restricted_guidance_study, similarity_study)
from .guidance import guided_eps_fn
from .models import load_checkpoint, read_checkpoint_meta, save_checkpoint, train_classifier, train_eps
from .oracle import AnalyticMixture
from .samplers import StepPlan, sample
from .schedule import frac_to_step

log = logging.getLogger("mpcguide")

OUT_ENV = "MPCGUIDE_OUT"
STUDY_KINDS = ("similarity", "restricted")
BACKENDS = ("analytic", "trained")
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _out_dir(args, name: str, cfg: dict) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        out = Path(os.environ.get(OUT_ENV, "runs")) / f"{name}-{config_hash(cfg)[:10]}"
    out.mkdir(parents=True, exist_ok=True)
    return out


# backends


def _checkpoint_paths(path) -> tuple[Path, Path | None]:
    path = Path(path)
    if path.is_dir():
        eps, clf = path / "eps.npz", path / "classifier.npz"
        return eps, clf if clf.is_file() else None
    return path, None


def _load_trained(ckpt, cfg: dict):
    """Checkpointed eps model (plus classifier if present) and the oracle of its data."""
    if ckpt is None:
        raise UsageError("--backend trained needs --ckpt")
    eps_path, clf_path = _checkpoint_paths(ckpt)
    if not eps_path.is_file():
        raise UsageError(f"checkpoint not found: {eps_path}")
    model = load_checkpoint(eps_path)
    if model.sched != build_schedule(cfg):
        raise UsageError(f"checkpoint schedule {model.sched.params()} does not match config "
                         f"{cfg['schedule']}")
    classifier = load_checkpoint(clf_path) if clf_path else None
    data = read_checkpoint_meta(eps_path)["extra"].get("data")
    oracle = AnalyticMixture(data["means"], data["stds"], data["class_probs"], model.sched) if data else None
    return CombinedBackend(model, classifier), oracle


def _resolve(args) -> dict:
    """Config from ``--config``, else the one stored in the checkpoint, else defaults."""
    if getattr(args, "config", None):
        return load_config(args.config)
    ckpt = getattr(args, "ckpt", None)
    if ckpt:
        eps_path, _ = _checkpoint_paths(ckpt)
        if eps_path.is_file():
            stored = read_checkpoint_meta(eps_path)["extra"].get("config")
            if stored:
                return stored
    return load_config(None)


def _backend(args, cfg: dict):
    if args.backend == "analytic":
        oracle = build_dataset(cfg, with_samples=False).analytic(build_schedule(cfg))
        return oracle, oracle
    return _load_trained(args.ckpt, cfg)


# commands


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.steps is not None:
        cfg["training"]["steps"] = args.steps
    out = _out_dir(args, "train", cfg)
    sched = build_schedule(cfg)
    data = build_dataset(cfg)
    extra = {"data": data.params(), "config": cfg, "config_hash": config_hash(cfg)}
    model = train_eps(data, sched, build_train_config(cfg))
    save_checkpoint(out / "eps.npz", model, extra)
    history = [{"model": "eps", "step": s, "loss": v} for s, v in model.history]
    fingerprints = {"eps": model.fingerprint()}
    if cfg["training"]["classifier"] and data.num_classes > 1:
        clf = train_classifier(data, sched, build_train_config(cfg, classifier=True))
        save_checkpoint(out / "classifier.npz", clf, extra)
        history += [{"model": "classifier", "step": s, "loss": v} for s, v in clf.history]
        fingerprints["classifier"] = clf.fingerprint()
    io.write_csv(out / "history.csv", "history", history)
    io.write_manifest(out / "manifest.json", command="train", config=cfg, config_hash=config_hash(cfg),
                      seed=cfg["seed"], fingerprints=fingerprints, null_fraction=model.null_fraction)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_sample(args) -> int:
    cfg = _resolve(args)
    if args.analytic:
        args.backend = "analytic"
    backend, _ = _backend(args, cfg)
    sched = backend.sched
    if args.plan and args.steps:
        raise UsageError("give either --plan or --steps, not both")
    if args.plan:
        plan = load_plan(args.plan, sched.T)
    else:
        plan = StepPlan.uniform(args.steps or cfg["sampling"]["steps"], sched)
    if args.klass is None:
        if any(m != "unconditional" for m in plan.modes) and args.plan:
            raise UsageError("plan has guided steps but no --class was given")
        plan = StepPlan(plan.times, ["unconditional"] * len(plan.times), plan.start)
    elif not 0 <= args.klass < backend.num_classes:
        raise UsageError(f"--class {args.klass} outside 0..{backend.num_classes - 1}")

    gcfg = build_guidance(cfg)
    if args.w is not None:
        gcfg = replace(gcfg, w=args.w)
    gcfg = gcfg.with_delta(frac_to_step(cfg["guidance"]["delta_frac"], sched))
    seeds = derive_seeds(cfg["seed"], args.seeds)
    classes = np.full(len(seeds), -1 if args.klass is None else args.klass)
    z_T = prior_latents(seeds, backend.dim)
    fn = guided_eps_fn(backend, None if args.klass is None else classes, gcfg)
    traj = sample(z_T, plan, fn, sched, args.method or cfg["sampling"]["method"])

    run = {**cfg, "sample": {"class": args.klass, "w": gcfg.w, "n_seeds": args.seeds,
                             "plan": {"times": list(plan.times), "modes": list(plan.modes)},
                             "backend": args.backend}}
    out = _out_dir(args, "sample", run)
    io.write_samples(out / "samples.csv", traj.final, classes, seeds)
    if args.trajectories:
        io.write_trajectory(out / "trajectory.csv", traj, classes, seeds)
    io.write_manifest(out / "manifest.json", command="sample", config=run, config_hash=config_hash(run),
                      seed=cfg["seed"], seeds=seeds)
    print(f"wrote {out / 'samples.csv'} ({len(seeds)} rows)")
    return EXIT_OK


def _similarity(args, cfg, backend, oracle, out: Path, chash: str) -> dict:
    if oracle is None:
        raise UsageError("similarity study needs ground truth; the checkpoint stores no data parameters")
    st = cfg["study"]
    gcfg = build_guidance(cfg)
    scfg = SimilarityConfig(
        t_fracs=tuple(st["t_fracs"]), delta_fracs=tuple(st["delta_fracs"]), replicates=st["replicates"],
        classes=tuple(st["classes"]) or None, guide_kinds=tuple(st["guide_kinds"]), guidance=gcfg,
        seed=cfg["seed"], init_steps=st["init_steps"], threads=args.threads)
    rows = similarity_study(backend, oracle, scfg)
    for r in rows:
        r.update(w=gcfg.w, k_denoise=gcfg.k_denoise, config_hash=chash)
    io.write_csv(out / "similarity.csv", "similarity", rows)

    blocks = []
    for kind in scfg.guide_kinds:
        for tf in scfg.t_fracs:
            lines = []
            for df in scfg.delta_fracs:
                v = np.array([r["cosine"] for r in rows
                              if r["guide_kind"] == kind and r["t_frac"] == tf and r["delta_frac"] == df])
                if len(v) and np.isfinite(v).any():
                    q = np.nanpercentile(v, [0, 25, 50, 75, 100])
                    lines.append((df, q[2], q[1], q[3], q[0], q[4]))
            blocks.append((f"{kind} t_frac={tf}", lines))
    io.write_plot_blocks(out / "similarity_median.dat",
                         "delta_frac median q25 q75 min max (raw values for violins: similarity.csv)", blocks)
    return {"seeds": sorted({r["seed"] for r in rows}), "failed_rows": sum(bool(r["error"]) for r in rows)}


def _restricted(args, cfg, backend, oracle, out: Path, chash: str) -> dict:
    st = cfg["study"]
    rcfg = RestrictedConfig(guidance=build_guidance(cfg), delta_frac=cfg["guidance"]["delta_frac"],
                            method=st["method"], mmd_permutations=st["mmd_permutations"],
                            mmd_seed=cfg["seed"], arms=tuple(st["arms"]))
    classes = st["classes"] or list(range(backend.num_classes))
    seeds = derive_seeds(cfg["seed"], st["n_seeds"])
    res = restricted_guidance_study(backend, classes, seeds, rcfg, oracle)
    for arm, x in res.samples.items():
        io.write_samples(out / f"arm_{arm}.csv", x, res.classes, res.seeds)
    io.write_csv(out / "summary.csv", "summary", res.summary)
    if res.divergence is not None:
        times = res.trajectories["mpc"].times
        io.write_csv(out / "divergence.csv", "divergence",
                     [{"t": int(t), "median_l2": float(np.median(d)), "max_l2": float(np.max(d))}
                      for t, d in zip(times, res.divergence)])
    blocks = [(arm, [(c, s, *x[:2]) for c, s, x in zip(res.classes, res.seeds, res.samples[arm])])
              for arm in rcfg.arms if arm in res.samples]
    io.write_plot_blocks(out / "samples_grid.dat", "class seed x0 x1 (one block per arm)", blocks)
    return {"seeds": [int(s) for s in seeds], "arm_errors": res.errors, "z_T_hash": res.z_T_hash}


def cmd_study(args) -> int:
    cfg = _resolve(args)
    backend, oracle = _backend(args, cfg)
    chash = config_hash(cfg)
    out = _out_dir(args, f"study-{args.kind}-{args.backend}", cfg)
    runner = _similarity if args.kind == "similarity" else _restricted
    info = runner(args, cfg, backend, oracle, out, chash)
    fp = backend.eps_model.fingerprint() if isinstance(backend, CombinedBackend) else "analytic"
    io.write_manifest(out / "manifest.json", command="study", study=args.kind, backend=args.backend,
                      config=cfg, config_hash=chash, seed=cfg["seed"], model_fingerprint=fp, **info)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    eps_path, clf_path = _checkpoint_paths(args.path)
    paths = [p for p in (eps_path, clf_path) if p is not None]
    if not eps_path.is_file():
        raise UsageError(f"checkpoint not found: {eps_path}")
    report = {}
    for p in paths:
        meta = read_checkpoint_meta(p)
        model = load_checkpoint(p)
        report[str(p)] = {
            "kind": meta["kind"], "version": meta["version"], "schedule": meta["schedule"]["kind"],
            "T": meta["schedule"]["T"], "dim": meta["dim"], "num_classes": meta["num_classes"],
            "train_config": meta["train_config"], "final_loss": meta["history"][-1][1] if meta["history"] else None,
            "fingerprint": model.fingerprint(), "config_hash": meta["extra"].get("config_hash"),
        }
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mpcguide", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="TOML config file")
        sp.add_argument("--out", help=f"output directory (default under ${OUT_ENV})")
        sp.add_argument("--threads", type=int, default=1, help="worker cap")

    t = sub.add_parser("train", help="train the eps model and noised classifier")
    common(t)
    t.add_argument("--steps", type=int, help="override training.steps")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="draw samples with a step plan")
    common(s)
    s.add_argument("--analytic", action="store_true", help="use the analytic oracle backend")
    s.add_argument("--backend", choices=BACKENDS, default="trained")
    s.add_argument("--ckpt", help="checkpoint file or training output directory")
    s.add_argument("--class", dest="klass", type=int, help="target class (omit for unconditional)")
    s.add_argument("--steps", type=int, help="uniform plan with this many steps")
    s.add_argument("--plan", help="TOML step plan with fractions/times and modes")
    s.add_argument("--w", type=float, help="guidance weight")
    s.add_argument("--seeds", type=int, default=64, help="number of seeds")
    s.add_argument("--method", choices=("ddim", "plms"))
    s.add_argument("--trajectories", action="store_true", help="also write every intermediate latent")
    s.set_defaults(func=cmd_sample)

    st = sub.add_parser("study", help="run a similarity or restricted-guidance study")
    common(st)
    st.add_argument("kind", choices=STUDY_KINDS)
    st.add_argument("--backend", choices=BACKENDS, default="analytic")
    st.add_argument("--ckpt", help="checkpoint file or training output directory")
    st.set_defaults(func=cmd_study)

    i = sub.add_parser("inspect-checkpoint", help="print checkpoint metadata")
    i.add_argument("path")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "threads", 1) < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # any failure after validation is a runtime error
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

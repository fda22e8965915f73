"""Versioned CSV tables, gnuplot-style plot data and run manifests.

Every CSV starts with a ``# schema: <name> v<version>`` comment line followed
by a header in a fixed column order. Floats are written with 17 significant
digits so values survive a text round-trip bit-exactly.
"""

from __future__ import annotations

import csv
import json
import platform
import sys
from pathlib import Path

import numpy as np

SCHEMAS: dict[str, tuple[int, tuple[str, ...]]] = {
    "similarity": (1, ("t_frac", "delta_frac", "class", "replicate", "guide_kind", "cosine",
                       "t", "delta", "seed", "w", "k_denoise", "config_hash", "error")),
    "history": (1, ("model", "step", "loss")),
    "summary": (1, ("arm", "n_steps", "mmd_to_gold", "mmd_null95_to_gold", "median_l2_to_gold",
                    "mmd_to_reference", "mmd_null95_to_reference", "median_l2_to_reference",
                    "class_purity", "error")),
    "divergence": (1, ("t", "median_l2", "max_l2")),
}


def fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)


def write_csv(path, schema: str, rows, columns=None, version: int | None = None) -> Path:
    """Write dict rows under a registered schema (or an ad-hoc column list)."""
    if columns is None:
        version, columns = SCHEMAS[schema]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema: {schema} v{version or 1}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([fmt(row.get(c)) for c in columns])
    return path


def read_csv(path) -> tuple[str, list[dict]]:
    """Return ``(schema line, rows)``; values stay strings."""
    with open(path, newline="") as fh:
        first = fh.readline().strip()
        if not first.startswith("# schema:"):
            raise ValueError(f"{path}: missing schema line")
        return first[len("# schema:"):].strip(), list(csv.DictReader(fh))


def sample_columns(dim: int, trajectory: bool = False) -> tuple[str, ...]:
    head = ("class", "seed") + (("step", "t") if trajectory else ())
    return head + tuple(f"x{i}" for i in range(dim))


def sample_rows(x: np.ndarray, classes, seeds, extra: dict | None = None) -> list[dict]:
    rows = []
    for i, (c, s) in enumerate(zip(classes, seeds)):
        row = {"class": int(c), "seed": int(s), **(extra or {})}
        row.update({f"x{j}": x[i, j] for j in range(x.shape[1])})
        rows.append(row)
    return rows


def write_samples(path, x, classes, seeds) -> Path:
    return write_csv(path, "samples", sample_rows(x, classes, seeds), sample_columns(x.shape[1]), 1)


def write_trajectory(path, traj, classes, seeds) -> Path:
    rows = []
    for k, (t, z) in enumerate(zip(traj.times, traj.latents)):
        rows += sample_rows(z, classes, seeds, {"step": k, "t": int(t)})
    return write_csv(path, "trajectory", rows, sample_columns(traj.latents[0].shape[1], True), 1)


def write_plot_blocks(path, header: str, blocks: list[tuple[str, list[tuple]]]) -> Path:
    """Whitespace-separated numeric blocks separated by two blank lines (gnuplot ``index``)."""
    path = Path(path)
    with open(path, "w") as fh:
        fh.write(f"# {header}\n")
        for i, (title, lines) in enumerate(blocks):
            if i:
                fh.write("\n\n")
            fh.write(f"# block {i}: {title}\n")
            for line in lines:
                fh.write(" ".join(fmt(v) for v in line) + "\n")
    return path


def versions() -> dict:
    import scipy

    from . import __version__

    return {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__,
            "mpcguide": __version__, "platform": sys.platform}


def write_manifest(path, **fields) -> Path:
    path = Path(path)
    payload = {"versions": versions(), **fields}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=fmt) + "\n")
    return path

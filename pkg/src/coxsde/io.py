"""File formats: event CSVs, dataset manifests, trajectory/ensemble exports,
checkpoints, and run directories.

All floats are written with 17 significant digits (full round-trip precision)
and all writes go through a temp-file-then-rename so partially written files
never appear. Run directories carry the resolved configuration and content
hashes of their inputs, so a run can be reproduced bit-identically from what
it leaves on disk. Wall-clock measurements are kept in separate files and are
the only outputs exempt from bit-reproducibility.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .events import EventSequence
from .model import IntensityModel
from .posterior import PathEnsemble
from .sde import TimeGrid, Trajectory

FLOAT_FMT = "%.17g"
CHECKPOINT_VERSION = 1


def atomic_write_text(path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def content_hash(path) -> str:
    """Content-addressed identity of a file (sha256 hex)."""
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def hash_tree(root) -> dict:
    """Per-file content hashes under a directory, keyed by relative path."""
    root = Path(root)
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file():
            out[str(p.relative_to(root))] = content_hash(p)
    return out


# ---------------------------------------------------------------- events

def write_events(events: EventSequence, path):
    lines = [f"# horizon={FLOAT_FMT % events.horizon}", "tau"]
    lines += [FLOAT_FMT % t for t in events.times]
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_events(path) -> EventSequence:
    horizon = None
    times = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                if "horizon=" in line:
                    horizon = float(line.split("horizon=")[1])
                continue
            if line == "tau":
                continue
            times.append(float(line))
    if horizon is None:
        raise ValueError(f"{path}: missing '# horizon=' line")
    return EventSequence(times=np.asarray(times), horizon=horizon)


def write_dataset(sequences: Sequence[EventSequence], outdir, manifest: dict):
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    for i, seq in enumerate(sequences):
        write_events(seq, outdir / f"events_{i:04d}.csv")
    manifest = dict(manifest)
    manifest["n"] = len(sequences)
    atomic_write_text(outdir / "manifest.json",
                      json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_dataset(path):
    path = Path(path)
    with open(path / "manifest.json") as f:
        manifest = json.load(f)
    seqs = [read_events(p) for p in sorted(path.glob("events_*.csv"))]
    if len(seqs) != manifest["n"]:
        raise ValueError(f"manifest says n={manifest['n']}, found {len(seqs)} files")
    return seqs, manifest


# ------------------------------------------------------------ trajectories

def write_trajectory(traj: Trajectory, path, j_theta: Optional[np.ndarray] = None,
                     j_beta: Optional[np.ndarray] = None):
    header = ["t", "z"]
    cols = [traj.grid.nodes, traj.values]
    if j_theta is not None:
        header += [f"jtheta_{k}" for k in range(j_theta.shape[1])]
        cols += [j_theta[:, k] for k in range(j_theta.shape[1])]
    if j_beta is not None:
        header += [f"jbeta_{k}" for k in range(j_beta.shape[1])]
        cols += [j_beta[:, k] for k in range(j_beta.shape[1])]
    rows = [",".join(header)]
    mat = np.stack(cols, axis=1)
    for row in mat:
        rows.append(",".join(FLOAT_FMT % v for v in row))
    atomic_write_text(path, "\n".join(rows) + "\n")


def read_trajectory(path, grid: Optional[TimeGrid] = None) -> Trajectory:
    data = np.genfromtxt(path, delimiter=",", names=True)
    t = np.atleast_1d(data["t"])
    z = np.atleast_1d(data["z"])
    if grid is None:
        grid = TimeGrid(float(t[-1]), len(t) - 1)
    return Trajectory(grid=grid, values=z)


def write_ensemble(ens: PathEnsemble, path, summary_path=None):
    """Matrix CSV: rows = grid nodes, columns t then path_0..path_{n-1}."""
    header = ["t"] + [f"path_{k}" for k in range(ens.n_samples)]
    rows = [",".join(header)]
    mat = np.concatenate([ens.grid.nodes[:, None], ens.values.T], axis=1)
    for row in mat:
        rows.append(",".join(FLOAT_FMT % v for v in row))
    atomic_write_text(path, "\n".join(rows) + "\n")
    if summary_path is not None:
        s = ens.summary()
        lines = ["t,mean,std,q05,q95"]
        for i in range(len(s["t"])):
            lines.append(",".join(FLOAT_FMT % s[k][i]
                                  for k in ("t", "mean", "std", "q05", "q95")))
        atomic_write_text(summary_path, "\n".join(lines) + "\n")


def read_ensemble(path, provenance: str = "amortized") -> PathEnsemble:
    data = np.genfromtxt(path, delimiter=",", skip_header=1)
    t = data[:, 0]
    values = data[:, 1:].T
    grid = TimeGrid(float(t[-1]), len(t) - 1)
    return PathEnsemble(grid=grid, values=values, provenance=provenance)


# ------------------------------------------------------------- checkpoints

def save_checkpoint(model: IntensityModel, path, adam_theta=None, adam_beta=None,
                    seed=None, train_config: Optional[dict] = None):
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "model": model.to_dict(),
        "adam_theta": adam_theta.to_dict() if adam_theta is not None else None,
        "adam_beta": adam_beta.to_dict() if adam_beta is not None else None,
        "seed": seed,
        "train_config": train_config,
    }
    atomic_write_text(path, json.dumps(payload, sort_keys=True) + "\n")


def load_checkpoint(path):
    from .nets import AdamState

    with open(path) as f:
        payload = json.load(f)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('format_version')}")
    model = IntensityModel.from_dict(payload["model"])
    adam_t = AdamState.from_dict(payload["adam_theta"]) if payload["adam_theta"] else None
    adam_b = AdamState.from_dict(payload["adam_beta"]) if payload["adam_beta"] else None
    return model, adam_t, adam_b, payload


# ----------------------------------------------------------------- history

def write_history(history, path):
    lines = ["epoch,elbo_mean,elbo_se,grad_norm_theta,grad_norm_beta,skipped_batches"]
    for h in history:
        lines.append(f"{h.epoch},{FLOAT_FMT % h.elbo_mean},{FLOAT_FMT % h.elbo_se},"
                     f"{FLOAT_FMT % h.grad_norm_theta},{FLOAT_FMT % h.grad_norm_beta},"
                     f"{h.skipped_batches}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_rows_csv(rows: Sequence[dict], path, columns: Sequence[str]):
    lines = [",".join(columns)]
    for row in rows:
        cells = []
        for c in columns:
            v = row[c]
            cells.append(FLOAT_FMT % v if isinstance(v, float) else str(v))
        lines.append(",".join(cells))
    atomic_write_text(path, "\n".join(lines) + "\n")


# ------------------------------------------------------------------ config

def dumps_toml(cfg: dict) -> str:
    """Serialize a flat config dict as TOML."""
    lines = []
    for key in sorted(cfg):
        v = cfg[key]
        if isinstance(v, bool):
            lines.append(f"{key} = {'true' if v else 'false'}")
        elif isinstance(v, (int, np.integer)):
            lines.append(f"{key} = {int(v)}")
        elif isinstance(v, float):
            lines.append(f"{key} = {FLOAT_FMT % v}")
        elif isinstance(v, str):
            lines.append(f'{key} = "{v}"')
        elif isinstance(v, (list, tuple)):
            inner = ", ".join(
                FLOAT_FMT % x if isinstance(x, float) else str(x) for x in v)
            lines.append(f"{key} = [{inner}]")
        else:
            raise TypeError(f"cannot serialize config value {key}={v!r}")
    return "\n".join(lines) + "\n"


def loads_toml(text: str) -> dict:
    try:
        import tomllib
    except ModuleNotFoundError:
        import tomli as tomllib
    return tomllib.loads(text)


def init_run_dir(outdir, resolved_config: dict, input_paths: Sequence = ()):
    """Create a run directory with the resolved config and input hashes."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    atomic_write_text(outdir / "config.resolved.toml", dumps_toml(resolved_config))
    info = {"inputs": {}}
    for p in input_paths:
        p = Path(p)
        if p.is_dir():
            info["inputs"][str(p)] = hash_tree(p)
        elif p.is_file():
            info["inputs"][str(p)] = content_hash(p)
    atomic_write_text(outdir / "run_info.json",
                      json.dumps(info, indent=2, sort_keys=True) + "\n")
    return outdir

"""CSV and JSON serialization of datasets, fields, checkpoints and tables.

All writers go through :func:`atomic_write`, so a crashed run never
leaves a half-written artifact behind.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import tempfile

import numpy as np

from .point_cloud import KernelSpec, LabeledDataset, build_cloud


def atomic_write(path, text: str):
    """Write ``text`` to ``path`` via a temporary file and ``os.replace``."""
    path = os.fspath(path)
    folder = os.path.dirname(os.path.abspath(path))
    try:
        fd, tmp = tempfile.mkstemp(dir=folder, prefix=".tmp-")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def to_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n"


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    raise TypeError(f"cannot serialize {type(x).__name__}")


def write_json(path, obj):
    return atomic_write(path, to_json(obj))


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def file_hash(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(v):
    return repr(float(v))


# ----------------------------------------------------------------------------
# datasets
# ----------------------------------------------------------------------------

def dataset_manifest(ds: LabeledDataset) -> dict:
    return {"kind": ds.kind, "seed": ds.seed, "n": ds.cloud.n, "dim": ds.cloud.dim,
            "label_type": "int" if ds.is_classification else "float",
            "params": ds.params, **ds.cloud.manifest()}


def write_dataset(ds: LabeledDataset, path):
    """``path`` gets one row per point: coordinates, label, train flag, constraint flag.

    The JSON manifest goes next to it as ``<path stem>.json``. Returns
    both paths.
    """
    d = ds.cloud.dim
    header = [f"x{j}" for j in range(d)] + ["label", "train", "constraint"]
    lab = (lambda v: str(int(v))) if ds.is_classification else _fmt
    rows = [[_fmt(v) for v in x] + [lab(y), int(t), int(c)]
            for x, y, t, c in zip(ds.cloud.points, ds.labels, ds.train_mask, ds.constraint_mask)]
    atomic_write(path, _csv_text(header, rows))
    mpath = os.path.splitext(os.fspath(path))[0] + ".json"
    write_json(mpath, dataset_manifest(ds))
    return os.fspath(path), mpath


def read_dataset(path) -> LabeledDataset:
    """Inverse of :func:`write_dataset` (charts are not restored)."""
    meta = read_json(os.path.splitext(os.fspath(path))[0] + ".json")
    raw = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    d = meta["dim"]
    labels = raw[:, d].astype(np.int64) if meta["label_type"] == "int" else raw[:, d]
    k = meta["kernel"]
    cloud = build_cloud(raw[:, :d], KernelSpec(k["shape"], k["cutoff"]), meta["delta"],
                        meta["volume_mode"], intrinsic_dim=meta.get("intrinsic_dim"))
    return LabeledDataset(cloud=cloud, labels=labels, train_mask=raw[:, d + 1] > 0,
                          constraint_mask=raw[:, d + 2] > 0, kind=meta["kind"],
                          seed=meta["seed"], params=meta.get("params", {}))


# ----------------------------------------------------------------------------
# fields, tables, checkpoints
# ----------------------------------------------------------------------------

def write_field(path, u):
    """One row per point index; one column per field component."""
    u2 = np.asarray(u, dtype=float).reshape(len(u), -1)
    header = ["index"] + [f"u{j}" for j in range(u2.shape[1])]
    rows = [[i] + [_fmt(v) for v in row] for i, row in enumerate(u2)]
    return atomic_write(path, _csv_text(header, rows))


def read_field(path):
    raw = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    u = raw[np.argsort(raw[:, 0]), 1:]
    return u[:, 0] if u.shape[1] == 1 else u


def write_table(path, header, rows):
    """Rows of numbers (``None`` becomes an empty cell)."""
    fmt = [["" if v is None else (str(v) if isinstance(v, (int, np.integer)) else _fmt(v))
            for v in row] for row in rows]
    return atomic_write(path, _csv_text(header, fmt))


def write_checkpoint(path, state: dict):
    return write_json(path, state)


def read_checkpoint(path) -> dict:
    return read_json(path)

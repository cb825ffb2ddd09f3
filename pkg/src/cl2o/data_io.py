"""Dataset ingestion (IDX image containers, synthetic generators), results
persistence, and run-configuration parsing.

Everything here is deterministic: identical inputs produce byte-identical
outputs, and dataset hashes are stable across loads.
"""

from __future__ import annotations

import dataclasses
import gzip
import hashlib
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049
DATA_DIR_ENV = "CL2O_DATA_DIR"


class DataError(Exception):
    pass


@dataclass(frozen=True)
class Dataset:
    """N x P pixel matrix in [0, 1] plus integer labels and a content hash."""

    images: np.ndarray
    labels: np.ndarray
    name: str
    content_hash: str

    @property
    def size(self):
        return self.images.shape[0]

    @property
    def n_pixels(self):
        return self.images.shape[1]

    @property
    def n_labels(self):
        return int(self.labels.max()) + 1 if self.labels.size else 0


def _hash_arrays(*arrays):
    h = hashlib.sha256()
    for a in arrays:
        h.update(str(a.shape).encode())
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def _make_dataset(images, labels, name):
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if images.shape[0] != labels.shape[0]:
        raise DataError(
            f"image/label count mismatch: {images.shape[0]} vs {labels.shape[0]}")
    return Dataset(images=images, labels=labels, name=name,
                   content_hash=_hash_arrays(images, labels))


def _open_binary(path):
    path = str(path)
    if path.endswith(".gz"):
        return gzip.open(path, "rb")
    return open(path, "rb")


def load_idx(images_path, labels_path, limit=None) -> Dataset:
    """Parse the big-endian IDX container pair used by MNIST-style datasets.

    Pixel bytes are scaled by 1/255; ``limit`` keeps the first N records.
    """
    with _open_binary(images_path) as fh:
        magic, count, rows, cols = struct.unpack(">iiii", fh.read(16))
        if magic != IDX_IMAGE_MAGIC:
            raise DataError(f"bad image magic {magic} in {images_path} "
                            f"(expected {IDX_IMAGE_MAGIC})")
        raw = np.frombuffer(fh.read(count * rows * cols), dtype=np.uint8)
        if raw.size != count * rows * cols:
            raise DataError(f"truncated image payload in {images_path}")
        images = raw.reshape(count, rows * cols).astype(np.float64) / 255.0
    with _open_binary(labels_path) as fh:
        magic, lcount = struct.unpack(">ii", fh.read(8))
        if magic != IDX_LABEL_MAGIC:
            raise DataError(f"bad label magic {magic} in {labels_path} "
                            f"(expected {IDX_LABEL_MAGIC})")
        labels = np.frombuffer(fh.read(lcount), dtype=np.uint8).astype(np.int64)
        if labels.size != lcount:
            raise DataError(f"truncated label payload in {labels_path}")
    if count != lcount:
        raise DataError(f"image count {count} != label count {lcount}")
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    return _make_dataset(images, labels, name=Path(str(images_path)).stem)


def make_synthetic_classification(n, n_pixels, n_labels, separation, seed) -> Dataset:
    """Class-balanced Gaussian blobs rescaled into [0, 1]; linearly separable
    when the separation is large."""
    if n < n_labels:
        raise DataError("need at least one sample per class")
    rng = np.random.default_rng(seed)
    means = rng.normal(size=(n_labels, n_pixels))
    means *= separation / np.linalg.norm(means, axis=1, keepdims=True)
    labels = np.arange(n) % n_labels  # balanced up to remainder
    raw = means[labels] + rng.normal(size=(n, n_pixels))
    lo, hi = raw.min(), raw.max()
    images = (raw - lo) / (hi - lo)
    return _make_dataset(images, labels,
                         name=f"synthetic(n={n},p={n_pixels},l={n_labels})")


def resolve_data_dir(data_dir=""):
    return data_dir or os.environ.get(DATA_DIR_ENV, "")


def find_mnist(data_dir=""):
    """Locate the classic IDX training pair under the data directory (or the
    CL2O_DATA_DIR override); returns (images_path, labels_path) or None."""
    root = resolve_data_dir(data_dir)
    if not root:
        return None
    root = Path(root)
    for img_name in ("train-images-idx3-ubyte", "train-images.idx3-ubyte"):
        for suffix in ("", ".gz"):
            img = root / (img_name + suffix)
            lab = root / (img_name.replace("images", "labels")
                          .replace("idx3", "idx1") + suffix)
            if img.exists() and lab.exists():
                return img, lab
    return None


def load_benchmark_dataset(data_dir="", train_limit=2000, eval_limit=500, seed=0,
                           synthetic_pixels=64, synthetic_labels=10,
                           synthetic_separation=2.0):
    """Desk-scale train/eval split: MNIST when the IDX files are present,
    synthetic blobs otherwise (so everything runs with no downloads)."""
    found = find_mnist(data_dir)
    if found:
        full = load_idx(found[0], found[1], limit=train_limit + eval_limit)
        source = "mnist"
    else:
        full = make_synthetic_classification(
            train_limit + eval_limit, synthetic_pixels, synthetic_labels,
            synthetic_separation, seed)
        source = "synthetic"
    train = _make_dataset(full.images[:train_limit], full.labels[:train_limit],
                          full.name + "/train")
    evald = _make_dataset(full.images[train_limit:train_limit + eval_limit],
                          full.labels[train_limit:train_limit + eval_limit],
                          full.name + "/eval")
    return train, evald, source


# ---------------------------------------------------------------------------
# Results persistence


def _format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float) or isinstance(v, np.floating):
        return repr(float(v))  # shortest round-trip decimal
    return str(v)


def write_results(report, path, format="keyvalue"):
    """Persist a report deterministically.

    keyvalue: a mapping written as sorted ``key = value`` lines.
    csv: ``(columns, rows)`` with '.' decimals, '\\n' line ends, header row.
    """
    path = Path(path)
    if format == "keyvalue":
        lines = [f"{k} = {_format_value(report[k])}" for k in sorted(report)]
        path.write_text("\n".join(lines) + ("\n" if lines else ""))
    elif format == "csv":
        columns, rows = report
        out = [",".join(columns)]
        for row in rows:
            out.append(",".join(_format_value(v) for v in row))
        with open(path, "w", newline="") as fh:
            fh.write("\n".join(out) + "\n")
    else:
        raise DataError(f"unknown results format '{format}'")


def read_results(path, format="keyvalue"):
    path = Path(path)
    if format == "keyvalue":
        out = {}
        for line in path.read_text().splitlines():
            if not line.strip():
                continue
            key, _, value = line.partition(" = ")
            out[key] = value
        return out
    if format == "csv":
        lines = path.read_text().splitlines()
        columns = lines[0].split(",") if lines else []
        rows = [line.split(",") for line in lines[1:]]
        return columns, rows
    raise DataError(f"unknown results format '{format}'")


# ---------------------------------------------------------------------------
# Run configuration


@dataclass
class RunConfig:
    """Every hyperparameter of every module as named keys; unknown keys are
    rejected and all defaults are materialized on load."""

    seed: int = 0
    out_dir: str = "runs/latest"
    data_dir: str = ""
    family: str = "quadratic-mix"       # quadratic-mix | classifier
    dim: int = 5
    condition_number: float = 25.0
    horizon: int = 50
    alpha_weight: float = 0.0
    gamma_decay: float = 0.95
    episodes: int = 10
    epochs: int = 40
    outer_lr: float = 0.01
    eta_scale: float = 0.9
    eta0: float = 0.5
    schedule_p: float = 1.0
    minibatch_size: int = 128
    activation: str = "tanh"
    init: str = "uniform"
    init_scale: float = 0.01
    gaussian_std: float = 0.1
    state_dim: int = 3
    depth: int = 3
    contraction: float = 0.95
    omega_hidden: int = 16
    train_limit: int = 2000
    eval_limit: int = 500
    train_fraction: float = 0.8
    jobs: int = 1
    baselines: str = "sgd,adam,nag,rmsprop"
    unsafe_stepsize: bool = False
    full_unroll: bool = True
    bench_seeds: int = 10
    bench_horizon: int = 100
    tune_budget: int = 50

    def to_dict(self):
        return dataclasses.asdict(self)


def _parse_typed(name, text, target_type):
    text = text.strip()
    if target_type is bool:
        low = text.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise DataError(f"config key '{name}' expects a boolean, got '{text}'")
    try:
        return target_type(text)
    except ValueError as exc:
        raise DataError(f"config key '{name}': {exc}") from None


def config_from_mapping(mapping) -> RunConfig:
    fields = {f.name: f.type for f in dataclasses.fields(RunConfig)}
    types = {"seed": int, "dim": int, "horizon": int, "episodes": int,
             "epochs": int, "minibatch_size": int, "state_dim": int,
             "depth": int, "omega_hidden": int, "train_limit": int,
             "eval_limit": int, "jobs": int, "bench_seeds": int,
             "bench_horizon": int, "tune_budget": int,
             "unsafe_stepsize": bool, "full_unroll": bool}
    cfg = RunConfig()
    for key, raw in mapping.items():
        if key not in fields:
            raise DataError(f"unknown config key '{key}'")
        current = getattr(cfg, key)
        target = types.get(key, type(current))
        value = raw if not isinstance(raw, str) else _parse_typed(key, raw, target)
        setattr(cfg, key, value)
    return cfg


def parse_config(path) -> RunConfig:
    """Parse a ``key = value`` text file ('#' starts a comment)."""
    mapping = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise DataError(f"{path}:{lineno}: expected 'key = value', got '{line}'")
        key, _, value = body.partition("=")
        mapping[key.strip()] = value.strip()
    return config_from_mapping(mapping)


def config_hash(cfg: RunConfig):
    payload = "\n".join(f"{k}={_format_value(v)}" for k, v in sorted(cfg.to_dict().items()))
    return hashlib.sha256(payload.encode()).hexdigest()

"""Dataset files and evaluation.

Datasets use the same conventions as model files: a JSON manifest next to
a raw little-endian float32 blob, offsets counted in float32 elements.
The manifest declares the eval metric ("accuracy" for integer class
labels, "mse" for regression targets); labels are stored in the blob as
float32 and cast back on load.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ModelFormatError, ShapeError
from .graph_ir import GraphModel

__all__ = [
    "Dataset",
    "dataset_paths",
    "save_dataset",
    "load_dataset",
    "iter_batches",
    "evaluate",
    "metric_score",
]

DATASET_FORMAT = "fixquant-dataset-v1"
METRICS = ("accuracy", "mse")


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    metric: str = "accuracy"

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.metric not in METRICS:
            raise ModelFormatError(f"unknown metric {self.metric!r}, expected one of {METRICS}")
        if self.metric == "accuracy":
            self.y = np.asarray(self.y, dtype=np.int64)
        else:
            self.y = np.asarray(self.y, dtype=np.float64)
        if self.x.shape[0] != self.y.shape[0]:
            raise ShapeError(
                f"dataset has {self.x.shape[0]} inputs but {self.y.shape[0]} targets"
            )

    def __len__(self) -> int:
        return self.x.shape[0]


def dataset_paths(prefix) -> tuple[Path, Path]:
    return Path(f"{prefix}.data.json"), Path(f"{prefix}.data.bin")


def save_dataset(ds: Dataset, prefix) -> None:
    manifest_path, blob_path = dataset_paths(prefix)
    x32 = np.ascontiguousarray(ds.x, dtype="<f4")
    y32 = np.ascontiguousarray(ds.y, dtype="<f4")
    manifest = {
        "format": DATASET_FORMAT,
        "metric": ds.metric,
        "tensors": {
            "x": {"offset": 0, "shape": list(ds.x.shape)},
            "y": {"offset": int(x32.size), "shape": list(ds.y.shape)},
        },
    }
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    blob_path.write_bytes(x32.tobytes() + y32.tobytes())


def load_dataset(prefix) -> Dataset:
    manifest_path, blob_path = dataset_paths(prefix)
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"cannot read dataset manifest {manifest_path}: {exc}") from exc
    if manifest.get("format") != DATASET_FORMAT:
        raise ModelFormatError(
            f"unsupported dataset format {manifest.get('format')!r}, expected {DATASET_FORMAT!r}"
        )
    blob = np.frombuffer(blob_path.read_bytes(), dtype="<f4")
    tensors = {}
    total = 0
    for name in ("x", "y"):
        entry = manifest["tensors"][name]
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        off = int(entry["offset"])
        if off + size > blob.size:
            raise ModelFormatError(f"dataset tensor {name!r} extends past the blob")
        tensors[name] = blob[off : off + size].reshape(shape).astype(np.float64)
        total += size
    if total != blob.size:
        raise ModelFormatError(
            f"dataset blob holds {blob.size} values, manifest declares {total}"
        )
    return Dataset(tensors["x"], tensors["y"], metric=manifest["metric"])


def iter_batches(x: np.ndarray, batch_size: int = 256):
    x = np.asarray(x)
    for start in range(0, x.shape[0], batch_size):
        yield x[start : start + batch_size]


def evaluate(model, ds: Dataset, batch_size: int = 256) -> float:
    """Raw metric of a GraphModel or QuantSimModel on the dataset.

    Accuracy is the fraction of argmax matches; mse the mean squared error
    over all outputs. Use ``metric_score`` for a higher-is-better view.
    """
    outs = [model.forward(xb) for xb in iter_batches(ds.x, batch_size)]
    y_hat = np.concatenate(outs, axis=0)
    if ds.metric == "accuracy":
        return float(np.mean(y_hat.argmax(axis=1) == ds.y))
    diff = y_hat - ds.y
    return float(np.mean(diff * diff))


def metric_score(value: float, metric: str) -> float:
    """Map a metric value to a score where larger is always better."""
    return value if metric == "accuracy" else -value

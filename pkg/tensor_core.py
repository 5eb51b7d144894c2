"""
tensor_core.py: Dense tensors, order statistics, seeded RNG and the on-disk
tensor format.

Tensors are plain numpy arrays. Values are float32 unless a caller passes
float64 on purpose (gradient checks do); statistics always accumulate in
float64.
"""

import json
import logging
from pathlib import Path

import numpy as np

from errors import TensorError

logger = logging.getLogger(__name__)

DTYPE = np.float32


def as_tensor(data, dtype=DTYPE):
    """
    Convert data to a dense array and reject non-finite values.
    Args:
        data (array-like): Values to convert.
        dtype (np.dtype): Target dtype, float32 by default.
    Returns:
        np.ndarray: The converted array.
    """
    arr = np.asarray(data, dtype=dtype)
    if not np.all(np.isfinite(arr)):
        raise TensorError("non-finite values in tensor")
    return arr


def make_rng(seed):
    """PCG64 generator; every experiment derives its randomness from one of these."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def _flat64(t):
    arr = np.asarray(t, dtype=np.float64).ravel()
    if arr.size == 0:
        raise TensorError("empty input")
    return arr


def percentile(t, p):
    """
    Linearly interpolated order statistic at rank p/100*(n-1).
    Args:
        t (array-like): Values, flattened before sorting.
        p (float): Percentile in [0, 100].
    Returns:
        float: The interpolated value.
    """
    arr = _flat64(t)
    if not 0.0 <= p <= 100.0:
        raise TensorError(f"percentile {p} outside [0, 100]")
    return float(np.percentile(arr, p, method="linear"))


def median(t):
    return percentile(t, 50.0)


def mse(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise TensorError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise TensorError("empty input")
    diff = a.astype(np.float64) - b.astype(np.float64)
    return float(np.mean(diff * diff))


def sidecar_path(path):
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_tensor(path, t):
    """
    Write a tensor as little-endian float32 plus a JSON shape sidecar.
    Args:
        path (str | Path): Blob path; the sidecar is written next to it.
        t (array-like): Tensor to store.
    """
    path = Path(path)
    arr = np.ascontiguousarray(np.asarray(t), dtype="<f4")
    path.parent.mkdir(parents=True, exist_ok=True)
    arr.tofile(path)
    meta = {"shape": list(arr.shape), "dtype": "f32", "order": "row-major"}
    sidecar_path(path).write_text(json.dumps(meta))
    logger.debug("wrote %s shape=%s", path, arr.shape)


def load_tensor(path):
    path = Path(path)
    meta = json.loads(sidecar_path(path).read_text())
    if meta.get("dtype") != "f32" or meta.get("order") != "row-major":
        raise TensorError(f"unsupported tensor layout in {path}")
    shape = tuple(int(d) for d in meta["shape"])
    data = np.fromfile(path, dtype="<f4")
    if data.size != int(np.prod(shape, dtype=np.int64)):
        raise TensorError(f"{path}: {data.size} values do not fill shape {shape}")
    return as_tensor(data.reshape(shape))

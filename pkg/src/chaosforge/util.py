"""Shared helpers: seed derivation, atomic file output, bounded parallelism."""

import hashlib
import json
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

THREADS_ENV_VAR = "CHAOSFORGE_THREADS"


class DataError(Exception):
    """Bad input data: malformed files, schema violations, inconsistent manifests."""


class NumericalError(Exception):
    """Numerical failure: non-finite values, degenerate inputs, failed integrations."""


def derive_seed(root_seed, *labels):
    """Derive an independent 64-bit seed from a root seed and a purpose label chain.

    Streams for different label chains are computed by hashing, so adding a new
    consumer anywhere in the pipeline never shifts the draws seen by existing
    consumers.
    """
    h = hashlib.sha256()
    h.update(b"chaosforge.v1")
    h.update(str(int(root_seed)).encode())
    for label in labels:
        h.update(b"|")
        h.update(str(label).encode())
    return int.from_bytes(h.digest()[:8], "little")


def make_rng(root_seed, *labels):
    """Generator seeded from a derived stream; see derive_seed."""
    return np.random.default_rng(derive_seed(root_seed, *labels))


def thread_count():
    """Worker cap from the environment: 0 means auto, default 1 (sequential)."""
    raw = os.environ.get(THREADS_ENV_VAR, "")
    try:
        n = int(raw)
    except ValueError:
        return 1
    if n == 0:
        return os.cpu_count() or 1
    return max(1, n)


def parallel_map(fn, items):
    """Map fn over items, in order, using at most thread_count() workers.

    With one worker this is a plain loop; results are returned in input order
    either way so callers see identical output regardless of the cap.
    """
    items = list(items)
    n_workers = min(thread_count(), max(1, len(items)))
    if n_workers == 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(fn, items))


def atomic_write_bytes(path, data):
    """Write bytes to path via a same-directory temp file and atomic rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_json(path, obj):
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def load_json(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"invalid JSON in {path}: {exc}") from exc


def check_finite_array(arr, context):
    """Raise NumericalError if arr contains NaN or infinity."""
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values in {context}")
    return arr

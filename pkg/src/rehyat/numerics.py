"""Dense-tensor substrate shared by every kernel in the package.

Tensors are plain ``numpy.ndarray`` values in C (row-major) order with dtype
float32 ("single") or float64 ("double"). This module adds the few things
numpy does not give us directly: finiteness checks at API boundaries, a
counter-based seeded generator with independent streams, an opt-in flop
counter for the kernels, and the binary-blob + JSON-sidecar file format.
"""

from __future__ import annotations

import contextlib
import contextvars
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from .errors import NonFiniteError, ShapeError

PRECISIONS = {"single": np.float32, "double": np.float64}


def dtype_for(precision: str) -> type:
    try:
        return PRECISIONS[precision]
    except KeyError:
        raise ValueError(f"unknown precision {precision!r}; expected single or double") from None


def precision_of(a: np.ndarray) -> str:
    if a.dtype == np.float32:
        return "single"
    if a.dtype == np.float64:
        return "double"
    raise TypeError(f"unsupported dtype {a.dtype}")


def as_tensor(data, precision: str = "double") -> np.ndarray:
    out = np.ascontiguousarray(data, dtype=dtype_for(precision))
    check_finite(out, "tensor")
    return out


def check_finite(a: np.ndarray, what: str = "value") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"non-finite entries in {what}")
    return a


# --- flop accounting -------------------------------------------------------

class FlopCounter:
    """Accumulates operation counts reported by instrumented kernels."""

    def __init__(self) -> None:
        self.counts: dict[str, int] = {}

    def add(self, tag: str, n: int) -> None:
        self.counts[tag] = self.counts.get(tag, 0) + int(n)

    @property
    def total(self) -> int:
        return sum(self.counts.values())


_active_counter: contextvars.ContextVar[FlopCounter | None] = contextvars.ContextVar(
    "_active_counter", default=None
)


@contextlib.contextmanager
def count_flops() -> Iterator[FlopCounter]:
    counter = FlopCounter()
    token = _active_counter.set(counter)
    try:
        yield counter
    finally:
        _active_counter.reset(token)


def record_flops(tag: str, n: int) -> None:
    counter = _active_counter.get()
    if counter is not None:
        counter.add(tag, n)


# --- core ops --------------------------------------------------------------

def matmul(a: np.ndarray, b: np.ndarray, tag: str = "matmul") -> np.ndarray:
    """2-D matrix product; one multiply plus one add per inner term."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner extents differ: {a.shape} @ {b.shape}")
    m, k = a.shape
    n = b.shape[1]
    record_flops(tag, 2 * m * k * n)
    return a @ b


def stable_row_softmax_terms(logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``exp(logits - rowmax)`` and the row maxima (shape m x 1)."""
    if logits.ndim != 2:
        raise ShapeError(f"expected a 2-D logit matrix, got shape {logits.shape}")
    check_finite(logits, "logits")
    m, n = logits.shape
    if n == 0:
        raise ShapeError("cannot shift an empty row")
    rowmax = logits.max(axis=1, keepdims=True)
    expvals = np.exp(logits - rowmax)
    # max, subtract, exp
    record_flops("softmax", 3 * m * n)
    return expvals, rowmax


# --- randomness ------------------------------------------------------------

@dataclass
class Rng:
    """Counter-based generator (Philox) keyed by ``(seed, stream)``.

    Streams with distinct ids share no state, so sweeps can hand one stream
    to each worker and stay reproducible regardless of scheduling.
    """

    seed: int
    stream: int = 0
    _gen: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        key = np.array([self.seed % 2**64, self.stream % 2**64], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def spawn(self, stream: int) -> "Rng":
        return Rng(self.seed, stream)

    @property
    def generator(self) -> np.random.Generator:
        return self._gen


def random_tensor(
    rng: Rng,
    shape: tuple[int, ...] | list[int],
    distribution: str = "normal",
    precision: str = "double",
) -> np.ndarray:
    shape = tuple(int(s) for s in shape)
    if any(s < 0 for s in shape):
        raise ShapeError(f"negative extent in {shape}")
    if distribution == "normal":
        data = rng.generator.standard_normal(shape)
    elif distribution == "uniform":
        data = rng.generator.uniform(-1.0, 1.0, shape)
    else:
        raise ValueError(f"unknown distribution {distribution!r}")
    return np.ascontiguousarray(data, dtype=dtype_for(precision))


# --- blob + sidecar serialization ------------------------------------------

def save_blob(stem: str | Path, arrays: Mapping[str, np.ndarray], meta: Mapping) -> tuple[Path, Path]:
    """Write ``<stem>.bin`` (little-endian, arrays back to back) and ``<stem>.json``.

    The sidecar holds ``meta`` plus an index of ``name, dtype, shape, offset``
    entries in write order.
    """
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    index = []
    offset = 0
    with open(stem.with_suffix(".bin"), "wb") as fh:
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            raw = np.ascontiguousarray(le).tobytes()
            fh.write(raw)
            index.append(
                {"name": name, "dtype": le.dtype.str, "shape": list(arr.shape), "offset": offset}
            )
            offset += len(raw)
    sidecar = {"meta": dict(meta), "arrays": index, "nbytes": offset}
    stem.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return stem.with_suffix(".bin"), stem.with_suffix(".json")


def load_blob(stem: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    stem = Path(stem)
    sidecar = json.loads(stem.with_suffix(".json").read_text())
    raw = stem.with_suffix(".bin").read_bytes()
    if len(raw) != sidecar["nbytes"]:
        raise ValueError(f"blob size {len(raw)} does not match sidecar ({sidecar['nbytes']})")
    arrays = {}
    for entry in sidecar["arrays"]:
        dt = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(raw, dtype=dt, count=count, offset=entry["offset"])
        arrays[entry["name"]] = arr.reshape(entry["shape"]).astype(dt.newbyteorder("="))
    return arrays, sidecar["meta"]

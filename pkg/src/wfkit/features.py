"""IAT-histogram and TAM trace representations, plus the binary feature cache.

Cache layout (all little-endian): magic ``WFC1``, u32 tensor count, then per
tensor u32 rank, u32 dims[rank] and a float32 row-major payload.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence, Union

import numpy as np

from .trace import DatasetManifest, Trace, inter_arrival_times, load_trace

CACHE_MAGIC = b"WFC1"

DEFAULT_SLOT = 0.044
DEFAULT_SLOTS = 1800
DEFAULT_BINS = 9
DEFAULT_DELTA_MIN = 1e-4
DEFAULT_DELTA_MAX = 1.0


class ConfigError(ValueError):
    pass


class CacheError(ValueError):
    pass


def default_boundaries(
    bins: int, delta_min: float = DEFAULT_DELTA_MIN, delta_max: float = DEFAULT_DELTA_MAX
) -> np.ndarray:
    """Log-spaced IAT bin edges ``[0, delta_min, ..., delta_max, inf]``.

    There are ``bins + 1`` edges. The ``bins - 1`` interior edges are evenly
    spaced in log scale between ``delta_min`` and ``delta_max``; with two bins
    the only interior edge is ``delta_min``.
    """
    if int(bins) != bins or bins < 2:
        raise ConfigError(f"bin count must be an integer >= 2, got {bins}")
    if not (0 < delta_min < delta_max) or not np.isfinite(delta_max):
        raise ConfigError(f"need 0 < delta_min < delta_max, got {delta_min}, {delta_max}")
    if bins == 2:
        interior = np.array([delta_min])
    else:
        interior = np.geomspace(delta_min, delta_max, int(bins) - 1)
    return np.concatenate([[0.0], interior, [np.inf]])


@dataclass(frozen=True)
class IatConfig:
    slot_duration: float = DEFAULT_SLOT
    slot_count: int = DEFAULT_SLOTS
    bin_count: int = DEFAULT_BINS
    boundaries: tuple[float, ...] | None = field(default=None)

    def __post_init__(self):
        if not self.slot_duration > 0:
            raise ConfigError("slot duration must be positive")
        if int(self.slot_count) != self.slot_count or self.slot_count < 1:
            raise ConfigError("slot count must be a positive integer")
        if self.boundaries is None:
            b = default_boundaries(self.bin_count)
        else:
            b = np.asarray(self.boundaries, dtype=np.float64)
            if b.size != self.bin_count + 1:
                raise ConfigError(f"need {self.bin_count + 1} boundaries, got {b.size}")
            if self.bin_count < 2:
                raise ConfigError("bin count must be >= 2")
            if b[0] != 0 or b[-1] != np.inf or np.any(np.diff(b) <= 0):
                raise ConfigError("boundaries must start at 0, end at inf and increase strictly")
        object.__setattr__(self, "boundaries", tuple(float(x) for x in b))

    @property
    def edges(self) -> np.ndarray:
        return np.asarray(self.boundaries)


def slot_index(times: np.ndarray, slot: float) -> np.ndarray:
    """Slot ``k`` with ``k*slot <= t < (k+1)*slot`` evaluated in float arithmetic."""
    k = np.floor(times / slot).astype(np.int64)
    # floor(t/s) can be off by one from the product comparison near edges
    k -= (k * slot > times)
    k += ((k + 1) * slot <= times)
    return k


def iat_histogram(trace: Trace, cfg: IatConfig = IatConfig()) -> np.ndarray:
    """Count cells per (IAT bin, direction, time slot) into a ``[G, 2, L]`` array.

    Direction index 0 is outgoing and 1 is incoming. Bins are half-open
    ``[b_r, b_{r+1})`` so every cell in the first ``L`` slots lands in exactly
    one entry; later cells are dropped.
    """
    G, L = cfg.bin_count, cfg.slot_count
    out = np.zeros((G, 2, L), dtype=np.float32)
    if not len(trace):
        return out
    delta = inter_arrival_times(trace)
    k = slot_index(trace.times, cfg.slot_duration)
    keep = k < L
    r = np.searchsorted(cfg.edges, delta[keep], side="right") - 1
    d = (trace.directions[keep] < 0).astype(np.int64)
    np.add.at(out, (r, d, k[keep]), 1.0)
    return out


def tam(trace: Trace, slot: float = DEFAULT_SLOT, slots: int = DEFAULT_SLOTS) -> np.ndarray:
    """Per-slot outgoing/incoming cell counts, shape ``[2, L]``."""
    out = np.zeros((2, slots), dtype=np.float32)
    if not len(trace):
        return out
    k = slot_index(trace.times, slot)
    keep = k < slots
    d = (trace.directions[keep] < 0).astype(np.int64)
    np.add.at(out, (d, k[keep]), 1.0)
    return out


def featurizer(representation: str, cfg: IatConfig) -> Callable[[Trace], np.ndarray]:
    if representation == "iat":
        return lambda tr: iat_histogram(tr, cfg)
    if representation == "tam":
        return lambda tr: tam(tr, cfg.slot_duration, cfg.slot_count)
    raise ConfigError(f"unknown representation {representation!r}")


def _featurize_path(args) -> np.ndarray:
    path, representation, cfg = args
    return featurizer(representation, cfg)(load_trace(path))


def write_cache(path: Union[str, Path], tensors: Iterable[np.ndarray]) -> int:
    """Write tensors to a feature cache; returns the count."""
    tensors = list(tensors)
    with open(path, "wb") as f:
        f.write(CACHE_MAGIC)
        f.write(struct.pack("<I", len(tensors)))
        for t in tensors:
            t = np.ascontiguousarray(t, dtype="<f4")
            f.write(struct.pack(f"<I{t.ndim}I", t.ndim, *t.shape))
            f.write(t.tobytes())
    return len(tensors)


def iter_cache(path: Union[str, Path]) -> Iterator[np.ndarray]:
    with open(path, "rb") as f:
        if f.read(4) != CACHE_MAGIC:
            raise CacheError(f"{path}: not a feature cache")
        (count,) = struct.unpack("<I", f.read(4))
        for i in range(count):
            head = f.read(4)
            if len(head) != 4:
                raise CacheError(f"{path}: truncated at tensor {i}")
            (rank,) = struct.unpack("<I", head)
            dims = struct.unpack(f"<{rank}I", f.read(4 * rank))
            n = int(np.prod(dims, dtype=np.int64))
            payload = f.read(4 * n)
            if len(payload) != 4 * n:
                raise CacheError(f"{path}: truncated at tensor {i}")
            yield np.frombuffer(payload, dtype="<f4").reshape(dims)


def read_cache(path: Union[str, Path]) -> np.ndarray:
    """Load a cache of equally-shaped tensors as one stacked float32 array."""
    tensors = list(iter_cache(path))
    if not tensors:
        raise CacheError(f"{path}: empty cache")
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise CacheError(f"{path}: mixed tensor shapes {sorted(shapes)}")
    return np.stack(tensors).astype(np.float32)


def write_labels(path: Union[str, Path], labels: Sequence[int]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["index", "label"])
        for i, label in enumerate(labels):
            w.writerow([i, int(label)])


def read_labels(path: Union[str, Path]) -> np.ndarray:
    with open(path, encoding="utf-8", newline="") as f:
        rows = list(csv.DictReader(f))
    idx = [int(r["index"]) for r in rows]
    if idx != list(range(len(idx))):
        raise CacheError(f"{path}: indices must be 0..n-1 in order")
    return np.array([int(r["label"]) for r in rows], dtype=np.int64)


def featurize_dataset(
    manifest: DatasetManifest,
    cfg: IatConfig,
    representation: str,
    cache_path: Union[str, Path],
    labels_path: Union[str, Path],
    jobs: int = 1,
) -> int:
    """Featurize every manifest trace in order into a cache and a labels CSV."""
    if not len(manifest):
        raise ConfigError("manifest has no traces")
    featurizer(representation, cfg)  # validates the representation early
    work = [(e.path, representation, cfg) for e in manifest.entries]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(jobs) as pool:
            tensors = list(pool.map(_featurize_path, work, chunksize=16))
    else:
        tensors = [_featurize_path(w) for w in work]
    n = write_cache(cache_path, tensors)
    write_labels(labels_path, manifest.labels)
    return n

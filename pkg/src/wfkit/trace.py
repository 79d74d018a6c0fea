"""Cell traces, datasets, and the on-disk trace format.

A trace file is UTF-8 text with one cell per line, ``t<TAB>d`` where ``t`` is
a timestamp in seconds and ``d`` is ``1`` (outgoing) or ``-1`` (incoming).
An optional third column ``r``/``d`` marks real or dummy cells in defended
traces; plain parsing ignores it.
"""
from __future__ import annotations

import csv
import io
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence, TextIO, Union

import numpy as np

OUT = 1
IN = -1

# Non-monotone timestamps within this tolerance are clamped, not rejected.
ORDER_TOLERANCE = 1e-6

_MONITORED = re.compile(r"^(\d+)-(\d+)\.cell$")
_NONMONITORED = re.compile(r"^(\d+)\.cell$")


class TraceFormatError(ValueError):
    """A trace file line could not be parsed."""

    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class TraceOrderError(TraceFormatError):
    """Timestamps decrease by more than the jitter tolerance."""


class DatasetError(ValueError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Trace:
    """Timestamp-sorted cells of one page load.

    ``times`` are float64 seconds, ``directions`` are int8 in {+1, -1}.
    ``label`` is the class id, or the non-monitored class id ``C``; ``None``
    for unlabeled traces.
    """

    times: np.ndarray
    directions: np.ndarray
    label: int | None = None

    def __post_init__(self):
        times = np.array(self.times, dtype=np.float64).reshape(-1)
        dirs = np.array(self.directions, dtype=np.int8).reshape(-1)
        if times.shape != dirs.shape:
            raise ValueError("times and directions differ in length")
        if times.size:
            if not np.all(np.isfinite(times)) or times.min() < 0:
                raise ValueError("timestamps must be finite and non-negative")
            if np.any(np.diff(times) < 0):
                raise ValueError("timestamps must be non-decreasing")
            if not np.all((dirs == OUT) | (dirs == IN)):
                raise ValueError("directions must be +1 or -1")
        object.__setattr__(self, "times", _frozen(times))
        object.__setattr__(self, "directions", _frozen(dirs))

    def __len__(self) -> int:
        return int(self.times.size)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Trace):
            return NotImplemented
        return (
            self.label == other.label
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.directions, other.directions)
        )

    @property
    def duration(self) -> float:
        return float(self.times[-1] - self.times[0]) if len(self) else 0.0

    def normalized(self) -> "Trace":
        """Shift timestamps so the first cell is at 0."""
        if not len(self) or self.times[0] == 0:
            return self
        return Trace(self.times - self.times[0], self.directions, self.label)

    def with_label(self, label: int | None) -> "Trace":
        return Trace(self.times, self.directions, label)


def inter_arrival_times(trace: Trace) -> np.ndarray:
    """Gap to the previous cell; the first cell gets 0."""
    delta = np.zeros_like(trace.times)
    if len(trace) > 1:
        delta[1:] = trace.times[1:] - trace.times[:-1]
    return delta


def _parse_lines(stream: Iterable[str], with_provenance: bool):
    times, dirs, dummy = [], [], []
    prev = None
    for lineno, raw in enumerate(stream, start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split("\t") if "\t" in line else line.split()
        if len(parts) not in (2, 3):
            raise TraceFormatError(lineno, f"expected 2 or 3 columns, got {len(parts)}")
        try:
            t = float(parts[0])
        except ValueError:
            raise TraceFormatError(lineno, f"bad timestamp {parts[0]!r}") from None
        if not np.isfinite(t) or t < 0:
            raise TraceFormatError(lineno, f"bad timestamp {parts[0]!r}")
        if parts[1] not in ("1", "-1", "+1"):
            raise TraceFormatError(lineno, f"direction must be 1 or -1, got {parts[1]!r}")
        if prev is not None and t < prev:
            if prev - t > ORDER_TOLERANCE:
                raise TraceOrderError(lineno, f"timestamp {t} precedes {prev}")
            t = prev
        prev = t
        times.append(t)
        dirs.append(int(parts[1]))
        if with_provenance:
            tag = parts[2] if len(parts) == 3 else "r"
            if tag not in ("r", "d"):
                raise TraceFormatError(lineno, f"provenance must be r or d, got {tag!r}")
            dummy.append(tag == "d")
    return times, dirs, dummy


def parse_trace(stream: Union[str, TextIO], label: int | None = None) -> Trace:
    """Parse trace text (a string or text stream) into a normalized Trace."""
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    times, dirs, _ = _parse_lines(stream, with_provenance=False)
    return Trace(np.asarray(times, dtype=np.float64), dirs, label).normalized()


def format_trace(trace: Trace, dummy: Sequence[bool] | None = None) -> str:
    """Serialize to the trace text format (6 decimal places)."""
    buf = io.StringIO()
    if dummy is None:
        for t, d in zip(trace.times.tolist(), trace.directions.tolist()):
            buf.write(f"{t:.6f}\t{d}\n")
    else:
        for t, d, m in zip(trace.times.tolist(), trace.directions.tolist(), dummy):
            buf.write(f"{t:.6f}\t{d}\t{'d' if m else 'r'}\n")
    return buf.getvalue()


def load_trace(path: Union[str, Path], label: int | None = None) -> Trace:
    with open(path, encoding="utf-8") as f:
        try:
            return parse_trace(f, label)
        except TraceFormatError as e:
            raise TraceFormatError(e.lineno, f"{path}: {e}") from None


def save_trace(trace: Trace, path: Union[str, Path], dummy: Sequence[bool] | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(format_trace(trace, dummy))


@dataclass(frozen=True)
class ManifestEntry:
    path: Path
    label: int
    monitored: bool


@dataclass(frozen=True)
class DatasetManifest:
    """Trace files with labels; non-monitored traces carry label ``class_count``."""

    entries: tuple[ManifestEntry, ...]
    class_count: int
    has_nonmonitored: bool = field(default=False)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.entries], dtype=np.int64)

    @property
    def paths(self) -> list[Path]:
        return [e.path for e in self.entries]

    def load(self, index: int) -> Trace:
        e = self.entries[index]
        return load_trace(e.path, e.label)

    def to_csv(self, path: Union[str, Path]) -> None:
        base = Path(path).resolve().parent
        with open(path, "w", encoding="utf-8", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["path", "label"])
            for e in self.entries:
                w.writerow([Path(os.path.relpath(e.path.resolve(), base)).as_posix(), e.label])

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "DatasetManifest":
        """Read a manifest CSV; relative paths resolve against its directory."""
        path = Path(path)
        rows = []
        with open(path, encoding="utf-8", newline="") as f:
            reader = csv.DictReader(f)
            if reader.fieldnames is None or reader.fieldnames[:2] != ["path", "label"]:
                raise DatasetError(f"{path}: expected header 'path,label'")
            for row in reader:
                rows.append((path.parent / row["path"], int(row["label"])))
        if not rows:
            raise DatasetError(f"{path}: manifest is empty")
        mon = [label for p, label in rows if _MONITORED.match(p.name)]
        class_count = max(mon) + 1 if mon else max(label for _, label in rows)
        entries = tuple(
            ManifestEntry(p, label, label < class_count) for p, label in rows
        )
        return cls(entries, class_count, any(not e.monitored for e in entries))


def scan_dataset(root: Union[str, Path]) -> DatasetManifest:
    """Index ``<class>-<instance>.cell`` and ``<id>.cell`` files under ``root``."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"{root}: not a directory")
    monitored: dict[tuple[int, int], Path] = {}
    nonmonitored: dict[int, Path] = {}
    for p in sorted(root.iterdir()):
        m = _MONITORED.match(p.name)
        if m:
            key = (int(m.group(1)), int(m.group(2)))
            if key in monitored:
                raise DatasetError(
                    f"duplicate trace for class {key[0]} instance {key[1]}: "
                    f"{monitored[key].name}, {p.name}"
                )
            monitored[key] = p
            continue
        m = _NONMONITORED.match(p.name)
        if m:
            key2 = int(m.group(1))
            if key2 in nonmonitored:
                raise DatasetError(f"duplicate non-monitored id {key2}")
            nonmonitored[key2] = p
    if not monitored and not nonmonitored:
        raise DatasetError(f"{root}: no .cell files")
    if not monitored:
        raise DatasetError(f"{root}: no monitored traces")
    class_count = 1 + max(c for c, _ in monitored)
    paths = sorted(
        [(p, c, True) for (c, _), p in monitored.items()]
        + [(p, class_count, False) for p in nonmonitored.values()],
        key=lambda x: str(x[0]),
    )
    entries = tuple(ManifestEntry(p, label, mon) for p, label, mon in paths)
    return DatasetManifest(entries, class_count, bool(nonmonitored))


def filter_short(manifest: DatasetManifest, min_cells: int = 50) -> DatasetManifest:
    """Drop traces with fewer than ``min_cells`` cells."""
    keep = tuple(e for e in manifest.entries if len(load_trace(e.path)) >= min_cells)
    if not keep:
        raise DatasetError("no traces left after length filter")
    return DatasetManifest(keep, manifest.class_count, any(not e.monitored for e in keep))

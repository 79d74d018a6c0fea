"""Traffic-shaping defense simulators and dataset overhead accounting.

Every simulator maps an undefended trace to a :class:`DefendedTrace` whose
cells carry real/dummy provenance. Randomized simulators draw from a
generator seeded with ``(seed, stream)`` so each trace of a dataset gets its
own reproducible stream.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .trace import IN, OUT, Trace


class DefenseConfigError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DefendedTrace:
    """Cells after a defense; ``origin`` indexes the source trace, -1 for dummies."""

    times: np.ndarray
    directions: np.ndarray
    dummy: np.ndarray
    origin: np.ndarray
    label: int | None = None

    def __post_init__(self):
        for name in ("times", "directions", "dummy", "origin"):
            getattr(self, name).setflags(write=False)

    def __len__(self) -> int:
        return int(self.times.size)

    @property
    def real_count(self) -> int:
        return int(np.count_nonzero(~self.dummy))

    @property
    def dummy_count(self) -> int:
        return int(np.count_nonzero(self.dummy))

    def last_real_time(self) -> float:
        real = self.times[~self.dummy]
        return float(real[-1]) if real.size else 0.0

    def to_trace(self) -> Trace:
        """Drop provenance; what an on-path observer sees."""
        return Trace(self.times, self.directions, self.label)


def _assemble(trace: Trace, times, dirs, dummy, origin) -> DefendedTrace:
    times = np.asarray(times, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.int8)
    dummy = np.asarray(dummy, dtype=bool)
    origin = np.asarray(origin, dtype=np.int64)
    # stable: ties keep real before dummy, then source order
    order = np.lexsort((origin + np.where(dummy, len(trace), 0), dummy, times))
    return DefendedTrace(times[order], dirs[order], dummy[order], origin[order], trace.label)


def undefended(trace: Trace) -> DefendedTrace:
    n = len(trace)
    return DefendedTrace(
        trace.times.copy(), trace.directions.copy(), np.zeros(n, bool),
        np.arange(n, dtype=np.int64), trace.label,
    )


def front(
    trace: Trace,
    n_min: int = 1,
    n_max: int = 1700,
    w_min: float = 1.0,
    w_max: float = 14.0,
    seed: int = 0,
    stream: int = 0,
) -> DefendedTrace:
    """Front-loaded padding: Rayleigh-timed dummies in both directions.

    For each direction a dummy count is drawn uniformly from
    ``[n_min, n_max]`` and a window ``w`` uniformly from ``[w_min, w_max]``;
    dummy timestamps are Rayleigh with scale ``w``. Real cells are untouched.
    """
    if not (1 <= n_min <= n_max):
        raise DefenseConfigError(f"need 1 <= n_min <= n_max, got {n_min}, {n_max}")
    if not (0 < w_min <= w_max):
        raise DefenseConfigError(f"need 0 < w_min <= w_max, got {w_min}, {w_max}")
    rng = np.random.default_rng([seed, stream])
    times = [trace.times]
    dirs = [trace.directions]
    for direction in (OUT, IN):
        n = int(rng.integers(n_min, n_max, endpoint=True))
        w = float(rng.uniform(w_min, w_max))
        times.append(rng.rayleigh(w, size=n))
        dirs.append(np.full(n, direction, dtype=np.int8))
    n_real = len(trace)
    n_dummy = sum(len(t) for t in times[1:])
    dummy = np.r_[np.zeros(n_real, bool), np.ones(n_dummy, bool)]
    origin = np.r_[np.arange(n_real), -np.ones(n_dummy, dtype=np.int64)]
    return _assemble(trace, np.concatenate(times), np.concatenate(dirs), dummy, origin)


def _constant_rate(arrivals: np.ndarray, rho: float, pad_multiple: int) -> np.ndarray:
    """Source position (or -1 for a dummy) of the cell sent at each tick ``k*rho``."""
    sources = []
    k = 0
    for i, a in enumerate(arrivals.tolist()):
        if a > k * rho:
            # idle until the first tick at or after the arrival
            m = max(k, math.ceil(a / rho) - 1)
            while m * rho < a:
                m += 1
            sources.extend([-1] * (m - k))
            k = m
        sources.append(i)
        k += 1
    target = pad_multiple * max(1, math.ceil(k / pad_multiple))
    sources.extend([-1] * (target - k))
    return np.asarray(sources, dtype=np.int64)


def tamaraw(
    trace: Trace,
    rho_out: float = 0.04,
    rho_in: float = 0.012,
    pad_multiple: int = 100,
    seed: int = 0,
    stream: int = 0,
) -> DefendedTrace:
    """Constant-rate shaping with length padding.

    Each direction sends one cell every ``rho`` seconds starting at 0: the
    oldest queued real cell if one has arrived, otherwise a dummy. Sending
    stops once the real cells are out and the direction's cell count is a
    positive multiple of ``pad_multiple``. Deterministic; ``seed`` and
    ``stream`` are accepted for interface uniformity.
    """
    if not (rho_out > 0 and rho_in > 0):
        raise DefenseConfigError("tamaraw rates must be positive")
    if int(pad_multiple) != pad_multiple or pad_multiple < 1:
        raise DefenseConfigError("pad_multiple must be a positive integer")
    times, dirs, dummy, origin = [], [], [], []
    for direction, rho in ((OUT, rho_out), (IN, rho_in)):
        idx = np.flatnonzero(trace.directions == direction)
        src = _constant_rate(trace.times[idx], rho, int(pad_multiple))
        times.append(np.arange(src.size) * rho)
        dirs.append(np.full(src.size, direction, dtype=np.int8))
        dummy.append(src < 0)
        origin.append(idx[src] if idx.size else src)
        origin[-1][src < 0] = -1
    return _assemble(
        trace, np.concatenate(times), np.concatenate(dirs),
        np.concatenate(dummy), np.concatenate(origin),
    )


class DecaySchedule:
    """Tick times of a decaying-rate sender.

    The rate is ``max(rate0 * decay**(t - t_surge), min_rate)`` and tick ``j``
    sits where the rate integrated since the last surge reaches the number of
    ticks since that surge. A surge re-anchors the decay clock at the current
    tick. With ``decay == 1`` the schedule is ``j / rate0`` and surges are
    no-ops.
    """

    def __init__(self, rate0: float, decay: float, min_rate: float):
        self.rate0 = rate0
        self.decay = decay
        self.min_rate = min(min_rate, rate0)
        self.anchor_time = 0.0
        self.anchor_tick = 0
        if decay < 1:
            lnd = math.log(decay)
            # time at which the decayed rate meets the floor, and ticks by then
            self._knee = math.log(self.min_rate / rate0) / lnd
            self._knee_ticks = rate0 * (decay ** self._knee - 1.0) / lnd

    def offset(self, m: int) -> float:
        """Time from the anchor to the ``m``-th tick after it."""
        if self.decay == 1:
            return m / self.rate0
        lnd = math.log(self.decay)
        if m <= self._knee_ticks:
            return math.log1p(m * lnd / self.rate0) / lnd
        return self._knee + (m - self._knee_ticks) / self.min_rate

    def time(self, j: int) -> float:
        if self.decay == 1:
            return j / self.rate0
        return self.anchor_time + self.offset(j - self.anchor_tick)

    def surge(self, j: int) -> None:
        if self.decay < 1:
            self.anchor_time = self.time(j)
            self.anchor_tick = j


def decay_shaper(
    trace: Trace,
    rate0: float = 277.0,
    decay: float = 0.94,
    surge_threshold: float = 3.55,
    out_ratio: float = 0.25,
    min_rate: float = 10.0,
    seed: int = 0,
    stream: int = 0,
) -> DefendedTrace:
    """Simplified decaying-rate shaper.

    Incoming cells leave on a :class:`DecaySchedule`; a tick with no queued
    real incoming cell sends a dummy. When the queued real incoming cells
    outnumber ``surge_threshold`` times the cells sent since the last surge,
    the rate resets to ``rate0``. Outgoing real cells are released in order,
    at most one every ``ceil(1 / out_ratio)`` incoming ticks, and are never
    padded. The schedule ends once every real cell has been sent.
    Deterministic; ``seed``/``stream`` kept for interface uniformity.
    """
    if not rate0 > 0:
        raise DefenseConfigError("rate0 must be positive")
    if not (0 < decay <= 1):
        raise DefenseConfigError("decay must be in (0, 1]")
    if not surge_threshold > 0:
        raise DefenseConfigError("surge_threshold must be positive")
    if not (0 < out_ratio <= 1):
        raise DefenseConfigError("out_ratio must be in (0, 1]")
    if not min_rate > 0:
        raise DefenseConfigError("min_rate must be positive")

    in_idx = np.flatnonzero(trace.directions == IN)
    out_idx = np.flatnonzero(trace.directions == OUT)
    in_t = trace.times[in_idx]
    out_t = trace.times[out_idx]
    every = math.ceil(1.0 / out_ratio - 1e-12)
    sched = DecaySchedule(rate0, decay, min_rate)

    times, dirs, dummy, origin = [], [], [], []
    i_in = i_out = 0
    sent_since_surge = 0
    j = 0
    while i_in < in_idx.size or i_out < out_idx.size:
        t = sched.time(j)
        if i_in < in_idx.size and in_t[i_in] > t and (i_out >= out_idx.size or out_t[i_out] > t):
            # nothing queued in either direction: fast-forward idle ticks as dummies
            nxt = in_t[i_in] if i_out >= out_idx.size else min(in_t[i_in], out_t[i_out])
            while sched.time(j) < nxt:
                times.append(sched.time(j))
                dirs.append(IN)
                dummy.append(True)
                origin.append(-1)
                sent_since_surge += 1
                j += 1
            continue
        queued = int(np.searchsorted(in_t, t, side="right")) - i_in
        if queued > surge_threshold * sent_since_surge:
            sched.surge(j)
            sent_since_surge = 0
            t = sched.time(j)
        times.append(t)
        dirs.append(IN)
        if queued > 0:
            dummy.append(False)
            origin.append(int(in_idx[i_in]))
            i_in += 1
        else:
            dummy.append(True)
            origin.append(-1)
        sent_since_surge += 1
        if j % every == 0 and i_out < out_idx.size and out_t[i_out] <= t:
            times.append(t)
            dirs.append(OUT)
            dummy.append(False)
            origin.append(int(out_idx[i_out]))
            i_out += 1
        j += 1
    if not times:
        return undefended(trace)
    return _assemble(trace, times, dirs, dummy, origin)


def overheads(pairs: Sequence[tuple[Trace, DefendedTrace]]) -> tuple[float, float]:
    """Dataset-wide (data overhead, time overhead).

    Data overhead is total dummies over total real cells. Time overhead is
    the total extra load time over the total original load time, where a
    defended load ends at its last real cell and per-trace savings count as 0.
    """
    if not pairs:
        raise ValueError("overheads need at least one trace pair")
    dummies = reals = 0
    extra = base = 0.0
    for src, dfd in pairs:
        if not len(src):
            raise ValueError("source traces must be non-empty")
        dummies += dfd.dummy_count
        reals += dfd.real_count
        orig = float(src.times[-1])
        extra += max(dfd.last_real_time() - orig, 0.0)
        base += orig
    if base <= 0:
        raise ValueError("total original duration is zero")
    return dummies / reals, extra / base


DEFENSES = {"front": front, "tamaraw": tamaraw, "decay_shaper": decay_shaper}


def apply_defense(kind: str, trace: Trace, params: dict, seed: int, stream: int) -> DefendedTrace:
    try:
        fn = DEFENSES[kind]
    except KeyError:
        raise DefenseConfigError(f"unknown defense {kind!r}") from None
    return fn(trace, seed=seed, stream=stream, **params)

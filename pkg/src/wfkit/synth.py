"""Synthetic labeled traces with class-dependent timing.

Each page load is a sequence of request/response bursts. A burst starts with
an outgoing request, then incoming cells after a server response delay, with
in-burst inter-arrival times drawn from the class's log-normal and an
outgoing ACK-like cell after every few incoming ones. Think-time gaps stretch
the load to a duration drawn from one distribution shared by all classes, so
classes differ in timing structure rather than in load time.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .trace import IN, OUT, DatasetManifest, Trace, save_trace, scan_dataset


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    class_count: int = 10
    traces_per_class: int = 50
    nonmonitored: int = 0
    seed: int = 0
    iat_medians: tuple[float, ...] | None = None
    iat_range: tuple[float, float] = (0.5e-3, 40e-3)
    iat_sigma: float = 0.5
    burst_range: tuple[float, float] = (2.0, 6.0)
    burst_size: float = 50.0
    response_range: tuple[float, float] = (0.05, 0.3)
    response_sigma: float = 0.3
    ack_every: int = 8
    duration_range: tuple[float, float] = (10.0, 16.0)

    def __post_init__(self):
        if self.class_count < 1:
            raise SynthError("class_count must be >= 1")
        if self.traces_per_class < 1:
            raise SynthError("traces_per_class must be >= 1")
        if self.nonmonitored < 0:
            raise SynthError("nonmonitored must be >= 0")
        if self.iat_medians is not None and len(self.iat_medians) != self.class_count:
            raise SynthError("need one IAT median per class")
        positive = [*self.iat_range, self.iat_sigma, *self.burst_range, self.burst_size,
                    *self.response_range, self.response_sigma, *self.duration_range]
        if self.iat_medians is not None:
            positive += list(self.iat_medians)
        if min(positive) <= 0:
            raise SynthError("all rates, sizes and delays must be positive")
        if self.ack_every < 1:
            raise SynthError("ack_every must be >= 1")

    def _spaced(self, bounds: tuple[float, float]) -> np.ndarray:
        if self.class_count == 1:
            return np.array([float(np.sqrt(bounds[0] * bounds[1]))])
        return np.geomspace(bounds[0], bounds[1], self.class_count)

    def class_params(self, cls: int) -> tuple[float, float, float]:
        """(IAT median, mean burst count, response-delay median) of a class."""
        medians = np.asarray(self.iat_medians) if self.iat_medians else self._spaced(self.iat_range)
        return (float(medians[cls]), float(self._spaced(self.burst_range)[cls]),
                float(self._spaced(self.response_range)[cls]))


def _page_load(rng: np.random.Generator, spec: SynthSpec, iat_median, burst_mean, resp_median) -> Trace:
    duration = rng.uniform(*spec.duration_range)
    n_bursts = 1 + rng.poisson(max(burst_mean - 1.0, 0.0))
    times: list[np.ndarray] = []
    dirs: list[np.ndarray] = []
    bursts = []
    for _ in range(n_bursts):
        size = 1 + rng.poisson(spec.burst_size - 1.0)
        resp = rng.lognormal(np.log(resp_median), spec.response_sigma)
        gaps = rng.lognormal(np.log(iat_median), spec.iat_sigma, size=size)
        gaps[0] = resp
        incoming = np.cumsum(gaps)
        acks = incoming[spec.ack_every - 1::spec.ack_every] + rng.lognormal(np.log(1e-4), 0.5, size=size // spec.ack_every)
        bursts.append((incoming, acks))
    span = sum(float(max(b[0][-1], b[1][-1] if b[1].size else 0.0)) for b in bursts)
    slack = max(duration - span, 0.0)
    think = slack * rng.dirichlet(np.ones(n_bursts - 1)) if n_bursts > 1 else np.zeros(0)
    start = 0.0
    for b, (incoming, acks) in enumerate(bursts):
        times += [np.array([start]), start + incoming, start + acks]
        dirs += [np.array([OUT]), np.full(incoming.size, IN), np.full(acks.size, OUT)]
        end = start + max(incoming[-1], acks[-1] if acks.size else 0.0)
        if b < n_bursts - 1:
            start = end + think[b]
    t = np.concatenate(times)
    d = np.concatenate(dirs)
    order = np.argsort(t, kind="stable")
    return Trace(t[order], d[order])


def generate_trace(spec: SynthSpec, cls: int, instance: int) -> Trace:
    """One trace, deterministic in ``(spec.seed, cls, instance)``.

    ``cls == spec.class_count`` draws a non-monitored page whose parameters
    are themselves random per instance.
    """
    rng = np.random.default_rng([spec.seed, cls, instance])
    if cls < spec.class_count:
        params = spec.class_params(cls)
    elif cls == spec.class_count:
        lo, hi = np.log(spec.iat_range)
        params = (
            float(np.exp(rng.uniform(lo, hi))),
            float(rng.uniform(*spec.burst_range)),
            float(rng.uniform(*spec.response_range)),
        )
    else:
        raise SynthError(f"class {cls} out of range")
    return _page_load(rng, spec, *params).with_label(cls)


def generate(spec: SynthSpec, out_dir: Union[str, Path]) -> DatasetManifest:
    """Write the dataset (``<class>-<instance>.cell``, ``<id>.cell``) and ``manifest.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for c in range(spec.class_count):
        for i in range(spec.traces_per_class):
            save_trace(generate_trace(spec, c, i), out / f"{c}-{i}.cell")
    for j in range(spec.nonmonitored):
        save_trace(generate_trace(spec, spec.class_count, j), out / f"{j}.cell")
    manifest = scan_dataset(out)
    manifest.to_csv(out / "manifest.csv")
    return manifest


def incoming_iats(trace: Trace) -> np.ndarray:
    """Gaps between consecutive incoming cells."""
    return np.diff(trace.times[trace.directions == IN])


def class_mean_features(features: np.ndarray, labels: Sequence[int]) -> dict[int, np.ndarray]:
    labels = np.asarray(labels)
    return {int(c): features[labels == c].mean(axis=0) for c in np.unique(labels)}

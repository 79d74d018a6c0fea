"""The WFCAT network: Inception2d+SE stem, Conv2d blocks, Inception1d blocks, GAP head.

Input batches are ``[N, G, L, 2]``: IAT bins are channels, time slots are the
height and the two directions are the width, so the SE gate weights IAT bins.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Union

import numpy as np

from . import tensor as T
from .tensor import Parameter, ShapeError, Tensor


class ModelConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    class_count: int
    bins: int = 9
    slots: int = 1800
    kernels: int = 4
    se_reduction: int = 16
    stem_channels: int = 32
    conv2d_channels: int = 64
    conv1d_channels: int = 128
    dropout: float = 0.1
    pool: int = 2
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        if self.class_count < 2:
            raise ModelConfigError("class_count must be at least 2")
        if self.kernels < 1:
            raise ModelConfigError("kernels must be >= 1")
        if self.bins < 1 or self.slots < 1:
            raise ModelConfigError("bins and slots must be positive")
        if self.stem_channels % self.kernels or self.stem_channels % self.se_reduction:
            raise ModelConfigError("stem_channels must be divisible by kernels and se_reduction")
        if self.conv1d_channels % self.kernels:
            raise ModelConfigError("conv1d_channels must be divisible by kernels")
        if not 0 <= self.dropout < 1:
            raise ModelConfigError("dropout must be in [0, 1)")
        if self.pool < 1:
            raise ModelConfigError("pool must be >= 1")
        if self.slots // self.pool ** 4 < 1:
            raise ModelConfigError(f"slots={self.slots} too short for four pooling stages")
        if self.dtype not in ("float32", "float64"):
            raise ModelConfigError("dtype must be float32 or float64")

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in types:
                raise ModelConfigError(f"unknown model config key {key!r}")
            kind = types[key]
            kw[key] = value if kind == "str" else float(value) if kind == "float" else int(value)
        return cls(**kw)


def _uniform(rng, shape, fan_in, dtype, name) -> Parameter:
    bound = 1.0 / np.sqrt(fan_in)
    return Parameter(rng.uniform(-bound, bound, size=shape).astype(dtype), name)


def _zeros(shape, dtype, name) -> Parameter:
    return Parameter(np.zeros(shape, dtype=dtype), name)


class BatchNorm:
    def __init__(self, name, channels, dtype, momentum, eps):
        self.gamma = Parameter(np.ones(channels, dtype=dtype), f"{name}.gamma")
        self.beta = _zeros(channels, dtype, f"{name}.beta")
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.name, self.momentum, self.eps = name, momentum, eps

    def params(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return {f"{self.name}.running_mean": self.running_mean, f"{self.name}.running_var": self.running_var}

    def __call__(self, x, training):
        return T.batchnorm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                           training, self.momentum, self.eps)


class Conv2dBN:
    """``kh x 1`` conv with same-padding on height, then BN and GELU."""

    def __init__(self, name, cin, cout, kh, rng, cfg):
        dt = cfg.dtype
        self.weight = _uniform(rng, (cout, cin, kh, 1), cin * kh, dt, f"{name}.weight")
        self.bias = _zeros(cout, dt, f"{name}.bias")
        self.bn = BatchNorm(f"{name}.bn", cout, dt, cfg.bn_momentum, cfg.bn_eps)
        self.pad = (kh // 2, 0)

    def params(self):
        return [self.weight, self.bias] + self.bn.params()

    def buffers(self):
        return self.bn.buffers()

    def __call__(self, x, training):
        return T.gelu(self.bn(T.conv2d(x, self.weight, self.bias, self.pad), training))


class Inception2dSE:
    """Multi-height ``(2k+1) x 2`` branches, concatenated, then squeeze-excitation gating.

    The direction axis (width 2) collapses to 1. ``last_gate`` holds the most
    recent ``[N, C]`` gate values.
    """

    def __init__(self, name, cin, cout, kernels, reduction, rng, dtype):
        if cout % kernels:
            raise ModelConfigError("inception output channels must be divisible by kernels")
        per = cout // kernels
        self.branches = []
        for k in range(kernels):
            h = 2 * k + 1
            w = _uniform(rng, (per, cin, h, 2), cin * h * 2, dtype, f"{name}.branch{k}.weight")
            b = _zeros(per, dtype, f"{name}.branch{k}.bias")
            self.branches.append((w, b, k))
        hidden = max(cout // reduction, 1)
        self.fc1_w = _uniform(rng, (cout, hidden), cout, dtype, f"{name}.se.fc1.weight")
        self.fc1_b = _zeros(hidden, dtype, f"{name}.se.fc1.bias")
        self.fc2_w = _uniform(rng, (hidden, cout), hidden, dtype, f"{name}.se.fc2.weight")
        self.fc2_b = _zeros(cout, dtype, f"{name}.se.fc2.bias")
        self.last_gate: np.ndarray | None = None

    def params(self):
        out = []
        for w, b, _ in self.branches:
            out += [w, b]
        return out + [self.fc1_w, self.fc1_b, self.fc2_w, self.fc2_b]

    def buffers(self):
        return {}

    def inception(self, x: Tensor) -> list[Tensor]:
        if x.shape[3] != 2:
            raise ShapeError(f"inception2d expects width 2, got {x.shape[3]}")
        return [T.conv2d(x, w, b, pad=(k, 0)) for w, b, k in self.branches]

    def __call__(self, x, training=False):
        feats = T.concat(self.inception(x), axis=1)
        squeeze = T.global_avg_pool(feats)
        gate = T.sigmoid(T.linear(T.gelu(T.linear(squeeze, self.fc1_w, self.fc1_b)), self.fc2_w, self.fc2_b))
        self.last_gate = gate.data
        return T.mul(feats, T.reshape(gate, gate.shape + (1, 1)))


class Inception1dBN:
    """Kernel sizes ``2k+1`` with same padding, concatenated, then BN and GELU."""

    def __init__(self, name, cin, cout, kernels, rng, cfg):
        per = cout // kernels
        dt = cfg.dtype
        self.branches = []
        for k in range(kernels):
            size = 2 * k + 1
            w = _uniform(rng, (per, cin, size), cin * size, dt, f"{name}.branch{k}.weight")
            b = _zeros(per, dt, f"{name}.branch{k}.bias")
            self.branches.append((w, b, k))
        self.bn = BatchNorm(f"{name}.bn", cout, dt, cfg.bn_momentum, cfg.bn_eps)

    def params(self):
        out = []
        for w, b, _ in self.branches:
            out += [w, b]
        return out + self.bn.params()

    def buffers(self):
        return self.bn.buffers()

    def __call__(self, x, training):
        y = T.concat([T.conv1d(x, w, b, pad=k) for w, b, k in self.branches], axis=1)
        return T.gelu(self.bn(y, training))


class WfcatModel:
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.training = False
        rng = np.random.default_rng([cfg.seed, 0])
        self.dropout_rng = np.random.default_rng([cfg.seed, 1])
        dt = cfg.dtype
        c0, c2, c1 = cfg.stem_channels, cfg.conv2d_channels, cfg.conv1d_channels
        self.a1 = Inception2dSE("a1", cfg.bins, c0, cfg.kernels, cfg.se_reduction, rng, dt)
        self.a2 = Conv2dBN("a2", c0, c0, 3, rng, cfg)
        self.a3 = Conv2dBN("a3", c0, c2, 3, rng, cfg)
        self.a4 = Conv2dBN("a4", c2, c2, 3, rng, cfg)
        self.b1 = Inception1dBN("b1", c2, c1, cfg.kernels, rng, cfg)
        self.b2 = Inception1dBN("b2", c1, c1, cfg.kernels, rng, cfg)
        self.head_w = _uniform(rng, (cfg.class_count, c1, 1), c1, dt, "head.weight")
        self.head_b = _zeros(cfg.class_count, dt, "head.bias")
        self.blocks = [self.a1, self.a2, self.a3, self.a4, self.b1, self.b2]

    def parameters(self) -> "OrderedDict[str, Parameter]":
        params = [p for blk in self.blocks for p in blk.params()] + [self.head_w, self.head_b]
        return OrderedDict((p.name, p) for p in params)

    def buffers(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for blk in self.blocks:
            out.update(blk.buffers())
        return out

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters().values())

    def train(self) -> "WfcatModel":
        self.training = True
        return self

    def eval(self) -> "WfcatModel":
        self.training = False
        return self

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def __call__(self, batch) -> Tensor:
        return self.forward(batch)

    def forward(self, batch) -> Tensor:
        cfg = self.cfg
        x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=cfg.dtype))
        if x.ndim != 4 or x.shape[1:] != (cfg.bins, cfg.slots, 2):
            raise ShapeError(f"expected input [N, {cfg.bins}, {cfg.slots}, 2], got {list(x.shape)}")
        tr, p, rng = self.training, cfg.dropout, self.dropout_rng
        x = self.a1(x)
        x = self.a2(x, tr)
        x = T.dropout(T.avgpool2d(x, (cfg.pool, 1)), p, tr, rng)
        x = self.a4(self.a3(x, tr), tr)
        x = T.dropout(T.avgpool2d(x, (cfg.pool, 1)), p, tr, rng)
        x = T.reshape(x, x.shape[:3])
        x = T.dropout(T.avgpool1d(self.b1(x, tr), cfg.pool), p, tr, rng)
        x = T.dropout(T.avgpool1d(self.b2(x, tr), cfg.pool), p, tr, rng)
        return T.global_avg_pool(T.conv1d(x, self.head_w, self.head_b))

    def predict_proba(self, features: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Class probabilities in eval mode for ``[N, G, L, 2]`` inputs."""
        was = self.training
        self.eval()
        out = []
        try:
            for i in range(0, len(features), batch_size):
                out.append(T.softmax(self.forward(features[i:i + batch_size]).data.astype(np.float64)))
        finally:
            self.training = was
        return np.concatenate(out) if out else np.zeros((0, self.cfg.class_count))

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((k, p.data) for k, p in self.parameters().items())
        state.update(self.buffers())
        return state

    def load_state_dict(self, state: dict) -> None:
        params, bufs = self.parameters(), self.buffers()
        missing = (set(params) | set(bufs)) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks {sorted(missing)}")
        for k, p in params.items():
            if state[k].shape != p.data.shape:
                raise ShapeError(f"{k}: checkpoint shape {state[k].shape} vs model {p.data.shape}")
            p.data[...] = state[k]
        for k, b in bufs.items():
            b[...] = state[k]

    def save(self, path: Union[str, Path], step: int | None = None) -> None:
        opt = None
        if step is not None:
            opt = (step, {k: (p.m, p.v) for k, p in self.parameters().items()})
        T.save_checkpoint(path, self.state_dict(), opt)

    @classmethod
    def load(cls, path: Union[str, Path], cfg: ModelConfig) -> "WfcatModel":
        model = cls(cfg)
        state, opt = T.load_checkpoint(path)
        model.load_state_dict(state)
        if opt is not None:
            for k, (m, v) in opt[1].items():
                p = model.parameters()[k]
                p.m[...] = m
                p.v[...] = v
        return model


def build_wfcat(cfg: ModelConfig) -> WfcatModel:
    return WfcatModel(cfg)


def forward(model: WfcatModel, batch, mode: str = "eval") -> Tensor:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be train or eval, got {mode!r}")
    model.training = mode == "train"
    return model.forward(batch)


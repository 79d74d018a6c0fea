"""A small reverse-mode autodiff core with the layers the WFCAT model uses.

Tensors wrap numpy arrays. Each op records its parents and a closure that
pushes the output gradient back; :meth:`Tensor.backward` walks the graph in
reverse topological order. Ops compute in the dtype of their inputs, so the
same graph runs in float32 for training and float64 for gradient checks.
"""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path
from typing import Callable, Iterable, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf, expit

_SQRT2 = np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a gradient needs a scalar")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.asarray(grad, dtype=self.dtype)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if node._parents:
                    # interior gradients are not needed once propagated
                    node.grad = None

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def sum(self):
        return sum_all(self)


class Parameter(Tensor):
    """A trainable tensor with Adam moment buffers."""

    __slots__ = ("name", "trainable", "m", "v")

    def __init__(self, data, name: str = "", trainable: bool = True, dtype=None):
        super().__init__(data, requires_grad=trainable, dtype=dtype)
        self.name = name
        self.trainable = trainable
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _node(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    out.op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), backward, "mul")


def sum_all(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, np.broadcast_to(g, a.shape).astype(a.dtype))

    return _node(np.asarray(a.data.sum(), dtype=a.dtype), (a,), backward, "sum")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    def backward(g):
        _accum(a, g.reshape(a.shape))

    return _node(a.data.reshape(shape), (a,), backward, "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, part in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, part)

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


# convolution ---------------------------------------------------------------


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _conv2d_arrays(x, w, pad, stride):
    N, C, H, W = x.shape
    Co, Ci, kh, kw = w.shape
    ph, pw = pad
    sh, sw = stride
    if Ci != C:
        raise ShapeError(f"input has {C} channels, weight expects {Ci}")
    if kh > H + 2 * ph or kw > W + 2 * pw:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {H + 2 * ph}x{W + 2 * pw}")
    Ho = (H + 2 * ph - kh) // sh + 1
    Wo = (W + 2 * pw - kw) // sw + 1
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :Ho, :Wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(N * Ho * Wo, C * kh * kw)
    wmat = w.reshape(Co, -1)
    out = (cols @ wmat.T).reshape(N, Ho, Wo, Co).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), cols, xp.shape, (Ho, Wo)


def _conv2d_grads(g, x_shape, xp_shape, cols, w, pad, stride, out_hw):
    N, C, H, W = x_shape
    Co, Ci, kh, kw = w.shape
    ph, pw = pad
    sh, sw = stride
    Ho, Wo = out_hw
    g2 = g.transpose(0, 2, 3, 1).reshape(-1, Co)
    dw = (g2.T @ cols).reshape(w.shape)
    db = g2.sum(axis=0)
    # channel-major column gradients so the scatter below adds contiguous blocks
    dcols = (w.reshape(Co, -1).T @ g.transpose(1, 0, 2, 3).reshape(Co, -1))
    dcols = dcols.reshape(C, kh, kw, N, Ho, Wo)
    dxp = np.zeros((C, N) + xp_shape[2:], dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + sh * (Ho - 1) + 1:sh, j:j + sw * (Wo - 1) + 1:sw] += dcols[:, i, j]
    dx = dxp[:, :, ph:ph + H, pw:pw + W].transpose(1, 0, 2, 3)
    return dx, dw, db


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, pad=(0, 0), stride=(1, 1)) -> Tensor:
    """Cross-correlation of ``[N,Cin,H,W]`` with ``[Cout,Cin,kh,kw]``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv2d expects 4-d input and weight")
    pad, stride = _pair(pad), _pair(stride)
    out, cols, xp_shape, out_hw = _conv2d_arrays(x.data, weight.data, pad, stride)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1)

    def backward(g):
        dx, dw, db = _conv2d_grads(g, x.shape, xp_shape, cols, weight.data, pad, stride, out_hw)
        _accum(x, dx)
        _accum(weight, dw)
        if bias is not None:
            _accum(bias, db)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, backward, "conv2d")


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, pad: int = 0, stride: int = 1) -> Tensor:
    """Cross-correlation of ``[N,Cin,T]`` with ``[Cout,Cin,k]``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 3:
        raise ShapeError("conv1d expects 3-d input and weight")
    pad2, stride2 = (int(pad), 0), (int(stride), 1)
    w4 = weight.data[..., None]
    out, cols, xp_shape, out_hw = _conv2d_arrays(x.data[..., None], w4, pad2, stride2)
    out = out[..., 0]
    if bias is not None:
        out += bias.data.reshape(1, -1, 1)

    def backward(g):
        dx, dw, db = _conv2d_grads(
            g[..., None], x.shape + (1,), xp_shape, cols, w4, pad2, stride2, out_hw
        )
        _accum(x, dx[..., 0])
        _accum(weight, dw[..., 0])
        if bias is not None:
            _accum(bias, db)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, backward, "conv1d")


# normalization and activations ---------------------------------------------


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over ``[N, C, ...]``.

    In training mode the batch statistics normalize the input and the running
    buffers are updated in place (variance with Bessel's correction).
    """
    x = as_tensor(x)
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    n = x.data.size // x.shape[1]
    if training:
        if n <= 1:
            raise ShapeError("batchnorm in training mode needs more than one value per channel")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * n / (n - 1)
    else:
        mean, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mean.reshape(bshape).astype(x.dtype)) * inv_std.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def backward(g):
        _accum(gamma, (g * xhat).sum(axis=axes))
        _accum(beta, g.sum(axis=axes))
        if not x.requires_grad:
            return
        dxhat = g * gamma.data.reshape(bshape)
        if training:
            s1 = dxhat.sum(axis=axes, keepdims=True)
            s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
            dx = (dxhat - s1 / n - xhat * s2 / n) * inv_std.reshape(bshape)
        else:
            dx = dxhat * inv_std.reshape(bshape)
        _accum(x, dx)

    return _node(out, (x, gamma, beta), backward, "batchnorm")


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        _accum(x, g * (cdf + x.data * pdf))

    return _node(x.data * cdf, (x,), backward, "gelu")


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    s = expit(x.data)

    def backward(g):
        _accum(x, g * s * (1.0 - s))

    return _node(s, (x,), backward, "sigmoid")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` shaped ``[F_in, F_out]``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear: cannot apply {weight.shape} to {x.shape}")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data

    def backward(g):
        _accum(x, g @ weight.data.T)
        _accum(weight, x.data.T @ g)
        if bias is not None:
            _accum(bias, g.sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, backward, "linear")


# pooling and regularization -------------------------------------------------


def _avgpool(x: Tensor, window: tuple[int, ...], stride: tuple[int, ...], op: str) -> Tensor:
    spatial = x.shape[2:]
    if len(window) != len(spatial):
        raise ShapeError(f"{op}: window rank {len(window)} vs input spatial rank {len(spatial)}")
    if any(k > n for k, n in zip(window, spatial)):
        raise ShapeError(f"{op}: window {window} larger than input {spatial}")
    out_sz = tuple((n - k) // s + 1 for n, k, s in zip(spatial, window, stride))
    scale = 1.0 / float(np.prod(window))
    offsets = list(np.ndindex(*window))

    def view(offset):
        return (slice(None), slice(None)) + tuple(
            slice(o, o + s * (m - 1) + 1, s) for o, s, m in zip(offset, stride, out_sz)
        )

    out = np.zeros(x.shape[:2] + out_sz, dtype=x.dtype)
    for off in offsets:
        out += x.data[view(off)]
    out *= scale

    def backward(g):
        dx = np.zeros_like(x.data)
        gs = g * scale
        for off in offsets:
            dx[view(off)] += gs
        _accum(x, dx)

    return _node(out, (x,), backward, op)


def avgpool2d(x: Tensor, window=(2, 2), stride=None) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("avgpool2d expects [N,C,H,W]")
    window = _pair(window)
    return _avgpool(x, window, _pair(stride) if stride is not None else window, "avgpool2d")


def avgpool1d(x: Tensor, window: int = 2, stride: int | None = None) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError("avgpool1d expects [N,C,T]")
    return _avgpool(x, (int(window),), (int(stride if stride is not None else window),), "avgpool1d")


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over every axis after the channel axis: ``[N,C,...] -> [N,C]``."""
    x = as_tensor(x)
    if x.ndim < 3:
        raise ShapeError("global_avg_pool expects [N,C,...]")
    axes = tuple(range(2, x.ndim))
    count = int(np.prod(x.shape[2:]))

    def backward(g):
        _accum(x, np.broadcast_to(g.reshape(g.shape + (1,) * len(axes)) / count, x.shape).copy())

    return _node(x.data.mean(axis=axes), (x,), backward, "global_avg_pool")


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity in eval mode or when ``p == 0``."""
    x = as_tensor(x)
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs a generator")
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)

    def backward(g):
        _accum(x, g * mask)

    return _node(x.data * mask, (x,), backward, "dropout")


# loss -------------------------------------------------------------------------


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Batch-mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} and labels {labels.shape} disagree")
    N = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(N)
    loss = np.asarray((lse - z[rows, labels]).mean(), dtype=logits.dtype)

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        _accum(logits, p * (g / N))

    return _node(loss, (logits,), backward, "softmax_cross_entropy")


# optimizer ----------------------------------------------------------------------


def adam_step(
    params: Iterable[Parameter],
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
    t: int = 1,
    decoupled: bool = False,
    grads: Sequence[np.ndarray] | None = None,
) -> None:
    """One Adam update (step number ``t`` >= 1) in place.

    Weight decay is added to the gradient as an L2 term unless ``decoupled``,
    in which case parameters shrink by ``lr * weight_decay`` directly.
    """
    params = list(params)
    if grads is None:
        grads = [p.grad for p in params]
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g in zip(params, grads):
        if not p.trainable or g is None:
            continue
        if weight_decay and not decoupled:
            g = g + weight_decay * p.data
        p.m *= beta1
        p.m += (1.0 - beta1) * g
        p.v *= beta2
        p.v += (1.0 - beta2) * g * g
        if weight_decay and decoupled:
            p.data -= (lr * weight_decay) * p.data
        p.data -= (lr * (p.m / c1) / (np.sqrt(p.v / c2) + eps)).astype(p.dtype)


# checkpoints ----------------------------------------------------------------------

MODEL_MAGIC = b"WFM1"
OPTIM_MAGIC = b"WFO1"


def _write_array(f, name: str, a: np.ndarray) -> None:
    raw = name.encode("utf-8")
    a = np.ascontiguousarray(a, dtype="<f4")
    f.write(struct.pack("<I", len(raw)))
    f.write(raw)
    f.write(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
    f.write(a.tobytes())


def _read_array(f) -> tuple[str, np.ndarray]:
    (nlen,) = struct.unpack("<I", f.read(4))
    name = f.read(nlen).decode("utf-8")
    (rank,) = struct.unpack("<I", f.read(4))
    dims = struct.unpack(f"<{rank}I", f.read(4 * rank))
    n = int(np.prod(dims, dtype=np.int64))
    data = np.frombuffer(f.read(4 * n), dtype="<f4").reshape(dims).copy()
    return name, data


def save_checkpoint(
    path: Union[str, Path],
    arrays: dict[str, np.ndarray],
    optimizer: tuple[int, dict[str, tuple[np.ndarray, np.ndarray]]] | None = None,
) -> None:
    """Atomically write named float32 arrays, optionally with Adam state.

    ``optimizer`` is ``(step, {name: (m, v)})``.
    """
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MODEL_MAGIC)
            f.write(struct.pack("<I", len(arrays)))
            for name, a in arrays.items():
                _write_array(f, name, a)
            if optimizer is not None:
                step, state = optimizer
                f.write(OPTIM_MAGIC)
                f.write(struct.pack("<II", step, len(state)))
                for name, (m, v) in state.items():
                    _write_array(f, name + ".m", m)
                    _write_array(f, name + ".v", v)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: Union[str, Path]):
    """Return ``(arrays, optimizer)`` where ``optimizer`` may be ``None``."""
    with open(path, "rb") as f:
        if f.read(4) != MODEL_MAGIC:
            raise ValueError(f"{path}: not a model checkpoint")
        (count,) = struct.unpack("<I", f.read(4))
        arrays = dict(_read_array(f) for _ in range(count))
        optimizer = None
        if f.read(4) == OPTIM_MAGIC:
            step, n = struct.unpack("<II", f.read(8))
            state = {}
            for _ in range(n):
                mname, m = _read_array(f)
                _, v = _read_array(f)
                state[mname[:-2]] = (m, v)
            optimizer = (step, state)
    return arrays, optimizer

"""A small layer-wise reverse-mode engine on numpy.

Every layer caches what it needs during ``forward`` and turns an output
gradient into an input gradient in ``backward``, accumulating parameter
gradients on the way. Layers are run in a fixed order by their owner, so
there is no graph tracing: owners call ``backward`` in reverse.

Everything is float64. Parameter initialization only depends on the
``numpy.random.Generator`` handed to the constructor.
"""

from __future__ import annotations

from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass, field
import math
from pathlib import Path
import struct
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np
from scipy.stats import truncnorm

from .errors import CorruptWeights, EmptyBatch, NonFiniteTensor, ShapeMismatch

WEIGHTS_MAGIC = b"ADPW"
WEIGHTS_VERSION = 1

_CHECK_FINITE: ContextVar[bool] = ContextVar("check_finite", default=False)


@contextmanager
def check_finite(enabled: bool = True) -> Iterator[None]:
    """Raise :class:`NonFiniteTensor` as soon as a layer produces NaN/inf."""

    token = _CHECK_FINITE.set(enabled)
    try:
        yield
    finally:
        _CHECK_FINITE.reset(token)


def _guard(where: str, x: np.ndarray) -> np.ndarray:
    if _CHECK_FINITE.get() and not np.all(np.isfinite(x)):
        raise NonFiniteTensor(f"non-finite values in {where}")
    return x


@dataclass(eq=False)
class Parameter:
    value: np.ndarray
    grad: np.ndarray = field(init=False)
    # Set when a backward pass reached this parameter since the last zero_grad.
    touched: bool = field(default=False, init=False)

    def __post_init__(self) -> None:
        self.value = np.asarray(self.value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    def accumulate(self, g: np.ndarray) -> None:
        self.grad += g
        self.touched = True

    def zero_grad(self) -> None:
        self.grad.fill(0.0)
        self.touched = False


def init_weight(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    """Truncated normal (two standard deviations), std = 1/sqrt(fan_in)."""

    std = 1.0 / math.sqrt(fan_in)
    return truncnorm.rvs(-2.0, 2.0, scale=std, size=shape, random_state=rng)


class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{full}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise CorruptWeights(f"weight names differ (missing={sorted(missing)}, unexpected={sorted(extra)})")
        for name, p in own.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.value.shape:
                raise CorruptWeights(f"tensor '{name}' has shape {value.shape}, expected {p.value.shape}")
            p.value = value.copy()
            p.grad = np.zeros_like(p.value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def backward(self, dy: np.ndarray):
        raise NotImplementedError


# ---------------------------------------------------------------------------
# Layers


class Linear(Module):
    """``y = x W^T + b`` over the last axis; any leading axes."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator) -> None:
        self.n_in = n_in
        self.n_out = n_out
        self.weight = Parameter(init_weight(rng, (n_out, n_in), n_in))
        self.bias = Parameter(np.zeros(n_out))
        self._x: np.ndarray | None = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.n_in:
            raise ShapeMismatch(f"Linear expects last axis {self.n_in}, got {x.shape}")
        self._x = x
        return _guard("Linear", x @ self.weight.value.T + self.bias.value)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        x = self._x
        assert x is not None, "backward before forward"
        x2 = x.reshape(-1, self.n_in)
        dy2 = dy.reshape(-1, self.n_out)
        self.weight.accumulate(dy2.T @ x2)
        self.bias.accumulate(dy2.sum(axis=0))
        return _guard("Linear.backward", dy @ self.weight.value)


class ReLU(Module):
    def __init__(self) -> None:
        self._mask: np.ndarray | None = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        mask = x > 0
        self._mask = mask
        return np.where(mask, x, 0.0)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        assert self._mask is not None, "backward before forward"
        return np.where(self._mask, dy, 0.0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Sigmoid(Module):
    def __init__(self) -> None:
        self._y: np.ndarray | None = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        y = sigmoid(x)
        self._y = y
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        y = self._y
        assert y is not None, "backward before forward"
        return dy * y * (1.0 - y)


class Sequential(Module):
    def __init__(self, *layers: Module) -> None:
        self.layers = list(layers)

    def forward(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer(x)
        return x

    def backward(self, dy: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy


class Conv1D(Module):
    """Same-length 1D convolution over (B, C, L); kernel 3, zero padding 1."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator, kernel: int = 3) -> None:
        if kernel % 2 != 1:
            raise ValueError("kernel size must be odd")
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.kernel = kernel
        self.weight = Parameter(init_weight(rng, (out_ch, in_ch, kernel), in_ch * kernel))
        self.bias = Parameter(np.zeros(out_ch))
        self._cols: np.ndarray | None = None

    def _im2col(self, x: np.ndarray) -> np.ndarray:
        pad = self.kernel // 2
        length = x.shape[2]
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
        # (B, C_in, K, L)
        return np.stack([xp[:, :, j : j + length] for j in range(self.kernel)], axis=2)

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 3 or x.shape[1] != self.in_ch:
            raise ShapeMismatch(f"Conv1D expects (B, {self.in_ch}, L), got {x.shape}")
        cols = self._im2col(x)
        self._cols = cols
        y = np.einsum("ock,bckl->bol", self.weight.value, cols) + self.bias.value[None, :, None]
        return _guard("Conv1D", y)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        cols = self._cols
        assert cols is not None, "backward before forward"
        self.weight.accumulate(np.einsum("bol,bckl->ock", dy, cols))
        self.bias.accumulate(dy.sum(axis=(0, 2)))
        dcols = np.einsum("ock,bol->bckl", self.weight.value, dy)
        pad = self.kernel // 2
        length = dy.shape[2]
        dxp = np.zeros((dy.shape[0], self.in_ch, length + 2 * pad))
        for j in range(self.kernel):
            dxp[:, :, j : j + length] += dcols[:, :, j, :]
        return _guard("Conv1D.backward", dxp[:, :, pad : pad + length])


class GroupNorm(Module):
    """Normalization over channel groups of (B, C, L) with per-channel affine."""

    def __init__(self, groups: int, channels: int, eps: float = 1e-5) -> None:
        if channels % groups:
            raise ValueError(f"{channels} channels do not split into {groups} groups")
        self.groups = groups
        self.channels = channels
        self.eps = eps
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))
        self._cache: tuple[np.ndarray, np.ndarray] | None = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 3 or x.shape[1] != self.channels:
            raise ShapeMismatch(f"GroupNorm expects (B, {self.channels}, L), got {x.shape}")
        b, c, length = x.shape
        xg = x.reshape(b, self.groups, -1)
        mean = xg.mean(axis=2, keepdims=True)
        var = xg.var(axis=2, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = ((xg - mean) * inv).reshape(b, c, length)
        self._cache = (xhat, inv)
        return _guard("GroupNorm", xhat * self.weight.value[None, :, None] + self.bias.value[None, :, None])

    def backward(self, dy: np.ndarray) -> np.ndarray:
        assert self._cache is not None, "backward before forward"
        xhat, inv = self._cache
        b, c, length = dy.shape
        self.weight.accumulate(np.sum(dy * xhat, axis=(0, 2)))
        self.bias.accumulate(dy.sum(axis=(0, 2)))
        dxhat = (dy * self.weight.value[None, :, None]).reshape(b, self.groups, -1)
        xh = xhat.reshape(b, self.groups, -1)
        n = dxhat.shape[2]
        dx = inv / n * (n * dxhat - dxhat.sum(axis=2, keepdims=True) - xh * np.sum(dxhat * xh, axis=2, keepdims=True))
        return _guard("GroupNorm.backward", dx.reshape(b, c, length))


class FiLM(Module):
    """``h' = (1 + g(cond)) * h + b(cond)`` per channel, broadcast over L.

    The projection starts at zero, so a fresh layer is the identity.
    """

    def __init__(self, channels: int, cond_dim: int) -> None:
        self.channels = channels
        self.cond_dim = cond_dim
        self.weight = Parameter(np.zeros((2 * channels, cond_dim)))
        self.bias = Parameter(np.zeros(2 * channels))
        self._cache: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None

    def forward(self, h: np.ndarray, cond: np.ndarray) -> np.ndarray:
        if h.ndim != 3 or h.shape[1] != self.channels:
            raise ShapeMismatch(f"FiLM expects (B, {self.channels}, L), got {h.shape}")
        if cond.shape != (h.shape[0], self.cond_dim):
            raise ShapeMismatch(f"FiLM condition must be ({h.shape[0]}, {self.cond_dim}), got {cond.shape}")
        proj = cond @ self.weight.value.T + self.bias.value
        gamma = 1.0 + proj[:, : self.channels]
        beta = proj[:, self.channels :]
        self._cache = (h, cond, gamma)
        return _guard("FiLM", gamma[:, :, None] * h + beta[:, :, None])

    def backward(self, dy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        assert self._cache is not None, "backward before forward"
        h, cond, gamma = self._cache
        dgamma = np.sum(dy * h, axis=2)
        dbeta = dy.sum(axis=2)
        dproj = np.concatenate([dgamma, dbeta], axis=1)
        self.weight.accumulate(dproj.T @ cond)
        self.bias.accumulate(dproj.sum(axis=0))
        return gamma[:, :, None] * dy, dproj @ self.weight.value


class MaxPoolPoints(Module):
    """(B, N, C) -> (B, C), max over points; the gradient goes to the first argmax."""

    def __init__(self) -> None:
        self._cache: tuple[np.ndarray, tuple[int, ...]] | None = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 3 or x.shape[1] == 0:
            raise ShapeMismatch(f"MaxPoolPoints expects (B, N>0, C), got {x.shape}")
        idx = np.argmax(x, axis=1)
        self._cache = (idx, x.shape)
        return np.take_along_axis(x, idx[:, None, :], axis=1)[:, 0, :]

    def backward(self, dy: np.ndarray) -> np.ndarray:
        assert self._cache is not None, "backward before forward"
        idx, shape = self._cache
        dx = np.zeros(shape)
        np.put_along_axis(dx, idx[:, None, :], dy[:, None, :], axis=1)
        return dx


class AvgPool2(Module):
    """Halve the length of (B, C, L) by averaging neighbor pairs."""

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[2] % 2:
            raise ShapeMismatch(f"AvgPool2 needs an even length, got {x.shape[2]}")
        return 0.5 * (x[:, :, 0::2] + x[:, :, 1::2])

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return np.repeat(0.5 * dy, 2, axis=2)


class Upsample2(Module):
    """Double the length of (B, C, L) by repeating every step."""

    def forward(self, x: np.ndarray) -> np.ndarray:
        return np.repeat(x, 2, axis=2)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return dy[:, :, 0::2] + dy[:, :, 1::2]


class SinusoidalTimeEmbed(Module):
    """Fixed sin/cos embedding of integer diffusion steps; no parameters."""

    def __init__(self, dim: int) -> None:
        if dim % 2:
            raise ValueError("time embedding dimension must be even")
        self.dim = dim
        half = dim // 2
        self.freqs = np.exp(-math.log(10_000.0) * np.arange(half) / half)

    def forward(self, t: np.ndarray) -> np.ndarray:
        arg = np.asarray(t, dtype=np.float64)[:, None] * self.freqs[None, :]
        return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return np.zeros(dy.shape[0])


# ---------------------------------------------------------------------------
# Losses: each returns (loss, dloss/dinput)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    if logits.shape[0] == 0:
        raise EmptyBatch("cross-entropy over an empty batch")
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = -float(log_probs[rows, targets].mean())
    grad = np.exp(log_probs)
    grad[rows, targets] -= 1.0
    return loss, grad / n


def bce_with_logits(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    if logits.size == 0:
        raise EmptyBatch("binary cross-entropy over an empty batch")
    z = logits
    loss = np.maximum(z, 0.0) - z * targets + np.log1p(np.exp(-np.abs(z)))
    return float(loss.mean()), (sigmoid(z) - targets) / z.size


def masked_mse(pred: np.ndarray, target: np.ndarray, mask: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """Mean squared error over the elements where ``mask`` is 1."""

    if pred.shape != target.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs target {target.shape}")
    m = np.ones_like(pred) if mask is None else np.broadcast_to(mask, pred.shape).astype(np.float64)
    count = float(m.sum())
    if count == 0:
        raise EmptyBatch("mask selects no elements")
    diff = (pred - target) * m
    return float(np.sum(diff * diff) / count), 2.0 * diff / count


# ---------------------------------------------------------------------------
# Optimizer


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)
    t: dict[int, int] = field(default_factory=dict)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState) -> list[np.ndarray]:
    """Bias-corrected Adam update; returns new arrays, inputs are not modified."""

    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ShapeMismatch(f"parameter {i}: {p.shape} vs gradient {g.shape}")
        m = state.m.get(i, np.zeros_like(p))
        v = state.v.get(i, np.zeros_like(p))
        t = state.t.get(i, 0) + 1
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1**t)
        v_hat = v / (1.0 - state.beta2**t)
        out.append(p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
        state.m[i], state.v[i], state.t[i] = m, v, t
    return out


class Adam:
    """Adam over a fixed parameter list.

    With ``only_touched`` a parameter that received no gradient since the
    last ``zero_grad`` is left alone, moments and step count included. This
    keeps routed sub-networks (one encoder per task) fully independent.
    """

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-3, *, only_touched: bool = True) -> None:
        self.params = list(params)
        self.state = AdamState(lr=lr)
        self.only_touched = only_touched

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if self.only_touched and not p.touched:
                continue
            sub = AdamState(
                lr=self.state.lr,
                beta1=self.state.beta1,
                beta2=self.state.beta2,
                eps=self.state.eps,
                m={0: self.state.m[i]} if i in self.state.m else {},
                v={0: self.state.v[i]} if i in self.state.v else {},
                t={0: self.state.t[i]} if i in self.state.t else {},
            )
            (p.value,) = adam_step([p.value], [p.grad], sub)
            self.state.m[i], self.state.v[i], self.state.t[i] = sub.m[0], sub.v[0], sub.t[0]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for i in range(len(self.params)):
            if i in self.state.t:
                out[f"adam.m.{i}"] = self.state.m[i]
                out[f"adam.v.{i}"] = self.state.v[i]
                out[f"adam.t.{i}"] = np.array(self.state.t[i])
        return out

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        self.state.m.clear()
        self.state.v.clear()
        self.state.t.clear()
        for i in range(len(self.params)):
            if f"adam.t.{i}" in arrays:
                self.state.m[i] = np.array(arrays[f"adam.m.{i}"], dtype=np.float64)
                self.state.v[i] = np.array(arrays[f"adam.v.{i}"], dtype=np.float64)
                self.state.t[i] = int(arrays[f"adam.t.{i}"])


# ---------------------------------------------------------------------------
# Gradient checking


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central differences of ``f`` with respect to ``x`` (modified in place, restored)."""

    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2.0 * h)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = max(float(np.linalg.norm(analytic) + np.linalg.norm(numeric)), 1e-12)
    return float(np.linalg.norm(analytic - numeric)) / denom


def gradcheck_module(
    module: Module,
    inputs: Sequence[np.ndarray],
    rng: np.random.Generator,
    h: float = 1e-4,
) -> float:
    """Largest relative error over the module's parameters and inputs.

    The scalar under test is ``sum(out * P)`` for a fixed random ``P``.
    """

    out = module.forward(*inputs)
    projection = rng.standard_normal(out.shape)

    def loss() -> float:
        return float(np.sum(module.forward(*inputs) * projection))

    module.zero_grad()
    module.forward(*inputs)
    d_inputs = module.backward(projection)
    if not isinstance(d_inputs, tuple):
        d_inputs = (d_inputs,)

    worst = 0.0
    for p in module.parameters():
        analytic = p.grad.copy()
        worst = max(worst, relative_error(analytic, numeric_grad(loss, p.value, h)))
    for x, dx in zip(inputs, d_inputs):
        if np.issubdtype(x.dtype, np.floating):
            worst = max(worst, relative_error(dx, numeric_grad(loss, x, h)))
    return worst


# ---------------------------------------------------------------------------
# Weight files


def save_weights(tensors: Module | Mapping[str, np.ndarray], path: str | Path) -> None:
    named = tensors.state_dict() if isinstance(tensors, Module) else dict(tensors)
    Path(path).write_bytes(encode_weights(named))


def encode_weights(named: Mapping[str, np.ndarray]) -> bytes:
    parts = [WEIGHTS_MAGIC, struct.pack("<II", WEIGHTS_VERSION, len(named))]
    for name, value in named.items():
        raw_name = name.encode("utf-8")
        arr = np.asarray(value)
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def load_weights(path: str | Path) -> dict[str, np.ndarray]:
    return decode_weights(Path(path).read_bytes())


def decode_weights(data: bytes) -> dict[str, np.ndarray]:
    """Parse a weight file into float64 arrays, in file order."""

    def take(n: int) -> bytes:
        nonlocal offset
        if offset + n > len(data):
            raise CorruptWeights(f"weight file truncated at byte {offset}")
        chunk = data[offset : offset + n]
        offset += n
        return chunk

    offset = 0
    if take(4) != WEIGHTS_MAGIC:
        raise CorruptWeights("bad magic; not a weight file")
    version, count = struct.unpack("<II", take(8))
    if version != WEIGHTS_VERSION:
        raise CorruptWeights(f"unsupported weight file version {version} (expected {WEIGHTS_VERSION})")

    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        try:
            name = take(name_len).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CorruptWeights("tensor name is not valid UTF-8") from e
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).astype(np.float64)
    if offset != len(data):
        raise CorruptWeights(f"{len(data) - offset} trailing bytes after the last tensor")
    return out

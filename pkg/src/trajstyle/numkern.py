"""Differentiable 1D kernels with hand-written backward passes.

Everything here works on float64 arrays laid out as (batch, channels, length).
Layers cache their forward inputs so that ``backward`` can be called right
after ``forward``; the module-level ``conv1d_forward``/``conv1d_backward``
functions are the pure versions of the convolution kernel.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def conv_out_len(length: int, kernel: int, stride: int, padding: int) -> int:
    return (length + 2 * padding - kernel) // stride + 1


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, slope: float = 0.2) -> np.ndarray:
    gain = math.sqrt(2.0 / (1.0 + slope**2))
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


class Layer:
    """Base layer: ``params`` and ``grads`` share keys."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray, param_grads: bool = True) -> np.ndarray:
        raise NotImplementedError

    def buffers(self) -> dict[str, np.ndarray]:
        return {}


# ---------------------------------------------------------------------------
# convolution


class Conv1d(Layer):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3,
                 stride: int = 1, padding: int = 0, rng: np.random.Generator | None = None,
                 bias: bool = True):
        super().__init__()
        if kernel_size < 1 or stride < 1 or padding < 0:
            raise ValueError("kernel_size, stride >= 1 and padding >= 0 required")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_channels * kernel_size
        self.params["weight"] = kaiming_uniform(rng, (out_channels, in_channels, kernel_size), fan_in)
        if bias:
            self.params["bias"] = np.zeros(out_channels, dtype=DTYPE)
        self._x = None

    @property
    def weight(self) -> np.ndarray:
        return self.params["weight"]

    @property
    def bias(self) -> np.ndarray | None:
        return self.params.get("bias")

    def out_len(self, length: int) -> int:
        return conv_out_len(length, self.kernel_size, self.stride, self.padding)

    def forward(self, x, train=False):
        self._x = x
        return conv1d_forward(x, self)

    def backward(self, grad, param_grads=True):
        gx, gw, gb = conv1d_backward(self._x, self, grad, param_grads=param_grads)
        if param_grads:
            self.grads["weight"] = gw
            if self.bias is not None:
                self.grads["bias"] = gb
        return gx


def _conv_cols(x: np.ndarray, layer: Conv1d) -> tuple[np.ndarray, int]:
    if x.ndim != 3 or x.shape[1] != layer.in_channels:
        raise ShapeError(f"conv1d expects (B, {layer.in_channels}, L) input, got {x.shape}")
    B, C, L = x.shape
    k, s, p = layer.kernel_size, layer.stride, layer.padding
    L_out = conv_out_len(L, k, s, p)
    if L_out < 1:
        raise ShapeError(f"conv1d output length {L_out} < 1 for L={L}, k={k}, s={s}, p={p}")
    xp = np.pad(x, ((0, 0), (0, 0), (p, p))) if p else x
    idx = s * np.arange(L_out)[:, None] + np.arange(k)[None, :]
    cols = xp[:, :, idx]  # B, C, L_out, k
    cols = cols.transpose(0, 2, 1, 3).reshape(B * L_out, C * k)
    return cols, L_out


def conv1d_forward(x: np.ndarray, layer: Conv1d) -> np.ndarray:
    """Cross-correlation with zero padding; returns (B, out_channels, L_out)."""
    cols, L_out = _conv_cols(x, layer)
    B = x.shape[0]
    w = layer.weight.reshape(layer.out_channels, -1)
    y = cols @ w.T
    if layer.bias is not None:
        y += layer.bias
    return np.ascontiguousarray(y.reshape(B, L_out, layer.out_channels).transpose(0, 2, 1))


def conv1d_backward(x: np.ndarray, layer: Conv1d, grad_out: np.ndarray, param_grads: bool = True):
    """Gradients of ``conv1d_forward`` w.r.t. input, weight and bias.

    With ``param_grads=False`` the weight/bias gradients are returned as None.
    """
    cols, L_out = _conv_cols(x, layer)
    B, C, L = x.shape
    O, k, s, p = layer.out_channels, layer.kernel_size, layer.stride, layer.padding
    if grad_out.shape != (B, O, L_out):
        raise ShapeError(f"grad_out shape {grad_out.shape} != {(B, O, L_out)}")
    g = grad_out.transpose(0, 2, 1).reshape(B * L_out, O)
    w = layer.weight.reshape(O, C * k)
    gw = gb = None
    if param_grads:
        gw = (g.T @ cols).reshape(O, C, k)
        gb = grad_out.sum(axis=(0, 2))
    gcols = (g @ w).reshape(B, L_out, C, k)
    gxp = np.zeros((B, C, L + 2 * p), dtype=DTYPE)
    span = s * (L_out - 1) + 1
    for kk in range(k):
        gxp[:, :, kk:kk + span:s] += gcols[:, :, :, kk].transpose(0, 2, 1)
    gx = gxp[:, :, p:p + L]
    return np.ascontiguousarray(gx), gw, gb


class ConvTranspose1d(Layer):
    """Transposed convolution (the input-gradient of Conv1d), weight (in, out, k)."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3,
                 stride: int = 1, padding: int = 0, output_padding: int = 0,
                 rng: np.random.Generator | None = None, bias: bool = True):
        super().__init__()
        if not 0 <= output_padding < stride:
            raise ValueError("output_padding must satisfy 0 <= output_padding < stride")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        self.output_padding = output_padding
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_channels * kernel_size
        self.params["weight"] = kaiming_uniform(rng, (in_channels, out_channels, kernel_size), fan_in)
        if bias:
            self.params["bias"] = np.zeros(out_channels, dtype=DTYPE)
        self._x = None

    def out_len(self, length: int) -> int:
        return (length - 1) * self.stride - 2 * self.padding + self.kernel_size + self.output_padding

    def _full_len(self, length: int) -> int:
        return max((length - 1) * self.stride + self.kernel_size, self.padding + self.out_len(length))

    def forward(self, x, train=False):
        if x.ndim != 3 or x.shape[1] != self.in_channels:
            raise ShapeError(f"conv_transpose1d expects (B, {self.in_channels}, L), got {x.shape}")
        self._x = x
        B, C, L = x.shape
        O, k, s = self.out_channels, self.kernel_size, self.stride
        L_out = self.out_len(L)
        if L_out < 1:
            raise ShapeError(f"conv_transpose1d output length {L_out} < 1")
        xm = x.transpose(0, 2, 1).reshape(B * L, C)
        cols = (xm @ self.params["weight"].reshape(C, O * k)).reshape(B, L, O, k)
        full = np.zeros((B, O, self._full_len(L)), dtype=DTYPE)
        span = s * (L - 1) + 1
        for kk in range(k):
            full[:, :, kk:kk + span:s] += cols[:, :, :, kk].transpose(0, 2, 1)
        y = np.ascontiguousarray(full[:, :, self.padding:self.padding + L_out])
        if "bias" in self.params:
            y += self.params["bias"][None, :, None]
        return y

    def backward(self, grad, param_grads=True):
        x = self._x
        B, C, L = x.shape
        O, k, s, p = self.out_channels, self.kernel_size, self.stride, self.padding
        L_out = self.out_len(L)
        if grad.shape != (B, O, L_out):
            raise ShapeError(f"grad shape {grad.shape} != {(B, O, L_out)}")
        gfull = np.zeros((B, O, self._full_len(L)), dtype=DTYPE)
        gfull[:, :, p:p + L_out] = grad
        idx = s * np.arange(L)[:, None] + np.arange(k)[None, :]
        gcols = gfull[:, :, idx].transpose(0, 2, 1, 3).reshape(B * L, O * k)
        w = self.params["weight"].reshape(C, O * k)
        gx = (gcols @ w.T).reshape(B, L, C).transpose(0, 2, 1)
        if param_grads:
            xm = x.transpose(0, 2, 1).reshape(B * L, C)
            self.grads["weight"] = (xm.T @ gcols).reshape(C, O, k)
            if "bias" in self.params:
                self.grads["bias"] = grad.sum(axis=(0, 2))
        return np.ascontiguousarray(gx)


# ---------------------------------------------------------------------------
# dense / shape / activation


class Linear(Layer):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator | None = None,
                 slope: float = 0.2):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features = in_features
        self.out_features = out_features
        self.params["weight"] = kaiming_uniform(rng, (out_features, in_features), in_features, slope)
        self.params["bias"] = np.zeros(out_features, dtype=DTYPE)
        self._x = None

    def forward(self, x, train=False):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"linear expects (B, {self.in_features}), got {x.shape}")
        self._x = x
        return x @ self.params["weight"].T + self.params["bias"]

    def backward(self, grad, param_grads=True):
        if param_grads:
            self.grads["weight"] = grad.T @ self._x
            self.grads["bias"] = grad.sum(axis=0)
        return grad @ self.params["weight"]


class Flatten(Layer):
    def __init__(self):
        super().__init__()
        self._shape = None

    def forward(self, x, train=False):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad, param_grads=True):
        return grad.reshape(self._shape)


class Unflatten(Layer):
    def __init__(self, channels: int, length: int):
        super().__init__()
        self.channels = channels
        self.length = length

    def forward(self, x, train=False):
        return x.reshape(x.shape[0], self.channels, self.length)

    def backward(self, grad, param_grads=True):
        return grad.reshape(grad.shape[0], -1)


class LeakyReLU(Layer):
    def __init__(self, slope: float = 0.2):
        super().__init__()
        self.slope = slope
        self._mask = None

    def forward(self, x, train=False):
        self._mask = x > 0
        return np.where(self._mask, x, self.slope * x)

    def backward(self, grad, param_grads=True):
        return np.where(self._mask, grad, self.slope * grad)


class Tanh(Layer):
    def __init__(self):
        super().__init__()
        self._y = None

    def forward(self, x, train=False):
        self._y = np.tanh(x)
        return self._y

    def backward(self, grad, param_grads=True):
        return grad * (1.0 - self._y**2)


class BatchNorm1d(Layer):
    """Per-channel normalisation over (batch, length).

    Train mode normalises with batch statistics and updates the running
    estimates; eval mode is a fixed per-channel affine map.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.params["gamma"] = np.ones(channels, dtype=DTYPE)
        self.params["beta"] = np.zeros(channels, dtype=DTYPE)
        self.running_mean = np.zeros(channels, dtype=DTYPE)
        self.running_var = np.ones(channels, dtype=DTYPE)
        self._cache = None

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x, train=False):
        if x.ndim != 3 or x.shape[1] != self.channels:
            raise ShapeError(f"batchnorm expects (B, {self.channels}, L), got {x.shape}")
        gamma = self.params["gamma"][None, :, None]
        beta = self.params["beta"][None, :, None]
        if train:
            n = x.shape[0] * x.shape[2]
            if n < 2:
                raise ShapeError("batchnorm in train mode needs B*L >= 2")
            mean = x.mean(axis=(0, 2))
            var = x.var(axis=(0, 2))
            inv_std = 1.0 / np.sqrt(var + self.eps)
            xhat = (x - mean[None, :, None]) * inv_std[None, :, None]
            m = self.momentum
            self.running_mean = (1 - m) * self.running_mean + m * mean
            self.running_var = (1 - m) * self.running_var + m * var * n / (n - 1)
            self._cache = ("train", xhat, inv_std)
        else:
            inv_std = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = (x - self.running_mean[None, :, None]) * inv_std[None, :, None]
            self._cache = ("eval", xhat, inv_std)
        return gamma * xhat + beta

    def backward(self, grad, param_grads=True):
        mode, xhat, inv_std = self._cache
        gamma = self.params["gamma"]
        if param_grads:
            self.grads["gamma"] = (grad * xhat).sum(axis=(0, 2))
            self.grads["beta"] = grad.sum(axis=(0, 2))
        dxhat = grad * gamma[None, :, None]
        if mode == "eval":
            return dxhat * inv_std[None, :, None]
        n = grad.shape[0] * grad.shape[2]
        s1 = dxhat.sum(axis=(0, 2))[None, :, None]
        s2 = (dxhat * xhat).sum(axis=(0, 2))[None, :, None]
        return (inv_std[None, :, None] / n) * (n * dxhat - s1 - xhat * s2)


def batchnorm_forward(x: np.ndarray, layer: BatchNorm1d, train: bool = True) -> np.ndarray:
    return layer.forward(x, train=train)


def batchnorm_backward(layer: BatchNorm1d, grad_out: np.ndarray):
    """Returns (grad_x, grad_gamma, grad_beta) for the last forward call."""
    gx = layer.backward(grad_out)
    return gx, layer.grads["gamma"], layer.grads["beta"]


# ---------------------------------------------------------------------------
# containers


class Sequential:
    """Ordered layer stack; layer indices are stable and used as feature taps."""

    def __init__(self, layers: Iterable[Layer]):
        self.layers = list(layers)
        self._ran = 0

    def __len__(self):
        return len(self.layers)

    def forward(self, x, train=False, upto: int | None = None, taps: Iterable[int] = ()):
        """Run layers ``0..upto`` (inclusive); return output and the tapped outputs."""
        last = len(self.layers) - 1 if upto is None else upto
        taps = set(taps)
        out = {}
        for i in range(last + 1):
            x = self.layers[i].forward(x, train=train)
            if i in taps:
                out[i] = x
        self._ran = last + 1
        return x, out

    def backward(self, grad=None, tap_grads: dict[int, np.ndarray] | None = None, param_grads=True):
        tap_grads = tap_grads or {}
        for i in range(self._ran - 1, -1, -1):
            if i in tap_grads:
                grad = tap_grads[i] if grad is None else grad + tap_grads[i]
            if grad is None:
                continue
            grad = self.layers[i].backward(grad, param_grads=param_grads)
        return grad

    def parameters(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {f"{prefix}{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.params.items()}

    def gradients(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {f"{prefix}{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.grads.items()}

    def state(self, prefix: str = "") -> dict[str, np.ndarray]:
        st = self.parameters(prefix)
        for i, layer in enumerate(self.layers):
            for k, v in layer.buffers().items():
                st[f"{prefix}{i}.{k}"] = v
        return st

    def load_state(self, state: dict[str, np.ndarray], prefix: str = ""):
        for i, layer in enumerate(self.layers):
            for k in list(layer.params):
                arr = state[f"{prefix}{i}.{k}"]
                if arr.shape != layer.params[k].shape:
                    raise ShapeError(f"checkpoint {prefix}{i}.{k} has shape {arr.shape}, "
                                     f"expected {layer.params[k].shape}")
                layer.params[k] = np.array(arr, dtype=DTYPE)
            if isinstance(layer, BatchNorm1d):
                layer.running_mean = np.array(state[f"{prefix}{i}.running_mean"], dtype=DTYPE)
                layer.running_var = np.array(state[f"{prefix}{i}.running_var"], dtype=DTYPE)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState):
    """Bias-corrected Adam update, applied to ``params`` in place."""
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    per_param: dict[str, float]

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def grad_check(f: Callable[[dict], tuple[float, dict]], params: dict[str, np.ndarray],
               tolerance: float = 1e-4, h: float = 1e-5, max_entries: int | None = None,
               rng: np.random.Generator | None = None, atol: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients of ``f`` against central differences.

    ``f(params)`` must return ``(value, grads)``. Parameters are perturbed in
    place and restored. The error per parameter is
    ``||g_analytic - g_numeric|| / max(||g_analytic||, ||g_numeric||, atol)`` over
    the checked entries (``atol`` keeps structurally-zero gradients, such as a
    bias feeding batch norm, from comparing round-off against round-off); ``max_entries`` limits how many entries per tensor are
    probed (chosen with ``rng``).
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    _, analytic = f(params)
    analytic = {k: np.array(v, dtype=DTYPE) for k, v in analytic.items()}
    per = {}
    for name, p in params.items():
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        num = np.empty(idx.size, dtype=DTYPE)
        for n, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + h
            fp, _ = f(params)
            flat[i] = old - h
            fm, _ = f(params)
            flat[i] = old
            num[n] = (fp - fm) / (2 * h)
        ana = analytic[name].reshape(-1)[idx]
        denom = max(np.linalg.norm(ana), np.linalg.norm(num), atol)
        per[name] = float(np.linalg.norm(ana - num) / denom)
    return GradCheckReport(max(per.values(), default=0.0), tolerance, per)


# ---------------------------------------------------------------------------
# checkpoints: JSON header (names, shapes) followed by raw little-endian float64

_MAGIC = b"TSCK0001"


def save_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    header, chunks, offset = [], [], 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        header.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.nbytes
    head = json.dumps(header, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for c in chunks:
            fh.write(c)


def load_arrays(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + n])
    base = 16 + n
    out = {}
    for entry in header:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = base + entry["offset"]
        a = np.frombuffer(raw, dtype="<f8", count=count, offset=start)
        out[entry["name"]] = a.reshape(entry["shape"]).astype(DTYPE)
    return out

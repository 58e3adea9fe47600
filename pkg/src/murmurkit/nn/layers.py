"""Forward/backward kernels for the five layer kinds used by the classifiers.

All activations are (N, C, H, W) row-major arrays except after the final
pooling, where linear layers flatten to (N, C). Convolutions are 3x3 with
stride 1 and zero padding 1, implemented via im2col so the inner loop is a
single GEMM.

Hot layers keep per-thread workspace buffers: on a small host, repeatedly
mallocing multi-megabyte temporaries costs more in page faults than the
arithmetic itself. Buffers are keyed per layer object and reallocated when
the batch shape changes, so results are identical with or without reuse.
"""

from __future__ import annotations

import threading

import numpy as np

from ..errors import ConfigError, LabelError, ShapeError, StateError


def he_uniform(shape: tuple[int, ...], fan_in: int, rng: np.random.Generator, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class _Workspace:
    """Per-thread, shape-checked scratch buffers."""

    def __init__(self):
        self._tls = threading.local()

    def get(self, name: str, shape: tuple[int, ...], dtype) -> np.ndarray:
        store = getattr(self._tls, "buffers", None)
        if store is None:
            store = self._tls.buffers = {}
        buf = store.get(name)
        if buf is None or buf.shape != shape or buf.dtype != np.dtype(dtype):
            buf = np.empty(shape, dtype=dtype)
            store[name] = buf
        return buf


# --- convolution ------------------------------------------------------------


def _im2col3x3(x: np.ndarray, ws: _Workspace | None = None) -> np.ndarray:
    """(N, C, H, W) -> (N, C*9, H*W) patches with zero padding 1."""
    n, c, h, w = x.shape
    if ws is None:
        xp = np.zeros((n, c, h + 2, w + 2), dtype=x.dtype)
        cols = np.empty((n, c, 9, h, w), dtype=x.dtype)
    else:
        xp = ws.get("xp", (n, c, h + 2, w + 2), x.dtype)
        xp[...] = 0
        cols = ws.get("cols", (n, c, 9, h, w), x.dtype)
    xp[:, :, 1 : h + 1, 1 : w + 1] = x
    k = 0
    for u in range(3):
        for v in range(3):
            cols[:, :, k] = xp[:, :, u : u + h, v : v + w]
            k += 1
    return cols.reshape(n, c * 9, h * w)


def _col2im3x3(
    dcols: np.ndarray, shape: tuple[int, int, int, int], ws: _Workspace | None = None
) -> np.ndarray:
    n, c, h, w = shape
    if ws is None:
        dxp = np.zeros((n, c, h + 2, w + 2), dtype=dcols.dtype)
    else:
        dxp = ws.get("dxp", (n, c, h + 2, w + 2), dcols.dtype)
        dxp[...] = 0
    d = dcols.reshape(n, c, 9, h, w)
    k = 0
    for u in range(3):
        for v in range(3):
            dxp[:, :, u : u + h, v : v + w] += d[:, :, k]
            k += 1
    return dxp[:, :, 1 : h + 1, 1 : w + 1]


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """3x3 convolution, stride 1, padding 1; spatial dims are preserved."""
    n, c, h, ww = x.shape
    out_ch, in_ch, kh, kw = w.shape
    if (kh, kw) != (3, 3):
        raise ShapeError(f"expected 3x3 kernel, got {kh}x{kw}")
    if c != in_ch:
        raise ShapeError(f"input has {c} channels, kernel expects {in_ch}")
    cols = _im2col3x3(x)
    wm = w.reshape(out_ch, in_ch * 9)
    out = np.matmul(wm, cols) + b[None, :, None]
    return out.reshape(n, out_ch, h, ww)


def maxpool2x2(x: np.ndarray) -> np.ndarray:
    """2x2 max pooling, stride 2; odd trailing rows/columns are dropped."""
    n, c, h, w = x.shape
    if h < 2 or w < 2:
        raise ShapeError(f"maxpool2x2 needs H, W >= 2, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    blocks = _pool_blocks(x, h2, w2)
    return blocks.max(axis=4)


def _pool_blocks(x: np.ndarray, h2: int, w2: int) -> np.ndarray:
    n, c = x.shape[:2]
    xc = x[:, :, : h2 * 2, : w2 * 2]
    return (
        xc.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    )


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """Per-channel mean over all spatial positions, output (N, C, 1, 1)."""
    return x.mean(axis=(2, 3), keepdims=True)


def dropout(
    x: np.ndarray,
    p: float = 0.1,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Inverted dropout: identity in eval mode, scaled masking in train/mcd."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout p must be in [0, 1), got {p}")
    if mode not in ("train", "eval", "mcd"):
        raise ConfigError(f"unknown dropout mode {mode!r}")
    if mode == "eval" or p == 0.0:
        return x
    if rng is None:
        raise ConfigError("stochastic dropout requires an rng")
    mask = (rng.random(x.shape) >= p).astype(x.dtype)
    return x * mask / (1.0 - p)


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Affine map on inputs flattened to (N, in_features)."""
    flat = x.reshape(x.shape[0], -1)
    if flat.shape[1] != w.shape[1]:
        raise ShapeError(f"linear input has {flat.shape[1]} features, weight expects {w.shape[1]}")
    return flat @ w.T + b[None, :]


def softmax(z: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction for stability."""
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    if single:
        z = z[None, :]
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)
    return out[0] if single else out


def cross_entropy(probs: np.ndarray, labels) -> float:
    """Mean negative log probability of the true class."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim == 1:
        probs = probs[None, :]
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.shape[0] != probs.shape[0]:
        raise ShapeError("probs and labels disagree on batch size")
    if labels.min() < 0 or labels.max() >= probs.shape[1]:
        raise LabelError(f"label out of range for {probs.shape[1]} classes")
    picked = probs[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(np.maximum(picked, 1e-300))))


# --- layer objects (stateful: parameters, gradients, forward caches) --------


class Param:
    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)


class Conv3x3:
    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator, dtype=np.float32):
        self.in_ch = in_ch
        self.out_ch = out_ch
        w = he_uniform((out_ch, in_ch, 3, 3), fan_in=in_ch * 9, rng=rng, dtype=dtype)
        self.w = Param("w", w)
        self.b = Param("b", np.zeros(out_ch, dtype=dtype))
        self._cache = None
        self._ws = _Workspace()

    def params(self) -> list[Param]:
        return [self.w, self.b]

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        n, c, h, w = x.shape
        if c != self.in_ch:
            raise ShapeError(f"conv expects {self.in_ch} channels, got {c}")
        cols = _im2col3x3(x, self._ws)
        wm = self.w.value.reshape(self.out_ch, self.in_ch * 9)
        out = self._ws.get("out", (n, self.out_ch, h * w), x.dtype)
        np.matmul(wm, cols, out=out)
        out += self.b.value[None, :, None]
        if train:
            self._cache = (cols, x.shape)
        return out.reshape(n, self.out_ch, h, w)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise StateError("conv backward without cached forward")
        cols, x_shape = self._cache
        n, _, h, w = x_shape
        g = grad.reshape(n, self.out_ch, h * w)
        # Batched GEMMs over strided views; copying the operands into one
        # flat GEMM is slower here than letting BLAS walk the batch axis.
        dw_n = self._ws.get("dw_n", (n, self.out_ch, self.in_ch * 9), g.dtype)
        np.matmul(g, cols.transpose(0, 2, 1), out=dw_n)
        self.w.grad += dw_n.sum(axis=0).reshape(self.w.value.shape)
        self.b.grad += g.sum(axis=(0, 2))
        wm = self.w.value.reshape(self.out_ch, self.in_ch * 9)
        dcols = self._ws.get("dcols", (n, self.in_ch * 9, h * w), g.dtype)
        np.matmul(wm.T, g, out=dcols)
        return _col2im3x3(dcols, x_shape, self._ws)


class ReLU:
    def __init__(self):
        self._mask = None
        self._ws = _Workspace()

    def params(self) -> list[Param]:
        return []

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        out = self._ws.get("out", x.shape, x.dtype)
        np.maximum(x, 0, out=out)
        if train:
            mask = self._ws.get("mask", x.shape, np.bool_)
            np.greater(x, 0, out=mask)
            self._mask = mask
        return out

    def backward(self, grad: np.ndarray) -> np.ndarray:
        if self._mask is None:
            raise StateError("relu backward without cached forward")
        return grad * self._mask


class Dropout:
    def __init__(self, p: float = 0.1):
        if not 0.0 <= p < 1.0:
            raise ConfigError(f"dropout p must be in [0, 1), got {p}")
        self.p = p
        self._mask = None
        self._ws = _Workspace()

    def params(self) -> list[Param]:
        return []

    def forward(self, x: np.ndarray, train: bool, *, active: bool, rng) -> np.ndarray:
        if not active or self.p == 0.0:
            if train:
                self._mask = None  # identity backward
            return x
        draw_dtype = np.float64 if x.dtype == np.float64 else np.float32
        draw = self._ws.get("draw", x.shape, draw_dtype)
        rng.random(out=draw.reshape(-1), dtype=draw_dtype)
        gate = self._ws.get("gate", x.shape, np.bool_)
        np.greater_equal(draw, self.p, out=gate)
        mask = self._ws.get("mask", x.shape, x.dtype)
        np.multiply(gate, np.array(1.0 / (1.0 - self.p), dtype=x.dtype), out=mask)
        if train:
            self._mask = mask
        return x * mask

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return grad if self._mask is None else grad * self._mask


class MaxPool2x2:
    def __init__(self):
        self._cache = None
        self._ws = _Workspace()

    def params(self) -> list[Param]:
        return []

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        n, c, h, w = x.shape
        if h < 2 or w < 2:
            raise ShapeError(f"maxpool2x2 needs H, W >= 2, got {h}x{w}")
        h2, w2 = h // 2, w // 2
        blocks = self._ws.get("blocks", (n, c, h2, w2, 4), x.dtype)
        xc = x[:, :, : h2 * 2, : w2 * 2]
        np.copyto(
            blocks.reshape(n, c, h2, w2, 2, 2),
            xc.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5),
        )
        idx = self._ws.get("idx", (n, c, h2, w2), np.int64)
        np.argmax(blocks, axis=4, out=idx)
        out = np.take_along_axis(blocks, idx[..., None], axis=4)[..., 0]
        if train:
            self._cache = (idx, x.shape)
        return out

    def backward(self, grad: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise StateError("maxpool backward without cached forward")
        idx, (n, c, h, w) = self._cache
        h2, w2 = h // 2, w // 2
        dblocks = self._ws.get("dblocks", (n, c, h2, w2, 4), grad.dtype)
        dblocks[...] = 0
        np.put_along_axis(dblocks, idx[..., None], grad[..., None], axis=4)
        scatter = self._ws.get("scatter", (n, c, h2 * 2, w2 * 2), grad.dtype)
        np.copyto(
            scatter.reshape(n, c, h2, 2, w2, 2),
            dblocks.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5),
        )
        dx = self._ws.get("dx", (n, c, h, w), grad.dtype)
        dx[...] = 0
        dx[:, :, : h2 * 2, : w2 * 2] = scatter
        return dx


class GlobalAvgPool:
    def __init__(self):
        self._shape = None

    def params(self) -> list[Param]:
        return []

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        if train:
            self._shape = x.shape
        return global_avg_pool(x)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        if self._shape is None:
            raise StateError("global_avg_pool backward without cached forward")
        n, c, h, w = self._shape
        return np.broadcast_to(grad / (h * w), (n, c, h, w)).astype(grad.dtype)


class Linear:
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, dtype=np.float32):
        self.in_features = in_features
        self.out_features = out_features
        w = he_uniform((out_features, in_features), fan_in=in_features, rng=rng, dtype=dtype)
        self.w = Param("w", w)
        self.b = Param("b", np.zeros(out_features, dtype=dtype))
        self._cache = None

    def params(self) -> list[Param]:
        return [self.w, self.b]

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        flat = x.reshape(x.shape[0], -1)
        if flat.shape[1] != self.in_features:
            raise ShapeError(
                f"linear expects {self.in_features} features, got {flat.shape[1]}"
            )
        if train:
            self._cache = (flat, x.shape)
        return flat @ self.w.value.T + self.b.value[None, :]

    def backward(self, grad: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise StateError("linear backward without cached forward")
        flat, x_shape = self._cache
        self.w.grad += grad.T @ flat
        self.b.grad += grad.sum(axis=0)
        return (grad @ self.w.value).reshape(x_shape)

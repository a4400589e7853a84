"""Dense NCHW tensor primitives with reverse-mode derivatives.

Everything runs on plain numpy arrays, float32 by default with float64
available for verification work.  Each primitive comes as a forward
function plus an explicit VJP, and the thin :class:`Tensor`/:class:`OpTape`
layer on top records applications so :func:`backward` can replay them in
reverse.  The graph executor in :mod:`uhrkit.runtime` reuses the same
forward/VJP pairs, so there is exactly one implementation of every
derivative.

Conventions:

* convolution is cross-correlation (no kernel flip), padding ``k // 2``,
  summation over the flattened ``(in_ch, kh, kw)`` axis in row-major order;
* bilinear upsampling is corner-aligned with a fixed factor of 2 (chain
  nodes for larger factors); a single-pixel axis upsamples to a constant;
* the derivative of ``relu`` at exactly 0 is defined as 0;
* batch normalization is inference-only: running statistics are parameters.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeMismatch(ValueError):
    pass


class OddChannelCount(ValueError):
    pass


class TapeMismatch(ValueError):
    pass


class FormatError(ValueError):
    """A serialized tensor/weight file is malformed.  ``offset`` is the byte
    position where decoding failed."""

    def __init__(self, message: str, offset: int = 0):
        self.offset = offset
        super().__init__(f"{message} (offset {offset})")


class ChecksumMismatch(ValueError):
    pass


# ---------------------------------------------------------------------------
# convolution


def conv_windows(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """Sliding input windows of a conv, shape (N, C, Ho, Wo, k, k).

    Returns a strided view (no copy); also used by the gradient checker to
    form single-column perturbations without a full re-convolution.
    """
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _im2col(x: np.ndarray, k: int, stride: int, pad: int) -> tuple[np.ndarray, int, int]:
    """Columns shaped (N, C*k*k, Ho*Wo), entries ordered (c, ki, kj).

    1x1 stride-1 convolutions reshape in place; larger kernels gather each
    kernel offset with one strided slice copy, which is far cheaper than a
    transposed fancy-index gather.
    """
    n, c, h, w = x.shape
    if k == 1 and stride == 1 and pad == 0:
        return x.reshape(n, c, h * w), h, w
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    cols = np.empty((n, c, k * k, ho * wo), dtype=x.dtype)
    for ki in range(k):
        for kj in range(k):
            patch = xp[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride]
            cols[:, :, ki * k + kj] = patch.reshape(n, c, ho * wo)
    return cols.reshape(n, c * k * k, ho * wo), ho, wo


def _conv_shift_gemm(x: np.ndarray, w: np.ndarray, pad: int) -> np.ndarray:
    """Stride-1 convolution as one batched GEMM over all kernel offsets,
    accumulating shifted output windows.  Avoids materializing the im2col
    buffer, which dominates when in_ch * k * k is large."""
    n, c, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    hp, wp = xp.shape[2], xp.shape[3]
    ho, wo = hp - kh + 1, wp - kw + 1
    xf = xp.reshape(n, 1, c, hp * wp)
    wm = np.ascontiguousarray(w.reshape(cout, c, kh * kw).transpose(2, 0, 1))
    t = (wm @ xf).reshape(n, kh * kw, cout, hp, wp)
    y = np.zeros((n, cout, ho, wo), dtype=x.dtype)
    for ki in range(kh):
        for kj in range(kw):
            y += t[:, ki * kw + kj, :, ki : ki + ho, kj : kj + wo]
    return y


def conv2d_fwd(x: np.ndarray, w: np.ndarray, stride: int = 1, pad: int | None = None) -> np.ndarray:
    """Direct 2-D convolution, cross-correlation convention, no bias.

    ``x`` is (N, C, H, W), ``w`` is (outC, inC, kh, kw) with square kernels.
    Output spatial size is ``(H + 2*pad - k) // stride + 1``.
    """
    n, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if kh != kw:
        raise ShapeMismatch(f"only square kernels are supported, got {kh}x{kw}")
    if cin != cin_w:
        raise ShapeMismatch(f"conv input has {cin} channels, weight expects {cin_w}")
    if pad is None:
        pad = kh // 2
    if stride == 1 and kh > 1:
        return _conv_shift_gemm(x, w, pad)
    cols, ho, wo = _im2col(x, kh, stride, pad)
    y = w.reshape(cout, -1) @ cols  # (n, cout, ho*wo) via broadcast
    return y.reshape(n, cout, ho, wo)


def conv2d_vjp(
    x: np.ndarray, w: np.ndarray, stride: int, pad: int | None, dy: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of conv2d w.r.t. input and weight."""
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    if pad is None:
        pad = kh // 2
    ho, wo = dy.shape[2], dy.shape[3]
    cols, _, _ = _im2col(x, kh, stride, pad)  # (n, cin*k*k, ho*wo)
    dy_mat = dy.reshape(n, cout, ho * wo)

    dw = np.matmul(dy_mat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)

    dcols = np.matmul(w.reshape(cout, -1).T, dy_mat)  # (n, cin*k*k, ho*wo)
    if kh == 1 and stride == 1 and pad == 0:
        return dcols.reshape(x.shape), dw
    dcols = dcols.reshape(n, cin, kh * kw, ho, wo)
    dxp = np.zeros((n, cin, h + 2 * pad, wd + 2 * pad), dtype=x.dtype)
    for ki in range(kh):
        for kj in range(kw):
            dxp[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride] += dcols[
                :, :, ki * kw + kj
            ]
    dx = dxp[:, :, pad : pad + h, pad : pad + wd] if pad else dxp
    return dx, dw


# ---------------------------------------------------------------------------
# batch normalization (inference form)


def _per_channel(v: np.ndarray) -> np.ndarray:
    return v.reshape(1, -1, 1, 1)


def batchnorm_fwd(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    mean: np.ndarray,
    var: np.ndarray,
    eps: float = 1e-5,
) -> np.ndarray:
    """``y = gamma * (x - mean) / sqrt(var + eps) + beta`` per channel."""
    c = x.shape[1]
    for name, p in (("gamma", gamma), ("beta", beta), ("mean", mean), ("var", var)):
        if p.shape != (c,):
            raise ShapeMismatch(f"batchnorm {name} has shape {p.shape}, expected ({c},)")
    inv = 1.0 / np.sqrt(var + eps)
    return _per_channel(gamma * inv) * (x - _per_channel(mean)) + _per_channel(beta)


def batchnorm_vjp(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    mean: np.ndarray,
    var: np.ndarray,
    eps: float,
    dy: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Gradients w.r.t. x and all four per-channel parameters.

    The running statistics are treated as differentiable inputs too; the
    gradient checker exercises them even though they would never be trained.
    """
    inv = 1.0 / np.sqrt(var + eps)
    xm = x - _per_channel(mean)
    dx = dy * _per_channel(gamma * inv)
    axes = (0, 2, 3)
    dgamma = np.sum(dy * xm, axis=axes) * inv
    dbeta = np.sum(dy, axis=axes)
    dmean = -np.sum(dy, axis=axes) * gamma * inv
    dvar = np.sum(dy * xm, axis=axes) * gamma * (-0.5) * inv**3
    return dx, dgamma, dbeta, dmean, dvar


# ---------------------------------------------------------------------------
# relu


def relu_fwd(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_vjp(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return np.where(x > 0, dy, 0)


# ---------------------------------------------------------------------------
# corner-aligned bilinear upsampling, factor 2


def _lerp_axis(n_in: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Index pairs and fractional weights mapping ``2*n_in`` outputs onto
    ``n_in`` inputs with corner alignment."""
    n_out = 2 * n_in
    if n_in == 1:
        z = np.zeros(n_out, dtype=np.intp)
        return z, z, np.zeros(n_out)
    src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    i0 = np.floor(src).astype(np.intp)
    i0 = np.minimum(i0, n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def bilinear_up2_fwd(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    iy0, iy1, wy = _lerp_axis(h)
    ix0, ix1, wx = _lerp_axis(w)
    wy = wy.astype(x.dtype)[None, None, :, None]
    wx = wx.astype(x.dtype)[None, None, None, :]
    rows = x[:, :, iy0, :] * (1 - wy) + x[:, :, iy1, :] * wy
    return rows[:, :, :, ix0] * (1 - wx) + rows[:, :, :, ix1] * wx


def _scatter_axis(dy: np.ndarray, i0, i1, w, n_in: int, axis: int) -> np.ndarray:
    """Transpose of gather-lerp along one axis (accumulates duplicates)."""
    wb = w.astype(dy.dtype).reshape([-1 if a == axis else 1 for a in range(dy.ndim)])
    shape = list(dy.shape)
    shape[axis] = n_in
    out = np.zeros(shape, dtype=dy.dtype)
    out_m = np.moveaxis(out, axis, 0)
    np.add.at(out_m, i0, np.moveaxis(dy * (1 - wb), axis, 0))
    np.add.at(out_m, i1, np.moveaxis(dy * wb, axis, 0))
    return out


def bilinear_up2_vjp(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    h, w = x.shape[2], x.shape[3]
    iy0, iy1, wy = _lerp_axis(h)
    ix0, ix1, wx = _lerp_axis(w)
    t = _scatter_axis(dy, ix0, ix1, wx, w, axis=3)
    return _scatter_axis(t, iy0, iy1, wy, h, axis=2)


# ---------------------------------------------------------------------------
# channel pooling, kernel 2 stride 2


def channel_pool2_fwd(x: np.ndarray, mode: str = "avg") -> np.ndarray:
    if x.shape[1] % 2:
        raise OddChannelCount(f"channel pooling by 2 needs an even channel count, got {x.shape[1]}")
    a, b = x[:, ::2], x[:, 1::2]
    if mode == "avg":
        return (a + b) / 2
    if mode == "max":
        return np.maximum(a, b)
    raise ValueError(f"unknown channel pool mode {mode!r}")


def channel_pool2_vjp(x: np.ndarray, dy: np.ndarray, mode: str = "avg") -> np.ndarray:
    dx = np.empty_like(x)
    if mode == "avg":
        dx[:, ::2] = dy / 2
        dx[:, 1::2] = dy / 2
    else:
        pick = x[:, ::2] >= x[:, 1::2]
        dx[:, ::2] = np.where(pick, dy, 0)
        dx[:, 1::2] = np.where(pick, 0, dy)
    return dx


# ---------------------------------------------------------------------------
# concat / add


def concat_fwd(xs: list[np.ndarray]) -> np.ndarray:
    base = xs[0].shape
    for x in xs[1:]:
        if x.shape[0] != base[0] or x.shape[2:] != base[2:]:
            raise ShapeMismatch("channel concat needs matching N, H, W")
    return np.concatenate(xs, axis=1)


def concat_vjp(xs: list[np.ndarray], dy: np.ndarray) -> list[np.ndarray]:
    splits = np.cumsum([x.shape[1] for x in xs])[:-1]
    return np.split(dy, splits, axis=1)


def add_fwd(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    if x.shape != y.shape:
        raise ShapeMismatch(f"add needs matching shapes, got {x.shape} and {y.shape}")
    return x + y


# ---------------------------------------------------------------------------
# tensors and the op tape


@dataclass
class Tensor:
    """Dense array value with an optional gradient buffer of the same shape."""

    data: np.ndarray
    grad: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeMismatch(f"gradient shape {g.shape} != value shape {self.data.shape}")
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad = self.grad + g


class OpTape:
    """Record of primitive applications enabling a reverse-mode sweep.

    Each entry holds the op's output tensor and a VJP callback that routes
    the output gradient to the inputs.  Entries are appended in execution
    order, so iterating in reverse visits ops in reverse topological order.
    """

    def __init__(self):
        self._entries: list[tuple[Tensor, object]] = []

    def __len__(self) -> int:
        return len(self._entries)

    def record(self, out: Tensor, vjp) -> None:
        self._entries.append((out, vjp))


def backward(tape: OpTape, out_grad: np.ndarray | Tensor) -> None:
    """Reverse sweep: accumulate gradients of the tape's final output into
    every recorded input's ``.grad``."""
    if isinstance(out_grad, Tensor):
        out_grad = out_grad.data
    out_grad = np.asarray(out_grad)
    if not tape._entries:
        raise TapeMismatch("tape is empty")
    final = tape._entries[-1][0]
    if out_grad.shape != final.data.shape:
        raise TapeMismatch(
            f"output gradient shape {out_grad.shape} != recorded output shape {final.data.shape}"
        )
    final.accumulate_grad(out_grad)
    for out, vjp in reversed(tape._entries):
        if out.grad is None:
            continue
        vjp(out.grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int | None = None, tape: OpTape | None = None) -> Tensor:
    x, w = _as_tensor(x), _as_tensor(w)
    out = Tensor(conv2d_fwd(x.data, w.data, stride, pad))
    if tape is not None:
        def vjp(dy, x=x, w=w):
            dx, dw = conv2d_vjp(x.data, w.data, stride, pad, dy)
            x.accumulate_grad(dx)
            w.accumulate_grad(dw)
        tape.record(out, vjp)
    return out


def batchnorm_infer(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    mean: Tensor,
    var: Tensor,
    eps: float = 1e-5,
    tape: OpTape | None = None,
) -> Tensor:
    x, gamma, beta, mean, var = map(_as_tensor, (x, gamma, beta, mean, var))
    out = Tensor(batchnorm_fwd(x.data, gamma.data, beta.data, mean.data, var.data, eps))
    if tape is not None:
        def vjp(dy):
            dx, dg, db, dm, dv = batchnorm_vjp(
                x.data, gamma.data, beta.data, mean.data, var.data, eps, dy
            )
            x.accumulate_grad(dx)
            gamma.accumulate_grad(dg)
            beta.accumulate_grad(db)
            mean.accumulate_grad(dm)
            var.accumulate_grad(dv)
        tape.record(out, vjp)
    return out


def relu(x: Tensor, tape: OpTape | None = None) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(relu_fwd(x.data))
    if tape is not None:
        tape.record(out, lambda dy: x.accumulate_grad(relu_vjp(x.data, dy)))
    return out


def bilinear_upsample(x: Tensor, factor: int = 2, tape: OpTape | None = None) -> Tensor:
    if factor != 2:
        raise ValueError("factor is fixed at 2; chain calls for larger factors")
    x = _as_tensor(x)
    out = Tensor(bilinear_up2_fwd(x.data))
    if tape is not None:
        tape.record(out, lambda dy: x.accumulate_grad(bilinear_up2_vjp(x.data, dy)))
    return out


def channel_avg_pool2(x: Tensor, tape: OpTape | None = None) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(channel_pool2_fwd(x.data, "avg"))
    if tape is not None:
        tape.record(out, lambda dy: x.accumulate_grad(channel_pool2_vjp(x.data, dy, "avg")))
    return out


def concat_channels(xs: list[Tensor], tape: OpTape | None = None) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    out = Tensor(concat_fwd([x.data for x in xs]))
    if tape is not None:
        def vjp(dy):
            for x, dx in zip(xs, concat_vjp([x.data for x in xs], dy)):
                x.accumulate_grad(dx)
        tape.record(out, vjp)
    return out


def add(x: Tensor, y: Tensor, tape: OpTape | None = None) -> Tensor:
    x, y = _as_tensor(x), _as_tensor(y)
    out = Tensor(add_fwd(x.data, y.data))
    if tape is not None:
        def vjp(dy):
            x.accumulate_grad(dy)
            y.accumulate_grad(dy)
        tape.record(out, vjp)
    return out


# ---------------------------------------------------------------------------
# raw tensor file format: magic "HRTF", u32 version, u8 dtype, u8 rank,
# u64 dims[rank], little-endian payload

TENSOR_MAGIC = b"HRTF"
TENSOR_VERSION = 1
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_BYTES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def write_tensor(path, t: Tensor | np.ndarray) -> None:
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    if data.dtype not in _DTYPE_BYTES:
        raise ValueError(f"unsupported dtype {data.dtype}; use float32 or float64")
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack("<I", TENSOR_VERSION))
        f.write(struct.pack("<BB", _DTYPE_BYTES[data.dtype], data.ndim))
        f.write(struct.pack(f"<{data.ndim}Q", *data.shape))
        f.write(np.ascontiguousarray(data, dtype=data.dtype.newbyteorder("<")).tobytes())


def read_tensor(path) -> Tensor:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 10:
        raise FormatError("file too short for a tensor header", len(raw))
    if raw[:4] != TENSOR_MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}", 0)
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != TENSOR_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    dtype_code, rank = struct.unpack_from("<BB", raw, 8)
    if dtype_code not in _DTYPE_CODES:
        raise FormatError(f"unknown dtype code {dtype_code}", 8)
    if rank > 8:
        raise FormatError(f"implausible rank {rank}", 9)
    off = 10
    if len(raw) < off + 8 * rank:
        raise FormatError("truncated dimension list", len(raw))
    dims = struct.unpack_from(f"<{rank}Q", raw, off)
    off += 8 * rank
    dtype = _DTYPE_CODES[dtype_code]
    count = 1
    for d in dims:
        count *= d
    if len(raw) != off + count * dtype.itemsize:
        raise FormatError(
            f"payload size {len(raw) - off} does not match shape {dims}", off
        )
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=off).reshape(dims)
    return Tensor(data.astype(dtype.newbyteorder("=")))

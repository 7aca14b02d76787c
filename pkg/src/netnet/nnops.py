"""Convolution, pooling, resampling and the residual fusion block.

Spatial ops act on the last three axes (C, H, W); any leading axes are
treated as batch.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Parameter, ShapeError, Tensor, add, record, relu


class ConfigError(ValueError):
    """Raised for invalid layer or model configuration."""


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, tuple[int, ...]]:
    if x.ndim < 3:
        raise ShapeError(f"expected (..., C, H, W), got shape {x.shape}")
    lead = x.shape[:-3]
    return x.reshape((-1,) + x.shape[-3:]), lead


def _out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


# --------------------------------------------------------------------------
# convolution


@dataclass
class ConvParams:
    kernel: Parameter
    bias: Parameter
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        k = self.kernel.shape[-1]
        if self.kernel.ndim != 4 or self.kernel.shape[-2] != k:
            raise ConfigError(f"kernel must be out×in×k×k, got {self.kernel.shape}")
        if self.bias.shape != (self.kernel.shape[0],):
            raise ConfigError(f"bias shape {self.bias.shape} does not match kernel {self.kernel.shape}")
        if k == 1 and self.padding != 0:
            raise ConfigError("1×1 conv must use padding 0")
        if k == 3 and self.padding != 1 and self.stride == 1:
            raise ConfigError("3×3 stride-1 conv must use padding 1")

    @property
    def in_ch(self) -> int:
        return self.kernel.shape[1]

    @property
    def out_ch(self) -> int:
        return self.kernel.shape[0]

    def parameters(self) -> list[Parameter]:
        return [self.kernel, self.bias]


def init_conv(rng: np.random.Generator, in_ch: int, out_ch: int, k: int, name: str = "",
              stride: int = 1, std: float | None = None) -> ConvParams:
    """He-normal kernel, zero bias."""
    if std is None:
        std = np.sqrt(2.0 / (in_ch * k * k))
    w = rng.standard_normal((out_ch, in_ch, k, k)) * std
    return ConvParams(Parameter(w, f"{name}.weight"), Parameter(np.zeros(out_ch), f"{name}.bias"),
                      stride=stride, padding=k // 2)


def zero_conv(in_ch: int, out_ch: int, k: int, name: str = "") -> ConvParams:
    return ConvParams(Parameter(np.zeros((out_ch, in_ch, k, k)), f"{name}.weight"),
                      Parameter(np.zeros(out_ch), f"{name}.bias"), padding=k // 2)


def identity_conv(ch: int, name: str = "") -> ConvParams:
    w = np.eye(ch).reshape(ch, ch, 1, 1)
    return ConvParams(Parameter(w, f"{name}.weight"), Parameter(np.zeros(ch), f"{name}.bias"))


def _windows(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    # (N, C, Ho, Wo, k, k) view over a padded (N, C, H, W) array
    return sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]


def _im2col(xb: np.ndarray, k: int, stride: int, pad: int, ho: int, wo: int) -> np.ndarray:
    """(N·Ho·Wo, k·k·C) patch matrix of an unpadded (N, C, H, W) array.

    Gathered channels-last so each copied run is a contiguous channel vector.
    """
    n, c = xb.shape[:2]
    xh = xb.transpose(0, 2, 3, 1)
    if pad:
        xh = np.pad(xh, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    if k == 1:
        cols = xh[:, ::stride, ::stride][:, :ho, :wo]
    else:
        cols = sliding_window_view(xh, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
        cols = cols.transpose(0, 1, 2, 4, 5, 3)
    return cols.reshape(n * ho * wo, k * k * c)


def _kernel_matrix(w: np.ndarray) -> np.ndarray:
    # (O, C, k, k) -> (O, k·k·C), matching the _im2col column order
    return w.transpose(0, 2, 3, 1).reshape(w.shape[0], -1)


def _correlate(xb: np.ndarray, w: np.ndarray, stride: int, pad: int) -> tuple[np.ndarray, np.ndarray]:
    """Cross-correlation of (N, C, H, W) with (O, C, k, k); returns (out NCHW, patch matrix)."""
    n, c, h, wd = xb.shape
    o, _, k, _ = w.shape
    ho, wo = _out_size(h, k, stride, pad), _out_size(wd, k, stride, pad)
    cols = _im2col(xb, k, stride, pad, ho, wo)
    out = (cols @ _kernel_matrix(w).T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    return out, cols


def _scatter_windows(dcols: np.ndarray, padded_shape, k: int, stride: int) -> np.ndarray:
    # adjoint of _windows: sum window contributions back into the padded input
    dxp = np.zeros(padded_shape)
    ho, wo = dcols.shape[2], dcols.shape[3]
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += dcols[..., i, j]
    return dxp


def conv(x: Tensor, p: ConvParams) -> Tensor:
    xb, lead = _as_batch(x.data)
    n, c, h, w = xb.shape
    if c != p.in_ch:
        raise ShapeError(f"conv: input has {c} channels, kernel expects {p.in_ch}")
    k, s, pad = p.kernel.shape[-1], p.stride, p.padding
    ho, wo = _out_size(h, k, s, pad), _out_size(w, k, s, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv: output size {ho}×{wo} < 1 for input {h}×{w}")
    wgt = p.kernel.data
    out, cols = _correlate(xb, wgt, s, pad)
    out = out + p.bias.data[None, :, None, None]

    def vjp(g):
        gb = g.reshape((-1,) + g.shape[-3:])
        gbias = gb.sum(axis=(0, 2, 3))
        g2d = gb.transpose(0, 2, 3, 1).reshape(-1, p.out_ch)
        gw = (g2d.T @ cols).reshape(p.out_ch, k, k, c).transpose(0, 3, 1, 2)
        if not x.requires_grad:
            return None, gw, gbias
        if s == 1 and pad <= k - 1:
            # data gradient of a stride-1 correlation is a full correlation with the flipped kernel
            flipped = np.ascontiguousarray(wgt[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            dx, _ = _correlate(gb, flipped, 1, k - 1 - pad)
        else:
            dcols = (g2d @ _kernel_matrix(wgt)).reshape(n, ho, wo, k, k, c).transpose(0, 5, 1, 2, 3, 4)
            xp_shape = (n, c, h + 2 * pad, w + 2 * pad)
            dx = _scatter_windows(dcols, xp_shape, k, s)[:, :, pad:pad + h, pad:pad + w]
        return dx.reshape(x.shape), gw, gbias

    return record("conv", out.reshape(lead + out.shape[1:]), (x, p.kernel, p.bias), vjp)


# --------------------------------------------------------------------------
# pooling


def pool(x: Tensor, mode: str, window: int, stride: int, padding: int = 0) -> Tensor:
    """Max or average pooling, floor output size; max-pool pads with -inf."""
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be >= 1")
    if mode not in ("max", "avg"):
        raise ValueError(f"unknown pool mode {mode!r}")
    if mode == "avg" and padding:
        raise ValueError("avg pooling does not support padding")
    xb, lead = _as_batch(x.data)
    n, c, h, w = xb.shape
    ho, wo = _out_size(h, window, stride, padding), _out_size(w, window, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"pool: output size {ho}×{wo} < 1 for input {h}×{w}")
    pad = padding
    xp = np.pad(xb, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf) if pad else xb
    cols = _windows(xp, window, stride)[:, :, :ho, :wo]
    if mode == "max":
        flat = cols.reshape(n, c, ho, wo, window * window)
        arg = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

        def vjp(g):
            if not x.requires_grad:
                return (None,)
            gb = g.reshape(n, c, ho, wo)
            dxp = np.zeros(xp.shape)
            for i in range(window):
                for j in range(window):
                    hit = arg == i * window + j
                    if hit.any():
                        dxp[:, :, i:i + stride * (ho - 1) + 1:stride,
                            j:j + stride * (wo - 1) + 1:stride] += gb * hit
            dx = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
            return (dx.reshape(x.shape),)
    else:
        out = cols.mean(axis=(-2, -1))
        area = float(window * window)

        def vjp(g):
            gb = g.reshape(n, c, ho, wo) / area
            dcols = np.broadcast_to(gb[..., None, None], (n, c, ho, wo, window, window))
            dx = _scatter_windows(dcols, xp.shape, window, stride)
            return (dx.reshape(x.shape),)

    return record(f"{mode}_pool", out.reshape(lead + out.shape[1:]), (x,), vjp)


def adaptive_bounds(n_in: int, n_out: int) -> list[tuple[int, int]]:
    """Window [start, end) per output index; covers the input exactly."""
    return [((i * n_in) // n_out, -((-(i + 1) * n_in) // n_out)) for i in range(n_out)]


def adaptive_max_pool(x: Tensor, out_h: int, out_w: int) -> Tensor:
    xb, lead = _as_batch(x.data)
    n, c, h, w = xb.shape
    if not (1 <= out_h <= h and 1 <= out_w <= w):
        raise ShapeError(f"adaptive pool: cannot map {h}×{w} to {out_h}×{out_w}")
    rows, cols = adaptive_bounds(h, out_h), adaptive_bounds(w, out_w)
    out = np.empty((n, c, out_h, out_w))
    src = np.empty((n, c, out_h, out_w), dtype=np.int64)
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            region = xb[:, :, r0:r1, c0:c1].reshape(n, c, -1)
            a = region.argmax(axis=-1)
            out[:, :, i, j] = np.take_along_axis(region, a[..., None], axis=-1)[..., 0]
            rw = c1 - c0
            src[:, :, i, j] = (r0 + a // rw) * w + (c0 + a % rw)

    def vjp(g):
        gb = g.reshape(n, c, out_h * out_w)
        dx = np.zeros((n, c, h * w))
        idx = src.reshape(n, c, -1)
        # overlapping adaptive windows may pick the same source; accumulate explicitly
        nn, cc = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
        for q in range(idx.shape[-1]):
            np.add.at(dx, (nn, cc, idx[:, :, q]), gb[:, :, q])
        return (dx.reshape(x.shape),)

    return record("adaptive_max_pool", out.reshape(lead + out.shape[1:]), (x,), vjp)


def channel_reduce(x: Tensor, mode: str) -> Tensor:
    if x.ndim < 3:
        raise ShapeError(f"channel_reduce expects (..., C, H, W), got {x.shape}")
    d = x.data
    if mode == "max":
        arg = d.argmax(axis=-3)
        out = np.take_along_axis(d, arg[..., None, :, :], axis=-3)

        def vjp(g):
            full = np.zeros_like(d)
            np.put_along_axis(full, arg[..., None, :, :], g, axis=-3)
            return (full,)
    elif mode == "avg":
        c = d.shape[-3]
        out = d.mean(axis=-3, keepdims=True)

        def vjp(g):
            return (np.broadcast_to(g / c, d.shape).copy(),)
    else:
        raise ValueError(f"unknown channel_reduce mode {mode!r}")
    return record(f"channel_{mode}", out, (x,), vjp)


# --------------------------------------------------------------------------
# resampling


def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Align-corners linear interpolation matrix of shape (n_out, n_in)."""
    m = np.zeros((n_out, n_in))
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    if n_out == 1:
        m[0, 0] = 1.0
        return m
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    m[np.arange(n_out), lo] = 1.0 - frac
    m[np.arange(n_out), lo + 1] += frac
    return m


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    h, w = x.shape[-2:]
    if out_h < h or out_w < w:
        raise ShapeError(f"bilinear_upsample cannot shrink {h}×{w} to {out_h}×{out_w}")
    mh, mw = interp_matrix(h, out_h), interp_matrix(w, out_w)
    out = mh @ x.data @ mw.T
    return record("bilinear_upsample", out, (x,), lambda g: (mh.T @ g @ mw,))


# --------------------------------------------------------------------------
# residual fusion block


@dataclass
class FusionParams:
    reduce: ConvParams
    spatial: ConvParams
    expand: ConvParams

    def __post_init__(self):
        if not (self.reduce.in_ch == self.expand.out_ch
                and self.reduce.out_ch == self.spatial.in_ch
                and self.spatial.out_ch == self.expand.in_ch):
            raise ConfigError("fusion block channels do not chain back to the input width")
        if self.reduce.kernel.shape[-1] != 1 or self.spatial.kernel.shape[-1] != 3 \
                or self.expand.kernel.shape[-1] != 1:
            raise ConfigError("fusion block must be 1×1, 3×3, 1×1")

    def parameters(self) -> list[Parameter]:
        return self.reduce.parameters() + self.spatial.parameters() + self.expand.parameters()


def init_fusion(rng: np.random.Generator, ch: int, mid: int, name: str = "") -> FusionParams:
    # last conv starts at zero so a fresh block is the identity
    return FusionParams(init_conv(rng, ch, mid, 1, f"{name}.reduce"),
                        init_conv(rng, mid, mid, 3, f"{name}.spatial"),
                        zero_conv(mid, ch, 1, f"{name}.expand"))


def fusion_block(x: Tensor, p: FusionParams) -> Tensor:
    if x.shape[-3] != p.reduce.in_ch:
        raise ShapeError(f"fusion block expects {p.reduce.in_ch} channels, got {x.shape[-3]}")
    y = relu(conv(x, p.reduce))
    y = relu(conv(y, p.spatial))
    return add(x, conv(y, p.expand))

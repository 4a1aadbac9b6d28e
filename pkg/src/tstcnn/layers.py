"""Differentiable layer primitives: 3D convolution, pooling, batch norm,
trilinear upsampling, activations, fully-connected and bilinear fusion.

All volume ops take (B, C, T, H, W) arrays. Forward functions are pure in
(input, parameters) except batch norm, whose running statistics are a
mutable cell owned by its layer instance. Each op records a single tape
node carrying its own backward rule.
"""

from __future__ import annotations

from itertools import product
from typing import Optional, Sequence, Tuple

import numpy as np

from .tensor import ContractError, ShapeError, Tensor, record_op

__all__ = [
    "conv3d",
    "maxpool3d",
    "batchnorm3d",
    "trilinear_upsample",
    "relu",
    "sigmoid",
    "softmax",
    "linear",
    "bilinear_fusion",
    "flatten",
    "cross_entropy_logits",
    "Conv3d",
    "BatchNorm3d",
    "Linear",
    "Bilinear",
    "he_normal",
    "same_padding",
]


def _triple(v) -> Tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ShapeError(f"expected 3 per-axis values, got {v!r}")
    return t


def same_padding(kernel) -> Tuple[int, int, int]:
    """Per-axis padding that preserves extents at stride 1; kernels must be odd."""
    k = _triple(kernel)
    if any(x % 2 == 0 for x in k):
        raise ShapeError(f"same-padding requires odd kernel extents, got {k}")
    return tuple((x - 1) // 2 for x in k)


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    """Zero-mean normal with std sqrt(2/fan_in), the init used for all weights."""
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


# ---------------------------------------------------------------------------
# 3D convolution


def _conv_out_extent(size: int, k: int, p: int, s: int) -> int:
    return (size + 2 * p - k) // s + 1


def conv3d(x: Tensor, weight: Tensor, bias: Tensor, stride=(1, 1, 1), padding=(0, 0, 0)) -> Tensor:
    """Cross-correlation of a (B,C,T,H,W) volume with (O,C,kt,kh,kw) filters.

    Implemented as im2col (one strided slice copy per kernel offset) plus a
    single batched matmul; the backward pass reuses the column matrix for the
    weight gradient and scatters strided slices back for the input gradient.
    """
    xd = x.data
    if xd.ndim != 5:
        raise ShapeError(f"conv3d expects (B,C,T,H,W), got rank {xd.ndim}")
    B, C, T, H, W = xd.shape
    O, Ci, kt, kh, kw = weight.data.shape
    if C != Ci:
        raise ShapeError(f"conv3d channel mismatch: input has {C}, weights expect {Ci}")
    if bias.data.shape != (O,):
        raise ShapeError(f"bias shape {bias.data.shape} does not match {O} output channels")
    st, sh, sw = _triple(stride)
    pt, ph, pw = _triple(padding)
    To = _conv_out_extent(T, kt, pt, st)
    Ho = _conv_out_extent(H, kh, ph, sh)
    Wo = _conv_out_extent(W, kw, pw, sw)
    if min(To, Ho, Wo) < 1:
        raise ShapeError(
            f"conv3d output collapses: input {(T, H, W)}, kernel {(kt, kh, kw)}, "
            f"padding {(pt, ph, pw)}, stride {(st, sh, sw)}"
        )
    S = To * Ho * Wo
    K = kt * kh * kw

    padded = (pt or ph or pw) != 0
    if padded:
        xp = np.pad(xd, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))
    else:
        xp = xd

    if K == 1 and (st, sh, sw) == (1, 1, 1):
        cols = xp.reshape(B, C, S)
    else:
        cols = np.empty((B, C, K, S), dtype=xd.dtype)
        for idx, (a, b, c) in enumerate(product(range(kt), range(kh), range(kw))):
            sl = xp[:, :, a : a + (To - 1) * st + 1 : st,
                    b : b + (Ho - 1) * sh + 1 : sh,
                    c : c + (Wo - 1) * sw + 1 : sw]
            cols[:, :, idx, :] = sl.reshape(B, C, S)
        cols = cols.reshape(B, C * K, S)

    w_mat = weight.data.reshape(O, C * K)
    out = np.matmul(w_mat, cols)  # (B, O, S) by broadcasting
    out += bias.data[None, :, None]
    out = out.reshape(B, O, To, Ho, Wo)

    def backward(g: np.ndarray):
        gm = g.reshape(B, O, S)
        gb = gm.sum(axis=(0, 2)) if bias.requires_grad else None
        gw = None
        if weight.requires_grad:
            gw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.data.shape)
        gx = None
        if x.requires_grad:
            dcols = np.matmul(w_mat.T, gm)  # (B, C*K, S)
            if K == 1 and (st, sh, sw) == (1, 1, 1):
                gx = dcols.reshape(B, C, T, H, W)
            else:
                dcols = dcols.reshape(B, C, K, S)
                gxp = np.zeros_like(xp)
                for idx, (a, b, c) in enumerate(product(range(kt), range(kh), range(kw))):
                    gxp[:, :, a : a + (To - 1) * st + 1 : st,
                        b : b + (Ho - 1) * sh + 1 : sh,
                        c : c + (Wo - 1) * sw + 1 : sw] += dcols[:, :, idx, :].reshape(B, C, To, Ho, Wo)
                gx = gxp[:, :, pt : pt + T, ph : ph + H, pw : pw + W] if padded else gxp
        return (gx, gw, gb)

    return record_op([x, weight, bias], out, backward)


# ---------------------------------------------------------------------------
# 3D max pooling


def maxpool3d(x: Tensor, kernel: int = 2, stride: int = 2) -> Tensor:
    """Cubic max pooling; extents floor-divide, odd tails are dropped.

    Backward routes the gradient to the argmax position; ties break to the
    first index in (dt, dh, dw) scan order.
    """
    if kernel != stride:
        raise ContractError("maxpool3d supports kernel == stride only")
    k = int(kernel)
    xd = x.data
    if xd.ndim != 5:
        raise ShapeError(f"maxpool3d expects (B,C,T,H,W), got rank {xd.ndim}")
    B, C, T, H, W = xd.shape
    if min(T, H, W) < k:
        raise ShapeError(f"maxpool3d extent smaller than kernel: {(T, H, W)} < {k}")
    To, Ho, Wo = T // k, H // k, W // k
    crop = xd[:, :, : To * k, : Ho * k, : Wo * k]
    windows = crop.reshape(B, C, To, k, Ho, k, Wo, k)
    windows = windows.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(B, C, To, Ho, Wo, k * k * k)
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def backward(g: np.ndarray):
        gw = np.zeros((B, C, To, Ho, Wo, k * k * k), dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gw = gw.reshape(B, C, To, Ho, Wo, k, k, k).transpose(0, 1, 2, 5, 3, 6, 4, 7)
        gx = np.zeros_like(xd)
        gx[:, :, : To * k, : Ho * k, : Wo * k] = gw.reshape(B, C, To * k, Ho * k, Wo * k)
        return (gx,)

    return record_op([x], out, backward)


# ---------------------------------------------------------------------------
# 3D batch normalization


def batchnorm3d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    eps: float,
    momentum: float,
    train: bool,
) -> Tensor:
    """Per-channel normalization over batch and all spatio-temporal positions.

    Train mode uses batch statistics (biased variance) and updates the
    running arrays in place; eval mode normalizes with the running
    statistics. Differentiable w.r.t. x, gamma and beta in both modes.
    """
    xd = x.data
    if xd.ndim != 5:
        raise ShapeError(f"batchnorm3d expects (B,C,T,H,W), got rank {xd.ndim}")
    B, C, T, H, W = xd.shape
    if gamma.data.shape != (C,) or beta.data.shape != (C,):
        raise ShapeError(f"gamma/beta must have length {C}")
    axes = (0, 2, 3, 4)
    m = B * T * H * W
    dt = xd.dtype.type
    shape_c = (1, C, 1, 1, 1)

    if train:
        if m < 2:
            raise ContractError("batchnorm3d train mode needs at least 2 elements per channel")
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        running_mean *= dt(1.0 - momentum)
        running_mean += dt(momentum) * mu
        running_var *= dt(1.0 - momentum)
        running_var += dt(momentum) * var
    else:
        mu = running_mean
        var = running_var

    inv_std = 1.0 / np.sqrt(var + dt(eps))
    xhat = (xd - mu.reshape(shape_c)) * inv_std.reshape(shape_c)
    out = xhat * gamma.data.reshape(shape_c) + beta.data.reshape(shape_c)

    def backward(g: np.ndarray):
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gb = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(shape_c)
            if train:
                s1 = gxhat.sum(axis=axes).reshape(shape_c)
                s2 = (gxhat * xhat).sum(axis=axes).reshape(shape_c)
                gx = (gxhat - s1 / dt(m) - xhat * s2 / dt(m)) * inv_std.reshape(shape_c)
            else:
                gx = gxhat * inv_std.reshape(shape_c)
        return (gx, gg, gb)

    return record_op([x, gamma, beta], out, backward)


# ---------------------------------------------------------------------------
# Trilinear upsampling


def _interp_matrix(dst: int, src: int, dtype) -> np.ndarray:
    """Dense 1D interpolation matrix under the half-pixel-centers convention."""
    pos = (np.arange(dst, dtype=np.float64) + 0.5) * (src / dst) - 0.5
    pos = np.clip(pos, 0.0, src - 1.0)
    i0 = np.floor(pos).astype(np.int64)
    i0 = np.minimum(i0, src - 1)
    i1 = np.minimum(i0 + 1, src - 1)
    w = pos - i0
    mat = np.zeros((dst, src), dtype=np.float64)
    rows = np.arange(dst)
    np.add.at(mat, (rows, i0), 1.0 - w)
    np.add.at(mat, (rows, i1), w)
    return mat.astype(dtype)


def _apply_axis(data: np.ndarray, mat: np.ndarray, axis: int) -> np.ndarray:
    moved = np.moveaxis(data, axis, -1)
    out = moved @ mat.T
    return np.moveaxis(out, -1, axis)


def trilinear_upsample(x: Tensor, target_extents) -> Tensor:
    """Resample a (B,C,T,H,W) volume to ``target_extents`` = (T',H',W').

    Each output sample blends its 8 nearest source samples with half-pixel
    center alignment; exact on trilinear fields away from clamped borders.
    Only upsampling (every target extent >= source extent) is supported.
    """
    xd = x.data
    if xd.ndim != 5:
        raise ShapeError(f"trilinear_upsample expects (B,C,T,H,W), got rank {xd.ndim}")
    src = xd.shape[2:]
    dst = tuple(int(v) for v in target_extents)
    if len(dst) != 3:
        raise ShapeError(f"target_extents must have 3 entries, got {target_extents!r}")
    if any(d < s for d, s in zip(dst, src)):
        raise ContractError(f"trilinear_upsample cannot downsample: {src} -> {dst}")
    if dst == tuple(src):
        return record_op([x], xd.copy(), lambda g: (g,))

    mats = [_interp_matrix(d, s, xd.dtype) for d, s in zip(dst, src)]
    out = xd
    for axis, mat in zip((2, 3, 4), mats):
        out = _apply_axis(out, mat, axis)

    def backward(g: np.ndarray):
        gx = g
        for axis, mat in zip((2, 3, 4), mats):
            gx = _apply_axis(gx, mat.T, axis)
        return (gx,)

    return record_op([x], out, backward)


# ---------------------------------------------------------------------------
# Activations


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return record_op([x], out, lambda g: (g * (out > 0),))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)
    return record_op([x], out, lambda g: (g * out * (1.0 - out),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    ex = np.exp(shifted)
    out = ex / ex.sum(axis=axis, keepdims=True)

    def backward(g: np.ndarray):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return record_op([x], out, backward)


# ---------------------------------------------------------------------------
# Fully connected and bilinear fusion


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map: (B,F) x (O,F) + (O,) -> (B,O)."""
    xd, wd = x.data, weight.data
    if xd.ndim != 2 or wd.ndim != 2 or xd.shape[1] != wd.shape[1]:
        raise ShapeError(f"linear: input {xd.shape} incompatible with weights {wd.shape}")
    out = xd @ wd.T + bias.data[None, :]

    def backward(g: np.ndarray):
        gx = g @ wd if x.requires_grad else None
        gw = g.T @ xd if weight.requires_grad else None
        gb = g.sum(axis=0) if bias.requires_grad else None
        return (gx, gw, gb)

    return record_op([x, weight, bias], out, backward)


def bilinear_fusion(a: Tensor, b: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """out[n,k] = sum_ij a[n,i] * W[k,i,j] * b[n,j] + bias[k]."""
    ad, bd, wd = a.data, b.data, weight.data
    if ad.ndim != 2 or bd.ndim != 2 or wd.ndim != 3:
        raise ShapeError("bilinear_fusion expects a:(B,F1), b:(B,F2), W:(O,F1,F2)")
    if ad.shape[0] != bd.shape[0]:
        raise ShapeError(f"batch mismatch {ad.shape[0]} vs {bd.shape[0]}")
    if (ad.shape[1], bd.shape[1]) != wd.shape[1:]:
        raise ShapeError(
            f"bilinear_fusion: features ({ad.shape[1]},{bd.shape[1]}) vs weights {wd.shape}"
        )
    O, F1, F2 = wd.shape
    B = ad.shape[0]
    wb = (wd.reshape(O * F1, F2) @ bd.T).reshape(O, F1, B)  # W[k] @ b per sample
    out = np.einsum("bi,kib->bk", ad, wb, optimize=True) + bias.data[None, :]

    def backward(g: np.ndarray):
        ga = np.einsum("bk,kib->bi", g, wb, optimize=True) if a.requires_grad else None
        gb_vec = None
        if b.requires_grad:
            aw = np.einsum("bi,kij->bkj", ad, wd, optimize=True)
            gb_vec = np.einsum("bk,bkj->bj", g, aw, optimize=True)
        gw = np.einsum("bk,bi,bj->kij", g, ad, bd, optimize=True) if weight.requires_grad else None
        gbias = g.sum(axis=0) if bias.requires_grad else None
        return (ga, gb_vec, gw, gbias)

    return record_op([a, b, weight, bias], out, backward)


def flatten(x: Tensor) -> Tensor:
    """(B, ...) -> (B, prod(...))."""
    shape = x.data.shape
    out = x.data.reshape(shape[0], -1)
    return record_op([x], out, lambda g: (g.reshape(shape),))


def cross_entropy_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of softmax(logits) against integer labels.

    Fused log-sum-exp form for numerical stability; gradient is
    (softmax - onehot) / B.
    """
    xd = logits.data
    if xd.ndim != 2:
        raise ShapeError(f"cross_entropy_logits expects (B,K) logits, got {xd.shape}")
    B, K = xd.shape
    y = np.asarray(labels)
    if y.shape != (B,):
        raise ShapeError(f"labels shape {y.shape} does not match batch {B}")
    if y.min() < 0 or y.max() >= K:
        raise ContractError(f"labels out of range [0, {K})")
    shifted = xd - xd.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    loss = np.asarray(-logp[np.arange(B), y].mean(), dtype=xd.dtype)

    def backward(g: np.ndarray):
        p = np.exp(logp)
        p[np.arange(B), y] -= 1.0
        return (p * (g / xd.dtype.type(B)),)

    return record_op([logits], loss, backward)


# ---------------------------------------------------------------------------
# Parameterized layer objects


class Conv3d:
    """3D convolution layer owning weight (O,C,kt,kh,kw) and bias (O,)."""

    def __init__(self, in_channels, out_channels, kernel, rng, padding="same",
                 stride=(1, 1, 1), dtype=np.float32, init_scale=1.0):
        k = _triple(kernel)
        self.padding = same_padding(k) if padding == "same" else _triple(padding)
        self.stride = _triple(stride)
        fan_in = in_channels * k[0] * k[1] * k[2]
        self.weight = Tensor(
            he_normal(rng, (out_channels, in_channels) + k, fan_in, dtype) * dtype(init_scale),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return conv3d(x, self.weight, self.bias, self.stride, self.padding)

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def state(self):
        return []


class BatchNorm3d:
    """Per-channel batch norm with gamma/beta parameters and running stats."""

    def __init__(self, channels, eps=1e-5, momentum=0.1, dtype=np.float32):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.eps = float(eps)
        self.momentum = float(momentum)

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        return batchnorm3d(x, self.gamma, self.beta, self.running_mean,
                           self.running_var, self.eps, self.momentum, train)

    def params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def state(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]


class Linear:
    """Fully connected layer, weight (O,F) and bias (O,)."""

    def __init__(self, in_features, out_features, rng, dtype=np.float32):
        self.weight = Tensor(
            he_normal(rng, (out_features, in_features), in_features, dtype), requires_grad=True
        )
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def state(self):
        return []


class Bilinear:
    """Bilinear fusion layer, weight (O,F1,F2) and bias (O,)."""

    def __init__(self, in1_features, in2_features, out_features, rng, dtype=np.float32):
        fan_in = in1_features * in2_features
        self.weight = Tensor(
            he_normal(rng, (out_features, in1_features, in2_features), fan_in, dtype),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True)

    def __call__(self, a: Tensor, b: Tensor) -> Tensor:
        return bilinear_fusion(a, b, self.weight, self.bias)

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def state(self):
        return []

"""Neural-net building blocks on the tape: conv2d, dense, activations, norms.

conv2d is cross-correlation (no kernel flip) everywhere; callers that need a
true convolution pass a pre-flipped kernel.
"""

from __future__ import annotations

import numpy as np

from .tensor import GridError, Tensor

__all__ = [
    "conv2d", "dense", "relu", "leaky_relu", "silu", "tanh", "sigmoid",
    "softplus", "group_norm", "avg_pool2d", "upsample2x", "replicate_pad2d",
]


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """(B, C, Hp, Wp) -> (B*Ho*Wo, C*kh*kw) patch matrix."""
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]           # (B, C, Ho, Wo, kh, kw)
    b, c, ho, wo = windows.shape[:4]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)
    return np.ascontiguousarray(cols)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2D cross-correlation of a (B, Cin, H, W) input with a (Cout, Cin, kh, kw) kernel."""
    if x.ndim != 4:
        raise GridError(f"conv2d input must be rank 4, got shape {x.shape}")
    if kernel.ndim != 4:
        raise GridError(f"conv2d kernel must be rank 4, got shape {kernel.shape}")
    b, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if cin != kcin:
        raise GridError(f"conv2d channel mismatch: input has {cin}, kernel expects {kcin}")
    if stride < 1 or pad < 0:
        raise GridError(f"conv2d requires stride >= 1 and pad >= 0, got {stride}, {pad}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise GridError(f"conv2d kernel {kh}x{kw} does not fit input {h}x{w} with pad {pad}")

    def padded(data):
        if pad == 0:
            return data
        return np.pad(data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))

    wmat = kernel.data.reshape(cout, cin * kh * kw)
    cols = _im2col(padded(x.data), kh, kw, stride)
    out_data = (cols @ wmat.T).reshape(b, ho, wo, cout).transpose(0, 3, 1, 2)
    out_data = np.ascontiguousarray(out_data)
    # keep the patch matrix for the weight gradient; recomputing it costs more
    # than the memory at this scale
    cols_cache = cols if (x.requires_grad or kernel.requires_grad) else None

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(b * ho * wo, cout)
        if kernel.requires_grad:
            kernel._accumulate((g2.T @ cols_cache).reshape(kernel.shape))
        if x.requires_grad:
            ph, pw = kh - 1 - pad, kw - 1 - pad
            if stride == 1 and ph >= 0 and pw >= 0:
                # input grad is a cross-correlation of g with the transposed,
                # 180-degree-rotated kernel
                wt = np.ascontiguousarray(kernel.data.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
                gp = np.pad(g, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else g
                gcols = _im2col(gp, kh, kw, 1)
                gx = (gcols @ wt.reshape(cin, cout * kh * kw).T).reshape(b, h, w, cin)
                x._accumulate(np.ascontiguousarray(gx.transpose(0, 3, 1, 2)))
            else:
                gcols = (g2 @ wmat).reshape(b, ho, wo, cin, kh, kw)
                gxp = np.zeros((b, cin, h + 2 * pad, w + 2 * pad), dtype=g.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + ho * stride:stride, j:j + wo * stride:stride] += \
                            gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                if pad:
                    gxp = gxp[:, :, pad:-pad, pad:-pad]
                x._accumulate(gxp)

    return Tensor._from_op(out_data, (x, kernel), backward, "conv2d")


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map (N, K) @ (K, M) + (M,)."""
    if x.ndim != 2 or weight.ndim != 2:
        raise GridError(f"dense expects rank-2 input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise GridError(f"dense inner dimensions disagree: {x.shape} vs {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise GridError(f"dense bias shape {bias.shape} != ({weight.shape[1]},)")
    out_data = x.data @ weight.data
    if bias is not None:
        out_data = out_data + bias.data

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ weight.data.T)
        if weight.requires_grad:
            weight._accumulate(x.data.T @ g)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=0, dtype=np.float64).astype(g.dtype))

    return Tensor._from_op(out_data, parents, backward, "dense")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        x._accumulate(g * mask)

    return Tensor._from_op(np.maximum(x.data, 0), (x,), backward, "relu")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    factor = np.where(x.data > 0, 1.0, slope).astype(x.data.dtype)

    def backward(g):
        x._accumulate(g * factor)

    return Tensor._from_op(x.data * factor, (x,), backward, "leaky_relu")


def _stable_sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _stable_sigmoid(x.data)

    def backward(g):
        x._accumulate(g * s * (1.0 - s))

    return Tensor._from_op(s, (x,), backward, "sigmoid")


def silu(x: Tensor) -> Tensor:
    s = _stable_sigmoid(x.data)
    out_data = x.data * s

    def backward(g):
        x._accumulate(g * (s + out_data * (1.0 - s)))

    return Tensor._from_op(out_data, (x,), backward, "silu")


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)

    def backward(g):
        x._accumulate(g * (1.0 - t * t))

    return Tensor._from_op(t, (x,), backward, "tanh")


def softplus(x: Tensor) -> Tensor:
    # log(1 + e^x) computed stably; gradient is sigmoid(x)
    out_data = np.logaddexp(0.0, x.data).astype(x.data.dtype)
    s = 1.0 / (1.0 + np.exp(-x.data))

    def backward(g):
        x._accumulate(g * s)

    return Tensor._from_op(out_data, (x,), backward, "softplus")


def group_norm(x: Tensor, groups: int, gamma: Tensor | None = None,
               beta: Tensor | None = None, eps: float = 1e-6) -> Tensor:
    """Per-group normalization of a (B, C, H, W) tensor, optional affine.

    Composed from tape primitives so the backward pass needs no bespoke math.
    eps = 1e-6 keeps the normalized variance within 1e-6 of 1 for unit-scale
    inputs.
    """
    if x.ndim != 4:
        raise GridError(f"group_norm expects rank-4 input, got {x.shape}")
    b, c, h, w = x.shape
    if groups < 1 or c % groups != 0:
        raise GridError(f"group_norm: {c} channels not divisible by {groups} groups")
    grouped = x.reshape(b, groups, (c // groups) * h * w)
    mu = grouped.mean(axis=2, keepdims=True)
    centered = grouped - mu
    var = (centered * centered).mean(axis=2, keepdims=True)
    normed = centered / (var + eps).sqrt()
    out = normed.reshape(b, c, h, w)
    if gamma is not None:
        out = out * gamma.reshape(1, c, 1, 1)
    if beta is not None:
        out = out + beta.reshape(1, c, 1, 1)
    return out


def avg_pool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k-by-k mean pooling; spatial extents must divide by k."""
    if x.ndim != 4:
        raise GridError(f"avg_pool2d expects rank-4 input, got {x.shape}")
    b, c, h, w = x.shape
    if h % k or w % k:
        raise GridError(f"avg_pool2d: {h}x{w} not divisible by window {k}")
    out_data = x.data.reshape(b, c, h // k, k, w // k, k).mean(axis=(3, 5), dtype=np.float64)
    out_data = out_data.astype(x.data.dtype)

    def backward(g):
        scaled = g / (k * k)
        x._accumulate(np.broadcast_to(scaled[:, :, :, None, :, None],
                                      (b, c, h // k, k, w // k, k)).reshape(b, c, h, w))

    return Tensor._from_op(out_data, (x,), backward, "avg_pool2d")


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x spatial upsampling."""
    if x.ndim != 4:
        raise GridError(f"upsample2x expects rank-4 input, got {x.shape}")
    b, c, h, w = x.shape
    out_data = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(g):
        x._accumulate(g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5), dtype=np.float64)
                      .astype(g.dtype))

    return Tensor._from_op(out_data, (x,), backward, "upsample2x")


def replicate_pad2d(x: Tensor, p: int) -> Tensor:
    """Edge-replication padding of the two spatial axes."""
    if x.ndim != 4:
        raise GridError(f"replicate_pad2d expects rank-4 input, got {x.shape}")
    if p < 0:
        raise GridError("replicate_pad2d: negative padding")
    if p == 0:
        return x
    b, c, h, w = x.shape
    out_data = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)), mode="edge")

    def backward(g):
        core = g[:, :, p:-p, p:-p].copy()
        # fold the replicated borders back onto the edge rows/columns
        core[:, :, 0, :] += g[:, :, :p, p:-p].sum(axis=2)
        core[:, :, -1, :] += g[:, :, -p:, p:-p].sum(axis=2)
        core[:, :, :, 0] += g[:, :, p:-p, :p].sum(axis=3)
        core[:, :, :, -1] += g[:, :, p:-p, -p:].sum(axis=3)
        core[:, :, 0, 0] += g[:, :, :p, :p].sum(axis=(2, 3))
        core[:, :, 0, -1] += g[:, :, :p, -p:].sum(axis=(2, 3))
        core[:, :, -1, 0] += g[:, :, -p:, :p].sum(axis=(2, 3))
        core[:, :, -1, -1] += g[:, :, -p:, -p:].sum(axis=(2, 3))
        x._accumulate(core)

    return Tensor._from_op(out_data, (x,), backward, "replicate_pad2d")

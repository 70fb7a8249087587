"""Classical layer vocabulary: grouped/depthwise convolutions, batch norm,
pooling, transposed convolution, linear, concat and pixelwise cross-entropy.

Every op is differentiable through the tape in :mod:`hqseg.tensor`; backward
rules are hand-derived and verified against finite differences in the test
suite. Convolutions use a shift-and-accumulate scheme (one einsum per kernel
offset), which is fast for the small 3x3/1x1 kernels used here.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class Conv2dParams:
    """Kernel [Cout, Cin/groups, kH, kW], optional bias [Cout]."""

    kernel: Tensor
    bias: Tensor | None = None
    stride: int = 1
    padding: int = 0
    groups: int = 1


def conv2d(x: Tensor, p: Conv2dParams) -> Tensor:
    """Grouped 2-D convolution. Output extent: (H + 2*pad - kH)//stride + 1."""
    if x.ndim != 4:
        raise ValueError(f"conv2d expects input [N,C,H,W], got shape {x.shape}")
    n, cin, h, w = x.shape
    cout, cpg, kh, kw = p.kernel.shape
    g = p.groups
    if g < 1 or cin % g != 0 or cout % g != 0:
        raise ValueError(f"conv2d: groups={g} must divide Cin={cin} and Cout={cout}")
    if cpg != cin // g:
        raise ValueError(
            f"conv2d: kernel shape {p.kernel.shape} inconsistent with Cin={cin}, groups={g}"
        )
    if p.bias is not None and p.bias.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {p.bias.shape} != ({cout},)")
    s, pad = p.stride, p.padding
    hp, wp = h + 2 * pad, w + 2 * pad
    if hp < kh or wp < kw:
        raise ValueError(
            f"conv2d: padded extents ({hp},{wp}) smaller than kernel ({kh},{kw})"
        )
    ho = (hp - kh) // s + 1
    wo = (wp - kw) // s + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    xg = xp.reshape(n, g, cpg, hp, wp)
    kg = p.kernel.data.reshape(g, cout // g, cpg, kh, kw)

    out = np.zeros((n, g, cout // g, ho, wo))
    for di in range(kh):
        for dj in range(kw):
            xs = xg[:, :, :, di : di + s * (ho - 1) + 1 : s, dj : dj + s * (wo - 1) + 1 : s]
            out += np.einsum("ngihw,goi->ngohw", xs, kg[:, :, :, di, dj], optimize=True)
    out = out.reshape(n, cout, ho, wo)
    if p.bias is not None:
        out = out + p.bias.data[None, :, None, None]

    def vjp(grad):
        gg = grad.reshape(n, g, cout // g, ho, wo)
        dk = np.empty_like(kg)
        dxp = np.zeros_like(xg)
        for di in range(kh):
            for dj in range(kw):
                rows = slice(di, di + s * (ho - 1) + 1, s)
                cols = slice(dj, dj + s * (wo - 1) + 1, s)
                xs = xg[:, :, :, rows, cols]
                dk[:, :, :, di, dj] = np.einsum("ngihw,ngohw->goi", xs, gg, optimize=True)
                dxp[:, :, :, rows, cols] += np.einsum(
                    "ngohw,goi->ngihw", gg, kg[:, :, :, di, dj], optimize=True
                )
        dx = dxp.reshape(n, cin, hp, wp)
        if pad:
            dx = dx[:, :, pad:-pad, pad:-pad]
        db = None if p.bias is None else grad.sum(axis=(0, 2, 3))
        return dx, dk.reshape(cout, cpg, kh, kw), db

    parents = (x, p.kernel) if p.bias is None else (x, p.kernel, p.bias)
    return Tensor(out)._attach("conv2d", parents, vjp)


def depthwise_separable_conv(x: Tensor, depthwise: Conv2dParams, pointwise: Conv2dParams) -> Tensor:
    """3x3 depthwise (groups == Cin, pad 1) followed by a 1x1 pointwise conv."""
    cin = x.shape[1]
    if depthwise.groups != cin or depthwise.kernel.shape[:2] != (cin, 1):
        raise ValueError(
            f"depthwise stage must have groups == Cin == {cin}, "
            f"got groups={depthwise.groups}, kernel {depthwise.kernel.shape}"
        )
    if depthwise.kernel.shape[2:] != (3, 3) or depthwise.padding != 1:
        raise ValueError("depthwise stage must use a 3x3 kernel with padding 1")
    if pointwise.kernel.shape[2:] != (1, 1):
        raise ValueError(f"pointwise stage needs a 1x1 kernel, got {pointwise.kernel.shape}")
    return conv2d(conv2d(x, depthwise), pointwise)


def max_pool_2x2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2. Ties route the gradient to the first
    maximum in row-major window order."""
    if x.ndim != 4:
        raise ValueError(f"max_pool_2x2 expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"max_pool_2x2 requires even spatial extents, got ({h},{w})")
    h2, w2 = h // 2, w // 2
    win = (
        x.data.reshape(n, c, h2, 2, w2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h2, w2, 4)
    )
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def vjp(grad):
        buf = np.zeros_like(win)
        np.put_along_axis(buf, idx[..., None], grad[..., None], axis=-1)
        dx = (
            buf.reshape(n, c, h2, w2, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h, w)
        )
        return (dx,)

    return Tensor(out)._attach("max_pool_2x2", (x,), vjp)


def transposed_conv_2x2_stride2(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-2 transposed convolution with a 2x2 kernel [Cin, Cout, 2, 2];
    the exact adjoint of a stride-2 2x2 convolution, doubling both extents."""
    if x.ndim != 4:
        raise ValueError(f"transposed conv expects [N,C,H,W], got {x.shape}")
    n, cin, h, w = x.shape
    if kernel.ndim != 4 or kernel.shape[0] != cin or kernel.shape[2:] != (2, 2):
        raise ValueError(
            f"transposed conv kernel must be [Cin={cin}, Cout, 2, 2], got {kernel.shape}"
        )
    cout = kernel.shape[1]
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"transposed conv bias shape {bias.shape} != ({cout},)")
    out = np.empty((n, cout, 2 * h, 2 * w))
    for di in range(2):
        for dj in range(2):
            out[:, :, di::2, dj::2] = np.einsum(
                "nchw,co->nohw", x.data, kernel.data[:, :, di, dj], optimize=True
            )
    if bias is not None:
        out += bias.data[None, :, None, None]

    def vjp(grad):
        dx = np.zeros_like(x.data)
        dk = np.empty_like(kernel.data)
        for di in range(2):
            for dj in range(2):
                gs = grad[:, :, di::2, dj::2]
                dx += np.einsum("nohw,co->nchw", gs, kernel.data[:, :, di, dj], optimize=True)
                dk[:, :, di, dj] = np.einsum("nchw,nohw->co", x.data, gs, optimize=True)
        db = None if bias is None else grad.sum(axis=(0, 2, 3))
        return dx, dk, db

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor(out)._attach("transposed_conv", parents, vjp)


def _pool_regions(extent: int, out: int) -> list[tuple[int, int]]:
    return [(i * extent // out, -((-(i + 1) * extent) // out)) for i in range(out)]


def adaptive_average_pool(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Average pooling onto an (out_h, out_w) grid; cell (i,j) averages input
    rows [floor(i*H/out_h), ceil((i+1)*H/out_h)) and the analogous columns.
    Upsampling (out > in) is rejected."""
    if x.ndim != 4:
        raise ValueError(f"adaptive_average_pool expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    if out_h > h or out_w > w:
        raise ValueError(
            f"adaptive_average_pool cannot upsample: input ({h},{w}) -> output ({out_h},{out_w})"
        )
    rows = _pool_regions(h, out_h)
    cols = _pool_regions(w, out_w)
    out = np.empty((n, c, out_h, out_w))
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            out[:, :, i, j] = x.data[:, :, r0:r1, c0:c1].mean(axis=(-2, -1))

    def vjp(grad):
        dx = np.zeros_like(x.data)
        for i, (r0, r1) in enumerate(rows):
            for j, (c0, c1) in enumerate(cols):
                area = (r1 - r0) * (c1 - c0)
                dx[:, :, r0:r1, c0:c1] += grad[:, :, i : i + 1, j : j + 1] / area
        return (dx,)

    return Tensor(out)._attach("adaptive_average_pool", (x,), vjp)


@dataclass
class BatchNormState:
    """Per-channel affine parameters plus running statistics."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @staticmethod
    def create(channels: int, momentum: float = 0.1, eps: float = 1e-5) -> "BatchNormState":
        return BatchNormState(
            gamma=Tensor(np.ones(channels), requires_grad=True),
            beta=Tensor(np.zeros(channels), requires_grad=True),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
            momentum=momentum,
            eps=eps,
        )


def batch_norm(x: Tensor, state: BatchNormState, training: bool, update_stats: bool = True) -> Tensor:
    """Batch normalization over (N,H,W) per channel.

    Training mode normalizes with batch statistics (batch >= 2 required) and,
    when ``update_stats``, folds them into the running statistics; inference
    uses the running statistics unchanged.
    """
    if x.ndim != 4:
        raise ValueError(f"batch_norm expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    if state.gamma.shape != (c,):
        raise ValueError(f"batch_norm: gamma shape {state.gamma.shape} != ({c},)")
    axes = (0, 2, 3)
    m = n * h * w
    if training:
        if n < 2:
            raise ValueError(f"batch_norm in training mode requires batch >= 2, got {n}")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if update_stats:
            mom = state.momentum
            unbiased = var * m / (m - 1)
            state.running_mean *= 1.0 - mom
            state.running_mean += mom * mean
            state.running_var *= 1.0 - mom
            state.running_var += mom * unbiased
    else:
        mean, var = state.running_mean, state.running_var
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = state.gamma.data[None, :, None, None] * xhat + state.beta.data[None, :, None, None]

    def vjp(grad):
        dgamma = (grad * xhat).sum(axis=axes)
        dbeta = grad.sum(axis=axes)
        scale = (state.gamma.data * inv_std)[None, :, None, None]
        if training:
            dx = scale * (
                grad
                - dbeta[None, :, None, None] / m
                - xhat * dgamma[None, :, None, None] / m
            )
        else:
            dx = scale * grad
        return dx, dgamma, dbeta

    return Tensor(out)._attach("batch_norm", (x, state.gamma, state.beta), vjp)


def relu(x: Tensor) -> Tensor:
    return x.relu()


def tanh_activation(x: Tensor) -> Tensor:
    return x.tanh()


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x [N,Fin] @ weight [Fin,Fout] + bias [Fout]."""
    out = x.matmul(weight)
    if bias is not None:
        out = out + bias
    return out


def concat_channels(tensors: list[Tensor]) -> Tensor:
    """Concatenate [N,C_i,H,W] tensors along the channel axis."""
    if not tensors:
        raise ValueError("concat_channels needs at least one tensor")
    base = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != 4 or t.shape[0] != base[0] or t.shape[2:] != base[2:]:
            raise ValueError(
                f"concat_channels: shape {t.shape} incompatible with {base}"
            )
    out = np.concatenate([t.data for t in tensors], axis=1)
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]

    def vjp(grad):
        return tuple(np.ascontiguousarray(g) for g in np.split(grad, splits, axis=1))

    return Tensor(out)._attach("concat_channels", tuple(tensors), vjp)


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean pixelwise negative log-likelihood of integer targets.

    logits: [N,K,H,W]; targets: int array [N,H,W] with values in [0,K).
    """
    if logits.ndim != 4:
        raise ValueError(f"softmax_cross_entropy expects logits [N,K,H,W], got {logits.shape}")
    n, k, h, w = logits.shape
    targets = np.asarray(targets)
    if targets.shape != (n, h, w):
        raise ValueError(
            f"softmax_cross_entropy: targets shape {targets.shape} != {(n, h, w)}"
        )
    if targets.size and (targets.min() < 0 or targets.max() >= k):
        bad = targets.min() if targets.min() < 0 else targets.max()
        raise ValueError(f"softmax_cross_entropy: class id {bad} outside [0,{k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    sez = ez.sum(axis=1, keepdims=True)
    logp = z - np.log(sez)
    picked = np.take_along_axis(logp, targets[:, None, :, :], axis=1)[:, 0]
    m = n * h * w
    loss = -picked.sum() / m

    def vjp(grad):
        soft = ez / sez
        onehot = np.zeros_like(soft)
        np.put_along_axis(onehot, targets[:, None, :, :], 1.0, axis=1)
        return ((soft - onehot) * (grad / m),)

    return Tensor(loss)._attach("softmax_cross_entropy", (logits,), vjp)

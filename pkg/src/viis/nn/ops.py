"""Differentiable dense-tensor operations.

Every op computes in the dtype of its inputs (float32 for training, float64
for gradient checks) and records an analytic vector-Jacobian product on the
active tape.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .tensor import (ConfigError, DimensionError, NumericError, Tensor,
                     as_tensor, check_finite, record)

GROUP_NORM_EPS = 1e-5


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _pair(a, b) -> tuple[Tensor, Tensor]:
    # python scalars / arrays adopt the tensor operand's dtype
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        return a, b
    if isinstance(a, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return as_tensor(a), as_tensor(b)


# --------------------------------------------------------------------------
# elementwise and structural ops

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return record("add", a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return record("sub", a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return record("mul", a.data * b.data, (a, b),
                  lambda g: (_unbroadcast(g * b.data, a.shape),
                             _unbroadcast(g * a.data, b.shape)))


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return record("sum", np.asarray(out), (x,), vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(x: Tensor, shape) -> Tensor:
    return record("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return record("transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,),
                  lambda g: (g.transpose(inv),))


def concat(xs, axis: int) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=axis))

    return record("concat", np.concatenate([x.data for x in xs], axis=axis), xs, vjp)


def silu(x: Tensor) -> Tensor:
    """``x * sigmoid(x)``; derivative ``s * (1 + x * (1 - s))``."""
    s = 1.0 / (1.0 + np.exp(-x.data))
    return record("silu", x.data * s, (x,), lambda g: (g * s * (1.0 + x.data * (1.0 - s)),))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by max subtraction."""
    check_finite(x.data, "softmax input")
    e = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return record("softmax", y, (x,), vjp)


def einsum(subscripts: str, *operands) -> Tensor:
    """Differentiable ``np.einsum`` for explicit-output subscripts.

    Each operand's gradient is itself an einsum, so no operand may repeat an
    index or own an index that is summed away without appearing elsewhere.
    """
    ins, out_sub = subscripts.replace(" ", "").split("->")
    in_subs = ins.split(",")
    ts = [as_tensor(o) for o in operands]
    if len(in_subs) != len(ts):
        raise DimensionError(f"einsum {subscripts!r} expects {len(in_subs)} operands")
    for i, s in enumerate(in_subs):
        if len(set(s)) != len(s):
            raise ConfigError(f"einsum operand {i} repeats an index: {s!r}")
        others = out_sub + "".join(in_subs[:i] + in_subs[i + 1:])
        if any(c not in others for c in s):
            raise ConfigError(f"einsum operand {i} has an index summed only locally: {s!r}")
    try:
        out = np.einsum(subscripts, *[t.data for t in ts], optimize=True)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc

    def vjp(g):
        grads = []
        for i, s in enumerate(in_subs):
            if not ts[i].requires_grad:
                grads.append(None)
                continue
            rest = [ts[j].data for j in range(len(ts)) if j != i]
            rest_subs = [in_subs[j] for j in range(len(ts)) if j != i]
            spec = ",".join([out_sub] + rest_subs) + "->" + s
            grads.append(np.einsum(spec, g, *rest, optimize=True))
        return grads

    return record("einsum", np.asarray(out), ts, vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched ``a @ b`` with numpy broadcasting over leading extents."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def vjp(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return record("matmul", np.matmul(a.data, b.data), (a, b), vjp)


# --------------------------------------------------------------------------
# layers

def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ W + b`` over the trailing extent of ``x``."""
    x = as_tensor(x)
    if x.shape[-1] != W.shape[0]:
        raise DimensionError(f"linear: input extent {x.shape[-1]} != weight rows {W.shape[0]}")
    if b is not None and b.shape != (W.shape[1],):
        raise DimensionError(f"linear: bias shape {b.shape} != ({W.shape[1]},)")
    out = x.data @ W.data
    if b is not None:
        out = out + b.data
    inputs = (x, W) if b is None else (x, W, b)

    def vjp(g):
        gx = g @ W.data.T
        g2 = g.reshape(-1, g.shape[-1])
        gW = x.data.reshape(-1, x.shape[-1]).T @ g2
        if b is None:
            return gx, gW
        return gx, gW, g2.sum(axis=0)

    return record("linear", out, inputs, vjp)


def _im2col(x: np.ndarray, k: int, pad: int, stride: int, Ho: int, Wo: int) -> np.ndarray:
    N, C = x.shape[:2]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    if k == 1 and stride == 1:
        return np.ascontiguousarray(xp).reshape(N, C, Ho * Wo)
    cols = np.empty((N, C, k, k, Ho, Wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride]
    return cols.reshape(N, C * k * k, Ho * Wo)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of ``x[N,C,H,W]`` with ``weight[O,C,k,k]``."""
    x = as_tensor(x)
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects rank-4 input/weight, got {x.shape}, {weight.shape}")
    N, C, H, W = x.shape
    O, Cw, k, k2 = weight.shape
    if Cw != C:
        raise DimensionError(f"conv2d: input has {C} channels, weight expects {Cw}")
    if k != k2 or k % 2 == 0:
        raise ConfigError(f"conv2d: kernel must be square and odd, got {k}x{k2}")
    if pad < 0 or stride < 1:
        raise ConfigError("conv2d: pad must be >= 0 and stride >= 1")
    if (H + 2 * pad - k) % stride or (W + 2 * pad - k) % stride:
        raise ConfigError(f"conv2d: output extent for {H}x{W}, k={k}, pad={pad}, stride={stride} is not integral")
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    if bias is not None and bias.shape != (O,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({O},)")

    cols = _im2col(x.data, k, pad, stride, Ho, Wo)  # N, C*k*k, Ho*Wo
    wmat = weight.data.reshape(O, C * k * k)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(N, O, Ho, Wo)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def vjp(g):
        g3 = g.reshape(N, O, Ho * Wo)
        gW = None
        if weight.requires_grad:
            gW = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        gx = None
        if x.requires_grad and stride == 1:
            # full correlation of the output gradient with the flipped kernel
            q = k - 1 - pad
            gp = g
            if q < 0:
                gp = g[:, :, -q:q, -q:q]
                q = 0
            gcols = _im2col(gp, k, q, 1, H, W)
            wflip = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(C, O * k * k)
            gx = np.matmul(wflip, gcols).reshape(N, C, H, W)
        elif x.requires_grad:
            dcols = np.matmul(wmat.T, g3).reshape(N, C, k, k, Ho, Wo)
            dxp = np.zeros((N, C, H + 2 * pad, W + 2 * pad), dtype=x.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += dcols[:, :, i, j]
            gx = dxp[:, :, pad:pad + H, pad:pad + W]
        if bias is None:
            return gx, gW
        return gx, gW, g3.sum(axis=(0, 2))

    return record("conv2d", out, inputs, vjp)


def group_norm(x: Tensor, groups: int, scale: Tensor, shift: Tensor) -> Tensor:
    """Per-(sample, group) standardisation followed by a per-channel affine map."""
    N, C, H, W = x.shape
    if C % groups:
        raise ConfigError(f"group_norm: {C} channels not divisible by {groups} groups")
    xg = x.data.reshape(N, groups, -1)
    mu = xg.mean(axis=-1, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + GROUP_NORM_EPS)
    xhat = (xc * inv).reshape(x.shape)
    out = xhat * scale.data.reshape(1, C, 1, 1) + shift.data.reshape(1, C, 1, 1)
    m = xg.shape[-1]

    def vjp(g):
        gscale = (g * xhat).sum(axis=(0, 2, 3))
        gshift = g.sum(axis=(0, 2, 3))
        gx_hat = (g * scale.data.reshape(1, C, 1, 1)).reshape(N, groups, m)
        xh = xhat.reshape(N, groups, m)
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xh * (gx_hat * xh).mean(axis=-1, keepdims=True))
        return gx.reshape(x.shape), gscale, gshift

    return record("group_norm", out, (x, scale, shift), vjp)


def resample(x: Tensor, mode: str, factor: int = 2) -> Tensor:
    """``down2_avg`` (average pooling) or ``up2_nearest`` (pixel replication).

    ``factor`` generalises both to any integer scale; the names keep the
    factor-2 spelling used by the network.
    """
    N, C, H, W = x.shape
    f = factor
    if mode == "down2_avg":
        if H % f or W % f:
            raise ConfigError(f"resample: extent {H}x{W} not divisible by {f}")
        out = x.data.reshape(N, C, H // f, f, W // f, f).mean(axis=(3, 5))

        def vjp(g):
            return (np.repeat(np.repeat(g, f, axis=2), f, axis=3) / (f * f),)
    elif mode == "up2_nearest":
        out = np.repeat(np.repeat(x.data, f, axis=2), f, axis=3)

        def vjp(g):
            return (g.reshape(N, C, H, f, W, f).sum(axis=(3, 5)),)
    else:
        raise ConfigError(f"resample: unknown mode {mode!r}")
    return record("resample", out, (x,), vjp)


def bilinear_sample(fmap: Tensor, coords: Tensor) -> Tensor:
    """Bilinearly interpolate ``fmap`` at fractional ``(y, x)`` locations.

    Parameters
    ----------
    fmap : Tensor
        ``[C, H, W]`` or batched ``[B, C, H, W]``.
    coords : Tensor
        ``[P, 2]`` or ``[B, P, 2]`` pixel coordinates, row first.

    Returns
    -------
    Tensor
        ``[P, C]`` (or ``[B, P, C]``).  Grid points outside the map read as
        zero, so gradients exist everywhere except on integer coordinates.
    """
    coords = as_tensor(coords)
    unbatched = fmap.ndim == 3
    fm = fmap.data[None] if unbatched else fmap.data
    cd = coords.data[None] if unbatched else coords.data
    if fm.ndim != 4 or cd.ndim != 3 or cd.shape[-1] != 2 or cd.shape[0] != fm.shape[0]:
        raise DimensionError(f"bilinear_sample: bad shapes map {fmap.shape}, coords {coords.shape}")
    B, C, H, W = fm.shape
    if fm.size == 0:
        raise DimensionError("bilinear_sample: empty map")
    if np.isnan(cd).any():
        raise NumericError("bilinear_sample: NaN coordinate")
    if not np.all(np.isfinite(cd)):
        raise NumericError("bilinear_sample: non-finite coordinate")
    P = cd.shape[1]
    y = cd[..., 0].reshape(-1)
    x = cd[..., 1].reshape(-1)
    y0 = np.floor(y)
    x0 = np.floor(x)
    wy = (y - y0).astype(fm.dtype)
    wx = (x - x0).astype(fm.dtype)
    # corner order: (0,0), (0,1), (1,0), (1,1)
    cy = y0.astype(np.int64)[None, :] + np.array([0, 0, 1, 1])[:, None]
    cx = x0.astype(np.int64)[None, :] + np.array([0, 1, 0, 1])[:, None]
    valid = ((cy >= 0) & (cy < H) & (cx >= 0) & (cx < W)).astype(fm.dtype)
    base = np.repeat(np.arange(B) * (H * W), P)[None, :]
    # CSR with exactly four entries per sample point
    rows = (base + np.clip(cy, 0, H - 1) * W + np.clip(cx, 0, W - 1)).T.ravel()
    indptr = np.arange(0, 4 * B * P + 1, 4)
    uy, ux = 1 - wy, 1 - wx
    weights = np.stack([uy * ux, uy * wx, wy * ux, wy * wx]) * valid
    shape = (B * P, B * H * W)
    S = sp.csr_matrix((weights.T.ravel(), rows, indptr), shape=shape)
    fflat = fm.transpose(0, 2, 3, 1).reshape(B * H * W, C)
    out = np.asarray(S @ fflat).reshape(B, P, C)

    def vjp(g):
        g2 = g.reshape(B * P, C)
        gmap = None
        if fmap.requires_grad:
            gmap = np.asarray(S.T @ g2).reshape(B, H, W, C).transpose(0, 3, 1, 2)
            gmap = np.ascontiguousarray(gmap[0] if unbatched else gmap)
        gc = None
        if coords.requires_grad:
            # same sparsity, derivative weights per corner
            dwy = np.stack([-ux, -wx, ux, wx]) * valid
            dwx = np.stack([-uy, uy, -wy, wy]) * valid
            Sy = sp.csr_matrix((dwy.T.ravel(), rows, indptr), shape=shape)
            Sx = sp.csr_matrix((dwx.T.ravel(), rows, indptr), shape=shape)
            gy = (np.asarray(Sy @ fflat) * g2).sum(-1)
            gx = (np.asarray(Sx @ fflat) * g2).sum(-1)
            gc = np.stack([gy, gx], axis=-1).reshape(coords.shape).astype(coords.dtype)
        return gmap, gc

    return record("bilinear_sample", out[0] if unbatched else out, (fmap, coords), vjp)

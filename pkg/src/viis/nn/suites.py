"""Finite-difference cases for every differentiable op in :mod:`viis.nn.ops`."""

from __future__ import annotations

from . import ops
from .gradcheck import GradCase


def _conv(rng):
    x = rng.standard_normal((1, 2, 4, 4))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    return (lambda x, w, b: ops.conv2d(x, w, b, stride=1, pad=1)), [x, w, b], None


def _conv_strided(rng):
    x = rng.standard_normal((2, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    return (lambda x, w, b: ops.conv2d(x, w, b, stride=2, pad=1)), [x, w, b], None


def _linear(rng):
    x = rng.standard_normal((2, 3, 4))
    w = rng.standard_normal((4, 5))
    b = rng.standard_normal(5)
    return ops.linear, [x, w, b], None


def _bilinear(rng):
    fmap = rng.standard_normal((2, 3, 4, 5))
    # includes points hanging off every border
    coords = rng.uniform(-1.5, 5.5, size=(2, 7, 2))
    return ops.bilinear_sample, [fmap, coords], None


def _softmax(rng):
    return ops.softmax, [rng.standard_normal((3, 4, 5)) * 2], None


def _group_norm(rng):
    x = rng.standard_normal((2, 4, 3, 3))
    return (lambda x, s, b: ops.group_norm(x, 2, s, b)), \
        [x, rng.standard_normal(4), rng.standard_normal(4)], None


def _silu(rng):
    return ops.silu, [rng.standard_normal((4, 5)) * 3], None


def _down(rng):
    return (lambda x: ops.resample(x, "down2_avg")), [rng.standard_normal((2, 3, 4, 6))], None


def _up(rng):
    return (lambda x: ops.resample(x, "up2_nearest")), [rng.standard_normal((2, 3, 2, 3))], None


def _einsum(rng):
    a = rng.standard_normal((2, 3, 4))
    b = rng.standard_normal((3, 4, 5))
    return (lambda a, b: ops.einsum("nmd,mdk->nmk", a, b)), [a, b], None


def _matmul(rng):
    a = rng.standard_normal((2, 3, 4, 5))
    b = rng.standard_normal((3, 5, 2))
    return ops.matmul, [a, b], None


def _elementwise(rng):
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((1, 4))

    def fn(a, b):
        return ops.mean(ops.mul(ops.sub(a, b), ops.add(a, b)), axis=0, keepdims=True)
    return fn, [a, b], None


def _structural(rng):
    a = rng.standard_normal((2, 3, 4))
    b = rng.standard_normal((2, 3, 2))

    def fn(a, b):
        c = ops.concat([a, b], axis=2)
        return ops.reshape(ops.transpose(c, (2, 0, 1)), (6, 6))
    return fn, [a, b], None


OP_CASES = [
    GradCase("conv2d", 1e-6, _conv),
    GradCase("conv2d_stride2", 1e-6, _conv_strided),
    GradCase("linear", 1e-6, _linear),
    GradCase("bilinear_sample", 1e-5, _bilinear),
    GradCase("softmax", 1e-5, _softmax),
    GradCase("group_norm", 1e-5, _group_norm),
    GradCase("silu", 1e-6, _silu),
    GradCase("resample_down2", 1e-5, _down),
    GradCase("resample_up2", 1e-5, _up),
    GradCase("einsum", 1e-6, _einsum),
    GradCase("matmul", 1e-6, _matmul),
    GradCase("elementwise", 1e-6, _elementwise),
    GradCase("structural", 1e-6, _structural),
]

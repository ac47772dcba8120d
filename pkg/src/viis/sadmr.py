"""Sparse deformable cross-attention and residual dual-modality injection.

Feature maps enter and leave in ``N x C x H x W`` layout.  Inside the
attention, queries and values are kept channel-last as
``N x H x W x heads x head_dim``; the per-head linear blocks run as one
batched matrix product over heads.

Each query location ``r = (h, w)`` predicts ``points`` pixel offsets and
softmax weights per head, bilinearly samples the condition's values at
``r + offset`` and mixes the samples.  Per-head outputs are projected back to
the query width and summed over heads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import ops
from .nn.tensor import DimensionError, NumericError, Tensor, check_finite

INJECTION_MODES = ("scam", "addition", "concatenation", "global_attention", "none")
DEFAULT_HEADS = 4
DEFAULT_POINTS = 4


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> Tensor:
    """Uniform on ``[-2/sqrt(fan_in), 2/sqrt(fan_in)]``."""
    bound = 2.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def zeros(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


@dataclass
class DeformAttnParams:
    heads: int
    points: int
    wq: Tensor
    bq: Tensor
    wv: Tensor
    bv: Tensor
    off_w: Tensor  # heads x head_dim x 2*points
    off_b: Tensor
    att_w: Tensor  # heads x head_dim x points
    att_b: Tensor
    wm: Tensor  # heads x head_dim x C
    bm: Tensor
    out_w: Tensor
    out_b: Tensor
    # keys exist only for the dense global-attention variant
    wk: Tensor | None = None
    bk: Tensor | None = None

    @property
    def head_dim(self) -> int:
        return self.wq.shape[1] // self.heads

    @classmethod
    def init(cls, rng: np.random.Generator, channels: int, cond_channels: int,
             heads: int = DEFAULT_HEADS, points: int = DEFAULT_POINTS,
             with_keys: bool = False) -> "DeformAttnParams":
        d = max(1, channels // heads)
        md = heads * d
        p = cls(
            heads=heads, points=points,
            wq=uniform_init(rng, (channels, md), channels), bq=zeros(md),
            wv=uniform_init(rng, (cond_channels, md), cond_channels), bv=zeros(md),
            off_w=zeros((heads, d, 2 * points)), off_b=zeros((heads, 2 * points)),
            att_w=uniform_init(rng, (heads, d, points), d), att_b=zeros((heads, points)),
            wm=uniform_init(rng, (heads, d, channels), d), bm=zeros(channels),
            out_w=zeros((channels, channels)), out_b=zeros(channels),
        )
        if with_keys:
            p.wk = uniform_init(rng, (cond_channels, md), cond_channels)
            p.bk = zeros(md)
        return p


def _channels_last(x: Tensor) -> Tensor:
    return ops.transpose(x, (0, 2, 3, 1))


def _channels_first(x: Tensor) -> Tensor:
    return ops.transpose(x, (0, 3, 1, 2))


def _heads(x: Tensor, heads: int) -> Tensor:
    n, h, w, md = x.shape
    return ops.reshape(x, (n, h, w, heads, md // heads))


def project_qv(F: Tensor, F_cond: Tensor, p: DeformAttnParams) -> tuple[Tensor, Tensor]:
    """Per-location query/value projections split into heads.

    Returns ``Q`` and ``V`` shaped ``N x H x W x heads x head_dim``.
    """
    if F.shape[0] != F_cond.shape[0] or F.shape[2:] != F_cond.shape[2:]:
        raise DimensionError(f"query features {F.shape} and condition {F_cond.shape} "
                             "must share batch and spatial extents")
    Q = _heads(ops.linear(_channels_last(F), p.wq, p.bq), p.heads)
    V = _heads(ops.linear(_channels_last(F_cond), p.wv, p.bv), p.heads)
    return Q, V


def reference_grid(H: int, W: int, dtype=np.float32) -> np.ndarray:
    """``H x W x 2`` array of each location's own ``(row, col)``."""
    yy, xx = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    return np.stack([yy, xx], axis=-1).astype(dtype)


def sample_and_mix(V: Tensor, offsets: Tensor, logits: Tensor) -> Tensor:
    """Weighted bilinear reads of ``V`` around every reference point.

    ``offsets`` is ``N x H x W x heads x K x 2`` in pixels, ``logits`` is
    ``N x H x W x heads x K``.  Returns ``N x H x W x heads x head_dim``.
    """
    n, H, W, M, d = V.shape
    K = logits.shape[-1]
    check_finite(offsets.data, "sampling offsets")
    ref = reference_grid(H, W, offsets.dtype)[None, :, :, None, None, :]
    coords = ops.add(offsets, Tensor(ref))
    coords = ops.reshape(ops.transpose(coords, (0, 3, 1, 2, 4, 5)), (n * M, H * W * K, 2))
    vmap = ops.reshape(ops.transpose(V, (0, 3, 4, 1, 2)), (n * M, d, H, W))
    sampled = ops.reshape(ops.bilinear_sample(vmap, coords), (n, M, H, W, K, d))
    # N x heads x H x W x 1 x K  @  N x heads x H x W x K x d
    weights = ops.reshape(ops.transpose(ops.softmax(logits), (0, 3, 1, 2, 4)), (n, M, H, W, 1, K))
    mixed = ops.reshape(ops.matmul(weights, sampled), (n, M, H, W, d))
    return ops.transpose(mixed, (0, 2, 3, 1, 4))


def per_head(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Head-wise linear map: ``x[..., m, :] @ w[m] + b[m]`` for every head ``m``."""
    n, H, W, M, d = x.shape
    xm = ops.transpose(ops.reshape(x, (n * H * W, M, d)), (1, 0, 2))
    y = ops.transpose(ops.matmul(xm, w), (1, 0, 2))
    return ops.add(ops.reshape(y, (n, H, W, M, w.shape[-1])), b)


def merge_heads(x: Tensor, p: DeformAttnParams) -> Tensor:
    """Project each head back to the query width and sum over heads."""
    n, H, W, M, d = x.shape
    wm = ops.reshape(p.wm, (M * d, p.wm.shape[-1]))
    return ops.linear(ops.reshape(x, (n, H, W, M * d)), wm, p.bm)


def deform_attend(Q: Tensor, V: Tensor, p: DeformAttnParams,
                  offsets: Tensor | None = None, logits: Tensor | None = None) -> Tensor:
    """Sparse cross-attention, returned in ``N x C x H x W`` before ``out_proj``.

    ``offsets``/``logits`` override the learned linear blocks; used to pin
    sampling locations when comparing against dense attention.
    """
    n, H, W, M, d = Q.shape
    K = p.points if logits is None else logits.shape[-1]
    if offsets is None:
        offsets = per_head(Q, p.off_w, p.off_b)
        offsets = ops.reshape(offsets, (n, H, W, M, K, 2))
    if not np.all(np.isfinite(offsets.data)):
        raise NumericError("non-finite sampling offsets")
    if logits is None:
        logits = per_head(Q, p.att_w, p.att_b)
    mixed = sample_and_mix(V, offsets, logits)
    out = merge_heads(mixed, p)
    return _channels_first(out)


def _dense_heads(x: Tensor) -> Tensor:
    # N x H x W x heads x d  ->  N x heads x (H*W) x d
    n, H, W, M, d = x.shape
    return ops.transpose(ops.reshape(x, (n, H * W, M, d)), (0, 2, 1, 3))


def global_logits(F: Tensor, F_cond: Tensor, p: DeformAttnParams) -> Tensor:
    """Scaled dot-product logits of every query location against every key location.

    Shape ``N x heads x (H*W) x (H*W)``, queries on the third axis.
    """
    Q, _ = project_qv(F, F_cond, p)
    Kt = _heads(ops.linear(_channels_last(F_cond), p.wk, p.bk), p.heads)
    d = Q.shape[-1]
    scores = ops.matmul(_dense_heads(Q), ops.transpose(_dense_heads(Kt), (0, 1, 3, 2)))
    return ops.mul(scores, 1.0 / np.sqrt(d))


def global_attend(F: Tensor, F_cond: Tensor, p: DeformAttnParams) -> Tensor:
    """Dense cross-attention over all condition locations, before ``out_proj``."""
    _, V = project_qv(F, F_cond, p)
    n, H, W, M, d = V.shape
    weights = ops.softmax(global_logits(F, F_cond, p))
    mixed = ops.matmul(weights, _dense_heads(V))  # N x heads x HW x d
    mixed = ops.reshape(ops.transpose(mixed, (0, 2, 1, 3)), (n, H, W, M, d))
    out = merge_heads(mixed, p)
    return _channels_first(out)


def scam(F: Tensor, F_cond: Tensor, p: DeformAttnParams) -> Tensor:
    Q, V = project_qv(F, F_cond, p)
    return deform_attend(Q, V, p)


def out_project(x: Tensor, p: DeformAttnParams) -> Tensor:
    return _channels_first(ops.linear(_channels_last(x), p.out_w, p.out_b))


def pointwise(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """1x1 channel projection with ``w`` shaped ``C_in x C_out``."""
    return _channels_first(ops.linear(_channels_last(x), w, b))


@dataclass
class InjectParams:
    """Everything one injection site needs for its mode.

    ``branches`` holds attention parameters keyed ``"vis"``/``"ir"`` for the
    two attention modes, ``proj`` holds 1x1 projections for the others.
    """

    mode: str
    branches: dict[str, DeformAttnParams] = field(default_factory=dict)
    proj: dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def init(cls, rng: np.random.Generator, mode: str, channels: int,
             cond_channels: int, modalities=("vis", "ir"),
             heads: int = DEFAULT_HEADS, points: int = DEFAULT_POINTS) -> "InjectParams":
        if mode not in INJECTION_MODES:
            raise ValueError(f"unknown injection mode {mode!r}; choose from {INJECTION_MODES}")
        p = cls(mode)
        if mode in ("scam", "global_attention"):
            for m in modalities:
                p.branches[m] = DeformAttnParams.init(rng, channels, cond_channels, heads, points,
                                                      with_keys=(mode == "global_attention"))
        elif mode == "addition":
            for m in modalities:
                p.proj[f"{m}_w"] = uniform_init(rng, (cond_channels, channels), cond_channels)
                p.proj[f"{m}_b"] = zeros(channels)
        elif mode == "concatenation":
            c_in = channels + cond_channels * len(modalities)
            p.proj["cat_w"] = uniform_init(rng, (c_in, channels), c_in)
            p.proj["cat_b"] = zeros(channels)
        return p


def sadmr_inject(F: Tensor, F_v: Tensor | None, F_i: Tensor | None, mode: str,
                 params: InjectParams) -> Tensor:
    """Inject visible and infrared features into ``F``.

    A missing modality (``None``) contributes nothing.  Attention modes add
    one projected residual per modality; ``concatenation`` stacks the
    available features and projects back to ``F``'s width.
    """
    conds = {m: f for m, f in (("vis", F_v), ("ir", F_i)) if f is not None}
    for name, f in conds.items():
        if f.shape[0] != F.shape[0] or f.shape[2:] != F.shape[2:]:
            raise DimensionError(f"{name} features {f.shape} do not match {F.shape}")
    if mode == "none" or not conds:
        return F
    if mode in ("scam", "global_attention"):
        attend = scam if mode == "scam" else global_attend
        out = F
        for name, f in conds.items():
            p = params.branches[name]
            out = ops.add(out, out_project(attend(F, f, p), p))
        return out
    if mode == "addition":
        out = F
        for name, f in conds.items():
            out = ops.add(out, pointwise(f, params.proj[f"{name}_w"], params.proj[f"{name}_b"]))
        return out
    if mode == "concatenation":
        stacked = ops.concat([F] + list(conds.values()), axis=1)
        return pointwise(stacked, params.proj["cat_w"], params.proj["cat_b"])
    raise ValueError(f"unknown injection mode {mode!r}")

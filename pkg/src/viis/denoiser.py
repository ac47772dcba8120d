"""UNet noise predictor conditioned on a visible and an infrared image.

The noisy target, the (degraded) visible image and the infrared image are
stacked on the channel axis at the input.  Separately, two convolutional
encoders turn the visible and infrared images into per-scale features that
are injected into the UNet before every resolution change: after the
encoder stage of each scale but the coarsest, once at the bottleneck, and
after every decoder stage.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import ops
from .nn.tensor import ConfigError, DimensionError, Tensor
from .sadmr import (DEFAULT_HEADS, DEFAULT_POINTS, InjectParams, sadmr_inject,
                    uniform_init, zeros)

CONDITIONING_MODES = ("scam", "addition", "concatenation", "global_attention",
                      "concat_only", "no_visible", "no_infrared")
# mode -> (injection rule, uses visible features, uses infrared features)
_MODE_TABLE = {
    "scam": ("scam", True, True),
    "addition": ("addition", True, True),
    "concatenation": ("concatenation", True, True),
    "global_attention": ("global_attention", True, True),
    "concat_only": ("none", True, True),
    "none": ("none", True, True),
    "no_visible": ("scam", False, True),
    "no_infrared": ("scam", True, False),
}
VIS_CHANNELS = 3
IR_CHANNELS = 1
OUT_CHANNELS = 3


@dataclass(frozen=True)
class DenoiserConfig:
    image_size: int = 32
    channels: tuple[int, ...] = (32, 64, 128)
    conditioning_mode: str = "scam"
    latent_mode: str = "pixel"  # or "avgpool"
    latent_factor: int = 4
    T: int = 200
    time_embed_dim: int = 64
    heads: int = DEFAULT_HEADS
    points: int = DEFAULT_POINTS

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if not self.channels:
            raise ConfigError("need at least one scale")
        if self.conditioning_mode not in _MODE_TABLE:
            raise ConfigError(f"conditioning_mode must be one of {CONDITIONING_MODES}, "
                              f"got {self.conditioning_mode!r}")
        if self.latent_mode not in ("pixel", "avgpool"):
            raise ConfigError(f"latent_mode must be 'pixel' or 'avgpool', got {self.latent_mode!r}")
        if self.latent_mode == "avgpool" and self.image_size % self.latent_factor:
            raise ConfigError(f"image_size {self.image_size} not divisible by latent_factor {self.latent_factor}")
        if self.net_size % 2 ** (self.scales - 1):
            raise ConfigError(f"network size {self.net_size} not divisible by 2^{self.scales - 1}")
        if self.time_embed_dim % 2:
            raise ConfigError("time_embed_dim must be even")
        if self.T < 1:
            raise ConfigError("T must be >= 1")

    @property
    def scales(self) -> int:
        return len(self.channels)

    @property
    def net_size(self) -> int:
        """Spatial extent the UNet runs at."""
        return self.image_size // self.latent_factor if self.latent_mode == "avgpool" else self.image_size

    @property
    def injection(self) -> str:
        return _MODE_TABLE[self.conditioning_mode][0]

    @property
    def uses_visible(self) -> bool:
        return _MODE_TABLE[self.conditioning_mode][1]

    @property
    def uses_infrared(self) -> bool:
        return _MODE_TABLE[self.conditioning_mode][2]


def norm_groups(c: int) -> int:
    for g in (8, 4, 2, 1):
        if c % g == 0:
            return g
    return 1


@dataclass
class ConvParams:
    w: Tensor
    b: Tensor

    @classmethod
    def init(cls, rng, c_in, c_out, k=3, zero=False):
        if zero:
            return cls(zeros((c_out, c_in, k, k)), zeros(c_out))
        return cls(uniform_init(rng, (c_out, c_in, k, k), c_in * k * k), zeros(c_out))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.w, self.b, stride=1, pad=self.w.shape[-1] // 2)


@dataclass
class NormParams:
    scale: Tensor
    shift: Tensor

    @classmethod
    def init(cls, c):
        return cls(Tensor(np.ones(c, np.float32), requires_grad=True), zeros(c))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.group_norm(x, norm_groups(x.shape[1]), self.scale, self.shift)


@dataclass
class ResBlockParams:
    norm1: NormParams
    conv1: ConvParams
    temb_w: Tensor
    temb_b: Tensor
    norm2: NormParams
    conv2: ConvParams
    skip: ConvParams | None

    @classmethod
    def init(cls, rng, c_in, c_out, temb_dim):
        return cls(
            NormParams.init(c_in), ConvParams.init(rng, c_in, c_out),
            uniform_init(rng, (temb_dim, c_out), temb_dim), zeros(c_out),
            NormParams.init(c_out), ConvParams.init(rng, c_out, c_out),
            None if c_in == c_out else ConvParams.init(rng, c_in, c_out, k=1),
        )

    def __call__(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv1(ops.silu(self.norm1(x)))
        t = ops.linear(temb, self.temb_w, self.temb_b)
        h = ops.add(h, ops.reshape(t, t.shape + (1, 1)))
        h = self.conv2(ops.silu(self.norm2(h)))
        return ops.add(x if self.skip is None else self.skip(x), h)


@dataclass
class CondEncoderParams:
    """conv -> silu -> conv per scale, 2x average pooling between scales."""

    convs: list[tuple[ConvParams, ConvParams]]

    @classmethod
    def init(cls, rng, c_in, channels):
        convs, prev = [], c_in
        for c in channels:
            convs.append((ConvParams.init(rng, prev, c), ConvParams.init(rng, c, c)))
            prev = c
        return cls(convs)

    def __call__(self, x: Tensor) -> list[Tensor]:
        feats = []
        for l, (c1, c2) in enumerate(self.convs):
            if l:
                x = ops.resample(x, "down2_avg")
            x = c2(ops.silu(c1(x)))
            feats.append(x)
        return feats


@dataclass
class DenoiserParams:
    config: DenoiserConfig
    temb1_w: Tensor
    temb1_b: Tensor
    temb2_w: Tensor
    temb2_b: Tensor
    conv_in: ConvParams
    enc_blocks: list[list[ResBlockParams]]
    dec_blocks: list[list[ResBlockParams]]
    sites: dict[str, InjectParams]
    head_norm: NormParams
    head: ConvParams
    vis_encoder: CondEncoderParams | None = None
    ir_encoder: CondEncoderParams | None = None

    def named_tensors(self) -> dict[str, Tensor]:
        return named_tensors(self)

    def count(self) -> int:
        return int(sum(t.data.size for t in self.named_tensors().values()))


def named_tensors(obj, prefix: str = "") -> dict[str, Tensor]:
    """Flatten nested dataclasses / dicts / lists into ``dotted.name -> Tensor``."""
    out: dict[str, Tensor] = {}

    def walk(o, name):
        if isinstance(o, Tensor):
            out[name] = o
        elif isinstance(o, dict):
            for k in sorted(o):
                walk(o[k], f"{name}.{k}" if name else str(k))
        elif isinstance(o, (list, tuple)):
            for i, v in enumerate(o):
                walk(v, f"{name}.{i}" if name else str(i))
        elif hasattr(o, "__dataclass_fields__"):
            for k in o.__dataclass_fields__:
                walk(getattr(o, k), f"{name}.{k}" if name else k)

    walk(obj, prefix)
    return out


def site_names(scales: int) -> list[str]:
    return [f"enc{l}" for l in range(scales - 1)] + ["mid"] + [f"dec{l}" for l in reversed(range(scales - 1))]


def init_params(config: DenoiserConfig, rng: np.random.Generator) -> DenoiserParams:
    """Fan-in uniform weights, zero biases.

    The output head, every attention ``out_proj`` and every offset block
    start at zero, so a fresh model predicts exactly zero noise.
    """
    ch = config.channels
    td = config.time_embed_dim
    in_ch = OUT_CHANNELS + VIS_CHANNELS + IR_CHANNELS
    enc, prev = [], ch[0]
    for c in ch:
        enc.append([ResBlockParams.init(rng, prev, c, td), ResBlockParams.init(rng, c, c, td)])
        prev = c
    dec = []
    for l in reversed(range(config.scales - 1)):
        dec.append([ResBlockParams.init(rng, ch[l + 1] + ch[l], ch[l], td),
                    ResBlockParams.init(rng, ch[l], ch[l], td)])
    modalities = tuple(m for m, used in (("vis", config.uses_visible), ("ir", config.uses_infrared)) if used)
    sites = {}
    for name in site_names(config.scales):
        l = config.scales - 1 if name == "mid" else int(name[3:])
        sites[name] = InjectParams.init(rng, config.injection, ch[l], ch[l], modalities,
                                        config.heads, config.points)
    params = DenoiserParams(
        config=config,
        temb1_w=uniform_init(rng, (td, td), td), temb1_b=zeros(td),
        temb2_w=uniform_init(rng, (td, td), td), temb2_b=zeros(td),
        conv_in=ConvParams.init(rng, in_ch, ch[0]),
        enc_blocks=enc, dec_blocks=dec, sites=sites,
        head_norm=NormParams.init(ch[0]),
        head=ConvParams.init(rng, ch[0], OUT_CHANNELS, zero=True),
    )
    if config.injection != "none":
        if config.uses_visible:
            params.vis_encoder = CondEncoderParams.init(rng, VIS_CHANNELS, ch)
        if config.uses_infrared:
            params.ir_encoder = CondEncoderParams.init(rng, IR_CHANNELS, ch)
    return params


def sinusoid(t, dim: int) -> np.ndarray:
    """Raw ``[sin | cos]`` embedding with frequencies from 1 down to 1/10000."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def time_embed(t, params: DenoiserParams) -> Tensor:
    dtype = params.temb1_w.dtype
    x = Tensor(sinusoid(t, params.config.time_embed_dim).astype(dtype))
    h = ops.silu(ops.linear(x, params.temb1_w, params.temb1_b))
    return ops.linear(h, params.temb2_w, params.temb2_b)


def encode_conditions(L_v, L_i, params: DenoiserParams):
    """Per-scale visible and infrared features (``None`` for an unused modality)."""
    cfg = params.config
    for name, img, c in (("visible", L_v, VIS_CHANNELS), ("infrared", L_i, IR_CHANNELS)):
        if img is not None and (img.shape[1] != c or img.shape[2:] != (cfg.net_size, cfg.net_size)):
            raise DimensionError(f"{name} input must be N x {c} x {cfg.net_size} x {cfg.net_size}, got {img.shape}")
    fv = params.vis_encoder(L_v) if params.vis_encoder is not None and L_v is not None else None
    fi = params.ir_encoder(L_i) if params.ir_encoder is not None and L_i is not None else None
    return fv, fi


def _as_input(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def denoise_forward(z_t, t, L_v, L_i, params: DenoiserParams) -> Tensor:
    """Predicted noise for ``z_t`` (``N x 3 x S x S``) at steps ``t`` (length-N ints)."""
    cfg = params.config
    dtype = params.conv_in.w.dtype
    z_t, L_v, L_i = (_as_input(a, dtype) for a in (z_t, L_v, L_i))
    n, S = z_t.shape[0], cfg.net_size
    if z_t.shape != (n, OUT_CHANNELS, S, S):
        raise DimensionError(f"z_t must be N x 3 x {S} x {S}, got {z_t.shape}")
    if L_v.shape != (n, VIS_CHANNELS, S, S) or L_i.shape != (n, IR_CHANNELS, S, S):
        raise DimensionError(f"conditions must be N x 3/1 x {S} x {S}, got {L_v.shape}, {L_i.shape}")
    t = np.broadcast_to(np.asarray(t), (n,))
    if not cfg.uses_visible:
        L_v = Tensor(np.zeros(L_v.shape, dtype))
    if not cfg.uses_infrared:
        L_i = Tensor(np.zeros(L_i.shape, dtype))

    fv, fi = encode_conditions(L_v, L_i, params)

    def inject(name, h, l):
        return sadmr_inject(h, None if fv is None else fv[l], None if fi is None else fi[l],
                            cfg.injection, params.sites[name])

    temb = time_embed(t, params)
    h = params.conv_in(ops.concat([z_t, L_v, L_i], axis=1))
    skips = []
    L = cfg.scales
    for l, blocks in enumerate(params.enc_blocks):
        for blk in blocks:
            h = blk(h, temb)
        if l < L - 1:
            h = inject(f"enc{l}", h, l)
            skips.append(h)
            h = ops.resample(h, "down2_avg")
    h = inject("mid", h, L - 1)
    for i, blocks in enumerate(params.dec_blocks):
        l = L - 2 - i
        h = ops.concat([ops.resample(h, "up2_nearest"), skips[l]], axis=1)
        for blk in blocks:
            h = blk(h, temb)
        h = inject(f"dec{l}", h, l)
    return params.head(ops.silu(params.head_norm(h)))


def to_latent(img: np.ndarray, config: DenoiserConfig) -> np.ndarray:
    """Map ``N x C x H x W`` unit-interval images to the network's ``[-1, 1]`` space."""
    x = np.asarray(img) * 2.0 - 1.0
    if config.latent_mode == "avgpool":
        f = config.latent_factor
        n, c, H, W = x.shape
        x = x.reshape(n, c, H // f, f, W // f, f).mean(axis=(3, 5))
    return x


def from_latent(z: np.ndarray, config: DenoiserConfig) -> np.ndarray:
    """Inverse of :func:`to_latent` (nearest-neighbour upsampling in avgpool mode), clamped."""
    x = np.asarray(z)
    if config.latent_mode == "avgpool":
        f = config.latent_factor
        x = np.repeat(np.repeat(x, f, axis=2), f, axis=3)
    return np.clip((x + 1.0) / 2.0, 0.0, 1.0)


def cast_params(params: DenoiserParams, dtype) -> DenoiserParams:
    """Copy of ``params`` with every tensor converted to ``dtype``."""
    import copy
    clone = copy.deepcopy(params)
    for t in named_tensors(clone).values():
        t.data = t.data.astype(dtype)
    return clone

"""Procedural paired visible/infrared scenes, Netpbm image I/O and batching.

On-disk datasets use ``<root>/vis/<id>.ppm`` and ``<root>/ir/<id>.pgm``;
pairs are matched by file stem and always listed in lexicographic order.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .ispt import ParamRanges, augment, sample_params

IR_BLUR_SIGMA = 1.0
IR_BLUR_TRUNCATE = 3.0


class DecodeError(ValueError):
    pass


@dataclass
class ScenePair:
    visible: np.ndarray  # H x W x 3
    infrared: np.ndarray  # H x W x 1
    id: str
    mask: np.ndarray | None = None  # object coverage, shared by both modalities


def _draw_albedo(rng: np.random.Generator) -> np.ndarray:
    while True:
        c = rng.uniform(0.1, 1.0, size=3)
        if c.mean() >= 0.4:
            return c


def synth_scene(rng: np.random.Generator, size: int = 32, id: str = "scene") -> ScenePair:
    """Render 3-8 bright rectangles/disks over a textured daytime background.

    Objects are hot (temperature 0.5-1.0) against a cool background
    (0.0-0.2); the infrared channel is the temperature map under a 1-pixel
    Gaussian blur.
    """
    if size < 8:
        raise ValueError(f"size must be >= 8, got {size}")
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)

    bg = rng.uniform(0.35, 0.65, size=3)
    texture = ndimage.gaussian_filter(rng.standard_normal((size, size)), 2.0)
    texture *= 0.06 / max(np.abs(texture).max(), 1e-12)
    vis = np.clip(bg[None, None, :] + texture[..., None], 0.0, 1.0)

    bg_temp = rng.uniform(0.0, 0.15)
    ir_tex = ndimage.gaussian_filter(rng.standard_normal((size, size)), 2.0)
    ir_tex *= 0.05 / max(np.abs(ir_tex).max(), 1e-12)
    temp = np.clip(bg_temp + ir_tex, 0.0, 0.2)
    mask = np.zeros((size, size), dtype=bool)

    for _ in range(int(rng.integers(3, 9))):
        if rng.random() < 0.5:
            h, w = rng.uniform(size / 8, size / 2.5, size=2)
            y0, x0 = rng.uniform(0, size - h), rng.uniform(0, size - w)
            m = (yy >= y0) & (yy < y0 + h) & (xx >= x0) & (xx < x0 + w)
        else:
            r = rng.uniform(size / 10, size / 5)
            cy, cx = rng.uniform(r, size - r, size=2)
            m = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        vis[m] = _draw_albedo(rng)
        temp[m] = rng.uniform(0.5, 1.0)
        mask |= m

    r2 = ((yy - (size - 1) / 2) ** 2 + (xx - (size - 1) / 2) ** 2) / ((size / 2) ** 2)
    vis = vis * (1.0 - 0.1 * r2)[..., None]
    ir = ndimage.gaussian_filter(temp, IR_BLUR_SIGMA, mode="nearest", truncate=IR_BLUR_TRUNCATE)
    return ScenePair(np.clip(vis, 0, 1).astype(np.float32),
                     np.clip(ir, 0, 1).astype(np.float32)[..., None], id, mask)


def synth_dataset(count: int, size: int, seed: int) -> list[ScenePair]:
    """``count`` scenes, scene ``i`` seeded by ``(seed, i)`` independently of the others."""
    return [synth_scene(np.random.default_rng([seed, i]), size, id=f"scene_{i:05d}")
            for i in range(count)]


# --------------------------------------------------------------------------
# Netpbm (P5 / P6, maxval 255)

def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image(img: np.ndarray, path) -> None:
    """Write a unit-interval image as P6 (3 channels) or P5 (1 channel / 2-D)."""
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[..., None]
    h, w, c = img.shape
    if c not in (1, 3):
        raise ValueError(f"cannot write {c}-channel image as PPM/PGM")
    header = f"{'P6' if c == 3 else 'P5'}\n{w} {h}\n255\n".encode("ascii")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header + to_uint8(img).tobytes())
    os.replace(tmp, path)


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _decode(buf: bytes) -> np.ndarray:
    pos = 0
    fields = []
    for _ in range(4):
        m = _TOKEN.match(buf, pos)
        if m is None:
            raise DecodeError(f"truncated header at byte offset {pos}")
        fields.append((m.group(1), m.start(1)))
        pos = m.end()
    (magic, _), *nums = fields
    if magic not in (b"P5", b"P6"):
        raise DecodeError(f"unsupported magic {magic!r} at byte offset 0")
    vals = []
    for tok, off in nums:
        if not tok.isdigit():
            raise DecodeError(f"malformed header field {tok!r} at byte offset {off}")
        vals.append(int(tok))
    w, h, maxval = vals
    if maxval != 255:
        raise DecodeError(f"unsupported maxval {maxval} at byte offset {nums[2][1]}")
    if w <= 0 or h <= 0:
        raise DecodeError(f"invalid dimensions {w}x{h} at byte offset {nums[0][1]}")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise DecodeError(f"missing whitespace after maxval at byte offset {pos}")
    pos += 1
    c = 3 if magic == b"P6" else 1
    need = w * h * c
    if len(buf) - pos < need:
        raise DecodeError(f"truncated payload: expected {need} bytes from byte offset {pos}, "
                          f"found {len(buf) - pos}")
    data = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    return (data.reshape(h, w, c).astype(np.float32) / 255.0)


def read_image(path) -> np.ndarray:
    """Decode P5/P6 to float32 ``H x W x C`` in ``[0, 1]``."""
    with open(path, "rb") as fh:
        buf = fh.read()
    try:
        return _decode(buf)
    except DecodeError as exc:
        raise DecodeError(f"{path}: {exc}") from None


def write_dataset(pairs, root) -> None:
    root = Path(root)
    (root / "vis").mkdir(parents=True, exist_ok=True)
    (root / "ir").mkdir(parents=True, exist_ok=True)
    for p in pairs:
        write_image(p.visible, root / "vis" / f"{p.id}.ppm")
        write_image(p.infrared, root / "ir" / f"{p.id}.pgm")


@dataclass
class DatasetManifest:
    root: Path
    pairs: list[tuple[Path, Path]]
    split: str = "train"

    @classmethod
    def scan(cls, root, split: str = "train") -> "DatasetManifest":
        root = Path(root)
        vis = {p.stem: p for p in (root / "vis").glob("*.ppm")}
        ir = {p.stem: p for p in (root / "ir").glob("*.pgm")}
        if not vis:
            raise FileNotFoundError(f"no visible images under {root / 'vis'}")
        unmatched = sorted(set(vis) ^ set(ir))
        if unmatched:
            raise FileNotFoundError(f"unpaired ids under {root}: {unmatched[:5]}")
        return cls(root, [(vis[k], ir[k]) for k in sorted(vis)], split)

    def load(self) -> list[ScenePair]:
        out = []
        for v, i in self.pairs:
            vis, ir = read_image(v), read_image(i)
            if vis.shape[-1] != 3 or ir.shape[-1] != 1:
                raise DecodeError(f"{v.stem}: expected RGB visible and gray infrared")
            if vis.shape[:2] != ir.shape[:2]:
                raise DecodeError(f"{v.stem}: visible {vis.shape[:2]} and infrared {ir.shape[:2]} differ")
            out.append(ScenePair(vis, ir, v.stem))
        return out


def load_dataset(root) -> list[ScenePair]:
    return DatasetManifest.scan(root).load()


def image_seeds(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.integers(0, 2 ** 63 - 1, size=n, dtype=np.int64)


def build_training_batch(pairs, ranges: ParamRanges, rng: np.random.Generator):
    """Degrade each clean visible image with freshly drawn parameters.

    Each image gets its own generator seeded from ``rng``, so per-image
    results do not depend on batch composition order beyond the seed draw.
    Returns ``(degraded, infrared, clean)`` as ``N x C x H x W`` float32.
    """
    if not pairs:
        raise ValueError("empty batch")
    degraded, ir, clean = [], [], []
    for p, s in zip(pairs, image_seeds(rng, len(pairs))):
        r = np.random.default_rng(int(s))
        params = sample_params(ranges, r)
        degraded.append(augment(p.visible, params, r))
        ir.append(p.infrared)
        clean.append(p.visible)

    def stack(xs):
        return np.ascontiguousarray(np.stack(xs).transpose(0, 3, 1, 2), dtype=np.float32)
    return stack(degraded), stack(ir), stack(clean)

"""Noise-prediction training, checkpoints, restoration and evaluation runs.

Randomness in :func:`train` flows from one master ``PCG64`` generator that
draws a single 63-bit batch seed per step; everything else in the step
(scene choice, degradation, ``t`` and noise) comes from a generator built
from that seed.  Saving the master state is enough to resume bitwise.
"""

from __future__ import annotations

import csv
import io
import os
import struct
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .config import TrainConfig
from .data import ScenePair, build_training_batch, load_dataset, synth_dataset
from .denoiser import (CONDITIONING_MODES, DenoiserParams, denoise_forward, from_latent,
                       init_params, to_latent)
from .diffusion import forward_diffuse, make_schedule, respace, sample
from .ispt import FIDELITY_PARAMS, AugmentParams, augment
from .metrics import MetricReport, format_value, psnr, ssim
from .nn import ops
from .nn.tensor import DimensionError, NumericError, Tape, Tensor

MAGIC = b"VIIS"
VERSION = 1
CONFIG_TENSOR = "__config__"
BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


# --------------------------------------------------------------------------
# optimiser

def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray,
              lr: float, t: int, beta1: float = BETA1, beta2: float = BETA2,
              eps: float = ADAM_EPS) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One bias-corrected Adam update; returns new ``(param, m, v)``.

    Arithmetic stays in ``param``'s dtype.
    """
    if not (param.shape == grad.shape == m.shape == v.shape):
        raise DimensionError(f"adam shapes differ: param {param.shape}, grad {grad.shape}, "
                             f"m {m.shape}, v {v.shape}")
    if t < 1:
        raise ValueError(f"adam step counter must be >= 1, got {t}")
    dt = param.dtype.type
    m = dt(beta1) * m + dt(1 - beta1) * grad
    v = dt(beta2) * v + dt(1 - beta2) * grad * grad
    m_hat = m / dt(1 - beta1 ** t)
    v_hat = v / dt(1 - beta2 ** t)
    return param - dt(lr) * m_hat / (np.sqrt(v_hat) + dt(eps)), m, v


def clip_global_norm(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    """Scale all gradients together so their joint L2 norm is at most ``max_norm``."""
    norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))
    if not np.isfinite(norm):
        raise NumericError("non-finite gradient norm")
    if norm > max_norm:
        s = max_norm / norm
        grads = [(g * g.dtype.type(s)) for g in grads]
    return grads, norm


# --------------------------------------------------------------------------
# state and checkpoints

@dataclass
class Checkpoint:
    config: TrainConfig
    params: DenoiserParams
    moments: dict[str, tuple[np.ndarray, np.ndarray]]
    step: int
    rng: np.random.Generator

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {k: t.data for k, t in self.params.named_tensors().items()}
        for k, (m, v) in self.moments.items():
            out[f"{k}.m"] = m
            out[f"{k}.v"] = v
        return out


def fresh_state(config: TrainConfig) -> Checkpoint:
    params = init_params(config.model, np.random.default_rng([config.seed, 0]))
    moments = {k: (np.zeros_like(t.data), np.zeros_like(t.data))
               for k, t in params.named_tensors().items()}
    return Checkpoint(config, params, moments, 0, np.random.default_rng([config.seed, 1]))


def _rng_bytes(rng: np.random.Generator) -> bytes:
    st = rng.bit_generator.state
    if st["bit_generator"] != "PCG64":
        raise TypeError("only PCG64 generator state can be checkpointed")
    if st["has_uint32"]:
        raise ValueError("generator holds a buffered 32-bit draw; state would not round-trip")
    mask = (1 << 64) - 1
    s, inc = st["state"]["state"], st["state"]["inc"]
    return struct.pack("<4Q", s & mask, s >> 64, inc & mask, inc >> 64)


def _rng_from_bytes(b: bytes) -> np.random.Generator:
    s0, s1, i0, i1 = struct.unpack("<4Q", b)
    bg = np.random.PCG64()
    bg.state = {"bit_generator": "PCG64", "state": {"state": s0 | (s1 << 64), "inc": i0 | (i1 << 64)},
                "has_uint32": 0, "uinteger": 0}
    return np.random.Generator(bg)


def _write_tensor(fh, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)) + raw)
    fh.write(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write atomically: a sibling temp file is renamed over ``path``."""
    arrays = ckpt.named_arrays()
    cfg_bytes = np.frombuffer(cfgmod.dumps(ckpt.config).encode("utf-8"), dtype=np.uint8)
    buf = io.BytesIO()
    buf.write(MAGIC + struct.pack("<II", VERSION, len(arrays) + 1))
    _write_tensor(buf, CONFIG_TENSOR, cfg_bytes.astype(np.float32))
    for name in sorted(arrays):
        _write_tensor(buf, name, arrays[name])
    buf.write(struct.pack("<Q", ckpt.step) + _rng_bytes(ckpt.rng))
    path = Path(path)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        buf = fh.read()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated at byte offset {pos}")
        out = buf[pos:pos + n]
        pos += n
        return out

    if take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    arrays = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        name = take(n).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims, dtype=np.int64))
        arrays[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims).astype(np.float32)
    (step,) = struct.unpack("<Q", take(8))
    rng = _rng_from_bytes(take(32))
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")

    if CONFIG_TENSOR not in arrays:
        raise CheckpointError(f"{path}: missing {CONFIG_TENSOR}")
    text = arrays.pop(CONFIG_TENSOR).astype(np.uint8).tobytes().decode("utf-8")
    config = cfgmod.loads(text, origin=f"{path}:{CONFIG_TENSOR}")
    params = init_params(config.model, np.random.default_rng(0))
    named = params.named_tensors()
    moments = {}
    for k, t in named.items():
        for key in (k, f"{k}.m", f"{k}.v"):
            if key not in arrays:
                raise CheckpointError(f"{path}: missing tensor {key!r}")
            if arrays[key].shape != t.shape:
                raise CheckpointError(f"{path}: tensor {key!r} has shape {arrays[key].shape}, "
                                      f"expected {t.shape}")
        t.data = arrays.pop(k)
        moments[k] = (arrays.pop(f"{k}.m"), arrays.pop(f"{k}.v"))
    if arrays:
        raise CheckpointError(f"{path}: unexpected tensors {sorted(arrays)[:5]}")
    return Checkpoint(config, params, moments, int(step), rng)


# --------------------------------------------------------------------------
# training loop

@dataclass
class LossLog:
    rows: list[tuple[int, float, float]] = field(default_factory=list)

    @property
    def losses(self) -> np.ndarray:
        return np.array([r[1] for r in self.rows])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "loss", "wall_time"])
            for s, l, wt in self.rows:
                w.writerow([s, repr(l), f"{wt:.3f}"])


def train_step(state: Checkpoint, pairs: list[ScenePair]) -> tuple[float, int]:
    """Advance ``state`` by one optimiser step; returns ``(loss, batch_seed)``."""
    cfg = state.config
    mcfg = cfg.model
    sched = make_schedule(mcfg.T)
    batch_seed = int(state.rng.integers(0, 2 ** 63 - 1))
    brng = np.random.default_rng(batch_seed)
    idx = brng.integers(0, len(pairs), size=cfg.batch_size)
    degraded, ir, clean = build_training_batch([pairs[i] for i in idx], cfg.ranges, brng)
    z0 = to_latent(clean, mcfg).astype(np.float32)
    L_v = to_latent(degraded, mcfg).astype(np.float32)
    L_i = to_latent(ir, mcfg).astype(np.float32)
    t = brng.integers(1, mcfg.T + 1, size=cfg.batch_size)
    eps = brng.standard_normal(z0.shape).astype(np.float32)
    z_t = forward_diffuse(z0, t, eps, sched)

    named = state.params.named_tensors()
    names = list(named)
    where = f"at step {state.step} (batch seed {batch_seed})"
    try:
        with Tape() as tape:
            diff = ops.sub(denoise_forward(z_t, t, L_v, L_i, state.params), Tensor(eps))
            loss_t = ops.mean(ops.mul(diff, diff))
    except NumericError as exc:
        raise NumericError(f"non-finite loss {where}: {exc}") from exc
    loss = float(loss_t.data)
    if not np.isfinite(loss):
        raise NumericError(f"non-finite loss {where}")
    grads = tape.gradient(loss_t, [named[k] for k in names])
    grads, _ = clip_global_norm(grads, cfg.grad_clip)
    state.step += 1
    for k, g in zip(names, grads):
        p = named[k]
        m, v = state.moments[k]
        p.data, m, v = adam_step(p.data, g, m, v, cfg.learning_rate, state.step)
        state.moments[k] = (m, v)
    return loss, batch_seed


def training_pairs(config: TrainConfig, data: str | os.PathLike | None = "synth") -> list[ScenePair]:
    if data is None or str(data) == "synth":
        return synth_dataset(config.num_scenes, config.image_size, config.data_seed)
    pairs = load_dataset(data)
    size = config.image_size
    for p in pairs:
        if p.visible.shape[:2] != (size, size):
            raise DimensionError(f"{p.id}: image is {p.visible.shape[:2]}, config expects {size}x{size}")
    return pairs


def train(config: TrainConfig, data="synth", out=None, log_path=None,
          state: Checkpoint | None = None, until: int | None = None,
          progress=None) -> tuple[Checkpoint, LossLog]:
    """Run (or continue) training up to ``until`` (default ``config.steps``).

    ``out`` receives periodic and final checkpoints, ``log_path`` the loss
    CSV.  ``progress(step, loss)`` is called after every step.
    """
    pairs = data if isinstance(data, list) else training_pairs(config, data)
    state = state or fresh_state(config)
    until = config.steps if until is None else until
    log = LossLog()
    t0 = time.perf_counter()
    while state.step < until:
        loss, _ = train_step(state, pairs)
        log.rows.append((state.step, loss, time.perf_counter() - t0))
        if progress is not None:
            progress(state.step, loss)
        if out is not None and config.checkpoint_every and state.step % config.checkpoint_every == 0:
            save_checkpoint(state, out)
        if log_path is not None and config.log_every and state.step % config.log_every == 0:
            log.write_csv(log_path)
    if out is not None:
        save_checkpoint(state, out)
    if log_path is not None:
        log.write_csv(log_path)
    return state, log


# --------------------------------------------------------------------------
# restoration and evaluation

def _nchw(imgs) -> np.ndarray:
    return np.ascontiguousarray(np.stack([np.asarray(i, dtype=np.float32) for i in imgs])
                                .transpose(0, 3, 1, 2))


def restore_batch(ckpt: Checkpoint, visible, infrared, steps: int | None = None,
                  seed: int = 0) -> list[np.ndarray]:
    """Sample clean visible images for lists of ``H x W x 3`` / ``H x W x 1`` inputs."""
    mcfg = ckpt.config.model
    size = mcfg.image_size
    for v, i in zip(visible, infrared, strict=True):
        if v.shape != (size, size, 3) or i.shape != (size, size, 1):
            raise DimensionError(f"inputs must be {size}x{size}x3 and {size}x{size}x1, "
                                 f"got {v.shape} and {i.shape}")
    sched = make_schedule(mcfg.T)
    if steps is not None:
        sched = respace(sched, steps)
    L_v = to_latent(_nchw(visible), mcfg).astype(np.float32)
    L_i = to_latent(_nchw(infrared), mcfg).astype(np.float32)
    n, S = len(visible), mcfg.net_size

    def predictor(z, t, cond):
        return denoise_forward(z, np.full(n, t), cond[0], cond[1], ckpt.params).data

    z = sample(predictor, (L_v, L_i), sched, np.random.default_rng(seed), (n, 3, S, S), np.float32)
    out = from_latent(z, mcfg).transpose(0, 2, 3, 1)
    return [np.ascontiguousarray(o, dtype=np.float32) for o in out]


def restore(ckpt: Checkpoint, visible: np.ndarray, infrared: np.ndarray,
            steps: int | None = None, seed: int = 0) -> np.ndarray:
    return restore_batch(ckpt, [visible], [infrared], steps, seed)[0]


def degrade_scenes(scenes: list[ScenePair], params: AugmentParams = FIDELITY_PARAMS,
                   seed: int = 0) -> list[np.ndarray]:
    return [augment(s.visible, params, np.random.default_rng([seed, i])) for i, s in enumerate(scenes)]


@dataclass
class FidelityResult:
    degraded_psnr: float
    restored_psnr: float
    degraded_ssim: float
    restored_ssim: float
    report: MetricReport

    @property
    def psnr_gain(self) -> float:
        return self.restored_psnr - self.degraded_psnr

    @property
    def ssim_gain(self) -> float:
        return self.restored_ssim - self.degraded_ssim


def evaluate_fidelity(ckpt: Checkpoint, scenes: list[ScenePair], params: AugmentParams = FIDELITY_PARAMS,
                      seed: int = 0, steps: int | None = None, batch: int = 32) -> FidelityResult:
    """Degrade held-out ``scenes`` with fixed ``params`` and restore them."""
    degraded = degrade_scenes(scenes, params, seed)
    restored = []
    for i in range(0, len(scenes), batch):
        restored += restore_batch(ckpt, degraded[i:i + batch], [s.infrared for s in scenes[i:i + batch]],
                                  steps, seed=seed + i)
    report = MetricReport()
    for s, r in zip(scenes, restored):
        report.add(s.id, r, s.visible)
    return FidelityResult(
        degraded_psnr=float(np.mean([psnr(d, s.visible) for d, s in zip(degraded, scenes)])),
        restored_psnr=float(np.mean([psnr(r, s.visible) for r, s in zip(restored, scenes)])),
        degraded_ssim=float(np.mean([ssim(d, s.visible) for d, s in zip(degraded, scenes)])),
        restored_ssim=float(np.mean([ssim(r, s.visible) for r, s in zip(restored, scenes)])),
        report=report,
    )


ABLATION_COLUMNS = ("configuration", "sd", "en", "niqe", "brisque", "psnr", "ssim", "final_loss")


def run_ablation(base: TrainConfig, modes=CONDITIONING_MODES, steps: int = 200,
                 eval_scenes: int = 8, sample_steps: int | None = None, data="synth",
                 progress=None) -> list[dict]:
    """Train one model per conditioning mode and score it on held-out scenes.

    NIQE/BRISQUE cells are left empty for external scores.
    """
    pairs = data if isinstance(data, list) else training_pairs(base, data)
    held_out = synth_dataset(eval_scenes, base.image_size, base.data_seed + 1000)
    rows = []
    for mode in modes:
        cfg = replace(base, steps=steps, model=replace(base.model, conditioning_mode=mode))
        state, log = train(cfg, pairs)
        res = evaluate_fidelity(state, held_out, steps=sample_steps)
        means = res.report.means()
        row = {"configuration": mode, "sd": means["sd"], "en": means["en"],
               "niqe": float("nan"), "brisque": float("nan"),
               "psnr": res.restored_psnr, "ssim": res.restored_ssim,
               "final_loss": float(log.losses[-min(20, len(log.rows)):].mean())}
        rows.append(row)
        if progress is not None:
            progress(row)
    return rows


def write_ablation_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ABLATION_COLUMNS)
        for r in rows:
            w.writerow([r["configuration"]] + [format_value(r[c]) for c in ABLATION_COLUMNS[1:]])

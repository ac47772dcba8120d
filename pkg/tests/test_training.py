import dataclasses
import struct

import numpy as np
import pytest

from viis import config as cfgmod
from viis.config import ConfigError, TrainConfig
from viis.data import build_training_batch, synth_dataset
from viis.denoiser import CONDITIONING_MODES, to_latent
from viis.nn.tensor import DimensionError, NumericError
from viis.training import (ABLATION_COLUMNS, CheckpointError, adam_step, clip_global_norm,
                           fresh_state, load_checkpoint, restore, run_ablation, save_checkpoint,
                           train, train_step, training_pairs, write_ablation_csv)

TINY = TrainConfig.preset("tiny")


def test_adam_zero_gradient():
    p, m, v = np.array([1.0, -2.0]), np.array([0.5, 0.1]), np.array([0.2, 0.3])
    p2, m2, v2 = adam_step(p, np.zeros(2), m, v, lr=0.1, t=3)
    np.testing.assert_allclose(m2, 0.9 * m)
    np.testing.assert_allclose(v2, 0.999 * v)
    # with stale moments the parameter still moves; with fresh ones it must not
    p3, _, _ = adam_step(p, np.zeros(2), np.zeros(2), np.zeros(2), lr=0.1, t=1)
    np.testing.assert_array_equal(p3, p)


def test_adam_first_step_is_sign_step():
    for g in (3.7, -0.02):
        p, _, _ = adam_step(np.array([0.0]), np.array([g]), np.zeros(1), np.zeros(1), lr=1e-3, t=1)
        assert p[0] == pytest.approx(-np.sign(g) * 1e-3 * abs(g) / (abs(g) + 1e-8), rel=1e-12)


def test_adam_monotone_under_constant_gradient():
    p, m, v = np.array([0.0]), np.zeros(1), np.zeros(1)
    xs = []
    for t in (1, 2, 3):
        p, m, v = adam_step(p, np.array([0.5]), m, v, lr=0.01, t=t)
        xs.append(p[0])
    assert xs[0] < 0 and xs[1] < xs[0] and xs[2] < xs[1]


def test_adam_errors_and_dtype():
    with pytest.raises(DimensionError):
        adam_step(np.zeros(2), np.zeros(3), np.zeros(2), np.zeros(2), 0.1, 1)
    with pytest.raises(ValueError):
        adam_step(np.zeros(2), np.zeros(2), np.zeros(2), np.zeros(2), 0.1, 0)
    z = np.zeros(2, np.float32)
    assert all(a.dtype == np.float32 for a in adam_step(z, z + 1, z, z, 0.1, 1))


def test_clip_global_norm():
    g = [np.array([3.0]), np.array([4.0])]
    out, n = clip_global_norm(g, 1.0)
    assert n == pytest.approx(5.0)
    assert np.sqrt(sum(float(x @ x) for x in out)) == pytest.approx(1.0)
    out, _ = clip_global_norm(g, 10.0)
    assert out[0][0] == 3.0
    with pytest.raises(NumericError):
        clip_global_norm([np.array([np.nan])], 1.0)


def test_initial_loss_equals_noise_energy():
    state = fresh_state(TINY)
    pairs = training_pairs(TINY)
    # replay the step's draws on a copy of the master generator
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = state.rng.bit_generator.state
    brng = np.random.default_rng(int(rng.integers(0, 2 ** 63 - 1)))
    idx = brng.integers(0, len(pairs), size=TINY.batch_size)
    _, _, clean = build_training_batch([pairs[i] for i in idx], TINY.ranges, brng)
    z0 = to_latent(clean, TINY.model).astype(np.float32)
    brng.integers(1, TINY.T + 1, size=TINY.batch_size)
    eps = brng.standard_normal(z0.shape).astype(np.float32)
    loss, _ = train_step(state, pairs)
    assert abs(loss / float(np.mean(eps.astype(np.float64) ** 2)) - 1) < 0.02


def test_loss_log_is_reproducible(tmp_path):
    cfg = dataclasses.replace(TINY, steps=10)
    _, a = train(cfg, log_path=tmp_path / "a.csv")
    _, b = train(cfg, log_path=tmp_path / "b.csv")
    assert a.losses.tobytes() == b.losses.tobytes()
    la, lb = ((tmp_path / f).read_text().splitlines() for f in ("a.csv", "b.csv"))
    assert la[0] == "step,loss,wall_time" and len(la) == 11
    assert [l.rsplit(",", 1)[0] for l in la] == [l.rsplit(",", 1)[0] for l in lb]


def test_checkpoint_roundtrip_and_resume(tmp_path):
    cfg = dataclasses.replace(TINY, steps=8)
    _, full = train(cfg)
    mid, first = train(cfg, until=4, out=tmp_path / "mid.viis")
    loaded = load_checkpoint(tmp_path / "mid.viis")
    assert loaded.step == 4 and loaded.config == cfg
    a, b = mid.named_arrays(), loaded.named_arrays()
    assert a.keys() == b.keys() and all(a[k].tobytes() == b[k].tobytes() for k in a)
    assert loaded.rng.bit_generator.state == mid.rng.bit_generator.state
    save_checkpoint(loaded, tmp_path / "again.viis")
    assert (tmp_path / "again.viis").read_bytes() == (tmp_path / "mid.viis").read_bytes()
    _, rest = train(cfg, state=loaded)
    resumed = np.concatenate([first.losses, rest.losses])
    assert resumed.tobytes() == full.losses.tobytes()


def test_checkpoint_layout(tmp_path):
    state = fresh_state(TINY)
    save_checkpoint(state, tmp_path / "c.viis")
    raw = (tmp_path / "c.viis").read_bytes()
    assert raw[:4] == b"VIIS"
    version, count = struct.unpack("<II", raw[4:12])
    assert version == 1 and count == 3 * len(state.params.named_tensors()) + 1
    (n,) = struct.unpack("<I", raw[12:16])
    assert raw[16:16 + n] == b"__config__"
    assert struct.unpack("<Q", raw[-40:-32])[0] == 0
    assert list(tmp_path.iterdir()) == [tmp_path / "c.viis"]  # no temp file left behind


def test_checkpoint_errors(tmp_path):
    save_checkpoint(fresh_state(TINY), tmp_path / "c.viis")
    raw = (tmp_path / "c.viis").read_bytes()
    for name, buf, msg in (("magic", b"XXXX" + raw[4:], "magic"),
                           ("trunc", raw[:-5], "truncated"),
                           ("extra", raw + b"\0", "trailing")):
        (tmp_path / name).write_bytes(buf)
        with pytest.raises(CheckpointError, match=msg):
            load_checkpoint(tmp_path / name)


def test_non_finite_loss_aborts_with_step_and_seed():
    state = fresh_state(TINY)
    state.params.conv_in.w.data[0, 0, 0, 0] = np.nan
    with pytest.raises(NumericError, match=r"non-finite loss at step 0 \(batch seed \d+\)"):
        train_step(state, training_pairs(TINY))


def test_clipping_keeps_updates_finite():
    cfg = dataclasses.replace(TINY, learning_rate=0.05, steps=5)
    for seed in range(3):
        state, log = train(dataclasses.replace(cfg, seed=seed))
        assert np.all(np.isfinite(log.losses))
        assert all(np.all(np.isfinite(t.data)) for t in state.params.named_tensors().values())


def test_restore_contract():
    state = fresh_state(TINY)
    s = synth_dataset(1, 16, seed=3)[0]
    a = restore(state, s.visible, s.infrared, seed=4)
    b = restore(state, s.visible, s.infrared, seed=4)
    assert a.shape == (16, 16, 3) and a.min() >= 0 and a.max() <= 1
    assert np.all(np.isfinite(a)) and a.tobytes() == b.tobytes()
    with pytest.raises(DimensionError):
        restore(state, s.visible[:8], s.infrared, seed=4)


def test_training_pairs_from_directory(tmp_path):
    from viis.data import write_dataset
    write_dataset(synth_dataset(3, 8, seed=0), tmp_path)
    with pytest.raises(DimensionError):
        training_pairs(TINY, tmp_path)
    assert len(training_pairs(dataclasses.replace(TINY, model=dataclasses.replace(TINY.model, image_size=8)),
                              tmp_path)) == 3


def test_ablation_runs_every_mode(tmp_path):
    rows = run_ablation(TINY, steps=2, eval_scenes=2, sample_steps=4)
    assert [r["configuration"] for r in rows] == list(CONDITIONING_MODES)
    write_ablation_csv(rows, tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == ",".join(ABLATION_COLUMNS) and len(lines) == 8
    assert lines[1].split(",")[3:5] == ["", ""]


# ---------------------------------------------------------------- config files

def test_config_roundtrip():
    for name, cfg in cfgmod.PRESETS.items():
        assert cfgmod.loads(cfgmod.dumps(cfg)) == cfg, name


def test_config_overrides_and_errors(tmp_path):
    cfg = cfgmod.loads("[train]\nsteps = 7\n[model]\nchannels = 4,8\nconditioning_mode = addition\n"
                       "[ranges]\ngamma = 2,3\nnoise_mode = impulse\n", base=TINY)
    assert cfg.steps == 7 and cfg.model.channels == (4, 8) and cfg.model.conditioning_mode == "addition"
    assert cfg.ranges.gamma == (2.0, 3.0) and cfg.ranges.noise_mode == "impulse"
    for text, msg in (("[train]\nstepz = 3\n", "stepz"), ("[optim]\nlr = 1\n", "optim"),
                      ("[train]\nsteps = many\n", "steps"), ("[train]\nsteps = -1\n", "steps")):
        with pytest.raises(ConfigError, match=msg):
            cfgmod.loads(text)
    with pytest.raises(ConfigError):
        TrainConfig.preset("huge")
    p = tmp_path / "c.ini"
    p.write_text(cfgmod.dumps(TINY))
    assert cfgmod.load(p) == TINY

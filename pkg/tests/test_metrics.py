import math

import numpy as np
import pytest

from viis.metrics import (CSV_COLUMNS, MetricError, MetricReport, en, format_value, luminance8, psnr,
                          read_csv, sd, ssim, to_gray)


def u(img8):
    """0..255 integer image to the unit interval the metrics expect."""
    return np.asarray(img8, dtype=np.float64) / 255.0


def test_to_gray_examples():
    assert to_gray(np.ones((1, 1, 3)))[0, 0] == pytest.approx(1.0)
    assert to_gray(np.array([[[1.0, 0, 0]]]))[0, 0] == pytest.approx(0.299)
    v = np.full((2, 2, 3), 0.37)
    np.testing.assert_allclose(to_gray(v), 0.37)
    with pytest.raises(MetricError):
        to_gray(np.ones((2, 2, 4)))


def test_sd_examples(oracles):
    assert sd(np.full((5, 5), 0.3)) == 0
    half = np.zeros((4, 4))
    half[:2] = 1
    assert sd(half) == pytest.approx(127.5)
    ramp = u(np.arange(256).reshape(16, 16))
    assert sd(ramp) == pytest.approx(float(oracles["met_sd_ramp"]), abs=1e-9)
    assert sd(u(oracles["met_a"])) == pytest.approx(float(oracles["met_sd_a"]), abs=1e-9)
    with pytest.raises(MetricError):
        sd(np.zeros((0, 3)))


def test_en_examples(oracles):
    assert en(np.full((5, 5), 0.3)) == 0
    assert en(u(np.arange(256).reshape(16, 16))) == pytest.approx(8.0)
    half = np.zeros((4, 4))
    half[:2] = 1
    assert en(half) == pytest.approx(1.0)
    assert en(u(oracles["met_a"])) == pytest.approx(float(oracles["met_en_a"]), abs=1e-9)
    with pytest.raises(MetricError):
        en(np.zeros((0, 0)))


def test_psnr_examples(oracles):
    a = u(oracles["met_a"])
    assert psnr(a, a) == math.inf
    assert psnr(np.zeros((4, 4)), np.ones((4, 4))) == pytest.approx(0.0)
    b = np.zeros((4, 4))
    b[:2] = 1 / 255  # half the pixels off by one level
    c = np.zeros((4, 4))
    c[2:] = 1 / 255
    assert psnr(b, c) == pytest.approx(float(oracles["met_psnr_mse1"]), abs=1e-9)
    assert psnr(a, u(oracles["met_b"])) == pytest.approx(float(oracles["met_psnr_ab"]), abs=1e-9)
    with pytest.raises(MetricError):
        psnr(a, a[:-1])


def test_ssim_examples(oracles):
    a, b = u(oracles["met_a"]), u(oracles["met_b"])
    assert ssim(a, a) == 1.0
    assert ssim(a, b) == pytest.approx(float(oracles["met_ssim_ab"]), abs=1e-9)
    board = u(oracles["met_board"])
    inv = ssim(board, 1 - board)
    assert inv < 0 and inv == pytest.approx(float(oracles["met_ssim_board_inv"]), abs=1e-9)
    s = ssim(np.full((16, 16), 100 / 255), np.full((16, 16), 130 / 255))
    C1 = (0.01 * 255) ** 2
    hand = (2 * 100 * 130 + C1) / (100 ** 2 + 130 ** 2 + C1)
    assert abs(s - hand) < 1e-6
    assert s == pytest.approx(float(oracles["met_ssim_const"]), abs=1e-9)
    with pytest.raises(MetricError):
        ssim(np.zeros((10, 20)), np.zeros((10, 20)))


def test_ssim_symmetric_and_bounded():
    rng = np.random.default_rng(0)
    for _ in range(5):
        a, b = rng.random((20, 24, 3)), rng.random((20, 24, 3))
        assert abs(ssim(a, b) - ssim(b, a)) < 1e-9
        assert -1 <= ssim(a, b) <= 1


def test_permutation_invariance():
    rng = np.random.default_rng(1)
    img = rng.random((12, 12, 3))
    flat = img.reshape(-1, 3)
    shuffled = flat[rng.permutation(len(flat))].reshape(img.shape)
    assert sd(shuffled) == pytest.approx(sd(img), abs=1e-12)
    assert en(shuffled) == en(img)


def test_psnr_monotone_in_noise():
    rng = np.random.default_rng(2)
    img = rng.uniform(0.2, 0.8, (32, 32))
    means = []
    for sigma in (2, 5, 10, 20):
        means.append(np.mean([psnr(img + rng.normal(0, sigma / 255, img.shape), img) for _ in range(20)]))
    assert all(x > y for x, y in zip(means, means[1:]))


def test_luminance_accepts_layouts():
    g = np.random.default_rng(3).random((5, 5))
    np.testing.assert_array_equal(luminance8(g), luminance8(g[..., None]))
    np.testing.assert_array_equal(luminance8(np.repeat(g[..., None], 3, -1)), luminance8(g))
    with pytest.raises(MetricError):
        luminance8(np.zeros((2, 2, 2)))


def test_report_csv(tmp_path):
    rng = np.random.default_rng(4)
    a, b = rng.random((16, 16, 3)), rng.random((16, 16, 3))
    rep = MetricReport()
    rep.add("b", a, b)
    row = rep.add("a", a, a)
    assert row["psnr"] == math.inf and row["ssim"] == 1.0
    rep.add("c", a)
    path = tmp_path / "m.csv"
    rep.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS)
    assert [l.split(",")[0] for l in lines[1:]] == ["a", "b", "c"]
    assert lines[1].split(",")[3] == "inf"
    assert all(len(v.split(".")[1]) == 4 for v in lines[2].split(",")[1:])
    back = read_csv(path)
    assert back["a"]["psnr"] == math.inf and math.isnan(back["c"]["ssim"])
    assert back["b"]["sd"] == pytest.approx(rep.rows["b"]["sd"], abs=5e-5)
    rep.merge("niqe", {"a": 3.5})
    assert rep.rows["a"]["niqe"] == 3.5
    with pytest.raises(KeyError):
        rep.merge("niqe", {"zzz": 1.0})
    assert set(rep.means()) >= {"sd", "en", "psnr", "ssim"}


def test_format_value():
    assert format_value(math.inf) == "inf"
    assert format_value(1.23456) == "1.2346"
    assert format_value(math.nan) == ""

import numpy as np
import pytest

from viis import diffusion as dif
from viis.checks import exact_sampler_variance, forward_stats, sampler_vs_recursion
from viis.nn.tensor import DimensionError, NumericError


def test_schedule_examples(oracles):
    s = dif.make_schedule(1, 0.5, 0.5)
    np.testing.assert_allclose(s.alpha, [0.5])
    np.testing.assert_allclose(s.alpha_bar, [0.5])
    s = dif.make_schedule(2, 0.1, 0.2)
    np.testing.assert_allclose(s.alpha_bar, [0.9, 0.72])
    d = dif.make_schedule()
    assert d.T == 200 and d.alpha_bar[-1] < 0.01
    assert d.alpha_bar[-1] == pytest.approx(float(oracles["dif_ab200"]), rel=1e-10)
    assert dif.make_schedule(50).alpha_bar[-1] == pytest.approx(float(oracles["dif_ab50"]), rel=1e-10)


@pytest.mark.parametrize("T", [1, 2, 20, 50, 200, 1000])
def test_schedule_invariants(T):
    s = dif.make_schedule(T)
    assert np.all((s.alpha > 0) & (s.alpha < 1))
    assert np.all(np.diff(s.alpha_bar) < 0)
    if T >= 20:
        assert s.alpha_bar[-1] < 0.05


def test_schedule_errors():
    for args in ((0,), (10, 0.0, 0.1), (10, 0.2, 0.1), (10, 0.1, 1.0)):
        with pytest.raises(dif.ScheduleError):
            dif.make_schedule(*args)


def test_forward_limits_and_inversion():
    s = dif.make_schedule()
    rng = np.random.default_rng(0)
    z0, eps = rng.standard_normal(1000), rng.standard_normal(1000)
    hyp = dif.NoiseSchedule(np.array([1.0 - 1e-16]), np.array([1.0]), np.array([1]))
    np.testing.assert_allclose(dif.forward_diffuse(z0, 1, eps, hyp), z0)
    near0 = dif.NoiseSchedule(np.array([1e-12]), np.array([1e-30]), np.array([1]))
    np.testing.assert_allclose(dif.forward_diffuse(z0, 1, eps, near0), eps, atol=1e-12)
    for t in (1, 57, 200):
        zt = dif.forward_diffuse(z0, t, eps, s)
        ab = s.alpha_bar_at(t)
        np.testing.assert_allclose((zt - np.sqrt(1 - ab) * eps) / np.sqrt(ab), z0, rtol=1e-5, atol=1e-8)
    with pytest.raises(IndexError):
        dif.forward_diffuse(z0, 201, eps, s)
    with pytest.raises(DimensionError):
        dif.forward_diffuse(z0, 1, eps[:10], s)


def test_forward_per_sample_steps():
    s = dif.make_schedule(10)
    z0, eps = np.ones((3, 2)), np.zeros((3, 2))
    out = dif.forward_diffuse(z0, np.array([1, 5, 10]), eps, s)
    np.testing.assert_allclose(out[:, 0], np.sqrt(s.alpha_bar[[0, 4, 9]]))


def test_forward_statistics():
    assert all(r.passed for r in forward_stats()), forward_stats()


def test_loss_examples():
    e = np.array([0.3, -1.2, 2.0])
    assert dif.loss(e, e) == 0
    assert dif.loss(np.zeros(3), e) == pytest.approx(np.mean(e ** 2))
    assert dif.loss(np.array([1.0, -1.0]), np.zeros(2)) == 1.0
    with pytest.raises(DimensionError):
        dif.loss(np.zeros(2), np.zeros(3))


def test_step_examples():
    hyp = dif.NoiseSchedule(np.array([0.5, 1.0]), np.array([0.5, 0.5]), np.array([1, 2]))
    z = np.array([0.7, -0.2])
    # alpha_t = 1: no change and no noise
    np.testing.assert_allclose(dif.ddpm_step(z, 2, np.ones(2), hyp, np.full(2, 9.0)), z)
    assert hyp.sigma(2) == 0.0
    s = dif.make_schedule(10)
    a = dif.ddpm_step(z, 1, np.ones(2), s, np.zeros(2))
    b = dif.ddpm_step(z, 1, np.ones(2), s, np.full(2, 5.0))
    np.testing.assert_array_equal(a, b)
    with pytest.raises(IndexError):
        dif.ddpm_step(z, 11, z, s, z)


@pytest.mark.parametrize("t", [2, 30, 120, 200])
def test_step_algebraic_identity(t):
    s = dif.make_schedule()
    rng = np.random.default_rng(t)
    z0, eps = rng.standard_normal(50), rng.standard_normal(50)
    zt = dif.forward_diffuse(z0, t, eps, s)
    mean = dif.ddpm_step(zt, t, eps, s, None)
    ab_prev, sig = s.alpha_bar_at(t - 1), s.sigma(t)
    expected = np.sqrt(ab_prev) * z0 + np.sqrt(1 - ab_prev - sig ** 2) * eps
    np.testing.assert_allclose(mean, expected, atol=1e-5)


def test_sample_examples():
    s = dif.make_schedule(1, 0.3, 0.3)
    out = dif.sample(lambda z, t, c: np.zeros_like(z), None, s, np.random.default_rng(0), (5,))
    z1 = np.random.default_rng(0).standard_normal(5)
    np.testing.assert_allclose(out, z1 / np.sqrt(0.7))
    s = dif.make_schedule(20)
    pred = lambda z, t, c: dif.analytic_gaussian_predictor(z, t, 1.0, s)  # noqa: E731
    a = dif.sample(pred, None, s, np.random.default_rng(3), (7,))
    b = dif.sample(pred, None, s, np.random.default_rng(3), (7,))
    assert a.tobytes() == b.tobytes()


def test_sample_reports_bad_step():
    s = dif.make_schedule(10)

    def pred(z, t, c):
        return np.full_like(z, np.nan) if t == 4 else np.zeros_like(z)
    with pytest.raises(NumericError, match="step 4"):
        dif.sample(pred, None, s, np.random.default_rng(0), (3,))


def test_respaced_sampler_passes_original_steps():
    s = dif.respace(dif.make_schedule(50), 10)
    seen = []
    dif.sample(lambda z, t, c: seen.append(t) or np.zeros_like(z), None, s, np.random.default_rng(0), (2,))
    assert seen[0] == 50 and seen[-1] == 1 and len(seen) == 10
    full = dif.make_schedule(50)
    np.testing.assert_allclose(s.alpha_bar[-1], full.alpha_bar[-1])


def test_predictor_examples():
    s = dif.make_schedule()
    z = np.random.default_rng(0).standard_normal(10)
    one = dif.NoiseSchedule(np.array([1.0 - 1e-16]), np.array([1.0]), np.array([1]))
    np.testing.assert_allclose(dif.analytic_gaussian_predictor(z, 1, 0.5, one), 0.0)
    ab = s.alpha_bar_at(80)
    np.testing.assert_allclose(dif.analytic_gaussian_predictor(z, 80, 1.0, s), np.sqrt(1 - ab) * z)


def test_predictor_is_loss_optimal():
    s = dif.make_schedule()
    rng = np.random.default_rng(1)
    for t in (10, 100, 190):
        z0 = rng.standard_normal(200_000) * 0.5
        eps = rng.standard_normal(z0.shape)
        zt = dif.forward_diffuse(z0, t, eps, s)
        pred = dif.analytic_gaussian_predictor(zt, t, 0.25, s)
        losses = {c: dif.loss(c * pred, eps) for c in np.linspace(0.8, 1.2, 9)}
        assert min(losses, key=losses.get) == pytest.approx(1.0)


def test_exact_recursion_matches_independent_oracle(oracles):
    for (T, s2), v in zip(oracles["dif_sampler_cases"], oracles["dif_sampler_var"]):
        assert exact_sampler_variance(s2, dif.make_schedule(int(T))) == pytest.approx(v, rel=1e-10)


def test_sampler_matches_finite_chain_variance():
    # Monte-Carlo sampler against the exact variance of this finite chain
    assert all(r.passed for r in sampler_vs_recursion())
    assert all(r.passed for r in sampler_vs_recursion(s2_values=(1.0,), T=50))

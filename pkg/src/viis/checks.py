"""Self-check suites: finite-difference gradients and diffusion statistics.

Both ``viis gradcheck`` / ``viis diffcheck`` and the test-suite run these.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import diffusion as dif
from .denoiser import DenoiserConfig, cast_params, denoise_forward, init_params
from .nn import ops
from .nn.gradcheck import (CheckResult, GradCase, numerical_gradient, relative_error)
from .nn.suites import OP_CASES
from .nn.tensor import Tape, Tensor
from .sadmr import DeformAttnParams, global_attend, out_project, project_qv, scam

_ATTN_FIELDS = ("wq", "bq", "wv", "bv", "off_w", "off_b", "att_w", "att_b", "wm", "bm", "out_w", "out_b")


def _random_attn(rng, channels=4, heads=2, points=4, with_keys=False) -> DeformAttnParams:
    """Attention parameters with every block (including zero-init ones) randomised.

    Offsets get a generic fractional spread so no sample lands exactly on a
    grid line, where bilinear interpolation has a kink.
    """
    p = DeformAttnParams.init(rng, channels, channels, heads, points, with_keys=with_keys)
    for name in _ATTN_FIELDS + (("wk", "bk") if with_keys else ()):
        t = getattr(p, name)
        t.data = rng.standard_normal(t.shape) * 0.5
    p.off_b.data = rng.uniform(-2.0, 2.0, p.off_b.shape)
    return p


def _attn_case(attend, with_keys):
    def build(rng):
        p = _random_attn(rng, with_keys=with_keys)
        fields = _ATTN_FIELDS + (("wk", "bk") if with_keys else ())
        arrays = [rng.standard_normal((1, 4, 5, 5)), rng.standard_normal((1, 4, 5, 5))]
        arrays += [getattr(p, f).data for f in fields]

        def fn(F, Fc, *ws):
            q = replace(p, **dict(zip(fields, ws)))
            return out_project(attend(F, Fc, q), q)
        return fn, arrays, None
    return build


def _project_qv(rng):
    p = _random_attn(rng)

    def fn(F, Fc, wq, bq, wv, bv):
        q = replace(p, wq=wq, bq=bq, wv=wv, bv=bv)
        Q, V = project_qv(F, Fc, q)
        return ops.concat([ops.reshape(Q, (-1,)), ops.reshape(V, (-1,))], axis=0)
    arrays = [rng.standard_normal((1, 4, 3, 3)), rng.standard_normal((1, 4, 3, 3)),
              p.wq.data, p.bq.data, p.wv.data, p.bv.data]
    return fn, arrays, None


MODEL_CASES = [
    GradCase("project_qv", 1e-5, _project_qv),
    GradCase("scam", 1e-4, _attn_case(scam, False)),
    GradCase("global_attention", 1e-4, _attn_case(global_attend, True)),
]

TINY_DENOISER = DenoiserConfig(image_size=8, channels=(4, 8), T=20, time_embed_dim=8)


@dataclass
class DenoiserGradCase:
    """Finite differences on randomly chosen scalar parameters of a whole denoiser."""

    name: str = "denoiser_end_to_end"
    tolerance: float = 1e-3
    config: DenoiserConfig = TINY_DENOISER
    n_params: int = 20
    batch: int = 2

    def _one(self, seed: int) -> float:
        rng = np.random.default_rng(seed)
        params = cast_params(init_params(self.config, rng), np.float64)
        named = params.named_tensors()
        for t in named.values():
            if not np.any(t.data):  # zero-init blocks would hide everything upstream
                t.data = rng.standard_normal(t.shape) * 0.3
        names = sorted(named)
        S = self.config.net_size
        z = rng.standard_normal((self.batch, 3, S, S))
        L_v = rng.uniform(-1, 1, (self.batch, 3, S, S))
        L_i = rng.uniform(-1, 1, (self.batch, 1, S, S))
        t = rng.integers(1, self.config.T + 1, self.batch)
        proj = rng.standard_normal((self.batch, 3, S, S))

        def scalar() -> float:
            return float((denoise_forward(z, t, L_v, L_i, params).data * proj).sum())

        with Tape() as tape:
            loss = ops.sum(ops.mul(denoise_forward(z, t, L_v, L_i, params), Tensor(proj)))
        grads = dict(zip(names, tape.gradient(loss, [named[k] for k in names])))

        sizes = np.array([named[k].data.size for k in names])
        picks = rng.choice(sizes.sum(), size=self.n_params, replace=False)
        bounds = np.cumsum(sizes)
        analytic, numeric = [], []
        for flat in picks:
            j = int(np.searchsorted(bounds, flat, side="right"))
            local = int(flat - (bounds[j] - sizes[j]))
            k = names[j]
            analytic.append(grads[k].reshape(-1)[local])
            numeric.append(numerical_gradient(scalar, named[k].data, indices=[local])[0])
        return relative_error(np.array(analytic), np.array(numeric))

    def run(self, seeds: Sequence[int] = (0, 1, 2, 3, 4)) -> CheckResult:
        worst = max(self._one(s) for s in seeds)
        return CheckResult(self.name, worst, self.tolerance, len(seeds))


ALL_GRAD_CASES = OP_CASES + MODEL_CASES + [DenoiserGradCase()]


def run_gradcheck(tol: float | None = None, seeds: Sequence[int] = (0, 1, 2, 3, 4),
                  cases=None) -> list[CheckResult]:
    """Run every gradient case; ``tol`` overrides each case's own tolerance."""
    out = []
    for case in cases or ALL_GRAD_CASES:
        r = case.run(seeds)
        if tol is not None:
            r = replace(r, tolerance=tol)
        out.append(r)
    return out


# --------------------------------------------------------------------------
# diffusion statistics

@dataclass
class StatResult:
    name: str
    value: float
    target: float
    tolerance: float  # absolute
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.value) and abs(self.value - self.target) <= self.tolerance)


def forward_stats(T: int = dif.REFERENCE_T, z0: float = 0.8, draws: int = 100_000,
                  seed: int = 0, rel: float = 0.01) -> list[StatResult]:
    """Empirical moments of ``z_t`` for ``t`` in ``{1, T/2, T}``.

    Variance is judged relative to ``1 - alpha_bar_t``.  The mean is judged
    on the scale of ``z_t`` itself, ``max(|mean|, std)``, because at ``t = T``
    the exact mean is far smaller than its own Monte-Carlo error.
    """
    sched = dif.make_schedule(T)
    rng = np.random.default_rng(seed)
    out = []
    for t in (1, T // 2, T):
        t0 = time.perf_counter()
        ab = sched.alpha_bar_at(t)
        eps = rng.standard_normal(draws)
        z = dif.forward_diffuse(np.full(draws, z0), t, eps, sched)
        mean, var = np.sqrt(ab) * z0, 1.0 - ab
        dt = time.perf_counter() - t0
        out.append(StatResult(f"mean t={t}", float(z.mean()), mean,
                              rel * max(abs(mean), np.sqrt(var)), dt))
        out.append(StatResult(f"var t={t}", float(z.var()), var, rel * var, dt))
    return out


def exact_sampler_variance(s2: float, sched: dif.NoiseSchedule) -> float:
    """Variance of ``z_0`` from the ancestral sampler with the analytic predictor.

    Every step is linear in ``z_t`` plus independent noise, so the variance
    follows a scalar recursion from ``Var z_T = 1``.
    """
    v = 1.0
    for t in range(sched.T, 0, -1):
        a, ab = sched.alpha[t - 1], sched.alpha_bar_at(t)
        c = np.sqrt(1.0 - ab) / (ab * s2 + 1.0 - ab)
        k = (1.0 - ((1.0 - a) / np.sqrt(1.0 - ab)) * c) / np.sqrt(a)
        v = k * k * v + sched.sigma(t) ** 2
    return float(v)


def sampler_oracle(s2_values=(0.25, 1.0, 4.0), T: int = dif.REFERENCE_T, n: int = 10_000,
                   seed: int = 0, mean_tol: float = 0.02, var_rel: float = 0.05) -> list[StatResult]:
    """Sample ``n`` scalars with the optimal predictor for data ``N(0, s2)``."""
    sched = dif.make_schedule(T)
    out = []
    for s2 in s2_values:
        t0 = time.perf_counter()
        rng = np.random.default_rng([seed, int(s2 * 1000)])
        z = dif.sample(lambda z, t, c: dif.analytic_gaussian_predictor(z, t, s2, sched),
                       None, sched, rng, (n,))
        dt = time.perf_counter() - t0
        out.append(StatResult(f"sampler mean s2={s2}", float(z.mean()), 0.0, mean_tol, dt))
        out.append(StatResult(f"sampler var s2={s2}", float(z.var()), s2, var_rel * s2, dt))
    return out


def sampler_vs_recursion(s2_values=(0.25, 1.0, 4.0), T: int = dif.REFERENCE_T, n: int = 10_000,
                         seed: int = 0, var_rel: float = 0.05) -> list[StatResult]:
    """Sampler variance against the exact finite-``T`` recursion instead of ``s2``."""
    sched = dif.make_schedule(T)
    out = []
    for s2 in s2_values:
        rng = np.random.default_rng([seed, int(s2 * 1000)])
        z = dif.sample(lambda z, t, c: dif.analytic_gaussian_predictor(z, t, s2, sched),
                       None, sched, rng, (n,))
        v = exact_sampler_variance(s2, sched)
        out.append(StatResult(f"sampler var s2={s2} vs recursion", float(z.var()), v, var_rel * v))
    return out


def format_stats(results: Sequence[StatResult]) -> str:
    lines = [f"{'check':<34} {'value':>12} {'target':>12} {'tol':>10}  status"]
    for r in results:
        lines.append(f"{r.name:<34} {r.value:12.6f} {r.target:12.6f} {r.tolerance:10.2e}  "
                     f"{'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)

"""
Gradient and diffusion self-checks
==================================

The same suites that ``viis gradcheck`` and ``viis diffcheck`` run, with a
look at why the Gaussian sampler lands slightly under the data variance.
"""

from viis import diffusion as dif
from viis.checks import (exact_sampler_variance, forward_stats, format_stats, run_gradcheck,
                         sampler_oracle, sampler_vs_recursion)
from viis.nn.gradcheck import format_table

# central differences at float64 for every op, the attention blocks and a
# whole (tiny) denoiser, five random instances each
print(format_table(run_gradcheck()))
print()

# closed-form forward process: z_t has mean sqrt(abar_t) z0, variance 1 - abar_t
print(format_stats(forward_stats()))
print()

# with the exact predictor for N(0, s2) data, the ancestral sampler is a linear
# Gaussian chain, so its output variance has a closed form
sched = dif.make_schedule(200)
for s2 in (0.25, 1.0, 4.0):
    v = exact_sampler_variance(s2, sched)
    print(f"s2={s2:<5} exact chain variance {v:.4f}  ({100 * (v / s2 - 1):+.1f}% vs s2)")
print()

# Monte-Carlo against s2 itself, then against the exact chain variance
print(format_stats(sampler_oracle()))
print()
print(format_stats(sampler_vs_recursion()))

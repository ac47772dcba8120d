"""
Quickstart: scenes, degradation, a tiny model, one restoration
===============================================================

Runs in well under a minute.  Writes a few images to ``demo_out/quickstart``
so the degraded input and the restoration can be looked at side by side.
"""

from pathlib import Path

import numpy as np

from viis.config import TrainConfig
from viis.data import synth_dataset, write_image
from viis.ispt import FIDELITY_PARAMS, ParamRanges, augment, sample_params
from viis.metrics import en, psnr, sd, ssim
from viis.training import restore, train

out = Path("demo_out/quickstart")
out.mkdir(parents=True, exist_ok=True)

# a paired visible/infrared scene: bright objects on a daytime background,
# the same objects hot in the infrared channel
scene = synth_dataset(1, 16, seed=0)[0]
print("visible", scene.visible.shape, "infrared", scene.infrared.shape)
print(f"clean   SD {sd(scene.visible):6.2f}  EN {en(scene.visible):.3f}")

# random ISPT draws darken, flatten and add sensor noise
rng = np.random.default_rng(1)
for i in range(3):
    p = sample_params(ParamRanges(), rng)
    print(f"draw {i}: gamma {p.gamma:.2f}  contrast {p.contrast:.2f}  "
          f"sigma {p.gauss_sigma:.1f}  lambda {p.poisson_lambda:.1f}")

# the fixed evaluation degradation
dark = augment(scene.visible, FIDELITY_PARAMS, np.random.default_rng(2))
print(f"degraded SD {sd(dark):6.2f}  EN {en(dark):.3f}  "
      f"PSNR {psnr(dark, scene.visible):.2f} dB  SSIM {ssim(dark, scene.visible):.3f}")

# a tiny model, 20 Adam steps; the loss starts near 1 because every output
# layer is zero-initialised
cfg = TrainConfig.preset("tiny")
state, log = train(cfg)
print("loss first/last:", round(float(log.losses[0]), 4), round(float(log.losses[-1]), 4))

# twenty steps do not make a useful restorer; this only shows the plumbing
restored = restore(state, dark, scene.infrared, seed=0)
for name, img in (("clean", scene.visible), ("degraded", dark), ("restored", restored)):
    write_image(img, out / f"{name}.ppm")
write_image(scene.infrared, out / "infrared.pgm")
print("images in", out)

"""
ISPT gallery
============

One clean scene pushed through every parameter-range preset, plus the fixed
evaluation degradation.  Images go to ``demo_out/ispt``.
"""

from pathlib import Path

import numpy as np

from viis.data import synth_dataset, write_image
from viis.ispt import FIDELITY_PARAMS, PRESETS, ParamRanges, augment, sample_params
from viis.metrics import en, psnr, sd

out = Path("demo_out/ispt")
out.mkdir(parents=True, exist_ok=True)
scene = synth_dataset(1, 64, seed=3)[0]
write_image(scene.visible, out / "clean.ppm")

print(f"{'preset':<18}{'gamma':>7}{'contrast':>10}{'SD':>8}{'EN':>7}{'PSNR':>8}")
for name in PRESETS:
    rng = np.random.default_rng(0)
    p = sample_params(ParamRanges.preset(name), rng)
    img = augment(scene.visible, p, rng)
    write_image(img, out / f"{name}.ppm")
    print(f"{name:<18}{p.gamma:7.2f}{p.contrast:10.2f}{sd(img):8.2f}{en(img):7.3f}"
          f"{psnr(img, scene.visible):8.2f}")

img = augment(scene.visible, FIDELITY_PARAMS, np.random.default_rng(0))
write_image(img, out / "fidelity.ppm")
print(f"{'fidelity':<18}{6.0:7.2f}{0.5:10.2f}{sd(img):8.2f}{en(img):7.3f}{psnr(img, scene.visible):8.2f}")

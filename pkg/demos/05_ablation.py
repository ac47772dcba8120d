"""
Conditioning ablation
=====================

Trains one small model per conditioning mode and tabulates SD, EN, PSNR,
SSIM and the final training loss.  The NIQE and BRISQUE columns stay empty
for externally computed scores.  At this scale the numbers are noisy, so
read them as a smoke test of the harness rather than a ranking.
"""

import sys
from pathlib import Path

from viis.config import TrainConfig
from viis.training import ABLATION_COLUMNS, run_ablation, write_ablation_csv

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 200
out = Path("demo_out/ablation")
out.mkdir(parents=True, exist_ok=True)

rows = run_ablation(TrainConfig.preset("tiny"), steps=steps, eval_scenes=8, sample_steps=10,
                    progress=lambda r: print("done", r["configuration"], file=sys.stderr))
write_ablation_csv(rows, out / "ablation.csv")
print("  ".join(f"{c:>16}" for c in ABLATION_COLUMNS if c not in ("niqe", "brisque")))
for r in rows:
    print(f"{r['configuration']:>16}  " + "  ".join(f"{r[c]:16.4f}" for c in ("sd", "en", "psnr", "ssim", "final_loss")))

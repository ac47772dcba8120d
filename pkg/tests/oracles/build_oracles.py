"""Regenerate the frozen reference values in ``tests/data``.

Every value here comes from an implementation other than ``viis`` (torch,
scikit-image, scipy, mpmath closed forms), except the augmentation golden
image, which is by design a snapshot of this package's own output.

    python tests/oracles/build_oracles.py
"""

from pathlib import Path

import mpmath as mp
import numpy as np
import torch
import torch.nn.functional as F
from scipy import stats
from skimage.metrics import peak_signal_noise_ratio, structural_similarity

DATA = Path(__file__).resolve().parent.parent / "data"
torch.set_default_dtype(torch.float64)


def conv_refs(out, rng):
    for tag, shape, stride in (("s1", (2, 3, 6, 6), 1), ("s2", (2, 3, 7, 7), 2)):
        x = torch.tensor(rng.standard_normal(shape), requires_grad=True)
        w = torch.tensor(rng.standard_normal((4, 3, 3, 3)), requires_grad=True)
        b = torch.tensor(rng.standard_normal(4), requires_grad=True)
        y = F.conv2d(x, w, b, stride=stride, padding=1)
        proj = torch.tensor(rng.standard_normal(tuple(y.shape)))
        (y * proj).sum().backward()
        for k, v in dict(x=x, w=w, b=b, proj=proj).items():
            out[f"conv_{tag}_{k}"] = v.detach().numpy()
        out[f"conv_{tag}_y"] = y.detach().numpy()
        out[f"conv_{tag}_gx"], out[f"conv_{tag}_gw"], out[f"conv_{tag}_gb"] = \
            x.grad.numpy(), w.grad.numpy(), b.grad.numpy()


def bilinear_refs(out, rng):
    C, H, W = 3, 4, 5
    fmap = torch.tensor(rng.standard_normal((1, C, H, W)), requires_grad=True)
    yx = rng.uniform(-1.5, 5.5, size=(40, 2))
    coords = torch.tensor(yx, requires_grad=True)
    # align_corners grid: -1 / +1 are the centres of the first / last pixel
    gx = 2 * coords[:, 1] / (W - 1) - 1
    gy = 2 * coords[:, 0] / (H - 1) - 1
    grid = torch.stack([gx, gy], dim=-1)[None, None]
    s = F.grid_sample(fmap, grid, mode="bilinear", padding_mode="zeros", align_corners=True)
    s = s[0, :, 0, :].T  # P x C
    proj = torch.tensor(rng.standard_normal(tuple(s.shape)))
    (s * proj).sum().backward()
    out.update(bil_map=fmap.detach().numpy()[0], bil_coords=yx, bil_out=s.detach().numpy(),
               bil_proj=proj.numpy(), bil_gmap=fmap.grad.numpy()[0], bil_gcoords=coords.grad.numpy())


def misc_refs(out, rng):
    x = rng.standard_normal((2, 4, 3, 3))
    sc, sh = rng.standard_normal(4), rng.standard_normal(4)
    out.update(gn_x=x, gn_scale=sc, gn_shift=sh,
               gn_y=F.group_norm(torch.tensor(x), 2, torch.tensor(sc), torch.tensor(sh), eps=1e-5).numpy())
    z = rng.standard_normal((3, 5)) * 3
    out.update(sm_x=z, sm_y=torch.softmax(torch.tensor(z), -1).numpy(), silu_y=F.silu(torch.tensor(z)).numpy())
    r = rng.standard_normal((2, 3, 4, 6))
    out.update(pool_x=r, pool_y=F.avg_pool2d(torch.tensor(r), 2).numpy(),
               up_y=F.interpolate(torch.tensor(r), scale_factor=2, mode="nearest").numpy())


def metric_refs(out, rng):
    # reference implementations work on the same 8-bit luminance the package measures
    a = rng.integers(0, 256, size=(24, 28)).astype(np.float64)
    b = np.clip(a + rng.normal(0, 20, a.shape), 0, 255).round()
    board = np.kron((np.indices((6, 6)).sum(0) % 2) * 255.0, np.ones((4, 4)))
    ssim_kw = dict(gaussian_weights=True, sigma=1.5, use_sample_covariance=False, data_range=255)
    out.update(
        met_a=a, met_b=b, met_board=board,
        met_ssim_ab=structural_similarity(a, b, **ssim_kw),
        met_ssim_board_inv=structural_similarity(board, 255 - board, **ssim_kw),
        met_psnr_ab=peak_signal_noise_ratio(a, b, data_range=255),
        met_en_a=stats.entropy(np.bincount(a.astype(int).ravel(), minlength=256), base=2),
        met_sd_a=np.std(a),
        # discrete uniform on 0..255: variance (n^2 - 1) / 12
        met_sd_ramp=float(mp.sqrt((mp.mpf(256) ** 2 - 1) / 12)),
        met_psnr_mse1=float(20 * mp.log10(255)),
    )
    mu1, mu2 = mp.mpf(100), mp.mpf(130)
    c1 = (mp.mpf("0.01") * 255) ** 2
    out["met_ssim_const"] = float((2 * mu1 * mu2 + c1) / (mu1 ** 2 + mu2 ** 2 + c1))


def diffusion_refs(out):
    mp.mp.dps = 40

    def sched(T, b0, b1):
        betas = [mp.mpf(b0) + (mp.mpf(b1) - mp.mpf(b0)) * i / max(T - 1, 1) for i in range(T)]
        alpha = [1 - b for b in betas]
        ab, acc = [], mp.mpf(1)
        for a in alpha:
            acc *= a
            ab.append(acc)
        return alpha, ab

    def sampler_var(T, s2):
        alpha, ab = sched(T, mp.mpf("5e-4") * 200 / T, mp.mpf("0.1") * 200 / T)
        v = mp.mpf(1)
        for t in range(T, 0, -1):
            a, abt = alpha[t - 1], ab[t - 1]
            abp = ab[t - 2] if t > 1 else mp.mpf(1)
            c = mp.sqrt(1 - abt) / (abt * s2 + 1 - abt)
            k = (1 - (1 - a) / mp.sqrt(1 - abt) * c) / mp.sqrt(a)
            sig2 = (1 - abp) / (1 - abt) * (1 - a) if t > 1 else 0
            v = k * k * v + sig2
        return float(v)

    out["dif_ab200"] = float(sched(200, "5e-4", "0.1")[1][-1])
    out["dif_ab50"] = float(sched(50, "2e-3", "0.4")[1][-1])
    out["dif_sampler_cases"] = np.array([[200, 0.25], [200, 1.0], [200, 4.0], [50, 1.0]])
    out["dif_sampler_var"] = np.array([sampler_var(int(T), mp.mpf(s2)) for T, s2 in out["dif_sampler_cases"]])


def golden_augment():
    from viis.data import synth_scene
    from viis.ispt import FIDELITY_PARAMS, augment
    ref = synth_scene(np.random.default_rng(2024), 32).visible
    np.save(DATA / "augment_reference.npy", ref)
    np.save(DATA / "augment_golden.npy", augment(ref, FIDELITY_PARAMS, np.random.default_rng(7)))


def main():
    rng = np.random.default_rng(12345)
    out = {}
    conv_refs(out, rng)
    bilinear_refs(out, rng)
    misc_refs(out, rng)
    metric_refs(out, rng)
    diffusion_refs(out)
    DATA.mkdir(exist_ok=True)
    np.savez(DATA / "oracles.npz", **out)
    golden_augment()
    print(f"wrote {len(out)} reference arrays to {DATA}")


if __name__ == "__main__":
    main()

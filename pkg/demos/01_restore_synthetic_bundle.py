"""
Restore a synthetic fiber-bundle acquisition end to end.

A phantom is sampled on a hexagonal core lattice, smeared by core-to-core
coupling, blurred and corrupted with pixel noise.  The three estimators then
undo the coupling, and the GP fills the pixels between cores.

    python3 demos/01_restore_synthetic_bundle.py --size 96 --out demo_out
"""

import argparse
import time
from pathlib import Path

import numpy as np

from oemdeconv import KernelParams, build_coupling_kernel, build_covariance
from oemdeconv import io as fio
from oemdeconv.admm import best_of_sweep, lambda_sweep
from oemdeconv.calib import fit_covariance_params
from oemdeconv.gp import gp_interpolate
from oemdeconv.mcmc import GibbsConfig, run_gibbs
from oemdeconv.synth import SimConfig, hex_lattice, reference_phantom, rmse, simulate_system_image, subsample_reference
from oemdeconv.vb import run_vb

parser = argparse.ArgumentParser()
parser.add_argument("--size", type=int, default=96)
parser.add_argument("--sigma2-h", type=float, default=10.0)
parser.add_argument("--n-mc", type=int, default=600)
parser.add_argument("--out", default="demo_out")
args = parser.parse_args()
out = Path(args.out)
out.mkdir(parents=True, exist_ok=True)

# ground truth lives on the cores only
ref = reference_phantom(args.size)
cores = hex_lattice(args.size, args.size)
x_true = subsample_reference(ref, cores)
print(f"{cores.n_cores} cores on a {args.size}x{args.size} grid "
      f"({100 * cores.n_cores / args.size**2:.1f}% of pixels)")

g, y = simulate_system_image(x_true, cores, SimConfig(sigma2_h=args.sigma2_h, sigma2_n=10.0, rng_seed=1))
fio.write_preview_pgm(out / "observed.pgm", g)

# the prior's range and smoothness come from the clean core values, as a
# training image would provide them
prior = fit_covariance_params([x_true], cores)
print(f"prior: length scale {prior.length_scale:g} px, exponent {prior.exponent:g}")
Delta = build_covariance(cores, prior)
H = build_coupling_kernel(cores, KernelParams.gaussian(args.sigma2_h))

print(f"\nRMSE of the raw core values: {rmse(x_true, y):.2f}")
estimates = {}

t0 = time.perf_counter()
res, _ = run_vb(y, H, Delta)
estimates["vb"] = (res, time.perf_counter() - t0)

t0 = time.perf_counter()
res = best_of_sweep(lambda_sweep(y, H, Delta, x_true))
estimates["admm"] = (res, time.perf_counter() - t0)

t0 = time.perf_counter()
res, chain = run_gibbs(y, H, Delta, config=GibbsConfig(n_mc=args.n_mc, n_bi=args.n_mc // 3, rng_seed=1))
estimates["mcmc"] = (res, time.perf_counter() - t0)

for name, (res, secs) in estimates.items():
    print(f"  {name:5s} RMSE {rmse(x_true, res.x):7.2f}   {secs:6.2f} s")

# MCMC also gives per-core credible intervals for free
lo, hi = np.percentile(chain.x_samples, [2.5, 97.5], axis=0)
print(f"\n95% credible intervals cover {np.mean((x_true >= lo) & (x_true <= hi)):.0%} of the true cores")

# fill the cladding with the GP, using VB's prior scale
vb = estimates["vb"][0]
img = gp_interpolate(cores, vb.x, vb.gamma2, prior, grid=(args.size, args.size))
fio.write_preview_pgm(out / "restored.pgm", img.mean)
fio.write_preview_pgm(out / "uncertainty.pgm", np.sqrt(img.variance))
print(f"pixel RMSE of the restored image vs the phantom: {rmse(ref.ravel(), img.mean.ravel()):.2f}")
print(f"previews written to {out}/")

"""
Calibration: find the cores in a background frame, then learn the prior.

A background frame of a bundle shows every core as a bright spot.  We make
one synthetically, detect the cores, check them against the generator, and
fit the spatial prior (length scale and exponent) on two training images.
"""

import numpy as np
from scipy.spatial import cKDTree

from oemdeconv.calib import detect_cores, fit_covariance_params
from oemdeconv.synth import hex_lattice, reference_phantom, subsample_reference

size = 64
truth = hex_lattice(size, size, jitter=0.25, rng_seed=7)
rows, cols = np.mgrid[0:size, 0:size]
background = np.zeros((size, size))
for x, y in truth.positions:
    background += np.exp(-((cols - x) ** 2 + (rows - y) ** 2) / 2.0)
background += np.random.default_rng(0).normal(0, 0.01, background.shape)

found = detect_cores(background)
dist, _ = cKDTree(truth.positions).query(found.positions)
print(f"generated {truth.n_cores} cores, detected {found.n_cores}")
print(f"position error: RMS {np.sqrt(np.mean(dist**2)):.3f} px, worst {dist.max():.3f} px")

# two training images seen through the detected cores; the per-image
# maximum-likelihood parameters are averaged
phantom = reference_phantom(size)
training = [subsample_reference(phantom, found), subsample_reference(phantom.T, found)]
params, info = fit_covariance_params(training, found, return_table=True)
for k, (ell, kappa) in enumerate(info["per_field"]):
    print(f"training image {k}: length scale {ell:g}, exponent {kappa:g}")
print(f"prior used for deconvolution: length scale {params.length_scale:g}, exponent {params.exponent:g}")

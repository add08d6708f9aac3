"""
Command-line interface: ``oemdeconv {simulate,deconvolve,interpolate,calibrate,sweep}``.

Every command writes a ``manifest.json`` holding the merged parameters and
the seed.  Passing that manifest back through ``--config`` reruns the
command with the same settings; flags given on the command line win over
config values.

Exit codes: 0 success, 2 usage or input error, 3 numerical or runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import secrets
import sys
from math import ceil
from pathlib import Path

import numpy as np

from . import __version__
from . import io as fio
from .admm import AdmmConfig, best_of_sweep, lambda_sweep, run_admm
from .calib import NoCoresFound, detect_cores, fit_covariance_params
from .gp import gp_interpolate, uncertainty_to_confidence
from .mcmc import GibbsConfig, run_gibbs
from .model import (
    CORE_SPACING,
    CoreMap,
    CovarianceParams,
    Hyperparams,
    KernelParams,
    NumericalError,
    ParameterError,
    build_coupling_kernel,
    build_covariance,
)
from .solvers import METHODS, make_solver, select_by_discrepancy
from .synth import (
    SimConfig,
    hex_lattice,
    reference_phantom,
    simulate_system_image,
    subsample_reference,
    sweep_experiment,
    write_results_csv,
)
from .vb import VbConfig, run_vb

log = logging.getLogger("oemdeconv")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
DEFAULT_LENGTH_SCALE = 20.0
DEFAULT_EXPONENT = 1.25
# keys that describe how a run was invoked rather than what it computes
_NOT_RECORDED = {"config", "func", "log_level"}


class UsageError(Exception):
    pass


def _float_list(text):
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from exc


def _int_list(text):
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of integers: {text!r}") from exc


# ---------------------------------------------------------------- shared bits

def _add_image_source(p):
    g = p.add_argument_group("reference image")
    g.add_argument("--ref", help="reference image (binary PGM, or raw f64 with .json sidecar)")
    g.add_argument("--phantom", type=int, metavar="SIZE",
                   help="use the built-in synthetic scene of SIZE x SIZE pixels instead of --ref")


def _add_core_source(p, lattice=True):
    g = p.add_argument_group("core map")
    g.add_argument("--cores", help="core CSV with header x,y (0-based pixel coordinates)")
    if lattice:
        g.add_argument("--hex-lattice", action="store_true",
                       help="generate a hexagonal lattice over the image instead of --cores")
        g.add_argument("--spacing", type=float, default=CORE_SPACING, help="lattice spacing in pixels")
    g.add_argument("--width", type=int, help="image width (default: from the image or the core extent)")
    g.add_argument("--height", type=int, help="image height (default: from the image or the core extent)")


def _add_prior(p):
    g = p.add_argument_group("spatial prior")
    g.add_argument("--length-scale", type=float, help=f"l (default {DEFAULT_LENGTH_SCALE})")
    g.add_argument("--exponent", type=float, help=f"kappa in (0, 2] (default {DEFAULT_EXPONENT})")
    g.add_argument("--prior", help="JSON with length_scale and exponent, e.g. from `calibrate`")
    g.add_argument("--jitter", type=float, default=1e-8, help="diagonal jitter added to the covariance")


def _add_kernel(p):
    g = p.add_argument_group("cross-coupling kernel")
    g.add_argument("--sigma2-h", type=float, help="Gaussian kernel width (overrides alpha/beta)")
    g.add_argument("--alpha-h", type=float, default=4.0, help="generalized-Gaussian scale in pixels")
    g.add_argument("--beta-h", type=float, default=0.8, help="generalized-Gaussian shape")
    g.add_argument("--truncation-radius", type=float, default=6 * CORE_SPACING,
                   help="coupling is zero beyond this distance; 0 disables truncation")
    g.add_argument("--row-normalize", choices=("auto", "yes", "no"), default="auto",
                   help="make every row of H sum to one; auto = yes for alpha/beta, no for --sigma2-h")


def _add_solver_opts(p):
    g = p.add_argument_group("solver settings")
    g.add_argument("--n-mc", type=int, default=1500, help="MCMC iterations")
    g.add_argument("--n-bi", type=int, default=500, help="MCMC burn-in iterations")
    g.add_argument("--x-sampler", choices=("coordinate_gibbs", "exact_hmc"), default="coordinate_gibbs")
    g.add_argument("--max-iters", type=int, help="iteration cap for VB (default 500) or ADMM (default 2000)")
    g.add_argument("--lambda", dest="lam", type=float, default=1.0, help="ADMM regularization")
    g.add_argument("--mu", type=float, default=1.0, help="ADMM penalty")
    g.add_argument("--lambda-grid", type=_float_list, help="ADMM sweep values (default: 5 log-spaced)")
    h = p.add_argument_group("hyperparameters")
    for name, default in (("alpha", 10.0), ("alpha-o", 10.0), ("beta-o", 0.1), ("eta", 1e-3), ("nu", 1e-3)):
        h.add_argument(f"--{name}", type=float, default=default)


def _hyper(a) -> Hyperparams:
    return Hyperparams(alpha=a.alpha, alpha_o=a.alpha_o, beta_o=a.beta_o, eta=a.eta, nu=a.nu)


def _kernel_params(a) -> KernelParams:
    # the synthetic protocol uses the raw Gaussian kernel, real data the normalized one
    gaussian = a.sigma2_h is not None
    normalize = {"yes": True, "no": False}.get(a.row_normalize, not gaussian)
    if gaussian:
        return KernelParams.gaussian(a.sigma2_h, truncation_radius=a.truncation_radius,
                                     row_normalize=normalize)
    return KernelParams(a.alpha_h, a.beta_h, a.truncation_radius, normalize)


def _prior_params(a) -> CovarianceParams:
    ell, kap = DEFAULT_LENGTH_SCALE, DEFAULT_EXPONENT
    if a.prior:
        data = _load_json(a.prior)
        ell = float(data.get("length_scale", ell))
        kap = float(data.get("exponent", kap))
    if a.length_scale is not None:
        ell = a.length_scale
    if a.exponent is not None:
        kap = a.exponent
    return CovarianceParams(ell, kap)


def _load_json(path):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read JSON {path}: {exc}") from exc


def _reference(a) -> np.ndarray:
    if a.phantom:
        return reference_phantom(a.phantom)
    if not a.ref:
        raise UsageError("give --ref or --phantom")
    return fio.read_image(a.ref)


def _core_map(a, shape=None) -> CoreMap:
    if shape is not None:
        h, w = shape
    else:
        h, w = a.height, a.width
    if getattr(a, "hex_lattice", False):
        if h is None or w is None:
            raise UsageError("--hex-lattice needs an image or --width/--height")
        return hex_lattice(w, h, spacing=a.spacing)
    if not a.cores:
        raise UsageError("give --cores or --hex-lattice" if hasattr(a, "hex_lattice") else "give --cores")
    if w is None or h is None:
        pts = fio.read_points_csv(a.cores)
        w = w or int(ceil(pts[:, 0].max())) + 1
        h = h or int(ceil(pts[:, 1].max())) + 1
    return fio.read_cores_csv(a.cores, w, h)


def _out_dir(a) -> Path:
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, a, outputs: list[str]) -> None:
    params = {k: v for k, v in sorted(vars(a).items()) if k not in _NOT_RECORDED}
    manifest = {
        "command": a.command,
        "version": __version__,
        "params": params,
        "seed": params.get("seed"),
        "outputs": {name: fio.sha256_file(out / name) for name in outputs},
    }
    fio.write_json(out / "manifest.json", manifest)


# ---------------------------------------------------------------- commands

def cmd_simulate(a) -> int:
    ref = _reference(a)
    cores = _core_map(a, ref.shape)
    cfg = SimConfig(sigma2_h=a.sigma2_h, sigma2_c=a.sigma2_c, sigma2_n=a.sigma2_n,
                    rng_seed=a.seed, extraction=a.extraction, blur_norm=a.blur_norm,
                    truncation_radius=a.truncation_radius)
    x_true = subsample_reference(ref, cores)
    g, y = simulate_system_image(x_true, cores, cfg)
    out = _out_dir(a)
    fio.write_raw(out / "g.f64", g)
    fio.write_preview_pgm(out / "g.pgm", g)
    fio.write_vector_csv(out / "y.csv", y, "y")
    fio.write_vector_csv(out / "x_true.csv", x_true, "x_true")
    fio.write_cores_csv(out / "cores.csv", cores)
    _write_manifest(out, a, ["g.f64", "g.f64.json", "g.pgm", "y.csv", "x_true.csv", "cores.csv"])
    log.info("simulated %d cores -> %s", cores.n_cores, out)
    return EXIT_OK


def cmd_deconvolve(a) -> int:
    if a.method not in METHODS:
        raise UsageError(f"unknown method {a.method!r}; choose from {', '.join(METHODS)}")
    y = fio.read_vector_csv(a.y)
    cores = _core_map(a)
    if y.size != cores.n_cores:
        raise UsageError(f"{a.y} has {y.size} values but the core map has {cores.n_cores} cores")
    x_true = fio.read_vector_csv(a.x_true) if a.x_true else None
    H = build_coupling_kernel(cores, _kernel_params(a))
    Delta = build_covariance(cores, _prior_params(a), a.jitter)
    hyper = _hyper(a)
    estimates = {}
    diagnostics = {"method": a.method}
    if a.method == "vb":
        cfg = VbConfig(max_iters=a.max_iters or 500)
        res, _ = run_vb(y, H, Delta, hyper, cfg)
        estimates = {"sigma2": res.sigma2, "gamma2": res.gamma2, "beta": res.beta}
    elif a.method == "mcmc":
        cfg = GibbsConfig(n_mc=a.n_mc, n_bi=a.n_bi, rng_seed=a.seed, x_sampler=a.x_sampler)
        res, _ = run_gibbs(y, H, Delta, hyper, cfg)
        estimates = {"sigma2": res.sigma2, "gamma2": res.gamma2, "beta": res.beta}
    else:
        cfg = AdmmConfig(lam=a.lam, mu=a.mu, max_iters=a.max_iters or 2000,
                         lambda_grid=tuple(a.lambda_grid) if a.lambda_grid else None)
        if a.lambda_sweep:
            rows = lambda_sweep(y, H, Delta, x_true, cfg)
            res = best_of_sweep(rows) if x_true is not None else select_by_discrepancy(rows, y, H, hyper)
            diagnostics["lambda_grid"] = [r["lam"] for r in rows]
            diagnostics["sweep_wall_time_s"] = sum(r["result"].wall_time_s for r in rows)
            if x_true is not None:
                diagnostics["sweep_rmse"] = [r["rmse"] for r in rows]
        else:
            res, _ = run_admm(y, H, Delta, cfg)
        # ADMM fixes only the ratio lambda = sigma2 / gamma2
        estimates = {"lambda": res.diagnostics["lam"]}
    diagnostics.update(iterations=res.n_iter, converged=bool(res.converged), wall_time_s=res.wall_time_s)
    for k, v in res.diagnostics.items():
        if isinstance(v, (int, float, bool, str)):
            diagnostics.setdefault(k, v)
    out = _out_dir(a)
    fio.write_vector_csv(out / "x_hat.csv", res.x, "x_hat")
    fio.write_json(out / "estimates.json", estimates)
    fio.write_json(out / "diagnostics.json", diagnostics)
    _write_manifest(out, a, ["x_hat.csv", "estimates.json", "diagnostics.json"])
    return EXIT_OK


def cmd_interpolate(a) -> int:
    gamma2 = a.gamma2
    if gamma2 is None and a.estimates:
        gamma2 = _load_json(a.estimates).get("gamma2")
    if gamma2 is None:
        raise UsageError("gamma2 is required: give --gamma2 or --estimates with a gamma2 entry")
    x_hat = fio.read_vector_csv(a.x_hat)
    cores = _core_map(a)
    if x_hat.size != cores.n_cores:
        raise UsageError(f"{a.x_hat} has {x_hat.size} values but the core map has {cores.n_cores} cores")
    params = _prior_params(a)
    out = _out_dir(a)
    outputs = []
    if a.points:
        res = gp_interpolate(cores, x_hat, gamma2, params, points=fio.read_points_csv(a.points),
                             jitter=a.jitter)
        fio.write_vector_csv(out / "mean.csv", res.mean, "mean")
        fio.write_vector_csv(out / "variance.csv", res.variance, "variance")
        outputs += ["mean.csv", "variance.csv"]
        if a.confidence:
            fio.write_vector_csv(out / "confidence.csv",
                                 uncertainty_to_confidence(res.variance, a.confidence), "half_width")
            outputs.append("confidence.csv")
    else:
        res = gp_interpolate(cores, x_hat, gamma2, params, jitter=a.jitter)
        images = {"mean": res.mean, "variance": res.variance}
        if a.confidence:
            images["confidence"] = uncertainty_to_confidence(res.variance, a.confidence)
        for name, img in images.items():
            fio.write_raw(out / f"{name}.f64", img)
            fio.write_preview_pgm(out / f"{name}.pgm", img)
            outputs += [f"{name}.f64", f"{name}.f64.json", f"{name}.pgm"]
    if res.variance.max(initial=0.0) > 1.0 / gamma2 + 1e-10:
        log.error("variance exceeds the prior bound 1/gamma2")
        return EXIT_RUNTIME
    _write_manifest(out, a, outputs)
    return EXIT_OK


def cmd_calibrate(a) -> int:
    background = fio.read_image(a.background)
    try:
        cores = detect_cores(background, a.min_separation, a.intensity_floor)
    except NoCoresFound as exc:
        log.error("%s", exc)
        return EXIT_RUNTIME
    out = _out_dir(a)
    fio.write_cores_csv(out / "cores.csv", cores)
    outputs = ["cores.csv"]
    if a.train:
        fields = []
        for path in a.train:
            img = fio.read_image(path)
            if img.shape != background.shape:
                raise UsageError(f"{path}: training image size differs from the background")
            fields.append(subsample_reference(img, cores))
        params, info = fit_covariance_params(fields, cores, a.length_grid, a.exponent_grid,
                                             return_table=True)
        fio.write_json(out / "prior.json", {
            "length_scale": params.length_scale, "exponent": params.exponent,
            "per_image": [list(p) for p in info["per_field"]], "n_cores": cores.n_cores,
        })
        outputs.append("prior.json")
    _write_manifest(out, a, outputs)
    log.info("detected %d cores", cores.n_cores)
    return EXIT_OK


def cmd_sweep(a) -> int:
    if not a.sigma2_h or not a.sigma2_n or not a.solvers or not a.seeds:
        raise UsageError("sweep grids must be non-empty")
    ref = _reference(a)
    cores = _core_map(a, ref.shape)
    Delta = build_covariance(cores, _prior_params(a), a.jitter)
    hyper = _hyper(a)
    solvers = [
        make_solver(name, Delta, hyper,
                    vb_config=VbConfig(max_iters=a.max_iters or 500),
                    admm_config=AdmmConfig(mu=a.mu, max_iters=a.max_iters or 2000,
                                           lambda_grid=tuple(a.lambda_grid) if a.lambda_grid else None),
                    gibbs_config=GibbsConfig(n_mc=a.n_mc, n_bi=a.n_bi, rng_seed=a.seed,
                                             x_sampler=a.x_sampler))
        for name in a.solvers
    ]
    base = SimConfig(sigma2_h=1.0, sigma2_c=a.sigma2_c, extraction=a.extraction,
                     blur_norm=a.blur_norm, truncation_radius=a.truncation_radius)
    seeds = [a.seed + k for k in a.seeds] if a.seed is not None else a.seeds
    rows = sweep_experiment(ref, cores, a.sigma2_h, a.sigma2_n, solvers, seeds,
                            deconv_sigma2_h=a.deconv_sigma2_h, base_config=base, jobs=a.jobs)
    out = _out_dir(a)
    write_results_csv(rows, out / "results.csv")
    _write_manifest(out, a, ["results.csv"])
    if not any(r["status"] == "ok" for r in rows):
        log.error("every sweep cell failed")
        return EXIT_RUNTIME
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="oemdeconv", description=__doc__.split("\n\n")[0].strip())
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of option values (a manifest.json works too)")
    common.add_argument("--seed", type=int, help="base seed; generated and recorded when omitted")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="render a synthetic system image")
    _add_image_source(s)
    _add_core_source(s)
    s.add_argument("--sigma2-h", type=float, required=True, help="Gaussian coupling width")
    s.add_argument("--sigma2-c", type=float, default=2.0, help="proximal blur variance")
    s.add_argument("--sigma2-n", type=float, default=0.0, help="pixel noise variance")
    s.add_argument("--extraction", choices=("core_lsq", "core_max", "core_value"), default="core_lsq")
    s.add_argument("--blur-norm", choices=("peak", "sum"), default="peak")
    s.add_argument("--truncation-radius", type=float, default=6 * CORE_SPACING)
    s.set_defaults(func=cmd_simulate)

    d = sub.add_parser("deconvolve", parents=[common], help="estimate core intensities")
    d.add_argument("--y", required=True, help="observed core intensities (CSV)")
    d.add_argument("--method", required=True, help="one of: " + ", ".join(METHODS))
    d.add_argument("--x-true", help="ground truth, used only to pick the best lambda in a sweep")
    d.add_argument("--lambda-sweep", action="store_true", help="run ADMM over the lambda grid")
    _add_core_source(d, lattice=False)
    _add_kernel(d)
    _add_prior(d)
    _add_solver_opts(d)
    d.set_defaults(func=cmd_deconvolve)

    i = sub.add_parser("interpolate", parents=[common], help="GP interpolation onto the pixel grid")
    i.add_argument("--x-hat", required=True, help="estimated core intensities (CSV)")
    i.add_argument("--gamma2", type=float, help="prior scale gamma2")
    i.add_argument("--estimates", help="estimates.json from `deconvolve` (supplies gamma2)")
    i.add_argument("--points", help="CSV of x,y targets instead of the full grid")
    i.add_argument("--confidence", type=float, help="also write confidence half-widths at this level")
    _add_core_source(i, lattice=False)
    _add_prior(i)
    i.set_defaults(func=cmd_interpolate)

    c = sub.add_parser("calibrate", parents=[common], help="detect cores and fit the spatial prior")
    c.add_argument("--background", required=True, help="background (calibration) image")
    c.add_argument("--train", nargs="*", default=[], help="training images for the (l, kappa) fit")
    c.add_argument("--min-separation", type=float, default=2.0)
    c.add_argument("--intensity-floor", type=float, default=0.2)
    c.add_argument("--length-grid", type=_float_list, default=[float(v) for v in range(1, 21)])
    c.add_argument("--exponent-grid", type=_float_list, default=[0.25 * k for k in range(1, 9)])
    c.set_defaults(func=cmd_calibrate)

    w = sub.add_parser("sweep", parents=[common], help="simulate/deconvolve a parameter grid")
    _add_image_source(w)
    _add_core_source(w)
    _add_prior(w)
    _add_solver_opts(w)
    w.add_argument("--sigma2-h", type=_float_list, required=True, help="simulation widths, e.g. 5,10,15,20")
    w.add_argument("--sigma2-n", type=_float_list, default=[10.0], help="noise variances")
    w.add_argument("--deconv-sigma2-h", type=_float_list,
                   help="deconvolution widths (mismatch mode); default: the simulation width")
    w.add_argument("--solvers", type=lambda t: [v for v in t.split(",") if v], default=["vb", "admm"])
    w.add_argument("--seeds", type=_int_list, default=[0], help="seed offsets, e.g. 0,1,2")
    w.add_argument("--sigma2-c", type=float, default=2.0)
    w.add_argument("--extraction", choices=("core_lsq", "core_max", "core_value"), default="core_lsq")
    w.add_argument("--blur-norm", choices=("peak", "sum"), default="peak")
    w.add_argument("--truncation-radius", type=float, default=6 * CORE_SPACING)
    w.add_argument("--jobs", type=int, default=1, help="worker threads")
    w.set_defaults(func=cmd_sweep)
    p.commands = {"simulate": s, "deconvolve": d, "interpolate": i, "calibrate": c, "sweep": w}
    return p


def _config_values(path) -> dict:
    data = _load_json(path)
    if not isinstance(data, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    if "params" in data and isinstance(data["params"], dict):
        data = data["params"]
    return {k.replace("-", "_"): v for k, v in data.items() if k not in ("command",)}


def parse_args(argv):
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config:
        values = _config_values(known.config)
        command = next((t for t in argv if t in parser.commands), None)
        if command is None:
            raise UsageError("give the command name before --config")
        sub = parser.commands[command]
        dests = {a.dest for a in sub._actions}
        unknown = sorted(set(values) - dests)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        sub.set_defaults(**{k: v for k, v in values.items() if k not in _NOT_RECORDED})
        # required options may come from the config file
        for action in sub._actions:
            if action.dest in values:
                action.required = False
    args = parser.parse_args(argv)
    if args.seed is None:
        args.seed = secrets.randbits(31)
    return args


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"oemdeconv: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # argparse usage errors and --help
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ParameterError, fio.FormatError, OSError) as exc:
        print(f"oemdeconv: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, np.linalg.LinAlgError, RuntimeError, FloatingPointError) as exc:
        print(f"oemdeconv: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

"""Command-line interface.

Commands: phantom, simulate, reconstruct, backproject, adjoint-test,
geodesics. Every command resolves its configuration as CLI flag > config
file > default, writes a flat key=value manifest next to its main output
before heavy work starts, and emits the CSV formats owned by the library
modules.

Exit codes: 0 success, 1 usage or malformed input, 2 numeric failure,
3 tolerance breach (adjoint-test only).
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import __version__
from .adjoint import BackprojectionConfig, backproject_field
from .field import (FieldFormatError, GridSpec, PhantomParams, ScalarField,
                    disk_node_mask, phantom_constant_curvature, phantom_peaks,
                    phantom_ring_peaks, read_field, write_field)
from .geodesic import StepControl
from .recon import (ReconConfig, TooManyInvalidRays, outer_loop,
                    write_iteration_log)
from .transform import (DegenerateScaleError, SinogramFormatError, SplitMix64,
                        TraceFormatError, add_noise, build_ray_set,
                        forward_linearized, forward_nonlinear, read_sinogram,
                        trace_ray_set, write_sinogram, write_traces)

USAGE_ERROR = 1
NUMERIC_ERROR = 2
TOLERANCE_ERROR = 3


class _Parser(argparse.ArgumentParser):
    """argparse that exits with the documented usage code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(USAGE_ERROR)


def _read_config_file(path):
    """Flat key=value lines; '#' comments; unknown keys are ignored by the
    consumers so a manifest can be fed back in as a config."""
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            key, val = line.split("=", 1)
            out[key.strip()] = val.strip()
    return out


class _Resolver:
    """CLI flag > config file > default, with manifest bookkeeping."""

    def __init__(self, args):
        self.file_cfg = _read_config_file(args.config) if getattr(args, "config", None) else {}
        self.args = args
        self.resolved = {}

    def get(self, key, default, cast=float):
        cli_val = getattr(self.args, key, None)
        if cli_val is not None:
            val = cli_val
        elif key in self.file_cfg:
            raw = self.file_cfg[key]
            val = (raw.lower() in ("1", "true", "yes")) if cast is bool else cast(raw)
        else:
            val = default
        self.resolved[key] = val
        return val


def _write_manifest(path, command, resolved, paths):
    with open(path, "w") as fh:
        fh.write(f"command={command}\n")
        fh.write(f"version={__version__}\n")
        for k, v in paths.items():
            fh.write(f"{k}={v}\n")
        for k in sorted(resolved):
            v = resolved[k]
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = "%.17g" % v
            fh.write(f"{k}={v}\n")


def _manifest_path(out_path):
    return str(out_path) + ".manifest"


# ---------------------------------------------------------------------------
# commands

def _phantom_params(r):
    base = PhantomParams()
    centers = tuple(
        (r.get(f"q{k}x", base.centers[k - 1][0]), r.get(f"q{k}y", base.centers[k - 1][1]))
        for k in (1, 2, 3)
    )
    radii = tuple(r.get(f"r{k}", base.radii[k - 1]) for k in (1, 2, 3))
    amplitudes = tuple(r.get(f"theta{k}", base.amplitudes[k - 1]) for k in (1, 2, 3))
    return PhantomParams(
        centers=centers,
        radii=radii,
        amplitudes=amplitudes,
        d=r.get("d", base.d),
        R=r.get("big_r", base.R),
        ring_amplitude=r.get("ring_amplitude", base.ring_amplitude),
        ring_radius=r.get("ring_radius", base.ring_radius),
        literal_bumps=r.get("literal_bumps", False, bool),
    )


def cmd_phantom(args) -> int:
    r = _Resolver(args)
    q = int(r.get("grid_q", 10, int))
    params = _phantom_params(r)
    _write_manifest(_manifest_path(args.out_c), "phantom", r.resolved,
                    {"variant": args.variant, "out_c": args.out_c, "out_n": args.out_n})
    builder = {
        "peaks": phantom_peaks,
        "curvature": phantom_constant_curvature,
        "ring": phantom_ring_peaks,
    }[args.variant]
    c, n = builder(params, GridSpec(q))
    write_field(args.out_c, c)
    write_field(args.out_n, n)
    mask = disk_node_mask(c.spec)
    print(f"phantom {args.variant}: c in [{c.values[mask].min():.6g}, "
          f"{c.values[mask].max():.6g}], n in [{n.values[mask].min():.6g}, "
          f"{n.values[mask].max():.6g}]")
    return 0


def cmd_simulate(args) -> int:
    r = _Resolver(args)
    nx = int(r.get("n_sources", 40, int))
    nxi = int(r.get("n_dirs", 40, int))
    noise = r.get("noise", 0.0)
    seed = int(r.get("seed", 0, int))
    ctrl = StepControl(rho=r.get("rho", 0.9), h0=r.get("h0", 0.025),
                       eps=r.get("eps", 1e-6), dl_max=r.get("dl_max", 0.01))
    _write_manifest(_manifest_path(args.out), "simulate", r.resolved,
                    {"in_field": args.field, "out_sino": args.out})
    n = read_field(args.field)
    rays = build_ray_set(nx, nxi)
    sino, _ = forward_nonlinear(n, rays, ctrl)
    if noise > 0:
        sino = add_noise(sino, noise, seed)
    write_sinogram(args.out, sino)
    print(f"simulate: {int(np.count_nonzero(sino.valid))} valid rays of "
          f"{rays.n_rays}, tof in [{sino.valid_values().min():.6g}, "
          f"{sino.valid_values().max():.6g}]")
    return 0


def cmd_reconstruct(args) -> int:
    r = _Resolver(args)
    sino = read_sinogram(args.sino)
    cfg = ReconConfig(
        alpha=r.get("alpha", 0.9),
        p=r.get("p", 2.0),
        mu=r.get("mu", 0.01),
        inner_steps=int(r.get("inner_steps", 1, int)),
        outer_steps=int(r.get("outer_steps", 20, int)),
        n_sources=sino.ray_set.n_sources,
        n_dirs=sino.ray_set.n_dirs,
        n_theta=int(r.get("n_theta", 60, int)),
        grid_q=int(r.get("grid_q", 10, int)),
        eps=r.get("eps", 1e-6),
        rho=r.get("rho", 0.9),
        h0=r.get("h0", 0.025),
        dl_max=r.get("dl_max", 0.01),
        seed=int(r.get("seed", 0, int)),
        line_search=r.get("line_search", False, bool),
        weight_mode=r.get("weight_mode", "euclidean", str),
    )
    r.resolved["n_sources"] = cfg.n_sources
    r.resolved["n_dirs"] = cfg.n_dirs
    _write_manifest(_manifest_path(args.out_n), "reconstruct", r.resolved,
                    {"in_sino": args.sino, "out_n": args.out_n,
                     "out_c": args.out_c, "out_log": args.log})
    n_best, _, logbook = outer_loop(None, sino, cfg)
    write_iteration_log(args.log, logbook)
    write_field(args.out_n, n_best)
    if np.any(n_best.values <= 0.0):
        print("reconstruct: iterate lost positivity, no speed field written",
              file=sys.stderr)
        return NUMERIC_ERROR
    c_best = ScalarField(n_best.spec, 1.0 / n_best.values)
    write_field(args.out_c, c_best)
    ks = logbook.k_star
    print(f"reconstruct: stopped at k*={ks}, J={logbook.J[ks]:.9g} "
          f"(J0={logbook.J[0]:.9g}, {len(logbook)} evaluations)")
    return 0


def cmd_backproject(args) -> int:
    r = _Resolver(args)
    q = int(r.get("grid_q", 10, int))
    ntheta = int(r.get("n_theta", 60, int))
    wmode = r.get("weight_mode", "euclidean", str)
    ctrl = StepControl(rho=r.get("rho", 0.9), h0=r.get("h0", 0.025),
                       eps=r.get("eps", 1e-6), dl_max=r.get("dl_max", 0.01))
    _write_manifest(_manifest_path(args.out), "backproject", r.resolved,
                    {"in_sino": args.sino, "in_field": args.field,
                     "out_field": args.out})
    omega = read_sinogram(args.sino)
    gen = read_field(args.field)
    gset = trace_ray_set(gen, omega.ray_set, ctrl)
    bp = BackprojectionConfig(n_theta=ntheta, weight_mode=wmode)
    out = backproject_field(omega, gset, GridSpec(q), bp)
    write_field(args.out, out)
    mask = disk_node_mask(out.spec)
    print(f"backproject: values in [{out.values[mask].min():.6g}, "
          f"{out.values[mask].max():.6g}] over {int(mask.sum())} nodes")
    return 0


def cmd_adjoint_test(args) -> int:
    r = _Resolver(args)
    nx = int(r.get("n_sources", 60, int))
    nxi = int(r.get("n_dirs", 60, int))
    ntheta = int(r.get("n_theta", 60, int))
    q = int(r.get("grid_q", 10, int))
    seed = int(r.get("seed", 1, int))
    tol = r.get("tol", 0.05)
    _write_manifest(_manifest_path(args.report), "adjoint-test", r.resolved,
                    {"out_report": args.report})
    lines = []
    discrepancies = []
    for scale in (1, 2):
        d = _adjoint_discrepancy(nx * scale, nxi * scale, ntheta * scale, q, seed)
        discrepancies.append(d)
        lines.append(f"N_x={nx * scale} N_xi={nxi * scale} N_theta={ntheta * scale}: "
                     f"discrepancy {d:.6g}")
    ok = discrepancies[0] <= tol and discrepancies[1] <= discrepancies[0] + 1e-12
    lines.append(f"tolerance {tol:.6g}: {'pass' if ok else 'FAIL'}")
    report = "\n".join(lines)
    print(report)
    with open(args.report, "w") as fh:
        fh.write(report + "\n")
    return 0 if ok else TOLERANCE_ERROR


def _random_disk_field(spec, rng, lo=0.0, hi=1.0):
    vals = np.zeros((spec.size, spec.size))
    mask = disk_node_mask(spec)
    draws = np.array([rng.next_double() for _ in range(int(mask.sum()))])
    vals[mask] = lo + (hi - lo) * draws
    return ScalarField(spec, vals, outside_value=0.0)


def _adjoint_discrepancy(nx, nxi, ntheta, q, seed):
    """Duality gap of the transform/backprojection pair in the quadrature
    inner products: per-ray measure 4*pi^2/(N_x*N_xi) on valid rays, node
    measure h^2 on disk nodes."""
    spec = GridSpec(q)
    ones = ScalarField(spec, np.ones((spec.size, spec.size)))
    rays = build_ray_set(nx, nxi)
    gset = trace_ray_set(ones, rays)
    rng = SplitMix64(seed)
    f = _random_disk_field(spec, rng)
    g = _random_disk_field(spec, rng)
    omega = forward_linearized(g, gset)
    rf = forward_linearized(f, gset)
    mask = gset.valid & omega.valid
    ray_measure = 4.0 * np.pi ** 2 / (nx * nxi)
    lhs = float(np.sum(rf.tof[mask] * omega.tof[mask])) * ray_measure
    bp = BackprojectionConfig(n_theta=ntheta)
    rstar = backproject_field(omega, gset, spec, bp)
    dmask = disk_node_mask(spec)
    rhs = float(np.sum(f.values[dmask] * rstar.values[dmask])) * spec.h ** 2
    nrm = (np.sqrt(float(np.sum(rf.tof[mask] ** 2)) * ray_measure)
           * np.sqrt(float(np.sum(omega.tof[mask] ** 2)) * ray_measure))
    return abs(lhs - rhs) / nrm


def cmd_geodesics(args) -> int:
    r = _Resolver(args)
    nx = int(r.get("n_sources", 40, int))
    nxi = int(r.get("n_dirs", 40, int))
    ctrl = StepControl(rho=r.get("rho", 0.9), h0=r.get("h0", 0.025),
                       eps=r.get("eps", 1e-6), dl_max=r.get("dl_max", 0.01))
    _write_manifest(_manifest_path(args.out), "geodesics", r.resolved,
                    {"in_field": args.field, "out_traces": args.out})
    n = read_field(args.field)
    rays = build_ray_set(nx, nxi)
    gset = trace_ray_set(n, rays, ctrl)
    write_traces(args.out, gset)
    print(f"geodesics: wrote {gset.n_stored} traces")
    return 0


# ---------------------------------------------------------------------------
# wiring

def _add_common(p):
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--workers", type=int, default=None,
                   help="advisory worker count; array math is vectorized")


def _add_integrator(p):
    p.add_argument("--eps", type=float, help="integrator error bound per step")
    p.add_argument("--rho", type=float, help="step-size safety factor")
    p.add_argument("--h0", type=float, help="initial integrator step")
    p.add_argument("--dl-max", dest="dl_max", type=float,
                   help="max sample spacing along traces")


def build_parser() -> _Parser:
    parser = _Parser(prog="disktomo",
                     description="travel-time tomography on the unit disk")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="write a test speed field c and its reciprocal n")
    p.add_argument("variant", choices=["peaks", "curvature", "ring"])
    p.add_argument("--out-c", required=True)
    p.add_argument("--out-n", required=True)
    p.add_argument("--grid-q", dest="grid_q", type=int)
    for name in ("q1x", "q1y", "q2x", "q2y", "q3x", "q3y", "theta1", "theta2",
                 "theta3", "r1", "r2", "r3", "d", "ring-amplitude",
                 "ring-radius"):
        p.add_argument(f"--{name}", dest=name.replace("-", "_"), type=float)
    p.add_argument("--R", dest="big_r", type=float)
    p.add_argument("--literal-bumps", dest="literal_bumps", action="store_const",
                   const=True)
    _add_common(p)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("simulate", help="time-of-flight data for a speed field")
    p.add_argument("--field", required=True, help="n field CSV")
    p.add_argument("--out", required=True, help="sinogram CSV path")
    p.add_argument("--nx", dest="n_sources", type=int)
    p.add_argument("--nxi", dest="n_dirs", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--seed", type=int)
    _add_integrator(p)
    _add_common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("reconstruct", help="recover n from a sinogram")
    p.add_argument("--sino", required=True)
    p.add_argument("--out-n", required=True)
    p.add_argument("--out-c", required=True)
    p.add_argument("--log", required=True, help="iteration log CSV path")
    p.add_argument("--alpha", type=float)
    p.add_argument("--p", dest="p", type=float)
    p.add_argument("--mu", type=float)
    p.add_argument("--inner-steps", dest="inner_steps", type=int)
    p.add_argument("--outer-steps", dest="outer_steps", type=int)
    p.add_argument("--ntheta", dest="n_theta", type=int)
    p.add_argument("--grid-q", dest="grid_q", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--line-search", dest="line_search", action="store_const",
                   const=True)
    p.add_argument("--weight-mode", dest="weight_mode",
                   choices=["euclidean", "unit"])
    _add_integrator(p)
    _add_common(p)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("backproject", help="backproject a sinogram to a field")
    p.add_argument("--sino", required=True)
    p.add_argument("--field", required=True,
                   help="generator field CSV for the geodesic set")
    p.add_argument("--out", required=True)
    p.add_argument("--grid-q", dest="grid_q", type=int)
    p.add_argument("--ntheta", dest="n_theta", type=int)
    p.add_argument("--weight-mode", dest="weight_mode",
                   choices=["euclidean", "unit"])
    _add_integrator(p)
    _add_common(p)
    p.set_defaults(func=cmd_backproject)

    p = sub.add_parser("adjoint-test",
                       help="transform/backprojection duality check")
    p.add_argument("--report", required=True, help="report text path")
    p.add_argument("--nx", dest="n_sources", type=int)
    p.add_argument("--nxi", dest="n_dirs", type=int)
    p.add_argument("--ntheta", dest="n_theta", type=int)
    p.add_argument("--grid-q", dest="grid_q", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--tol", type=float)
    _add_common(p)
    p.set_defaults(func=cmd_adjoint_test)

    p = sub.add_parser("geodesics", help="dump traced geodesics as CSV")
    p.add_argument("--field", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--nx", dest="n_sources", type=int)
    p.add_argument("--nxi", dest="n_dirs", type=int)
    _add_integrator(p)
    _add_common(p)
    p.set_defaults(func=cmd_geodesics)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (FieldFormatError, SinogramFormatError, TraceFormatError) as e:
        print(f"disktomo: malformed input: {e}", file=sys.stderr)
        return USAGE_ERROR
    except FileNotFoundError as e:
        print(f"disktomo: {e}", file=sys.stderr)
        return USAGE_ERROR
    except DegenerateScaleError as e:
        print(f"disktomo: numeric failure: {e}", file=sys.stderr)
        return NUMERIC_ERROR
    except TooManyInvalidRays as e:
        print(f"disktomo: numeric failure: {e}", file=sys.stderr)
        return NUMERIC_ERROR
    except ValueError as e:
        print(f"disktomo: {e}", file=sys.stderr)
        return USAGE_ERROR


if __name__ == "__main__":
    sys.exit(main(argv=None))

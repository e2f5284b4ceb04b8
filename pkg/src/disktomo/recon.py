"""Tikhonov minimization by adaptive re-linearization.

The data term compares the linearized transform over the current iterate's
own frozen geodesics with the measurement; the penalty anchors the field at
1 with an l^p norm over the grid nodes inside the closed disk. Each outer
iteration freezes geodesics, runs a fixed number of inner descent steps
(Landweber for p > 1, soft thresholding for p = 1), and logs the functional;
the returned iterate is the one with the smallest logged value.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np

from .adjoint import BackprojectionConfig, backproject_field
from .field import GridSpec, ScalarField, disk_node_mask
from .geodesic import StepControl
from .transform import (GeodesicSet, RaySet, Sinogram, build_ray_set,
                        forward_linearized, trace_ray_set)

__all__ = [
    "ReconConfig",
    "IterationLog",
    "ZeroResidual",
    "TooManyInvalidRays",
    "LogFormatError",
    "tikhonov_value",
    "landweber_step",
    "soft_threshold_step",
    "outer_loop",
    "select_stopping_index",
    "write_iteration_log",
    "read_iteration_log",
]

log = logging.getLogger(__name__)


class ZeroResidual(Exception):
    """The data residual vanished exactly; descent has nothing to do."""


class TooManyInvalidRays(RuntimeError):
    """More than half of the inward rays failed to integrate."""


class LogFormatError(ValueError):
    """Iteration log CSV violates the k,J,data_term,penalty_term,wall_ms schema."""


@dataclass(frozen=True)
class ReconConfig:
    """Solver and discretization parameters.

    alpha, p, mu: penalty weight, penalty exponent (1 or >1), step size.
    inner_steps and outer_steps bound the descent; grid_q sets h = 1/Q.
    line_search replaces the fixed mu by backtracking halving that never
    accepts an increase of the frozen-geodesic functional.
    """

    alpha: float = 0.9
    p: float = 2.0
    mu: float = 0.01
    inner_steps: int = 1
    outer_steps: int = 20
    n_sources: int = 40
    n_dirs: int = 40
    n_theta: int = 60
    grid_q: int = 10
    eps: float = 1.0e-6
    rho: float = 0.9
    h0: float = 0.025
    dl_max: float = 0.01
    seed: int = 0
    line_search: bool = False
    weight_mode: str = "euclidean"

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.p < 1:
            raise ValueError("p must be 1 or larger")
        if self.mu <= 0:
            raise ValueError("mu must be positive")
        if self.inner_steps < 1 or self.outer_steps < 1:
            raise ValueError("iteration counts must be positive")
        if self.grid_q < 1:
            raise ValueError("grid_q must be a positive integer")

    def grid_spec(self) -> GridSpec:
        return GridSpec(self.grid_q)

    def ray_set(self) -> RaySet:
        return build_ray_set(self.n_sources, self.n_dirs)

    def step_control(self) -> StepControl:
        return StepControl(rho=self.rho, h0=self.h0, eps=self.eps,
                           dl_max=self.dl_max)

    def bp_config(self) -> BackprojectionConfig:
        return BackprojectionConfig(n_theta=self.n_theta,
                                    weight_mode=self.weight_mode)


class IterationLog:
    """Per-outer-iteration record of the functional and its two terms."""

    def __init__(self):
        self.k = []
        self.J = []
        self.data_term = []
        self.penalty_term = []
        self.wall_ms = []

    def append(self, k, J, data, pen, wall_ms):
        self.k.append(int(k))
        self.J.append(float(J))
        self.data_term.append(float(data))
        self.penalty_term.append(float(pen))
        self.wall_ms.append(float(wall_ms))

    def __len__(self):
        return len(self.k)

    @property
    def k_star(self) -> int:
        return select_stopping_index(self)


def select_stopping_index(log_: IterationLog) -> int:
    """Index of the smallest logged functional value; ties go to the
    earliest iteration."""
    if len(log_) == 0:
        raise ValueError("empty iteration log")
    return int(np.argmin(log_.J))


def _residual(f: ScalarField, geodesics: GeodesicSet, u_meas: Sinogram):
    """Per-ray residual R_a f - u on the jointly valid rays."""
    pred = forward_linearized(f, geodesics)
    mask = geodesics.valid & u_meas.valid
    res = np.where(mask, pred.tof - u_meas.tof, 0.0)
    return Sinogram(geodesics.ray_set, res, mask)


def tikhonov_value(f: ScalarField, geodesics: GeodesicSet, u_meas: Sinogram,
                   alpha: float, p: float):
    """Functional value and its (data, penalty) split:
    1/2 sum_valid (R_a f - u)^2 + (alpha/p) sum_{|node|<=1} |f - 1|^p."""
    res = _residual(f, geodesics, u_meas)
    data = 0.5 * float(np.sum(res.valid_values() ** 2))
    mask = disk_node_mask(f.spec)
    dev = np.abs(f.values[mask] - 1.0)
    pen = alpha / p * float(np.sum(dev ** p))
    return data + pen, data, pen


def landweber_step(n: ScalarField, geodesics: GeodesicSet, u_meas: Sinogram,
                   alpha: float, p: float, mu: float,
                   bp: BackprojectionConfig = BackprojectionConfig()) -> ScalarField:
    """One descent step n - mu * (R* r + alpha ||n-1||_p^{p-2} (n-1)) on the
    disk nodes, for p > 1. Raises ZeroResidual on an exact data fit."""
    if p <= 1:
        raise ValueError("landweber_step requires p > 1")
    res = _residual(n, geodesics, u_meas)
    if np.linalg.norm(res.valid_values()) == 0.0:
        raise ZeroResidual
    rstar = backproject_field(res, geodesics, n.spec, bp)
    mask = disk_node_mask(n.spec)
    dev = n.values - 1.0
    pnorm = float(np.sum(np.abs(dev[mask]) ** p)) ** (1.0 / p)
    factor = pnorm ** (p - 2.0) if pnorm > 0.0 else 0.0
    delta = rstar.values + alpha * factor * dev
    vals = n.values.copy()
    vals[mask] = n.values[mask] - mu * delta[mask]
    return ScalarField(n.spec, vals, outside_value=n.outside_value)


def soft_threshold_step(n: ScalarField, geodesics: GeodesicSet,
                        u_meas: Sinogram, alpha: float, mu: float,
                        bp: BackprojectionConfig = BackprojectionConfig()) -> ScalarField:
    """p = 1 descent: gradient step on the data term, then shrink n - 1 by
    mu*alpha, pointwise on the disk nodes."""
    res = _residual(n, geodesics, u_meas)
    rstar = backproject_field(res, geodesics, n.spec, bp)
    mask = disk_node_mask(n.spec)
    g = n.values - mu * rstar.values - 1.0
    lam = mu * alpha
    shrunk = np.sign(g) * np.maximum(np.abs(g) - lam, 0.0)
    vals = n.values.copy()
    vals[mask] = 1.0 + shrunk[mask]
    return ScalarField(n.spec, vals, outside_value=n.outside_value)


def _inner_steps(n, gset, u_meas, cfg: ReconConfig):
    """Run cfg.inner_steps descent steps against the frozen geodesics."""
    bp = cfg.bp_config()
    for _ in range(cfg.inner_steps):
        if cfg.p == 1.0:
            candidate = soft_threshold_step(n, gset, u_meas, cfg.alpha, cfg.mu, bp)
            if cfg.line_search:
                n = _backtrack(n, candidate, gset, u_meas, cfg, bp, soft=True)
            else:
                n = candidate
        else:
            try:
                candidate = landweber_step(n, gset, u_meas, cfg.alpha, cfg.p,
                                           cfg.mu, bp)
            except ZeroResidual:
                break
            if cfg.line_search:
                n = _backtrack(n, candidate, gset, u_meas, cfg, bp, soft=False)
            else:
                n = candidate
    return n


_BACKTRACK_MAX = 20


def _backtrack(n, candidate, gset, u_meas, cfg, bp, soft):
    """Halve mu until the frozen-geodesic functional does not increase; a
    failed search keeps the current iterate."""
    J0, _, _ = tikhonov_value(n, gset, u_meas, cfg.alpha, cfg.p)
    mu = cfg.mu
    for _ in range(_BACKTRACK_MAX):
        J1, _, _ = tikhonov_value(candidate, gset, u_meas, cfg.alpha, cfg.p)
        if J1 <= J0:
            return candidate
        mu *= 0.5
        if soft:
            candidate = soft_threshold_step(n, gset, u_meas, cfg.alpha, mu, bp)
        else:
            candidate = landweber_step(n, gset, u_meas, cfg.alpha, cfg.p, mu, bp)
    return n


def outer_loop(n0, u_meas: Sinogram, cfg: ReconConfig):
    """Adaptive re-linearization: freeze geodesics at the current iterate,
    take inner descent steps, repeat; afterwards return the iterate with the
    smallest logged functional together with its geodesic set.

    n0 = None starts from the constant field 1. Nodes outside the closed
    disk are pinned to 1. Logged entry k holds the functional of iterate k
    over its own geodesics, for k = 0 .. outer_steps.
    """
    spec = cfg.grid_spec()
    if n0 is None:
        n = ScalarField(spec, np.ones((spec.size, spec.size)))
    else:
        if n0.spec != spec:
            raise ValueError("initial field grid does not match the config")
        if np.any(n0.values <= 0.0):
            raise ValueError("initial field must be positive")
        vals = n0.values.copy()
        vals[~disk_node_mask(spec)] = 1.0
        n = ScalarField(spec, vals)
    rays = cfg.ray_set()
    ctrl = cfg.step_control()
    n_inward = int(np.count_nonzero(rays.valid))

    logbook = IterationLog()
    iterates = []
    for k in range(cfg.outer_steps + 1):
        t0 = time.perf_counter()
        gset = trace_ray_set(n, rays, ctrl)
        lost = n_inward - gset.n_stored
        if lost > 0:
            log.warning("iteration %d: %d of %d rays failed to integrate",
                        k, lost, n_inward)
        if gset.n_stored * 2 < n_inward:
            raise TooManyInvalidRays(
                f"{lost} of {n_inward} rays failed at outer iteration {k}")
        J, data, pen = tikhonov_value(n, gset, u_meas, cfg.alpha, cfg.p)
        iterates.append(n)
        if k == cfg.outer_steps:
            logbook.append(k, J, data, pen,
                           (time.perf_counter() - t0) * 1e3)
            break
        n = _inner_steps(n, gset, u_meas, cfg)
        logbook.append(k, J, data, pen, (time.perf_counter() - t0) * 1e3)

    k_star = select_stopping_index(logbook)
    n_best = iterates[k_star]
    gset_best = trace_ray_set(n_best, rays, ctrl)
    return n_best, gset_best, logbook


# ---------------------------------------------------------------------------
# iteration log CSV

_LOG_HEADER = "k,J,data_term,penalty_term,wall_ms"


def write_iteration_log(path, log_: IterationLog) -> None:
    with open(path, "w") as fh:
        fh.write(_LOG_HEADER + "\n")
        for k in range(len(log_)):
            fh.write("%d,%.17g,%.17g,%.17g,%.17g\n"
                     % (log_.k[k], log_.J[k], log_.data_term[k],
                        log_.penalty_term[k], log_.wall_ms[k]))


def read_iteration_log(path) -> IterationLog:
    with open(path) as fh:
        header = fh.readline().strip()
        if header != _LOG_HEADER:
            raise LogFormatError(f"bad header: {header!r}")
        out = IterationLog()
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 5:
                raise LogFormatError(f"line {lineno}: expected 5 fields")
            try:
                k = int(parts[0])
                vals = [float(p) for p in parts[1:]]
            except ValueError as e:
                raise LogFormatError(f"line {lineno}: {e}") from None
            if not all(np.isfinite(vals)):
                raise LogFormatError(f"line {lineno}: non-finite values")
            out.append(k, *vals)
    if out.k != list(range(len(out))):
        raise LogFormatError("iteration indices must be 0..K in order")
    return out

"""Approximate backprojection of sinogram values through a frozen geodesic set.

For each direction theta_m on a uniform angular grid, the geodesic through a
point y that "looks like" the straight line y + span(theta_m) is located by
projecting y along theta_m to the boundary, taking the nearest source, the
source's trace closest to y, and bracketing y between neighboring-source
traces of the same tangent index. The bracketing pair's sinogram values are
interpolated linearly in the signed offsets tau measured along
perp(theta_m), and the theta-sum is a trapezoid rule carrying the Euclidean
change-of-variables weight 1/sqrt(1 - <y, perp(theta_m)>^2).

backproject is the scalar reference; backproject_many is the vectorized
equivalent used by the solver and must agree with it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .field import GridSpec, ScalarField, disk_node_mask
from .geodesic import GeodesicTrace, perp
from .transform import GeodesicSet, Sinogram

__all__ = [
    "BackprojectionConfig",
    "NoValidTraceError",
    "trace_line_offset",
    "nearest_tangent_index",
    "backproject",
    "backproject_many",
    "backproject_field",
]

# point-to-trace distance below which y is treated as lying on the trace
EXACT_HIT = 1e-9
# offset denominators are clamped at s^2 = 1 - WEIGHT_CLAMP
WEIGHT_CLAMP = 1e-6


class NoValidTraceError(ValueError):
    """A source contributed no usable traces."""


@dataclass(frozen=True)
class BackprojectionConfig:
    """n_theta: angular resolution of the theta-sum; weight_mode: 'euclidean'
    applies 1/sqrt(1-s^2), 'unit' omits it; boundary_fade: only 'zero'
    (unbracketed points fade to zero)."""

    n_theta: int = 60
    weight_mode: str = "euclidean"
    boundary_fade: str = "zero"

    def __post_init__(self):
        if self.n_theta < 4:
            raise ValueError("n_theta must be >= 4")
        if self.weight_mode not in ("euclidean", "unit"):
            raise ValueError(f"unknown weight_mode {self.weight_mode!r}")
        if self.boundary_fade != "zero":
            raise ValueError(f"unknown boundary_fade {self.boundary_fade!r}")


def trace_line_offset(trace: GeodesicTrace, y, theta_perp):
    """Signed tau with the trace meeting y + tau*theta_perp, or None.

    Zeros of <x(t) - y, normal> are located on the sample polyline (segment
    sign changes and exact vertex hits); among several crossings the one
    with smallest |tau| wins, first-in-trace-order on ties.
    """
    y = np.asarray(y, dtype=float)
    tp = np.asarray(theta_perp, dtype=float)
    normal = np.array([tp[1], -tp[0]])
    prj = trace.x @ normal
    prp = trace.x @ tp
    tau, found = _crossing_tau(prj[None, :], prp[None, :],
                               np.array([y @ normal]), np.array([y @ tp]))
    return float(tau[0]) if found[0] else None


def nearest_tangent_index(traces, y) -> int:
    """Position of the trace closest to y (point-to-polyline distance over
    segments); ties go to the earliest position. Raises NoValidTraceError
    on an empty sequence."""
    if len(traces) == 0:
        raise NoValidTraceError("source has no stored traces")
    y = np.asarray(y, dtype=float)
    best, best_d = 0, np.inf
    for pos, tr in enumerate(traces):
        d = _poly_dist(tr.x, y)
        if d < best_d:
            best, best_d = pos, d
    return best


def _poly_dist(pts: np.ndarray, y: np.ndarray) -> float:
    a = pts[:-1]
    d = pts[1:] - a
    ay = y[None, :] - a
    dd = np.einsum("ij,ij->i", d, d)
    ad = np.einsum("ij,ij->i", ay, d)
    with np.errstate(invalid="ignore", divide="ignore"):
        tt = np.clip(np.where(dd > 0.0, ad / np.where(dd > 0, dd, 1.0), 0.0), 0.0, 1.0)
    e = ay - tt[:, None] * d
    return float(np.sqrt(np.min(np.einsum("ij,ij->i", e, e))))


def _crossing_tau(prj, prp, c, cp):
    """Minimum-|tau| line crossings for a batch of polylines.

    prj, prp: (n, K) projections of polyline samples onto the line normal
    and the line direction; NaN entries are padding. c, cp: (n,) the same
    projections of the batch's base points. Returns (tau (n,), found (n,)).
    """
    s = prj - c[:, None]
    t = prp - cp[:, None]
    with np.errstate(invalid="ignore", divide="ignore"):
        seg = s[:, :-1] * s[:, 1:] < 0.0
        den = s[:, :-1] - s[:, 1:]
        frac = np.where(seg, s[:, :-1] / np.where(seg, den, 1.0), 0.0)
        tau_seg = t[:, :-1] + frac * (t[:, 1:] - t[:, :-1])
        vert = s == 0.0
    cand = np.concatenate([np.where(vert, t, np.nan), np.where(seg, tau_seg, np.nan)], axis=1)
    mag = np.where(np.isnan(cand), np.inf, np.abs(cand))
    pick = np.argmin(mag, axis=1)
    rows = np.arange(len(pick))
    found = np.isfinite(mag[rows, pick])
    tau = np.where(found, np.nan_to_num(cand[rows, pick]), 0.0)
    return tau, found


# ---------------------------------------------------------------------------
# scalar reference implementation

def _traces_by_source(gset: GeodesicSet):
    """Per source i: ascending-j list of (j, trace)."""
    n_dirs = gset.ray_set.n_dirs
    out = {i: [] for i in range(gset.ray_set.n_sources)}
    for rid, tr in zip(gset.ids, gset.traces):
        out[int(rid) // n_dirs].append((int(rid) % n_dirs, tr))
    return out


def backproject(omega: Sinogram, geodesics: GeodesicSet, y,
                cfg: BackprojectionConfig = BackprojectionConfig()) -> float:
    """Backprojected value at a single point; readable reference path."""
    y = np.asarray(y, dtype=float)
    if y @ y > 1.0 + 1e-12:
        raise ValueError("backprojection point outside the closed disk")
    rs = geodesics.ray_set
    by_src = _traces_by_source(geodesics)
    maxwalk = rs.n_sources // 2

    def omega_at(i, j):
        return float(omega.tof[i, j]) if omega.valid[i, j] else 0.0

    total = 0.0
    for m in range(cfg.n_theta):
        phi = 2.0 * np.pi * m / cfg.n_theta
        th = np.array([np.cos(phi), np.sin(phi)])
        tp = perp(th)
        s = float(y @ tp)
        s2 = min(s * s, 1.0 - WEIGHT_CLAMP)
        W = 1.0 / np.sqrt(1.0 - s2) if cfg.weight_mode == "euclidean" else 1.0
        c = float(y @ th)
        # boundary point hit by y + t*theta, t >= 0
        t_exit = -c + np.sqrt(max(c * c + 1.0 - float(y @ y), 0.0))
        xe = y + t_exit * th
        i0 = int(np.rint(np.arctan2(xe[0], xe[1]) * rs.n_sources / (2.0 * np.pi))) % rs.n_sources
        cand = by_src[i0]
        if not cand:
            continue
        pos = nearest_tangent_index([tr for _, tr in cand], y)
        jstar = cand[pos][0]
        if _poly_dist(cand[pos][1].x, y) < EXACT_HIT:
            total += omega_at(i0, jstar) * W
            continue
        tau0 = trace_line_offset(cand[pos][1], y, tp)
        if tau0 is None:
            continue
        if tau0 == 0.0:
            total += omega_at(i0, jstar) * W
            continue
        # walk towards the bracketing neighbor; the sign of tau*<y,theta>
        # picks the rotation sense that moves the crossing towards y
        if tau0 * c > 0.0:
            step = 1
        elif tau0 * c < 0.0:
            step = -1
        else:
            step = 1 if tau0 < 0.0 else -1
        tau_prev, w_prev = tau0, omega_at(i0, jstar)
        icur = i0
        w = 0.0
        for _ in range(maxwalk):
            icur = (icur + step) % rs.n_sources
            tr = next((t for jj, t in by_src[icur] if jj == jstar), None)
            if tr is None:
                continue
            tau1 = trace_line_offset(tr, y, tp)
            if tau1 is None:
                continue
            w1 = omega_at(icur, jstar)
            if tau_prev * tau1 <= 0.0:
                den = abs(tau_prev) + abs(tau1)
                w = w1 if den == 0.0 else (abs(tau1) * w_prev + abs(tau_prev) * w1) / den
                break
            tau_prev, w_prev = tau1, w1
        total += w * W
    return float(2.0 * np.pi / cfg.n_theta * total)


# ---------------------------------------------------------------------------
# vectorized implementation

class _PaddedTraces:
    """NaN-padded per-(source, tangent-index) sample arrays."""

    def __init__(self, gset: GeodesicSet):
        rs = gset.ray_set
        jv = np.flatnonzero(rs.valid[0])
        self.j_valid = jv
        jpos = np.full(rs.n_dirs, -1, dtype=np.int64)
        jpos[jv] = np.arange(len(jv))
        kmax = max(len(tr) for tr in gset.traces)
        self.pts = np.full((rs.n_sources, len(jv), kmax, 2), np.nan)
        self.present = np.zeros((rs.n_sources, len(jv)), dtype=bool)
        for rid, tr in zip(gset.ids, gset.traces):
            i, j = int(rid) // rs.n_dirs, int(rid) % rs.n_dirs
            v = jpos[j]
            self.pts[i, v, : len(tr)] = tr.x
            self.present[i, v] = True

    def omega_grid(self, omega: Sinogram) -> np.ndarray:
        g = np.where(omega.valid, omega.tof, 0.0)
        return np.where(self.present, g[:, self.j_valid], 0.0)


def backproject_many(omega: Sinogram, geodesics: GeodesicSet, ys,
                     cfg: BackprojectionConfig = BackprojectionConfig(),
                     chunk: int = 128) -> np.ndarray:
    """Backprojection at many points; same semantics as backproject."""
    Y = np.asarray(ys, dtype=float).reshape(-1, 2)
    if np.any(np.einsum("ij,ij->i", Y, Y) > 1.0 + 1e-12):
        raise ValueError("backprojection point outside the closed disk")
    rs = geodesics.ray_set
    pad = _PaddedTraces(geodesics)
    OMG = pad.omega_grid(omega)
    my = Y.shape[0]
    n_src = rs.n_sources
    maxwalk = n_src // 2

    # (y, source) -> nearest tangent position and its distance, filled lazily
    jstar = np.full((my, n_src), -1, dtype=np.int64)
    dstar = np.full((my, n_src), np.inf)

    acc = np.zeros(my)
    for m in range(cfg.n_theta):
        phi = 2.0 * np.pi * m / cfg.n_theta
        th = np.array([np.cos(phi), np.sin(phi)])
        tp = perp(th)
        c = Y @ th
        cp = Y @ tp
        s2 = np.minimum(cp * cp, 1.0 - WEIGHT_CLAMP)
        W = 1.0 / np.sqrt(1.0 - s2) if cfg.weight_mode == "euclidean" else np.ones(my)
        t_exit = -c + np.sqrt(np.maximum(c * c + 1.0 - np.einsum("ij,ij->i", Y, Y), 0.0))
        xe = Y + t_exit[:, None] * th
        i0 = np.rint(np.arctan2(xe[:, 0], xe[:, 1]) * n_src / (2.0 * np.pi)).astype(np.int64) % n_src

        need = np.flatnonzero(jstar[np.arange(my), i0] < 0)
        for a in range(0, len(need), chunk):
            rows = need[a : a + chunk]
            _fill_nearest(pad, Y[rows], i0[rows], jstar, dstar, rows)

        js = jstar[np.arange(my), i0]
        ds = dstar[np.arange(my), i0]
        w = np.zeros(my)
        usable = np.isfinite(ds)
        hit = usable & (ds < EXACT_HIT)
        w[hit] = OMG[i0[hit], js[hit]]

        walk = np.flatnonzero(usable & ~hit)
        if walk.size:
            tau0, found0 = _crossing_rows(pad, i0[walk], js[walk], th, tp, c[walk], cp[walk])
            on_line = found0 & (tau0 == 0.0)
            w[walk[on_line]] = OMG[i0[walk[on_line]], js[walk[on_line]]]
            go = found0 & (tau0 != 0.0)
            act = walk[go]
            if act.size:
                tprev = tau0[go]
                wprev = OMG[i0[act], js[act]]
                cc = c[act]
                step = np.where(tprev * cc > 0.0, 1,
                                np.where(tprev * cc < 0.0, -1,
                                         np.where(tprev < 0.0, 1, -1))).astype(np.int64)
                icur = i0[act].copy()
                jcur = js[act]
                cpa = cp[act]
                alive = np.arange(act.size)
                for _ in range(maxwalk):
                    if alive.size == 0:
                        break
                    icur[alive] = (icur[alive] + step[alive]) % n_src
                    tau1, found1 = _crossing_rows(pad, icur[alive], jcur[alive],
                                                  th, tp, cc[alive], cpa[alive])
                    pres = pad.present[icur[alive], jcur[alive]] & found1
                    flip = pres & (tprev[alive] * tau1 <= 0.0)
                    if np.any(flip):
                        rows = alive[flip]
                        w1 = OMG[icur[rows], jcur[rows]]
                        t1 = tau1[flip]
                        den = np.abs(tprev[rows]) + np.abs(t1)
                        safe = den > 0.0
                        val = np.where(
                            safe,
                            (np.abs(t1) * wprev[rows] + np.abs(tprev[rows]) * w1)
                            / np.where(safe, den, 1.0),
                            w1,
                        )
                        w[act[rows]] = val
                    keep = pres & ~flip
                    upd = alive[keep]
                    tprev[upd] = tau1[keep]
                    wprev[upd] = OMG[icur[upd], jcur[upd]]
                    alive = alive[~flip]
        acc += w * W
    return 2.0 * np.pi / cfg.n_theta * acc


def _fill_nearest(pad: _PaddedTraces, Yr, i0r, jstar, dstar, rows):
    """Nearest tangent position among a source's traces for a row block."""
    G = pad.pts[i0r]
    a = G[:, :, :-1, :]
    d = G[:, :, 1:, :] - a
    ay = Yr[:, None, None, :] - a
    dd = np.einsum("svkx,svkx->svk", d, d)
    ad = np.einsum("svkx,svkx->svk", ay, d)
    with np.errstate(invalid="ignore", divide="ignore"):
        tt = np.clip(ad / np.where(dd > 0.0, dd, 1.0), 0.0, 1.0)
        e = ay - tt[..., None] * d
        d2 = np.einsum("svkx,svkx->svk", e, e)
    d2 = np.where(np.isnan(d2), np.inf, d2)
    dmin = d2.min(axis=2)
    dmin = np.where(pad.present[i0r], dmin, np.inf)
    pos = np.argmin(dmin, axis=1)
    rr = np.arange(len(rows))
    jstar[rows, i0r] = pos
    dstar[rows, i0r] = np.sqrt(dmin[rr, pos])


def _crossing_rows(pad: _PaddedTraces, i_rows, j_rows, th, tp, c, cp):
    pts = pad.pts[i_rows, j_rows]
    prj = pts @ th
    prp = pts @ tp
    return _crossing_tau(prj, prp, c, cp)


def backproject_field(omega: Sinogram, geodesics: GeodesicSet, spec: GridSpec,
                      cfg: BackprojectionConfig = BackprojectionConfig()) -> ScalarField:
    """Backprojection at every grid node inside the closed disk; outside
    nodes are zero (they never enter the reconstruction functional)."""
    mask = disk_node_mask(spec)
    nodes = spec.node_coords()
    vals = np.zeros((spec.size, spec.size))
    vals[mask] = backproject_many(omega, geodesics, nodes[mask], cfg)
    return ScalarField(spec, vals, outside_value=0.0)

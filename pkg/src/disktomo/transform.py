"""Ray transform over boundary fan-beam ray sets.

A ray set places N_x sources on the unit circle and N_xi directions per
source; rays pointing strictly inward are valid, the rest carry zero
time-of-flight by convention. forward_nonlinear traces the geodesics of a
field and integrates it along them; forward_linearized integrates any field
along a frozen geodesic set with the identical trapezoid weights, so applying
it to the generator reproduces the nonlinear values bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .field import ScalarField, eval_field
from .geodesic import GeodesicTrace, StepControl, integrate_batch, perp

__all__ = [
    "RaySet",
    "Sinogram",
    "GeodesicSet",
    "SplitMix64",
    "DegenerateScaleError",
    "SinogramFormatError",
    "TraceFormatError",
    "build_ray_set",
    "trace_ray_set",
    "forward_nonlinear",
    "forward_linearized",
    "add_noise",
    "write_sinogram",
    "read_sinogram",
    "write_traces",
    "read_traces",
]


class DegenerateScaleError(ValueError):
    """Requested relative noise on an all-zero sinogram."""


class SinogramFormatError(ValueError):
    """Sinogram CSV violates the i,j,x1,x2,xi1,xi2,tof,valid schema."""


class TraceFormatError(ValueError):
    """Trace CSV violates the ray_id,t,x1,x2,xi1,xi2,z schema."""


@dataclass(frozen=True)
class RaySet:
    """Fan-beam launch geometry.

    sources[i] = (sin 2*pi*i/N_x, cos 2*pi*i/N_x) for i = 0..N_x-1 and
    dirs[i, j] the unit vector at angle 2*pi*(i/N_x + j/N_xi - 1/4) in the
    same sine/cosine convention, j = 0..N_xi-1. valid[i, j] marks strictly
    inward rays <dir, source> < 0; the pattern is independent of i.
    """

    n_sources: int
    n_dirs: int
    sources: np.ndarray
    dirs: np.ndarray
    valid: np.ndarray

    @property
    def n_rays(self) -> int:
        return self.n_sources * self.n_dirs

    def flat_ids(self) -> np.ndarray:
        """Flat ids i*N_xi + j of the valid rays, i-major order."""
        return np.flatnonzero(self.valid.ravel())

    def chord_offsets(self) -> np.ndarray:
        """Signed Euclidean offset s_j = <x_i, perp(dir_ij)> per direction;
        independent of the source index."""
        return np.einsum("k,jk->j", self.sources[0], perp(self.dirs[0]))

    def __eq__(self, other):
        return (
            isinstance(other, RaySet)
            and self.n_sources == other.n_sources
            and self.n_dirs == other.n_dirs
        )


def build_ray_set(n_sources: int, n_dirs: int) -> RaySet:
    if n_sources < 4 or n_dirs < 4:
        raise ValueError("ray set needs at least 4 sources and 4 directions")
    i = np.arange(n_sources)
    j = np.arange(n_dirs)
    a = 2.0 * np.pi * i / n_sources
    sources = np.stack([np.sin(a), np.cos(a)], axis=1)
    b = 2.0 * np.pi * (i[:, None] / n_sources + j[None, :] / n_dirs - 0.25)
    dirs = np.stack([np.sin(b), np.cos(b)], axis=2)
    inward = np.einsum("ijk,ik->ij", dirs, sources) < 0.0
    return RaySet(n_sources, n_dirs, sources, dirs, inward)


@dataclass
class Sinogram:
    """Per-ray time of flight on the (source, direction) grid.

    valid combines geometric validity with integration success; tof is 0 on
    every non-valid ray. Norms and residuals run over valid entries only.
    """

    ray_set: RaySet
    tof: np.ndarray
    valid: np.ndarray

    def valid_values(self) -> np.ndarray:
        return self.tof[self.valid]

    def norm(self) -> float:
        return float(np.linalg.norm(self.valid_values()))


class GeodesicSet:
    """Frozen geodesics of one generator field over a ray set.

    Stores the dense trace samples of every successfully integrated valid
    ray in flat buffers: pts (P, 2) sample positions, wts (P,) trapezoid
    weights for Euclidean line integrals, offsets (R+1,) ray boundaries,
    ids (R,) flat ray ids (i-major). Integrating a sampled field along every
    ray is then one gather plus one segmented reduction.
    """

    __slots__ = ("ray_set", "ctrl", "traces", "ids", "valid", "pts", "wts",
                 "offsets", "field_hash")

    def __init__(self, ray_set: RaySet, ctrl: StepControl, traces, ids,
                 valid, field_hash: str):
        self.ray_set = ray_set
        self.ctrl = ctrl
        self.traces = traces
        self.ids = np.asarray(ids, dtype=np.int64)
        self.valid = valid
        self.field_hash = field_hash
        counts = np.array([len(tr) for tr in traces], dtype=np.int64)
        self.offsets = np.concatenate([[0], np.cumsum(counts)])
        P = int(self.offsets[-1])
        self.pts = np.empty((P, 2))
        self.wts = np.empty(P)
        for r, tr in enumerate(traces):
            a, b = self.offsets[r], self.offsets[r + 1]
            self.pts[a:b] = tr.x
            dl = np.linalg.norm(np.diff(tr.x, axis=0), axis=1)
            w = np.zeros(b - a)
            w[:-1] += 0.5 * dl
            w[1:] += 0.5 * dl
            self.wts[a:b] = w

    @property
    def n_stored(self) -> int:
        return len(self.traces)

    def integrate_values(self, vals_at_pts: np.ndarray) -> np.ndarray:
        """Trapezoid sum of per-sample values, one entry per stored ray."""
        return np.add.reduceat(vals_at_pts * self.wts, self.offsets[:-1])

    def to_grid(self, per_ray: np.ndarray) -> np.ndarray:
        """Scatter per-stored-ray values onto the (N_x, N_xi) grid."""
        out = np.zeros(self.ray_set.n_rays)
        out[self.ids] = per_ray
        return out.reshape(self.ray_set.n_sources, self.ray_set.n_dirs)


def trace_ray_set(n: ScalarField, ray_set: RaySet,
                  ctrl: StepControl = StepControl()) -> GeodesicSet:
    """Trace every geometrically valid ray through n.

    Rays whose integration hits the step budget are dropped from the stored
    set and cleared in the valid mask.
    """
    gmask = ray_set.valid
    src = np.repeat(ray_set.sources, ray_set.n_dirs, axis=0)[gmask.ravel()]
    drn = ray_set.dirs.reshape(-1, 2)[gmask.ravel()]
    flat = np.flatnonzero(gmask.ravel())
    traces = integrate_batch(n, src, drn, ctrl)
    ok = np.array([tr.valid for tr in traces], dtype=bool)
    kept = [tr for tr, k in zip(traces, ok) if k]
    ids = flat[ok]
    valid = np.zeros_like(gmask)
    valid.ravel()[ids] = True
    return GeodesicSet(ray_set, ctrl, kept, ids, valid, n.content_hash())


def forward_linearized(f: ScalarField, geodesics: GeodesicSet) -> Sinogram:
    """Euclidean-arclength trapezoid of f along each frozen geodesic."""
    if geodesics.n_stored == 0:
        raise ValueError("empty geodesic set")
    vals = eval_field(f, geodesics.pts)
    per_ray = geodesics.integrate_values(vals)
    return Sinogram(geodesics.ray_set, geodesics.to_grid(per_ray),
                    geodesics.valid.copy())


def forward_nonlinear(n: ScalarField, ray_set: RaySet,
                      ctrl: StepControl = StepControl()):
    """Trace the geodesics of n and integrate n along them.

    Returns (Sinogram, GeodesicSet); the sinogram entries equal
    forward_linearized(n, .) on the returned set exactly, so re-linearizing
    at the generator is free of quadrature mismatch.
    """
    gset = trace_ray_set(n, ray_set, ctrl)
    return forward_linearized(n, gset), gset


# ---------------------------------------------------------------------------
# seeded noise

_MASK = 0xFFFFFFFFFFFFFFFF


class SplitMix64:
    """Deterministic 64-bit generator (splitmix64).

    state advances by 0x9E3779B97F4A7C15; output mixes with shifts 30/27/31
    and multipliers 0xBF58476D1CE4E5B9, 0x94D049BB133111EB. Doubles take the
    top 53 bits. Documented so other implementations can match streams.
    """

    def __init__(self, seed: int):
        self.state = seed & _MASK

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
        return z ^ (z >> 31)

    def next_double(self) -> float:
        return (self.next_u64() >> 11) * 2.0 ** -53

    def next_symmetric(self) -> float:
        """Uniform on [-1, 1]."""
        return 2.0 * self.next_double() - 1.0


def add_noise(sino: Sinogram, level: float, seed: int) -> Sinogram:
    """Add relative l2 noise of exactly the given level on the valid rays.

    Draws are uniform on [-1, 1] in i-major valid-ray order, then rescaled
    so that ||delta|| / ||tof|| = level; invalid rays stay zero.
    """
    if level < 0:
        raise ValueError("noise level must be nonnegative")
    out = Sinogram(sino.ray_set, sino.tof.copy(), sino.valid.copy())
    if level == 0:
        return out
    base = np.linalg.norm(sino.tof[sino.valid])
    if base == 0.0:
        raise DegenerateScaleError("cannot scale noise relative to an all-zero sinogram")
    rng = SplitMix64(seed)
    m = int(np.count_nonzero(sino.valid))
    delta = np.array([rng.next_symmetric() for _ in range(m)])
    dn = np.linalg.norm(delta)
    if dn == 0.0:
        raise DegenerateScaleError("degenerate noise draw")
    delta *= level * base / dn
    out.tof[out.valid] = sino.tof[sino.valid] + delta
    return out


# ---------------------------------------------------------------------------
# CSV emission

def write_sinogram(path, sino: Sinogram) -> None:
    rs = sino.ray_set
    dirs = rs.dirs
    with open(path, "w") as fh:
        fh.write("i,j,x1,x2,xi1,xi2,tof,valid\n")
        for i in range(rs.n_sources):
            x = rs.sources[i]
            for j in range(rs.n_dirs):
                d = dirs[i, j]
                fh.write(
                    "%d,%d,%.17g,%.17g,%.17g,%.17g,%.17g,%d\n"
                    % (i + 1, j + 1, x[0], x[1], d[0], d[1],
                       sino.tof[i, j], int(sino.valid[i, j]))
                )


def read_sinogram(path) -> Sinogram:
    """Parse and validate a sinogram CSV; the launch geometry in the file
    must match the canonical ray set for its (N_x, N_xi) to 1e-9."""
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "i,j,x1,x2,xi1,xi2,tof,valid":
            raise SinogramFormatError(f"bad header: {header!r}")
        rows = []
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 8:
                raise SinogramFormatError(f"line {lineno}: expected 8 fields")
            try:
                i, j = int(parts[0]), int(parts[1])
                nums = [float(p) for p in parts[2:7]]
                v = int(parts[7])
            except ValueError as e:
                raise SinogramFormatError(f"line {lineno}: {e}") from None
            if v not in (0, 1):
                raise SinogramFormatError(f"line {lineno}: valid must be 0 or 1")
            rows.append((i, j, *nums, v))
    if not rows:
        raise SinogramFormatError("no data rows")
    arr = np.array(rows)
    n_sources = int(arr[:, 0].max())
    n_dirs = int(arr[:, 1].max())
    if len(rows) != n_sources * n_dirs:
        raise SinogramFormatError("row count does not cover the (i, j) grid")
    if not np.all(np.isfinite(arr[:, 2:7])):
        raise SinogramFormatError("non-finite values")
    rs = build_ray_set(n_sources, n_dirs)
    tof = np.zeros((n_sources, n_dirs))
    valid = np.zeros((n_sources, n_dirs), dtype=bool)
    seen = np.zeros((n_sources, n_dirs), dtype=bool)
    for i, j, x1, x2, xi1, xi2, t, v in rows:
        i0, j0 = int(i) - 1, int(j) - 1
        if not (0 <= i0 < n_sources and 0 <= j0 < n_dirs) or seen[i0, j0]:
            raise SinogramFormatError(f"bad or duplicate index ({int(i)},{int(j)})")
        seen[i0, j0] = True
        if (abs(x1 - rs.sources[i0, 0]) > 1e-9 or abs(x2 - rs.sources[i0, 1]) > 1e-9
                or abs(xi1 - rs.dirs[i0, j0, 0]) > 1e-9
                or abs(xi2 - rs.dirs[i0, j0, 1]) > 1e-9):
            raise SinogramFormatError(f"ray ({int(i)},{int(j)}) geometry mismatch")
        tof[i0, j0] = t
        valid[i0, j0] = bool(v)
    if np.any(valid & ~rs.valid):
        raise SinogramFormatError("valid flag set on a non-inward ray")
    return Sinogram(rs, tof, valid)


def write_traces(path, geodesics: GeodesicSet) -> None:
    with open(path, "w") as fh:
        fh.write("ray_id,t,x1,x2,xi1,xi2,z\n")
        for rid, tr in zip(geodesics.ids, geodesics.traces):
            for k in range(len(tr)):
                fh.write(
                    "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n"
                    % (rid, tr.t[k], tr.x[k, 0], tr.x[k, 1],
                       tr.xi[k, 0], tr.xi[k, 1], tr.z[k])
                )


def read_traces(path):
    """Trace CSV back to {ray_id: GeodesicTrace}; sample order preserved."""
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "ray_id,t,x1,x2,xi1,xi2,z":
            raise TraceFormatError(f"bad header: {header!r}")
        data = {}
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 7:
                raise TraceFormatError(f"line {lineno}: expected 7 fields")
            try:
                rid = int(parts[0])
                nums = [float(p) for p in parts[1:]]
            except ValueError as e:
                raise TraceFormatError(f"line {lineno}: {e}") from None
            if not all(np.isfinite(nums)):
                raise TraceFormatError(f"line {lineno}: non-finite values")
            data.setdefault(rid, []).append(nums)
    out = {}
    for rid, rows in data.items():
        arr = np.array(rows)
        if np.any(np.diff(arr[:, 0]) < 0):
            raise TraceFormatError(f"ray {rid}: sample times not sorted")
        out[rid] = GeodesicTrace(arr[:, 0], arr[:, 1:3], arr[:, 3:5], arr[:, 5])
    return out

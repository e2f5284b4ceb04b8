"""Gridded scalar fields on the square [-1,1]^2 covering the unit disk.

The refractive index n (or sound speed c) lives on an equally spaced grid
with step h = 1/Q and nodes (i*h, j*h), i,j = -Q..Q. Between nodes the field
is the unique bilinear interpolant per cell; outside the square it is the
constant `outside_value` (the background medium). Phantom builders sample
closed-form speed maps onto this grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "GridSpec",
    "ScalarField",
    "PhantomParams",
    "FieldFormatError",
    "eval_field",
    "eval_gradient",
    "constant_field",
    "field_from_function",
    "reciprocal_field",
    "peaks_speed",
    "curvature_speed",
    "ring_speed",
    "phantom_peaks",
    "phantom_constant_curvature",
    "phantom_ring_peaks",
    "count_disk_nodes",
    "disk_node_mask",
    "write_field",
    "read_field",
]


class FieldFormatError(ValueError):
    """Raised for malformed field CSV files or inconsistent grid headers."""


@dataclass(frozen=True)
class GridSpec:
    """Equally spaced grid on [-1,1]^2 with step h = 1/Q.

    Nodes are (i*h, j*h) for i, j in {-Q..Q}; there are (2Q+1)^2 of them.
    """

    Q: int

    def __post_init__(self):
        if self.Q < 1:
            raise ValueError(f"Q must be a positive integer, got {self.Q}")

    @property
    def h(self) -> float:
        return 1.0 / self.Q

    @property
    def size(self) -> int:
        return 2 * self.Q + 1

    def node_coords(self) -> np.ndarray:
        """1D array of node coordinates -1..1, shared by both axes."""
        return (np.arange(-self.Q, self.Q + 1)) * self.h


@dataclass(frozen=True)
class ScalarField:
    """Node values on a GridSpec plus the constant used outside the square.

    values[a, b] is the node (i, j) = (a - Q, b - Q), i.e. the first axis is
    the first spatial coordinate. Values are not forced positive here; the
    refractive-index readers and phantom builders enforce positivity where
    the physics demands it.
    """

    spec: GridSpec
    values: np.ndarray
    outside_value: float = 1.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.spec.size, self.spec.size):
            raise ValueError(
                f"values shape {v.shape} does not match grid {self.spec.size}^2"
            )
        object.__setattr__(self, "values", v)

    def node_value(self, i: int, j: int) -> float:
        return float(self.values[i + self.spec.Q, j + self.spec.Q])

    def content_hash(self) -> str:
        import hashlib

        return hashlib.sha256(self.values.tobytes()).hexdigest()


def constant_field(spec: GridSpec, value: float = 1.0, outside_value: float = 1.0) -> ScalarField:
    return ScalarField(spec, np.full((spec.size, spec.size), float(value)), outside_value)


def field_from_function(spec: GridSpec, fn, outside_value: float = 1.0) -> ScalarField:
    """Sample fn(x) (vectorized over an (..., 2) array) at all grid nodes."""
    c = spec.node_coords()
    X1, X2 = np.meshgrid(c, c, indexing="ij")
    pts = np.stack([X1, X2], axis=-1)
    return ScalarField(spec, np.asarray(fn(pts), dtype=float), outside_value)


def reciprocal_field(f: ScalarField) -> ScalarField:
    """Pointwise 1/f at the nodes (speed <-> refractive index)."""
    if np.any(f.values <= 0.0):
        raise ValueError("reciprocal of a field with nonpositive node values")
    out = 1.0 / f.outside_value if f.outside_value > 0 else 1.0
    return ScalarField(f.spec, 1.0 / f.values, out)


# ---------------------------------------------------------------------------
# evaluation

def _cells_for_eval(spec: GridSpec, x: np.ndarray):
    # clamped floor cell; which cell is used does not matter for the value
    # because the interpolant is continuous across edges
    t = (x + 1.0) / spec.h
    c = np.floor(t).astype(np.int64)
    c = np.clip(c, 0, spec.size - 2)
    u = t - c
    return c, u


def eval_field(f: ScalarField, x) -> np.ndarray | float:
    """Bilinear interpolation of f at x (any (..., 2) array of points).

    Points outside [-1,1]^2 return f.outside_value. At nodes the stored
    node value is reproduced exactly.
    """
    x = np.asarray(x, dtype=float)
    scalar = x.ndim == 1
    pts = np.atleast_2d(x)
    inside = np.all(np.abs(pts) <= 1.0, axis=-1)
    out = np.full(pts.shape[:-1], f.outside_value, dtype=float)
    if np.any(inside):
        p = pts[inside]
        c, u = _cells_for_eval(f.spec, p)
        c1, c2 = c[..., 0], c[..., 1]
        u1, u2 = u[..., 0], u[..., 1]
        v = f.values
        f00 = v[c1, c2]
        f10 = v[c1 + 1, c2]
        f01 = v[c1, c2 + 1]
        f11 = v[c1 + 1, c2 + 1]
        out[inside] = (
            f00 * (1 - u1) * (1 - u2)
            + f10 * u1 * (1 - u2)
            + f01 * (1 - u1) * u2
            + f11 * u1 * u2
        )
    return float(out[0]) if scalar else out


def eval_gradient(f: ScalarField, x) -> np.ndarray:
    """Gradient of the bilinear interpolant.

    In cell interiors this is the exact gradient. On shared cell edges the
    gradient of the cell with the lexicographically smallest node index is
    used (the left/lower cell); outside [-1,1]^2 the gradient is zero.
    """
    x = np.asarray(x, dtype=float)
    scalar = x.ndim == 1
    pts = np.atleast_2d(x)
    inside = np.all(np.abs(pts) <= 1.0, axis=-1)
    out = np.zeros(pts.shape, dtype=float)
    if np.any(inside):
        p = pts[inside]
        t = (p + 1.0) / f.spec.h
        # on a gridline ceil(t)-1 selects the lower cell; strictly inside a
        # cell it coincides with floor(t)
        c = np.ceil(t).astype(np.int64) - 1
        c = np.clip(c, 0, f.spec.size - 2)
        u = t - c
        c1, c2 = c[..., 0], c[..., 1]
        u1, u2 = u[..., 0], u[..., 1]
        v = f.values
        f00 = v[c1, c2]
        f10 = v[c1 + 1, c2]
        f01 = v[c1, c2 + 1]
        f11 = v[c1 + 1, c2 + 1]
        g1 = ((f10 - f00) * (1 - u2) + (f11 - f01) * u2) / f.spec.h
        g2 = ((f01 - f00) * (1 - u1) + (f11 - f10) * u1) / f.spec.h
        out[inside] = np.stack([g1, g2], axis=-1)
    return out[0] if scalar else out


def patch_cell(spec: GridSpec, x) -> np.ndarray:
    """Cell index (..., 2) whose bilinear patch covers x, clamped to the
    grid; points on a gridline count toward the upper/right cell."""
    t = (np.asarray(x, dtype=float) + 1.0) / spec.h
    return np.clip(np.floor(t).astype(np.int64), 0, spec.size - 2)


def eval_cell_patch(f: ScalarField, x, cell):
    """Value and gradient of one cell's bilinear patch at x.

    The patch is the smooth extension of that cell's interpolant over the
    whole plane, with no outside clamp. Integrators pin a step to the cell
    it starts in so that stage points just past a cell edge see the smooth
    patch rather than the neighbor's kinked gradient; cell comes from
    patch_cell."""
    p = np.asarray(x, dtype=float)
    c = np.asarray(cell)
    u = (p + 1.0) / f.spec.h - c
    c1, c2 = c[..., 0], c[..., 1]
    u1, u2 = u[..., 0], u[..., 1]
    v = f.values
    f00 = v[c1, c2]
    f10 = v[c1 + 1, c2]
    f01 = v[c1, c2 + 1]
    f11 = v[c1 + 1, c2 + 1]
    val = (
        f00 * (1 - u1) * (1 - u2)
        + f10 * u1 * (1 - u2)
        + f01 * (1 - u1) * u2
        + f11 * u1 * u2
    )
    g1 = ((f10 - f00) * (1 - u2) + (f11 - f01) * u2) / f.spec.h
    g2 = ((f01 - f00) * (1 - u1) + (f11 - f10) * u1) / f.spec.h
    return val, np.stack([g1, g2], axis=-1)


# ---------------------------------------------------------------------------
# phantoms

@dataclass(frozen=True)
class PhantomParams:
    """Parameters of the built-in speed maps.

    centers/radii/amplitudes describe the bump sum; d, R the constant
    curvature map; ring_* the cosine annulus. literal_bumps switches the
    bump profile to exp(-1/(r - rho)) (unnormalized; peak values are then
    far below 1 + amplitude).
    """

    centers: tuple = ((1 / 5, 2 / 5), (-1 / 3, -1 / 3), (1 / 2, -1 / 2))
    radii: tuple = (1 / 4, 1 / 5, 1 / 6)
    amplitudes: tuple = (1 / 5, -3 / 20, 1 / 10)
    d: float = 1.2
    R: float = 2.0
    ring_radius: float = 0.1
    ring_center: tuple = (0.0, 0.0)
    ring_amplitude: float = 0.1
    literal_bumps: bool = False

    def __post_init__(self):
        if len(self.centers) != len(self.radii) or len(self.radii) != len(self.amplitudes):
            raise ValueError("centers, radii, amplitudes must have equal length")
        for th in self.amplitudes:
            if th <= -1.0:
                raise ValueError(f"amplitude {th} <= -1 gives nonpositive speed")
        for r in self.radii:
            if r <= 0:
                raise ValueError("bump radii must be positive")
        if not (0 < self.ring_radius < 0.25):
            raise ValueError("ring radius must lie in (0, 1/4)")
        if self.d <= 0 or self.R <= 0:
            raise ValueError("curvature parameters d, R must be positive")


def _bump_sum(pts: np.ndarray, params: PhantomParams) -> np.ndarray:
    pts = np.asarray(pts, dtype=float)
    total = np.zeros(pts.shape[:-1], dtype=float)
    for (q, r, th) in zip(params.centers, params.radii, params.amplitudes):
        dx = pts - np.asarray(q, dtype=float)
        rho2 = np.einsum("...k,...k->...", dx, dx)
        inside = rho2 < r * r
        contrib = np.zeros_like(total)
        if params.literal_bumps:
            rho = np.sqrt(rho2[inside])
            with np.errstate(divide="ignore", over="ignore"):
                contrib[inside] = th * np.exp(-1.0 / (r - rho))
        else:
            # normalized profile: equals th at the center and vanishes with
            # all derivatives at the support edge
            with np.errstate(divide="ignore", over="ignore"):
                contrib[inside] = th * np.exp(1.0 - r * r / (r * r - rho2[inside]))
        total = total + contrib
    return total


def peaks_speed(pts, params: PhantomParams = PhantomParams()) -> np.ndarray:
    """Speed map c = 1 + sum of compact bumps; c = 1 outside every support."""
    return 1.0 + _bump_sum(np.asarray(pts, dtype=float), params)


def curvature_speed(pts, params: PhantomParams = PhantomParams()) -> np.ndarray:
    """c = 1 + (R^2 + d^2 |x|^2)^2 / (4 R^2) on the closed disk, 1 outside."""
    pts = np.asarray(pts, dtype=float)
    r2 = np.einsum("...k,...k->...", pts, pts)
    phi = (params.R**2 + params.d**2 * r2) ** 2 / (4.0 * params.R**2)
    return np.where(r2 <= 1.0, 1.0 + phi, 1.0)


def ring_speed(pts, params: PhantomParams = PhantomParams()) -> np.ndarray:
    """Bump sum plus a cosine annulus supported on [1-4rb, 1-2rb] around the
    ring center (rb = ring_radius)."""
    pts = np.asarray(pts, dtype=float)
    c = peaks_speed(pts, params)
    rb = params.ring_radius
    dx = pts - np.asarray(params.ring_center, dtype=float)
    rho = np.sqrt(np.einsum("...k,...k->...", dx, dx))
    on_ring = (rho >= 1.0 - 4.0 * rb) & (rho <= 1.0 - 2.0 * rb)
    ring = np.where(on_ring, params.ring_amplitude * np.cos(np.pi * rho / rb), 0.0)
    return c + ring


def _check_positive_speed(values: np.ndarray):
    if np.any(values <= 0.0):
        raise ValueError("phantom speed must be positive everywhere on the grid")


def _build_phantom(spec: GridSpec, speed_fn, params: PhantomParams):
    c = field_from_function(spec, lambda p: speed_fn(p, params))
    _check_positive_speed(c.values)
    n = reciprocal_field(c)
    return c, n


def phantom_peaks(params: PhantomParams = PhantomParams(), spec: GridSpec = GridSpec(10)):
    """Sample the bump phantom; returns (c, n) with n = 1/c at the nodes."""
    return _build_phantom(spec, peaks_speed, params)


def phantom_constant_curvature(params: PhantomParams = PhantomParams(), spec: GridSpec = GridSpec(10)):
    return _build_phantom(spec, curvature_speed, params)


def phantom_ring_peaks(params: PhantomParams = PhantomParams(), spec: GridSpec = GridSpec(10)):
    return _build_phantom(spec, ring_speed, params)


# ---------------------------------------------------------------------------
# disk node bookkeeping

def disk_node_mask(spec: GridSpec) -> np.ndarray:
    """Boolean (size, size) mask of nodes with ||(i*h, j*h)|| <= 1."""
    idx = np.arange(-spec.Q, spec.Q + 1)
    I, J = np.meshgrid(idx, idx, indexing="ij")
    return (I * I + J * J) <= spec.Q * spec.Q


def count_disk_nodes(spec: GridSpec) -> int:
    """Brute-force count of grid nodes inside the closed unit disk."""
    return int(np.count_nonzero(disk_node_mask(spec)))


# ---------------------------------------------------------------------------
# CSV io
#
# line 1: `h,Q` header, line 2: their values, line 3: `i,j,value` header,
# then one row per node, i-major then j, 17 significant digits.

def write_field(path, f: ScalarField):
    Q = f.spec.Q
    lines = ["h,Q", f"{f.spec.h:.17g},{Q}", "i,j,value"]
    for i in range(-Q, Q + 1):
        row = f.values[i + Q]
        for j in range(-Q, Q + 1):
            lines.append(f"{i},{j},{row[j + Q]:.17g}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_field(path, require_positive: bool = True) -> ScalarField:
    """Read a field CSV; rejects malformed files, non-finite values, h*Q != 1,
    and (by default) nonpositive node values."""
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if len(lines) < 3 or lines[0].replace(" ", "") != "h,Q":
        raise FieldFormatError(f"{path}: missing h,Q header")
    try:
        h_str, q_str = lines[1].split(",")
        h = float(h_str)
        Q = int(q_str)
    except ValueError as e:
        raise FieldFormatError(f"{path}: bad h,Q line: {lines[1]!r}") from e
    if Q < 1 or not math.isfinite(h) or abs(h * Q - 1.0) > 1e-12:
        raise FieldFormatError(f"{path}: h*Q != 1 (h={h}, Q={Q})")
    if lines[2].replace(" ", "") != "i,j,value":
        raise FieldFormatError(f"{path}: missing i,j,value header")
    spec = GridSpec(Q)
    values = np.full((spec.size, spec.size), np.nan)
    for ln in lines[3:]:
        parts = ln.split(",")
        if len(parts) != 3:
            raise FieldFormatError(f"{path}: bad row {ln!r}")
        try:
            i = int(parts[0])
            j = int(parts[1])
            v = float(parts[2])
        except ValueError as e:
            raise FieldFormatError(f"{path}: bad row {ln!r}") from e
        if not (-Q <= i <= Q and -Q <= j <= Q):
            raise FieldFormatError(f"{path}: node ({i},{j}) outside grid")
        values[i + Q, j + Q] = v
    if np.any(np.isnan(values)):
        raise FieldFormatError(f"{path}: missing node rows")
    if not np.all(np.isfinite(values)):
        raise FieldFormatError(f"{path}: non-finite node values")
    if require_positive and np.any(values <= 0.0):
        raise FieldFormatError(f"{path}: nonpositive node values")
    return ScalarField(spec, values)

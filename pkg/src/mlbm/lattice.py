"""D2Q9 lattice tables and the moment-space algebra of the solver.

Only macroscopic moments (density rho, velocity u, second-order moment tensor
S) are ever stored; distribution values exist transiently inside kernels.
This module owns the lattice constants and the pure conversions between the
two pictures: second-order equilibrium, third-order Hermite reconstruction,
and moment recovery with the half-force shift.

All functions are pure and broadcast over a leading cell axis, so they are
safe to call from any number of threads.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CS2 = 1.0 / 3.0  # lattice sound speed squared
CS4 = CS2 * CS2
CS6 = CS4 * CS2


class DivergenceError(RuntimeError):
    """Raised when a kernel produces a non-physical state (rho <= 0, NaN)."""

    def __init__(self, message, level=None, cells=None):
        super().__init__(message)
        self.level = level
        self.cells = cells


@dataclass(frozen=True)
class LatticeSpec:
    """Velocity set constants plus the Hermite tables used by reconstruction.

    ``hermite3`` maps a third-order component name to its per-direction
    values.  In 2D only ``xxy`` and ``xyy`` survive (the remaining components
    of the supported index set are 3D-only and reserved for a D3Q19 table).
    """

    d: int
    q: int
    velocities: np.ndarray        # (q, d) int
    weights: np.ndarray           # (q,) float
    cs2: float
    hermite2: np.ndarray          # (q, d, d)
    hermite3: dict
    opposite: np.ndarray          # (q,) int


def d2q9() -> LatticeSpec:
    """Build the D2Q9 lattice: rest, axis directions, then diagonals."""
    c = np.array(
        [[0, 0],
         [1, 0], [0, 1], [-1, 0], [0, -1],
         [1, 1], [-1, 1], [-1, -1], [1, -1]],
        dtype=np.int64,
    )
    w = np.array([4.0 / 9.0] + [1.0 / 9.0] * 4 + [1.0 / 36.0] * 4)
    opposite = np.array([0, 3, 4, 1, 2, 7, 8, 5, 6], dtype=np.int64)

    cx = c[:, 0].astype(float)
    cy = c[:, 1].astype(float)
    h2 = np.empty((9, 2, 2))
    h2[:, 0, 0] = cx * cx - CS2
    h2[:, 0, 1] = cx * cy
    h2[:, 1, 0] = cx * cy
    h2[:, 1, 1] = cy * cy - CS2
    h3 = {
        "xxy": cx * cx * cy - CS2 * cy,
        "xyy": cx * cy * cy - CS2 * cx,
    }
    return LatticeSpec(d=2, q=9, velocities=c, weights=w, cs2=CS2,
                       hermite2=h2, hermite3=h3, opposite=opposite)


def d3q19():
    """Reserved 3D velocity set; not part of this build."""
    raise NotImplementedError("D3Q19 is reserved; only the 2D lattice is built")


D2Q9 = d2q9()


@dataclass
class Moments:
    """Per-cell macroscopic state: the solver's entire fluid description.

    ``s`` stores the symmetric second-moment tensor as its independent
    components ``(s_xx, s_xy, s_yy)``.
    """

    rho: float
    u: np.ndarray
    s: np.ndarray

    def s_matrix(self) -> np.ndarray:
        sxx, sxy, syy = self.s
        return np.array([[sxx, sxy], [sxy, syy]])


def equilibrium(rho, u, spec: LatticeSpec = D2Q9) -> np.ndarray:
    """Second-order Maxwell–Boltzmann equilibrium, returned per direction.

    rho may be scalar or (n,), u of shape (2,) or (n, 2); the result carries
    a trailing q axis.
    """
    u = np.asarray(u, dtype=float)
    rho = np.asarray(rho, dtype=float)
    c = spec.velocities.astype(float)
    cu = u @ c.T / spec.cs2                       # (..., q)
    usq = np.sum(u * u, axis=-1) / (2.0 * spec.cs2)
    return rho[..., None] * spec.weights * (1.0 + cu + 0.5 * cu * cu - usq[..., None])


def seq(u) -> np.ndarray:
    """Equilibrium second moment S^eq = u (x) u, independent of rho.

    Returns the symmetric components (s_xx, s_xy, s_yy) with the same leading
    shape as u.
    """
    u = np.asarray(u, dtype=float)
    ux, uy = u[..., 0], u[..., 1]
    return np.stack([ux * ux, ux * uy, uy * uy], axis=-1)


def _gamma_terms(ux, uy, sxx, sxy, syy):
    """Third-order closure: symmetrized S-u products minus the cubic term."""
    g_xxy = sxx * uy + 2.0 * sxy * ux - 2.0 * ux * ux * uy
    g_xyy = syy * ux + 2.0 * sxy * uy - 2.0 * ux * uy * uy
    return g_xxy, g_xyy


def reconstruct_fields(rho, ux, uy, sxx, sxy, syy,
                       spec: LatticeSpec = D2Q9) -> np.ndarray:
    """Hermite reconstruction of all q distributions from moment fields.

    Inputs broadcast; output shape is inputs' shape + (q,).
    """
    c = spec.velocities.astype(float)
    cx, cy = c[:, 0], c[:, 1]
    h2xx = spec.hermite2[:, 0, 0]
    h2xy = spec.hermite2[:, 0, 1]
    h2yy = spec.hermite2[:, 1, 1]
    h3xxy = spec.hermite3["xxy"]
    h3xyy = spec.hermite3["xyy"]

    rho = np.asarray(rho, dtype=float)[..., None]
    ux = np.asarray(ux, dtype=float)[..., None]
    uy = np.asarray(uy, dtype=float)[..., None]
    sxx = np.asarray(sxx, dtype=float)[..., None]
    sxy = np.asarray(sxy, dtype=float)[..., None]
    syy = np.asarray(syy, dtype=float)[..., None]

    cu = (cx * ux + cy * uy) / CS2
    a2 = h2xx * sxx + 2.0 * h2xy * sxy + h2yy * syy
    g_xxy, g_xyy = _gamma_terms(ux, uy, sxx, sxy, syy)
    a3 = h3xxy * g_xxy + h3xyy * g_xyy
    return rho * spec.weights * (1.0 + cu + a2 / (2.0 * CS4) + a3 / (2.0 * CS6))


def reconstruct(m: Moments, spec: LatticeSpec = D2Q9) -> np.ndarray:
    """Reconstruct the q-vector of distributions for a single moment state."""
    if m.rho <= 0.0:
        raise DivergenceError(f"reconstruct called with rho={m.rho}")
    f = reconstruct_fields(m.rho, m.u[0], m.u[1], m.s[0], m.s[1], m.s[2], spec)
    return np.asarray(f, dtype=float).reshape(spec.q)


def reconstruct_direction(i: int, rho, ux, uy, sxx, sxy, syy,
                          spec: LatticeSpec = D2Q9):
    """Single-direction reconstruction over component arrays (kernel path)."""
    cx, cy = float(spec.velocities[i, 0]), float(spec.velocities[i, 1])
    h2xx = cx * cx - CS2
    h2xy = cx * cy
    h2yy = cy * cy - CS2
    h3xxy = cx * cx * cy - CS2 * cy
    h3xyy = cx * cy * cy - CS2 * cx

    cu = (cx * ux + cy * uy) / CS2
    a2 = h2xx * sxx + 2.0 * h2xy * sxy + h2yy * syy
    out = 1.0 + cu + a2 / (2.0 * CS4)
    if h3xxy != 0.0 or h3xyy != 0.0:
        g_xxy, g_xyy = _gamma_terms(ux, uy, sxx, sxy, syy)
        out = out + (h3xxy * g_xxy + h3xyy * g_xyy) / (2.0 * CS6)
    return rho * spec.weights[i] * out


def compute_moments_fields(f, fx=0.0, fy=0.0, spec: LatticeSpec = D2Q9):
    """Recover (rho, ux, uy, sxx, sxy, syy) from distributions.

    f has a trailing q axis; the velocity carries the half-force shift.
    """
    f = np.asarray(f, dtype=float)
    c = spec.velocities.astype(float)
    cx, cy = c[:, 0], c[:, 1]
    rho = f.sum(axis=-1)
    mx = f @ cx + 0.5 * np.asarray(fx, dtype=float)
    my = f @ cy + 0.5 * np.asarray(fy, dtype=float)
    ux = mx / rho
    uy = my / rho
    sxx = (f @ (cx * cx - CS2)) / rho
    sxy = (f @ (cx * cy)) / rho
    syy = (f @ (cy * cy - CS2)) / rho
    return rho, ux, uy, sxx, sxy, syy


def compute_moments(f, force=(0.0, 0.0), spec: LatticeSpec = D2Q9) -> Moments:
    """Recover a Moments value from a q-vector; signals divergence on rho<=0."""
    rho, ux, uy, sxx, sxy, syy = compute_moments_fields(
        f, float(force[0]), float(force[1]), spec)
    rho = float(rho)
    if not np.isfinite(rho) or rho <= 0.0:
        raise DivergenceError(f"non-physical density rho={rho}")
    return Moments(rho=rho, u=np.array([float(ux), float(uy)]),
                   s=np.array([float(sxx), float(sxy), float(syy)]))

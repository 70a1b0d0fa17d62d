"""Minimal 2D material point method for cohesionless sand.

APIC transfers with quadratic B-spline weights over grid nodes collocated
with the finest-level lattice cells (drag and volume-fraction exchange with
the fluid is therefore stencil-free).  Elasticity is St. Venant-Kirchhoff on
Hencky strain; plasticity is the Drucker-Prager cone with a scalar log-volume
correction accumulator re-injected before each projection.

Scatter order is particle-index deterministic (bincount accumulation), so
repeated runs are bitwise identical.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .solver import BoundarySpec, solid_raster
from .sparse_grid import Topology, TopologyError


@dataclass
class SandMaterial:
    """Elastic moduli in lattice stress units plus the friction angle."""

    E: float = 3.5e5
    nu: float = 0.3
    friction_deg: float = 30.0
    floor_friction: float = 0.5

    def __post_init__(self):
        self.lam = self.E * self.nu / ((1 + self.nu) * (1 - 2 * self.nu))
        self.mu = self.E / (2 * (1 + self.nu))
        sf = np.sin(np.radians(self.friction_deg))
        self.alpha = np.sqrt(2.0 / 3.0) * 2.0 * sf / (3.0 - sf)

    def wave_speed(self, density: float) -> float:
        return float(np.sqrt((self.lam + 2 * self.mu) / density))


class Particles:
    """SoA particle state; one entry per material point."""

    def __init__(self, n: int):
        self.x = np.zeros((n, 2))
        self.v = np.zeros((n, 2))
        self.C = np.zeros((n, 2, 2))
        self.F = np.tile(np.eye(2), (n, 1, 1))
        self.m = np.ones(n)
        self.V0 = np.ones(n)
        self.vol_corr = np.zeros(n)

    def __len__(self):
        return self.x.shape[0]

    def total_mass(self) -> float:
        return float(self.m.sum())

    def momentum(self) -> np.ndarray:
        return (self.m[:, None] * self.v).sum(axis=0)

    def kinetic_energy(self) -> float:
        return float(0.5 * (self.m * (self.v ** 2).sum(axis=1)).sum())


def sample_blocks(blocks, per_cell: int, density: float, rng) -> Particles:
    """Jittered uniform sampling of axis-aligned blocks (cells), per_cell
    particles per unit cell; particle volume = 1/per_cell."""
    counts = [int(round((x1 - x0) * (y1 - y0) * per_cell))
              for (x0, y0, x1, y1) in blocks]
    parts = Particles(sum(counts))
    at = 0
    for (x0, y0, x1, y1), cnt in zip(blocks, counts):
        u = rng.random((cnt, 2))
        parts.x[at:at + cnt, 0] = x0 + u[:, 0] * (x1 - x0)
        parts.x[at:at + cnt, 1] = y0 + u[:, 1] * (y1 - y0)
        at += cnt
    parts.V0[:] = 1.0 / per_cell
    parts.m[:] = density / per_cell
    return parts


class MpmGrid:
    """Node arrays over the finest-level stored cells of a topology."""

    def __init__(self, topology: Topology, boundaries: BoundarySpec | None = None):
        self.topology = topology
        self._version = -1
        self.boundaries = boundaries or BoundarySpec()
        self._alloc()

    def _alloc(self):
        n = self.topology.cell_count(0)
        self.mass = np.zeros(n)
        self.mom = np.zeros((n, 2))
        self.f_int = np.zeros((n, 2))
        self.drag = np.zeros((n, 2))
        self.vel = np.zeros((n, 2))
        self._version = self.topology.version
        self._collision_nodes()

    def _collision_nodes(self):
        """Wall-face bands (2 nodes, friction) and solid boxes (sticky)."""
        topo = self.topology
        coords = topo.cell_coords(0)
        nx, ny = topo.cells_dims(0)
        self.wall_sets = []
        normals = {"x_min": (0, 1.0), "x_max": (0, -1.0),
                   "y_min": (1, 1.0), "y_max": (1, -1.0)}
        for face, (axis, sign) in normals.items():
            if self.boundaries.faces.get(face) != "wall":
                continue
            dim = (nx, ny)[axis]
            edge_lo = coords[:, axis] <= 1 if sign > 0 else \
                coords[:, axis] >= dim - 2
            sel = np.nonzero(edge_lo)[0]
            if sel.size:
                self.wall_sets.append((sel, axis, sign))
        solid = solid_raster(self.boundaries, topo, 0)
        self.sticky = np.nonzero(solid[coords[:, 0], coords[:, 1]])[0]

    def sync_topology(self):
        if self._version != self.topology.version:
            self._alloc()

    def clear(self):
        self.mass[:] = 0.0
        self.mom[:] = 0.0
        self.f_int[:] = 0.0
        self.vel[:] = 0.0


_OFF_X = np.array([0, 1, 2, 0, 1, 2, 0, 1, 2])
_OFF_Y = np.array([0, 0, 0, 1, 1, 1, 2, 2, 2])


def stencil(positions: np.ndarray, topology: Topology):
    """Quadratic B-spline stencil over the finest-level node map.

    Returns (idx, w, gx, gy, dpos_x, dpos_y) with shapes (n, 9): flat node
    indices, weights, weight gradients with respect to the particle
    position, and node offsets from the particle.
    """
    nx, ny = topology.cells_dims(0)
    cmap = topology.cell_map(0)
    periodic = topology.periodic
    base = np.floor(positions - 0.5).astype(np.int64)
    f = positions - base           # in [0.5, 1.5)
    fx, fy = f[:, 0], f[:, 1]
    wx = np.stack([0.5 * (1.5 - fx) ** 2, 0.75 - (fx - 1.0) ** 2,
                   0.5 * (fx - 0.5) ** 2], axis=1)
    wy = np.stack([0.5 * (1.5 - fy) ** 2, 0.75 - (fy - 1.0) ** 2,
                   0.5 * (fy - 0.5) ** 2], axis=1)
    dwx = np.stack([fx - 1.5, -2.0 * (fx - 1.0), fx - 0.5], axis=1)
    dwy = np.stack([fy - 1.5, -2.0 * (fy - 1.0), fy - 0.5], axis=1)

    cx = base[:, 0:1] + np.arange(3)
    cy = base[:, 1:2] + np.arange(3)
    if periodic[0]:
        cx = cx % nx
    elif (cx[:, 0] < 0).any() or (cx[:, 2] >= nx).any():
        raise TopologyError("particle stencil leaves the domain in x")
    if periodic[1]:
        cy = cy % ny
    elif (cy[:, 0] < 0).any() or (cy[:, 2] >= ny).any():
        raise TopologyError("particle stencil leaves the domain in y")
    idx = cmap[cx[:, _OFF_X], cy[:, _OFF_Y]]
    if (idx < 0).any():
        p, k = np.argwhere(idx < 0)[0]
        raise TopologyError(
            f"particle stencil node ({cx[p, _OFF_X[k]]},{cy[p, _OFF_Y[k]]}) "
            f"not stored at the finest level")
    w = wx[:, _OFF_X] * wy[:, _OFF_Y]
    gx = dwx[:, _OFF_X] * wy[:, _OFF_Y]
    gy = wx[:, _OFF_X] * dwy[:, _OFF_Y]
    dpos_x = (base[:, 0:1] + _OFF_X[None, :]) - positions[:, 0:1]
    dpos_y = (base[:, 1:2] + _OFF_Y[None, :]) - positions[:, 1:2]
    return idx, w, gx, gy, dpos_x, dpos_y


def svd2(F: np.ndarray):
    """Batched closed-form SVD of 2x2 matrices with rotation factors.

    For det(F) > 0 both factors are proper rotations and both singular
    values are positive.
    """
    a = F[:, 0, 0]
    b = F[:, 0, 1]
    c = F[:, 1, 0]
    d = F[:, 1, 1]
    e = 0.5 * (a + d)
    f = 0.5 * (a - d)
    g = 0.5 * (c + b)
    h = 0.5 * (c - b)
    q = np.hypot(e, h)
    r = np.hypot(f, g)
    sx = q + r
    sy = q - r
    a1 = np.arctan2(g, f)
    a2 = np.arctan2(h, e)
    th_u = 0.5 * (a1 + a2)
    th_v = 0.5 * (a1 - a2)

    def rot(t):
        ct, st = np.cos(t), np.sin(t)
        out = np.empty((len(t), 2, 2))
        out[:, 0, 0] = ct
        out[:, 0, 1] = -st
        out[:, 1, 0] = st
        out[:, 1, 1] = ct
        return out

    return rot(th_u), np.stack([sx, sy], axis=1), rot(th_v)


def dp_return_map(eps: np.ndarray, vol_corr: np.ndarray, mat: SandMaterial):
    """Drucker-Prager projection of principal Hencky strains (batched).

    Accumulated log-volume is re-injected before projecting; the unrealized
    trace change goes back to the accumulator.  Returns (eps_new, vc_new,
    case) with case 0 elastic, 1 tip, 2 shear.
    """
    e = eps + 0.5 * vol_corr[:, None]
    tr = e.sum(axis=1)
    ehat = e - 0.5 * tr[:, None]
    norm = np.sqrt((ehat ** 2).sum(axis=1))
    dg = norm + ((2.0 * mat.lam + 2.0 * mat.mu) / (2.0 * mat.mu)) \
        * tr * mat.alpha

    tip = tr > 0.0
    shear = (~tip) & (norm > 0.0) & (dg > 0.0)
    eps_new = e.copy()
    eps_new[tip] = 0.0
    if shear.any():
        scale = dg[shear] / norm[shear]
        eps_new[shear] = e[shear] - scale[:, None] * ehat[shear]
    vc_new = tr - eps_new.sum(axis=1)
    case = np.zeros(len(e), dtype=np.int8)
    case[tip] = 1
    case[shear] = 2
    return eps_new, vc_new, case


def plasticity_project(F: np.ndarray, vol_corr: float = 0.0,
                       mat: SandMaterial | None = None):
    """Project a single deformation gradient; returns (F_new, vol_corr_new)."""
    mat = mat or SandMaterial()
    F = np.asarray(F, dtype=float).reshape(1, 2, 2)
    det = np.linalg.det(F[0])
    if det <= 0.0:
        raise ValueError(f"degenerate deformation gradient, det={det}")
    U, sig, V = svd2(F)
    eps = np.log(sig)
    eps_new, vc_new, case = dp_return_map(eps, np.array([vol_corr]), mat)
    s = np.exp(eps_new)
    out = U[0] @ np.diag(s[0]) @ V[0].T
    return out, float(vc_new[0]), int(case[0])


def kirchhoff_stress(particles: Particles, mat: SandMaterial) -> np.ndarray:
    """Per-particle Kirchhoff stress (2, 2) from Hencky elasticity.

    V_p^n sigma_p = V_p^0 tau_p, so forces use this directly.
    """
    U, sig, _ = svd2(particles.F)
    eps = np.log(np.maximum(sig, 1e-12))
    tr = eps.sum(axis=1)
    tau_pr = 2.0 * mat.mu * eps + mat.lam * tr[:, None]
    # rotate principal stresses back: U diag(tau) U^T
    t0 = tau_pr[:, 0]
    t1 = tau_pr[:, 1]
    u00, u01 = U[:, 0, 0], U[:, 0, 1]
    u10, u11 = U[:, 1, 0], U[:, 1, 1]
    out = np.empty((len(particles), 2, 2))
    out[:, 0, 0] = t0 * u00 * u00 + t1 * u01 * u01
    out[:, 0, 1] = t0 * u00 * u10 + t1 * u01 * u11
    out[:, 1, 0] = out[:, 0, 1]
    out[:, 1, 1] = t0 * u10 * u10 + t1 * u11 * u11
    return out


def p2g(particles: Particles, grid: MpmGrid, mat: SandMaterial, st=None):
    """Scatter mass, APIC momentum, and internal forces to the grid.

    ``st`` lets callers reuse a stencil computed for the same positions.
    """
    grid.sync_topology()
    grid.clear()
    if not len(particles):
        return
    idx, w, gx_, gy_, dpx, dpy = st if st is not None \
        else stencil(particles.x, grid.topology)
    tau = kirchhoff_stress(particles, mat)
    fxx = (particles.V0 * tau[:, 0, 0])[:, None]
    fxy = (particles.V0 * tau[:, 0, 1])[:, None]
    fyy = (particles.V0 * tau[:, 1, 1])[:, None]
    m = particles.m[:, None]
    C = particles.C
    n = grid.mass.shape[0]
    flat = idx.ravel()
    wm = w * m
    grid.mass += np.bincount(flat, weights=wm.ravel(), minlength=n)
    ax = particles.v[:, 0:1] + C[:, 0, 0, None] * dpx + C[:, 0, 1, None] * dpy
    ay = particles.v[:, 1:2] + C[:, 1, 0, None] * dpx + C[:, 1, 1, None] * dpy
    grid.mom[:, 0] += np.bincount(flat, weights=(wm * ax).ravel(), minlength=n)
    grid.mom[:, 1] += np.bincount(flat, weights=(wm * ay).ravel(), minlength=n)
    grid.f_int[:, 0] -= np.bincount(
        flat, weights=(fxx * gx_ + fxy * gy_).ravel(), minlength=n)
    grid.f_int[:, 1] -= np.bincount(
        flat, weights=(fxy * gx_ + fyy * gy_).ravel(), minlength=n)


def grid_update(grid: MpmGrid, dt: float, gravity, drag: np.ndarray | None = None,
                floor_friction: float = 0.5):
    """Velocities from momentum plus forces; project boundary nodes."""
    massive = grid.mass > 0.0
    inv_m = np.zeros_like(grid.mass)
    inv_m[massive] = 1.0 / grid.mass[massive]
    force = grid.f_int.copy()
    if drag is not None:
        force += drag
    grid.vel = (grid.mom + dt * force) * inv_m[:, None]
    grid.vel[massive] += dt * np.asarray(gravity)[None, :]
    grid.vel[~massive] = 0.0

    for sel, axis, sign in grid.wall_sets:
        v = grid.vel[sel]
        vn = sign * v[:, axis]
        into = vn < 0.0
        if not into.any():
            continue
        vt_axis = 1 - axis
        vt = v[into, vt_axis]
        vn_in = vn[into]
        scale = np.maximum(0.0, 1.0 - floor_friction * (-vn_in)
                           / np.maximum(np.abs(vt), 1e-14))
        v[into, axis] = 0.0
        v[into, vt_axis] = vt * scale
        grid.vel[sel] = v
    if grid.sticky.size:
        grid.vel[grid.sticky] = 0.0


def g2p(particles: Particles, grid: MpmGrid, dt: float, mat: SandMaterial,
        plastic: bool = True, st=None):
    """Gather velocities, advect, update deformation gradients, project.

    Returns the number of particles clamped at non-periodic domain edges.
    """
    if not len(particles):
        return 0
    idx, w, _, _, dpx, dpy = st if st is not None \
        else stencil(particles.x, grid.topology)
    gvx = grid.vel[idx, 0]          # (n, 9)
    gvy = grid.vel[idx, 1]
    wgx = w * gvx
    wgy = w * gvy
    new_v = np.stack([wgx.sum(axis=1), wgy.sum(axis=1)], axis=1)
    new_C = np.empty_like(particles.C)
    new_C[:, 0, 0] = 4.0 * (wgx * dpx).sum(axis=1)
    new_C[:, 0, 1] = 4.0 * (wgx * dpy).sum(axis=1)
    new_C[:, 1, 0] = 4.0 * (wgy * dpx).sum(axis=1)
    new_C[:, 1, 1] = 4.0 * (wgy * dpy).sum(axis=1)
    particles.v = new_v
    particles.C = new_C
    particles.x = particles.x + dt * new_v

    nx, ny = grid.topology.cells_dims(0)
    clamped = 0
    for axis, dim in ((0, nx), (1, ny)):
        if grid.topology.periodic[axis]:
            particles.x[:, axis] %= dim
        else:
            lo, hi = 2.0, dim - 2.0
            out = (particles.x[:, axis] < lo) | (particles.x[:, axis] > hi)
            clamped += int(out.sum())
            particles.x[:, axis] = particles.x[:, axis].clip(lo, hi)

    ident = np.eye(2)[None, :, :]
    grad = ident + dt * particles.C
    particles.F = _matmul2(grad, particles.F)
    if plastic:
        U, sig, V = svd2(particles.F)
        # violent impacts can push the trial stretch through zero; clamp the
        # principal stretches to keep the gradient invertible
        sig = np.clip(sig, 0.05, 4.0)
        eps = np.log(sig)
        eps_new, vc_new, _ = dp_return_map(eps, particles.vol_corr, mat)
        s = np.exp(eps_new)
        particles.vol_corr = vc_new
        particles.F = _compose_svd(U, s, V)
    return clamped


def _matmul2(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batched 2x2 matrix product (a @ b), spelled out for speed."""
    out = np.empty_like(a)
    out[:, 0, 0] = a[:, 0, 0] * b[:, 0, 0] + a[:, 0, 1] * b[:, 1, 0]
    out[:, 0, 1] = a[:, 0, 0] * b[:, 0, 1] + a[:, 0, 1] * b[:, 1, 1]
    out[:, 1, 0] = a[:, 1, 0] * b[:, 0, 0] + a[:, 1, 1] * b[:, 1, 0]
    out[:, 1, 1] = a[:, 1, 0] * b[:, 0, 1] + a[:, 1, 1] * b[:, 1, 1]
    return out


def _compose_svd(U: np.ndarray, s: np.ndarray, V: np.ndarray) -> np.ndarray:
    """Batched U diag(s) V^T."""
    out = np.empty_like(U)
    us0 = U[:, :, 0] * s[:, 0:1]
    us1 = U[:, :, 1] * s[:, 1:2]
    out[:, :, 0] = us0 * V[:, 0, 0, None] + us1 * V[:, 0, 1, None]
    out[:, :, 1] = us0 * V[:, 1, 0, None] + us1 * V[:, 1, 1, None]
    return out


def mpm_step(particles: Particles, grid: MpmGrid, dt: float, gravity,
             mat: SandMaterial, drag: np.ndarray | None = None,
             plastic: bool = True, st=None) -> int:
    """One explicit MPM step: P2G, grid update, G2P."""
    grid.sync_topology()
    if st is None and len(particles):
        st = stencil(particles.x, grid.topology)
    p2g(particles, grid, mat, st=st)
    grid_update(grid, dt, gravity, drag=drag,
                floor_friction=mat.floor_friction)
    return g2p(particles, grid, dt, mat, plastic=plastic, st=st)


def cfl_check(particles: Particles, dt: float) -> bool:
    """Max particle displacement per step must stay under half a cell."""
    if not len(particles):
        return True
    return float(np.abs(particles.v).max()) * dt < 0.5

"""Two-way fluid-sediment exchange and the coupled step orchestration.

Volume fractions and drag live on the finest level, collocated with the MPM
grid nodes, so the exchange is stencil-free.  Each finest cycle runs: coarser
levels per the recursion, level-0 streaming, the exchange (fractions, drag,
mixture force), the MPM step at its cadence, level-0 collision with the
epsilon-scaled relaxation time, boundaries, the powder transport step, and
grid adaptation.

Newton's third law is exact by construction: the fluid force contribution is
the negated sediment drag array.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import granular
from .adapt import GridAdaptor, RefineDriver
from .granular import MpmGrid, Particles, SandMaterial, kirchhoff_stress, stencil
from .solver import MultiLevelSolver
from .sparse_grid import Topology


@dataclass
class UnitScale:
    """Physical scales of the finest lattice: meters, seconds, kg/m^3."""

    dx: float = 1.0
    dt: float = 1.0
    rho: float = 1.0

    def __post_init__(self):
        if self.dx <= 0 or self.dt <= 0 or self.rho <= 0:
            raise ValueError("unit scales must be positive")

    @property
    def C(self) -> float:
        """Force-density conversion factor (physical = C * lattice)."""
        return self.rho * self.dx / self.dt ** 2

    def velocity_to_lattice(self, v: float) -> float:
        return v * self.dt / self.dx

    def accel_to_lattice(self, a: float) -> float:
        return a * self.dt ** 2 / self.dx

    def force_density_to_lattice(self, f: float) -> float:
        return f / self.C

    def stress_to_lattice(self, s: float) -> float:
        return s / (self.rho * (self.dx / self.dt) ** 2)

    def time_to_lattice(self, t: float) -> float:
        return t / self.dt


@dataclass
class DragParams:
    """Di Felice drag model constants."""

    d_p: float | None = None       # particle diameter; derived from V0 if None
    re_min: float = 0.01


@dataclass
class PowderParams:
    entrain: float = 0.0           # entrainment coefficient E
    diffusion: float = 0.05        # diffusion coefficient D
    sign: float = 1.0              # +1 stable; -1 reproduces the printed form
    eta_surface: float = 0.6

    def check_stability(self, dt: float = 1.0):
        if self.sign > 0 and self.diffusion * dt > 0.25:
            raise ValueError(
                f"diffusion number D*dt={self.diffusion * dt} exceeds 0.25")


@dataclass
class CouplingFields:
    """Per finest-cell exchange state for one cycle."""

    eps: np.ndarray
    eta: np.ndarray
    vx: np.ndarray
    vy: np.ndarray
    area: np.ndarray
    mass: np.ndarray
    fs: np.ndarray            # (n, 2) drag on sediment; fluid gets -fs
    force: np.ndarray         # (n, 2) total lattice force on the fluid
    grad_term: np.ndarray     # (n, 2) modified-pressure gradient part
    rel: np.ndarray | None = None   # (n, 2) u - v at the exchange point


def rasterize_fractions(particles: Particles, topology: Topology,
                        phi: np.ndarray, eps_min: float,
                        drag: DragParams, st=None) -> CouplingFields:
    """Quadratic B-spline rasterization of sediment fraction, velocity, and
    cross-section area; eps = clamp(1 - eta - phi)."""
    n = topology.cell_count(0)
    eta = np.zeros(n)
    mass = np.zeros(n)
    momx = np.zeros(n)
    momy = np.zeros(n)
    area = np.zeros(n)
    if len(particles):
        idx, w, _, _, _, _ = st if st is not None \
            else stencil(particles.x, topology)
        a_p = 2.0 * np.sqrt(particles.V0 / np.pi)
        flat = idx.ravel()
        eta += np.bincount(flat, weights=(w * particles.V0[:, None]).ravel(),
                           minlength=n)
        wm = w * particles.m[:, None]
        mass += np.bincount(flat, weights=wm.ravel(), minlength=n)
        momx += np.bincount(flat, weights=(wm * particles.v[:, 0:1]).ravel(),
                            minlength=n)
        momy += np.bincount(flat, weights=(wm * particles.v[:, 1:2]).ravel(),
                            minlength=n)
        area += np.bincount(flat, weights=(w * a_p[:, None]).ravel(),
                            minlength=n)
    massive = mass > 0
    vx = np.zeros(n)
    vy = np.zeros(n)
    vx[massive] = momx[massive] / mass[massive]
    vy[massive] = momy[massive] / mass[massive]
    eta_eff = np.maximum(eta - phi, 0.0)
    eps = np.clip(1.0 - eta_eff - phi, eps_min, 1.0)
    return CouplingFields(eps=eps, eta=eta_eff, vx=vx, vy=vy, area=area,
                          mass=mass, fs=np.zeros((n, 2)),
                          force=np.zeros((n, 2)), grad_term=np.zeros((n, 2)))


def difelice_drag(fields: CouplingFields, rho: np.ndarray,
                  ux: np.ndarray, uy: np.ndarray, nu: float,
                  params: DragParams, d_p: float) -> np.ndarray:
    """Di Felice drag on the sediment per cell; the fluid receives -fs."""
    relx = ux - fields.vx
    rely = uy - fields.vy
    fields.rel = np.stack([relx, rely], axis=1)
    speed = np.hypot(relx, rely)
    active = (fields.area > 0) & (speed > 0)
    fs = np.zeros((len(rho), 2))
    if not active.any():
        fields.fs = fs
        return fs
    eps = fields.eps[active]
    sp = speed[active]
    re = np.maximum(eps * sp * d_p / nu, params.re_min)
    cd = (0.63 + 4.8 / np.sqrt(re)) ** 2
    chi = 3.7 - 0.65 * np.exp(-0.5 * (1.5 - np.log10(re)) ** 2)
    coef = 0.5 * cd * eps ** (-chi) * rho[active] * fields.area[active] * sp
    fs[active, 0] = coef * relx[active]
    fs[active, 1] = coef * rely[active]
    fields.fs = fs
    return fs


def grad_eps(eps: np.ndarray, topology: Topology) -> np.ndarray:
    """Central differences of the fluid fraction on the finest grid; missing
    neighbors fall back to the cell's own value (one-sided ~ zero slope)."""
    cmap = topology.cell_map(0)
    nx, ny = topology.cells_dims(0)
    coords = topology.cell_coords(0)
    out = np.empty((len(eps), 2))
    own = np.arange(len(eps))
    for axis in (0, 1):
        for sign, col in ((1, 0), (-1, 1)):
            nb = coords.copy()
            nb[:, axis] += sign
            if topology.periodic[axis]:
                nb[:, axis] %= (nx, ny)[axis]
            else:
                nb[:, axis] = nb[:, axis].clip(0, (nx, ny)[axis] - 1)
            flat = cmap[nb[:, 0], nb[:, 1]]
            flat = np.where(flat >= 0, flat, own)
            if sign == 1:
                plus = eps[flat]
            else:
                minus = eps[flat]
        out[:, axis] = 0.5 * (plus - minus)
    return out


def mixture_force(fields: CouplingFields, rho: np.ndarray,
                  topology: Topology, gravity, rho0: float = 1.0) -> np.ndarray:
    """Total lattice force on the fluid: modified-pressure gradient term plus
    gravity and the reaction to the sediment drag (all in lattice units;
    physical inputs are converted through UnitScale at configuration time)."""
    g = grad_eps(fields.eps, topology)
    coef = (rho - rho0) / fields.eps
    fields.grad_term = coef[:, None] * g
    force = fields.grad_term.copy()
    force[:, 0] += rho * gravity[0] - fields.fs[:, 0]
    force[:, 1] += rho * gravity[1] - fields.fs[:, 1]
    fields.force = force
    return force


def sample_bilinear(values: np.ndarray, positions: np.ndarray,
                    topology: Topology) -> np.ndarray:
    """Multilinear sampling of a finest-level field at arbitrary positions.

    Missing corners drop out with their weight (renormalized), so samples
    near storage edges degrade gracefully.
    """
    cmap = topology.cell_map(0)
    nx, ny = topology.cells_dims(0)
    base = np.floor(positions).astype(np.int64)
    frac = positions - base
    acc = np.zeros(len(positions))
    wsum = np.zeros(len(positions))
    for oy in (0, 1):
        for ox in (0, 1):
            cx = base[:, 0] + ox
            cy = base[:, 1] + oy
            cx = cx % nx if topology.periodic[0] else cx.clip(0, nx - 1)
            cy = cy % ny if topology.periodic[1] else cy.clip(0, ny - 1)
            flat = cmap[cx, cy]
            wx = frac[:, 0] if ox else 1.0 - frac[:, 0]
            wy = frac[:, 1] if oy else 1.0 - frac[:, 1]
            w = wx * wy * (flat >= 0)
            acc += w * values[flat.clip(min=0)]
            wsum += w
    ok = wsum > 0
    acc[ok] /= wsum[ok]
    return acc


def powder_step(phi: np.ndarray, ux: np.ndarray, uy: np.ndarray,
                topology: Topology, params: PowderParams, dt: float,
                source: np.ndarray | None = None) -> np.ndarray:
    """Transport-diffusion update of the powder fraction on the finest level.

    Semi-Lagrangian advection with an RK3 backtrace and multilinear sampling,
    then forward-Euler diffusion (sign=+1; the -1 switch reproduces the
    anti-diffusive printed form for inspection), then the entrainment source.
    """
    params.check_stability(dt)
    coords = topology.cell_coords(0).astype(float)

    def vel_at(pos):
        return np.stack([sample_bilinear(ux, pos, topology),
                         sample_bilinear(uy, pos, topology)], axis=1)

    k1 = vel_at(coords)
    k2 = vel_at(coords - 0.5 * dt * k1)
    k3 = vel_at(coords - 0.75 * dt * k2)
    back = coords - dt * (2.0 * k1 + 3.0 * k2 + 4.0 * k3) / 9.0
    adv = sample_bilinear(phi, back, topology)

    # 5-point Laplacian; missing neighbors mirror the cell (zero flux)
    cmap = topology.cell_map(0)
    nx, ny = topology.cells_dims(0)
    icoords = topology.cell_coords(0)
    own = np.arange(len(phi))
    lap = -4.0 * adv
    for axis in (0, 1):
        for sign in (1, -1):
            nb = icoords.copy()
            nb[:, axis] += sign
            if topology.periodic[axis]:
                nb[:, axis] %= (nx, ny)[axis]
            else:
                nb[:, axis] = nb[:, axis].clip(0, (nx, ny)[axis] - 1)
            flat = cmap[nb[:, 0], nb[:, 1]]
            flat = np.where(flat >= 0, flat, own)
            lap += adv[flat]
    out = adv + params.sign * params.diffusion * dt * lap
    if source is not None:
        out = out + dt * source
    return out


def entrainment_rate(fields: CouplingFields, particles: Particles,
                     topology: Topology, mat: SandMaterial,
                     params: PowderParams, st=None) -> np.ndarray:
    """q_e = E |v^T sigma v|/|v| at surface cells of the granular phase."""
    n = topology.cell_count(0)
    q = np.zeros(n)
    if params.entrain <= 0.0 or not len(particles):
        return q
    # rasterized sediment stress per cell
    tau = kirchhoff_stress(particles, mat)
    idx, w, _, _, _, _ = st if st is not None \
        else stencil(particles.x, topology)
    wv = w * particles.V0[:, None]
    flat = idx.ravel()
    sxx = np.bincount(flat, weights=(wv * tau[:, 0, 0, None]).ravel(),
                      minlength=n)
    sxy = np.bincount(flat, weights=(wv * tau[:, 0, 1, None]).ravel(),
                      minlength=n)
    syy = np.bincount(flat, weights=(wv * tau[:, 1, 1, None]).ravel(),
                      minlength=n)

    speed = np.hypot(fields.vx, fields.vy)
    eta = fields.eta
    # surface: partially filled cells with an empty neighbor
    cmap = topology.cell_map(0)
    nx, ny = topology.cells_dims(0)
    coords = topology.cell_coords(0)
    has_empty = np.zeros(n, dtype=bool)
    for axis in (0, 1):
        for sign in (1, -1):
            nb = coords.copy()
            nb[:, axis] += sign
            if topology.periodic[axis]:
                nb[:, axis] %= (nx, ny)[axis]
            else:
                nb[:, axis] = nb[:, axis].clip(0, (nx, ny)[axis] - 1)
            flat = cmap[nb[:, 0], nb[:, 1]]
            has_empty |= (flat < 0) | (eta[flat.clip(min=0)] < 1e-3)
    surface = (eta > 0.0) & (eta < params.eta_surface) & has_empty \
        & (speed > 0.0)
    if surface.any():
        vsv = fields.vx[surface] ** 2 * sxx[surface] \
            + 2.0 * fields.vx[surface] * fields.vy[surface] * sxy[surface] \
            + fields.vy[surface] ** 2 * syy[surface]
        # cohesionless stress states are compressive; the source strength is
        # the magnitude of the stress power along the flow
        q[surface] = params.entrain * np.abs(vsv) / speed[surface]
    return q


@dataclass
class DiagRow:
    step: int
    t_phys: float
    fluid_mom: tuple
    sediment_mom: tuple
    drag_impulse: tuple
    sum_phi: float
    tiles: tuple
    eps_min: float


class CoupledSim:
    """Owns the solver, the granular phase, and the exchange per cycle."""

    def __init__(self, solver: MultiLevelSolver, particles: Particles | None,
                 material: SandMaterial | None = None,
                 sediment_gravity=None,
                 drag: DragParams | None = None,
                 powder: PowderParams | None = None,
                 adaptor: GridAdaptor | None = None,
                 static_tiles: np.ndarray | None = None,
                 unit_scale: UnitScale | None = None):
        self.solver = solver
        self.topology = solver.topology
        self.pair = solver.pair
        self.particles = particles if particles is not None else Particles(0)
        self.material = material or SandMaterial()
        self.drag_params = drag or DragParams()
        self.powder = powder
        self.adaptor = adaptor
        self.static_tiles = static_tiles
        self.unit_scale = unit_scale or UnitScale()
        self.sediment_gravity = np.asarray(
            sediment_gravity if sediment_gravity is not None
            else solver.params.gravity, dtype=float)
        self.grid = MpmGrid(self.topology, solver.boundaries)
        self.cadence = solver.params.mpm_cadence
        self.step_count = 0
        self.threads = 1          # recorded worker count; kernels are
        self.diagnostics: list = []   # vectorized and thread-count-invariant
        self.cfl_flags = 0
        self.clamped_particles = 0
        self.last_fields: CouplingFields | None = None
        if self.drag_params.d_p is None and len(self.particles):
            self.drag_params.d_p = float(
                2.0 * np.sqrt(self.particles.V0.mean() / np.pi))
        if self.powder is not None:
            self.powder.check_stability(1.0)

    @property
    def coupling_active(self) -> bool:
        return len(self.particles) > 0

    @staticmethod
    def _limit_drag(fields: CouplingFields, rho, ux, uy, dt: float,
                    beta_exact: float = 0.5):
        """Stability limiter for the explicit drag exchange.

        beta measures the nominal drag impulse against the reduced-mass
        impulse that would equalize the relative velocity in one step; the
        explicit exchange oscillates unstably once the realized beta nears 2.
        Below ``beta_exact`` the formula passes through untouched; above it
        the transfer saturates smoothly at beta_exact + 1 (< 2).  Both sides
        scale identically, so Newton's third law is untouched.
        """
        fs_mag = np.hypot(fields.fs[:, 0], fields.fs[:, 1])
        hot = fs_mag > 0
        if not hot.any():
            return
        w_rel = np.hypot(ux - fields.vx, uy - fields.vy)[hot]
        inv_mass = 1.0 / rho[hot] + 1.0 / np.maximum(fields.mass[hot], 1e-12)
        beta = fs_mag[hot] * dt * inv_mass / np.maximum(w_rel, 1e-14)
        over = np.maximum(beta - beta_exact, 0.0)
        realized = np.minimum(beta, beta_exact) + over / (1.0 + over)
        scale = realized / np.maximum(beta, 1e-14)
        fields.fs[hot] *= scale[:, None]

    def _exchange(self, solver):
        """Ex phase: fractions, drag, mixture force, then the MPM step."""
        _, w = solver.roles(0)
        dst = solver.arrays(w, 0)
        r, _ = solver.roles(0)
        src = solver.arrays(r, 0)
        rho = dst["rho"]
        # bare post-streaming velocity at the exchange point
        ux = dst["ux"] / rho
        uy = dst["uy"] / rho
        phi = src["phi"]

        st = granular.stencil(self.particles.x, self.topology) \
            if len(self.particles) else None
        self._last_stencil = st
        fields = rasterize_fractions(self.particles, self.topology, phi,
                                     solver.params.eps_min, self.drag_params,
                                     st=st)
        nu = solver.level_params.nu(0)
        difelice_drag(fields, rho, ux, uy, nu, self.drag_params,
                      self.drag_params.d_p or 1.0)
        self._limit_drag(fields, rho, ux, uy, float(self.cadence))
        mixture_force(fields, rho, self.topology, solver.params.gravity,
                      solver.params.rho0)
        self.last_fields = fields

        for tree in self.pair.trees:
            arrays = tree.levels[0]
            arrays["eps"][:] = fields.eps
            arrays["fx"][:] = fields.force[:, 0]
            arrays["fy"][:] = fields.force[:, 1]

        # MPM consumes the sediment-side drag before the fluid collides
        dt = float(self.cadence)
        self.grid.drag = fields.fs
        clamped = granular.mpm_step(self.particles, self.grid, dt,
                                    self.sediment_gravity, self.material,
                                    drag=fields.fs, st=st)
        self.clamped_particles += clamped
        if not granular.cfl_check(self.particles, dt):
            self.cfl_flags += 1

        tau_eff = fields.eps * solver.level_params.taus[0]
        return (fields.force[:, 0], fields.force[:, 1]), tau_eff

    def step(self):
        """One finest cycle of the coupled pipeline."""
        solver = self.solver
        schedule = solver._schedule
        cycle = schedule[solver.k[0] % len(schedule)]
        is_mpm_cycle = self.coupling_active \
            and (self.step_count % self.cadence == 0)

        if is_mpm_cycle:
            solver.run_cycle(cycle, hook=self._exchange)
        elif self.coupling_active:
            # held force and fractions from the last exchange
            def held(sv):
                _, w = sv.roles(0)
                dst = sv.arrays(w, 0)
                tau_eff = dst["eps"] * sv.level_params.taus[0]
                return (dst["fx"], dst["fy"]), tau_eff
            solver.run_cycle(cycle, hook=held)
        else:
            solver.run_cycle(cycle)

        if self.powder is not None:
            self._powder_cycle(is_mpm_cycle)

        if self.adaptor is not None and self.coupling_active \
                and self.step_count % self.cadence == 0:
            driver = RefineDriver(positions=self.particles.x,
                                  static_tiles=self.static_tiles,
                                  levels=self.topology.levels)
            self.adaptor.update(driver, self.pair)
            self.grid.sync_topology()

        self.step_count += 1
        self._record_diagnostics()

    def _powder_cycle(self, is_mpm_cycle):
        solver = self.solver
        _, w = solver.last_roles(0)
        dst = solver.arrays(w, 0)
        r, _ = solver.last_roles(0)
        src = solver.arrays(r, 0)
        source = None
        if is_mpm_cycle and self.last_fields is not None:
            # note: positions moved during g2p, so the shared stencil is a
            # same-step approximation only for rasterizing the stress
            source = entrainment_rate(self.last_fields, self.particles,
                                      self.topology, self.material,
                                      self.powder)
        phi_new = powder_step(src["phi"], dst["ux"], dst["uy"],
                              self.topology, self.powder, 1.0, source=source)
        dst["phi"][:] = phi_new

    def _record_diagnostics(self):
        solver = self.solver
        _, w = solver.last_roles(0)
        arr = solver.arrays(w, 0)
        fm = np.zeros(2)
        sum_phi = 0.0
        eps_min = 1.0
        for level in range(self.topology.levels):
            if not len(self.topology.tables[level]):
                continue
            lw = solver.last_roles(level)[1] if solver.k[level] else 0
            a = solver.arrays(lw, level)
            coords = self.topology.cell_coords(level)
            leaf = self.topology.leaf_cells(level)[coords[:, 0], coords[:, 1]]
            vol = float(4 ** level)
            fm[0] += vol * (a["rho"][leaf] * a["ux"][leaf]).sum()
            fm[1] += vol * (a["rho"][leaf] * a["uy"][leaf]).sum()
            sum_phi += vol * a["phi"][leaf].sum()
            if leaf.any():
                eps_min = min(eps_min, float(a["eps"][leaf].min()))
        drag = self.last_fields.fs.sum(axis=0) if self.last_fields is not None \
            else np.zeros(2)
        self.diagnostics.append(DiagRow(
            step=self.step_count,
            t_phys=self.step_count * self.unit_scale.dt,
            fluid_mom=(float(fm[0]), float(fm[1])),
            sediment_mom=tuple(self.particles.momentum().tolist())
            if len(self.particles) else (0.0, 0.0),
            drag_impulse=(float(-drag[0]), float(-drag[1])),
            sum_phi=float(sum_phi),
            tiles=tuple(len(t) for t in self.topology.tables),
            eps_min=eps_min))

    def fluid_momentum(self) -> np.ndarray:
        row = self.diagnostics[-1] if self.diagnostics else None
        if row is None:
            self._record_diagnostics()
            row = self.diagnostics.pop()
        return np.array(row.fluid_mom)

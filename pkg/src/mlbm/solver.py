"""Multi-level moment-space LBM advance.

Streaming is pull-form: each cell reconstructs its neighbors' distributions
on demand, reduces them to intermediate moments, and applies the moment-space
BGK collision with forcing.  Levels sub-cycle recursively (one coarse step
spawns two fine steps); macroscopic state crosses level transitions through
the downward/upward interface sets with the non-equilibrium part of S
rescaled between levels.

All kernels are data-parallel over cells with strict read-tree/write-tree
separation; single-threaded execution is bitwise deterministic.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .lattice import CS2, D2Q9, DivergenceError, seq
from . import lattice
from .sparse_grid import (
    InterfaceSets,
    PingPongPair,
    Topology,
    TopologyError,
    buffer_roles,
    classify_interfaces,
)

RESCALE_DERIVED = "derived"
RESCALE_PAPER_LITERAL = "paper_literal"


def rescale_tau(tau_l: float, k: int) -> float:
    """Relaxation time at a level k steps coarser (viscosity halves per level)."""
    return tau_l / 2.0 ** k + (2.0 ** k - 1.0) / 2.0 ** (k + 1)


def _kappa_up(tau_l, tau_lp1, convention):
    if convention == RESCALE_DERIVED:
        return 2.0 * tau_lp1 / tau_l
    if convention == RESCALE_PAPER_LITERAL:
        return tau_lp1 / (2.0 * tau_l)
    raise ValueError(f"unknown rescale convention {convention!r}")


def _kappa_down(tau_l, tau_lp1, convention):
    if convention == RESCALE_DERIVED:
        return tau_l / (2.0 * tau_lp1)
    if convention == RESCALE_PAPER_LITERAL:
        return 2.0 * tau_lp1 / tau_l
    raise ValueError(f"unknown rescale convention {convention!r}")


def rescale_s_up(s, u, tau_l, tau_lp1, convention=RESCALE_DERIVED):
    """Fine -> coarse rescale of the full second moment (components (..,3))."""
    s = np.asarray(s, dtype=float)
    eq = seq(u)
    return _kappa_up(tau_l, tau_lp1, convention) * (s - eq) + eq


def rescale_s_down(s, u, tau_l, tau_lp1, convention=RESCALE_DERIVED):
    """Coarse -> fine rescale; inverse of :func:`rescale_s_up` under
    the derived convention."""
    s = np.asarray(s, dtype=float)
    eq = seq(u)
    return _kappa_down(tau_l, tau_lp1, convention) * (s - eq) + eq


@dataclass
class LevelParams:
    """Per-level lattice scales derived from the finest relaxation time."""

    levels: int
    tau0: float
    taus: list = field(default_factory=list)

    def __post_init__(self):
        if self.tau0 <= 0.5:
            raise ValueError(f"tau0 must exceed 1/2, got {self.tau0}")
        self.taus = [rescale_tau(self.tau0, l) for l in range(self.levels)]

    def dx(self, level: int) -> float:
        return float(1 << level)

    def dt(self, level: int) -> float:
        return float(1 << level)

    def nu(self, level: int) -> float:
        return CS2 * (self.taus[level] - 0.5)


@dataclass
class SolverParams:
    levels: int
    rho0: float = 1.0
    gravity: tuple = (0.0, 0.0)
    eps_min: float = 0.3
    mpm_cadence: int = 1
    rescale_convention: str = RESCALE_DERIVED
    upward_mode: str = "coincident"    # or "average" over the child block

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if not 0.0 < self.eps_min < 1.0:
            raise ValueError("eps_min must lie in (0, 1)")
        if self.mpm_cadence < 1:
            raise ValueError("mpm_cadence must be >= 1")
        if self.upward_mode not in ("coincident", "average"):
            raise ValueError("upward_mode must be 'coincident' or 'average'")


# -- boundary specification ----------------------------------------------------

FACES = ("x_min", "x_max", "y_min", "y_max")
# face -> (axis, side): side 0 = low edge, 1 = high edge
_FACE_GEOM = {"x_min": (0, 0), "x_max": (0, 1), "y_min": (1, 0), "y_max": (1, 1)}


@dataclass
class LogInlet:
    u0: float
    beta: float
    y0: float


@dataclass
class BoundarySpec:
    """Per-face condition plus a static solid mask of axis-aligned boxes.

    Face values: "periodic", "wall", "outlet", or a LogInlet.  Boxes are
    (x0, y0, x1, y1) in finest cell units, half-open.
    """

    faces: dict = field(default_factory=lambda: {f: "periodic" for f in FACES})
    solid_boxes: list = field(default_factory=list)

    def validate(self, finest_cells):
        for fa, fb in (("x_min", "x_max"), ("y_min", "y_max")):
            pa = self.faces[fa] == "periodic"
            pb = self.faces[fb] == "periodic"
            if pa != pb:
                raise ValueError(f"faces {fa}/{fb} must both be periodic or neither")
        for face, cond in self.faces.items():
            if isinstance(cond, LogInlet):
                if face != "x_min":
                    raise ValueError("log inlet is supported on the x_min face")
                if not 0 <= cond.y0 < finest_cells[1]:
                    raise ValueError("log inlet y0 outside the domain height")
            elif cond not in ("periodic", "wall", "outlet"):
                raise ValueError(f"unknown boundary condition {cond!r} on {face}")

    def periodic_axes(self):
        return (self.faces["x_min"] == "periodic",
                self.faces["y_min"] == "periodic")


def solid_raster(spec: BoundarySpec, topology: Topology, level: int) -> np.ndarray:
    """Voxelize the solid boxes at a level: solid if the cell center is inside."""
    nx, ny = topology.cells_dims(level)
    out = np.zeros((nx, ny), dtype=bool)
    if not spec.solid_boxes:
        return out
    scale = 1 << level
    xs = np.arange(nx) * scale
    ys = np.arange(ny) * scale
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    for (x0, y0, x1, y1) in spec.solid_boxes:
        out |= (gx >= x0) & (gx < x1) & (gy >= y0) & (gy < y1)
    return out


# -- per-level kernel tables ----------------------------------------------------


class _LevelTables:
    """Gather tables and masks for one level at one topology version."""

    def __init__(self, solver, level):
        topo = solver.topology
        spec = solver.boundaries
        cmap = topo.cell_map(level)
        nx, ny = topo.cells_dims(level)
        coords = topo.cell_coords(level)
        n = len(coords)
        periodic = topo.periodic

        solid = solid_raster(spec, topo, level)
        self.solid_flat = solid[coords[:, 0], coords[:, 1]]

        # boundary-condition layer: outermost cell layer on inlet/outlet faces
        bc_layer = np.zeros(n, dtype=bool)
        self.outlets = []      # (cells, inner, axis, sign)
        self.inlet = None      # (cells, y_positions)
        for face, cond in spec.faces.items():
            axis, side = _FACE_GEOM[face]
            if cond in ("periodic", "wall"):
                continue
            dim = (nx, ny)[axis]
            edge = 0 if side == 0 else dim - 1
            sel = coords[:, axis] == edge
            if not sel.any():
                continue
            cells = np.nonzero(sel)[0]
            bc_layer[cells] = True
            inner_coords = coords[cells].copy()
            inner_coords[:, axis] += 1 if side == 0 else -1
            inner = cmap[inner_coords[:, 0], inner_coords[:, 1]]
            if (inner < 0).any():
                raise TopologyError(
                    f"face {face} level {level}: boundary cell lacks inner neighbor")
            if cond == "outlet":
                self.outlets.append((cells, inner, axis, -1.0 if side == 0 else 1.0))
            else:  # LogInlet
                ypos = coords[cells, 1].astype(float) * (1 << level)
                self.inlet = (cells, ypos, cond)

        # interface ghost cells
        sets = solver.interfaces
        ghost = np.zeros(n, dtype=bool)
        down = sets.downs.get(level)
        if down is not None:
            ghost[down.targets] = True
        up = sets.ups.get(level)
        if up is not None:
            ghost[up.targets] = True

        self.active = ~(ghost | bc_layer | self.solid_flat)
        self.inactive_idx = np.nonzero(~self.active)[0]
        self.active_idx = np.nonzero(self.active)[0]

        # pull-streaming source table: src[i, cell] = flat source index for
        # direction i; bounce-back cells pull their own opposite direction
        q = D2Q9.q
        self.src = np.empty((q, n), dtype=np.int64)
        self.bb = np.zeros((q, n), dtype=bool)
        for i in range(q):
            cx, cy = D2Q9.velocities[i]
            sxc = coords[:, 0] - cx
            syc = coords[:, 1] - cy
            oob = np.zeros(n, dtype=bool)
            if periodic[0]:
                sxc = sxc % nx
            else:
                oob |= (sxc < 0) | (sxc >= nx)
            if periodic[1]:
                syc = syc % ny
            else:
                oob |= (syc < 0) | (syc >= ny)
            sxc2 = sxc.clip(0, nx - 1)
            syc2 = syc.clip(0, ny - 1)
            flat = cmap[sxc2, syc2]
            is_solid = solid[sxc2, syc2]
            bb = (~oob & is_solid)
            # walls live half a cell beyond the outermost fluid layer
            for face, cond in spec.faces.items():
                axis, side = _FACE_GEOM[face]
                if cond != "wall":
                    continue
                s = (sxc, syc)[axis]
                dim = (nx, ny)[axis]
                bb |= (s < 0) if side == 0 else (s >= dim)
            missing = oob | (flat < 0)
            self.bb[i] = bb
            self.src[i] = np.where(bb | missing, np.arange(n), flat)
            unreachable = missing & ~bb & self.active
            if unreachable.any():
                bad = coords[np.nonzero(unreachable)[0][0]]
                raise TopologyError(
                    f"active cell {tuple(bad)} at level {level} has no source "
                    f"for direction {i}")
        self.any_bb = [self.bb[i].any() for i in range(q)]
        self.coords = coords


class MultiLevelSolver:
    """Owns the kernels and the recursion schedule over a ping-pong pair."""

    def __init__(self, topology: Topology, pair: PingPongPair,
                 params: SolverParams, level_params: LevelParams,
                 boundaries: BoundarySpec | None = None):
        if params.levels != topology.levels:
            raise ValueError("params.levels must match the topology")
        self.topology = topology
        self.pair = pair
        self.params = params
        self.level_params = level_params
        self.boundaries = boundaries or BoundarySpec()
        self.boundaries.validate(topology.finest_cells)
        self.k = [0] * topology.levels          # steps taken per level
        self._tables_version = -1
        self._tables = {}
        self.interfaces: InterfaceSets | None = None
        self._schedule = build_schedule(topology.levels)
        self._refresh_tables()

    # -- cached tables -----------------------------------------------------

    def _refresh_tables(self):
        if self._tables_version == self.topology.version:
            return
        self.interfaces = classify_interfaces(self.topology)
        self._tables = {}
        for level in range(self.topology.levels):
            if len(self.topology.tables[level]):
                self._tables[level] = _LevelTables(self, level)
        self._tables_version = self.topology.version

    def tables(self, level) -> _LevelTables:
        self._refresh_tables()
        return self._tables[level]

    def arrays(self, tree_idx, level):
        return self.pair.trees[tree_idx].levels[level]

    def roles(self, level):
        """(read, write) for the step this level is about to take."""
        return buffer_roles(level, self.k[level] & 1)

    def last_roles(self, level):
        """(read, write) of the step this level just completed."""
        return buffer_roles(level, (self.k[level] - 1) & 1)

    # -- kernels -------------------------------------------------------------

    def stream(self, level: int):
        """Pull-reconstruct neighbors and write bare intermediate moments.

        After this call the write tree holds (rho*, sum c f, S*) for every
        cell; ghosts and BC layers carry their copied previous state.
        """
        r, w = self.roles(level)
        self.stream_kernel(level, self.arrays(r, level), self.arrays(w, level))

    def stream_kernel(self, level: int, src_a: dict, dst: dict):
        if not len(dst["rho"]):
            return
        t = self.tables(level)
        rho = src_a["rho"]
        ux, uy = src_a["ux"], src_a["uy"]
        sxx, sxy, syy = src_a["sxx"], src_a["sxy"], src_a["syy"]

        n = rho.shape[0]
        acc_rho = np.zeros(n)
        acc_mx = np.zeros(n)
        acc_my = np.zeros(n)
        acc_xx = np.zeros(n)
        acc_xy = np.zeros(n)
        acc_yy = np.zeros(n)
        c = D2Q9.velocities
        for i in range(D2Q9.q):
            idx = t.src[i]
            fi = lattice.reconstruct_direction(
                i, rho[idx], ux[idx], uy[idx], sxx[idx], sxy[idx], syy[idx])
            if t.any_bb[i]:
                bbsel = t.bb[i]
                opp = int(D2Q9.opposite[i])
                fi[bbsel] = lattice.reconstruct_direction(
                    opp, rho[bbsel], ux[bbsel], uy[bbsel],
                    sxx[bbsel], sxy[bbsel], syy[bbsel])
            cx, cy = float(c[i, 0]), float(c[i, 1])
            acc_rho += fi
            if cx:
                acc_mx += cx * fi
            if cy:
                acc_my += cy * fi
            acc_xx += (cx * cx - CS2) * fi
            if cx and cy:
                acc_xy += cx * cy * fi
            acc_yy += (cy * cy - CS2) * fi

        dst["rho"][:] = acc_rho
        dst["ux"][:] = acc_mx          # bare first moment until collide
        dst["uy"][:] = acc_my
        dst["sxx"][:] = acc_xx
        dst["sxy"][:] = acc_xy
        dst["syy"][:] = acc_yy
        # carry the scalar transport fields forward unchanged
        dst["eps"][:] = src_a["eps"]
        dst["phi"][:] = src_a["phi"]

    def collide(self, level: int, force=None, tau_eff=None):
        """Moment-space BGK collision with forcing, in place on the write tree.

        ``force`` is an (fx, fy) pair of per-cell arrays (finest, coupled) or
        None for plain gravity.  ``tau_eff`` overrides the level relaxation
        time per cell (epsilon-scaled when coupling is active).
        """
        r, w = self.roles(level)
        self.collide_kernel(level, self.arrays(r, level),
                            self.arrays(w, level), force, tau_eff)

    def collide_kernel(self, level: int, src_a: dict, dst: dict,
                       force=None, tau_eff=None):
        if not len(dst["rho"]):
            return
        t = self.tables(level)
        rho_s = dst["rho"]
        act = t.active
        ra = rho_s[t.active_idx]
        bad_rho = ~np.isfinite(ra) | (ra <= 0.0)
        if bad_rho.any():
            cells = [tuple(c) for c in
                     t.coords[t.active_idx[np.nonzero(bad_rho)[0][:5]]]]
            raise DivergenceError(
                f"level {level}: non-physical density after streaming",
                level=level, cells=cells)

        if force is None:
            g = self.params.gravity
            scale = float(1 << level)
            fx = rho_s * (g[0] * scale)
            fy = rho_s * (g[1] * scale)
        else:
            fx, fy = force

        tau = self.level_params.taus[level] if tau_eff is None else tau_eff
        inv_rho = 1.0 / rho_s
        usx = (dst["ux"] + 0.5 * fx) * inv_rho   # u* with the half-force shift
        usy = (dst["uy"] + 0.5 * fy) * inv_rho
        ssxx = dst["sxx"] * inv_rho
        ssxy = dst["sxy"] * inv_rho
        ssyy = dst["syy"] * inv_rho

        inv_tau = 1.0 / tau
        fcoef = (2.0 * tau - 1.0) / (2.0 * tau) * inv_rho
        new_sxx = (1.0 - inv_tau) * ssxx + inv_tau * usx * usx \
            + fcoef * (2.0 * fx * usx)
        new_sxy = (1.0 - inv_tau) * ssxy + inv_tau * usx * usy \
            + fcoef * (fx * usy + fy * usx)
        new_syy = (1.0 - inv_tau) * ssyy + inv_tau * usy * usy \
            + fcoef * (2.0 * fy * usy)

        dst["ux"][:] = usx + 0.5 * fx * inv_rho
        dst["uy"][:] = usy + 0.5 * fy * inv_rho
        dst["sxx"][:] = new_sxx
        dst["sxy"][:] = new_sxy
        dst["syy"][:] = new_syy

        # ghosts, BC layers, and solids carry their previous state
        idx = t.inactive_idx
        if idx.size:
            for name in ("rho", "ux", "uy", "sxx", "sxy", "syy", "eps", "phi"):
                dst[name][idx] = src_a[name][idx]

        bad = ~np.isfinite(dst["ux"][act]) | ~np.isfinite(dst["uy"][act])
        if bad.any():
            cells = [tuple(c) for c in
                     t.coords[t.active_idx[np.nonzero(bad)[0][:5]]]]
            raise DivergenceError(
                f"level {level}: non-finite velocity after collision",
                level=level, cells=cells)

    def apply_boundaries(self, level: int):
        """Convective outlets and the logarithmic inlet on the write tree."""
        _, w = self.roles(level)
        self.boundary_kernel(level, self.arrays(w, level))

    def boundary_kernel(self, level: int, dst: dict):
        if not len(dst["rho"]):
            return
        t = self.tables(level)
        for cells, inner, axis, sign in t.outlets:
            u_n = np.maximum(sign * dst[("ux", "uy")[axis]][inner], 0.0)
            u_n = np.minimum(u_n, 1.0)
            for name in ("rho", "ux", "uy", "sxx", "sxy", "syy"):
                vals = dst[name]
                vals[cells] = vals[cells] - u_n * (vals[cells] - vals[inner])
        if t.inlet is not None:
            cells, ypos, cond = t.inlet
            arg = 1.0 + cond.beta * (ypos - cond.y0)
            uxv = np.where(ypos >= cond.y0, cond.u0 * np.log(np.maximum(arg, 1.0)),
                           0.0)
            dst["rho"][cells] = self.params.rho0
            dst["ux"][cells] = uxv
            dst["uy"][cells] = 0.0
            s = seq(np.stack([uxv, np.zeros_like(uxv)], axis=-1))
            dst["sxx"][cells] = s[:, 0]
            dst["sxy"][cells] = s[:, 1]
            dst["syy"][cells] = s[:, 2]

    def stream_collide(self, level: int, force=None, tau_eff=None):
        """One full streaming-collision step at a level (advances its clock)."""
        self.stream(level)
        self.collide(level, force=force, tau_eff=tau_eff)
        self.apply_boundaries(level)
        self.k[level] += 1

    # -- cross-level transfers -----------------------------------------------

    def downward_transfer(self, level: int, step: int):
        """Fill I^d_level from level+1 before the fine step (s=2 uses the
        temporal midpoint of the coarse advance)."""
        coarse = level + 1
        old_t, new_t = self.last_roles(coarse)
        r, _ = self.roles(level)
        self.downward_kernel(level, step, self.arrays(old_t, coarse),
                             self.arrays(new_t, coarse), self.arrays(r, level))

    def downward_kernel(self, level: int, step: int, olda: dict, newa: dict,
                        dst: dict):
        down = self.interfaces.downs.get(level)
        if down is None:
            return
        coarse = level + 1
        taus = self.level_params.taus
        conv = self.params.rescale_convention
        vals = {}
        for name in ("rho", "ux", "uy", "sxx", "sxy", "syy", "eps", "phi"):
            src = olda[name][down.src4]
            if step == 2:
                src = 0.5 * (src + newa[name][down.src4])
            vals[name] = (src * down.w4).sum(axis=1)
        u = np.stack([vals["ux"], vals["uy"]], axis=-1)
        s = np.stack([vals["sxx"], vals["sxy"], vals["syy"]], axis=-1)
        s_f = rescale_s_down(s, u, taus[level], taus[coarse], conv)
        tgt = down.targets
        dst["rho"][tgt] = vals["rho"]
        dst["ux"][tgt] = vals["ux"]
        dst["uy"][tgt] = vals["uy"]
        dst["sxx"][tgt] = s_f[:, 0]
        dst["sxy"][tgt] = s_f[:, 1]
        dst["syy"][tgt] = s_f[:, 2]
        dst["eps"][tgt] = vals["eps"]
        dst["phi"][tgt] = vals["phi"]

    def upward_transfer(self, level: int):
        """Fill I^u_{level+1} from the just-completed fine state at level."""
        coarse = level + 1
        _, fine_w = self.last_roles(level)
        _, coarse_w = self.last_roles(coarse)
        self.upward_kernel(level, self.arrays(fine_w, level),
                           self.arrays(coarse_w, coarse))

    def upward_kernel(self, level: int, fine: dict, dst: dict):
        coarse = level + 1
        up = self.interfaces.ups.get(coarse)
        if up is None:
            return
        taus = self.level_params.taus
        conv = self.params.rescale_convention
        if self.params.upward_mode == "average":
            def fetch(name):
                return fine[name][up.src4].mean(axis=1)
        else:
            def fetch(name):
                return fine[name][up.src]
        u = np.stack([fetch("ux"), fetch("uy")], axis=-1)
        s = np.stack([fetch("sxx"), fetch("sxy"), fetch("syy")], axis=-1)
        s_c = rescale_s_up(s, u, taus[level], taus[coarse], conv)
        tgt = up.targets
        dst["rho"][tgt] = fetch("rho")
        dst["ux"][tgt] = u[:, 0]
        dst["uy"][tgt] = u[:, 1]
        dst["sxx"][tgt] = s_c[:, 0]
        dst["sxy"][tgt] = s_c[:, 1]
        dst["syy"][tgt] = s_c[:, 2]
        dst["eps"][tgt] = fetch("eps")
        dst["phi"][tgt] = fetch("phi")

    # -- schedule --------------------------------------------------------------

    def run_cycle(self, cycle, hook=None):
        """Execute one finest cycle: coarser prelude, then the level-0 step.

        ``hook(self)`` runs between the level-0 stream and collide (the
        exchange point of the coupled pipeline); it may return (force,
        tau_eff) for the collision.
        """
        self._refresh_tables()
        for op in cycle["pre"]:
            kind, level, s = op
            if kind == "down":
                self.downward_transfer(level, s)
            elif kind == "sc":
                self.stream_collide(level)
            elif kind == "up":
                self.upward_transfer(level)
        s0 = cycle["s0"]
        if self.topology.levels > 1:
            self.downward_transfer(0, s0)
        self.stream(0)
        force, tau_eff = None, None
        if hook is not None:
            out = hook(self)
            if out is not None:
                force, tau_eff = out
        self.collide(0, force=force, tau_eff=tau_eff)
        self.apply_boundaries(0)
        self.k[0] += 1
        if self.topology.levels > 1 and s0 == 2:
            self.upward_transfer(0)
        if cycle["last"]:
            self.pair.bounce += 1

    def advance_bounce(self, hook=None):
        """One top-level bounce (= 2^(L-1) finest cycles)."""
        for cycle in self._schedule:
            self.run_cycle(cycle, hook=hook)

    def run_finest_steps(self, n: int, hook=None):
        """Advance by n finest cycles (n must complete whole bounces for
        multi-level runs unless the caller tracks the cycle cursor)."""
        per = len(self._schedule)
        i = self.k[0] % per
        for _ in range(n):
            self.run_cycle(self._schedule[i], hook=hook)
            i = (i + 1) % per

    def cycles_per_bounce(self) -> int:
        return len(self._schedule)


def build_schedule(levels: int):
    """Linearize the Alg-1 recursion into finest cycles.

    Each cycle carries the coarser-level ops that precede the level-0 step,
    the level-0 sub-step index, and whether it closes the bounce.
    """
    ops = []

    def rec(level, s):
        if level < levels - 1:
            ops.append(("down", level, s))
        ops.append(("sc", level, s))
        if level < levels - 1 and s == 2:
            ops.append(("up", level, s))
        if level > 0:
            rec(level - 1, 1)
            rec(level - 1, 2)

    rec(levels - 1, 1)

    cycles = []
    pre = []
    for op in ops:
        kind, level, s = op
        if level == 0 and kind == "down":
            continue            # run_cycle issues the level-0 downward itself
        if level == 0 and kind == "sc":
            cycles.append({"pre": pre, "s0": s, "last": False})
            pre = []
        elif level == 0 and kind == "up":
            continue            # run_cycle issues the level-0 upward itself
        else:
            pre.append(op)
    cycles[-1]["last"] = True
    return cycles

"""Coupling tests: fractions, drag, mixture force, powder, coupled audits."""

import numpy as np
import pytest

from mlbm.coupling import (
    CoupledSim,
    DragParams,
    PowderParams,
    UnitScale,
    difelice_drag,
    entrainment_rate,
    mixture_force,
    powder_step,
    rasterize_fractions,
    sample_bilinear,
)
from mlbm.granular import Particles, SandMaterial
from mlbm.solver import BoundarySpec, LevelParams, MultiLevelSolver, SolverParams
from mlbm.sparse_grid import PingPongPair, Topology

from test_solver import init_fields, make_single_level


def quiescent(topo, pair):
    init_fields(topo, pair, lambda px, py, l: {
        "rho": np.ones_like(px), "ux": np.zeros_like(px),
        "uy": np.zeros_like(px), "sxx": np.zeros_like(px),
        "sxy": np.zeros_like(px), "syy": np.zeros_like(px)})


def uniform_particles(topo, v0=0.5):
    """One particle per cell at the node positions (partition of unity)."""
    nx, ny = topo.cells_dims(0)
    g = np.stack(np.meshgrid(np.arange(nx, dtype=float),
                             np.arange(ny, dtype=float),
                             indexing="ij"), axis=-1).reshape(-1, 2)
    parts = Particles(len(g))
    parts.x = g
    parts.V0[:] = v0
    parts.m[:] = 2.0 * v0
    return parts


class TestUnitScale:
    def test_conversion_factor_consistency(self):
        s = UnitScale(dx=0.01, dt=2e-4, rho=1.2)
        uref = s.dx / s.dt
        assert abs(s.C - s.rho * uref ** 2 / s.dx) <= 1e-12 * s.C

    def test_identity_passthrough(self):
        s = UnitScale()
        assert s.accel_to_lattice(9.8) == 9.8
        assert s.force_density_to_lattice(3.0) == 3.0

    def test_invalid_scales_rejected(self):
        with pytest.raises(ValueError):
            UnitScale(dx=0.0)


class TestRasterizeFractions:
    def test_no_particles_gives_unit_eps(self):
        topo = Topology.uniform((16, 16), levels=1)
        f = rasterize_fractions(Particles(0), topo, np.zeros(16 * 16), 0.3,
                                DragParams())
        assert np.array_equal(f.eps, np.ones(16 * 16))
        assert np.array_equal(f.eta, np.zeros(16 * 16))

    def test_uniform_half_volume(self):
        topo = Topology.uniform((16, 16), levels=1)
        parts = uniform_particles(topo, v0=0.5)
        f = rasterize_fractions(parts, topo, np.zeros(16 * 16), 0.3,
                                DragParams())
        assert np.allclose(f.eta, 0.5, rtol=0, atol=1e-14)
        assert np.allclose(f.eps, 0.5, rtol=0, atol=1e-14)

    def test_overpacked_cell_clamps(self):
        topo = Topology.uniform((16, 16), levels=1)
        parts = uniform_particles(topo, v0=1.2)
        f = rasterize_fractions(parts, topo, np.zeros(16 * 16), 0.3,
                                DragParams())
        assert np.allclose(f.eps, 0.3, rtol=0, atol=0)

    def test_budget_sums_to_one_before_clamp(self):
        topo = Topology.uniform((16, 16), levels=1)
        parts = uniform_particles(topo, v0=0.25)
        phi = np.full(16 * 16, 0.1)
        f = rasterize_fractions(parts, topo, phi, 0.3, DragParams())
        assert np.max(np.abs(f.eps + f.eta + phi - 1.0)) <= 1e-12


class TestDiFeliceDrag:
    def make_fields(self, topo, eps, area, v):
        n = topo.cell_count(0)
        f = rasterize_fractions(Particles(0), topo, np.zeros(n), 0.3,
                                DragParams())
        f.eps[:] = eps
        f.area[:] = area
        f.vx[:] = v[0]
        f.vy[:] = v[1]
        return f

    def test_zero_drag_when_velocities_match(self):
        topo = Topology.uniform((16, 16), levels=1)
        f = self.make_fields(topo, 0.9, 1.0, (0.05, 0.0))
        n = topo.cell_count(0)
        fs = difelice_drag(f, np.ones(n), np.full(n, 0.05), np.zeros(n),
                           nu=0.1, params=DragParams(), d_p=1.0)
        assert np.array_equal(fs, np.zeros((n, 2)))

    def test_hand_evaluated_re_1000(self):
        # choose nu so that Re = eps*|u-v|*d_p/nu = 1000 exactly
        topo = Topology.uniform((16, 16), levels=1)
        eps, speed, d_p = 0.9, 0.1, 3.0
        nu = eps * speed * d_p / 1000.0
        f = self.make_fields(topo, eps, 2.0, (0.0, 0.0))
        n = topo.cell_count(0)
        rho = np.full(n, 1.1)
        fs = difelice_drag(f, rho, np.full(n, speed), np.zeros(n),
                           nu=nu, params=DragParams(), d_p=d_p)
        cd = (0.63 + 4.8 / np.sqrt(1000.0)) ** 2
        chi = 3.7 - 0.65 * np.exp(-0.5 * (1.5 - 3.0) ** 2)
        expect = 0.5 * cd * 0.9 ** (-chi) * 1.1 * 2.0 * speed * speed
        assert np.allclose(fs[:, 0], expect, rtol=1e-12, atol=0)
        assert np.allclose(fs[:, 1], 0.0, rtol=0, atol=0)

    def test_fluid_side_is_exact_negation(self):
        topo = Topology.uniform((16, 16), levels=1)
        n = topo.cell_count(0)
        rng = np.random.default_rng(0)
        f = self.make_fields(topo, 0.8, 1.0, (0.01, -0.02))
        fs = difelice_drag(f, np.ones(n), rng.normal(0, 0.05, n),
                           rng.normal(0, 0.05, n), nu=0.1,
                           params=DragParams(), d_p=1.0)
        force = mixture_force(f, np.ones(n), topo, (0.0, 0.0))
        # gravity and gradient are zero here: force == -fs bitwise
        assert np.array_equal(force, -fs)


class TestMixtureForce:
    def test_uniform_eps_no_gradient_term(self):
        topo = Topology.uniform((16, 16), levels=1)
        n = topo.cell_count(0)
        f = rasterize_fractions(Particles(0), topo, np.zeros(n), 0.3,
                                DragParams())
        f.eps[:] = 0.7
        force = mixture_force(f, np.full(n, 1.05), topo, (0.0, 0.0))
        assert np.array_equal(f.grad_term, np.zeros((n, 2)))
        assert np.array_equal(force, np.zeros((n, 2)))

    def test_rho_equals_rho0_kills_gradient_term(self):
        topo = Topology.uniform((16, 16), levels=1)
        n = topo.cell_count(0)
        f = rasterize_fractions(Particles(0), topo, np.zeros(n), 0.3,
                                DragParams())
        coords = topo.cell_coords(0)
        f.eps[:] = 0.8 + 0.01 * coords[:, 0]
        force = mixture_force(f, np.ones(n), topo, (0.0, 0.0))
        assert np.array_equal(force, np.zeros((n, 2)))

    def test_linear_ramp_hand_value(self):
        # eps ramps 0.8 -> 1.0 over 10 cells (slope 0.02), rho = 1.01:
        # term_x = ((rho - 1)/eps) * 0.02 by central differences
        topo = Topology.uniform((32, 16), levels=1, periodic=(False, True))
        n = topo.cell_count(0)
        f = rasterize_fractions(Particles(0), topo, np.zeros(n), 0.3,
                                DragParams())
        coords = topo.cell_coords(0)
        x = coords[:, 0].astype(float)
        f.eps[:] = np.clip(0.8 + 0.02 * (x - 10.0), 0.8, 1.0)
        rho = np.full(n, 1.01)
        force = mixture_force(f, rho, topo, (0.0, 0.0))
        interior = (x > 11) & (x < 19)
        expect = (0.01 / f.eps[interior]) * 0.02
        assert np.allclose(force[interior, 0], expect, rtol=1e-12, atol=0)

    def test_gravity_term(self):
        topo = Topology.uniform((16, 16), levels=1)
        n = topo.cell_count(0)
        f = rasterize_fractions(Particles(0), topo, np.zeros(n), 0.3,
                                DragParams())
        rho = np.full(n, 1.02)
        force = mixture_force(f, rho, topo, (0.0, -1e-4))
        assert np.allclose(force[:, 1], -1e-4 * 1.02, rtol=1e-14, atol=0)


class TestPowder:
    def test_constant_field_advection_invariant(self):
        topo = Topology.uniform((32, 32), levels=1)
        n = topo.cell_count(0)
        rng = np.random.default_rng(1)
        # divergence-free-ish random smooth velocity
        coords = topo.cell_coords(0).astype(float)
        ux = 0.05 * np.sin(2 * np.pi * coords[:, 1] / 32)
        uy = 0.05 * np.sin(2 * np.pi * coords[:, 0] / 32)
        phi = np.full(n, 0.25)
        p = PowderParams(diffusion=0.0)
        out = phi.copy()
        for _ in range(50):
            out = powder_step(out, ux, uy, topo, p, 1.0)
        assert np.max(np.abs(out - 0.25)) <= 1e-12

    def test_pure_diffusion_conserves_mass_and_variance(self):
        topo = Topology.uniform((64, 64), levels=1)
        coords = topo.cell_coords(0).astype(float)
        r2 = (coords[:, 0] - 32.0) ** 2 + (coords[:, 1] - 32.0) ** 2
        phi = np.exp(-r2 / (2 * 3.0 ** 2))
        d = 0.1
        p = PowderParams(diffusion=d)
        zeros = np.zeros(len(phi))
        mass0 = phi.sum()

        def variance(f):
            m = f.sum()
            cx = (f * coords[:, 0]).sum() / m
            return (f * (coords[:, 0] - cx) ** 2).sum() / m

        v0 = variance(phi)
        steps = 40
        out = phi.copy()
        for _ in range(steps):
            out = powder_step(out, zeros, zeros, topo, p, 1.0)
        assert abs(out.sum() - mass0) <= 1e-12 * mass0
        growth = (variance(out) - v0) / steps
        assert abs(growth - 2 * d) <= 0.02 * 2 * d

    def test_diffusion_stability_guard(self):
        topo = Topology.uniform((16, 16), levels=1)
        p = PowderParams(diffusion=0.3)
        with pytest.raises(ValueError):
            powder_step(np.zeros(16 * 16), np.zeros(16 * 16),
                        np.zeros(16 * 16), topo, p, 1.0)

    def test_entrainment_zero_when_velocity_zero(self):
        topo = Topology.uniform((16, 16), levels=1)
        parts = uniform_particles(topo, v0=0.3)
        parts.v[:] = 0.0
        f = rasterize_fractions(parts, topo, np.zeros(16 * 16), 0.3,
                                DragParams())
        q = entrainment_rate(f, parts, topo, SandMaterial(E=0.05),
                             PowderParams(entrain=1e-3))
        assert np.array_equal(q, np.zeros(16 * 16))


class TestSampleBilinear:
    def test_exact_at_nodes_and_linear(self):
        topo = Topology.uniform((16, 16), levels=1)
        coords = topo.cell_coords(0).astype(float)
        vals = 2.0 + 0.5 * coords[:, 0]
        pos = np.array([[3.0, 4.0], [3.5, 4.0], [7.25, 9.5]])
        got = sample_bilinear(vals, pos, topo)
        assert np.allclose(got, 2.0 + 0.5 * pos[:, 0], rtol=0, atol=1e-13)


class TestCoupledStep:
    def make_coupled(self, cells=(32, 32), n_parts=50, gravity=(0.0, 0.0),
                     sediment_gravity=(0.0, -1e-4), tau0=1.8, seed=3):
        topo = Topology.uniform(cells, levels=1)
        pair = PingPongPair(topo)
        params = SolverParams(levels=1, gravity=gravity, eps_min=0.3)
        solver = MultiLevelSolver(topo, pair, params,
                                  LevelParams(1, tau0), BoundarySpec())
        quiescent(topo, pair)
        rng = np.random.default_rng(np.random.Philox(seed))
        parts = Particles(n_parts)
        parts.x = rng.random((n_parts, 2)) * (np.array(cells) - 12) + 6.0
        parts.V0[:] = 0.25
        parts.m[:] = 500.0 * 0.25
        sim = CoupledSim(solver, parts, SandMaterial(E=0.05),
                         sediment_gravity=np.asarray(sediment_gravity))
        return topo, pair, solver, sim

    def test_no_particles_bitwise_equal_to_pure_solver(self):
        topo1, pair1, solver1 = make_single_level((32, 32), tau0=0.8)
        topo2, pair2, solver2 = make_single_level((32, 32), tau0=0.8)
        from test_solver import taylor_green
        fields, _ = taylor_green(0.05, 32, solver1.level_params.nu(0))
        init_fields(topo1, pair1, lambda px, py, l: fields(px, py, l))
        init_fields(topo2, pair2, lambda px, py, l: fields(px, py, l))
        sim = CoupledSim(solver1, None)
        for _ in range(20):
            sim.step()
        solver2.run_finest_steps(20)
        a1 = solver1.arrays(solver1.last_roles(0)[1], 0)
        a2 = solver2.arrays(solver2.last_roles(0)[1], 0)
        for name in ("rho", "ux", "uy", "sxx", "sxy", "syy"):
            assert np.array_equal(a1[name], a2[name])

    def test_drag_newton_third_law_exact(self):
        topo, pair, solver, sim = self.make_coupled()
        sim.particles.v[:, 1] = -0.02
        for _ in range(5):
            sim.step()
        f = sim.last_fields
        assert f is not None
        assert np.abs(f.fs).max() > 0
        # gravity off here: applied fluid force = gradient term minus fs,
        # so the exchanged impulses cancel bitwise
        assert np.array_equal(f.force, f.grad_term - f.fs)

    def test_momentum_audit_closes(self):
        topo, pair, solver, sim = self.make_coupled(n_parts=120)
        sim.particles.v[:, 1] = -0.01
        sim.step()   # warm up the exchange fields
        for _ in range(5):
            p_f0 = sim.fluid_momentum()
            p_s0 = sim.particles.momentum()
            sim.step()
            p_f1 = sim.fluid_momentum()
            p_s1 = sim.particles.momentum()
            f = sim.last_fields
            i_grad = f.grad_term.sum(axis=0)
            i_grav_f = np.zeros(2)   # fluid gravity off in this scene
            i_grav_s = sim.particles.total_mass() * sim.sediment_gravity
            closure = (p_f1 - p_f0) + (p_s1 - p_s0) \
                - i_grad - i_grav_f - i_grav_s
            assert np.max(np.abs(closure)) <= 1e-10

    def test_single_particle_terminal_velocity(self):
        topo = Topology.uniform((32, 128), levels=1)
        pair = PingPongPair(topo)
        params = SolverParams(levels=1, gravity=(0.0, 0.0), eps_min=0.3)
        solver = MultiLevelSolver(topo, pair, params, LevelParams(1, 1.8),
                                  BoundarySpec())
        quiescent(topo, pair)
        parts = Particles(1)
        parts.x[0] = (16.0, 100.0)
        parts.V0[0] = 1.0
        parts.m[0] = 100.0
        g = 1e-4
        sim = CoupledSim(solver, parts, SandMaterial(E=0.05),
                         sediment_gravity=(0.0, -g))
        drag_sums = []
        w_means = []
        for i in range(800):
            sim.step()
            if i >= 600:
                f = sim.last_fields
                sel = f.area > 0
                drag_sums.append(f.fs[sel, 1].sum())
                w_means.append((f.area[sel] * f.rel[sel, 1]).sum()
                               / f.area[sel].sum())
        # steady state: total drag balances gravity within 10%
        mean_drag = np.mean(drag_sums)
        assert abs(mean_drag - parts.m[0] * g) / (parts.m[0] * g) < 0.10
        # the relative velocity sits at the scale of the single-cell
        # drag-balance solution (bisect 0.5 Cd(Re) eps^-chi rho A v^2 = mg)
        d_p = 2 * np.sqrt(1.0 / np.pi)
        nu = solver.level_params.nu(0)

        def drag_mag(v):
            re = max(1.0 * v * d_p / nu, 0.01)
            cd = (0.63 + 4.8 / np.sqrt(re)) ** 2
            chi = 3.7 - 0.65 * np.exp(-0.5 * (1.5 - np.log10(re)) ** 2)
            return 0.5 * cd * 1.0 ** (-chi) * d_p * v * v

        lo, hi = 1e-8, 1.0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if drag_mag(mid) < parts.m[0] * g:
                lo = mid
            else:
                hi = mid
        v_t = 0.5 * (lo + hi)
        w = abs(np.mean(w_means))
        assert 0.5 * v_t < w < 2.0 * v_t

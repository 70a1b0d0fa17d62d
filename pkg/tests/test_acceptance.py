"""Acceptance gate: every criterion at its stated tolerance.

Each test prints one machine-readable pass/fail line; run with ``-s`` to see
them as they complete.
"""

import os
import time

import numpy as np

from mlbm.adapt import GridAdaptor, RefineDriver
from mlbm.coupling import (
    CoupledSim,
    DragParams,
    PowderParams,
    entrainment_rate,
    powder_step,
    rasterize_fractions,
)
from mlbm.granular import Particles, SandMaterial
from mlbm.harness.cases import (
    run_adapt_fuzz,
    run_conservation,
    run_convergence,
    run_multilevel_consistency,
    run_poiseuille,
    run_rescale_roundtrip,
    run_sand_collapse,
    run_taylor_green,
    refined_multilevel,
    set_fields,
    taylor_green_fields,
)
from mlbm.harness.config import load_scene, build_scene
from mlbm.harness.reference import NaiveReference, uniform_solver
from mlbm.solver import (
    BoundarySpec,
    LevelParams,
    LogInlet,
    MultiLevelSolver,
    SolverParams,
    rescale_tau,
)
from mlbm.sparse_grid import FieldTree, PingPongPair, Topology

SCENES = os.path.join(os.path.dirname(__file__), "..", "scenes")


def report(num, name, passed, detail):
    line = f"ACCEPT {num:2d} {name}: {'PASS' if passed else 'FAIL'} ({detail})"
    print(line, flush=True)
    assert passed, line


def quiescent_fields(px, py, level):
    z = np.zeros_like(px)
    return {"rho": np.ones_like(px), "ux": z, "uy": z.copy(),
            "sxx": z.copy(), "sxy": z.copy(), "syy": z.copy()}


def test_01_taylor_green():
    r = run_taylor_green(res=128, tau=0.8, u0=0.05)
    ok = r.passed and r.metrics["runtime_s"] < 60.0
    report(1, "taylor-green 128^2", ok,
           f"l2={r.metrics['l2_err']:.4%} ke_rate={r.metrics['ke_rate_err']:.4%} "
           f"runtime={r.metrics['runtime_s']:.1f}s")


def test_02_convergence_order():
    r = run_convergence()
    report(2, "convergence 64->128", r.passed,
           f"ratio={r.metrics['ratio']:.2f} (need >= 3.5)")


def test_03_multilevel_consistency():
    r = run_multilevel_consistency()
    report(3, "multi-level consistency", r.passed,
           f"rel_l2={r.metrics['rel_l2']:.4%} "
           f"uniform_dev={r.metrics['uniform_dev']:.2e}")


def test_04_rescaling_laws():
    comp_err = max(abs(rescale_tau(rescale_tau(t, 1), 1) - rescale_tau(t, 2))
                   for t in (0.51, 0.6, 0.8, 1.0, 1.7, 3.0))
    r = run_rescale_roundtrip(n=10000)
    ok = comp_err <= 1e-15 and r.metrics["derived_err"] < 1e-14 \
        and r.metrics["paper_literal_err"] > 1e-6
    report(4, "rescaling laws", ok,
           f"tau_comp={comp_err:.1e} derived={r.metrics['derived_err']:.1e} "
           f"paper_literal_fails={r.metrics['paper_literal_err']:.1e}")


def test_05_conservation():
    r = run_conservation()
    report(5, "mass conservation", r.passed,
           f"single={r.metrics['single_level_drift']:.2e} "
           f"multi={r.metrics['multi_level_drift']:.2e}")


def test_06_adaptation_conformance():
    r = run_adapt_fuzz(walks=200, steps=500)
    # zero allocations and zero flag changes on a no-op update
    topo = Topology.uniform((32, 32), levels=3)
    pair = PingPongPair(topo)
    adaptor = GridAdaptor(topo, LevelParams(3, 0.8))
    driver = RefineDriver(positions=np.array([[10.0, 10.0]]), levels=3)
    adaptor.update(driver, pair)
    ids = [id(a) for tree in pair.trees for lv in tree.levels
           for a in lv.values()]
    rep = adaptor.update(driver, pair)
    ids2 = [id(a) for tree in pair.trees for lv in tree.levels
            for a in lv.values()]
    noop_ok = rep.noop and ids == ids2 \
        and rep.total_created() == 0 and rep.total_deleted() == 0 \
        and all(f == 0 for t in topo.tables for f in t.flag)
    ok = r.passed and noop_ok
    report(6, "adaptation conformance", ok,
           f"settled_checks={r.metrics['settled_checks']} "
           f"mismatches={r.metrics['mismatches']} "
           f"violations={r.metrics['violations']} noop_alloc_free={noop_ok}")


def test_07_pingpong_memory():
    storage_ok = True
    for levels in (1, 2, 3, 4):
        cells = 16 * (1 << (levels - 1))
        topo = Topology.uniform((cells, cells), levels=levels)
        pair = PingPongPair(topo)
        if pair.nbytes() != 2 * FieldTree(topo).nbytes():
            storage_ok = False

    topo, pair, solver = refined_multilevel((64, 64), 3, 0.8)
    nu = solver.level_params.nu(0)
    fn, _ = taylor_green_fields(0.05, 64, nu, solver.level_params.taus)
    set_fields(topo, pair, lambda px, py, l: fn(px, py, l))
    topo2, pair2, solver2 = refined_multilevel((64, 64), 3, 0.8)
    set_fields(topo2, pair2, lambda px, py, l: fn(px, py, l))
    naive = NaiveReference(solver2)
    naive.load_from([pair2.trees[0].levels[l] for l in range(3)])
    for _ in range(8):
        solver.advance_bounce()
        naive.advance_bounce()
    max_dev = 0.0
    for level in range(3):
        if not topo.cell_count(level):
            continue
        got = solver.arrays(solver.last_roles(level)[1], level)
        ref = naive.current_state(level)
        for name in ("rho", "ux", "uy", "sxx", "sxy", "syy"):
            max_dev = max(max_dev, float(np.max(np.abs(got[name] - ref[name]))))
    ok = storage_ok and max_dev <= 1e-14
    report(7, "ping-pong memory", ok,
           f"storage_eq_2_trees={storage_ok} naive_ref_dev={max_dev:.1e}")


def test_08_sand_collapse():
    r = run_sand_collapse()
    report(8, "sand column collapse", r.passed,
           f"slope={r.metrics['flank_slope']:.3f} "
           f"(limit {r.metrics['limit']:.3f}) "
           f"mass_conserved={r.metrics['mass_conserved']} "
           f"runtime={r.metrics['runtime_s']:.1f}s")


def test_09_coupling_audits():
    # periodic no-wall scene, heavy particles settling under their own gravity
    topo = Topology.uniform((32, 32), levels=1)
    pair = PingPongPair(topo)
    params = SolverParams(levels=1, gravity=(0.0, 0.0), eps_min=0.3)
    solver = MultiLevelSolver(topo, pair, params, LevelParams(1, 1.8),
                              BoundarySpec())
    set_fields(topo, pair, quiescent_fields)
    rng = np.random.default_rng(np.random.Philox(2))
    parts = Particles(120)
    parts.x = rng.random((120, 2)) * 20.0 + 6.0
    parts.v[:, 1] = -0.01
    parts.V0[:] = 0.25
    parts.m[:] = 125.0
    g_s = np.array([0.0, -1e-4])
    sim = CoupledSim(solver, parts, SandMaterial(E=0.05), sediment_gravity=g_s)
    sim.step()
    worst = 0.0
    newton_exact = True
    for _ in range(5):
        p_f0 = sim.fluid_momentum()
        p_s0 = sim.particles.momentum()
        sim.step()
        f = sim.last_fields
        newton_exact &= np.array_equal(f.force,
                                       f.grad_term - f.fs)
        closure = (sim.fluid_momentum() - p_f0) \
            + (sim.particles.momentum() - p_s0) \
            - f.grad_term.sum(axis=0) - parts.total_mass() * g_s
        worst = max(worst, float(np.max(np.abs(closure))))

    # coupling disabled: bitwise equal to the pure solver
    topo1, pair1, s1 = uniform_solver((32, 32), 0.8)
    topo2, pair2, s2 = uniform_solver((32, 32), 0.8)
    nu = s1.level_params.nu(0)
    fn, _ = taylor_green_fields(0.05, 32, nu, s1.level_params.taus)
    set_fields(topo1, pair1, lambda px, py, l: fn(px, py, l))
    set_fields(topo2, pair2, lambda px, py, l: fn(px, py, l))
    sim_off = CoupledSim(s1, None)
    for _ in range(25):
        sim_off.step()
    s2.run_finest_steps(25)
    bitwise = all(
        np.array_equal(s1.arrays(s1.last_roles(0)[1], 0)[nm],
                       s2.arrays(s2.last_roles(0)[1], 0)[nm])
        for nm in ("rho", "ux", "uy", "sxx", "sxy", "syy"))
    ok = newton_exact and worst <= 1e-10 and bitwise
    report(9, "coupling audits", ok,
           f"newton_exact={newton_exact} momentum_closure={worst:.1e} "
           f"coupling_off_bitwise={bitwise}")


def test_10_memory_ratio():
    cfg = load_scene(os.path.join(SCENES, "dune2d.toml"))
    sim = build_scene(cfg)
    finite = True
    max_ratio = 0.0
    uniform = cfg.cells[0] * cfg.cells[1]
    for _ in range(40):
        sim.step()
        topo = sim.topology
        stored = sum(topo.cell_count(level) for level in range(topo.levels))
        max_ratio = max(max_ratio, stored / uniform)
        arr = sim.solver.arrays(sim.solver.last_roles(0)[1], 0)
        finite &= bool(np.isfinite(arr["rho"]).all())
    blocks = cfg.raw["particles"]["blocks"]
    occupied = sum((b[2] - b[0]) * (b[3] - b[1]) for b in blocks) / uniform
    ok = occupied <= 0.05 and max_ratio <= 0.25 and finite
    report(10, "memory ratio", ok,
           f"particle_area={occupied:.1%} stored_cells={max_ratio:.1%} "
           f"(need <= 25%) finite={finite}")


def test_11_powder_transport():
    topo = Topology.uniform((64, 64), levels=1)
    coords = topo.cell_coords(0).astype(float)
    r2 = (coords[:, 0] - 32.0) ** 2 + (coords[:, 1] - 32.0) ** 2
    phi = np.exp(-r2 / 18.0)
    d = 0.1
    p = PowderParams(diffusion=d)
    zeros = np.zeros(len(phi))
    mass0 = phi.sum()

    def variance(f):
        m = f.sum()
        cx = (f * coords[:, 0]).sum() / m
        return (f * (coords[:, 0] - cx) ** 2).sum() / m

    v0 = variance(phi)
    out = phi.copy()
    for _ in range(40):
        out = powder_step(out, zeros, zeros, topo, p, 1.0)
    mass_err = abs(out.sum() - mass0) / mass0
    var_err = abs((variance(out) - v0) / 40.0 - 2 * d) / (2 * d)

    ux = 0.05 * np.sin(2 * np.pi * coords[:, 1] / 64)
    uy = 0.05 * np.sin(2 * np.pi * coords[:, 0] / 64)
    const = np.full(len(phi), 0.3)
    padv = PowderParams(diffusion=0.0)
    for _ in range(50):
        const = powder_step(const, ux, uy, topo, padv, 1.0)
    adv_dev = float(np.max(np.abs(const - 0.3)))

    parts = Particles(16)
    parts.x = np.stack(np.meshgrid(np.arange(4.0), np.arange(4.0),
                                   indexing="ij"), axis=-1).reshape(-1, 2) + 20.0
    parts.v[:] = 0.0
    fields = rasterize_fractions(parts, topo, np.zeros(64 * 64), 0.3,
                                 DragParams())
    q = entrainment_rate(fields, parts, topo, SandMaterial(E=0.05),
                         PowderParams(entrain=1e-3))
    qe_zero = np.array_equal(q, np.zeros_like(q))
    ok = mass_err <= 1e-12 and var_err <= 0.02 and adv_dev <= 1e-12 and qe_zero
    report(11, "powder transport", ok,
           f"mass_err={mass_err:.1e} variance_err={var_err:.2%} "
           f"advect_dev={adv_dev:.1e} qe_zero_at_rest={qe_zero}")


def test_12_boundary_conditions():
    r = run_poiseuille(width=64)

    # convective outlet no-ops on the write tree
    b = BoundarySpec(faces={"x_min": "periodic", "x_max": "periodic",
                            "y_min": "wall", "y_max": "outlet"})
    topo = Topology.uniform((16, 16), levels=1, periodic=b.periodic_axes())
    pair = PingPongPair(topo)
    solver = MultiLevelSolver(topo, pair, SolverParams(levels=1),
                              LevelParams(1, 0.8), b)
    set_fields(topo, pair, quiescent_fields)
    state0 = pair.trees[0].levels[0]["rho"].copy()
    solver.advance_bounce()
    arr = solver.arrays(solver.last_roles(0)[1], 0)
    outlet_noop = np.max(np.abs(arr["rho"] - state0)) <= 1e-15 \
        and np.max(np.abs(arr["uy"])) <= 1e-15

    inlet = LogInlet(u0=0.05, beta=0.2, y0=4.0)
    b2 = BoundarySpec(faces={"x_min": inlet, "x_max": "outlet",
                             "y_min": "wall", "y_max": "outlet"})
    topo2 = Topology.uniform((16, 16), levels=1, periodic=(False, False))
    pair2 = PingPongPair(topo2)
    solver2 = MultiLevelSolver(topo2, pair2, SolverParams(levels=1),
                               LevelParams(1, 0.8), b2)
    set_fields(topo2, pair2, quiescent_fields)
    solver2.advance_bounce()
    arr2 = solver2.arrays(solver2.last_roles(0)[1], 0)
    coords = topo2.cell_coords(0)
    at_y0 = (coords[:, 0] == 0) & (coords[:, 1] == 4)
    inlet_exact = float(np.abs(arr2["ux"][at_y0]).max()) == 0.0

    ok = r.passed and outlet_noop and inlet_exact
    report(12, "boundary conditions", ok,
           f"poiseuille_err={r.metrics['max_profile_err']:.3%} "
           f"outlet_noop={outlet_noop} log_inlet_zero_at_y0={inlet_exact}")

"""Validation experiments: analytic flows, oracles, and property checks.

Each case returns a CaseReport with measured values; the CLI prints them in
a machine-readable single-line format.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from ..adapt import GridAdaptor, RefineDriver, brute_force_grid
from ..granular import MpmGrid, SandMaterial, mpm_step, sample_blocks
from ..lattice import CS2
from ..solver import (
    BoundarySpec,
    LevelParams,
    MultiLevelSolver,
    SolverParams,
    rescale_s_down,
    rescale_s_up,
)
from ..sparse_grid import PingPongPair, Topology
from .reference import uniform_solver


@dataclass
class CaseReport:
    name: str
    passed: bool
    metrics: dict = field(default_factory=dict)

    def line(self) -> str:
        vals = " ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}"
                        for k, v in self.metrics.items())
        return f"RESULT case={self.name} pass={int(self.passed)} {vals}"


def set_fields(topo, pair, fn):
    """Write fn(px, py, level) into both trees (node positions, finest units)."""
    for level in range(topo.levels):
        if not len(topo.tables[level]):
            continue
        coords = topo.cell_coords(level)
        px = coords[:, 0] * float(1 << level)
        py = coords[:, 1] * float(1 << level)
        vals = fn(px, py, level)
        for tree in pair.trees:
            for name, arr in vals.items():
                tree.levels[level][name][:] = arr


def taylor_green_fields(u0, n, nu, taus=None):
    """Analytic decaying vortex initializer/evaluator on node positions."""
    k = 2.0 * np.pi / n

    def fn(px, py, level=0, t=0.0, with_shear=True):
        decay = np.exp(-2.0 * nu * k * k * t)
        ux = -u0 * np.cos(k * px) * np.sin(k * py) * decay
        uy = u0 * np.sin(k * px) * np.cos(k * py) * decay
        p = -0.25 * u0 * u0 * (np.cos(2 * k * px) + np.cos(2 * k * py)) \
            * decay * decay
        out = {"rho": 1.0 + p / CS2, "ux": ux, "uy": uy,
               "sxx": ux * ux, "sxy": ux * uy, "syy": uy * uy}
        if with_shear and taus is not None:
            tau_l = taus[level]
            scale = float(1 << level)
            dxux = u0 * k * np.sin(k * px) * np.sin(k * py) * decay
            dyux = -u0 * k * np.cos(k * px) * np.cos(k * py) * decay
            dxuy = u0 * k * np.cos(k * px) * np.cos(k * py) * decay
            out["sxx"] = out["sxx"] - CS2 * tau_l * scale * 2.0 * dxux
            out["sxy"] = out["sxy"] - CS2 * tau_l * scale * (dyux + dxuy)
            out["syy"] = out["syy"] + CS2 * tau_l * scale * 2.0 * dxux
        return out

    return fn, k


def _l2_velocity_error(topo, solver, fn, t, level=0, leaf_only=False):
    w = solver.last_roles(level)[1]
    arr = solver.arrays(w, level)
    coords = topo.cell_coords(level)
    px = coords[:, 0] * float(1 << level)
    py = coords[:, 1] * float(1 << level)
    ana = fn(px, py, level, t=t, with_shear=False)
    sel = np.ones(len(px), dtype=bool)
    if leaf_only:
        sel = topo.leaf_cells(level)[coords[:, 0], coords[:, 1]]
    du2 = (arr["ux"][sel] - ana["ux"][sel]) ** 2 \
        + (arr["uy"][sel] - ana["uy"][sel]) ** 2
    ref2 = ana["ux"][sel] ** 2 + ana["uy"][sel] ** 2
    return float(np.sqrt(du2.sum() / ref2.sum()))


def run_taylor_green(res=128, tau=0.8, u0=0.05):
    """Decaying vortex vs the analytic solution at one decay time."""
    t0 = time.perf_counter()
    topo, pair, solver = uniform_solver((res, res), tau)
    nu = solver.level_params.nu(0)
    fn, k = taylor_green_fields(u0, res, nu, solver.level_params.taus)
    set_fields(topo, pair, lambda px, py, l: fn(px, py, l))
    steps = int(round(1.0 / (4.0 * nu * k * k)))
    ke = []
    sample_every = max(1, steps // 40)
    for i in range(steps):
        solver.advance_bounce()
        if i % sample_every == 0:
            w = solver.last_roles(0)[1]
            arr = solver.arrays(w, 0)
            ke.append((i + 1.0,
                       0.5 * float((arr["rho"] * (arr["ux"] ** 2
                                                  + arr["uy"] ** 2)).sum())))
    err = _l2_velocity_error(topo, solver, fn, float(steps))
    ts = np.array([p[0] for p in ke])
    es = np.log(np.array([p[1] for p in ke]))
    slope = np.polyfit(ts, es, 1)[0]
    rate_err = abs(slope / (-4.0 * nu * k * k) - 1.0)
    runtime = time.perf_counter() - t0
    return CaseReport(
        "taylor-green",
        passed=err < 0.02 and rate_err < 0.02,
        metrics={"l2_err": err, "ke_rate_err": rate_err,
                 "steps": steps, "runtime_s": runtime})


def run_convergence():
    """L2 error ratio between 64^2 and 128^2 under diffusive scaling."""
    errs = {}
    for res, u0 in ((64, 0.1), (128, 0.05)):
        topo, pair, solver = uniform_solver((res, res), 0.8)
        nu = solver.level_params.nu(0)
        fn, k = taylor_green_fields(u0, res, nu, solver.level_params.taus)
        set_fields(topo, pair, lambda px, py, l: fn(px, py, l))
        steps = int(round(1.0 / (4.0 * nu * k * k)))
        for _ in range(steps):
            solver.advance_bounce()
        errs[res] = _l2_velocity_error(topo, solver, fn, float(steps))
    ratio = errs[64] / errs[128]
    return CaseReport("convergence", passed=ratio >= 3.5,
                      metrics={"err_64": errs[64], "err_128": errs[128],
                               "ratio": ratio})


def run_poiseuille(width=64):
    """Body-force channel flow vs the parabolic profile."""
    g = 1e-6
    b = BoundarySpec(faces={"x_min": "periodic", "x_max": "periodic",
                            "y_min": "wall", "y_max": "wall"})
    topo, pair, solver = uniform_solver((8, width), 1.2, gravity=(g, 0.0),
                                        boundaries=b)
    nu = solver.level_params.nu(0)

    def ic(px, py, level):
        ux = g / (2 * nu) * (py + 0.5) * (width - 0.5 - py)
        dyux = g / (2 * nu) * (width - 1.0 - 2.0 * py)
        return {"rho": np.ones_like(px), "ux": ux,
                "uy": np.zeros_like(px), "sxx": ux * ux,
                "sxy": -CS2 * 1.2 * dyux, "syy": np.zeros_like(px)}

    set_fields(topo, pair, ic)
    for _ in range(4000):
        solver.advance_bounce()
    arr = solver.arrays(solver.last_roles(0)[1], 0)
    coords = topo.cell_coords(0)
    row = coords[:, 0] == 3
    ys = coords[row, 1].astype(float)
    order = np.argsort(ys)
    got = arr["ux"][row][order]
    ys = ys[order]
    want = g / (2 * nu) * (ys + 0.5) * (width - 0.5 - ys)
    err = float(np.max(np.abs(got - want)) / want.max())
    return CaseReport("poiseuille", passed=err < 0.01,
                      metrics={"max_profile_err": err, "width": width})


def refined_multilevel(cells, levels, tau0, static_center=True):
    """Production-path topology with a statically refined central quarter."""
    topo = Topology.uniform(cells, levels=levels)
    pair = PingPongPair(topo)
    level_params = LevelParams(levels, tau0)
    adaptor = GridAdaptor(topo, level_params)
    tx, ty = topo.tiles_dims(0)
    static = np.zeros((tx, ty), dtype=bool)
    if static_center:
        static[tx // 4: 3 * tx // 4, ty // 4: 3 * ty // 4] = True
    driver = RefineDriver(positions=np.zeros((0, 2)), static_tiles=static,
                          levels=levels)
    adaptor.update(driver, pair)
    params = SolverParams(levels=levels)
    solver = MultiLevelSolver(topo, pair, params, level_params)
    return topo, pair, solver


def run_multilevel_consistency(res=128):
    """Refined-quarter Taylor-Green vs the uniform reference, plus exact
    uniform-flow preservation across the interfaces."""
    tau0 = 0.8
    topo, pair, solver = refined_multilevel((res, res), 2, tau0)
    nu = solver.level_params.nu(0)
    fn, k = taylor_green_fields(0.05, res, nu, solver.level_params.taus)
    set_fields(topo, pair, lambda px, py, l: fn(px, py, l))

    rtopo, rpair, rsolver = uniform_solver((res, res), tau0)
    set_fields(rtopo, rpair, lambda px, py, l: fn(px, py, l))

    coarse_steps = int(round(1.0 / (4.0 * nu * k * k))) // 2
    for _ in range(coarse_steps):
        solver.advance_bounce()
    for _ in range(2 * coarse_steps):
        rsolver.advance_bounce()

    ref_arr = rsolver.arrays(rsolver.last_roles(0)[1], 0)
    ref_map = rtopo.cell_map(0)
    rel_sq = 0.0
    ref_sq = 0.0
    for level in range(2):
        w = solver.last_roles(level)[1]
        arr = solver.arrays(w, level)
        coords = topo.cell_coords(level)
        leaf = topo.leaf_cells(level)[coords[:, 0], coords[:, 1]]
        fine_xy = coords[leaf] * (1 << level)
        ridx = ref_map[fine_xy[:, 0], fine_xy[:, 1]]
        vol = float(4 ** level)
        rel_sq += vol * (((arr["ux"][leaf] - ref_arr["ux"][ridx]) ** 2)
                         + ((arr["uy"][leaf] - ref_arr["uy"][ridx]) ** 2)).sum()
        ref_sq += vol * ((ref_arr["ux"][ridx] ** 2)
                         + (ref_arr["uy"][ridx] ** 2)).sum()
    rel_l2 = float(np.sqrt(rel_sq / ref_sq))

    # uniform flow across interfaces
    topo2, pair2, solver2 = refined_multilevel((64, 64), 2, tau0)
    u0 = (0.04, 0.02)
    set_fields(topo2, pair2, lambda px, py, l: {
        "rho": np.ones_like(px),
        "ux": np.full_like(px, u0[0]), "uy": np.full_like(px, u0[1]),
        "sxx": np.full_like(px, u0[0] * u0[0]),
        "sxy": np.full_like(px, u0[0] * u0[1]),
        "syy": np.full_like(px, u0[1] * u0[1])})
    for _ in range(100):
        solver2.advance_bounce()
    dev = 0.0
    for level in range(2):
        arr = solver2.arrays(solver2.last_roles(level)[1], level)
        dev = max(dev, float(np.max(np.abs(arr["ux"] - u0[0]))),
                  float(np.max(np.abs(arr["uy"] - u0[1]))))
    return CaseReport("multilevel-consistency",
                      passed=rel_l2 < 0.02 and dev < 1e-12,
                      metrics={"rel_l2": rel_l2, "uniform_dev": dev})


def run_conservation():
    """Mass drift bounds: single-level exact-ish, multi-level logged bound."""
    topo, pair, solver = uniform_solver((64, 64), 0.8)
    nu = solver.level_params.nu(0)
    fn, _ = taylor_green_fields(0.05, 64, nu, solver.level_params.taus)
    set_fields(topo, pair, lambda px, py, l: fn(px, py, l))
    m0 = float(solver.arrays(solver.roles(0)[0], 0)["rho"].sum())
    for _ in range(1000):
        solver.advance_bounce()
    m1 = float(solver.arrays(solver.last_roles(0)[1], 0)["rho"].sum())
    single_drift = abs(m1 - m0) / m0

    topo2, pair2, solver2 = refined_multilevel((64, 64), 2, 0.8)
    nu2 = solver2.level_params.nu(0)
    fn2, _ = taylor_green_fields(0.05, 64, nu2, solver2.level_params.taus)
    set_fields(topo2, pair2, lambda px, py, l: fn2(px, py, l))

    def leaf_mass(sv, tp, tree_idx_per_level):
        total = 0.0
        for level in range(tp.levels):
            arr = sv.arrays(tree_idx_per_level(level), level)
            coords = tp.cell_coords(level)
            leaf = tp.leaf_cells(level)[coords[:, 0], coords[:, 1]]
            total += float(4 ** level) * float(arr["rho"][leaf].sum())
        return total

    m0 = leaf_mass(solver2, topo2, lambda lv: solver2.roles(lv)[0])
    for _ in range(1000):
        solver2.advance_bounce()
    m1 = leaf_mass(solver2, topo2, lambda lv: solver2.last_roles(lv)[1])
    multi_drift = abs(m1 - m0) / m0
    return CaseReport("conservation",
                      passed=single_drift < 1e-12 and multi_drift < 1e-4,
                      metrics={"single_level_drift": single_drift,
                               "multi_level_drift": multi_drift})


def run_rescale_roundtrip(n=10000, seed=0):
    """Round trip must close under 'derived' and fail under 'paper_literal'."""
    rng = np.random.default_rng(seed)
    u = 0.1 * (rng.random((n, 2)) - 0.5)
    sneq = 0.01 * (rng.random((n, 3)) - 0.5)
    s = np.stack([u[:, 0] ** 2, u[:, 0] * u[:, 1], u[:, 1] ** 2],
                 axis=-1) + sneq
    tau_l, tau_c = 0.8, 0.65
    up = rescale_s_up(s, u, tau_l, tau_c, "derived")
    back = rescale_s_down(up, u, tau_l, tau_c, "derived")
    derived_err = float(np.max(np.abs(back - s)))
    up2 = rescale_s_up(s, u, tau_l, tau_c, "paper_literal")
    back2 = rescale_s_down(up2, u, tau_l, tau_c, "paper_literal")
    literal_err = float(np.max(np.abs(back2 - s)))
    return CaseReport("rescale-roundtrip",
                      passed=derived_err < 1e-14 and literal_err > 1e-6,
                      metrics={"derived_err": derived_err,
                               "paper_literal_err": literal_err})


def run_sand_collapse(n_target=10000, seed=11):
    """Column collapse on a frictional floor; flank slope vs friction angle."""
    t0 = time.perf_counter()
    cells = (192, 64)
    b = BoundarySpec(faces={"x_min": "wall", "x_max": "wall",
                            "y_min": "wall", "y_max": "wall"})
    topo = Topology.uniform(cells, levels=1, periodic=(False, False))
    grid = MpmGrid(topo, b)
    mat = SandMaterial(E=0.08, nu=0.3, friction_deg=30.0, floor_friction=0.5)
    per_cell = 10
    block = (84.0, 2.0, 108.0, 44.0)
    rng = np.random.default_rng(np.random.Philox(seed))
    parts = sample_blocks([block], per_cell, density=2.0, rng=rng)
    mass0 = parts.total_mass()
    count0 = len(parts)
    g = (0.0, -1e-3)
    steps = 0
    for _ in range(3500):
        mpm_step(parts, grid, 1.0, g, mat)
        steps += 1
        if steps % 250 == 0 and steps > 1500:
            if float(np.abs(parts.v).max()) < 1.5e-3:
                break
    runtime = time.perf_counter() - t0

    slope = measure_pile_slope(parts)
    mass_ok = parts.total_mass() == mass0 and len(parts) == count0
    limit = np.tan(np.radians(30.0)) + 0.05
    return CaseReport("sand-collapse",
                      passed=slope <= limit and mass_ok and runtime < 120.0,
                      metrics={"flank_slope": slope, "limit": limit,
                               "steps": steps, "particles": count0,
                               "runtime_s": runtime,
                               "mass_conserved": int(mass_ok)})


def measure_pile_slope(parts):
    """Linear-fit surface slope over both flanks of the settled pile."""
    xs = parts.x[:, 0]
    ys = parts.x[:, 1]
    bins = np.floor(xs).astype(int)
    surf_x, surf_y = [], []
    for bx in np.unique(bins):
        sel = bins == bx
        surf_x.append(bx + 0.5)
        surf_y.append(ys[sel].max())
    surf_x = np.array(surf_x)
    surf_y = np.array(surf_y)
    peak = surf_y.max()
    base = surf_y.min()
    lo = base + 0.2 * (peak - base)
    hi = base + 0.8 * (peak - base)
    apex = surf_x[np.argmax(surf_y)]
    slopes = []
    for side in (surf_x <= apex, surf_x >= apex):
        sel = side & (surf_y >= lo) & (surf_y <= hi)
        if sel.sum() >= 4:
            coef = np.polyfit(surf_x[sel], surf_y[sel], 1)
            slopes.append(abs(coef[0]))
    return max(slopes) if slopes else 0.0


def run_adapt_fuzz(walks=200, steps=500, seed=0):
    """Random particle walks: invariants each update, oracle at settles."""
    rng = np.random.default_rng(seed)
    domain = (32, 32)
    levels = 3
    mismatches = 0
    violations = 0
    settled_checks = 0
    for walk in range(walks):
        topo = Topology.uniform(domain, levels=levels)
        pair = PingPongPair(topo)
        adaptor = GridAdaptor(topo, LevelParams(levels, 0.8))
        n = int(rng.integers(1, 4))
        pos = rng.random((n, 2)) * 28.0 + 2.0
        unchanged = 0
        for _ in range(steps):
            if rng.random() < 0.85:
                pos = np.clip(pos + rng.normal(0.0, 1.5, pos.shape),
                              0.5, 31.5)
                unchanged = 0
            else:
                unchanged += 1
            driver = RefineDriver(positions=pos, levels=levels)
            report = adaptor.update(driver, pair)
            if report.violations:
                violations += 1
            try:
                topo.validate_coverage()
                topo.validate_two_tile_overlap()
            except Exception:
                violations += 1
            if unchanged >= 2:
                settled_checks += 1
                if topo.tile_set() != brute_force_grid(driver, domain, levels):
                    mismatches += 1
    return CaseReport("adapt-fuzz",
                      passed=mismatches == 0 and violations == 0,
                      metrics={"walks": walks, "steps": steps,
                               "settled_checks": settled_checks,
                               "mismatches": mismatches,
                               "violations": violations})


CASES = {
    "taylor-green": run_taylor_green,
    "convergence": run_convergence,
    "poiseuille": run_poiseuille,
    "multilevel-consistency": run_multilevel_consistency,
    "conservation": run_conservation,
    "rescale-roundtrip": run_rescale_roundtrip,
    "sand-collapse": run_sand_collapse,
    "adapt-fuzz": run_adapt_fuzz,
}

"""Dynamic multi-level grid maintenance driven by particle motion.

The level-selection function is binary: a tile whose region holds an MPM
particle (or touches the static refine mask) targets level 0, everything else
targets the coarsest level.  Ownership regions are kept aligned to
parent-tile footprints (exact leaf coverage demands it) and surrounded by
two-tile rings so the overlap invariants hold at every transition.

Refinements apply immediately; coarsening acts per complete sibling group
only after the group has been coarsen-eligible for two consecutive updates,
which prevents refine/coarsen thrash for particles hovering on tile edges.

``brute_force_grid`` is the independent test oracle: a slow, loop-based
construction of the settled topology that shares no code with the
incremental path.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .sparse_grid import (
    BORDER,
    CELLS_PER_TILE,
    FIELD_NAMES,
    FLAG_DELETE,
    FLAG_NONE,
    LEAF,
    TILE,
    PingPongPair,
    TileKey,
    Topology,
    _interp_stencil,
    dilate,
)
from .solver import LevelParams, rescale_s_down, rescale_s_up

PAD_TILES = 2  # ring/band width in tiles of the owning level


@dataclass
class RefineDriver:
    """Inputs of the level-selection function.

    ``positions`` is a (n, 2) float view of particle coordinates in finest
    lattice units; ``static_tiles`` an optional bool raster over finest tiles.
    """

    positions: np.ndarray
    static_tiles: np.ndarray | None = None
    levels: int = 1

    def seed_tiles(self, tiles_dims) -> np.ndarray:
        tx, ty = tiles_dims
        seeds = np.zeros((tx, ty), dtype=bool)
        if self.positions is not None and len(self.positions):
            cells = np.floor(self.positions).astype(np.int64)
            t = cells // TILE
            if (t < 0).any() or (t[:, 0] >= tx).any() or (t[:, 1] >= ty).any():
                raise ValueError("particle outside the domain bounding box")
            seeds[t[:, 0], t[:, 1]] = True
        if self.static_tiles is not None:
            seeds |= self.static_tiles
        return seeds


def target_level(driver: RefineDriver, key: TileKey, tiles_dims0) -> int:
    """Phi: 0 if the tile's region contains a particle or mask, else L-1."""
    seeds = driver.seed_tiles(tiles_dims0)
    scale = 1 << key.level
    tx, ty = key.coords
    block = seeds[tx * scale:(tx + 1) * scale, ty * scale:(ty + 1) * scale]
    return 0 if block.any() else driver.levels - 1


def _align_up(mask: np.ndarray) -> np.ndarray:
    """Expand a tile bitmap to whole parent-tile footprints (2x2 groups)."""
    nx, ny = mask.shape
    grp = mask.reshape(nx // 2, 2, ny // 2, 2).any(axis=(1, 3))
    return np.repeat(np.repeat(grp, 2, axis=0), 2, axis=1)


def _parents(mask: np.ndarray) -> np.ndarray:
    """Parent-tile bitmap of a child-tile bitmap."""
    nx, ny = mask.shape
    return mask.reshape(nx // 2, 2, ny // 2, 2).any(axis=(1, 3))


def desired_cumulative(seeds: np.ndarray, topology: Topology) -> list:
    """Desired coverage-by-levels<=l bitmaps, one per level's tile grid."""
    levels = topology.levels
    cums = []
    if levels == 1:
        cums.append(np.ones(topology.tiles_dims(0), dtype=bool))
        return cums
    cums.append(_align_up(seeds))
    for level in range(1, levels):
        par = _parents(cums[level - 1])
        if level == levels - 1:
            cums.append(np.ones_like(par))
        else:
            req = dilate(par, PAD_TILES, topology.periodic)
            cums.append(_align_up(req))
    return cums


def _current_cumulative(topology: Topology) -> list:
    """Coverage-by-levels<=l bitmaps from the stored leaf tiles."""
    cums = []
    prev = None
    for level in range(topology.levels):
        leaf = np.zeros(topology.tiles_dims(level), dtype=bool)
        table = topology.tables[level]
        for slot, (tx, ty) in enumerate(table.coords):
            if table.kind[slot] == LEAF:
                leaf[tx, ty] = True
        cum = leaf if prev is None else (leaf | _parents(prev))
        cums.append(cum)
        prev = cum
    return cums


@dataclass
class AdaptReport:
    created: list = field(default_factory=list)     # per level
    deleted: list = field(default_factory=list)     # per level
    noop: bool = True
    violations: list = field(default_factory=list)

    def total_created(self):
        return int(sum(self.created)) if self.created else 0

    def total_deleted(self):
        return int(sum(self.deleted)) if self.deleted else 0


class GridAdaptor:
    """Incremental topology maintenance with coarsening hysteresis."""

    def __init__(self, topology: Topology, level_params: LevelParams,
                 rescale_convention: str = "derived"):
        self.topology = topology
        self.level_params = level_params
        self.rescale_convention = rescale_convention
        # coarsen-eligibility streaks per level (levels below the top)
        self.streak = [np.zeros(topology.tiles_dims(l), dtype=np.int16)
                       for l in range(topology.levels)]

    # -- target computation -------------------------------------------------

    def _effective_cumulative(self, des_cums, cur_cums):
        """Merge desired and current coverage: refine now, coarsen after the
        sibling group has been eligible for 2 consecutive updates."""
        topo = self.topology
        effs = []
        eff_prev = None
        for level in range(topo.levels):
            des = des_cums[level]
            cur = cur_cums[level]
            cand = cur & ~des
            self.streak[level] = np.where(cand, self.streak[level] + 1,
                                          0).astype(np.int16)
            act = np.zeros_like(cand)
            if cand.any():
                avail = (self.streak[level] >= 2) & cand
                if eff_prev is not None:
                    # keep the two-tile ring of any retained finer coverage
                    guard = dilate(_parents(eff_prev), PAD_TILES, topo.periodic)
                    avail &= ~guard
                # act on complete sibling groups only (keeps alignment)
                nx, ny = avail.shape
                grp = avail.reshape(nx // 2, 2, ny // 2, 2).all(axis=(1, 3))
                act = avail & np.repeat(np.repeat(grp, 2, axis=0), 2, axis=1)
            eff = des | (cur & ~act)
            if eff_prev is not None:
                eff |= _parents(eff_prev)
            effs.append(eff)
            eff_prev = eff
        if topo.levels > 1:
            effs[-1][:] = True
        return effs

    @staticmethod
    def _storage_from_cums(cums, topology):
        """(leaf, border) tile bitmaps per level from cumulative coverage."""
        out = []
        for level in range(topology.levels):
            own = cums[level]
            if level > 0:
                own = own & ~_parents(cums[level - 1])
            storage = dilate(own, PAD_TILES, topology.periodic)
            out.append((own, storage & ~own))
        return out

    # -- update ----------------------------------------------------------------

    def update(self, driver: RefineDriver, pair: PingPongPair) -> AdaptReport:
        """One adaptation pass: marking, refinement, coarsening, rebuild."""
        topo = self.topology
        report = AdaptReport(created=[0] * topo.levels,
                             deleted=[0] * topo.levels)
        seeds = driver.seed_tiles(topo.tiles_dims(0))
        des = desired_cumulative(seeds, topo)
        cur = _current_cumulative(topo)
        eff = self._effective_cumulative(des, cur)
        plan = self._storage_from_cums(eff, topo)

        # noop detection before touching any storage
        changed_levels = []
        for level, (leaf, border) in enumerate(plan):
            table = topo.tables[level]
            cur_leaf = np.zeros_like(leaf)
            cur_border = np.zeros_like(border)
            for slot, (tx, ty) in enumerate(table.coords):
                if table.kind[slot] == LEAF:
                    cur_leaf[tx, ty] = True
                else:
                    cur_border[tx, ty] = True
            if not (np.array_equal(cur_leaf, leaf)
                    and np.array_equal(cur_border, border)):
                changed_levels.append(level)
        if not changed_levels:
            self._check_invariants(driver, report)
            return report

        report.noop = False
        self._apply(plan, changed_levels, pair, report)
        self._check_invariants(driver, report)
        return report

    def _apply(self, plan, changed_levels, pair, report):
        topo = self.topology
        # snapshot old lookup state and arrays before any rebuild
        old_maps = {l: topo.cell_map(l) for l in range(topo.levels)}
        old_arrays = [
            {l: dict(tree.levels[l]) for l in range(topo.levels)}
            for tree in pair.trees
        ]

        new_cells = {}
        for level in changed_levels:
            leaf, border = plan[level]
            table = topo.tables[level]
            old_count = len(table)
            # transient flags per the marking semantics: tiles that vanish
            # are delete, newly finer coverage refine, newly coarser coarsen
            for slot, (tx, ty) in enumerate(table.coords):
                keep = leaf[tx, ty] or border[tx, ty]
                table.flag[slot] = FLAG_NONE if keep else FLAG_DELETE
            leafs = [tuple(c) for c in np.argwhere(leaf)]
            borders = [tuple(c) for c in np.argwhere(border)]
            old_slot_of_new = topo.rebuild_level(level, leafs, borders)
            new_count = len(topo.tables[level])
            created = int((old_slot_of_new < 0).sum())
            report.created[level] = created
            report.deleted[level] = old_count - (new_count - created)

            # move surviving cell data bitwise, remember fresh cells
            n_new = new_count * CELLS_PER_TILE
            gather = np.full(n_new, -1, dtype=np.int64)
            surv = old_slot_of_new >= 0
            offs = np.arange(CELLS_PER_TILE)
            new_base = np.nonzero(surv)[0] * CELLS_PER_TILE
            old_base = old_slot_of_new[surv] * CELLS_PER_TILE
            for t_idx, tree in enumerate(pair.trees):
                fresh_arrays = {}
                for name in FIELD_NAMES:
                    arr = np.zeros(n_new)
                    if name == "rho":
                        arr[:] = 1.0
                    elif name == "eps":
                        arr[:] = 1.0
                    if surv.any():
                        arr[(new_base[:, None] + offs).ravel()] = \
                            old_arrays[t_idx][level][name][
                                (old_base[:, None] + offs).ravel()]
                    fresh_arrays[name] = arr
                tree.levels[level] = fresh_arrays
            if (~surv).any():
                fresh_flat = ((np.nonzero(~surv)[0] * CELLS_PER_TILE)[:, None]
                              + offs).ravel()
                new_cells[level] = fresh_flat

        topo.bump()
        self._init_new_cells(new_cells, old_maps, old_arrays, pair, report)

    def _rescale_chain(self, s, u, level_from, level_to):
        """Rescale S across possibly several levels (composition per pair)."""
        taus = self.level_params.taus
        conv = self.rescale_convention
        lvl = level_from
        while lvl > level_to:      # coarser -> finer
            s = rescale_s_down(s, u, taus[lvl - 1], taus[lvl], conv)
            lvl -= 1
        while lvl < level_to:      # finer -> coarser
            s = rescale_s_up(s, u, taus[lvl], taus[lvl + 1], conv)
            lvl += 1
        return s

    def _init_new_cells(self, new_cells, old_maps, old_arrays, pair, report):
        """Moments for fresh cells: interpolate down from the nearest old
        coarser coverage, else copy up from the old finer coincident cells
        (no temporal term).  Old coverage was exact, so one of the two
        directions must supply every cell."""
        topo = self.topology
        for level, flat in new_cells.items():
            coords = topo.cell_coords(level)[flat]
            filled = np.zeros(len(flat), dtype=bool)

            for src_level in range(level + 1, topo.levels):
                if filled.all() or not len(old_arrays[0][src_level]["rho"]):
                    continue
                rem = np.nonzero(~filled)[0]
                idx4, w4 = _interp_stencil(coords[rem], old_maps[src_level],
                                           topo.periodic,
                                           ratio_log2=src_level - level)
                ok = ~((w4 > 0) & (idx4 < 0)).any(axis=1)
                if not ok.any():
                    continue
                src4 = idx4[ok].clip(min=0)
                ww = w4[ok]
                tgt = flat[rem[ok]]
                for t_idx, tree in enumerate(pair.trees):
                    olda = old_arrays[t_idx][src_level]
                    vals = {nm: (olda[nm][src4] * ww).sum(axis=1)
                            for nm in FIELD_NAMES}
                    u = np.stack([vals["ux"], vals["uy"]], axis=-1)
                    s = np.stack([vals["sxx"], vals["sxy"], vals["syy"]],
                                 axis=-1)
                    s_f = self._rescale_chain(s, u, src_level, level)
                    dst = tree.levels[level]
                    for nm in ("rho", "ux", "uy", "eps", "phi"):
                        dst[nm][tgt] = vals[nm]
                    dst["sxx"][tgt] = s_f[:, 0]
                    dst["sxy"][tgt] = s_f[:, 1]
                    dst["syy"][tgt] = s_f[:, 2]
                filled[rem[ok]] = True

            for src_level in range(level - 1, -1, -1):
                if filled.all() or not len(old_arrays[0][src_level]["rho"]):
                    continue
                rem = np.nonzero(~filled)[0]
                shift = level - src_level
                fmap = old_maps[src_level]
                src = fmap[coords[rem, 0] << shift, coords[rem, 1] << shift]
                ok = src >= 0
                if not ok.any():
                    continue
                tgt = flat[rem[ok]]
                s_idx = src[ok]
                for t_idx, tree in enumerate(pair.trees):
                    olda = old_arrays[t_idx][src_level]
                    u = np.stack([olda["ux"][s_idx], olda["uy"][s_idx]],
                                 axis=-1)
                    s = np.stack([olda["sxx"][s_idx], olda["sxy"][s_idx],
                                  olda["syy"][s_idx]], axis=-1)
                    s_c = self._rescale_chain(s, u, src_level, level)
                    dst = tree.levels[level]
                    for nm in ("rho", "eps", "phi"):
                        dst[nm][tgt] = olda[nm][s_idx]
                    dst["ux"][tgt] = u[:, 0]
                    dst["uy"][tgt] = u[:, 1]
                    dst["sxx"][tgt] = s_c[:, 0]
                    dst["sxy"][tgt] = s_c[:, 1]
                    dst["syy"][tgt] = s_c[:, 2]
                filled[rem[ok]] = True

            if not filled.all():
                for j in np.nonzero(~filled)[0][:8]:
                    report.violations.append(
                        ("uninitialized cell", level, tuple(coords[j])))

    def _check_invariants(self, driver, report):
        topo = self.topology
        try:
            topo.validate_coverage()
            topo.validate_two_tile_overlap()
        except Exception as exc:  # reported, not raised (spec contract)
            report.violations.append(("invariant", str(exc)))
        if driver.positions is not None and len(driver.positions):
            cells = np.floor(driver.positions).astype(np.int64)
            tiles = cells // TILE
            table = topo.tables[0]
            for tx, ty in {(int(a), int(b)) for a, b in tiles}:
                slot = table.find((tx, ty))
                if slot is None or table.kind[slot] != LEAF:
                    report.violations.append(
                        ("particle not in level-0 leaf", (tx, ty)))


def update_grid(adaptor: GridAdaptor, driver: RefineDriver,
                pair: PingPongPair) -> AdaptReport:
    """Functional entry point over a persistent adaptor."""
    return adaptor.update(driver, pair)


# -- brute-force oracle ----------------------------------------------------------


def brute_force_grid(driver: RefineDriver, finest_cells, levels,
                     periodic=(True, True)) -> set:
    """Reference topology for the driver state: set of (level, tx, ty, kind).

    Deliberately slow and independent: explicit loops over python sets, ring
    membership by Chebyshev distance, alignment by index arithmetic.
    """
    tx0 = finest_cells[0] // TILE
    ty0 = finest_cells[1] // TILE

    def tiles_dims(level):
        return (tx0 >> level, ty0 >> level)

    def align_groups(tiles, level):
        out = set()
        for (x, y) in tiles:
            gx, gy = (x // 2) * 2, (y // 2) * 2
            for dx in (0, 1):
                for dy in (0, 1):
                    out.add((gx + dx, gy + dy))
        return out

    def parents_of(tiles):
        return {(x // 2, y // 2) for (x, y) in tiles}

    def ring(tiles, level, radius):
        nx, ny = tiles_dims(level)
        out = set()
        for (x, y) in tiles:
            for dx in range(-radius, radius + 1):
                for dy in range(-radius, radius + 1):
                    px, py = x + dx, y + dy
                    if periodic[0]:
                        px %= nx
                    if periodic[1]:
                        py %= ny
                    if 0 <= px < nx and 0 <= py < ny:
                        out.add((px, py))
        return out

    seeds = set()
    if driver.positions is not None:
        for pos in np.asarray(driver.positions):
            seeds.add((int(pos[0]) // TILE, int(pos[1]) // TILE))
    if driver.static_tiles is not None:
        for x, y in np.argwhere(driver.static_tiles):
            seeds.add((int(x), int(y)))

    if levels == 1:
        nx, ny = tiles_dims(0)
        return {(0, x, y, LEAF) for x in range(nx) for y in range(ny)}

    cums = [align_groups(seeds, 0)]
    for level in range(1, levels):
        par = parents_of(cums[level - 1])
        if level == levels - 1:
            nx, ny = tiles_dims(level)
            cums.append({(x, y) for x in range(nx) for y in range(ny)})
        else:
            cums.append(align_groups(ring(par, level, PAD_TILES), level))

    out = set()
    for level in range(levels):
        own = set(cums[level])
        if level > 0:
            own -= parents_of(cums[level - 1])
        storage = ring(own, level, PAD_TILES)
        for (x, y) in storage:
            kind = LEAF if (x, y) in own else BORDER
            out.add((level, x, y, kind))
    return out


def apply_reference_topology(topology: Topology, reference: set):
    """Load an oracle tile set into a topology (test helper)."""
    per_level = {l: ([], []) for l in range(topology.levels)}
    for (level, x, y, kind) in reference:
        per_level[level][0 if kind == LEAF else 1].append((x, y))
    for level, (leafs, borders) in per_level.items():
        topology.rebuild_level(level, leafs, borders)
    topology.bump()

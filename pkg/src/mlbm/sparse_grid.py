"""Multi-level sparse tile hierarchy: tables, field trees, interface sets.

Tiles are 4 cells per axis.  Each level stores only the tiles it needs (leaf
tiles own their region; border tiles are the two-tile overlap bands straddling
level transitions).  Field storage is two complete trees (the ping-pong pair)
regardless of level count; which tree a level reads or writes follows from a
single parity rule (:func:`buffer_roles`).

Coordinates are (x, y) tuples; grid-shaped arrays are indexed ``grid[ix, iy]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

TILE = 4                       # cells per axis per tile
CELLS_PER_TILE = TILE * TILE

LEAF = 0
BORDER = 1
KIND_NAMES = {LEAF: "leaf", BORDER: "border"}

FLAG_NONE = 0
FLAG_REFINE = 1
FLAG_COARSEN = 2
FLAG_DELETE = 3

FIELD_NAMES = ("rho", "ux", "uy", "sxx", "sxy", "syy", "eps", "fx", "fy", "phi")
MOMENT_NAMES = FIELD_NAMES[:6]


class TopologyError(RuntimeError):
    """A structural invariant was violated (missing sources, bad coverage)."""


@dataclass(frozen=True)
class TileKey:
    level: int
    coords: tuple

    def __iter__(self):
        yield self.level
        yield self.coords


def parent(key: TileKey, levels: int) -> TileKey:
    if key.level >= levels - 1:
        raise ValueError(f"tile at top level {key.level} has no parent")
    return TileKey(key.level + 1, (key.coords[0] // 2, key.coords[1] // 2))


def children(key: TileKey) -> list:
    if key.level == 0:
        raise ValueError("tile at level 0 has no children")
    x, y = key.coords
    return [TileKey(key.level - 1, (2 * x + dx, 2 * y + dy))
            for dy in (0, 1) for dx in (0, 1)]


def siblings(key: TileKey, levels: int) -> list:
    p = parent(key, levels)
    return [k for k in children(p) if k.coords != key.coords]


def neighbors(key: TileKey) -> list:
    x, y = key.coords
    return [TileKey(key.level, (x + dx, y + dy))
            for dy in (-1, 0, 1) for dx in (-1, 0, 1)
            if not (dx == 0 and dy == 0)]


class TileTable:
    """One level's tile table: hash index plus dense slots.

    Slots stay dense in [0, tile_count): erasing swaps the last slot into the
    hole.  The hash index is a dict keyed by tile coords (CPython's
    open-addressed table provides the O(1) amortized contract).
    """

    def __init__(self):
        self.coords: list = []        # slot -> (tx, ty)
        self.kind: list = []          # slot -> LEAF | BORDER
        self.flag: list = []          # slot -> adapt flag
        self._index: dict = {}        # (tx, ty) -> slot

    def __len__(self) -> int:
        return len(self.coords)

    def __contains__(self, coords) -> bool:
        return tuple(coords) in self._index

    def insert(self, coords, kind: int = LEAF) -> int:
        coords = tuple(coords)
        if coords in self._index:
            raise ValueError(f"tile {coords} already present")
        slot = len(self.coords)
        self.coords.append(coords)
        self.kind.append(kind)
        self.flag.append(FLAG_NONE)
        self._index[coords] = slot
        return slot

    def erase(self, coords) -> None:
        coords = tuple(coords)
        slot = self._index.pop(coords)
        last = len(self.coords) - 1
        if slot != last:
            self.coords[slot] = self.coords[last]
            self.kind[slot] = self.kind[last]
            self.flag[slot] = self.flag[last]
            self._index[self.coords[slot]] = slot
        self.coords.pop()
        self.kind.pop()
        self.flag.pop()

    def find(self, coords):
        return self._index.get(tuple(coords))

    def find_tile(self, cell_coords):
        """Slot of the tile containing a cell, or None."""
        return self.find((cell_coords[0] // TILE, cell_coords[1] // TILE))


class Topology:
    """Tile tables for all levels over a fixed rectangular domain.

    ``finest_cells`` is the domain extent in level-0 cells; level ``l`` has
    ``finest_cells / 2**l`` cells per axis.  Derived lookup structures (dense
    cell index maps, leaf rasters, owner rasters) are cached per ``version``.
    """

    def __init__(self, finest_cells, levels: int, periodic=(True, True)):
        nx, ny = int(finest_cells[0]), int(finest_cells[1])
        if levels < 1:
            raise ValueError("levels must be >= 1")
        step = TILE * (1 << (levels - 1))
        if nx % step or ny % step:
            raise ValueError(
                f"finest cells {nx}x{ny} must be divisible by {step} "
                f"(tile size x 2^(levels-1))")
        self.finest_cells = (nx, ny)
        self.levels = levels
        self.periodic = (bool(periodic[0]), bool(periodic[1]))
        self.tables = [TileTable() for _ in range(levels)]
        self.version = 0
        self._cache = {}

    # -- geometry -----------------------------------------------------------

    def cells_dims(self, level: int):
        return (self.finest_cells[0] >> level, self.finest_cells[1] >> level)

    def tiles_dims(self, level: int):
        nx, ny = self.cells_dims(level)
        return (nx // TILE, ny // TILE)

    def cell_count(self, level: int) -> int:
        return len(self.tables[level]) * CELLS_PER_TILE

    def find_tile(self, level: int, cell_coords):
        """Slot of the level's tile containing a cell, or None."""
        if not 0 <= level < self.levels:
            raise ValueError(f"level {level} outside [0, {self.levels})")
        return self.tables[level].find_tile(cell_coords)

    @classmethod
    def uniform(cls, finest_cells, levels: int = 1, periodic=(True, True)):
        """All-leaf coverage at the coarsest level (empty driver topology)."""
        topo = cls(finest_cells, levels, periodic)
        top = levels - 1
        tx, ty = topo.tiles_dims(top)
        for y in range(ty):
            for x in range(tx):
                topo.tables[top].insert((x, y), LEAF)
        topo.bump()
        return topo

    def bump(self):
        self.version += 1
        self._cache.clear()

    def rebuild_level(self, level: int, leaf_coords, border_coords):
        """Replace a level's table in canonical order; returns old slots.

        The result maps each new slot to the tile's previous slot, or -1 for
        freshly created tiles, so callers can move per-cell field data.
        """
        old = self.tables[level]
        new = TileTable()
        entries = sorted([(c, LEAF) for c in leaf_coords]
                         + [(c, BORDER) for c in border_coords])
        old_slot_of_new = np.full(len(entries), -1, dtype=np.int64)
        for i, (coords, kind) in enumerate(entries):
            new.insert(coords, kind)
            prev = old.find(coords)
            if prev is not None:
                old_slot_of_new[i] = prev
        self.tables[level] = new
        return old_slot_of_new

    # -- cached rasters -----------------------------------------------------

    def _cached(self, name, level, builder):
        key = (name, level)
        if key not in self._cache:
            self._cache[key] = builder(level)
        return self._cache[key]

    def cell_map(self, level: int) -> np.ndarray:
        """Dense (nx, ny) int32 map from cell coords to flat slot index (-1)."""
        return self._cached("map", level, self._build_cell_map)

    def _build_cell_map(self, level):
        nx, ny = self.cells_dims(level)
        cmap = np.full((nx, ny), -1, dtype=np.int64)
        table = self.tables[level]
        lx = np.arange(TILE)
        offs = (lx[None, :] + TILE * lx[:, None])  # [ly, lx] -> local offset
        for slot, (tx, ty) in enumerate(table.coords):
            base = slot * CELLS_PER_TILE
            cmap[tx * TILE:(tx + 1) * TILE, ty * TILE:(ty + 1) * TILE] = \
                base + offs.T
        return cmap

    def cell_coords(self, level: int):
        """(n, 2) int array of cell coords per flat index."""
        return self._cached("coords", level, self._build_cell_coords)

    def _build_cell_coords(self, level):
        table = self.tables[level]
        n = len(table) * CELLS_PER_TILE
        out = np.empty((n, 2), dtype=np.int64)
        lx = np.tile(np.arange(TILE), TILE)
        ly = np.repeat(np.arange(TILE), TILE)
        for slot, (tx, ty) in enumerate(table.coords):
            sl = slice(slot * CELLS_PER_TILE, (slot + 1) * CELLS_PER_TILE)
            out[sl, 0] = tx * TILE + lx
            out[sl, 1] = ty * TILE + ly
        return out

    def leaf_cells(self, level: int) -> np.ndarray:
        """(nx, ny) bool raster of cells inside leaf tiles of this level."""
        return self._cached("leaf", level, self._build_leaf_cells)

    def _build_leaf_cells(self, level):
        nx, ny = self.cells_dims(level)
        out = np.zeros((nx, ny), dtype=bool)
        table = self.tables[level]
        for slot, (tx, ty) in enumerate(table.coords):
            if table.kind[slot] == LEAF:
                out[tx * TILE:(tx + 1) * TILE, ty * TILE:(ty + 1) * TILE] = True
        return out

    def owner_grid(self, level: int) -> np.ndarray:
        """Owner level of each level-``level`` cell position (-1 = uncovered).

        Owner regions align to tile boundaries of their own level, so a cell
        of any level never straddles an ownership boundary and sampling one
        corner is exact.
        """
        return self._cached("owner", level, self._build_owner_grid)

    def _build_owner_grid(self, level):
        nx, ny = self.cells_dims(level)
        owner = np.full((nx, ny), -1, dtype=np.int8)
        xs = np.arange(nx)
        ys = np.arange(ny)
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        # coarsest first so finer levels overwrite (finest owner wins is not
        # needed: leaves are disjoint, but order makes stray overlaps visible
        # via validate_coverage rather than here)
        for lp in range(self.levels - 1, -1, -1):
            leaf = self.leaf_cells(lp)
            if not leaf.any():
                continue
            if lp >= level:
                mask = leaf[gx >> (lp - level), gy >> (lp - level)]
            else:
                mask = leaf[gx << (level - lp), gy << (level - lp)]
            owner[mask] = lp
        return owner

    # -- diagnostics ---------------------------------------------------------

    def dump_text(self) -> str:
        """One line per tile: ``level tx ty kind`` (test/debug interface)."""
        lines = []
        for level, table in enumerate(self.tables):
            for slot in range(len(table)):
                tx, ty = table.coords[slot]
                lines.append(f"{level} {tx} {ty} {KIND_NAMES[table.kind[slot]]}")
        return "\n".join(lines) + ("\n" if lines else "")

    def tile_set(self) -> set:
        """Set of (level, tx, ty, kind) across all levels (for comparisons)."""
        out = set()
        for level, table in enumerate(self.tables):
            for slot in range(len(table)):
                tx, ty = table.coords[slot]
                out.add((level, tx, ty, table.kind[slot]))
        return out

    def validate_coverage(self):
        """Every finest-resolution cell lies in exactly one leaf tile."""
        nx, ny = self.finest_cells
        count = np.zeros((nx, ny), dtype=np.int16)
        for level in range(self.levels):
            leaf = self.leaf_cells(level)
            if not leaf.any():
                continue
            count += np.repeat(np.repeat(leaf.astype(np.int16), 1 << level, 0),
                               1 << level, 1)
        if not np.all(count == 1):
            bad = np.argwhere(count != 1)
            raise TopologyError(
                f"leaf coverage violated at {len(bad)} finest cells, "
                f"first={tuple(bad[0])} count={count[tuple(bad[0])]}")

    def validate_two_tile_overlap(self):
        """Every leaf tile has its full first and second ring at its level
        (tiles outside the domain excluded; periodic axes wrap)."""
        for level, table in enumerate(self.tables):
            txd, tyd = self.tiles_dims(level)
            present = np.zeros((txd, tyd), dtype=bool)
            leaf = np.zeros((txd, tyd), dtype=bool)
            for slot, (tx, ty) in enumerate(table.coords):
                present[tx, ty] = True
                if table.kind[slot] == LEAF:
                    leaf[tx, ty] = True
            if not leaf.any():
                continue
            missing = dilate(leaf, 2, self.periodic) & ~present
            if missing.any():
                x, y = np.argwhere(missing)[0]
                raise TopologyError(
                    f"level {level}: ring tile ({x},{y}) of a leaf is missing")


def _shift_or(mask: np.ndarray, axis: int, wrap: bool) -> np.ndarray:
    """mask OR its +-1 shifts along one axis (1D dilation)."""
    out = mask.copy()
    if axis == 0:
        out[1:, :] |= mask[:-1, :]
        out[:-1, :] |= mask[1:, :]
        if wrap:
            out[0, :] |= mask[-1, :]
            out[-1, :] |= mask[0, :]
    else:
        out[:, 1:] |= mask[:, :-1]
        out[:, :-1] |= mask[:, 1:]
        if wrap:
            out[:, 0] |= mask[:, -1]
            out[:, -1] |= mask[:, 0]
    return out


def dilate(mask: np.ndarray, steps: int, periodic=(True, True)) -> np.ndarray:
    """Chebyshev dilation of a bool grid by ``steps`` cells (separable)."""
    out = mask
    for _ in range(steps):
        out = _shift_or(_shift_or(out, 0, periodic[0]), 1, periodic[1])
    return out if out is not mask else mask.copy()


# -- field storage ------------------------------------------------------------


class FieldTree:
    """Per-level SoA arrays over the stored tiles of a topology."""

    def __init__(self, topology: Topology):
        self.levels = []
        for level in range(topology.levels):
            n = topology.cell_count(level)
            arrays = {name: np.zeros(n) for name in FIELD_NAMES}
            arrays["rho"][:] = 1.0
            arrays["eps"][:] = 1.0
            self.levels.append(arrays)

    def nbytes(self) -> int:
        return sum(a.nbytes for lv in self.levels for a in lv.values())


class PingPongPair:
    """Two field trees with identical topology plus the bounce counter."""

    def __init__(self, topology: Topology):
        self.trees = (FieldTree(topology), FieldTree(topology))
        self.bounce = 0

    def nbytes(self) -> int:
        return self.trees[0].nbytes() + self.trees[1].nbytes()


def buffer_roles(level: int, bounce: int):
    """(read, write) tree indices for a level about to take a step.

    ``bounce`` is the level's own step parity: the pair's bounce counter for
    the top level, the parent's sub-step index (0 or 1) below it — which
    equals the level's own step count mod 2 throughout the recursion.
    """
    if (level + bounce) % 2 == 0:
        return (0, 1)
    return (1, 0)


# -- interface sets ------------------------------------------------------------


@dataclass
class DownTransfer:
    """Fine cells of I^d_l with their coarse interpolation stencils."""
    level: int
    targets: np.ndarray      # (n,) flat indices at level l
    src4: np.ndarray         # (n, 4) flat indices at level l+1
    w4: np.ndarray           # (n, 4) multilinear weights


@dataclass
class UpTransfer:
    """Coarse cells of I^u_l with their coincident fine sources.

    ``src4`` carries the full 2x2 child block for the optional averaging
    transfer mode; ``src`` is the coincident (even-index) child.
    """
    level: int               # the coarse level receiving data
    targets: np.ndarray      # (n,) flat indices at this level
    src: np.ndarray          # (n,) flat indices at level-1
    src4: np.ndarray = None  # (n, 4) flat indices at level-1


@dataclass
class InterfaceSets:
    downs: dict = field(default_factory=dict)   # fine level l -> DownTransfer
    ups: dict = field(default_factory=dict)     # coarse level l -> UpTransfer


def _interp_stencil(cells: np.ndarray, coarse_map: np.ndarray, periodic,
                    ratio_log2: int = 1):
    """2^d-point multilinear stencil from fine cell coords into a map
    ``ratio_log2`` levels coarser.

    Periodic axes wrap; non-periodic axes clamp at the domain edge (constant
    extrapolation), so a missing source can only mean unstored coverage.
    """
    n = len(cells)
    cnx, cny = coarse_map.shape
    base = cells >> ratio_log2
    frac = (cells & ((1 << ratio_log2) - 1)) / float(1 << ratio_log2)
    idx = np.empty((n, 4), dtype=np.int64)
    w = np.empty((n, 4))
    k = 0
    for oy in (0, 1):
        for ox in (0, 1):
            cx = base[:, 0] + ox
            cy = base[:, 1] + oy
            cx = cx % cnx if periodic[0] else cx.clip(0, cnx - 1)
            cy = cy % cny if periodic[1] else cy.clip(0, cny - 1)
            wx = np.where(ox == 0, 1.0 - frac[:, 0], frac[:, 0])
            wy = np.where(oy == 0, 1.0 - frac[:, 1], frac[:, 1])
            idx[:, k] = coarse_map[cx, cy]
            w[:, k] = wx * wy
            k += 1
    return idx, w


def classify_interfaces(topology: Topology) -> InterfaceSets:
    """Derive downward/upward interface sets from the stored tile tables.

    I^d_l: the outermost 2-cell rim of level-l storage facing coarser-owned
    coverage.  I^u_l: the 1-cell layer of level-l storage facing finer-owned
    coverage.  Raises TopologyError when a required source is absent or the
    two rims touch.
    """
    sets = InterfaceSets()
    for level in range(topology.levels):
        if len(topology.tables[level]) == 0:
            continue
        cmap = topology.cell_map(level)
        occ = cmap >= 0
        gap = ~occ
        if not gap.any():
            continue
        owner = topology.owner_grid(level)
        stray = gap & (owner == level)
        if stray.any():
            raise TopologyError(
                f"level {level}: leaf-owned cell not stored at "
                f"{tuple(np.argwhere(stray)[0])}")
        gap_coarse = gap & (owner > level)
        gap_fine = gap & (owner >= 0) & (owner < level)

        id_mask = occ & dilate(gap_coarse, 2, topology.periodic)
        iu_mask = occ & dilate(gap_fine, 1, topology.periodic)
        if (id_mask & iu_mask).any():
            raise TopologyError(
                f"level {level}: downward and upward rims overlap")

        if id_mask.any():
            if level == topology.levels - 1:
                raise TopologyError("top level cannot have a downward rim")
            cells = np.argwhere(id_mask)
            idx4, w4 = _interp_stencil(cells, topology.cell_map(level + 1),
                                       topology.periodic)
            missing = (w4 > 0) & (idx4 < 0)
            if missing.any():
                bad = cells[missing.any(axis=1)][0]
                raise TopologyError(
                    f"I^d level {level} cell {tuple(bad)} lacks coarse sources")
            sets.downs[level] = DownTransfer(
                level=level,
                targets=cmap[cells[:, 0], cells[:, 1]],
                src4=idx4, w4=w4)

        if iu_mask.any():
            if level == 0:
                raise TopologyError("level 0 cannot have an upward rim")
            cells = np.argwhere(iu_mask)
            fmap = topology.cell_map(level - 1)
            src = fmap[cells[:, 0] * 2, cells[:, 1] * 2]
            if (src < 0).any():
                bad = cells[src < 0][0]
                raise TopologyError(
                    f"I^u level {level} cell {tuple(bad)} lacks its "
                    f"coincident fine source")
            fnx, fny = topology.cells_dims(level - 1)
            src4 = np.empty((len(cells), 4), dtype=np.int64)
            k = 0
            for oy in (0, 1):
                for ox in (0, 1):
                    fx = cells[:, 0] * 2 + ox
                    fy = cells[:, 1] * 2 + oy
                    fx = fx % fnx if topology.periodic[0] else \
                        fx.clip(0, fnx - 1)
                    fy = fy % fny if topology.periodic[1] else \
                        fy.clip(0, fny - 1)
                    src4[:, k] = fmap[fx, fy]
                    k += 1
            sets.ups[level] = UpTransfer(
                level=level,
                targets=cmap[cells[:, 0], cells[:, 1]],
                src=src, src4=src4)
    return sets


def interface_min_separation(topology: Topology, sets: InterfaceSets):
    """Min Chebyshev distance (finest cell units) between I^d_l and I^u_{l+1}
    per transition; None where either set is empty."""
    out = {}
    for level, down in sets.downs.items():
        up = sets.ups.get(level + 1)
        if up is None:
            out[level] = None
            continue
        dcells = topology.cell_coords(level)[down.targets]
        ucells = topology.cell_coords(level + 1)[up.targets]
        dlo = dcells * (1 << level)
        dhi = dlo + (1 << level)
        ulo = ucells * (1 << (level + 1))
        uhi = ulo + (1 << (level + 1))
        gap_x = np.maximum(
            0, np.maximum(dlo[:, None, 0], ulo[None, :, 0])
            - np.minimum(dhi[:, None, 0], uhi[None, :, 0]))
        gap_y = np.maximum(
            0, np.maximum(dlo[:, None, 1], ulo[None, :, 1])
            - np.minimum(dhi[:, None, 1], uhi[None, :, 1]))
        out[level] = int(np.maximum(gap_x, gap_y).min())
    return out

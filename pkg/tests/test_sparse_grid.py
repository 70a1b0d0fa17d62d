"""Tests for tile tables, topology queries, ping-pong roles, interfaces."""

import numpy as np
import pytest

from mlbm.sparse_grid import (
    BORDER,
    LEAF,
    FieldTree,
    PingPongPair,
    TileKey,
    TileTable,
    Topology,
    TopologyError,
    buffer_roles,
    children,
    classify_interfaces,
    dilate,
    neighbors,
    parent,
    siblings,
)


class TestTopologyQueries:
    def test_parent_floor_division(self):
        assert parent(TileKey(0, (5, 3)), levels=2) == TileKey(1, (2, 1))
        assert parent(TileKey(0, (-1, -2)), levels=2) == TileKey(1, (-1, -1))

    def test_children(self):
        got = {k.coords for k in children(TileKey(1, (2, 1)))}
        assert got == {(4, 2), (5, 2), (4, 3), (5, 3)}
        assert all(k.level == 0 for k in children(TileKey(1, (2, 1))))

    def test_siblings(self):
        got = {k.coords for k in siblings(TileKey(0, (5, 3)), levels=2)}
        assert got == {(4, 2), (5, 2), (4, 3)}

    def test_neighbors_full_ring(self):
        got = {k.coords for k in neighbors(TileKey(1, (0, 0)))}
        assert got == {(dx, dy) for dx in (-1, 0, 1) for dy in (-1, 0, 1)} - {(0, 0)}

    def test_domain_errors(self):
        with pytest.raises(ValueError):
            parent(TileKey(1, (0, 0)), levels=2)
        with pytest.raises(ValueError):
            children(TileKey(0, (0, 0)))


class TestTileTable:
    def test_insert_then_find_cell(self):
        t = TileTable()
        slot = t.insert((1, 2))
        assert t.find_tile((5, 9)) == slot

    def test_find_in_empty(self):
        assert TileTable().find_tile((3, 3)) is None

    def test_erase_compacts_slots(self):
        t = TileTable()
        for i in range(5):
            t.insert((i, 0))
        t.erase((1, 0))
        assert len(t) == 4
        # dense slots, all remaining tiles findable at consistent slots
        for coords in [(0, 0), (2, 0), (3, 0), (4, 0)]:
            slot = t.find(coords)
            assert slot is not None and t.coords[slot] == coords
        assert sorted(t._index.values()) == [0, 1, 2, 3]

    def test_hash_fuzz_against_linear_scan(self):
        rng = np.random.default_rng(42)
        t = TileTable()
        alive = set()
        n_ops = 1_000_000
        ops = rng.integers(0, 3, size=n_ops)
        xs = rng.integers(-64, 64, size=n_ops)
        ys = rng.integers(-64, 64, size=n_ops)
        scan_every = 4096  # full linear scan of the model at this cadence
        for k, (op, x, y) in enumerate(zip(ops, xs, ys)):
            coords = (int(x), int(y))
            if op == 0:
                if coords not in alive:
                    t.insert(coords)
                    alive.add(coords)
            elif op == 1:
                if coords in alive:
                    t.erase(coords)
                    alive.remove(coords)
            else:
                found = t.find(coords)
                assert (found is not None) == (coords in alive)
                if found is not None:
                    assert t.coords[found] == coords
            if k % scan_every == 0:
                # linear scan: every model entry findable, slots dense
                assert len(t) == len(alive)
                for c in alive:
                    slot = t.find(c)
                    assert slot is not None and t.coords[slot] == c
        assert sorted(t.coords) == sorted(alive)


class TestBufferRoles:
    def test_spec_examples(self):
        assert buffer_roles(0, 0) == (0, 1)   # level 0, bounce 0: read A
        assert buffer_roles(1, 0) == (1, 0)   # level 1, bounce 0: read B
        assert buffer_roles(0, 1) == (1, 0)   # parity swap

    def test_two_bounces_return_home(self):
        for level in range(4):
            assert buffer_roles(level, 0) == buffer_roles(level, 2)


class TestDilate:
    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for periodic in [(True, True), (False, False), (True, False)]:
            mask = rng.random((12, 10)) < 0.15
            for steps in (1, 2):
                got = dilate(mask, steps, periodic)
                expect = np.zeros_like(mask)
                pts = np.argwhere(mask)
                for x, y in pts:
                    for dx in range(-steps, steps + 1):
                        for dy in range(-steps, steps + 1):
                            nx, ny = x + dx, y + dy
                            if periodic[0]:
                                nx %= 12
                            if periodic[1]:
                                ny %= 10
                            if 0 <= nx < 12 and 0 <= ny < 10:
                                expect[nx, ny] = True
                assert np.array_equal(got, expect)


def build_island_topology():
    """16x16 level-0 tiles, L=2: a 4x4-tile fine island with 2-tile pads.

    own_0 = tiles [6,10)^2, storage_0 = [4,12)^2; the coarse level keeps every
    tile (the interior hole erodes to nothing at this island size).
    """
    topo = Topology((64, 64), levels=2, periodic=(True, True))
    leaf0, border0 = [], []
    for x in range(4, 12):
        for y in range(4, 12):
            (leaf0 if 6 <= x < 10 and 6 <= y < 10 else border0).append((x, y))
    for c in leaf0:
        topo.tables[0].insert(c, LEAF)
    for c in border0:
        topo.tables[0].insert(c, BORDER)
    covered1 = {(x, y) for x in range(3, 5) for y in range(3, 5)}
    for x in range(8):
        for y in range(8):
            topo.tables[1].insert((x, y),
                                  BORDER if (x, y) in covered1 else LEAF)
    topo.bump()
    return topo


class TestClassifyInterfaces:
    def test_single_level_empty_sets(self):
        topo = Topology.uniform((32, 32), levels=1)
        sets = classify_interfaces(topo)
        assert not sets.downs and not sets.ups

    def test_island_matches_hand_enumeration(self):
        topo = build_island_topology()
        topo.validate_coverage()
        topo.validate_two_tile_overlap()
        sets = classify_interfaces(topo)
        # brute-force oracle: rim cells of level-0 storage within Chebyshev
        # distance 2 of an unstored level-0 cell
        cmap = topo.cell_map(0)
        occ = cmap >= 0
        expect = set()
        for x in range(64):
            for y in range(64):
                if not occ[x, y]:
                    continue
                near_gap = False
                for dx in range(-2, 3):
                    for dy in range(-2, 3):
                        if not occ[(x + dx) % 64, (y + dy) % 64]:
                            near_gap = True
                if near_gap:
                    expect.add((x, y))
        got_cells = topo.cell_coords(0)[sets.downs[0].targets]
        assert {tuple(c) for c in got_cells} == expect
        # storage是 [16,48)^2 cells: rim band 32^2 - 28^2 cells
        assert len(expect) == 32 * 32 - 28 * 28
        # coarse level fully stored here: no upward set
        assert 1 not in sets.ups

    def test_island_downward_stencils_valid(self):
        topo = build_island_topology()
        sets = classify_interfaces(topo)
        down = sets.downs[0]
        assert np.all(down.src4[down.w4 > 0] >= 0)
        assert np.allclose(down.w4.sum(axis=1), 1.0)

    def test_missing_coarse_source_reported(self):
        topo = build_island_topology()
        # delete a coarse tile that backs part of the fine rim
        topo.tables[1].erase((2, 3))
        topo.bump()
        with pytest.raises(TopologyError):
            classify_interfaces(topo)


class TestFieldStorage:
    def test_pair_is_exactly_two_trees(self):
        for levels in (1, 2, 3, 4):
            cells = 16 * (1 << (levels - 1))
            topo = Topology.uniform((cells, cells), levels=levels)
            pair = PingPongPair(topo)
            assert pair.nbytes() == 2 * FieldTree(topo).nbytes()

    def test_array_lengths_track_tile_count(self):
        topo = build_island_topology()
        tree = FieldTree(topo)
        for level in range(2):
            n = len(topo.tables[level]) * 16
            for arr in tree.levels[level].values():
                assert arr.shape == (n,)


class TestDumpText:
    def test_dump_round_trip(self):
        topo = build_island_topology()
        text = topo.dump_text()
        seen = set()
        for line in text.strip().splitlines():
            level, tx, ty, kind = line.split()
            seen.add((int(level), int(tx), int(ty),
                      LEAF if kind == "leaf" else BORDER))
        assert seen == topo.tile_set()

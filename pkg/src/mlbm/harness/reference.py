"""Reference solvers for equivalence checks.

``uniform_solver`` runs the same kernels on a single-level grid at the finest
resolution (the multi-level consistency oracle).  ``NaiveReference`` advances
a multi-level state with one dedicated (current, next) buffer pair per level,
2L buffers in total, against which the two-tree ping-pong bookkeeping is
compared.
"""
from __future__ import annotations

import numpy as np

from ..solver import BoundarySpec, LevelParams, MultiLevelSolver, SolverParams
from ..sparse_grid import FIELD_NAMES, PingPongPair, Topology


def uniform_solver(cells, tau0, gravity=(0.0, 0.0), boundaries=None,
                   rescale_convention="derived"):
    """Single-level solver over the full finest grid, sharing all kernels."""
    boundaries = boundaries or BoundarySpec()
    topo = Topology.uniform(cells, levels=1,
                            periodic=boundaries.periodic_axes())
    pair = PingPongPair(topo)
    params = SolverParams(levels=1, gravity=gravity,
                          rescale_convention=rescale_convention)
    solver = MultiLevelSolver(topo, pair, params, LevelParams(1, tau0),
                              boundaries)
    return topo, pair, solver


class NaiveReference:
    """Per-level double-buffer advance over a solver's kernels.

    Buffers are indexed by each level's own step parity; initial state lives
    in buffer 0 everywhere.  This is the straightforward 2L-buffer scheme the
    recursive two-tree ping-pong must reproduce.
    """

    def __init__(self, solver: MultiLevelSolver):
        self.solver = solver
        self.topology = solver.topology
        levels = self.topology.levels
        self.buffers = []
        for level in range(levels):
            n = self.topology.cell_count(level)
            pair = []
            for _ in range(2):
                arrays = {name: np.zeros(n) for name in FIELD_NAMES}
                arrays["rho"][:] = 1.0
                arrays["eps"][:] = 1.0
                pair.append(arrays)
            self.buffers.append(pair)
        self.k = [0] * levels

    def load_from(self, tree_arrays_per_level):
        for level, arrays in enumerate(tree_arrays_per_level):
            for name in FIELD_NAMES:
                self.buffers[level][0][name][:] = arrays[name]
                self.buffers[level][1][name][:] = arrays[name]

    def cur(self, level):
        return self.buffers[level][self.k[level] % 2]

    def nxt(self, level):
        return self.buffers[level][1 - self.k[level] % 2]

    def _sc(self, level):
        s = self.solver
        s.stream_kernel(level, self.cur(level), self.nxt(level))
        s.collide_kernel(level, self.cur(level), self.nxt(level))
        s.boundary_kernel(level, self.nxt(level))
        self.k[level] += 1

    def advance_bounce(self):
        s = self.solver
        for cycle in s._schedule:
            for kind, level, sub in cycle["pre"]:
                if kind == "down":
                    self._down(level, sub)
                elif kind == "sc":
                    self._sc(level)
                elif kind == "up":
                    self._up(level)
            s0 = cycle["s0"]
            if self.topology.levels > 1:
                self._down(0, s0)
            self._sc(0)
            if self.topology.levels > 1 and s0 == 2:
                self._up(0)

    def _down(self, level, sub):
        # the coarse level has stepped: its old state is the buffer it read,
        # the new one the buffer it wrote
        coarse = level + 1
        kc = self.k[coarse]
        old = self.buffers[coarse][(kc - 1) % 2]
        new = self.buffers[coarse][kc % 2]
        self.solver.downward_kernel(level, sub, old, new, self.cur(level))

    def _up(self, level):
        coarse = level + 1
        self.solver.upward_kernel(level, self.cur(level),
                                  self.buffers[coarse][self.k[coarse] % 2])

    def current_state(self, level):
        return self.cur(level)

"""Frame outputs: legacy-VTK fields, PPM quicklooks, particle dumps, CSV."""
from __future__ import annotations

import os
import struct

import numpy as np

from ..granular import Particles
from ..sparse_grid import LEAF, Topology

PARTICLE_MAGIC = b"GLBMPART"
PARTICLE_VERSION = 1
# particle record: x, y, vx, vy, m as little-endian float64
_RECORD = struct.Struct("<5d")
_HEADER = struct.Struct("<8sII")


def write_vtk_level(path: str, topology: Topology, arrays: dict, level: int):
    """Legacy ASCII structured-points file for one level of one frame.

    Unstored cells carry zeros; the ``stored`` scalar distinguishes absent
    (0), border (1), and leaf (2) cells.
    """
    nx, ny = topology.cells_dims(level)
    cmap = topology.cell_map(level)
    spacing = float(1 << level)

    def grid_of(name):
        out = np.zeros((nx, ny))
        mask = cmap >= 0
        out[mask] = arrays[name][cmap[mask]]
        return out

    stored = np.zeros((nx, ny))
    table = topology.tables[level]
    for slot, (tx, ty) in enumerate(table.coords):
        val = 2.0 if table.kind[slot] == LEAF else 1.0
        stored[tx * 4:(tx + 1) * 4, ty * 4:(ty + 1) * 4] = val

    rho = grid_of("rho")
    ux = grid_of("ux")
    uy = grid_of("uy")
    eps = grid_of("eps")
    phi = grid_of("phi")

    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write(f"fields level {level}\n")
        fh.write("ASCII\nDATASET STRUCTURED_POINTS\n")
        fh.write(f"DIMENSIONS {nx} {ny} 1\n")
        fh.write("ORIGIN 0 0 0\n")
        fh.write(f"SPACING {spacing} {spacing} 1\n")
        fh.write(f"POINT_DATA {nx * ny}\n")
        for name, grid in (("rho", rho), ("eps", eps), ("phi", phi),
                           ("stored", stored)):
            fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
            # VTK varies x fastest
            for y in range(ny):
                fh.write(" ".join(f"{v:.17g}" for v in grid[:, y]) + "\n")
        fh.write("VECTORS velocity double\n")
        for y in range(ny):
            fh.write(" ".join(f"{ux[x, y]:.17g} {uy[x, y]:.17g} 0.0"
                              for x in range(nx)) + "\n")


def read_vtk_level(path: str):
    """Parse the writer's output back into a dict of (nx, ny) arrays."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    dims = None
    i = 0
    out = {}
    while i < len(lines):
        line = lines[i]
        if line.startswith("DIMENSIONS"):
            _, nx, ny, _ = line.split()
            dims = (int(nx), int(ny))
        elif line.startswith("SCALARS"):
            name = line.split()[1]
            i += 1  # LOOKUP_TABLE
            vals = []
            for y in range(dims[1]):
                i += 1
                vals.append([float(v) for v in lines[i].split()])
            out[name] = np.array(vals).T
        elif line.startswith("VECTORS"):
            ux = np.zeros(dims)
            uy = np.zeros(dims)
            for y in range(dims[1]):
                i += 1
                flat = [float(v) for v in lines[i].split()]
                ux[:, y] = flat[0::3]
                uy[:, y] = flat[1::3]
            out["ux"] = ux
            out["uy"] = uy
        i += 1
    return out


def write_particles(path: str, particles: Particles):
    """Binary dump: 16-byte header (magic, version, count) + records."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(PARTICLE_MAGIC, PARTICLE_VERSION, len(particles)))
        for i in range(len(particles)):
            fh.write(_RECORD.pack(particles.x[i, 0], particles.x[i, 1],
                                  particles.v[i, 0], particles.v[i, 1],
                                  particles.m[i]))


def read_particles(path: str):
    """Read a particle dump; returns (x, v, m) arrays."""
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, version, count = _HEADER.unpack_from(raw, 0)
    if magic != PARTICLE_MAGIC:
        raise ValueError(f"not a particle dump: bad magic {magic!r}")
    if version != PARTICLE_VERSION:
        raise ValueError(f"unsupported particle dump version {version}")
    x = np.empty((count, 2))
    v = np.empty((count, 2))
    m = np.empty(count)
    off = _HEADER.size
    for i in range(count):
        px, py, vx, vy, mi = _RECORD.unpack_from(raw, off)
        x[i] = (px, py)
        v[i] = (vx, vy)
        m[i] = mi
        off += _RECORD.size
    return x, v, m


def particle_summary_csv(path: str, rows):
    """CSV summary per frame: count, kinetic energy, max speed."""
    with open(path, "w") as fh:
        fh.write("frame,count,kinetic_energy,max_speed\n")
        for frame, count, ke, vmax in rows:
            fh.write(f"{frame},{count},{ke!r},{vmax!r}\n")


_RAMP = None


def _color_ramp():
    """Fixed 256-entry blue -> white -> red ramp."""
    global _RAMP
    if _RAMP is None:
        t = np.linspace(0.0, 1.0, 256)
        r = np.clip(2.0 * t, 0, 1)
        b = np.clip(2.0 * (1.0 - t), 0, 1)
        g = np.clip(1.0 - 2.0 * np.abs(t - 0.5), 0, 1)
        _RAMP = (np.stack([r, g, b], axis=1) * 255).astype(np.uint8)
    return _RAMP


def write_ppm(path: str, values: np.ndarray, vmax: float):
    """8-bit binary PPM of a (nx, ny) field with the fixed ramp."""
    ramp = _color_ramp()
    idx = np.clip(values / max(vmax, 1e-300) * 255.0, 0, 255).astype(np.uint8)
    img = ramp[idx]                     # (nx, ny, 3)
    nx, ny = values.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{nx} {ny}\n255\n".encode())
        # rows top to bottom = descending y
        fh.write(img.transpose(1, 0, 2)[::-1].tobytes())


def quicklook_speed(path: str, topology: Topology, arrays: dict,
                    vmax: float = 0.1):
    nx, ny = topology.cells_dims(0)
    cmap = topology.cell_map(0)
    speed = np.zeros((nx, ny))
    mask = cmap >= 0
    speed[mask] = np.hypot(arrays["ux"][cmap[mask]], arrays["uy"][cmap[mask]])
    write_ppm(path, speed, vmax)


def quicklook_particles(path: str, topology: Topology, particles: Particles,
                        vmax: float = 8.0):
    nx, ny = topology.cells_dims(0)
    dens = np.zeros((nx, ny))
    if len(particles):
        cells = np.floor(particles.x).astype(np.int64)
        np.add.at(dens, (cells[:, 0].clip(0, nx - 1),
                         cells[:, 1].clip(0, ny - 1)), 1.0)
    write_ppm(path, dens, vmax)


class DiagnosticsWriter:
    """Streams coupled-step diagnostic rows to CSV."""

    def __init__(self, path: str, levels: int):
        self.path = path
        self.levels = levels
        tiles = ",".join(f"tiles_l{i}" for i in range(levels))
        self._fh = open(path, "w")
        self._fh.write(
            "step,t_phys,fluid_mom_x,fluid_mom_y,sed_mom_x,sed_mom_y,"
            f"drag_imp_x,drag_imp_y,sum_phi,{tiles},eps_min\n")

    def write(self, row):
        tiles = ",".join(str(t) for t in row.tiles)
        self._fh.write(
            f"{row.step},{row.t_phys!r},{row.fluid_mom[0]!r},"
            f"{row.fluid_mom[1]!r},{row.sediment_mom[0]!r},"
            f"{row.sediment_mom[1]!r},{row.drag_impulse[0]!r},"
            f"{row.drag_impulse[1]!r},{row.sum_phi!r},{tiles},"
            f"{row.eps_min!r}\n")

    def close(self):
        self._fh.close()


def write_frame(directory: str, frame: int, sim, cfg):
    """All configured outputs for one frame."""
    os.makedirs(directory, exist_ok=True)
    out = cfg.raw["outputs"]
    solver = sim.solver
    topo = sim.topology
    if out["fields"]:
        for level in range(topo.levels):
            if not len(topo.tables[level]):
                continue
            w = solver.last_roles(level)[1] if solver.k[level] else 0
            arrays = solver.arrays(w, level)
            write_vtk_level(
                os.path.join(directory, f"frame_{frame:05d}_l{level}.vtk"),
                topo, arrays, level)
    if out["particles"] and len(sim.particles):
        write_particles(
            os.path.join(directory, f"frame_{frame:05d}_particles.bin"),
            sim.particles)
    if out["quicklook"]:
        w = solver.last_roles(0)[1] if solver.k[0] else 0
        quicklook_speed(
            os.path.join(directory, f"frame_{frame:05d}_speed.ppm"),
            topo, solver.arrays(w, 0))
        quicklook_particles(
            os.path.join(directory, f"frame_{frame:05d}_parts.ppm"),
            topo, sim.particles)

"""Scene configuration: TOML schema, validation, and scene assembly."""
from __future__ import annotations

import difflib
import os
import sys
from dataclasses import dataclass, field

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib as toml_reader
else:
    import tomli as toml_reader

from ..adapt import GridAdaptor, RefineDriver
from ..coupling import CoupledSim, DragParams, PowderParams, UnitScale
from ..granular import SandMaterial, sample_blocks
from ..solver import (
    BoundarySpec,
    LevelParams,
    LogInlet,
    MultiLevelSolver,
    SolverParams,
)
from ..sparse_grid import TILE, PingPongPair, Topology


class SceneParseError(RuntimeError):
    """The file is not readable TOML."""


class SceneValidationError(RuntimeError):
    """The parsed scene violates the schema or an invariant."""


def _err(path, reason):
    raise SceneValidationError(f"{path}: {reason}")


# schema: table -> key -> (type check, default); None default means required
_FACE_KINDS = ("periodic", "wall", "outlet")

SCHEMA = {
    "domain": {
        "cells": (list, None),
        "levels": (int, 1),
    },
    "units": {
        "dx": (float, 1.0),
        "dt": (float, 1.0),
        "rho": (float, 1.0),
    },
    "fluid": {
        "tau0": (float, 0.8),
        "gravity": (list, [0.0, 0.0]),
        "rho0": (float, 1.0),
        "eps_min": (float, 0.3),
        "rescale_convention": (str, "derived"),
        "upward_mode": (str, "coincident"),
        "init": (str, "quiescent"),
        "init_u0": (float, 0.05),
    },
    "boundaries": {
        "x_min": (object, "periodic"),
        "x_max": (object, "periodic"),
        "y_min": (object, "periodic"),
        "y_max": (object, "periodic"),
        "solid_boxes": (list, []),
        "heightfield": (str, ""),
    },
    "materials": {
        "density_ratio": (float, 2.0),
        "E": (float, 3.5e5),
        "nu": (float, 0.3),
        "friction_angle_deg": (float, 30.0),
        "floor_friction": (float, 0.5),
    },
    "particles": {
        "blocks": (list, []),
        "per_cell": (int, 4),
    },
    "powder": {
        "enabled": (bool, False),
        "entrain": (float, 0.0),
        "diffusion": (float, 0.05),
        "sign": (str, "stable"),
    },
    "adapt": {
        "static_boxes": (list, []),
    },
    "outputs": {
        "directory": (str, "out"),
        "cadence": (int, 100),
        "fields": (bool, True),
        "particles": (bool, True),
        "quicklook": (bool, False),
        "diagnostics": (bool, True),
    },
    "runtime": {
        "steps": (int, 100),
        "threads": (int, 1),
        "seed": (int, 1234),
        "mpm_cadence": (int, 1),
    },
}


@dataclass
class SceneConfig:
    """Resolved scene: raw values plus derived lattice quantities."""

    raw: dict
    path: str = "<inline>"

    def __getitem__(self, key):
        return self.raw[key]

    @property
    def cells(self):
        return tuple(int(v) for v in self.raw["domain"]["cells"])

    @property
    def levels(self):
        return int(self.raw["domain"]["levels"])

    @property
    def unit_scale(self) -> UnitScale:
        u = self.raw["units"]
        return UnitScale(dx=u["dx"], dt=u["dt"], rho=u["rho"])

    @property
    def gravity_lattice(self):
        s = self.unit_scale
        g = self.raw["fluid"]["gravity"]
        return (s.accel_to_lattice(g[0]), s.accel_to_lattice(g[1]))

    @property
    def material(self) -> SandMaterial:
        m = self.raw["materials"]
        s = self.unit_scale
        return SandMaterial(E=s.stress_to_lattice(m["E"]), nu=m["nu"],
                            friction_deg=m["friction_angle_deg"],
                            floor_friction=m["floor_friction"])

    @property
    def sediment_density_lattice(self) -> float:
        return self.raw["materials"]["density_ratio"] * self.raw["fluid"]["rho0"]

    def boundary_spec(self) -> BoundarySpec:
        b = self.raw["boundaries"]
        faces = {}
        for face in ("x_min", "x_max", "y_min", "y_max"):
            v = b[face]
            if isinstance(v, dict):
                faces[face] = LogInlet(u0=float(v["u0"]), beta=float(v["beta"]),
                                       y0=float(v["y0"]))
            else:
                faces[face] = v
        boxes = [tuple(float(c) for c in box) for box in b["solid_boxes"]]
        if b["heightfield"]:
            heights = _load_heightfield(b["heightfield"], self.path)
            for x, h in enumerate(heights[: self.cells[0]]):
                if h > 0:
                    boxes.append((float(x), 0.0, float(x + 1), float(h)))
        return BoundarySpec(faces=faces, solid_boxes=boxes)


def _load_heightfield(name, scene_path):
    path = name if os.path.isabs(name) else \
        os.path.join(os.path.dirname(os.path.abspath(scene_path)), name)
    if not os.path.exists(path):
        _err("boundaries.heightfield", f"referenced file {path!r} does not exist")
    with open(path) as fh:
        return [float(line.strip()) for line in fh if line.strip()]


def _check_unknown_keys(user, schema, path=""):
    for key in user:
        if key not in schema:
            hint = difflib.get_close_matches(key, schema.keys(), n=1)
            extra = f"; did you mean {hint[0]!r}?" if hint else ""
            _err(f"{path}{key}", f"unknown key{extra}")


def _coerce(value, typ, path):
    if typ is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if typ is object:
        return value
    if not isinstance(value, typ) or (typ is int and isinstance(value, bool)):
        _err(path, f"expected {typ.__name__}, got {type(value).__name__}")
    return value


def validate_scene(data: dict, path: str = "<inline>") -> SceneConfig:
    """Apply defaults, reject unknown keys, and check every invariant."""
    if not isinstance(data, dict):
        raise SceneValidationError("scene root must be a table")
    _check_unknown_keys(data, SCHEMA)
    resolved = {}
    for table, keys in SCHEMA.items():
        user = data.get(table, {})
        if not isinstance(user, dict):
            _err(table, "expected a table")
        _check_unknown_keys(user, keys, path=f"{table}.")
        resolved[table] = {}
        for key, (typ, default) in keys.items():
            if key in user:
                resolved[table][key] = _coerce(user[key], typ, f"{table}.{key}")
            elif default is None:
                _err(f"{table}.{key}", "required key missing")
            else:
                resolved[table][key] = default

    cfg = SceneConfig(raw=resolved, path=path)
    d = resolved["domain"]
    if len(d["cells"]) != 2 or any(int(c) <= 0 for c in d["cells"]):
        _err("domain.cells", "expected two positive extents")
    if d["levels"] < 1:
        _err("domain.levels", "must be >= 1")
    step = TILE * (1 << (d["levels"] - 1))
    for c in d["cells"]:
        if int(c) % step:
            _err("domain.cells",
                 f"extent {c} not divisible by {step} (tile x 2^(levels-1))")
    f = resolved["fluid"]
    if f["tau0"] <= 0.5:
        _err("fluid.tau0", f"must exceed 0.5, got {f['tau0']}")
    if not 0.0 < f["eps_min"] < 1.0:
        _err("fluid.eps_min", "must lie in (0, 1)")
    if f["rescale_convention"] not in ("derived", "paper_literal"):
        _err("fluid.rescale_convention", "must be 'derived' or 'paper_literal'")
    if f["upward_mode"] not in ("coincident", "average"):
        _err("fluid.upward_mode", "must be 'coincident' or 'average'")
    if f["init"] not in ("quiescent", "taylor_green"):
        _err("fluid.init", "must be 'quiescent' or 'taylor_green'")
    if f["init"] == "taylor_green" and cfg.cells[0] != cfg.cells[1]:
        _err("fluid.init", "taylor_green initialization needs a square domain")
    for key in ("dx", "dt", "rho"):
        if resolved["units"][key] <= 0:
            _err(f"units.{key}", "must be positive")
    try:
        spec = cfg.boundary_spec()
        spec.validate(cfg.cells)
    except (ValueError, SceneValidationError) as exc:
        if isinstance(exc, SceneValidationError):
            raise
        _err("boundaries", str(exc))
    p = resolved["powder"]
    if p["enabled"]:
        if p["sign"] not in ("stable", "paper_literal"):
            _err("powder.sign", "must be 'stable' or 'paper_literal'")
        if p["sign"] == "stable" and p["diffusion"] > 0.25:
            _err("powder.diffusion",
                 f"diffusion number {p['diffusion']} exceeds the 0.25 "
                 f"forward-Euler stability bound")
    r = resolved["runtime"]
    if r["steps"] < 0:
        _err("runtime.steps", "must be >= 0")
    if r["threads"] < 1:
        _err("runtime.threads", "must be >= 1")
    if r["mpm_cadence"] < 1:
        _err("runtime.mpm_cadence", "must be >= 1")
    if resolved["particles"]["blocks"]:
        if resolved["particles"]["per_cell"] < 1:
            _err("particles.per_cell", "must be >= 1")
        mat = cfg.material
        rho_s = cfg.sediment_density_lattice
        dt_mpm = float(r["mpm_cadence"])
        if mat.wave_speed(rho_s) * dt_mpm >= 0.5:
            _err("materials.E",
                 f"elastic wave speed {mat.wave_speed(rho_s):.3g} cells/step "
                 f"violates the MPM CFL bound 0.5/dt at cadence {dt_mpm:g}")
        for box in resolved["particles"]["blocks"]:
            if len(box) != 4 or box[0] >= box[2] or box[1] >= box[3]:
                _err("particles.blocks", f"malformed block {box}")
    return cfg


def load_scene(path: str) -> SceneConfig:
    """Parse and validate a scene file; unknown keys are errors."""
    try:
        with open(path, "rb") as fh:
            data = toml_reader.load(fh)
    except OSError as exc:
        raise SceneParseError(f"cannot read {path}: {exc}") from exc
    except toml_reader.TOMLDecodeError as exc:
        raise SceneParseError(f"{path}: {exc}") from exc
    return validate_scene(data, path=path)


def build_scene(cfg: SceneConfig):
    """Assemble topology, solver, particles, and the coupled simulation."""
    boundaries = cfg.boundary_spec()
    periodic = boundaries.periodic_axes()
    topo = Topology.uniform(cfg.cells, levels=cfg.levels, periodic=periodic)
    pair = PingPongPair(topo)

    rng = np.random.default_rng(np.random.Philox(cfg.raw["runtime"]["seed"]))
    parts = None
    if cfg.raw["particles"]["blocks"]:
        parts = sample_blocks(
            [tuple(float(v) for v in b) for b in cfg.raw["particles"]["blocks"]],
            cfg.raw["particles"]["per_cell"],
            cfg.sediment_density_lattice, rng)

    static_tiles = None
    if cfg.raw["adapt"]["static_boxes"]:
        tx, ty = topo.tiles_dims(0)
        static_tiles = np.zeros((tx, ty), dtype=bool)
        for (x0, y0, x1, y1) in cfg.raw["adapt"]["static_boxes"]:
            static_tiles[int(x0) // TILE: (int(x1) + TILE - 1) // TILE,
                         int(y0) // TILE: (int(y1) + TILE - 1) // TILE] = True

    params = SolverParams(
        levels=cfg.levels,
        rho0=cfg.raw["fluid"]["rho0"],
        gravity=cfg.gravity_lattice,
        eps_min=cfg.raw["fluid"]["eps_min"],
        mpm_cadence=cfg.raw["runtime"]["mpm_cadence"],
        rescale_convention=cfg.raw["fluid"]["rescale_convention"],
        upward_mode=cfg.raw["fluid"]["upward_mode"])
    level_params = LevelParams(cfg.levels, cfg.raw["fluid"]["tau0"])

    adaptor = None
    if cfg.levels > 1:
        adaptor = GridAdaptor(topo, level_params,
                              params.rescale_convention)
        driver = RefineDriver(
            positions=parts.x if parts is not None else np.zeros((0, 2)),
            static_tiles=static_tiles, levels=cfg.levels)
        adaptor.update(driver, pair)

    solver = MultiLevelSolver(topo, pair, params, level_params, boundaries)

    powder = None
    p = cfg.raw["powder"]
    if p["enabled"]:
        powder = PowderParams(entrain=p["entrain"], diffusion=p["diffusion"],
                              sign=1.0 if p["sign"] == "stable" else -1.0)

    sim = CoupledSim(solver, parts, cfg.material,
                     sediment_gravity=np.asarray(cfg.gravity_lattice),
                     drag=DragParams(), powder=powder, adaptor=adaptor,
                     static_tiles=static_tiles, unit_scale=cfg.unit_scale)

    if cfg.raw["fluid"]["init"] == "taylor_green":
        from .cases import set_fields, taylor_green_fields
        fn, _ = taylor_green_fields(cfg.raw["fluid"]["init_u0"], cfg.cells[0],
                                    level_params.nu(0), level_params.taus)
        set_fields(topo, pair, lambda px, py, l: fn(px, py, l))
    return sim

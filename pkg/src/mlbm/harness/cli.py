"""Command-line interface: run scenes, validate cases, inspect configs.

Exit codes: 0 ok, 2 config error, 3 solver divergence, 4 I/O failure.
``SIM_THREADS`` is the fallback for ``--threads``.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

import numpy as np

from ..lattice import DivergenceError
from .cases import CASES
from .config import SceneParseError, SceneValidationError, build_scene, load_scene
from .outputs import DiagnosticsWriter, particle_summary_csv, write_frame

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3
EXIT_IO = 4


def run_scene(cfg, steps=None, out_dir=None, threads=None):
    """Execute a validated scene; returns (exit_code, sim)."""
    runtime = cfg.raw["runtime"]
    steps = runtime["steps"] if steps is None else steps
    out_dir = cfg.raw["outputs"]["directory"] if out_dir is None else out_dir
    threads = _resolve_threads(threads if threads is not None
                               else runtime["threads"])
    sim = build_scene(cfg)
    sim.threads = threads

    cadence = cfg.raw["outputs"]["cadence"]
    diag = None
    particle_rows = []

    def note_particles(frame):
        if len(sim.particles):
            particle_rows.append((frame, len(sim.particles),
                                  sim.particles.kinetic_energy(),
                                  float(np.abs(sim.particles.v).max())))

    try:
        os.makedirs(out_dir, exist_ok=True)
        if cfg.raw["outputs"]["diagnostics"]:
            diag = DiagnosticsWriter(os.path.join(out_dir, "diagnostics.csv"),
                                     cfg.levels)
        frame = 0
        write_frame(out_dir, frame, sim, cfg)
        note_particles(frame)
        for step in range(steps):
            sim.step()
            if diag is not None:
                diag.write(sim.diagnostics[-1])
            if (step + 1) % cadence == 0:
                frame += 1
                write_frame(out_dir, frame, sim, cfg)
                note_particles(frame)
        if steps % cadence != 0 and steps > 0:
            write_frame(out_dir, frame + 1, sim, cfg)
            note_particles(frame + 1)
        if particle_rows:
            particle_summary_csv(os.path.join(out_dir, "particles.csv"),
                                 particle_rows)
    except DivergenceError as exc:
        sys.stderr.write(f"divergence: {exc} (level={exc.level}, "
                         f"cells={exc.cells})\n")
        try:
            write_frame(out_dir, 99999, sim, cfg)  # diagnostic snapshot
        except OSError:
            pass
        return EXIT_DIVERGENCE, sim
    except OSError as exc:
        sys.stderr.write(f"i/o failure: {exc}\n")
        return EXIT_IO, sim
    finally:
        if diag is not None:
            diag.close()
    return EXIT_OK, sim


def _resolve_threads(value):
    if value is None:
        value = os.environ.get("SIM_THREADS", "1")
    try:
        threads = int(value)
    except (TypeError, ValueError):
        raise SceneValidationError(f"threads must be an integer, got {value!r}")
    if threads < 1:
        raise SceneValidationError("threads must be >= 1")
    return threads


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="sim",
        description="adaptive multi-level LBM with MPM sand coupling")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a scene file")
    p_run.add_argument("scene")
    p_run.add_argument("--steps", type=int, default=None)
    p_run.add_argument("--out", default=None)
    p_run.add_argument("--threads", type=int, default=None)

    p_val = sub.add_parser("validate", help="run a validation case")
    p_val.add_argument("case", choices=sorted(CASES.keys()))
    p_val.add_argument("--res", type=int, default=None)
    p_val.add_argument("--tau", type=float, default=None)
    p_val.add_argument("--u0", type=float, default=None)
    p_val.add_argument("--walks", type=int, default=None)
    p_val.add_argument("--updates", type=int, default=None)
    p_val.add_argument("--particles", type=int, default=None)

    p_info = sub.add_parser("info", help="print the resolved configuration")
    p_info.add_argument("scene")

    args = parser.parse_args(argv)

    if args.command == "run":
        try:
            cfg = load_scene(args.scene)
        except SceneParseError as exc:
            sys.stderr.write(f"parse error: {exc}\n")
            return EXIT_CONFIG
        except SceneValidationError as exc:
            sys.stderr.write(f"validation error: {exc}\n")
            return EXIT_CONFIG
        code, _ = run_scene(cfg, steps=args.steps, out_dir=args.out,
                            threads=args.threads)
        return code

    if args.command == "validate":
        kwargs = {}
        if args.case == "taylor-green":
            if args.res is not None:
                kwargs["res"] = args.res
            if args.tau is not None:
                kwargs["tau"] = args.tau
            if args.u0 is not None:
                kwargs["u0"] = args.u0
        elif args.case == "poiseuille" and args.res is not None:
            kwargs["width"] = args.res
        elif args.case == "adapt-fuzz":
            if args.walks is not None:
                kwargs["walks"] = args.walks
            if args.updates is not None:
                kwargs["steps"] = args.updates
        elif args.case == "sand-collapse" and args.particles is not None:
            kwargs["n_target"] = args.particles
        report = CASES[args.case](**kwargs)
        print(report.line())
        return EXIT_OK if report.passed else 1

    if args.command == "info":
        try:
            cfg = load_scene(args.scene)
        except SceneParseError as exc:
            sys.stderr.write(f"parse error: {exc}\n")
            return EXIT_CONFIG
        except SceneValidationError as exc:
            sys.stderr.write(f"validation error: {exc}\n")
            return EXIT_CONFIG
        print(json.dumps(cfg.raw, indent=2, default=str))
        return EXIT_OK

    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

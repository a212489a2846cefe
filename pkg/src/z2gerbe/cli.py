"""Command-line front end: validation, invariants, WZ and CS runs, sweeps, reports.

Reports are JSON with sorted keys.  Timings are left out unless ``--timing``
is given, so identical configs and seeds give byte-identical reports.

Config schema (JSON object, every key optional except ``model``)::

    model    built-in name ("kane_mele", "layered_bhz", ...) or path to a model JSON file
    params   keyword parameters of the built-in model
    grid     points per axis (even), default 24
    levels   Fourier-refinement levels for WZ amplitudes, default 2
    tol      amplitude tolerance of the gates, default 1e-2
    seed     seed for frame construction and random index choices, default 0
    tasks    list out of validate, invariant, wz, cs, theorem, prop2, sweep
    sweep    {"param": name, "start": x0, "stop": x1, "steps": m}
    out      directory for report.json and CSV/plot files
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
import warnings
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from . import __version__
from .bundle import (BZGrid, BundleError, GapClosingError, berry_connection, chern_number,
                     slice_2d, smooth_frame, valence_projectors, wilson_loop_z2)
from .gerbe import GerbeError, wz_amplitude
from .models import ModelError, build, check_trs, load_model
from .sewing import (SewingError, det_branch, fkm_2d, fkm_3d_strong, fkm_3d_weak,
                     pf_tilde_product, reduce_su, sewing_matrix)
from .wzcs import cs_action, phase_distance, prop2_check

TASKS = ("validate", "invariant", "wz", "cs", "theorem", "prop2", "sweep")
NEEDS_2D = {"wz", "theorem", "sweep"}
NEEDS_3D = {"cs", "prop2"}
TRS_GATE = 1e-12
CS_PHASE_GATE = 0.05 * np.pi
FACTOR_TWO_GATE = 1e-3


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    model: str
    params: dict = field(default_factory=dict)
    grid: int = 24
    levels: int = 2
    tol: float = 1e-2
    seed: int = 0
    tasks: list = field(default_factory=lambda: ["invariant"])
    sweep: dict | None = None
    out: str | None = None

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        unknown = set(data) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        if "model" not in data:
            raise ConfigError("config needs a model")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


def _load(cfg: RunConfig):
    path = Path(cfg.model)
    if path.suffix == ".json" and path.exists():
        if cfg.params:
            raise ConfigError("params apply to built-in models only")
        return load_model(path)
    return build(cfg.model, **dict(cfg.params))


def validate_config(cfg: RunConfig, model) -> None:
    if cfg.grid < 4 or cfg.grid % 2:
        raise ConfigError(f"grid must be even and at least 4, got {cfg.grid}")
    if cfg.levels < 1:
        raise ConfigError("levels must be at least 1")
    bad = [t for t in cfg.tasks if t not in TASKS]
    if bad:
        raise ConfigError(f"unknown tasks {bad}; choose from {list(TASKS)}")
    for t in cfg.tasks:
        if t in NEEDS_2D and model.d != 2:
            raise ConfigError(f"task {t!r} needs a 2d model, {model.name} is {model.d}d")
        if t in NEEDS_3D and model.d != 3:
            raise ConfigError(f"task {t!r} needs a 3d model, {model.name} is {model.d}d")
    if "sweep" in cfg.tasks:
        sw = cfg.sweep or {}
        if not {"param", "start", "stop", "steps"} <= set(sw):
            raise ConfigError("sweep needs param, start, stop and steps")
        if int(sw["steps"]) < 2:
            raise ConfigError("sweep needs at least 2 steps")


class Pipeline:
    """Intermediates of one model on one grid, each built at most once."""

    def __init__(self, model, grid: int, seed: int):
        self.model = model
        self.grid = BZGrid.square(model.d, grid)
        self.seed = seed

    @cached_property
    def projectors(self):
        return valence_projectors(self.model, self.grid)

    @cached_property
    def frame(self):
        return smooth_frame(self.projectors, seed=self.seed)

    @cached_property
    def sewing(self):
        return sewing_matrix(self.frame, self.model.theta)

    @cached_property
    def branch(self):
        return det_branch(self.sewing)

    @cached_property
    def reduced(self):
        return reduce_su(self.sewing, self.branch)

    @cached_property
    def certificate(self):
        fkm = fkm_2d if self.model.d == 2 else fkm_3d_strong
        return fkm(self.sewing, self.branch)

    @cached_property
    def wilson(self) -> int:
        pf = self.projectors
        if self.model.d == 2:
            return wilson_loop_z2(pf)
        half = self.grid.sizes[2] // 2
        return (wilson_loop_z2(slice_2d(pf, 2, 0)) + wilson_loop_z2(slice_2d(pf, 2, half))) % 2


def _gate(name: str, value: float, limit: float) -> dict:
    return {"name": name, "value": float(value), "limit": float(limit),
            "passed": bool(value <= limit)}


def _amp(z: complex) -> list[float]:
    return [float(np.real(z)), float(np.imag(z))]


def _trim_rows(cert) -> list[dict]:
    return [{"k": [float(x) for x in k], "pf": _amp(p), "sqrt_det": _amp(s), "factor": int(f)}
            for k, p, s, f in zip(cert.trims, cert.pfaffians, cert.sqrt_dets, cert.factors)]


def task_validate(p: Pipeline, cfg: RunConfig) -> tuple[dict, list]:
    trs = check_trs(p.model, p.grid.points)
    pf = p.projectors
    gap = pf.energies[..., pf.rank] - pf.energies[..., pf.rank - 1]
    res = {"trs_violation": trs["max_violation"], "projector_trs_residual": pf.trs_residual,
           "gap": pf.gap, "rank": pf.rank, "fermi": float(pf.fermi),
           "frame_smoothness": p.frame.smoothness, "seam_mismatch": p.frame.seam_mismatch}
    if p.model.d == 2:
        res["gap_map"] = np.round(gap, 12).tolist()
    gates = [_gate("trs_violation", trs["max_violation"], TRS_GATE),
             _gate("negative_gap", -pf.gap, 0.0)]
    return res, gates


def task_invariant(p: Pipeline, cfg: RunConfig) -> tuple[dict, list]:
    cert = p.certificate
    res = {"fkm": cert.invariant, "wilson": p.wilson, "factor_residual": cert.factor_residual,
           "trim_table": _trim_rows(cert)}
    if p.model.d == 2:
        c, resid = chern_number(p.projectors)
        res.update(chern=c, chern_residual=resid)
    else:
        res["weak"] = list(fkm_3d_weak(p.sewing, p.branch))
    return res, [_gate("fkm_vs_wilson_mismatch", abs(cert.invariant - p.wilson), 0)]


def _wz(p: Pipeline, cfg: RunConfig) -> dict:
    r = wz_amplitude(p.reduced, levels=cfg.levels, seed=cfg.seed)
    return {"amplitude": _amp(r.amplitude), "phase": r.phase, "error": r.error,
            "min_margin": r.min_margin,
            "trace": [{"grid": list(s), "amplitude": _amp(a)} for s, a in r.trace],
            "_z": r.amplitude}


def task_wz(p: Pipeline, cfg: RunConfig) -> tuple[dict, list]:
    res = _wz(p, cfg)
    res.pop("_z")
    return res, [_gate("wz_error", res["error"], cfg.tol)]


def task_theorem(p: Pipeline, cfg: RunConfig) -> tuple[dict, list]:
    """WZ amplitude of the sewing field against the Z2 sign and the Pfaffian product.

    The determinant phase of ``w`` drops out of ``w*H``, so the WZ action of
    ``w`` is evaluated on its special-unitary reduction.
    """
    wz = _wz(p, cfg)
    z = wz.pop("_z")
    cert = p.certificate
    pft = pf_tilde_product(p.sewing, p.branch)
    res = {"fkm": cert.invariant, "wilson": p.wilson, "sign": cert.sign, "wz": wz,
           "pf_tilde_product": _amp(pft), "trim_table": _trim_rows(cert),
           "distance_to_sign": float(abs(z - cert.sign)),
           "distance_to_pf_product": float(abs(z - pft))}
    gates = [_gate("fkm_vs_wilson_mismatch", abs(cert.invariant - p.wilson), 0),
             _gate("wz_vs_sign", res["distance_to_sign"], cfg.tol),
             _gate("wz_vs_pf_product", res["distance_to_pf_product"], cfg.tol)]
    return res, gates


def task_cs(p: Pipeline, cfg: RunConfig) -> tuple[dict, list]:
    r = cs_action(berry_connection(p.frame))
    cert = p.certificate
    res = {"value": r.value, "error": r.error, "amplitude": _amp(r.amplitude),
           "strong": cert.invariant, "phase_distance": phase_distance(r.amplitude, cert.sign)}
    return res, [_gate("cs_vs_strong_sign", res["phase_distance"], CS_PHASE_GATE)]


def task_prop2(p: Pipeline, cfg: RunConfig) -> tuple[dict, list]:
    r = prop2_check(p.model, n=cfg.grid, seed=cfg.seed)
    res = {"strong": r.strong_index, "slice_oracle": r.slice_index,
           "cs": {"value": r.cs.value, "error": r.cs.error},
           "half_torus": {"value": r.half_torus.value,
                          "factor_two_residual": r.half_torus.factor_two_residual},
           "phase_distance_cs": r.phase_distance_cs,
           "phase_distance_half": r.phase_distance_half,
           "cs_half_discrepancy": r.cs_half_discrepancy,
           "extras": {k: float(v) for k, v in sorted(r.extras.items())}}
    gates = [_gate("strong_vs_slice_mismatch", abs(r.strong_index - r.slice_index), 0),
             _gate("cs_vs_strong_sign", r.phase_distance_cs, CS_PHASE_GATE),
             _gate("half_torus_vs_strong_sign", r.phase_distance_half, CS_PHASE_GATE),
             _gate("cs_vs_half_torus", r.cs_half_discrepancy, cfg.tol),
             _gate("factor_two_residual", r.half_torus.factor_two_residual, FACTOR_TWO_GATE)]
    return res, gates


def task_sweep(p: Pipeline | None, cfg: RunConfig) -> tuple[dict, list]:
    """KM index, Wilson index and WZ phase along one model parameter.

    Points where the gap closes on the grid are recorded as metallic and
    excluded from the gates; any other failure fails the sweep.
    """
    sw = cfg.sweep
    values = np.linspace(float(sw["start"]), float(sw["stop"]), int(sw["steps"]))
    rows, failures, worst = [], 0, 0.0
    for x in values:
        row = {"param": float(x)}
        try:
            q = Pipeline(build(cfg.model, **{**cfg.params, sw["param"]: float(x)}),
                         cfg.grid, cfg.seed)
            z = _wz(q, cfg)["_z"]
            km = q.certificate.invariant
            row.update(KM=km, wilson=q.wilson, wz_phase=float(np.angle(z)),
                       residual=float(abs(z - q.certificate.sign)))
            worst = max(worst, row["residual"])
            failures += int(km != q.wilson)
        except BundleError as exc:
            row.update(KM=None, wilson=None, wz_phase=None, residual=None, note=str(exc))
            failures += not isinstance(exc, GapClosingError)
        except (SewingError, GerbeError) as exc:
            row.update(KM=None, wilson=None, wz_phase=None, residual=None, note=str(exc))
            failures += 1
        rows.append(row)
    ok = [r for r in rows if r["KM"] is not None]
    transitions = [[a["param"], b["param"]] for a, b in zip(ok, ok[1:]) if a["KM"] != b["KM"]]
    res = {"param": sw["param"], "rows": rows, "transitions": transitions}
    return res, [_gate("sweep_failures", failures, 0), _gate("sweep_max_residual", worst, cfg.tol)]


TASK_FUNCS = {"validate": task_validate, "invariant": task_invariant, "wz": task_wz,
              "cs": task_cs, "theorem": task_theorem, "prop2": task_prop2, "sweep": task_sweep}


def run(cfg: RunConfig, timing: bool = False) -> dict:
    """Execute the configured tasks in order; module errors are reported per task."""
    model = _load(cfg)
    validate_config(cfg, model)
    pipe = Pipeline(model, cfg.grid, cfg.seed)
    report = {"config": cfg.to_dict(), "model": {"name": model.name, "d": model.d,
                                                 "size": model.size},
              "versions": {"z2gerbe": __version__, "numpy": np.__version__},
              "tasks": {}, "gates": []}
    for name in cfg.tasks:
        start = time.perf_counter()
        try:
            res, gates = TASK_FUNCS[name](pipe, cfg)
        except (BundleError, SewingError, GerbeError, ModelError) as exc:
            res, gates = {"error": f"{type(exc).__name__}: {exc}"}, [_gate(f"{name}_error", 1, 0)]
        if timing:
            res["seconds"] = round(time.perf_counter() - start, 3)
        report["tasks"][name] = res
        report["gates"] += [dict(g, task=name) for g in gates]
    report["passed"] = all(g["passed"] for g in report["gates"])
    return report


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if np.isfinite(x) else None
    return obj


def dumps(report: dict) -> str:
    return json.dumps(_clean(report), sort_keys=True, indent=2) + "\n"


GNUPLOT_SWEEP = """set datafile separator ','
set key autotitle columnhead
set xlabel '{param}'
set ylabel 'KM / WZ phase (units of pi)'
set terminal pngcairo size 900,500
set output 'sweep.png'
plot 'sweep.csv' using 1:2 with steps title 'KM', \\
     '' using 1:($3/pi) with linespoints title 'wz phase / pi'
"""

GNUPLOT_GAP = """set datafile separator ','
set terminal pngcairo size 700,600
set output 'gap_map.png'
set xlabel 'k1'
set ylabel 'k2'
set view map
splot 'gap_map.csv' using 1:2:3 with image title 'direct gap'
"""


def _write_csv(path: Path, header, rows) -> Path:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def emit_plots(report: dict, out_dir) -> list[Path]:
    """CSV data plus gnuplot scripts for sweeps, TRIM factor tables and gap maps."""
    out = Path(out_dir)
    tasks = report.get("tasks", {})
    written = []
    sweep = tasks.get("sweep", {})
    table = next((tasks[t]["trim_table"] for t in ("theorem", "invariant")
                  if "trim_table" in tasks.get(t, {})), None)
    gap_map = tasks.get("validate", {}).get("gap_map")
    if not (sweep.get("rows") or table or gap_map):
        warnings.warn("report has no sweep, TRIM or gap data; nothing written", stacklevel=2)
        return written
    out.mkdir(parents=True, exist_ok=True)
    if sweep.get("rows"):
        rows = [[r["param"], r["KM"], r["wz_phase"], r["residual"]] for r in sweep["rows"]]
        rows = [["" if v is None else v for v in r] for r in rows]
        written.append(_write_csv(out / "sweep.csv", ["param", "KM", "wz_phase", "residual"], rows))
        (out / "sweep.gp").write_text(GNUPLOT_SWEEP.format(param=sweep["param"]))
        written.append(out / "sweep.gp")
    if table:
        dim = len(table[0]["k"])
        head = [f"k{i + 1}" for i in range(dim)] + ["pf", "sqrt_det", "factor"]
        fmt = lambda z: f"{z[0]:.12g}{z[1]:+.12g}j"
        rows = [r["k"] + [fmt(r["pf"]), fmt(r["sqrt_det"]), r["factor"]] for r in table]
        written.append(_write_csv(out / "trim_table.csv", head, rows))
    if gap_map:
        g = np.asarray(gap_map)
        ks = 2 * np.pi * np.arange(g.shape[0]) / g.shape[0]
        rows = [[ks[a], ks[b], g[a, b]] for a in range(g.shape[0]) for b in range(g.shape[1])]
        written.append(_write_csv(out / "gap_map.csv", ["k1", "k2", "gap"], rows))
        (out / "gap_map.gp").write_text(GNUPLOT_GAP)
        written.append(out / "gap_map.gp")
    return written


def dump_fields(pipe: Pipeline, path) -> Path:
    """Projector and frame fields as a structured ``.npz`` archive."""
    path = Path(path)
    np.savez_compressed(path, k=pipe.grid.points, vectors=pipe.projectors.vectors,
                        energies=pipe.projectors.energies, frames=pipe.frame.frames)
    return path


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="z2gerbe", description=__doc__.split("\n")[0])
    ap.add_argument("verb", nargs="?", choices=TASKS,
                    help="task to run; omit to run the tasks listed in --config")
    ap.add_argument("--config", help="JSON run config (flags given here override it)")
    ap.add_argument("--model", help="built-in model name or model JSON file")
    ap.add_argument("--params", type=json.loads, help="model parameters as a JSON object")
    ap.add_argument("--grid", type=int, help="points per axis (even)")
    ap.add_argument("--levels", type=int, help="Fourier-refinement levels for WZ amplitudes")
    ap.add_argument("--tol", type=float, help="amplitude tolerance of the gates")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out", help="directory for report.json and CSV/plot files")
    ap.add_argument("--sweep-param")
    ap.add_argument("--sweep-range", type=float, nargs=2, metavar=("START", "STOP"))
    ap.add_argument("--sweep-steps", type=int)
    ap.add_argument("--timing", action="store_true", help="add wall-clock seconds per task")
    ap.add_argument("--dump", help="write projector and frame fields to this .npz file")
    return ap


def config_from_args(args) -> RunConfig:
    data = json.loads(Path(args.config).read_text()) if args.config else {}
    for key in ("model", "params", "grid", "levels", "tol", "seed", "out"):
        val = getattr(args, key)
        if val is not None:
            data[key] = val
    if args.verb:
        data["tasks"] = [args.verb]
    if args.sweep_param or args.sweep_range or args.sweep_steps:
        sw = dict(data.get("sweep") or {})
        if args.sweep_param:
            sw["param"] = args.sweep_param
        if args.sweep_range:
            sw["start"], sw["stop"] = args.sweep_range
        if args.sweep_steps:
            sw["steps"] = args.sweep_steps
        data["sweep"] = sw
    return RunConfig.from_dict(data)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = config_from_args(args)
        report = run(cfg, timing=args.timing)
    except (ConfigError, ModelError, OSError, json.JSONDecodeError, TypeError) as exc:
        print(f"z2gerbe: {exc}", file=sys.stderr)
        return 2
    text = dumps(report)
    if cfg.out:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(text)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            emit_plots(report, out)
    else:
        sys.stdout.write(text)
    if args.dump:
        dump_fields(Pipeline(_load(cfg), cfg.grid, cfg.seed), args.dump)
    for g in report["gates"]:
        if not g["passed"]:
            print(f"gate failed: {g['task']}/{g['name']} = {g['value']:.3g} > {g['limit']:.3g}",
                  file=sys.stderr)
    return 0 if report["passed"] else 1


if __name__ == "__main__":
    sys.exit(main())

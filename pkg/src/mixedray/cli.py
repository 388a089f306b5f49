"""Command line entry point: ``mixedray {forward,normal,symbols,invert,layers}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, load_config
from .gauge import GaugeSystem
from .geometry import BallShellChart, make_chart
from .inversion import (ConfigMismatch, Reconstructor, box_bump, interior_potential, layer_sweep,
                        nested_layers)
from .io import read_mrayf, write_field, write_json, write_mrayf, write_rays_csv
from .normal_op import (CutoffProfile, NormalMatrix, QuadratureSpec, apply_normal_NF,
                        assemble_normal_matrix, ray_fan)
from .symbols import direction_grid, ellipticity_scan
from .tensors import Grid, GridField, trace_free
from .transforms import forward_batch

COMMANDS = ("forward", "normal", "symbols", "invert", "layers")
SYMBOLS_HEADER = ["kind", "xi", "eta1", "eta2", "F", "min_eig", "pass"]
T1_DIRECTION = (0.3, 1.0, -0.5)
L11_DIRECTION = (0.2, 1.0, -0.3, 0.5, -0.4, 0.7, 0.1, 0.6, 0.2)
# timings are logged, never written, so equal configs give equal files
VOLATILE = ("seconds", "assembly_seconds")

log = logging.getLogger("mixedray")


class CheckFailed(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# building blocks from a config


def build_chart(cfg: ExperimentConfig):
    c = cfg["chart"]
    n = c["n"]
    if c["kind"] == "euclidean-ball-shell":
        return BallShellChart(n, c["radius"], c["width"], c["half_angle"], c["orientation"])
    params = {k: list(c[k]) for k in ("lower", "upper") if c[k] is not None}
    if c["kind"] == "conformal":
        if c["a"] is not None:
            params["a"] = list(c["a"])
        if c["q"] is not None:
            params["Q"] = np.reshape(c["q"], (n, n))
    if c["kind"] == "grid-sampled":
        box = read_mrayf(cfg.base_dir / c["file"])
        params["samples"] = box.values.reshape(tuple(box.dims) + (n, n))
        params.setdefault("lower", (box.meta or {}).get("lower"))
        params.setdefault("upper", (box.meta or {}).get("upper"))
    return make_chart(c["kind"], n, **params)


def build_grid(cfg: ExperimentConfig) -> Grid:
    g = cfg["grid"]
    return Grid(g["lower"], g["upper"], g["shape"], order=g["order"])


def build_cutoff(cfg: ExperimentConfig) -> CutoffProfile:
    c = cfg["cutoff"]
    if c["kind"] == "bump":
        return CutoffProfile("bump", c["width"])
    if c["nu"] is not None:
        return CutoffProfile("gaussian", nu=c["nu"])
    return CutoffProfile.gaussian_from_alpha(c["alpha"], cfg["transform"]["f"])


def build_quadrature(cfg: ExperimentConfig) -> QuadratureSpec:
    q = cfg["quadrature"]
    return QuadratureSpec(q["radial"], q["angular"], q["step"])


def truth_field(cfg: ExperimentConfig, grid: Grid, gauge: GaugeSystem | None = None) -> np.ndarray:
    """Ground-truth nodal field from the ``[field]`` section."""
    kind = cfg["transform"]["kind"]
    n = grid.n
    f = cfg["field"]
    shape = (grid.size, n) if kind == "T1" else (grid.size, n, n)
    if f["kind"] == "zero":
        return np.zeros(shape)
    bump = box_bump(grid, f["width"])
    if kind == "T1":
        d = np.asarray(f["direction"] or T1_DIRECTION, dtype=float)
        return bump[:, None] * d
    A = trace_free(np.reshape(f["direction"] or L11_DIRECTION, (n, n)))
    vals = bump[:, None, None] * A
    if f["potential"] > 0:
        if gauge is None:
            raise ConfigMismatch("a potential perturbation needs the gauge system")
        du = interior_potential(gauge, f["potential_power"])
        vals = vals + f["potential"] * np.linalg.norm(vals) / np.linalg.norm(du) * du
    return vals


def _stamp(cfg: ExperimentConfig, extra: dict | None = None) -> dict:
    out = {"tool": f"artifact {__version__}", "config_hash": cfg.digest}
    out.update(extra or {})
    return out


def _strip(obj):
    if isinstance(obj, dict):
        return {k: _strip(v) for k, v in obj.items() if k not in VOLATILE}
    if isinstance(obj, list):
        return [_strip(v) for v in obj]
    return obj


def _expect_hash(cfg: ExperimentConfig, meta: dict | None, what: str):
    got = (meta or {}).get("config_hash")
    if got != cfg.digest:
        raise ConfigMismatch(f"{what} was written for config {got}, not {cfg.digest}")


# ---------------------------------------------------------------------------
# commands


def cmd_normal(cfg: ExperimentConfig, out: Path) -> bool:
    chart, grid = build_chart(cfg), build_grid(cfg)
    kind, F = cfg["transform"]["kind"], cfg["transform"]["f"]
    M = assemble_normal_matrix(kind, chart, grid, F, build_cutoff(cfg), build_quadrature(cfg),
                               cap=cfg["quadrature"]["cap"])
    log.info("assembled %s matrix %s in %.1f s", kind, M.matrix.shape, M.meta["assembly_seconds"])
    meta = _stamp(cfg, {"normal": _strip(M.meta), "diagnostics": M.diagnostics()})
    write_mrayf(out / f"normal_{kind}.mrayf", M.matrix, M.matrix.shape, grid.n, 1, meta)
    return True


def cmd_forward(cfg: ExperimentConfig, out: Path) -> bool:
    chart, grid = build_chart(cfg), build_grid(cfg)
    kind, F = cfg["transform"]["kind"], cfg["transform"]["f"]
    cutoff, quad = build_cutoff(cfg), build_quadrature(cfg)
    gauge = None
    if kind == "L11" and cfg["field"]["potential"] > 0:
        gauge = GaugeSystem(chart, grid, F, cfg["solver"]["weight"])
    truth = truth_field(cfg, grid, gauge)
    field = GridField(grid, truth)
    data = np.stack([np.ravel(apply_normal_NF(kind, chart, field, z, F, cutoff, quad)) for z in grid.nodes])
    write_field(out / "truth.mrayf", grid, truth, _stamp(cfg, {"role": "truth", "kind": kind}))
    write_field(out / "data.mrayf", grid, data, _stamp(cfg, {"role": "normal data", "kind": kind}))
    # raw transform values along the fans of a few seeded nodes
    rng = np.random.default_rng(cfg["run"]["seed"])
    picks = np.sort(rng.choice(grid.size, size=min(cfg["forward"]["points"], grid.size), replace=False))
    rows = []
    for i in picks:
        fan = ray_fan(chart, grid.nodes[i], cutoff, quad)
        z = np.broadcast_to(fan.point, fan.zeta.shape)
        vals = forward_batch(chart, field, z, fan.zeta, fan.theta, kind, step=quad.step)
        rows.append((z, fan.zeta, fan.theta, vals))
    write_rays_csv(out / "rays.csv", *(np.concatenate(parts) for parts in zip(*rows)))
    write_json(out / "rays.csv.json", _stamp(cfg, {"kind": kind, "nodes": picks.tolist()}))
    return True


def cmd_invert(cfg: ExperimentConfig, out: Path) -> bool:
    kind, F = cfg["transform"]["kind"], cfg["transform"]["f"]
    grid = build_grid(cfg)
    mat = read_mrayf(out / f"normal_{kind}.mrayf")
    data = read_mrayf(out / "data.mrayf")
    truth = read_mrayf(out / "truth.mrayf")
    for name, box in (("normal matrix", mat), ("normal data", data), ("truth", truth)):
        _expect_hash(cfg, box.meta, name)
    size = int(np.prod(mat.dims[:1]))
    M = NormalMatrix(kind, grid, F, mat.values.reshape(size, -1))
    gauge = GaugeSystem(build_chart(cfg), grid, F, cfg["solver"]["weight"]) if kind == "L11" else None
    s = cfg["solver"]
    rec = Reconstructor(M, gauge, reg_factor=s["reg_factor"])(data.values, truth.values, s["tol"])
    rep = rec.report.to_dict()
    log.info("%s reconstruction: error %s, %d iterations", kind, rep["relative_error"], rep["iterations"])
    write_field(out / "reconstruction.mrayf", grid, rec.values, _stamp(cfg, {"role": "reconstruction"}))
    ok = rec.report.converged
    limit = cfg["checks"]["max_error"]
    if limit is not None and rep["relative_error"] is not None:
        ok = ok and rep["relative_error"] <= limit
    write_json(out / "report.json", _stamp(cfg, {"report": _strip(rep), "pass": ok}))
    return ok


def cmd_symbols(cfg: ExperimentConfig, out: Path) -> bool:
    s = cfg["symbols"]
    n = cfg["chart"]["n"]
    dirs = direction_grid(n, s["directions"], cfg["run"]["seed"])
    rep = ellipticity_scan(s["kind"], dirs, s["fs"], restricted=s["restricted"], radii=s["radii"],
                           alpha=s["alpha"], order=s["order"] or None)
    with open(out / "symbols.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SYMBOLS_HEADER)
        for r in rep.rows:
            eta = list(r["eta"]) + [0.0] * (2 - len(r["eta"]))
            w.writerow([r["kind"], _num(r["xi"]), _num(eta[0]), _num(eta[1]), _num(r["F"]),
                        _num(r["min_eig"]), "true" if r["pass"] else "false"])
    summary = {"kind": s["kind"], "restricted": rep.restricted, "points": len(rep.rows),
               "min_eig": rep.min_eig, "max_anti_part": rep.max_anti_part,
               "dims": sorted({r["dim"] for r in rep.rows}), "pass": rep.passed}
    write_json(out / "symbols.csv.json", _stamp(cfg, summary))
    return rep.passed


def _num(v: float) -> str:
    return format(float(v), ".12g")


def cmd_layers(cfg: ExperimentConfig, out: Path) -> bool:
    c, L = cfg["chart"], cfg["layers"]
    if c["kind"] != "euclidean-ball-shell" or c["orientation"] != "outward":
        raise ConfigMismatch("layer stripping runs on the outward euclidean-ball-shell chart")
    layers = nested_layers(L["levels"], L["shape"], radius=c["radius"], lateral=L["lateral"],
                           gap=L["gap"], order=cfg["grid"]["order"])
    # truth: Gaussian centred in the union of the layer boxes (radial coordinates)
    lo = np.array(layers[-1].grid.lower)
    hi = np.array(layers[0].grid.upper)
    lo[0] += c["radius"] - layers[-1].depth
    hi[0] += c["radius"] - layers[0].depth
    centre, width = 0.5 * (lo + hi), cfg["field"]["width"] * (hi - lo)
    direction = np.asarray(cfg["field"]["direction"] or T1_DIRECTION, dtype=float)
    zero = cfg["field"]["kind"] == "zero"

    def truth(p):
        amp = np.zeros(len(p)) if zero else np.exp(-np.sum(((p - centre) / width) ** 2, axis=-1))
        return amp[:, None] * direction

    with warnings.catch_warnings():
        # deep rays reach strongly negative weight exponents; those only damp
        warnings.simplefilter("ignore", RuntimeWarning)
        res = layer_sweep(layers, truth, F=cfg["transform"]["f"], cutoff=build_cutoff(cfg),
                          quadspec=build_quadrature(cfg), radius=c["radius"],
                          half_angle=c["half_angle"], reg_factor=cfg["solver"]["reg_factor"],
                          tol=cfg["solver"]["tol"])
    log.info("layer sweep: stitched error %s in %.1f s", res.stitched_error, res.seconds)
    ok = all(r.converged for r in res.reports)
    limit = cfg["checks"]["max_error"]
    if limit is not None:
        ok = ok and res.stitched_error <= limit
    body = {"layers": [_strip(r.to_dict()) for r in res.reports],
            "stitched_error": res.stitched_error, "pass": ok}
    write_json(out / "layers.json", _stamp(cfg, body))
    return ok


HANDLERS = {"forward": cmd_forward, "normal": cmd_normal, "symbols": cmd_symbols,
            "invert": cmd_invert, "layers": cmd_layers}


def run(command: str, cfg: ExperimentConfig, out: Path) -> int:
    """Run one command; 0 when every asserted check passes, 1 otherwise."""
    out.mkdir(parents=True, exist_ok=True)
    return 0 if HANDLERS[command](cfg, out) else 1


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mixedray", description=__doc__)
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, type=Path, help="experiment config file")
    p.add_argument("--out", type=Path, help="output directory (overrides [run] out)")
    p.add_argument("--threads", type=int, help="cap on BLAS threads")
    p.add_argument("--seed", type=int, help="overrides [run] seed")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be >= 0", "seed")
            cfg.values["run"]["seed"] = args.seed
        out = args.out or (cfg.base_dir / cfg["run"]["out"])
        if args.threads is not None:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=max(1, args.threads)):
                return run(args.command, cfg, out)
        return run(args.command, cfg, out)
    except ConfigError as exc:
        return _fail(args.command, exc, 2)
    except Exception as exc:  # every module error becomes a structured report
        return _fail(args.command, exc, 3)


def _fail(command: str, exc: Exception, code: int) -> int:
    report = {"command": command, "error": type(exc).__name__, "message": str(exc),
              "tool": f"artifact {__version__}"}
    key = getattr(exc, "key", None)
    if key is not None:
        report["key"], report["line"] = key, exc.line
    print(json.dumps(report, sort_keys=True), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())

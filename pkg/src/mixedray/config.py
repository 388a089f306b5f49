"""Sectioned ``key = value`` experiment configuration.

Grammar, one item per line::

    # comment (also ';')
    [section]
    key = value

Lists are whitespace or comma separated.  Every key belongs to a known
section; unknown sections or keys, duplicates, bad types and out-of-range
values are rejected with the offending line number.  Missing keys take
their defaults.  ``canonical()`` prints every section and key in schema
order and ``digest`` is the git blob hash of that text.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

CHART_KINDS = ("euclidean-cartesian", "euclidean-ball-shell", "conformal", "grid-sampled")


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        where = f"line {line}: " if line is not None else ""
        super().__init__(where + message)
        self.key, self.line = key, line


@dataclass(frozen=True)
class Key:
    kind: str                      # int, float, str, bool, floats, ints
    default: Any
    check: Callable[[Any], bool] | None = None
    rule: str = ""
    choices: tuple = ()


def _pos(v):
    return v > 0


def _nonneg(v):
    return v >= 0


SCHEMA: dict[str, dict[str, Key]] = {
    "run": {
        "seed": Key("int", 0, _nonneg, ">= 0"),
        "out": Key("str", "out"),
    },
    "chart": {
        "kind": Key("str", "euclidean-ball-shell", choices=CHART_KINDS),
        "n": Key("int", 3, lambda v: v == 3, "== 3 (only n = 3 is supported)"),
        "radius": Key("float", 1.0, _pos, "> 0"),
        "width": Key("float", 0.3, _pos, "> 0"),
        "half_angle": Key("float", 0.6, lambda v: 0 < v < math.pi / 2, "in (0, pi/2)"),
        "orientation": Key("str", "outward", choices=("outward", "inward")),
        "lower": Key("floats", None),
        "upper": Key("floats", None),
        "a": Key("floats", None),
        "q": Key("floats", None),
        "file": Key("str", None),
    },
    "grid": {
        "shape": Key("ints", (8, 8, 8), lambda v: min(v) >= 5, "every entry >= 5"),
        "lower": Key("floats", (0.12, -0.3, -0.3)),
        "upper": Key("floats", (0.28, 0.3, 0.3)),
        "order": Key("int", 3, lambda v: v in (1, 3), "1 or 3"),
    },
    "transform": {
        "kind": Key("str", "T1", choices=("T1", "L11")),
        "f": Key("float", 5.0, _nonneg, ">= 0"),
    },
    "cutoff": {
        "kind": Key("str", "bump", choices=("bump", "gaussian")),
        "width": Key("float", 1.0, lambda v: 0 < v <= 1, "in (0, 1]"),
        "nu": Key("float", None, _pos, "> 0"),
        "alpha": Key("float", None, _pos, "> 0"),
    },
    "quadrature": {
        "radial": Key("int", 16, lambda v: v >= 2, ">= 2"),
        "angular": Key("int", 32, lambda v: v >= 8, ">= 8"),
        "step": Key("float", 1e-2, lambda v: 0 < v <= 0.05, "in (0, 0.05]"),
        "cap": Key("int", 8000, _pos, "> 0"),
    },
    "solver": {
        "tol": Key("float", 1e-8, lambda v: 0 < v < 1, "in (0, 1)"),
        "reg_factor": Key("float", 1e-6, _nonneg, ">= 0"),
        "weight": Key("str", "scattering", choices=("scattering", "chart")),
    },
    "field": {
        "kind": Key("str", "bump", choices=("bump", "zero")),
        "width": Key("float", 0.18, _pos, "> 0"),
        "direction": Key("floats", None),
        "potential": Key("float", 0.0, _nonneg, ">= 0"),
        "potential_power": Key("int", 1, lambda v: v >= 1, ">= 1"),
    },
    "forward": {
        "points": Key("int", 4, _pos, "> 0"),
    },
    "symbols": {
        "kind": Key("str", "T1_FIBER", choices=("T1_FIBER", "T1_BASE", "L11_FIBER", "L11_BASE")),
        "directions": Key("int", 64, lambda v: v >= 1, ">= 1"),
        "fs": Key("floats", (5.0, 10.0, 20.0), lambda v: min(v) > 0, "every entry > 0"),
        "radii": Key("floats", (0.0, 0.5, 1.0, 2.0), lambda v: min(v) >= 0, "every entry >= 0"),
        "alpha": Key("float", 0.5, _pos, "> 0"),
        "order": Key("int", 0, lambda v: v == 0 or v >= 8, "0 (default) or >= 8"),
        "restricted": Key("bool", True),
    },
    "layers": {
        "levels": Key("floats", (0.15, 0.3), lambda v: min(v) > 0, "every entry > 0"),
        "shape": Key("ints", (6, 6, 6), lambda v: min(v) >= 5, "every entry >= 5"),
        "gap": Key("float", 0.15, lambda v: 0 < v < 0.5, "in (0, 0.5)"),
        "lateral": Key("float", 0.3, _pos, "> 0"),
    },
    "checks": {
        "max_error": Key("float", None, _pos, "> 0"),
    },
}


def _convert(spec: Key, raw: str, key: str, line: int):
    try:
        if spec.kind == "int":
            return int(raw)
        if spec.kind == "float":
            v = float(raw)
            if not math.isfinite(v):
                raise ValueError
            return v
        if spec.kind == "bool":
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError
        if spec.kind in ("floats", "ints"):
            parts = raw.replace(",", " ").split()
            if not parts:
                raise ValueError
            cast = int if spec.kind == "ints" else float
            return tuple(cast(p) for p in parts)
        return raw
    except ValueError:
        raise ConfigError(f"key {key!r} expects {spec.kind}, got {raw!r}", key, line) from None


def _format(spec: Key, value) -> str:
    if spec.kind == "float":
        return repr(float(value))
    if spec.kind == "bool":
        return "true" if value else "false"
    if spec.kind == "floats":
        return " ".join(repr(float(v)) for v in value)
    if spec.kind == "ints":
        return " ".join(str(int(v)) for v in value)
    return str(value)


@dataclass
class ExperimentConfig:
    values: dict[str, dict[str, Any]]
    base_dir: Path = field(default=Path("."), compare=False)

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self.values[section]

    def canonical(self) -> str:
        out = []
        for sec, keys in SCHEMA.items():
            out.append(f"[{sec}]")
            for key, spec in keys.items():
                v = self.values[sec][key]
                if v is not None:
                    out.append(f"{key} = {_format(spec, v)}")
            out.append("")
        return "\n".join(out)

    @property
    def digest(self) -> str:
        body = self.canonical().encode("utf-8")
        return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


def parse_config(text: str, base_dir=".") -> ExperimentConfig:
    values: dict[str, dict[str, Any]] = {s: {} for s in SCHEMA}
    lines_of: dict[tuple[str, str], int] = {}
    section = None
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {line!r}", None, no)
            section = line[1:-1].strip().lower()
            if section not in SCHEMA:
                raise ConfigError(f"unknown section [{section}]", section, no)
            continue
        key, eq, raw_val = line.partition("=")
        key = key.strip()
        if not eq:
            raise ConfigError(f"expected 'key = value', got {line!r}", key or None, no)
        if section is None:
            raise ConfigError(f"key {key!r} appears before any section", key, no)
        lookup = key.lower()
        if lookup not in SCHEMA[section]:
            raise ConfigError(f"unknown key {key!r} in section [{section}]", key, no)
        if lookup in values[section]:
            raise ConfigError(f"duplicate key {key!r} in section [{section}]", key, no)
        spec = SCHEMA[section][lookup]
        val = raw_val.strip()
        if val.lower() == "none" and spec.default is None:
            values[section][lookup] = None
            lines_of[(section, lookup)] = no
            continue
        v = _convert(spec, val, key, no)
        if spec.choices and v not in spec.choices:
            raise ConfigError(f"key {key!r} must be one of {', '.join(spec.choices)}; got {v!r}", key, no)
        if spec.check is not None and not spec.check(v):
            raise ConfigError(f"key {key!r} out of range: must be {spec.rule}; got {val}", key, no)
        values[section][lookup] = v
        lines_of[(section, lookup)] = no
    for sec, keys in SCHEMA.items():
        for key, spec in keys.items():
            values[sec].setdefault(key, spec.default)
    cfg = ExperimentConfig(values, Path(base_dir))
    _cross_checks(cfg, lines_of)
    return cfg


def _cross_checks(cfg: ExperimentConfig, lines_of) -> None:
    def fail(sec, key, msg):
        raise ConfigError(msg, key, lines_of.get((sec, key)))

    n = cfg["chart"]["n"]
    g = cfg["grid"]
    for key in ("shape", "lower", "upper"):
        if len(g[key]) != n:
            fail("grid", key, f"key {key!r} needs {n} entries")
    if any(u <= l for l, u in zip(g["lower"], g["upper"])):
        fail("grid", "upper", "key 'upper' must exceed 'lower' on every axis")
    c = cfg["chart"]
    if c["kind"] == "euclidean-ball-shell" and c["width"] >= c["radius"]:
        fail("chart", "width", "key 'width' must be smaller than 'radius'")
    if c["kind"] == "grid-sampled":
        if not c["file"]:
            fail("chart", "file", "key 'file' is required for a grid-sampled chart")
        if not (cfg.base_dir / c["file"]).exists():
            fail("chart", "file", f"key 'file' names a missing file {c['file']!r}")
    if c["kind"] in ("conformal", "grid-sampled", "euclidean-cartesian"):
        for key in ("lower", "upper"):
            if c[key] is not None and len(c[key]) != n:
                fail("chart", key, f"key {key!r} needs {n} entries")
    if c["a"] is not None and len(c["a"]) != n:
        fail("chart", "a", f"key 'a' needs {n} entries")
    if c["q"] is not None and len(c["q"]) != n * n:
        fail("chart", "q", f"key 'q' needs {n * n} entries")
    cut = cfg["cutoff"]
    if cut["kind"] == "gaussian" and cut["nu"] is None and cut["alpha"] is None:
        fail("cutoff", "kind", "a gaussian cutoff needs 'nu' or 'alpha'")
    d = cfg["field"]["direction"]
    want = n if cfg["transform"]["kind"] == "T1" else n * n
    if d is not None and len(d) != want:
        fail("field", "direction", f"key 'direction' needs {want} entries for {cfg['transform']['kind']}")
    lv = cfg["layers"]["levels"]
    if any(b <= a for a, b in zip(lv, lv[1:])):
        fail("layers", "levels", "key 'levels' must increase strictly")


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), path.parent)

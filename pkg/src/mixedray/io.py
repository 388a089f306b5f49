"""MRAYF1 containers, JSON sidecars and the CSV formats."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = "MRAYF1"
LAYOUT = "row-major"


class FormatError(ValueError):
    pass


@dataclass
class Container:
    dims: tuple[int, ...]
    n: int
    components: int
    values: np.ndarray          # (prod(dims), components)
    meta: dict | None = None


def _header(dims, n, components) -> bytes:
    lines = [MAGIC, "dims " + " ".join(str(int(d)) for d in dims), f"n {int(n)}",
             f"components {int(components)}", f"layout {LAYOUT}", "end"]
    return ("\n".join(lines) + "\n").encode("ascii")


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def write_json(path, obj) -> None:
    """Deterministic JSON: sorted keys, fixed indentation, trailing newline."""
    Path(path).write_text(json.dumps(_plain(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_mrayf(path, values, dims, n: int, components: int, meta: dict | None = None) -> None:
    values = np.ascontiguousarray(np.asarray(values, dtype="<f8"))
    expected = int(np.prod(dims)) * int(components)
    if values.size != expected:
        raise FormatError(f"payload has {values.size} numbers, header promises {expected}")
    with open(path, "wb") as fh:
        fh.write(_header(dims, n, components))
        fh.write(values.tobytes(order="C"))
    if meta is not None:
        write_json(sidecar_path(path), meta)


def read_mrayf(path) -> Container:
    data = Path(path).read_bytes()
    fields = {}
    pos = 0
    for i in range(6):
        end = data.find(b"\n", pos)
        if end < 0:
            raise FormatError("truncated MRAYF1 header")
        line = data[pos:end].decode("ascii")
        pos = end + 1
        if i == 0:
            if line != MAGIC:
                raise FormatError(f"bad magic {line!r}")
            continue
        if line == "end":
            break
        key, _, rest = line.partition(" ")
        fields[key] = rest
    try:
        dims = tuple(int(d) for d in fields["dims"].split())
        n = int(fields["n"])
        comps = int(fields["components"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"malformed MRAYF1 header: {exc}") from None
    if fields.get("layout") != LAYOUT:
        raise FormatError(f"unsupported layout {fields.get('layout')!r}")
    count = int(np.prod(dims)) * comps
    payload = np.frombuffer(data, dtype="<f8", offset=pos)
    if payload.size != count:
        raise FormatError(f"payload has {payload.size} numbers, header promises {count}")
    side = sidecar_path(path)
    meta = json.loads(side.read_text(encoding="utf-8")) if side.exists() else None
    return Container(dims, n, comps, payload.reshape(-1, comps).copy(), meta)


def write_field(path, grid, values, meta: dict | None = None) -> None:
    """Nodal vector or (1,1) values of a grid field."""
    values = np.asarray(values, dtype=float).reshape(grid.size, -1)
    info = {"grid": grid.to_dict()}
    info.update(meta or {})
    write_mrayf(path, values, grid.shape, grid.n, values.shape[1], info)


def write_field_csv(path, grid, values) -> None:
    """One row per node: axis indices then components, last axis fastest."""
    values = np.asarray(values, dtype=float).reshape(grid.size, -1)
    idx = np.indices(grid.shape).reshape(grid.n, -1).T
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"i{a}" for a in range(grid.n)] + [f"v{c}" for c in range(values.shape[1])])
        for ijk, row in zip(idx, values):
            w.writerow([int(i) for i in ijk] + [repr(float(v)) for v in row])


def read_field_csv(path, shape) -> np.ndarray:
    shape = tuple(int(s) for s in shape)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    head, body = rows[0], rows[1:]
    d = len(shape)
    if [h for h in head[:d]] != [f"i{a}" for a in range(d)]:
        raise FormatError("CSV field header must start with the axis indices")
    comps = len(head) - d
    out = np.full((int(np.prod(shape)), comps), np.nan)
    for r in body:
        flat = np.ravel_multi_index(tuple(int(v) for v in r[:d]), shape)
        out[flat] = [float(v) for v in r[d:]]
    if np.isnan(out).any():
        raise FormatError("CSV field does not cover every node")
    return out


def write_rays_csv(path, z, zeta, theta, values) -> None:
    """Forward dataset: ray id, base point, direction, reference covector, result."""
    z, zeta, theta, values = (np.atleast_2d(np.asarray(a, dtype=float)) for a in (z, zeta, theta, values))
    n = z.shape[1]
    head = ["ray"] + [f"z{i}" for i in range(n)] + [f"zeta{i}" for i in range(n)] \
        + [f"theta{i}" for i in range(n)] + [f"out{i}" for i in range(values.shape[1])]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(head)
        for r in range(z.shape[0]):
            w.writerow([r] + [repr(float(v)) for v in np.concatenate([z[r], zeta[r], theta[r], values[r]])])

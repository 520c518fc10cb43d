"""Instance file formats: a native JSON document and a TSPLIB-style subset.

The native format stores every Instance field with floats printed at 17
significant digits, so write -> read is lossless down to the bit.

The lib reader accepts the common TSP/CVRP file layout (NAME, TYPE,
DIMENSION, CAPACITY, EDGE_WEIGHT_TYPE, NODE_COORD_SECTION, DEMAND_SECTION,
DEPOT_SECTION, EOF) with EUC_2D coordinates only.  Coordinates are
normalised into the unit square preserving aspect ratio; the scale factor
is kept on the Instance so reported objectives can be mapped back.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .problems import Instance


class ParseError(ValueError):
    """The document is malformed for its declared format."""


class UnsupportedFormatError(ValueError):
    """The document is well-formed but uses features outside the subset."""


class DegenerateInstanceError(ValueError):
    """The document parses but cannot become a usable instance."""


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _fmt_row(row) -> str:
    return "[" + ", ".join(_fmt(v) for v in row) + "]"


def dumps_native(inst: Instance) -> str:
    """Serialise an Instance as a JSON document (deterministic bytes)."""
    lines = ["{"]
    lines.append(f'  "task": {json.dumps(inst.task)},')
    lines.append(f'  "n": {inst.n},')
    coords = ",\n    ".join(_fmt_row(r) for r in inst.coords)
    lines.append(f'  "coords": [\n    {coords}\n  ],')
    for field in ("demands", "prizes", "penalties"):
        arr = getattr(inst, field)
        if arr is None:
            lines.append(f'  "{field}": null,')
        else:
            lines.append(f'  "{field}": [' + ", ".join(_fmt(v) for v in arr) + "],")
    for field in ("capacity", "max_length", "min_prize", "scale_factor"):
        val = getattr(inst, field)
        lines.append(f'  "{field}": ' + ("null," if val is None else _fmt(val) + ","))
    seed = None if inst.seed is None else int(inst.seed)
    lines.append(f'  "seed": {json.dumps(seed)},')
    lines.append(f'  "name": {json.dumps(None if inst.name is None else str(inst.name))}')
    lines.append("}")
    return "\n".join(lines) + "\n"


def write_native(inst: Instance, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(dumps_native(inst))


def loads_native(text: str) -> Instance:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"invalid JSON: {e}") from None
    if not isinstance(doc, dict):
        raise ParseError("instance document must be a JSON object")
    for key in ("task", "n", "coords"):
        if key not in doc:
            raise ParseError(f"missing field {key!r}")
    try:
        coords = np.asarray(doc["coords"], dtype=np.float64)
        if coords.shape != (int(doc["n"]), 2):
            raise ParseError(f"coords shape {coords.shape} does not match n={doc['n']}")

        def opt_arr(key):
            v = doc.get(key)
            return None if v is None else np.asarray(v, dtype=np.float64)

        def opt_num(key):
            v = doc.get(key)
            return None if v is None else float(v)

        return Instance(
            task=doc["task"],
            coords=coords,
            demands=opt_arr("demands"),
            prizes=opt_arr("prizes"),
            penalties=opt_arr("penalties"),
            capacity=opt_num("capacity"),
            max_length=opt_num("max_length"),
            min_prize=opt_num("min_prize"),
            seed=doc.get("seed"),
            name=doc.get("name"),
            scale_factor=opt_num("scale_factor"),
        )
    except (TypeError, ValueError) as e:
        if isinstance(e, ParseError):
            raise
        raise ParseError(f"bad instance document: {e}") from None


def read_native(path) -> Instance:
    with open(path, "rb") as f:
        return loads_native(f.read().decode("utf-8", errors="replace"))


# ---------------------------------------------------------------------------
# TSPLIB-style subset
# ---------------------------------------------------------------------------

_HEADER_KEYS = {
    "NAME",
    "TYPE",
    "COMMENT",
    "DIMENSION",
    "CAPACITY",
    "EDGE_WEIGHT_TYPE",
    "DISPLAY_DATA_TYPE",
    "NODE_COORD_TYPE",
    "BEST_KNOWN",
}


@dataclass
class LibDocument:
    """Parsed lib file, still in its original coordinate scale (ids 1-based)."""

    name: str
    type: str  # "TSP" or "CVRP"
    dimension: int
    coords: np.ndarray  # (n, 2), original scale, in id order
    capacity: float | None = None
    demands: np.ndarray | None = None  # raw units, id order
    depot_id: int = 1


def read_lib(path) -> LibDocument:
    with open(path, "rb") as f:
        text = f.read().decode("utf-8", errors="replace")
    return loads_lib(text)


def loads_lib(text: str) -> LibDocument:
    lines = [ln.strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln]
    header: dict[str, str] = {}
    coords: dict[int, tuple[float, float]] = {}
    demands: dict[int, float] = {}
    depot_ids: list[int] = []
    i = 0

    def need_dimension() -> int:
        if "DIMENSION" not in header:
            raise ParseError("section appears before DIMENSION")
        try:
            d = int(header["DIMENSION"])
        except ValueError:
            raise ParseError(f"bad DIMENSION {header['DIMENSION']!r}") from None
        if d < 2:
            raise DegenerateInstanceError(f"DIMENSION must be >= 2, got {d}")
        return d

    while i < len(lines):
        line = lines[i]
        head = line.split(":")[0].split()
        token = head[0].upper() if head else ""
        if token == "EOF":
            break
        if token == "NODE_COORD_SECTION":
            dim = need_dimension()
            for k in range(dim):
                i += 1
                if i >= len(lines):
                    raise ParseError("NODE_COORD_SECTION ended early")
                parts = lines[i].split()
                if len(parts) != 3:
                    raise ParseError(f"bad coord row {lines[i]!r}")
                try:
                    nid, x, y = int(parts[0]), float(parts[1]), float(parts[2])
                except ValueError:
                    raise ParseError(f"bad coord row {lines[i]!r}") from None
                if not (math.isfinite(x) and math.isfinite(y)):
                    raise ParseError(f"non-finite coordinate in {lines[i]!r}")
                if nid in coords:
                    raise ParseError(f"duplicate node id {nid}")
                coords[nid] = (x, y)
        elif token == "DEMAND_SECTION":
            dim = need_dimension()
            for k in range(dim):
                i += 1
                if i >= len(lines):
                    raise ParseError("DEMAND_SECTION ended early")
                parts = lines[i].split()
                if len(parts) != 2:
                    raise ParseError(f"bad demand row {lines[i]!r}")
                try:
                    nid, dem = int(parts[0]), float(parts[1])
                except ValueError:
                    raise ParseError(f"bad demand row {lines[i]!r}") from None
                if nid in demands:
                    raise ParseError(f"duplicate demand for node {nid}")
                if dem < 0 or not math.isfinite(dem):
                    raise ParseError(f"bad demand value {dem}")
                demands[nid] = dem
        elif token == "DEPOT_SECTION":
            while True:
                i += 1
                if i >= len(lines):
                    raise ParseError("DEPOT_SECTION not terminated by -1")
                try:
                    v = int(lines[i].split()[0])
                except (ValueError, IndexError):
                    raise ParseError(f"bad depot row {lines[i]!r}") from None
                if v == -1:
                    break
                depot_ids.append(v)
        elif token.endswith("_SECTION"):
            raise UnsupportedFormatError(f"unsupported section {token}")
        elif ":" in line:
            key, _, value = line.partition(":")
            if not key.strip():
                raise ParseError(f"unrecognised line {line!r}")
            header[key.strip().upper()] = value.strip()
        elif token in _HEADER_KEYS:
            parts = line.split(None, 1)
            header[token] = parts[1].strip() if len(parts) > 1 else ""
        else:
            raise ParseError(f"unrecognised line {line!r}")
        i += 1

    if "TYPE" not in header:
        raise ParseError("missing TYPE")
    ftype = header["TYPE"].upper()
    if ftype not in ("TSP", "CVRP"):
        raise UnsupportedFormatError(f"unsupported TYPE {header['TYPE']!r}")
    ewt = header.get("EDGE_WEIGHT_TYPE", "").upper()
    if ewt != "EUC_2D":
        raise UnsupportedFormatError(f"EDGE_WEIGHT_TYPE must be EUC_2D, got {ewt!r}")
    dim = need_dimension()
    if set(coords) != set(range(1, dim + 1)):
        raise ParseError(f"coords must cover ids 1..{dim}")
    arr = np.array([coords[k] for k in range(1, dim + 1)])

    dem_arr = None
    capacity = None
    depot_id = 1
    if ftype == "CVRP":
        if "CAPACITY" not in header:
            raise ParseError("CVRP file missing CAPACITY")
        try:
            capacity = float(header["CAPACITY"])
        except ValueError:
            raise ParseError(f"bad CAPACITY {header['CAPACITY']!r}") from None
        if not capacity > 0 or not math.isfinite(capacity):
            raise ParseError("CAPACITY must be positive and finite")
        if set(demands) != set(range(1, dim + 1)):
            raise ParseError(f"demands must cover ids 1..{dim}")
        dem_arr = np.array([demands[k] for k in range(1, dim + 1)])
        if len(depot_ids) > 1:
            raise UnsupportedFormatError("multiple depots are not supported")
        if depot_ids:
            depot_id = depot_ids[0]
            if not 1 <= depot_id <= dim:
                raise ParseError(f"depot id {depot_id} out of range")
        if dem_arr[depot_id - 1] != 0:
            raise ParseError("depot demand must be 0")
        if dem_arr.max() > capacity:
            raise DegenerateInstanceError("a demand exceeds vehicle capacity")

    return LibDocument(
        name=header.get("NAME", ""),
        type=ftype,
        dimension=dim,
        coords=arr,
        capacity=capacity,
        demands=dem_arr,
        depot_id=depot_id,
    )


def to_instance(doc: LibDocument) -> Instance:
    """Normalise a lib document into a unit-square Instance.

    The depot is moved to index 0 (CVRP); the largest coordinate span
    becomes the scale factor, so original costs are normalised cost times
    scale_factor.
    """
    order = list(range(doc.dimension))
    if doc.type == "CVRP":
        d0 = doc.depot_id - 1
        order = [d0] + [k for k in range(doc.dimension) if k != d0]
    coords = doc.coords[order]
    lo = coords.min(axis=0)
    span = float((coords.max(axis=0) - lo).max())
    if span <= 0.0:
        raise DegenerateInstanceError("all nodes coincide; cannot normalise")
    norm = (coords - lo) / span
    if doc.type == "TSP":
        return Instance("tsp", norm, name=doc.name or None, scale_factor=span)
    demands = doc.demands[order] / doc.capacity
    return Instance(
        "cvrp",
        norm,
        demands=demands,
        capacity=doc.capacity,
        name=doc.name or None,
        scale_factor=span,
    )


def write_lib(inst: Instance, path) -> None:
    """Emit a lib file readable by read_lib (tsp and cvrp only)."""
    if inst.task not in ("tsp", "cvrp"):
        raise UnsupportedFormatError(f"lib format cannot express task {inst.task!r}")
    name = inst.name or f"{inst.task}{inst.n}"
    out = [f"NAME : {name}"]
    out.append(f"TYPE : {inst.task.upper()}")
    out.append(f"DIMENSION : {inst.n}")
    out.append("EDGE_WEIGHT_TYPE : EUC_2D")
    if inst.task == "cvrp":
        cap = inst.capacity
        out.append(f"CAPACITY : {_fmt(cap)}" if cap != int(cap) else f"CAPACITY : {int(cap)}")
    out.append("NODE_COORD_SECTION")
    for k, (x, y) in enumerate(inst.coords, start=1):
        out.append(f"{k} {_fmt(x)} {_fmt(y)}")
    if inst.task == "cvrp":
        out.append("DEMAND_SECTION")
        for k, d in enumerate(inst.demands, start=1):
            raw = d * inst.capacity
            tok = str(int(round(raw))) if abs(raw - round(raw)) < 1e-9 else _fmt(raw)
            out.append(f"{k} {tok}")
        out.append("DEPOT_SECTION")
        out.append("1")
        out.append("-1")
    out.append("EOF")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(out) + "\n")

"""Benchmark-format I/O: TSPLIB and CVRPLIB (Set-X style) parsing with
the EUC_2D subset, round-trip serialization, and the results CSV.

Benchmark objectives use the standard per-edge nearest-integer rounding;
synthetic instances always use exact 64-bit distances.  The two modes
are explicit and never mixed implicitly.
"""

from __future__ import annotations

import gzip
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .vrp import Instance, MetricKind, ProblemKind, sequence_cost

SUPPORTED_EDGE_WEIGHTS = ("EUC_2D",)
_TSP_SECTIONS = ("NODE_COORD_SECTION",)
_CVRP_SECTIONS = ("NODE_COORD_SECTION", "DEMAND_SECTION", "DEPOT_SECTION")


class ParseError(ValueError):
    """Malformed benchmark file; the message carries the offending line."""


class UnsupportedFormatError(ValueError):
    """Valid file using a feature outside the supported subset."""


@dataclass(frozen=True)
class BenchmarkInstance:
    name: str
    instance: Instance
    rounded: bool                  # evaluate objectives with nint(euclidean)
    best_known: float | None = None


def read_text(path: str | Path) -> str:
    """File contents; gzip accepted transparently."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw.decode("utf-8")


def _split_header(text: str) -> tuple[dict[str, str], list[tuple[int, str]]]:
    """Header keywords plus the remaining (line-number, line) section body."""
    header: dict[str, str] = {}
    body: list[tuple[int, str]] = []
    in_body = False
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped:
            continue
        if not in_body and ":" in stripped:
            key, _, value = stripped.partition(":")
            header[key.strip()] = value.strip()
            continue
        in_body = True
        body.append((lineno, stripped))
    return header, body


def _parse_coords(body: list[tuple[int, str]], start: int, dimension: int) -> tuple[np.ndarray, int]:
    coords = np.zeros((dimension, 2))
    for row in range(dimension):
        lineno, line = body[start + row]
        parts = line.split()
        if len(parts) != 3:
            raise ParseError(f"line {lineno}: expected 'index x y', got {line!r}")
        try:
            idx = int(parts[0])
            coords[idx - 1] = (float(parts[1]), float(parts[2]))
        except (ValueError, IndexError) as exc:
            raise ParseError(f"line {lineno}: bad coordinate entry {line!r}") from exc
    return coords, start + dimension


def _require(header: dict[str, str], key: str) -> str:
    if key not in header:
        raise ParseError(f"missing required header field {key}")
    return header[key]


def _check_common(header: dict[str, str], expected_type: str) -> int:
    ftype = _require(header, "TYPE")
    if ftype != expected_type:
        raise UnsupportedFormatError(f"TYPE {ftype} not supported, expected {expected_type}")
    ewt = _require(header, "EDGE_WEIGHT_TYPE")
    if ewt not in SUPPORTED_EDGE_WEIGHTS:
        raise UnsupportedFormatError(f"EDGE_WEIGHT_TYPE {ewt} not supported "
                                     f"(supported: {', '.join(SUPPORTED_EDGE_WEIGHTS)})")
    try:
        return int(_require(header, "DIMENSION"))
    except ValueError as exc:
        raise ParseError(f"DIMENSION is not an integer: {header['DIMENSION']!r}") from exc


def _best_known(header: dict[str, str]) -> float | None:
    if "BEST_KNOWN" in header:
        try:
            return float(header["BEST_KNOWN"])
        except ValueError:
            return None
    return None


def parse_tsplib(text: str) -> BenchmarkInstance:
    """TSPLIB TSP file with EUC_2D weights; any other section or
    edge-weight type raises rather than being skipped."""
    header, body = _split_header(text)
    dimension = _check_common(header, "TSP")
    coords = None
    pos = 0
    while pos < len(body):
        lineno, line = body[pos]
        if line == "NODE_COORD_SECTION":
            coords, pos = _parse_coords(body, pos + 1, dimension)
        elif line == "EOF":
            pos += 1
        else:
            raise UnsupportedFormatError(f"line {lineno}: unsupported section {line!r}")
    if coords is None:
        raise ParseError("missing NODE_COORD_SECTION")
    inst = Instance(kind=ProblemKind.TSP, coords=coords, metric=MetricKind.EUCLIDEAN)
    return BenchmarkInstance(name=header.get("NAME", "unnamed"), instance=inst,
                             rounded=True, best_known=_best_known(header))


def parse_cvrplib(text: str) -> BenchmarkInstance:
    """CVRPLIB file (Set-X style).  The depot maps to internal index 0;
    a non-zero depot demand is normalized to 0 with a warning."""
    header, body = _split_header(text)
    dimension = _check_common(header, "CVRP")
    try:
        capacity = int(_require(header, "CAPACITY"))
    except ValueError as exc:
        raise ParseError(f"CAPACITY is not an integer: {header['CAPACITY']!r}") from exc
    coords = None
    demands = None
    depot = None
    pos = 0
    while pos < len(body):
        lineno, line = body[pos]
        if line == "NODE_COORD_SECTION":
            coords, pos = _parse_coords(body, pos + 1, dimension)
        elif line == "DEMAND_SECTION":
            demands = np.zeros(dimension, dtype=np.int64)
            for row in range(dimension):
                lineno, entry = body[pos + 1 + row]
                parts = entry.split()
                if len(parts) != 2:
                    raise ParseError(f"line {lineno}: expected 'index demand', got {entry!r}")
                demands[int(parts[0]) - 1] = int(parts[1])
            pos += 1 + dimension
        elif line == "DEPOT_SECTION":
            pos += 1
            ids = []
            while pos < len(body) and body[pos][1] not in ("-1", "EOF"):
                ids.append(int(body[pos][1]))
                pos += 1
            if pos < len(body) and body[pos][1] == "-1":
                pos += 1
            if len(ids) != 1:
                raise UnsupportedFormatError(f"expected exactly one depot, got {ids}")
            depot = ids[0] - 1
        elif line == "EOF":
            pos += 1
        else:
            raise UnsupportedFormatError(f"line {lineno}: unsupported section {line!r}")
    if coords is None or demands is None or depot is None:
        raise ParseError("CVRP file needs NODE_COORD_SECTION, DEMAND_SECTION and DEPOT_SECTION")
    if depot != 0:
        order = [depot] + [i for i in range(dimension) if i != depot]
        coords = coords[order]
        demands = demands[order]
    if demands[0] != 0:
        warnings.warn(f"depot demand {demands[0]} normalized to 0")
        demands = demands.copy()
        demands[0] = 0
    inst = Instance(kind=ProblemKind.CVRP, coords=coords, metric=MetricKind.EUCLIDEAN,
                    demands=demands, capacity=capacity)
    return BenchmarkInstance(name=header.get("NAME", "unnamed"), instance=inst,
                             rounded=True, best_known=_best_known(header))


def parse_benchmark(path: str | Path) -> BenchmarkInstance:
    text = read_text(path)
    header, _ = _split_header(text)
    ftype = _require(header, "TYPE")
    if ftype == "TSP":
        return parse_tsplib(text)
    if ftype == "CVRP":
        return parse_cvrplib(text)
    raise UnsupportedFormatError(f"TYPE {ftype} not supported")


def to_benchmark_text(binst: BenchmarkInstance) -> str:
    """Serialize back to the supported subset (round-trip fixed point)."""
    inst = binst.instance
    lines = [f"NAME : {binst.name}",
             f"TYPE : {'TSP' if inst.kind == ProblemKind.TSP else 'CVRP'}",
             f"DIMENSION : {inst.n_nodes}",
             "EDGE_WEIGHT_TYPE : EUC_2D"]
    if binst.best_known is not None:
        lines.append(f"BEST_KNOWN : {format(binst.best_known, 'g')}")
    if inst.kind == ProblemKind.CVRP:
        lines.append(f"CAPACITY : {inst.capacity}")
    lines.append("NODE_COORD_SECTION")
    for i, (x, y) in enumerate(inst.coords, start=1):
        lines.append(f"{i} {format(x, '.17g')} {format(y, '.17g')}")
    if inst.kind == ProblemKind.CVRP:
        lines.append("DEMAND_SECTION")
        for i, d in enumerate(inst.demands, start=1):
            lines.append(f"{i} {int(d)}")
        lines.append("DEPOT_SECTION")
        lines.append("1")
        lines.append("-1")
    lines.append("EOF")
    return "\n".join(lines) + "\n"


def rounded_cost(sequence, inst: Instance) -> int:
    """Closed-tour cost under the TSPLIB convention: each Euclidean edge
    rounded half up to the nearest integer before summing."""
    seq = np.asarray(sequence, dtype=np.intp)
    nxt = np.roll(seq, -1)
    d = np.hypot(inst.coords[seq, 0] - inst.coords[nxt, 0],
                 inst.coords[seq, 1] - inst.coords[nxt, 1])
    return int(np.floor(d + 0.5).sum())


def benchmark_cost(binst: BenchmarkInstance, sequence) -> float:
    """Objective under the instance's declared convention."""
    if binst.rounded:
        return float(rounded_cost(sequence, binst.instance))
    return sequence_cost(sequence, binst.instance)


def normalized_instance(binst: BenchmarkInstance) -> Instance:
    """Network-facing copy: coordinates min-max scaled into [0,1]^2 with a
    single uniform factor, so relative distances are preserved for every
    metric.  Cost reporting always uses the raw coordinates."""
    inst = binst.instance
    lo = inst.coords.min(axis=0)
    span = float((inst.coords - lo).max())
    if span == 0.0:
        span = 1.0
    coords = (inst.coords - lo) / span
    return Instance(kind=inst.kind, coords=coords, metric=inst.metric,
                    demands=inst.demands, capacity=inst.capacity)


# ---------------------------------------------------------------------------
# results CSV
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ResultRecord:
    instance: str
    method: str
    metric: str
    objective: float
    gap: float
    seconds: float
    rounded: bool = False


def format_results(records: list[ResultRecord]) -> str:
    """Deterministic CSV: rows sorted by (instance, method, metric);
    rounded-mode objectives print as integers, synthetic with 3 decimals."""
    lines = ["instance,method,metric,objective,gap,seconds"]
    for r in sorted(records, key=lambda r: (r.instance, r.method, r.metric)):
        obj = f"{int(round(r.objective))}" if r.rounded else f"{r.objective:.3f}"
        lines.append(f"{r.instance},{r.method},{r.metric},{obj},{r.gap:.6f},{r.seconds:.3f}")
    return "\n".join(lines) + "\n"


def write_results(records: list[ResultRecord], path: str | Path) -> None:
    Path(path).write_text(format_results(records))


def read_results(path: str | Path) -> list[ResultRecord]:
    lines = Path(path).read_text().splitlines()
    out = []
    for line in lines[1:]:
        inst, method, metric, obj, gp, secs = line.split(",")
        out.append(ResultRecord(instance=inst, method=method, metric=metric,
                                objective=float(obj), gap=float(gp),
                                seconds=float(secs), rounded="." not in obj))
    return out

"""MATPOWER case parsing plus dataset and model file formats.

Dataset files are JSON lines: a header object followed by one object per
record. Model files are a single JSON document. Floats go through ``repr`` so
both formats round-trip bit-for-bit.
"""
from __future__ import annotations

import io
import json
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import CaseFormatError, DatasetFormatError, DimensionError, InputIOError, \
    InvalidDataError, ModelFormatError
from .grid import Branch, Bus, BusKind, Generator, GridCase, OperatingCondition, StateVector

DATASET_SCHEMA_VERSION = 1
MODEL_SCHEMA_VERSION = 1

DATA_DIR = Path(__file__).parent / "data"

_ASSIGN = re.compile(r"^\s*mpc\.(\w+)\s*=\s*(.*)$")
_MIN_COLS = {"bus": 13, "gen": 10, "branch": 11}


# ---------------------------------------------------------------- case files

def _parse_matrix_rows(chunks, name):
    rows = []
    for lineno, text in chunks:
        for seg in text.split(";"):
            seg = seg.strip()
            if not seg:
                continue
            try:
                rows.append((lineno, [float(tok) for tok in seg.replace(",", " ").split()]))
            except ValueError:
                raise CaseFormatError(f"non-numeric entry in mpc.{name}: {seg!r}", lineno) from None
    if not rows:
        return np.zeros((0, _MIN_COLS.get(name, 0))), []
    width = len(rows[0][1])
    for lineno, row in rows:
        if len(row) != width:
            raise CaseFormatError(f"mpc.{name} row has {len(row)} columns, expected {width}", lineno)
    if width < _MIN_COLS.get(name, 0):
        raise CaseFormatError(f"mpc.{name} needs at least {_MIN_COLS[name]} columns, got {width}", rows[0][0])
    return np.array([r for _, r in rows]), [ln for ln, _ in rows]


def _tokenize_case(text):
    """Split case text into {'baseMVA': (line, value), 'bus': (matrix, linenos), ...}."""
    sections = {}
    block = None  # (name, kind, start_line, chunks)
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("%", 1)[0]
        if block is not None:
            name, closer, start, chunks = block
            if closer in line:
                chunks.append((lineno, line.split(closer, 1)[0]))
                if closer == "]" and name in _MIN_COLS:
                    sections[name] = _parse_matrix_rows(chunks, name)
                block = None
            else:
                chunks.append((lineno, line))
            continue
        if not line.strip():
            continue
        m = _ASSIGN.match(line)
        if m is None:
            continue
        name, rest = m.group(1), m.group(2).strip()
        if name == "baseMVA":
            try:
                sections["baseMVA"] = (lineno, float(rest.rstrip(";").strip()))
            except ValueError:
                raise CaseFormatError(f"cannot read baseMVA from {rest!r}", lineno) from None
        elif rest.startswith("[") or rest.startswith("{"):
            closer = "]" if rest[0] == "[" else "}"
            body = rest[1:]
            if closer in body:
                chunks = [(lineno, body.split(closer, 1)[0])]
                if closer == "]" and name in _MIN_COLS:
                    sections[name] = _parse_matrix_rows(chunks, name)
            else:
                block = (name, closer, lineno, [(lineno, body)])
    if block is not None:
        raise CaseFormatError(f"unterminated mpc.{block[0]} block", block[2])
    for required in ("baseMVA", "bus", "gen", "branch"):
        if required not in sections:
            raise CaseFormatError(f"missing section mpc.{required}")
    return sections


def parse_case(text: str, name: str = "") -> GridCase:
    """Parse MATPOWER (version 2 layout) case text into a per-unit :class:`GridCase`.

    Out-of-service generators and branches are dropped, isolated buses (type 4)
    are removed together with their branches, and PV buses left without an
    in-service generator become PQ buses. Angles are converted to radians.
    """
    sec = _tokenize_case(text)
    base_line, base = sec["baseMVA"]
    if not base > 0:
        raise CaseFormatError("nonpositive baseMVA", base_line)
    bus_m, bus_lines = sec["bus"]
    gen_m, gen_lines = sec["gen"]
    br_m, br_lines = sec["branch"]

    ext_to_row = {}
    for k, row in enumerate(bus_m):
        ext = int(row[0])
        if ext in ext_to_row:
            raise CaseFormatError(f"duplicate bus id {ext}", bus_lines[k])
        if int(row[1]) not in (1, 2, 3, 4):
            raise CaseFormatError(f"unknown bus type {row[1]:g}", bus_lines[k])
        ext_to_row[ext] = k

    kept = [k for k, row in enumerate(bus_m) if int(row[1]) != 4]
    ext_to_idx = {int(bus_m[k, 0]): i for i, k in enumerate(kept)}

    gens_by_bus = {}
    for k, row in enumerate(gen_m):
        ext = int(row[0])
        if ext not in ext_to_row:
            raise CaseFormatError(f"generator references unknown bus {ext}", gen_lines[k])
        if row[7] <= 0 or ext not in ext_to_idx:
            continue
        gens_by_bus.setdefault(ext_to_idx[ext], []).append((k, row))

    buses = []
    n_slack = 0
    for i, k in enumerate(kept):
        row = bus_m[k]
        kind = BusKind(int(row[1]))
        if kind == BusKind.PV and i not in gens_by_bus:
            kind = BusKind.PQ
        if kind == BusKind.PQ and i in gens_by_bus:
            raise CaseFormatError(f"in-service generator on PQ bus {int(row[0])}",
                                  gen_lines[gens_by_bus[i][0][0]])
        if kind == BusKind.SLACK:
            n_slack += 1
            if n_slack > 1:
                raise CaseFormatError("multiple slack buses", bus_lines[k])
        v_set = None
        if kind != BusKind.PQ:
            v_set = float(gens_by_bus[i][0][1][5]) if i in gens_by_bus else float(row[7])
        buses.append(Bus(index=i, kind=kind, p_load=row[2] / base, q_load=row[3] / base,
                         g_shunt=row[4] / base, b_shunt=row[5] / base,
                         v_min=float(row[12]), v_max=float(row[11]), v_setpoint=v_set,
                         ext_id=int(row[0])))
    if n_slack == 0:
        raise CaseFormatError("zero slack buses")

    gens = []
    for i in sorted(gens_by_bus):
        for _, row in gens_by_bus[i]:
            gens.append(Generator(bus=i, p_set=row[1] / base, q_min=row[4] / base, q_max=row[3] / base,
                                  p_min=row[9] / base, p_max=row[8] / base, v_setpoint=float(row[5])))

    branches = []
    for k, row in enumerate(br_m):
        fe, te = int(row[0]), int(row[1])
        for ext in (fe, te):
            if ext not in ext_to_row:
                raise CaseFormatError(f"branch references unknown bus {ext}", br_lines[k])
        if row[10] <= 0 or fe not in ext_to_idx or te not in ext_to_idx:
            continue
        if row[2] == 0 and row[3] == 0:
            raise CaseFormatError(f"zero-impedance branch {fe}-{te}", br_lines[k])
        branches.append(Branch(from_bus=ext_to_idx[fe], to_bus=ext_to_idx[te], r=float(row[2]),
                               x=float(row[3]), b_charging=float(row[4]),
                               tap=float(row[8]) if row[8] != 0 else 1.0,
                               shift=math.radians(row[9]),
                               rating=row[5] / base if row[5] > 0 else None))
    try:
        return GridCase(base_mva=base, buses=buses, branches=branches, gens=gens, name=name)
    except InvalidDataError as exc:
        raise CaseFormatError(str(exc)) from exc


def load_case(path) -> GridCase:
    """Read a case file; bare names like ``case14`` or ``case14.m`` resolve to the bundled copies."""
    p = Path(path)
    bundled = DATA_DIR / f"{p.stem}.m"
    if not p.exists() and p.parent == Path(".") and p.suffix in ("", ".m") and bundled.exists():
        p = bundled
    try:
        text = p.read_text()
    except OSError as exc:
        raise InputIOError(f"cannot read case file {p}: {exc.strerror}") from exc
    return parse_case(text, name=p.stem)


# ---------------------------------------------------------------- datasets

@dataclass(frozen=True)
class DatasetRecord:
    condition: OperatingCondition
    label: StateVector
    split: str

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be 'train' or 'test', got {self.split!r}")


_RECORD_KEYS = ("split", "p_spec", "q_spec", "v_set", "v", "theta")


def _floats(a):
    return [float(x) for x in a]


def write_dataset(records: Sequence[DatasetRecord], header: dict, stream) -> None:
    """Write a header line then one JSON line per record to a text stream."""
    ns = {len(r.condition.p_spec) for r in records}
    for r in records:
        ns.update({len(r.condition.q_spec), len(r.condition.v_set), len(r.label.v), len(r.label.theta)})
    if len(ns) > 1:
        raise DimensionError(f"records have mixed dimensions {sorted(ns)}")
    head = dict(header)
    head["schema_version"] = DATASET_SCHEMA_VERSION
    if ns and head.get("n_bus") is not None and head["n_bus"] not in ns:
        raise DimensionError(f"header n_bus={head['n_bus']} but records have {ns.pop()} buses")
    stream.write(json.dumps(head, sort_keys=True, allow_nan=False) + "\n")
    for r in records:
        obj = {"split": r.split, "p_spec": _floats(r.condition.p_spec), "q_spec": _floats(r.condition.q_spec),
               "v_set": _floats(r.condition.v_set), "v": _floats(r.label.v), "theta": _floats(r.label.theta)}
        stream.write(json.dumps(obj, allow_nan=False) + "\n")


def read_dataset(stream):
    """Inverse of :func:`write_dataset`; returns ``(header, records)``."""
    lines = iter(stream)
    try:
        first = next(lines)
    except StopIteration:
        raise DatasetFormatError("empty dataset stream (no header)") from None
    try:
        header = json.loads(first)
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"line 1: malformed header: {exc.msg}") from None
    if not isinstance(header, dict):
        raise DatasetFormatError("line 1: header is not a JSON object")
    if header.get("schema_version") != DATASET_SCHEMA_VERSION:
        raise DatasetFormatError(f"schema version {header.get('schema_version')!r} "
                                 f"not supported (expected {DATASET_SCHEMA_VERSION})")
    n = header.get("n_bus")
    records = []
    for lineno, line in enumerate(lines, start=2):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(f"line {lineno}: malformed record: {exc.msg}") from None
        if not isinstance(obj, dict) or set(obj) != set(_RECORD_KEYS):
            got = len(obj) if isinstance(obj, dict) else "non-object"
            raise DatasetFormatError(f"line {lineno}: expected fields {list(_RECORD_KEYS)}, got {got}")
        arrays = {k: np.array(obj[k], dtype=float) for k in _RECORD_KEYS[1:]}
        for k, a in arrays.items():
            if a.ndim != 1 or (n is not None and len(a) != n):
                raise DimensionError(f"line {lineno}: field {k} has {a.size} entries, header declares n_bus={n}")
        try:
            records.append(DatasetRecord(
                condition=OperatingCondition(arrays["p_spec"], arrays["q_spec"], arrays["v_set"]),
                label=StateVector(arrays["v"], arrays["theta"]), split=obj["split"]))
        except ValueError as exc:
            raise DatasetFormatError(f"line {lineno}: {exc}") from None
    return header, records


def save_dataset(path, records, header):
    with open(path, "w") as fh:
        write_dataset(records, header, fh)


def load_dataset(path):
    try:
        fh = open(path)
    except OSError as exc:
        raise InputIOError(f"cannot read dataset {path}: {exc.strerror}") from exc
    with fh:
        return read_dataset(fh)


# ---------------------------------------------------------------- models

def model_to_dict(params) -> dict:
    return {
        "schema_version": MODEL_SCHEMA_VERSION,
        "case_name": params.case_name,
        "input_dim": params.input_dim,
        "output_dim": params.output_dim,
        "layer_shapes": [list(W.shape) for W in params.weights],
        "adapt_boundary": params.adapt_boundary,
        "weights": [{"W": [_floats(row) for row in W], "b": _floats(b)}
                    for W, b in zip(params.weights, params.biases)],
        "normalization_stats": {
            "input_mean": _floats(params.input_mean), "input_scale": _floats(params.input_scale),
            "output_mean": _floats(params.output_mean), "output_scale": _floats(params.output_scale),
        },
        "optimizer": params.optimizer,
    }


def model_from_dict(doc: dict):
    from .surrogate import SurrogateParams

    if not isinstance(doc, dict):
        raise ModelFormatError("model document is not a JSON object")
    if doc.get("schema_version") != MODEL_SCHEMA_VERSION:
        raise ModelFormatError(f"model schema version {doc.get('schema_version')!r} "
                               f"not supported (expected {MODEL_SCHEMA_VERSION})")
    try:
        shapes = [tuple(s) for s in doc["layer_shapes"]]
        weights = [np.array(layer["W"], dtype=float).reshape(-1, s[1]) if s[0] else np.zeros(s)
                   for layer, s in zip(doc["weights"], shapes)]
        biases = [np.array(layer["b"], dtype=float) for layer in doc["weights"]]
        stats = doc["normalization_stats"]
        arrays = {k: np.array(stats[k], dtype=float)
                  for k in ("input_mean", "input_scale", "output_mean", "output_scale")}
        input_dim, output_dim, boundary = doc["input_dim"], doc["output_dim"], doc["adapt_boundary"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"malformed model document: {exc}") from None
    if len(weights) != len(shapes):
        raise DimensionError(f"{len(shapes)} layer shapes but {len(weights)} weight blocks")
    for k, (W, b, s) in enumerate(zip(weights, biases, shapes)):
        if W.shape != s or b.shape != (s[0],):
            raise DimensionError(f"layer {k}: stored weights {W.shape}/{b.shape} disagree with shape {s}")
    for k in range(1, len(shapes)):
        if shapes[k][1] != shapes[k - 1][0]:
            raise DimensionError(f"layer {k} input {shapes[k][1]} does not chain to output {shapes[k - 1][0]}")
    if shapes and (shapes[0][1] != input_dim or shapes[-1][0] != output_dim):
        raise DimensionError("recorded input/output dims disagree with layer shapes")
    return SurrogateParams(weights=weights, biases=biases, adapt_boundary=boundary,
                           case_name=doc.get("case_name", ""), optimizer=doc.get("optimizer", {}), **arrays)


def save_model(params, stream) -> None:
    json.dump(model_to_dict(params), stream, allow_nan=False)
    stream.write("\n")


def load_model(stream):
    text = stream.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        if exc.pos >= len(text.rstrip()) - 1:
            raise ModelFormatError(f"model stream truncated at offset {exc.pos}") from None
        raise ModelFormatError(f"malformed model stream: {exc.msg} at offset {exc.pos}") from None
    return model_from_dict(doc)


def save_model_file(path, params):
    with open(path, "w") as fh:
        save_model(params, fh)


def load_model_file(path):
    try:
        fh = open(path)
    except OSError as exc:
        raise InputIOError(f"cannot read model {path}: {exc.strerror}") from exc
    with fh:
        return load_model(fh)


def dumps_dataset(records, header) -> str:
    buf = io.StringIO()
    write_dataset(records, header, buf)
    return buf.getvalue()

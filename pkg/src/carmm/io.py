"""CSV and JSON readers/writers for inputs, posterior draws and reports.

Floats are written with ``repr`` so every file reads back exactly. All
writes go through :func:`atomic_write`. Row numbers in error messages
count the header as row 1.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import tempfile
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import DataFormatError, ValidationError
from .model import compute_offsets

EDGE_HEADER = ("area_a", "area_b")
WEIGHT_HEADER = ("membership", "area", "weight")
MM_HEADER = ("membership", "y2", "E2")
AGE_HEADER = ("unit", "age_group", "rate", "population")
POSTERIOR_HEADER = ("chain", "iteration", "name", "value")
DERIVED_HEADER = ("chain", "iteration", "index", "value")
SUMMARY_HEADER = ("name", "mean", "se_mean", "sd", "q2.5", "q5", "q95", "q97.5", "rhat", "ess_bulk")
CLUSTER_HEADER = ("area", "outcome", "p_area", "p_locality", "category")
BIVARIATE_HEADER = ("area", "cell", "collapsed_label")
DERIVED_FILES = {
    "rho1": "rho1.csv",
    "zeta2_risk": "zeta2.csv",
    "rho2": "rho2.csv",
    "yrep1": "yrep1.csv",
    "yrep2": "yrep2.csv",
    "loglik": "loglik.csv",
}


# --------------------------------------------------------------------------
# low-level helpers


def atomic_write(path, text: str) -> None:
    """Write ``text`` to a temporary file beside ``path`` and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def fmt(x) -> str:
    """Lossless text for a number (ints stay ints, floats use ``repr``)."""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    return repr(float(x))


def csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    lines = [",".join(header)]
    lines.extend(",".join(r) for r in rows)
    return "\n".join(lines) + "\n"


def _read_rows(path, header: Sequence[str], prefix_only: bool = False):
    """Yield ``(row_number, fields, header)`` after checking the header line."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{path}: no such file")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            got = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataFormatError(path, "file is empty") from None
        expected = list(header)
        ok = got[: len(expected)] == expected if prefix_only else got == expected
        if not ok:
            raise DataFormatError(path, f"header must be {','.join(expected)}{',...' if prefix_only else ''}", 1)
        rows = []
        for k, fields in enumerate(reader, start=2):
            if not fields or all(not f.strip() for f in fields):
                continue
            if len(fields) != len(got):
                raise DataFormatError(path, f"expected {len(got)} fields, found {len(fields)}", k)
            rows.append((k, [f.strip() for f in fields]))
    return got, rows


def _int(path, row, text, what, minimum=0) -> int:
    try:
        value = int(text)
    except ValueError:
        raise DataFormatError(path, f"{what} {text!r} is not an integer", row) from None
    if value < minimum:
        raise DataFormatError(path, f"{what} {value} is below {minimum}", row)
    return value


def _float(path, row, text, what) -> float:
    try:
        value = float(text)
    except ValueError:
        raise DataFormatError(path, f"{what} {text!r} is not a number", row) from None
    if not math.isfinite(value):
        raise DataFormatError(path, f"{what} must be finite", row)
    return value


def _count(path, row, text, what) -> int:
    try:
        value = float(text)
    except ValueError:
        raise DataFormatError(path, f"{what} {text!r} is not a count", row) from None
    if not (math.isfinite(value) and value >= 0 and value == int(value)):
        raise DataFormatError(path, f"{what} {text!r} is not a nonnegative integer", row)
    return int(value)


def _dense_ids(path, ids: list[tuple[int, int]], label: str) -> np.ndarray:
    """Order for rows whose ids must be exactly ``0..N-1``."""
    seen = {}
    for row, i in ids:
        if i in seen:
            raise DataFormatError(path, f"{label} {i} repeats row {seen[i]}", row)
        seen[i] = row
    n = len(ids)
    for row, i in ids:
        if i >= n:
            raise DataFormatError(path, f"{label} {i} out of range: ids must run 0..{n - 1}", row)
    return np.argsort([i for _, i in ids])


# --------------------------------------------------------------------------
# model inputs


def read_edges(path) -> list[tuple[int, int]]:
    _, rows = _read_rows(path, EDGE_HEADER)
    edges = []
    for k, (a, b) in rows:
        i = _int(path, k, a, "area_a")
        j = _int(path, k, b, "area_b")
        if i == j:
            raise DataFormatError(path, f"self-loop on area {i}", k)
        edges.append((i, j))
    return edges


def write_edges(path, edges) -> None:
    atomic_write(path, csv_text(EDGE_HEADER, ((fmt(int(a)), fmt(int(b))) for a, b in edges)))


def read_weights(path) -> list[tuple[int, int, float]]:
    _, rows = _read_rows(path, WEIGHT_HEADER)
    out = []
    for k, (j, i, w) in rows:
        weight = _float(path, k, w, "weight")
        if weight < 0:
            raise DataFormatError(path, f"negative weight {weight!r}", k)
        out.append((_int(path, k, j, "membership"), _int(path, k, i, "area"), weight))
    return out


def write_weights(path, triplets) -> None:
    atomic_write(
        path, csv_text(WEIGHT_HEADER, ((fmt(int(j)), fmt(int(i)), fmt(float(w))) for j, i, w in triplets))
    )


def read_areal(path, offsets_required: bool = True):
    """Areal table ``area,y1,E1,x1..xp``; returns ``(y1, E1 or None, X or None)``.

    ``E1`` may be left out when offsets come from an age table.
    """
    header, rows = _read_rows(path, ("area", "y1"), prefix_only=True)
    has_e = len(header) > 2 and header[2] == "E1"
    xcols = header[3:] if has_e else header[2:]
    if offsets_required and not has_e:
        raise DataFormatError(path, "missing E1 column (or supply an age table)", 1)
    for c, name in enumerate(xcols, start=1):
        if name != f"x{c}":
            raise DataFormatError(path, f"covariate columns must be named x1..xp, found {name!r}", 1)
    if not rows:
        raise DataFormatError(path, "no data rows")
    ids, y, e, X = [], [], [], []
    for k, f in rows:
        ids.append((k, _int(path, k, f[0], "area")))
        y.append(_count(path, k, f[1], "y1"))
        if has_e:
            v = _float(path, k, f[2], "E1")
            if v <= 0:
                raise DataFormatError(path, f"offset E1 must be positive, got {v!r}", k)
            e.append(v)
        X.append([_float(path, k, t, name) for t, name in zip(f[3 if has_e else 2:], xcols)])
    order = _dense_ids(path, ids, "area")
    y1 = np.asarray(y, dtype=np.int64)[order]
    E1 = np.asarray(e, dtype=float)[order] if has_e else None
    Xa = np.asarray(X, dtype=float)[order] if xcols else None
    return y1, E1, Xa


def write_areal(path, y1, E1, X=None) -> None:
    p = 0 if X is None else X.shape[1]
    header = ["area", "y1", "E1"] + [f"x{c + 1}" for c in range(p)]
    rows = (
        [fmt(i), fmt(int(y1[i])), fmt(float(E1[i]))] + ([fmt(float(v)) for v in X[i]] if p else [])
        for i in range(len(y1))
    )
    atomic_write(path, csv_text(header, rows))


def read_mm(path, offsets_required: bool = True):
    """Membership table ``membership,y2,E2``; returns ``(y2, E2 or None)``."""
    header, rows = _read_rows(path, ("membership", "y2"), prefix_only=True)
    has_e = header == list(MM_HEADER)
    if header[2:] and not has_e:
        raise DataFormatError(path, f"header must be {','.join(MM_HEADER)}", 1)
    if offsets_required and not has_e:
        raise DataFormatError(path, "missing E2 column (or supply an age table)", 1)
    if not rows:
        raise DataFormatError(path, "no data rows")
    ids, y, e = [], [], []
    for k, f in rows:
        ids.append((k, _int(path, k, f[0], "membership")))
        y.append(_count(path, k, f[1], "y2"))
        if has_e:
            v = _float(path, k, f[2], "E2")
            if v <= 0:
                raise DataFormatError(path, f"offset E2 must be positive, got {v!r}", k)
            e.append(v)
    order = _dense_ids(path, ids, "membership")
    return np.asarray(y, dtype=np.int64)[order], (np.asarray(e, dtype=float)[order] if has_e else None)


def write_mm(path, y2, E2) -> None:
    rows = ([fmt(j), fmt(int(y2[j])), fmt(float(E2[j]))] for j in range(len(y2)))
    atomic_write(path, csv_text(MM_HEADER, rows))


def read_age_offsets(path, units: int) -> np.ndarray:
    """Expected counts per unit from an ``unit,age_group,rate,population`` table."""
    _, rows = _read_rows(path, AGE_HEADER)
    rates: dict[int, list] = {}
    pops: dict[int, list] = {}
    first_row: dict[int, int] = {}
    for k, (u, _group, r, pop) in rows:
        unit = _int(path, k, u, "unit")
        if unit >= units:
            raise DataFormatError(path, f"unit {unit} out of range 0..{units - 1}", k)
        rate = _float(path, k, r, "rate")
        if not 0 <= rate <= 1:
            raise DataFormatError(path, f"rate {rate!r} outside [0, 1]", k)
        population = _float(path, k, pop, "population")
        if population < 0:
            raise DataFormatError(path, f"negative population {population!r}", k)
        rates.setdefault(unit, []).append(rate)
        pops.setdefault(unit, []).append(population)
        first_row.setdefault(unit, k)
    out = np.empty(units)
    for unit in range(units):
        if unit not in rates:
            raise DataFormatError(path, f"no age groups for unit {unit}")
        try:
            out[unit] = compute_offsets(rates[unit], pops[unit])
        except ValidationError as exc:
            raise DataFormatError(path, f"unit {unit}: {exc}", first_row[unit]) from None
    return out


# --------------------------------------------------------------------------
# posterior draws


def write_posterior(path, draws: Mapping[str, np.ndarray]) -> None:
    """Long table of ``(chains, draws)`` arrays keyed by name."""
    rows = []
    for name, arr in draws.items():
        arr = np.asarray(arr, dtype=float)
        for c in range(arr.shape[0]):
            vals = arr[c].tolist()
            rows.extend(f"{c},{s},{name},{v!r}" for s, v in enumerate(vals))
    atomic_write(path, "\n".join((",".join(POSTERIOR_HEADER), *rows)) + "\n")


def read_posterior(path) -> dict[str, np.ndarray]:
    """Inverse of :func:`write_posterior`; names keep their first-seen order."""
    _, rows = _read_rows(path, POSTERIOR_HEADER)
    cells: dict[str, dict[tuple[int, int], float]] = {}
    for k, (c, s, name, v) in rows:
        key = (_int(path, k, c, "chain"), _int(path, k, s, "iteration"))
        try:
            value = float(v)
        except ValueError:
            raise DataFormatError(path, f"value {v!r} is not a number", k) from None
        cells.setdefault(name, {})[key] = value
    out = {}
    for name, d in cells.items():
        C = 1 + max(c for c, _ in d)
        S = 1 + max(s for _, s in d)
        if len(d) != C * S:
            raise DataFormatError(path, f"{name!r} does not cover a full chains x iterations grid")
        arr = np.empty((C, S))
        for (c, s), v in d.items():
            arr[c, s] = v
        out[name] = arr
    return out


def write_derived(path, arr: np.ndarray) -> None:
    """``(chains, draws, K)`` array as ``chain,iteration,index,value`` rows."""
    arr = np.asarray(arr)
    integer = np.issubdtype(arr.dtype, np.integer)
    rows = []
    for c in range(arr.shape[0]):
        for s in range(arr.shape[1]):
            vals = arr[c, s].tolist()
            if integer:
                rows.extend(f"{c},{s},{k},{v}" for k, v in enumerate(vals))
            else:
                rows.extend(f"{c},{s},{k},{v!r}" for k, v in enumerate(vals))
    atomic_write(path, "\n".join((",".join(DERIVED_HEADER), *rows)) + "\n")


def read_derived(path) -> np.ndarray:
    """Inverse of :func:`write_derived` (integer-valued files come back as int64)."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{path}: no such file")
    with open(path, encoding="utf-8") as fh:
        head = fh.readline().strip()
        if tuple(head.split(",")) != DERIVED_HEADER:
            raise DataFormatError(path, f"header must be {','.join(DERIVED_HEADER)}", 1)
        body = fh.read()
    if not body.strip():
        raise DataFormatError(path, "no data rows")
    try:
        table = np.loadtxt(body.splitlines(), delimiter=",", dtype=str, ndmin=2)
    except ValueError as exc:
        raise DataFormatError(path, str(exc)) from None
    if table.shape[1] != 4:
        raise DataFormatError(path, "expected 4 fields per row")
    idx = table[:, :3].astype(np.int64)
    vals = table[:, 3]
    try:
        values = vals.astype(np.int64)
    except ValueError:
        try:
            values = vals.astype(float)
        except ValueError as exc:
            raise DataFormatError(path, str(exc)) from None
    shape = tuple(int(v) + 1 for v in idx.max(axis=0))
    if len(values) != shape[0] * shape[1] * shape[2]:
        raise DataFormatError(path, "rows do not cover a full chains x iterations x index grid")
    out = np.zeros(shape, dtype=values.dtype)
    out[idx[:, 0], idx[:, 1], idx[:, 2]] = values
    return out


# --------------------------------------------------------------------------
# reports


def _summary_value(v) -> str:
    return fmt(v) if not isinstance(v, str) else v


def write_summary(path, report) -> None:
    rows = []
    for r in report.rows:
        d = r.as_dict()
        rows.append([d["name"]] + [_summary_value(d[h]) for h in SUMMARY_HEADER[1:]])
    atomic_write(path, csv_text(SUMMARY_HEADER, rows))


def read_summary(path) -> dict[str, dict[str, float]]:
    _, rows = _read_rows(path, SUMMARY_HEADER)
    out = {}
    for k, f in rows:
        try:
            out[f[0]] = {h: float(v) for h, v in zip(SUMMARY_HEADER[1:], f[1:])}
        except ValueError:
            raise DataFormatError(path, "non-numeric summary entry", k) from None
    return out


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def write_json(path, obj) -> None:
    atomic_write(path, json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def read_json(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{path}: no such file")
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataFormatError(path, f"invalid JSON ({exc.msg})", exc.lineno) from None


def write_clusters(path, report) -> None:
    rows = []
    for i in range(report.p_area.shape[1]):
        for o in range(2):
            rows.append([
                fmt(i), fmt(o + 1), fmt(float(report.p_area[o, i])),
                fmt(float(report.p_locality[o, i])), str(report.categories[o, i]),
            ])
    atomic_write(path, csv_text(CLUSTER_HEADER, rows))


def read_clusters(path) -> list[dict]:
    _, rows = _read_rows(path, CLUSTER_HEADER)
    return [
        {
            "area": _int(path, k, a, "area"), "outcome": _int(path, k, o, "outcome", 1),
            "p_area": _float(path, k, pa, "p_area"), "p_locality": _float(path, k, pl, "p_locality"),
            "category": c,
        }
        for k, (a, o, pa, pl, c) in rows
    ]


def write_bivariate(path, report) -> None:
    rows = ([fmt(i), str(cell), str(lab)] for i, (cell, lab) in enumerate(zip(report.cells, report.collapsed)))
    atomic_write(path, csv_text(BIVARIATE_HEADER, rows))


def read_bivariate(path) -> list[dict]:
    _, rows = _read_rows(path, BIVARIATE_HEADER)
    return [{"area": _int(path, k, a, "area"), "cell": c, "collapsed_label": lab} for k, (a, c, lab) in rows]


def geojson_join(boundaries_path, report, out_path) -> int:
    """Copy a boundary FeatureCollection, adding cluster properties by ``area`` id.

    Returns the number of features that matched an area.
    """
    gj = read_json(boundaries_path)
    if not isinstance(gj, dict) or gj.get("type") != "FeatureCollection":
        raise DataFormatError(boundaries_path, "expected a GeoJSON FeatureCollection")
    n = report.p_area.shape[1]
    matched = 0
    for k, feat in enumerate(gj.get("features", [])):
        props = feat.setdefault("properties", {}) or {}
        feat["properties"] = props
        area = props.get("area")
        if not isinstance(area, int) or isinstance(area, bool) or not 0 <= area < n:
            continue
        matched += 1
        for o in range(2):
            props[f"p_area_{o + 1}"] = float(report.p_area[o, area])
            props[f"p_locality_{o + 1}"] = float(report.p_locality[o, area])
            props[f"category_{o + 1}"] = str(report.categories[o, area])
        props["cell"] = str(report.cells[area])
        props["collapsed_label"] = str(report.collapsed[area])
    write_json(out_path, gj)
    return matched


def input_record(paths: Mapping[str, Optional[str]]) -> dict:
    """Path and content hash for each supplied input."""
    return {role: {"path": str(p), "sha256": file_sha256(p)} for role, p in sorted(paths.items()) if p}

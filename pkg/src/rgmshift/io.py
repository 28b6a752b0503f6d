"""File formats: graph datasets and point clouds as JSON lines, deterministic JSON/CSV writers."""
from __future__ import annotations

import csv
import io
import json
import math
import os
from pathlib import Path

import numpy as np

from ._validation import InvalidArgument
from .rgm import Graph
from .spectral import degree_bins
from .transport import PointCloud


def _clean(obj):
    """JSON-safe copy: numpy to python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dumps(obj):
    return json.dumps(_clean(obj), sort_keys=True, indent=2) + "\n"


def write_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(dumps(obj))


def write_text(path, text):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return "" if v is None else str(v)


def rows_to_csv(rows, columns=None):
    rows = list(rows)
    if columns is None:
        columns = list(rows[0].keys()) if rows else []
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    return buf.getvalue()


def write_csv(path, rows, columns=None):
    write_text(path, rows_to_csv(rows, columns))


# ---------------------------------------------------------------------------
# graphs


def graph_to_record(g: Graph):
    iu, ju = np.triu_indices(g.n)
    w = g.adjacency[iu, ju]
    keep = w != 0
    edges = [[int(i), int(j), float(x)] for i, j, x in zip(iu[keep], ju[keep], w[keep])]
    rec = {"n": g.n, "edges": edges, "features": g.signals.tolist(), "label": int(g.label),
           "binary": bool(g.binary)}
    if g.latents is not None:
        rec["latents"] = g.latents.tolist()
    return rec


def record_to_graph(rec, line_no=None, degree_feature_bins=None):
    where = f" (line {line_no})" if line_no is not None else ""
    try:
        n = int(rec["n"])
        A = np.zeros((n, n))
        seen = {}
        for e in rec.get("edges", []):
            i, j, w = int(e[0]), int(e[1]), float(e[2]) if len(e) > 2 else 1.0
            if not (0 <= i < n and 0 <= j < n):
                raise InvalidArgument(f"edge ({i},{j}) out of range{where}")
            a, b = min(i, j), max(i, j)
            if (a, b) in seen and seen[(a, b)] != w:
                raise InvalidArgument(f"asymmetric edge weights for ({a},{b}){where}")
            seen[(a, b)] = w
            A[a, b] = A[b, a] = w
        feats = rec.get("features")
        if feats is None or len(feats) == 0:
            if degree_feature_bins is None:
                raise InvalidArgument(f"graph has no features{where}; request degree binning")
            deg = (A != 0).sum(axis=1) - (np.diag(A) != 0)
            idx = degree_bins(deg, degree_feature_bins, 0, max(n - 1, 1))
            feats = np.eye(degree_feature_bins)[idx]
        return Graph(n, A, np.asarray(feats, dtype=float).reshape(n, -1),
                     None if rec.get("latents") is None else np.asarray(rec["latents"], dtype=float),
                     int(rec.get("label", 0)), bool(rec.get("binary", False)))
    except InvalidArgument:
        raise
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise InvalidArgument(f"malformed graph record{where}: {exc}") from exc


def write_dataset(path, graphs):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for g in graphs:
            fh.write(json.dumps(graph_to_record(g), sort_keys=True) + "\n")


def ingest_dataset(path, degree_feature_bins=None):
    """Read a JSON-lines graph file; blank lines are skipped."""
    out = []
    with open(path) as fh:
        for k, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InvalidArgument(f"invalid JSON on line {k}: {exc}") from exc
            out.append(record_to_graph(rec, k, degree_feature_bins))
    return out


# ---------------------------------------------------------------------------
# clouds


def write_clouds(path, clouds):
    """``clouds`` maps class -> PointCloud (or a list of (class, PointCloud))."""
    items = clouds.items() if isinstance(clouds, dict) else clouds
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for c, pc in items:
            fh.write(json.dumps({"points": pc.points.tolist(), "weights": pc.weights.tolist(),
                                 "class": _clean(c)}, sort_keys=True) + "\n")


def read_clouds(path):
    out = {}
    with open(path) as fh:
        for k, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                pc = PointCloud(np.asarray(rec["points"], dtype=float), rec.get("weights"))
                c = rec["class"]
            except (KeyError, ValueError, TypeError) as exc:
                raise InvalidArgument(f"malformed cloud on line {k}: {exc}") from exc
            if c in out:
                raise InvalidArgument(f"duplicate class {c!r} on line {k}")
            out[c] = pc
    return out


def thread_cap(default=1):
    raw = os.environ.get("RGMSHIFT_THREADS")
    if raw is None or raw == "":
        return default
    try:
        v = int(raw)
    except ValueError as exc:
        raise InvalidArgument(f"RGMSHIFT_THREADS must be an integer, got {raw!r}") from exc
    if v < 1:
        raise InvalidArgument("RGMSHIFT_THREADS must be >= 1")
    return v

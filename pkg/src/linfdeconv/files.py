"""Model / filter / report file handling.

Model and filter files are JSON documents with named matrices as row-major
nested arrays; parsers reject unknown keys so typos fail loudly instead of
silently dropping data.  Reports are JSON with full-precision floats, and
every write is atomic (temp file + rename).
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from importlib import resources

import numpy as np

from .model import DeconvolutionFilter, PolytopicModel, StochasticLtiSystem

__all__ = [
    "ModelFileError",
    "load_model",
    "load_filter",
    "save_filter",
    "write_report",
    "write_csv",
    "filter_fingerprint",
    "builtin_model_names",
]

MATRIX_KEYS = ("A", "B1", "C1", "C2", "D11", "D2", "G1", "G2")
MODEL_KEYS = {"name", "description", "dims", "vertices", "fault_direction", *MATRIX_KEYS}
VERTEX_KEYS = set(MATRIX_KEYS)
FILTER_KEYS = {"name", "Af", "Bf", "Cf", "Df"}
DIM_KEYS = {"n", "q", "r", "m"}


class ModelFileError(ValueError):
    """A model or filter document violates the schema."""


def _reject_unknown(doc: dict, allowed: set, where: str):
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ModelFileError(f"unknown keys in {where}: {', '.join(unknown)}")


def _vertex_from(doc: dict, where: str) -> StochasticLtiSystem:
    _reject_unknown(doc, VERTEX_KEYS, where)
    missing = [k for k in MATRIX_KEYS if k not in doc]
    if missing:
        raise ModelFileError(f"{where} is missing matrices: {', '.join(missing)}")
    try:
        return StochasticLtiSystem(**{k: np.asarray(doc[k], dtype=float) for k in MATRIX_KEYS})
    except (TypeError, ValueError) as exc:
        raise ModelFileError(f"{where}: {exc}") from exc


def _resolve(path_or_name: str) -> str:
    if os.path.exists(path_or_name):
        return path_or_name
    builtin = resources.files("linfdeconv").joinpath(f"data/{path_or_name}.json")
    if builtin.is_file():
        return str(builtin)
    raise FileNotFoundError(
        f"model {path_or_name!r}: not a file and not one of the built-ins "
        f"({', '.join(builtin_model_names())})"
    )


def builtin_model_names() -> list[str]:
    data = resources.files("linfdeconv").joinpath("data")
    return sorted(p.name[:-5] for p in data.iterdir() if p.name.endswith(".json"))


def load_model(path_or_name: str):
    """Read a model document; returns (PolytopicModel, fault_direction|None).

    Accepts a path or a built-in name.  The document carries dims, either a
    vertex list or one set of top-level matrices, and optionally the fault
    direction matrix enabling the reconstruction pipeline.
    """
    path = _resolve(path_or_name)
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ModelFileError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ModelFileError(f"{path}: top level must be an object")
    _reject_unknown(doc, MODEL_KEYS, "model document")
    if "dims" not in doc:
        raise ModelFileError("model document is missing dims")
    _reject_unknown(doc["dims"], DIM_KEYS, "dims")
    dims = tuple(int(doc["dims"][k]) for k in ("n", "q", "r", "m"))

    has_vertices = "vertices" in doc
    has_inline = any(k in doc for k in MATRIX_KEYS)
    if has_vertices and has_inline:
        raise ModelFileError("give either a vertex list or top-level matrices, not both")
    if has_vertices:
        verts = [
            _vertex_from(v, f"vertex {i}") for i, v in enumerate(doc["vertices"])
        ]
    elif has_inline:
        verts = [_vertex_from({k: doc[k] for k in MATRIX_KEYS if k in doc}, "model")]
    else:
        raise ModelFileError("model document has neither vertices nor matrices")
    model = PolytopicModel(tuple(verts))
    if model.dims != dims:
        raise ModelFileError(
            f"declared dims {dims} do not match matrices {model.dims}"
        )
    F = None
    if "fault_direction" in doc:
        F = np.asarray(doc["fault_direction"], dtype=float)
    return model, F


def load_filter(path: str) -> DeconvolutionFilter:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ModelFileError(f"{path}: not valid JSON ({exc})") from exc
    _reject_unknown(doc, FILTER_KEYS, "filter document")
    missing = [k for k in ("Af", "Bf", "Cf", "Df") if k not in doc]
    if missing:
        raise ModelFileError(f"filter document is missing: {', '.join(missing)}")
    try:
        return DeconvolutionFilter(
            Af=np.asarray(doc["Af"], dtype=float),
            Bf=np.asarray(doc["Bf"], dtype=float),
            Cf=np.asarray(doc["Cf"], dtype=float),
            Df=np.asarray(doc["Df"], dtype=float),
        )
    except (TypeError, ValueError) as exc:
        raise ModelFileError(f"filter document: {exc}") from exc


def _atomic_write(path: str, text: str):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", text=True)
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def save_filter(path: str, filt: DeconvolutionFilter, name: str | None = None):
    doc = {
        "Af": filt.Af.tolist(),
        "Bf": filt.Bf.tolist(),
        "Cf": filt.Cf.tolist(),
        "Df": filt.Df.tolist(),
    }
    if name:
        doc = {"name": name, **doc}
    _atomic_write(path, json.dumps(doc, indent=2) + "\n")


def write_report(path: str, payload: dict, timestamp: str):
    """JSON report: the timestamp is the only run-dependent line."""
    doc = {"generated_at": timestamp, **_jsonable(payload)}
    _atomic_write(path, json.dumps(doc, indent=2) + "\n")


def write_csv(path: str, header_lines: list[str], columns: dict):
    """CSV with leading comment lines; columns is name -> 1-D array."""
    names = list(columns)
    arrays = [np.asarray(columns[n]).ravel() for n in names]
    length = len(arrays[0])
    if any(len(a) != length for a in arrays):
        raise ValueError("columns must share a length")
    lines = [f"# {h}" for h in header_lines]
    lines.append(",".join(names))
    for i in range(length):
        lines.append(",".join(repr(float(a[i])) for a in arrays))
    _atomic_write(path, "\n".join(lines) + "\n")


def filter_fingerprint(filt: DeconvolutionFilter) -> str:
    """Short stable hash of the filter matrices, for traceable outputs."""
    blob = json.dumps(
        [filt.Af.tolist(), filt.Bf.tolist(), filt.Cf.tolist(), filt.Df.tolist()]
    ).encode()
    return hashlib.sha256(blob).hexdigest()[:12]

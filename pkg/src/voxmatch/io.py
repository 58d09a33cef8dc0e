"""Voxel file formats and ground-truth sidecar files.

Two voxel formats are read and written:

``txt``
    one ``x y z`` integer triple per line; blank lines and ``#`` comments
    are skipped.
``csv``
    a header line ``x,y,z`` followed by one comma separated triple per row.

Files written here are canonical (one voxel per line, input order kept), so
loading a saved file and saving it again reproduces it byte for byte.
"""

from __future__ import annotations

import csv
import json
import warnings
from pathlib import Path

import numpy as np

from .errors import DuplicateWarning, ParseError
from .graph import VoxelSet
from .synth import GroundTruth

FORMATS = ("txt", "csv")


def detect_format(path):
    suffix = Path(path).suffix.lower()
    return "csv" if suffix == ".csv" else "txt"


def _parse_int(token, lineno, path):
    try:
        value = float(token)
    except ValueError:
        raise ParseError(f"not a number: {token!r}", line=lineno, path=path) from None
    if not np.isfinite(value) or value != int(value):
        raise ParseError(f"not an integer coordinate: {token!r}", line=lineno, path=path)
    return int(value)


def _read_txt(path):
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            tokens = text.split()
            if len(tokens) != 3:
                raise ParseError(f"expected 3 values, got {len(tokens)}", line=lineno, path=path)
            rows.append([_parse_int(t, lineno, path) for t in tokens])
    return rows


def _read_csv(path):
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError("missing header x,y,z", line=1, path=path)
        if [h.strip().lower() for h in header] != ["x", "y", "z"]:
            raise ParseError(f"header must be x,y,z, got {','.join(header)!r}", line=1, path=path)
        for record in reader:
            lineno = reader.line_num
            if not record or all(not f.strip() for f in record):
                continue
            if len(record) != 3:
                raise ParseError(f"expected 3 fields, got {len(record)}", line=lineno, path=path)
            rows.append([_parse_int(f.strip(), lineno, path) for f in record])
    return rows


def load_voxels(path, fmt=None):
    """Read a voxel file, dropping repeated coordinates (first occurrence kept).

    Raises
    ------
    ParseError
        On malformed content, with the offending line number.
    EmptyInput
        If the file holds no voxel.

    Warns
    -----
    DuplicateWarning
        When repeated coordinates were dropped; the message gives the count.
    """
    fmt = fmt or detect_format(path)
    if fmt not in FORMATS:
        raise ValueError(f"unknown voxel format {fmt!r}; choose from {FORMATS}")
    rows = _read_txt(path) if fmt == "txt" else _read_csv(path)
    pts = np.array(rows, dtype=np.int64).reshape(-1, 3)
    voxels = VoxelSet.from_points(pts)
    n_dup = len(pts) - len(voxels)
    if n_dup:
        warnings.warn(f"{path}: dropped {n_dup} duplicate voxel(s)", DuplicateWarning, stacklevel=2)
    return voxels


def save_voxels(voxels, path, fmt=None):
    fmt = fmt or detect_format(path)
    if fmt not in FORMATS:
        raise ValueError(f"unknown voxel format {fmt!r}; choose from {FORMATS}")
    pts = voxels.points if isinstance(voxels, VoxelSet) else np.asarray(voxels, dtype=np.int64)
    sep = "," if fmt == "csv" else " "
    with open(path, "w", newline="") as fh:
        if fmt == "csv":
            fh.write("x,y,z\n")
        for x, y, z in pts.tolist():
            fh.write(f"{x}{sep}{y}{sep}{z}\n")


def truth_path(voxel_path):
    """Sidecar ground-truth path for a voxel file: ``shape.txt`` -> ``shape.truth.json``."""
    p = Path(voxel_path)
    return p.with_name(p.stem + ".truth.json")


def save_truth(truth, path):
    """Write per-voxel part and arc-length labels as JSON (voxel order of the shape file)."""
    doc = {
        "part_names": list(truth.part_names),
        "part_parents": [-1 if p is None else int(p) for p in truth.part_parents],
        "part": truth.part.tolist(),
        "arclength": [float(f"{s:.12g}") for s in truth.arclength],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_truth(path):
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"bad ground-truth JSON: {exc.msg}", line=exc.lineno, path=path) from None
    try:
        part = np.asarray(doc["part"], dtype=np.int64)
        arclength = np.asarray(doc["arclength"], dtype=float)
        names = tuple(doc["part_names"])
        parents = tuple(None if int(p) < 0 else int(p) for p in doc["part_parents"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"incomplete ground-truth file: {exc}", path=path) from None
    if part.shape != arclength.shape:
        raise ParseError("part and arclength lengths differ", path=path)
    return GroundTruth(part=part, arclength=arclength, part_names=names, part_parents=parents)

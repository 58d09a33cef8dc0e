"""Correspondence records and their scoring against synthetic ground truth."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass

import numpy as np

from .errors import MissingTruth, ParseError

LABELS = ("matched", "outlier", "unmatched")
CSV_HEADER = ("source_index", "target_index", "confidence", "label")


@dataclass(frozen=True)
class CorrespondenceRecord:
    """One row of the correspondence file.

    ``source_index`` indexes voxels of shape X and ``target_index`` voxels
    of shape Y, both in input file order; ``-1`` marks the missing side of
    an outlier or unmatched record.
    """

    source_index: int
    target_index: int
    confidence: float
    label: str

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValueError(f"label must be one of {LABELS}, got {self.label!r}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        if self.label == "matched" and (self.source_index < 0 or self.target_index < 0):
            raise ValueError("a matched record needs both indices")


def build_records(result, graph_x, graph_y, n_voxels_x, n_voxels_y):
    """Turn a registration result into per-voxel correspondence records.

    Every voxel of X yields one record: ``matched`` with its most probable
    cluster, or ``outlier`` when the uniform class wins. Every cluster of Y
    with too little posterior mass yields an ``unmatched`` record. Voxels
    dropped by the connected-component step are reported as outliers (X,
    confidence 1) or unmatched (Y, confidence 0).
    """
    records = []
    node_of_voxel = np.full(n_voxels_x, -1, dtype=np.int64)
    node_of_voxel[graph_x.node_index] = np.arange(len(graph_x.node_index))
    outlier = result.is_outlier
    for v in range(n_voxels_x):
        n = node_of_voxel[v]
        if n < 0:
            records.append(CorrespondenceRecord(v, -1, 1.0, "outlier"))
        elif outlier[n]:
            conf = float(np.clip(result.outlier_posterior[n], 0.0, 1.0))
            records.append(CorrespondenceRecord(v, -1, conf, "outlier"))
        else:
            target = int(graph_y.node_index[result.best_cluster[n]])
            conf = float(np.clip(result.best_posterior[n], 0.0, 1.0))
            records.append(CorrespondenceRecord(v, target, conf, "matched"))

    cluster_of_voxel = np.full(n_voxels_y, -1, dtype=np.int64)
    cluster_of_voxel[graph_y.node_index] = np.arange(len(graph_y.node_index))
    for v in range(n_voxels_y):
        m = cluster_of_voxel[v]
        if m < 0:
            records.append(CorrespondenceRecord(-1, v, 0.0, "unmatched"))
        elif not result.matched[m]:
            conf = float(np.clip(result.cluster_max_posterior[m], 0.0, 1.0))
            records.append(CorrespondenceRecord(-1, v, conf, "unmatched"))
    return records


def write_records(records, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in records:
            writer.writerow((r.source_index, r.target_index, f"{r.confidence:.10g}", r.label))


def read_records(path):
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
            raise ParseError(f"header must be {','.join(CSV_HEADER)}", line=1, path=path)
        for row in reader:
            if not row:
                continue
            try:
                src, tgt, conf, label = row
                records.append(CorrespondenceRecord(int(src), int(tgt), float(conf), label.strip()))
            except ValueError as exc:
                raise ParseError(str(exc), line=reader.line_num, path=path) from None
    return records


@dataclass(frozen=True)
class Metrics:
    accuracy: float | None
    accuracy_defined: bool
    n_matched: int
    n_correct: int
    n_outliers: int
    n_unmatched: int
    grey_count: int
    iterations: int | None = None
    elapsed_s: float | None = None

    def to_dict(self):
        return asdict(self)


def evaluate(records, truth_x, truth_y, radius_r=2.0, iterations=None, elapsed_s=None):
    """Score correspondence records against per-voxel ground truth.

    A matched record is correct when its two voxels lie on the same part or
    on directly joined parts and their arc-length coordinates differ by at
    most ``radius_r`` voxels. The grey count is the number of outlier plus
    unmatched records. ``accuracy`` is None when nothing was matched.

    Raises
    ------
    MissingTruth
        If either ground truth is absent or does not cover the indices used.
    """
    if truth_x is None or truth_y is None:
        raise MissingTruth("ground truth is required for both shapes")
    src = np.array([r.source_index for r in records if r.label == "matched"], dtype=np.int64)
    tgt = np.array([r.target_index for r in records if r.label == "matched"], dtype=np.int64)
    n_out = sum(r.label == "outlier" for r in records)
    n_unm = sum(r.label == "unmatched" for r in records)
    if len(src) and (src.max() >= len(truth_x.part) or tgt.max() >= len(truth_y.part)):
        raise MissingTruth("ground truth does not cover every matched voxel")

    if len(src):
        # parts are identified by name; a Y part unknown to X never matches
        lookup = {name: i for i, name in enumerate(truth_x.part_names)}
        y_as_x = np.array([lookup.get(name, -1) for name in truth_y.part_names], dtype=np.int64)
        py = y_as_x[truth_y.part[tgt]]
        known = py >= 0
        same = np.zeros(len(src), dtype=bool)
        same[known] = truth_x.compatible(truth_x.part[src][known], py[known])
        close = np.abs(truth_x.arclength[src] - truth_y.arclength[tgt]) <= radius_r
        n_correct = int(np.sum(same & close))
        accuracy = n_correct / len(src)
    else:
        n_correct, accuracy = 0, None
    return Metrics(
        accuracy=accuracy,
        accuracy_defined=accuracy is not None,
        n_matched=int(len(src)),
        n_correct=n_correct,
        n_outliers=int(n_out),
        n_unmatched=int(n_unm),
        grey_count=int(n_out + n_unm),
        iterations=iterations,
        elapsed_s=elapsed_s,
    )

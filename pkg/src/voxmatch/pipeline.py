"""End-to-end matching: voxels -> graphs -> embeddings -> alignment -> EM.

Each stage failure is re-raised as :class:`PipelineError` naming the stage.
Embedding columns have unit norm, so their entries shrink like
``1/sqrt(n)``; both embeddings are rescaled by ``sqrt(n)`` (unit mean square
per column) before registration so that default EM settings do not depend
on shape size.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .align import AlignConfig, align_eigenfunctions
from .embedding import DEFAULT_K, embed
from .errors import ParseError, PipelineError
from .evaluate import build_records, evaluate, write_records
from .graph import GraphConfig, VoxelSet, build_graph
from .io import load_truth, load_voxels, truth_path
from .em import EMConfig, run_em

logger = logging.getLogger(__name__)

_SECTIONS = {"graph": GraphConfig, "align": AlignConfig, "em": EMConfig}
_GREY = (160, 160, 160)


@dataclass(frozen=True)
class MatchConfig:
    graph: GraphConfig = field(default_factory=GraphConfig)
    align: AlignConfig = field(default_factory=AlignConfig)
    em: EMConfig = field(default_factory=EMConfig)
    k_request: int = DEFAULT_K
    seed: int = 0
    radius_r: float = 2.0

    def to_dict(self):
        return dataclasses.asdict(self)


def _convert(text, default):
    text = text.strip()
    if isinstance(default, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if default is None:
        return None if text.lower() in ("", "none") else float(text)
    if isinstance(default, int):
        try:
            return int(text)
        except ValueError:
            return text  # e.g. connectivity "radius:2"
    if isinstance(default, float):
        return float(text)
    return text


def config_from_mapping(values, base=None):
    """Apply ``{"section.key": "text"}`` overrides to a :class:`MatchConfig`.

    Keys may name a section (``em.pi_out``) or be bare when the name is
    unique across sections (``pi_out``).
    """
    base = base or MatchConfig()
    sections = {name: dataclasses.asdict(getattr(base, name)) for name in _SECTIONS}
    top = {f.name: getattr(base, f.name) for f in dataclasses.fields(MatchConfig) if f.name not in _SECTIONS}
    for key, text in values.items():
        if "." in key:
            sec, name = key.split(".", 1)
            if sec not in sections or name not in sections[sec]:
                raise KeyError(f"unknown config key {key!r}")
            sections[sec][name] = _convert(text, getattr(getattr(base, sec), name))
        elif key in top:
            top[key] = _convert(text, getattr(base, key))
        else:
            owners = [s for s in sections if key in sections[s]]
            if len(owners) != 1:
                raise KeyError(f"unknown or ambiguous config key {key!r}")
            sections[owners[0]][key] = _convert(text, getattr(getattr(base, owners[0]), key))
    built = {name: cls(**sections[name]) for name, cls in _SECTIONS.items()}
    return MatchConfig(**built, **top)


def load_config(path, base=None):
    """Read a ``key = value`` text file (``#`` starts a comment)."""
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ParseError("expected key = value", line=lineno, path=path)
            key, value = (t.strip() for t in text.split("=", 1))
            values[key] = value
    try:
        return config_from_mapping(values, base)
    except (KeyError, ValueError) as exc:
        raise ParseError(str(exc), path=path) from None


@dataclass
class PipelineResult:
    registration: object
    records: list
    report: dict
    alignment: object = None
    graphs: tuple = ()
    embeddings: tuple = ()
    voxels: tuple = ()
    metrics: object = None


class _Stages:
    def __init__(self):
        self.timings = {}

    def run(self, name, fn, *args, **kwargs):
        start = time.perf_counter()
        try:
            out = fn(*args, **kwargs)
        except PipelineError:
            raise
        except Exception as exc:
            raise PipelineError(name, exc) from exc
        self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - start
        return out


def registration_coordinates(emb):
    coords = np.asarray(getattr(emb, "coordinates", emb), dtype=float)
    return coords * np.sqrt(coords.shape[0])


def match_embeddings(coords_x, coords_y, config=None, stages=None):
    """Align two embeddings and register them; returns ``(alignment, result)``."""
    config = config or MatchConfig()
    stages = stages or _Stages()
    alignment = stages.run("align", align_eigenfunctions, coords_x, coords_y, config.align)
    x, y = alignment.select(registration_coordinates(coords_x), registration_coordinates(coords_y))
    result = stages.run("em", run_em, x, y, alignment.initial_rotation, config.em)
    return alignment, result


def match_voxels(voxels_x, voxels_y, config=None, truth_x=None, truth_y=None):
    """Run the full pipeline on two voxel sets held in memory."""
    config = config or MatchConfig()
    stages = _Stages()
    gx = stages.run("graph", build_graph, voxels_x, config.graph)
    gy = stages.run("graph", build_graph, voxels_y, config.graph)
    ex = stages.run("embed", embed, gx, config.k_request, seed=config.seed)
    ey = stages.run("embed", embed, gy, config.k_request, seed=config.seed)
    alignment, result = match_embeddings(ex, ey, config, stages)
    records = build_records(result, gx, gy, len(voxels_x), len(voxels_y))

    metrics = None
    if truth_x is not None and truth_y is not None:
        metrics = stages.run(
            "evaluate", evaluate, records, truth_x, truth_y, config.radius_r, result.iterations
        )
    report = _report(config, voxels_x, voxels_y, gx, gy, ex, alignment, result, records, stages.timings)
    if metrics is not None:
        metrics = dataclasses.replace(metrics, elapsed_s=report["timings_s"]["total"])
        report["metrics"] = metrics.to_dict()
    return PipelineResult(
        registration=result,
        records=records,
        report=report,
        alignment=alignment,
        graphs=(gx, gy),
        embeddings=(ex, ey),
        voxels=(voxels_x, voxels_y),
        metrics=metrics,
    )


def _report(config, vx, vy, gx, gy, ex, alignment, result, records, timings):
    labels = [r.label for r in records]
    timings = {k: round(v, 4) for k, v in timings.items()}
    timings["total"] = round(sum(timings.values()), 4)
    return {
        "config": config.to_dict(),
        "n_voxels": [len(vx), len(vy)],
        "n_nodes": [gx.n_nodes, gy.n_nodes],
        "n_dropped": [gx.n_dropped, gy.n_dropped],
        "nu": [gx.nu, gy.nu],
        "k_request": ex.k,
        "retained_k": alignment.retained_k,
        "pairs": [dataclasses.asdict(p) for p in alignment.pairs],
        "initial_rotation": alignment.initial_rotation.tolist(),
        "rotation": result.params.rotation.tolist(),
        "iterations": int(result.iterations),
        "converged": bool(result.converged),
        "log_likelihood_trace": [float(v) for v in result.log_likelihood_trace],
        "n_matched": labels.count("matched"),
        "n_outliers": labels.count("outlier"),
        "n_unmatched": labels.count("unmatched"),
        "grey_count": labels.count("outlier") + labels.count("unmatched"),
        "timings_s": timings,
    }


def match_pipeline(path_x, path_y, config=None, out_dir=None, prefix="match", ply=False,
                   figures=False, use_truth=True):
    """Match two voxel files and write the correspondence CSV and JSON report.

    Outputs go to ``out_dir`` as ``<prefix>_correspondences.csv`` and
    ``<prefix>_report.json``, plus ``<prefix>.ply`` with ``ply`` and PNG
    figures with ``figures``. Ground-truth sidecar files found next to the
    inputs are used for scoring when ``use_truth`` is set.
    """
    config = config or MatchConfig()
    stages = _Stages()
    vx = stages.run("load", load_voxels, path_x)
    vy = stages.run("load", load_voxels, path_y)
    tx = ty = None
    if use_truth and truth_path(path_x).exists() and truth_path(path_y).exists():
        tx = stages.run("load", load_truth, truth_path(path_x))
        ty = stages.run("load", load_truth, truth_path(path_y))
    out = match_voxels(vx, vy, config, tx, ty)
    out.report["inputs"] = [str(path_x), str(path_y)]
    out.report["timings_s"]["load"] = round(stages.timings.get("load", 0.0), 4)

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        stages.run("write", write_records, out.records, out_dir / f"{prefix}_correspondences.csv")
        if ply:
            stages.run("write", write_ply, out, out_dir / f"{prefix}.ply")
        if figures:
            from .plotting import render_report_figures

            out.report["figures"] = stages.run("plot", render_report_figures, out, out_dir, prefix)
        with open(out_dir / f"{prefix}_report.json", "w") as fh:
            json.dump(out.report, fh, indent=2)
            fh.write("\n")
    return out


def pair_colors(points):
    """RGB colours from normalized positions; used to tint matched pairs alike."""
    pts = np.asarray(points, dtype=float)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    return (40 + 215 * (pts - lo) / span).astype(int)


def write_ply(out, path, gap=5):
    """ASCII PLY with both shapes side by side; matched pairs share a colour, grey otherwise."""
    vx, vy = out.voxels
    px = np.asarray(vx.points if isinstance(vx, VoxelSet) else vx)
    py = np.asarray(vy.points if isinstance(vy, VoxelSet) else vy)
    colors_y = pair_colors(py)
    cx = np.tile(np.array(_GREY), (len(px), 1))
    cy = np.tile(np.array(_GREY), (len(py), 1))
    used = np.zeros(len(py), dtype=bool)
    for r in out.records:
        if r.label == "matched":
            cx[r.source_index] = colors_y[r.target_index]
            used[r.target_index] = True
    cy[used] = colors_y[used]
    shift = np.array([px[:, 0].max() - py[:, 0].min() + gap, 0, 0])
    pts = np.vstack([px, py + shift])
    cols = np.vstack([cx, cy])
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(pts)}\n")
        fh.write("property int x\nproperty int y\nproperty int z\n")
        fh.write("property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n")
        for (a, b, c), (r, g, bl) in zip(pts.tolist(), cols.tolist()):
            fh.write(f"{a} {b} {c} {r} {g} {bl}\n")

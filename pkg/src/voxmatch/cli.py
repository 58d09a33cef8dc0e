"""Command-line interface: ``voxmatch {synth,embed,align,match,eval}``.

Exit codes: 0 success, 2 unreadable or invalid input, 3 numerical failure,
4 when eigenfunction alignment retains no pair.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from .align import align_eigenfunctions
from .embedding import embed, load_embedding, save_embedding
from .errors import (
    EmptyInput,
    InvalidPose,
    MissingTruth,
    NoRetainedPairs,
    ParseError,
    PipelineError,
    VoxmatchError,
)
from .evaluate import evaluate, read_records
from .graph import build_graph
from .io import FORMATS, load_truth, load_voxels, save_truth, save_voxels, truth_path
from .pipeline import MatchConfig, load_config, match_pipeline
from .synth import get_model, synth_articulated

logger = logging.getLogger("voxmatch")

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_NUMERICAL = 3
EXIT_NO_PAIRS = 4

# bad or inconsistent user input; everything else is a numerical failure
_INPUT_ERRORS = (ParseError, EmptyInput, InvalidPose, MissingTruth)


def exit_code(exc):
    if isinstance(exc, PipelineError):
        exc = exc.cause
    if isinstance(exc, NoRetainedPairs):
        return EXIT_NO_PAIRS
    if isinstance(exc, _INPUT_ERRORS + (OSError,)):
        return EXIT_PARSE
    return EXIT_NUMERICAL


def _config(args):
    cfg = load_config(args.config) if args.config else MatchConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _parse_joints(items):
    pose = {}
    for item in items or ():
        if "=" not in item:
            raise ParseError(f"joint angle must look like name=deg[,deg]: {item!r}")
        name, text = item.split("=", 1)
        try:
            pose[name.strip()] = [float(t) for t in text.split(",")]
        except ValueError:
            raise ParseError(f"bad angle in {item!r}") from None
    return pose


def cmd_synth(args, cfg):
    if args.list:
        mdl = get_model(args.model)
        print(f"{mdl.name}: joints {', '.join(link.name for link in mdl.links)}")
        print(f"poses: {', '.join(sorted(mdl.poses))}")
        return EXIT_OK
    if args.output is None:
        raise ParseError("synth needs an output path (-o)")
    pose = args.pose
    if args.joint:
        if pose is not None:
            raise ParseError("use either --pose or --joint")
        pose = _parse_joints(args.joint)
    shape = synth_articulated(args.model, pose, args.sampling)
    save_voxels(shape.voxels, args.output, args.format)
    save_truth(shape.ground_truth, truth_path(args.output))
    print(f"{len(shape.voxels)} voxels -> {args.output}")
    for a, b, gap in shape.contacts:
        print(f"self-contact: {a} / {b} (surface gap {gap:.2f} voxels)")
    return EXIT_OK


def cmd_embed(args, cfg):
    voxels = load_voxels(args.voxels, args.format)
    graph = build_graph(voxels, cfg.graph)
    emb = embed(graph, args.k if args.k is not None else cfg.k_request, seed=cfg.seed)
    save_embedding(emb, args.output)
    print(f"{graph.n_nodes} nodes ({graph.n_dropped} dropped), k={emb.k} -> {args.output}")
    return EXIT_OK


def cmd_align(args, cfg):
    ex = load_embedding(args.embedding_x)
    ey = load_embedding(args.embedding_y)
    al = align_eigenfunctions(ex, ey, cfg.align)
    print("k_x\tl_y\tsign\tcost")
    for p in al.pairs:
        print(f"{p.k_x}\t{p.l_y}\t{p.sign:+d}\t{p.cost:.6g}")
    if args.output:
        np.savetxt(args.output, al.initial_rotation, fmt="%.1f")
        print(f"R0 ({al.retained_k}x{al.retained_k}) -> {args.output}")
    return EXIT_OK


def cmd_match(args, cfg):
    out = match_pipeline(
        args.voxels_x,
        args.voxels_y,
        cfg,
        out_dir=args.out_dir,
        prefix=args.prefix,
        ply=args.ply,
        figures=args.figures,
        use_truth=not args.no_truth,
    )
    rep = out.report
    print(
        f"retained K={rep['retained_k']} iterations={rep['iterations']} "
        f"converged={rep['converged']} matched={rep['n_matched']} grey={rep['grey_count']}"
    )
    if "metrics" in rep:
        acc = rep["metrics"]["accuracy"]
        print("accuracy=" + ("undefined" if acc is None else f"{acc:.4f}"))
    base = Path(args.out_dir)
    print(f"wrote {base / (args.prefix + '_correspondences.csv')} and {base / (args.prefix + '_report.json')}")
    for name in rep.get("figures", []):
        print(f"figure {base / name}")
    return EXIT_OK


def cmd_eval(args, cfg):
    records = read_records(args.correspondences)
    tx = load_truth(args.truth_x)
    ty = load_truth(args.truth_y)
    radius = args.radius if args.radius is not None else cfg.radius_r
    metrics = evaluate(records, tx, ty, radius)
    print(json.dumps(metrics.to_dict(), indent=2))
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="voxmatch", description="Articulated voxel-shape matching.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--seed", type=int, default=None, help="seed of the eigensolver start vector")
    parser.add_argument("--config", type=Path, default=None, help="key = value configuration file")
    parser.add_argument("--threads", type=int, default=None, help="cap on BLAS/LAPACK threads")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="voxelize a synthetic articulated model")
    p.add_argument("model", choices=["chain", "chain-branch", "mannequin-lite", "hand-lite"])
    p.add_argument("-o", "--output", type=Path)
    p.add_argument("--pose", default=None, help="preset pose name")
    p.add_argument("--joint", action="append", metavar="NAME=DEG[,DEG]", help="joint angles (repeatable)")
    p.add_argument("--sampling", type=float, default=4.0, help="voxels per model unit")
    p.add_argument("--format", choices=FORMATS, default=None)
    p.add_argument("--list", action="store_true", help="list joints and preset poses")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("embed", help="Laplacian eigenmap of a voxel file")
    p.add_argument("voxels", type=Path)
    p.add_argument("-o", "--output", type=Path, required=True)
    p.add_argument("-k", type=int, default=None, help="number of eigenvectors (default from config)")
    p.add_argument("--format", choices=FORMATS, default=None)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("align", help="match the eigenfunctions of two embeddings")
    p.add_argument("embedding_x", type=Path)
    p.add_argument("embedding_y", type=Path)
    p.add_argument("-o", "--output", type=Path, default=None, help="write R0 here")
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("match", help="full pipeline on two voxel files")
    p.add_argument("voxels_x", type=Path)
    p.add_argument("voxels_y", type=Path)
    p.add_argument("-o", "--out-dir", type=Path, default=Path("."))
    p.add_argument("--prefix", default="match")
    p.add_argument("--ply", action="store_true", help="also write a coloured point cloud")
    p.add_argument("--figures", action="store_true", help="also write PNG report figures")
    p.add_argument("--no-truth", action="store_true", help="ignore ground-truth sidecar files")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("eval", help="score a correspondence file against ground truth")
    p.add_argument("correspondences", type=Path)
    p.add_argument("truth_x", type=Path)
    p.add_argument("truth_y", type=Path)
    p.add_argument("--radius", type=float, default=None, help="arc-length tolerance in voxels")
    p.set_defaults(func=cmd_eval)
    return parser


def _thread_limit(n):
    if n is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = _config(args)
        with _thread_limit(args.threads):
            return args.func(args, cfg)
    except (VoxmatchError, OSError) as exc:
        print(f"voxmatch: error: {exc}", file=sys.stderr)
        return exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())

"""Command line entry point: synth, run, eval, overlay."""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from ..body_model import default_topology, forward_kinematics
from ..config import Config
from ..feedback import render_mask, write_pfm, write_pgm
from ..geometry import Camera
from ..skeleton import BODY_BONES
from . import io
from .metrics import SUBSETS, NoCorrespondence, mpjpe, pcp
from .pipeline import Pipeline
from .synthetic import SceneSpec, generate

log = logging.getLogger("totalcap")


def cmd_synth(args) -> int:
    with open(args.spec) as fh:
        spec = SceneSpec.from_dict(json.load(fh))
    io.write_dataset(args.out, generate(spec))
    print(f"wrote {spec.n_frames} frames to {args.out}")
    return 0


def cmd_run(args) -> int:
    cfg = Config.load(args.config) if args.config else Config()
    cameras = io.read_cameras(args.calib)
    frames = io.read_frames(args.detections)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    shutil.copyfile(args.calib, out / "cameras.json")
    pipe = Pipeline(cameras, cfg, feedback=False if args.no_feedback else None)
    for inp in frames:
        result = pipe.step(inp)
        io.write_results(out, [result])
        if args.dump_masks:
            _dump_masks(out / "masks", result, pipe)
        log.info("frame %d: %d persons", result.frame, len(result.skeletons))
    print(f"processed {len(frames)} frames into {out}")
    return 0


def _dump_masks(root: Path, result, pipe: Pipeline) -> None:
    root.mkdir(parents=True, exist_ok=True)
    for pid, params in result.params.items():
        for view, cam in pipe.cameras.items():
            stem = f"{result.frame:06d}_v{view}_p{pid}"
            write_pgm(root / f"{stem}.pgm", render_mask(pipe.topology, params, cam, pipe.cfg.feedback))
            if (view, pid) in result.masks:
                write_pfm(root / f"{stem}.pfm", result.masks[(view, pid)].grid)


def cmd_eval(args) -> int:
    results = io.read_results(args.results)
    truth = io.read_truth(args.truth)
    n = min(len(results), len(truth))
    topo = default_topology()
    report = {}
    for metric in args.metrics.split(","):
        metric = metric.strip()
        try:
            if metric == "mpjpe":
                est = [r.landmarks(topo) for r in results[:n]]
                report["mpjpe_mm"] = {s: mpjpe(est, truth[:n], s) for s in SUBSETS}
                tri = [r.body_joints() for r in results[:n]]
                report["mpjpe_mm"]["triangulated_body"] = mpjpe(tri, [{k: v[:15] for k, v in f.items()} for f in truth[:n]])
            elif metric == "pcp":
                tri = [r.body_joints() for r in results[:n]]
                report["pcp"] = pcp(tri, [{k: v[:15] for k, v in f.items()} for f in truth[:n]])
            else:
                print(f"unknown metric {metric!r}", file=sys.stderr)
                return 2
        except NoCorrespondence as exc:
            report[metric] = f"no correspondence: {exc}"
    print(json.dumps(report, indent=2))
    return 0


def _svg(cam: Camera, skeletons: dict[int, np.ndarray], hands: dict[int, np.ndarray]) -> str:
    colors = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{cam.width}" height="{cam.height}" '
        f'viewBox="0 0 {cam.width} {cam.height}">',
        f'<rect width="{cam.width}" height="{cam.height}" fill="#fafafa"/>',
    ]
    for pid, joints in sorted(skeletons.items()):
        color = colors[pid % len(colors)]
        for a, b in BODY_BONES:
            if np.isnan(joints[a, 0]) or np.isnan(joints[b, 0]):
                continue
            if cam.to_camera(joints[a])[2] <= 0 or cam.to_camera(joints[b])[2] <= 0:
                continue
            (x1, y1), (x2, y2) = cam.project_many(joints[[a, b]])
            out.append(f'<line x1="{x1:.1f}" y1="{y1:.1f}" x2="{x2:.1f}" y2="{y2:.1f}" stroke="{color}" stroke-width="6"/>')
        for x, y in cam.project_many(hands.get(pid, np.zeros((0, 3)))):
            out.append(f'<circle cx="{x:.1f}" cy="{y:.1f}" r="3" fill="{color}"/>')
    out.append("</svg>")
    return "\n".join(out)


def cmd_overlay(args) -> int:
    results = io.read_results(args.results)
    calib = Path(args.calib) if args.calib else Path(args.results) / "cameras.json"
    cameras = io.read_cameras(calib)
    topo = default_topology()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    hands_sl = np.r_[topo.landmark_slice("left_hand"), topo.landmark_slice("right_hand")]
    for r in results:
        hands = {pid: forward_kinematics(topo, p)[hands_sl] for pid, p in r.params.items()}
        for cam in cameras:
            (out / f"{r.frame:06d}_v{cam.id}.svg").write_text(_svg(cam, r.body_joints(), hands))
    print(f"wrote overlays for {len(results)} frames to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="totalcap", description="Multi-person body, hand and face capture")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset from a scene spec")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    r = sub.add_parser("run", help="run the capture pipeline")
    r.add_argument("--calib", required=True)
    r.add_argument("--detections", required=True, help="dataset directory")
    r.add_argument("--config")
    r.add_argument("--out", required=True)
    r.add_argument("--no-feedback", action="store_true")
    r.add_argument("--dump-masks", action="store_true")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="score results against ground truth")
    e.add_argument("--results", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--metrics", default="mpjpe,pcp")
    e.set_defaults(func=cmd_eval)

    o = sub.add_parser("overlay", help="write SVG skeleton overlays per view")
    o.add_argument("--results", required=True)
    o.add_argument("--out", required=True)
    o.add_argument("--calib")
    o.set_defaults(func=cmd_overlay)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

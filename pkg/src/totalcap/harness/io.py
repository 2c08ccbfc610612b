"""On-disk layout for datasets and results.

A dataset directory holds::

    cameras.json              calibration
    scene.json                the scene spec it was generated from (optional)
    detections/NNNNNN.json    {view: [{joint_id, x, y, conf}]}
    hands/NNNNNN.json         {view: {"hands": [instance, ...]}}
    faces/NNNNNN.json         {view: {"faces": [instance, ...]}}
    truth/NNNNNN.json         {person: {"landmarks": [[x, y, z]], "params": {...}}}

Results are one ``NNNNNN.json`` per frame.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import numpy as np

from ..association import Detection2D
from ..body_model import BodyParams
from ..bootstrap import PartInstance, PrecomputedDetector
from ..geometry import Camera, load_calibration, save_calibration
from .pipeline import FrameInput, FrameResult
from .synthetic import SyntheticData


def _name(i: int) -> str:
    return f"{i:06d}.json"


def _dump(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)


def _load(path: Path):
    with open(path) as fh:
        return json.load(fh)


def write_dataset(out: str | Path, data: SyntheticData) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    save_calibration(data.cameras, out / "cameras.json")
    _dump(out / "scene.json", data.spec.to_dict())
    for t, f in enumerate(data.frames):
        _dump(
            out / "detections" / _name(t),
            {
                str(v): [
                    {"joint_id": d.joint_id, "x": float(d.position[0]), "y": float(d.position[1]), "conf": d.confidence}
                    for d in dets
                ]
                for v, dets in f.body.items()
            },
        )
        _dump(out / "hands" / _name(t), {str(v): {"hands": [i.to_dict() for i in inst]} for v, inst in f.hands.items()})
        _dump(out / "faces" / _name(t), {str(v): {"faces": [i.to_dict() for i in inst]} for v, inst in f.faces.items()})
        _dump(
            out / "truth" / _name(t),
            {
                str(k): {"landmarks": f.truth[k].tolist(), "params": f.params[k].to_dict()}
                for k in f.truth
            },
        )


def read_detections(path: str | Path) -> dict[int, list[Detection2D]]:
    raw = _load(Path(path))
    return {
        int(v): [Detection2D(np.array([d["x"], d["y"]]), float(d["conf"]), int(d["joint_id"]), int(v)) for d in dets]
        for v, dets in raw.items()
    }


def _read_parts(path: Path, key: str) -> PrecomputedDetector | None:
    if not path.exists():
        return None
    raw = _load(path)
    return PrecomputedDetector(
        {int(v): [PartInstance.from_dict(int(v), i) for i in entry[key]] for v, entry in raw.items()}
    )


def frame_count(root: str | Path) -> int:
    return len(sorted((Path(root) / "detections").glob("*.json")))


def read_frames(root: str | Path) -> list[FrameInput]:
    root = Path(root)
    frames = []
    for path in sorted((root / "detections").glob("*.json")):
        frames.append(
            FrameInput(
                read_detections(path),
                _read_parts(root / "hands" / path.name, "hands"),
                _read_parts(root / "faces" / path.name, "faces"),
            )
        )
    return frames


def read_cameras(path: str | Path) -> list[Camera]:
    return load_calibration(path)


def read_truth(root: str | Path) -> list[dict[int, np.ndarray]]:
    return [
        {int(k): np.asarray(v["landmarks"], dtype=float) for k, v in _load(p).items()}
        for p in sorted((Path(root) / "truth").glob("*.json"))
    ]


def read_truth_params(root: str | Path) -> list[dict[int, BodyParams]]:
    return [
        {int(k): BodyParams.from_dict(v["params"]) for k, v in _load(p).items()}
        for p in sorted((Path(root) / "truth").glob("*.json"))
    ]


def write_results(out: str | Path, results: Sequence[FrameResult], timings: bool = True) -> None:
    out = Path(out)
    for r in results:
        _dump(out / _name(r.frame), r.to_dict(timings=timings))


def read_results(root: str | Path) -> list[FrameResult]:
    return [FrameResult.from_dict(_load(p)) for p in sorted(Path(root).glob("[0-9]*.json"))]

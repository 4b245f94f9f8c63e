"""MOTChallenge text formats: gt.txt, det.txt, result files and seqinfo.ini.

Numbers are written with at most two decimals and trailing zeros trimmed
(``fmt_num``), so any record set whose values already sit on the 0.01 grid
survives ``parse(write(x)) == x`` exactly and re-writing a parsed file
reproduces it byte for byte.
"""
from __future__ import annotations

import configparser
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geometry import BBox


class FormatError(ValueError):
    """A malformed row; ``line`` is 1-based."""

    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line


@dataclass(frozen=True)
class GtRecord:
    frame: int
    id: int
    box: BBox
    conf: int = 1
    class_id: int = 1
    visibility: float = 1.0

    def __post_init__(self):
        if self.frame < 1:
            raise ValueError(f"frame must be >= 1, got {self.frame}")
        if not 0.0 <= self.visibility <= 1.0:
            raise ValueError(f"visibility must lie in [0, 1], got {self.visibility}")


@dataclass(frozen=True)
class DetRecord:
    frame: int
    box: BBox
    confidence: float

    def __post_init__(self):
        if self.frame < 1:
            raise ValueError(f"frame must be >= 1, got {self.frame}")


@dataclass(frozen=True)
class ResultRecord:
    """One tracker output row."""
    frame: int
    id: int
    box: BBox
    conf: float = 1.0


def fmt_num(x: float) -> str:
    """At most two decimals, trailing zeros and a bare point removed; never ``-0``."""
    s = f"{float(x):.2f}".rstrip("0").rstrip(".")
    return "0" if s in ("-0", "") else s


def _fields(text: str, min_cols: int, max_cols: int):
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        parts = [p.strip() for p in line.split(",")]
        if not min_cols <= len(parts) <= max_cols:
            raise FormatError(n, f"expected {min_cols}-{max_cols} columns, got {len(parts)}")
        try:
            vals = [float(p) for p in parts]
        except ValueError:
            raise FormatError(n, f"non-numeric field in {line!r}") from None
        if not all(np.isfinite(vals)):
            raise FormatError(n, "non-finite value")
        yield n, vals


def _int(n: int, v: float, what: str) -> int:
    if v != int(v):
        raise FormatError(n, f"{what} must be an integer, got {v}")
    return int(v)


def _box(n: int, vals: Sequence[float]) -> BBox:
    left, top, width, height = vals
    if width < 0 or height < 0:
        raise FormatError(n, f"negative box size {width}x{height}")
    try:
        return BBox(left, top, width, height)
    except ValueError as exc:
        raise FormatError(n, str(exc)) from None


def parse_gt(text: str) -> list[GtRecord]:
    """``frame,id,left,top,width,height,conf,class[,visibility]`` rows in file order."""
    out = []
    for n, v in _fields(text, 8, 9):
        vis = v[8] if len(v) == 9 else 1.0
        try:
            out.append(GtRecord(_int(n, v[0], "frame"), _int(n, v[1], "id"), _box(n, v[2:6]),
                                _int(n, v[6], "conf"), _int(n, v[7], "class"), vis))
        except FormatError:
            raise
        except ValueError as exc:
            raise FormatError(n, str(exc)) from None
    return out


def parse_det(text: str) -> list[DetRecord]:
    """``frame,-1,left,top,width,height,conf[,x,y,z]`` rows in file order."""
    out = []
    for n, v in _fields(text, 7, 10):
        try:
            out.append(DetRecord(_int(n, v[0], "frame"), _box(n, v[2:6]), v[6]))
        except FormatError:
            raise
        except ValueError as exc:
            raise FormatError(n, str(exc)) from None
    return out


def parse_results(text: str) -> list[ResultRecord]:
    out = []
    for n, v in _fields(text, 7, 10):
        frame, tid = _int(n, v[0], "frame"), _int(n, v[1], "id")
        if frame < 1 or tid < 1:
            raise FormatError(n, "frame and id must be positive")
        out.append(ResultRecord(frame, tid, _box(n, v[2:6]), v[6]))
    return out


def _box_cols(b: BBox) -> list[str]:
    return [fmt_num(b.left), fmt_num(b.top), fmt_num(b.width), fmt_num(b.height)]


def _join(rows: Iterable[list[str]]) -> str:
    return "".join(",".join(r) + "\n" for r in rows)


def write_results(outputs: Iterable) -> str:
    """Rows ``frame,id,left,top,width,height,conf,-1,-1,-1`` sorted by (frame, id).

    Accepts anything with ``frame``, ``id``, ``box`` and ``conf`` attributes.
    """
    outputs = sorted(outputs, key=lambda o: (o.frame, o.id))
    for o in outputs:
        if o.id < 1:
            raise ValueError(f"track ids must be positive, got {o.id}")
    return _join([str(o.frame), str(o.id), *_box_cols(o.box), fmt_num(o.conf), "-1", "-1", "-1"]
                 for o in outputs)


def write_gt(records: Iterable[GtRecord]) -> str:
    """Records in the given order, always with the visibility column."""
    return _join([str(r.frame), str(r.id), *_box_cols(r.box), str(r.conf), str(r.class_id), fmt_num(r.visibility)]
                 for r in records)


def write_det(records: Iterable[DetRecord]) -> str:
    return _join([str(r.frame), "-1", *_box_cols(r.box), fmt_num(r.confidence), "-1", "-1", "-1"]
                 for r in records)


# ---------------------------------------------------------------- seqinfo.ini


@dataclass(frozen=True)
class SeqInfo:
    name: str
    im_width: int
    im_height: int
    seq_length: int
    frame_rate: int = 30


def parse_seqinfo(text: str) -> SeqInfo:
    cp = configparser.ConfigParser()
    cp.optionxform = str  # keys are case-sensitive
    cp.read_string(text)
    if "Sequence" not in cp:
        raise ValueError("seqinfo.ini lacks a [Sequence] section")
    sec = cp["Sequence"]
    try:
        return SeqInfo(sec.get("name", ""), int(sec["imWidth"]), int(sec["imHeight"]),
                       int(sec["seqLength"]), int(sec.get("frameRate", "30")))
    except KeyError as exc:
        raise ValueError(f"seqinfo.ini lacks key {exc.args[0]}") from None


def write_seqinfo(info: SeqInfo) -> str:
    return (f"[Sequence]\nname={info.name}\nframeRate={info.frame_rate}\nseqLength={info.seq_length}\n"
            f"imWidth={info.im_width}\nimHeight={info.im_height}\n")


# ---------------------------------------------------------------- scenario directories


SIDECAR = "scenario.json"


def scenario_gt(scen) -> list[GtRecord]:
    """Ground truth rows of a simulated scenario, frame-major then id order."""
    out = []
    for t in range(scen.frames):
        vis = scen.visibility_at(t)
        for k, obj in enumerate(scen.objects):
            out.append(GtRecord(t + 1, obj.id, obj.boxes[t], 1, 1, round(float(vis[k]), 2)))
    return out


def scenario_det(scen) -> list[DetRecord]:
    return [DetRecord(t + 1, d.box, d.confidence) for t, dets in enumerate(scen.detections) for d in dets]


def export_scenario(scen, directory, meta: dict | None = None) -> Path:
    """Write ``seqinfo.ini``, ``gt/gt.txt``, ``det/det.txt`` and the JSON sidecar."""
    d = Path(directory)
    (d / "gt").mkdir(parents=True, exist_ok=True)
    (d / "det").mkdir(parents=True, exist_ok=True)
    info = SeqInfo(f"sim-{scen.seed}", scen.world_width, scen.world_height, scen.frames)
    (d / "seqinfo.ini").write_text(write_seqinfo(info))
    (d / "gt" / "gt.txt").write_text(write_gt(scenario_gt(scen)))
    (d / "det" / "det.txt").write_text(write_det(scenario_det(scen)))
    sidecar = {
        "seed": scen.seed,
        "noise_sigma": scen.noise_sigma,
        "peak_frame": scen.peak_frame,
        "world": [scen.world_width, scen.world_height],
        "objects": [{"id": o.id, "depth": o.depth, "signature": [float(v) for v in o.signature]}
                    for o in scen.objects],
    }
    if meta:
        sidecar["meta"] = meta
    (d / SIDECAR).write_text(json.dumps(sidecar, indent=1, sort_keys=True) + "\n")
    return d


def import_scenario(directory):
    """Rebuild a scenario from an exported directory (boxes from gt, detections from det)."""
    from .sim import Detection, Scenario, SimObject

    d = Path(directory)
    info = parse_seqinfo((d / "seqinfo.ini").read_text())
    side = json.loads((d / SIDECAR).read_text())
    gt = parse_gt((d / "gt" / "gt.txt").read_text())
    boxes: dict[int, dict[int, BBox]] = {}
    for r in gt:
        boxes.setdefault(r.id, {})[r.frame] = r.box
    objects = []
    for o in side["objects"]:
        per = boxes.get(o["id"], {})
        if len(per) != info.seq_length:
            raise ValueError(f"object {o['id']} has {len(per)} gt rows for {info.seq_length} frames")
        objects.append(SimObject(o["id"], [per[t] for t in range(1, info.seq_length + 1)], o["depth"],
                                 np.asarray(o["signature"], dtype=np.float64)))
    dets: list[list] = [[] for _ in range(info.seq_length)]
    for r in parse_det((d / "det" / "det.txt").read_text()):
        if r.frame > info.seq_length:
            raise ValueError(f"detection in frame {r.frame} beyond sequence length {info.seq_length}")
        dets[r.frame - 1].append(Detection(r.box, r.confidence))
    return Scenario(info.seq_length, info.im_width, info.im_height, objects, side["noise_sigma"],
                    detections=dets, seed=side["seed"], peak_frame=side.get("peak_frame"))

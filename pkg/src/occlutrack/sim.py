"""Synthetic occlusion scenarios: trajectories, visibility, feature frames, detections.

A scenario is a small world of rigid boxes moving on integer pixel
coordinates. Each object carries a unit-norm identity signature; a rendered
feature frame holds, per coarse grid cell, the area-weighted signatures of
the front-most objects covering the cell's pixels, plus Gaussian noise.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .geometry import BBox, iou

CELL = 8
PATTERNS = ("parallel", "crossing", "follow")

DropoutLaw = Callable[[np.ndarray], np.ndarray]


def default_dropout(visibility):
    """Miss probability 1 below visibility 0.2, falling linearly to 0 at 0.5."""
    v = np.asarray(visibility, dtype=np.float64)
    return np.clip((0.5 - v) / 0.3, 0.0, 1.0)


def never_drop(visibility):
    return np.zeros_like(np.asarray(visibility, dtype=np.float64))


def threshold_dropout(threshold: float) -> DropoutLaw:
    """Drop with certainty below ``threshold`` visibility, keep otherwise."""
    def law(visibility):
        return (np.asarray(visibility, dtype=np.float64) < threshold).astype(np.float64)
    return law


def dropout_law(spec: str) -> DropoutLaw:
    """``default``, ``never`` or ``threshold:<visibility>``."""
    if spec == "default":
        return default_dropout
    if spec == "never":
        return never_drop
    if spec.startswith("threshold:"):
        try:
            return threshold_dropout(float(spec.split(":", 1)[1]))
        except ValueError:
            pass
    raise ValueError(f"unknown dropout law {spec!r}")


@dataclass(frozen=True)
class SimConfig:
    n_objects: int = 2
    pattern: str = "crossing"
    peak_iou: float = 0.8
    frames: int = 30
    world_width: int = 256
    world_height: int = 160
    obj_width: int = 32
    obj_height: int = 64
    min_speed: int = 3
    max_speed: int = 5
    noise_sigma: float = 0.1
    channels: int = 16
    det_jitter: float = 1.0

    def validate(self) -> None:
        if self.pattern not in PATTERNS:
            raise ValueError(f"unknown motion pattern {self.pattern!r}; choose from {PATTERNS}")
        if not 0.0 <= self.peak_iou <= 1.0:
            raise ValueError(f"peak IoU must lie in [0, 1], got {self.peak_iou}")
        if self.n_objects < 1 or self.frames < 1:
            raise ValueError("need at least one object and one frame")
        if self.world_width % CELL or self.world_height % CELL:
            raise ValueError(f"world size must be a multiple of {CELL} pixels")
        if self.obj_width > self.world_width or self.obj_height > self.world_height:
            raise ValueError("objects larger than the world")
        if not 1 <= self.min_speed <= self.max_speed:
            raise ValueError("speeds must satisfy 1 <= min_speed <= max_speed")


@dataclass
class SimObject:
    id: int
    boxes: list[BBox]
    depth: int
    signature: np.ndarray


@dataclass
class Detection:
    box: BBox
    confidence: float


@dataclass
class Scenario:
    frames: int
    world_width: int
    world_height: int
    objects: list[SimObject]
    noise_sigma: float = 0.1
    detections: list[list[Detection]] = field(default_factory=list)
    seed: int = 0
    peak_frame: int | None = None

    @property
    def channels(self) -> int:
        return len(self.objects[0].signature) if self.objects else 0

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.world_height // CELL, self.world_width // CELL

    def boxes_at(self, t: int) -> list[BBox]:
        return [o.boxes[t] for o in self.objects]

    def visibility_at(self, t: int) -> np.ndarray:
        return visibility(self.boxes_at(t), [o.depth for o in self.objects])


# ---------------------------------------------------------------- geometry helpers


def _lane_tops(cfg: SimConfig) -> list[int]:
    gap = 8
    n = max(1, (cfg.world_height - gap) // (cfg.obj_height + gap))
    return [gap + k * (cfg.obj_height + gap) for k in range(n)]


def _offset_for_peak(size: int, peak: float) -> int:
    # largest integer offset along one axis keeping same-size IoU >= peak
    if peak <= 0.0:
        return size
    return int(np.floor(size * (1.0 - peak) / (1.0 + peak) + 1e-9))


def _parallel(cfg: SimConfig, rng: np.random.Generator, n: int, lanes: Sequence[int], frames: int):
    if n == 0:
        return []
    vx = int(rng.integers(1, 3)) * (1 if rng.random() < 0.5 else -1)
    travel = abs(vx) * (frames - 1)
    per_lane = -(-n // len(lanes))
    span = per_lane * (cfg.obj_width + CELL) + travel
    if not lanes or span > cfg.world_width:
        raise ValueError("infeasible config: parallel objects do not fit in the world")
    start = int(rng.integers(0, cfg.world_width - span + 1))
    if vx < 0:
        start += travel
    tracks = []
    for k in range(n):
        lane, col = k % len(lanes), k // len(lanes)
        x0 = start + col * (cfg.obj_width + CELL)
        y0 = lanes[lane]
        tracks.append([BBox(x0 + vx * t, y0, cfg.obj_width, cfg.obj_height) for t in range(frames)])
    return tracks


def _crossing_pair(cfg: SimConfig, rng: np.random.Generator, lane: int, frames: int):
    tc = frames // 2
    v = int(rng.integers(cfg.min_speed, cfg.max_speed + 1))
    reach = v * max(tc, frames - 1 - tc)
    slack = (cfg.world_width - cfg.obj_width) // 2 - reach
    if slack < 0:
        raise ValueError("infeasible config: crossing objects would leave the world")
    x0 = (cfg.world_width - cfg.obj_width) // 2 + int(rng.integers(-slack, slack + 1))
    dy = _offset_for_peak(cfg.obj_height, cfg.peak_iou)
    y_a = lane
    y_b = y_a + dy
    if y_b + cfg.obj_height > cfg.world_height:
        y_a, y_b = y_a - dy, y_a
        if y_a < 0:
            raise ValueError("infeasible config: no room for the vertical offset")
    if rng.random() < 0.5:
        y_a, y_b = y_b, y_a
    a = [BBox(x0 + v * (t - tc), y_a, cfg.obj_width, cfg.obj_height) for t in range(frames)]
    b = [BBox(x0 - v * (t - tc), y_b, cfg.obj_width, cfg.obj_height) for t in range(frames)]
    return [a, b], tc


def _follow_pair(cfg: SimConfig, rng: np.random.Generator, lane: int, frames: int):
    v = int(rng.integers(cfg.min_speed, cfg.max_speed + 1))
    gap_final = _offset_for_peak(cfg.obj_width, cfg.peak_iou)
    gap_start = cfg.obj_width + 2 * CELL
    catch = frames // 2
    close_speed = max(1, int(np.ceil((gap_start - gap_final) / max(catch, 1))))
    direction = 1 if rng.random() < 0.5 else -1
    lead_x, foll_x = [0.0], [-float(gap_start)]
    peak_t = None
    for t in range(1, frames):
        lead_x.append(lead_x[-1] + v)
        gap = lead_x[-1] - (foll_x[-1] + v + close_speed)
        if gap >= gap_final:
            foll_x.append(foll_x[-1] + v + close_speed)
        else:
            foll_x.append(lead_x[-1] - gap_final)
            if peak_t is None:
                peak_t = t
    lo = min(foll_x)
    hi = max(lead_x) + cfg.obj_width
    if hi - lo > cfg.world_width:
        raise ValueError("infeasible config: follow pair does not fit in the world")
    shift = int(rng.integers(0, cfg.world_width - (hi - lo) + 1)) - lo
    xs_l = [x + shift for x in lead_x]
    xs_f = [x + shift for x in foll_x]
    if direction < 0:
        xs_l = [cfg.world_width - cfg.obj_width - x for x in xs_l]
        xs_f = [cfg.world_width - cfg.obj_width - x for x in xs_f]
    lead = [BBox(x, lane, cfg.obj_width, cfg.obj_height) for x in xs_l]
    foll = [BBox(x, lane, cfg.obj_width, cfg.obj_height) for x in xs_f]
    return [lead, foll], (peak_t if peak_t is not None else frames - 1)


def generate(cfg: SimConfig, seed: int, dropout: DropoutLaw = default_dropout) -> Scenario:
    """Deterministic scenario for ``(cfg, seed)``, detections included."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    lanes = _lane_tops(cfg)
    peak_frame = None
    trajectories: list[list[BBox]] = []
    if cfg.pattern == "parallel" or cfg.n_objects == 1:
        trajectories = _parallel(cfg, rng, cfg.n_objects, lanes, cfg.frames)
    else:
        builder = _crossing_pair if cfg.pattern == "crossing" else _follow_pair
        pair, peak_frame = builder(cfg, rng, lanes[0], cfg.frames)
        trajectories = pair
        extra = cfg.n_objects - 2
        if extra:
            if len(lanes) < 2:
                raise ValueError("infeasible config: no free lane for extra objects")
            trajectories += _parallel(cfg, rng, extra, lanes[1:], cfg.frames)
    depths = rng.permutation(cfg.n_objects)
    sigs = rng.normal(size=(cfg.n_objects, cfg.channels))
    sigs /= np.linalg.norm(sigs, axis=1, keepdims=True)
    objects = [SimObject(k + 1, traj, int(depths[k]), sigs[k]) for k, traj in enumerate(trajectories)]
    scen = Scenario(cfg.frames, cfg.world_width, cfg.world_height, objects, cfg.noise_sigma,
                    seed=seed, peak_frame=peak_frame)
    scen.detections = emit_detections(scen, dropout, seed, jitter=cfg.det_jitter)
    return scen


def max_pairwise_iou(scen: Scenario) -> float:
    best = 0.0
    for t in range(scen.frames):
        boxes = scen.boxes_at(t)
        for i in range(len(boxes)):
            for j in range(i + 1, len(boxes)):
                best = max(best, iou(boxes[i], boxes[j]))
    return best


# ---------------------------------------------------------------- visibility / rendering


def _pixel_span(lo: float, hi: float, origin: int) -> tuple[int, int]:
    # pixels whose centres fall inside [lo, hi)
    return int(np.ceil(lo - 0.5)) - origin, int(np.ceil(hi - 0.5)) - origin


def _owner_map(boxes: Sequence[BBox], depth: Sequence[int], x0: int, y0: int, w: int, h: int) -> np.ndarray:
    owner = np.full((h, w), -1, dtype=np.int64)
    # paint back to front: rank 0 is the front-most object
    for k in sorted(range(len(boxes)), key=lambda i: -depth[i]):
        b = boxes[k]
        c0, c1 = _pixel_span(b.left, b.right, x0)
        r0, r1 = _pixel_span(b.top, b.bottom, y0)
        owner[max(r0, 0):max(r1, 0), max(c0, 0):max(c1, 0)] = k
    return owner


def visibility(boxes: Sequence[BBox], depth: Sequence[int]) -> np.ndarray:
    """Visible fraction per box on a 1-pixel grid; rank 0 is in front."""
    if len(set(depth)) != len(depth):
        raise ValueError("depth ranks must be unique")
    if not boxes:
        return np.zeros(0)
    x0 = int(np.floor(min(b.left for b in boxes)))
    y0 = int(np.floor(min(b.top for b in boxes)))
    x1 = int(np.ceil(max(b.right for b in boxes)))
    y1 = int(np.ceil(max(b.bottom for b in boxes)))
    owner = _owner_map(boxes, depth, x0, y0, x1 - x0, y1 - y0)
    visible = np.bincount(owner[owner >= 0].ravel(), minlength=len(boxes))
    out = np.empty(len(boxes))
    for k, b in enumerate(boxes):
        c0, c1 = _pixel_span(b.left, b.right, x0)
        r0, r1 = _pixel_span(b.top, b.bottom, y0)
        total = max(c1 - c0, 0) * max(r1 - r0, 0)
        out[k] = visible[k] / total if total else 0.0
    return out


def occupancy(scen: Scenario, t: int) -> np.ndarray:
    """Per-object fraction of each grid cell it visibly covers: ``(K, Hf, Wf)``."""
    hf, wf = scen.grid_shape
    owner = _owner_map(scen.boxes_at(t), [o.depth for o in scen.objects], 0, 0,
                       scen.world_width, scen.world_height)
    k = len(scen.objects)
    onehot = owner[None, :, :] == np.arange(k)[:, None, None]
    counts = onehot.reshape(k, hf, CELL, wf, CELL).sum(axis=(2, 4))
    return counts / float(CELL * CELL)


def render_frame(scen: Scenario, t: int, seed: int | None = None, sigma: float | None = None) -> np.ndarray:
    """Feature frame ``(C, Hf, Wf)`` for time ``t`` (0-based)."""
    if not 0 <= t < scen.frames:
        raise IndexError(f"frame {t} outside [0, {scen.frames})")
    sigma = scen.noise_sigma if sigma is None else sigma
    seed = scen.seed if seed is None else seed
    hf, wf = scen.grid_shape
    sigs = np.stack([o.signature for o in scen.objects]) if scen.objects else np.zeros((0, 0))
    c = sigs.shape[1] if scen.objects else 16
    frame = np.zeros((c, hf, wf))
    if scen.objects:
        frame = np.tensordot(sigs, occupancy(scen, t), axes=(0, 0))
    if sigma > 0:
        rng = np.random.default_rng([seed, 7919, t])
        frame = frame + rng.normal(0.0, sigma, size=frame.shape)
    return frame


def emit_detections(scen: Scenario, dropout: DropoutLaw, seed: int, jitter: float = 1.0) -> list[list[Detection]]:
    """Per-frame detections: each gt box kept with probability ``1 - dropout(vis)``.

    Kept boxes are jittered and rounded to 0.01 px; confidence is the
    visibility rounded to 0.01.
    """
    rng = np.random.default_rng([seed, 104729])
    out = []
    for t in range(scen.frames):
        vis = scen.visibility_at(t)
        miss = np.asarray(dropout(vis), dtype=np.float64)
        draws = rng.random(len(scen.objects))
        noise = rng.normal(0.0, jitter, size=(len(scen.objects), 2)) if jitter > 0 else np.zeros((len(scen.objects), 2))
        frame_dets = []
        for k, obj in enumerate(scen.objects):
            if draws[k] < miss[k]:
                continue
            b = obj.boxes[t]
            box = BBox(round(b.left + noise[k, 0], 2), round(b.top + noise[k, 1], 2), b.width, b.height)
            frame_dets.append(Detection(box, round(float(vis[k]), 2)))
        out.append(frame_dets)
    return out


def with_detections(scen: Scenario, dropout: DropoutLaw, seed: int, jitter: float = 1.0) -> Scenario:
    return replace(scen, detections=emit_detections(scen, dropout, seed, jitter))

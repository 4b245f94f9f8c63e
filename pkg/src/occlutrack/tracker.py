"""Online tracking with attention-refined position prediction and identity memory.

Per frame, every active track extracts a feature at its previous box, refines
it with target/distractor attention (weighted by the occlusion-gated weight),
and relocates by searching integer shifts for the box whose pooled content
best matches the refined template. Tracks that score too low go Lost and can
be re-identified against unclaimed public detections; leftover detections
start new tracks.
"""
from __future__ import annotations

import enum
import functools
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import attention as att
from . import memory as mem
from .geometry import BBox, OcclusionConfig, iou, select_distractor, weight_from_iou
from .memory import MemoryState
from .sim import CELL, Detection
from .tensor import Tensor
from .weights import Model

log = logging.getLogger(__name__)

ROI_SIZE = 8


class TrackState(enum.Enum):
    ACTIVE = "active"
    LOST = "lost"
    REMOVED = "removed"


@dataclass(frozen=True)
class TrackerConfig:
    o_min: float = 0.2
    reid_threshold: float = 0.4
    score_threshold: float = 0.6
    patience: int = 30
    search_radius: int = 8
    det_conf_threshold: float = 0.5
    claim_iou: float = 0.5
    use_ta: bool = True
    use_da: bool = True
    use_memory: bool = True
    adaptive_weight: bool = True

    def __post_init__(self):
        OcclusionConfig(self.o_min)
        if self.reid_threshold <= 0 or self.score_threshold <= 0:
            raise ValueError("thresholds must be positive")
        if self.patience < 1:
            raise ValueError("patience must be at least 1 frame")
        if self.search_radius < 0:
            raise ValueError("search radius must be non-negative")


@dataclass
class Track:
    id: int
    box: BBox
    memory: MemoryState
    state: TrackState = TrackState.ACTIVE
    frames_since_seen: int = 0
    history: list[tuple[int, BBox]] = field(default_factory=list)
    score: float = 1.0

    @property
    def pooled(self) -> np.ndarray:
        return mem.pool(self.memory.state)


@dataclass
class Prediction:
    box: BBox
    score: float
    weight: float
    distractor: Optional[int]


# ---------------------------------------------------------------- ROI features


def _interp_rows(starts: np.ndarray, length: float, n_cells: int, samples: int = ROI_SIZE) -> np.ndarray:
    """Bilinear sampling matrices ``(S, samples, n_cells)`` along one axis.

    Sample ``i`` sits at the centre of the i-th of ``samples`` equal bins of
    ``[start, start + length)`` pixels. Cell ``g`` holds the value at grid
    coordinate ``g + 0.5``; samples outside the world read zero, samples
    between the outermost cell centre and the world edge clamp.
    """
    starts = np.atleast_1d(np.asarray(starts, dtype=np.float64))
    u = (starts[:, None] + (np.arange(samples) + 0.5)[None, :] * (length / samples)) / CELL
    inside = (u >= 0.0) & (u <= n_cells)
    v = np.clip(u - 0.5, 0.0, n_cells - 1)
    g0 = np.floor(v).astype(np.int64)
    frac = v - g0
    g1 = np.minimum(g0 + 1, n_cells - 1)
    out = np.zeros((len(starts), samples, n_cells))
    s_idx, i_idx = np.arange(len(starts))[:, None], np.arange(samples)[None, :]
    # each (s, i) pair occurs once per statement, so buffered fancy adds are safe
    out[s_idx, i_idx, g0] += np.where(inside, 1.0 - frac, 0.0)
    out[s_idx, i_idx, g1] += np.where(inside, frac, 0.0)
    return out


def _world_intersects(box: BBox, frame: np.ndarray) -> bool:
    _, hf, wf = frame.shape
    return box.right > 0 and box.bottom > 0 and box.left < wf * CELL and box.top < hf * CELL


def roi_extract(frame: np.ndarray, box: BBox) -> np.ndarray:
    """Bilinear crop-and-resize of the grid region under ``box`` to ``C x 8 x 8``."""
    frame = np.asarray(frame, dtype=np.float64)
    if not _world_intersects(box, frame):
        raise ValueError(f"box {box.as_tuple()} lies outside the world")
    _, hf, wf = frame.shape
    my = _interp_rows([box.top], box.height, hf)[0]
    mx = _interp_rows([box.left], box.width, wf)[0]
    return my @ frame @ mx.T


@functools.lru_cache(maxsize=8)
def _shift_order(radius: int) -> np.ndarray:
    """All ``(dx, dy)`` shifts within ``radius``, smallest displacement first, then row-major."""
    shifts = [(dx, dy) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)]
    shifts.sort(key=lambda s: (abs(s[0]) + abs(s[1]), s[1], s[0]))
    out = np.array(shifts, dtype=np.int64)
    out.flags.writeable = False
    return out


def _coverage_rows(starts: np.ndarray, length: float, n_cells: int) -> np.ndarray:
    """Fraction of each cell covered by ``[start, start + length)``: ``(S, n_cells)``."""
    starts = np.asarray(starts, dtype=np.float64)[:, None]
    edges = np.arange(n_cells, dtype=np.float64)[None, :] * CELL
    lo = np.maximum(starts, edges)
    hi = np.minimum(starts + length, edges + CELL)
    return np.clip(hi - lo, 0.0, None) / CELL


def search_shift(frame: np.ndarray, box: BBox, template: np.ndarray, radius: int) -> tuple[BBox, float]:
    """Integer shift within ``radius`` that best aligns ``box`` with the template response.

    The frame is projected on the template, giving one response per cell; each
    candidate box is scored by the normalised correlation of its exact cell
    coverage with that response. The mean of a bilinear ROI is nearly flat over
    a few pixels of a cell, while this matched filter peaks at exact alignment.
    Ties go to the smallest displacement, then row-major order. Returns the
    box and the cosine similarity between ``template`` and its pooled ROI.
    """
    _, hf, wf = frame.shape
    offsets = np.arange(-radius, radius + 1)
    cy = _coverage_rows(box.top + offsets, box.height, hf)
    cx = _coverage_rows(box.left + offsets, box.width, wf)
    # cells unlike the template count as background, not as negative evidence,
    # so a partly covered target does not repel its own box
    proj = np.maximum(np.tensordot(template, frame, axes=(0, 0)), 0.0)  # (Hf, Wf)
    norm = np.linalg.norm(cy, axis=1)[:, None] * np.linalg.norm(cx, axis=1)[None, :]
    resp = np.divide(cy @ proj @ cx.T, norm, out=np.full(norm.shape, -np.inf), where=norm > 0)
    order = _shift_order(radius)
    dx, dy = order[:, 0], order[:, 1]
    k = int(np.argmax(resp[dy + radius, dx + radius]))  # first maximum keeps the tie order
    best = box.shifted(int(dx[k]), int(dy[k]))
    if not _world_intersects(best, frame):
        return box, 0.0
    return best, 1.0 - cosine_distance(template, mem.pool(roi_extract(frame, best)))


# ---------------------------------------------------------------- prediction


def attention_weight(target: BBox, distractor: Optional[BBox], cfg: TrackerConfig) -> float:
    if not cfg.adaptive_weight:
        return 1.0
    if distractor is None:
        return 0.0
    return weight_from_iou(iou(target, distractor), cfg.o_min)


def predict_position(track: Track, frame: np.ndarray, cfg: TrackerConfig, model: Model,
                     distractor: Optional[Track] = None) -> Prediction:
    feat = roi_extract(frame, track.box)
    raw = mem.extract_embedding(feat, model.memory)
    w = attention_weight(track.box, distractor.box if distractor else None, cfg)
    refined = att.refine(
        Tensor(feat), raw, track.memory.state,
        distractor.memory.state if distractor else None, w, model.attention,
        use_target=cfg.use_ta, use_distractor=cfg.use_da,
    )
    template = mem.pool(refined)
    if not np.any(template):
        return Prediction(track.box, 0.0, w, distractor.id if distractor else None)
    box, score = search_shift(frame, track.box, template, cfg.search_radius)
    return Prediction(box, score, w, distractor.id if distractor else None)


# ---------------------------------------------------------------- assignment


def hungarian(cost) -> dict[int, int]:
    """Minimum-cost one-to-one assignment ``row -> column`` (rectangular allowed)."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.size == 0:
        return {}
    if cost.ndim != 2:
        raise ValueError(f"cost must be a matrix, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix must be finite")
    rows, cols = linear_sum_assignment(cost)
    return {int(r): int(c) for r, c in zip(rows, cols)}


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 1.0
    return 1.0 - float(a @ b) / (na * nb)


# ---------------------------------------------------------------- online loop


@dataclass
class FrameOutput:
    frame: int
    id: int
    box: BBox
    conf: float


class Tracker:
    """Single-sequence online tracker; feed frames in order via :meth:`step`."""

    def __init__(self, model: Model, cfg: TrackerConfig = TrackerConfig()):
        self.model = model
        self.cfg = cfg
        self.tracks: list[Track] = []
        self.next_id = 1
        self.frame_index = 0

    def active(self) -> list[Track]:
        return [t for t in self.tracks if t.state is TrackState.ACTIVE]

    def lost(self) -> list[Track]:
        return [t for t in self.tracks if t.state is TrackState.LOST]

    def _embed(self, frame: np.ndarray, box: BBox) -> Tensor:
        return mem.extract_embedding(roi_extract(frame, box), self.model.memory)

    def _absorb(self, track: Track, embed: Tensor) -> None:
        if self.cfg.use_memory:
            track.memory = mem.update(track.memory, embed, self.model.memory)
        else:
            track.memory = MemoryState(embed)

    def _merge_duplicates(self, frame: np.ndarray) -> set[int]:
        """Demote one of two active tracks that sit on the same object to Lost.

        Two tracks are duplicates when their boxes overlap by at least
        ``claim_iou`` and their memories are within ``reid_threshold``. The
        track whose memory is farther from the content under its box loses
        the box but keeps its memory for re-identification.
        """
        demoted: set[int] = set()
        active = sorted(self.active(), key=lambda t: t.id)
        fit = {t.id: cosine_distance(t.pooled, mem.pool(self._embed(frame, t.box))) for t in active}
        for k, a in enumerate(active):
            for b in active[k + 1:]:
                if a.id in demoted or b.id in demoted:
                    continue
                if iou(a.box, b.box) >= self.cfg.claim_iou and cosine_distance(a.pooled, b.pooled) < self.cfg.reid_threshold:
                    loser = b if fit[b.id] >= fit[a.id] else a
                    loser.state = TrackState.LOST
                    loser.frames_since_seen = 1
                    demoted.add(loser.id)
                    log.debug("frame %d: track %d duplicates another, now lost", self.frame_index, loser.id)
        return demoted

    def step(self, frame_index: int, frame: np.ndarray, detections: Sequence[Detection]) -> list[FrameOutput]:
        """Advance one frame (1-based ``frame_index``) and return the active boxes."""
        if frame_index != self.frame_index + 1:
            raise ValueError(f"expected frame {self.frame_index + 1}, got {frame_index}")
        self.frame_index = frame_index
        frame = np.asarray(frame, dtype=np.float64)
        cfg = self.cfg
        active = sorted(self.active(), key=lambda t: t.id)
        by_id = {t.id: t for t in active}
        prev_boxes = {t.id: t.box for t in active}
        newly_lost: set[int] = set()

        # predictions read only pre-step state; commits happen afterwards
        preds: dict[int, Prediction] = {}
        for t in active:
            d_id = select_distractor(t.id, prev_boxes)
            preds[t.id] = predict_position(t, frame, cfg, self.model, by_id.get(d_id))

        refined: dict[int, Tensor] = {}
        for t in active:
            p = preds[t.id]
            if p.score < cfg.score_threshold:
                continue
            e_new = self._embed(frame, p.box)
            d = by_id.get(p.distractor)
            refined[t.id] = att.refine(
                e_new, e_new, t.memory.state, d.memory.state if d else None, p.weight,
                self.model.attention, use_target=cfg.use_ta, use_distractor=cfg.use_da,
            )

        for t in active:
            p = preds[t.id]
            t.score = p.score
            if p.score < cfg.score_threshold:
                t.state = TrackState.LOST
                t.frames_since_seen = 1
                newly_lost.add(t.id)
                continue
            t.box = p.box
            t.history.append((frame_index, p.box))
            self._absorb(t, refined[t.id])

        newly_lost |= self._merge_duplicates(frame)
        still_active = self.active()
        unclaimed = [
            k for k, d in enumerate(detections)
            if all(iou(d.box, t.box) < cfg.claim_iou for t in still_active)
        ]

        # re-identify lost tracks among unclaimed detections
        lost = sorted(self.lost(), key=lambda t: t.id)
        used: set[int] = set()
        if lost and unclaimed:
            det_embeds = {k: self._embed(frame, detections[k].box) for k in unclaimed}
            cost = np.array([
                [cosine_distance(t.pooled, mem.pool(det_embeds[k])) for k in unclaimed] for t in lost
            ])
            for r, c in hungarian(cost).items():
                if cost[r, c] < cfg.reid_threshold:
                    t, k = lost[r], unclaimed[c]
                    used.add(k)
                    t.state = TrackState.ACTIVE
                    t.frames_since_seen = 0
                    t.box = detections[k].box
                    t.score = detections[k].confidence
                    t.history.append((frame_index, t.box))
                    self._absorb(t, det_embeds[k])
                    newly_lost.discard(t.id)
                    log.debug("frame %d: re-identified track %d", frame_index, t.id)

        for k in unclaimed:
            d = detections[k]
            if k in used or d.confidence < cfg.det_conf_threshold:
                continue
            state = mem.init_state(roi_extract(frame, d.box), self.model.memory)
            t = Track(self.next_id, d.box, state, score=d.confidence)
            t.history.append((frame_index, d.box))
            self.next_id += 1
            self.tracks.append(t)

        for t in self.lost():
            if t.id in newly_lost:
                continue
            t.frames_since_seen += 1
            if t.frames_since_seen > cfg.patience:
                t.state = TrackState.REMOVED

        return [
            FrameOutput(frame_index, t.id, t.box, t.score)
            for t in sorted(self.active(), key=lambda t: t.id)
        ]


def run_sequence(model: Model, cfg: TrackerConfig, frames: Sequence[np.ndarray],
                 detections: Sequence[Sequence[Detection]]) -> list[FrameOutput]:
    tracker = Tracker(model, cfg)
    out: list[FrameOutput] = []
    for k, (frame, dets) in enumerate(zip(frames, detections), 1):
        out.extend(tracker.step(k, frame, dets))
    return out

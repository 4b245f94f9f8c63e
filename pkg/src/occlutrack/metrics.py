"""CLEAR MOT, IDF1 and the occlusion-level profile.

Ground truth and hypotheses are any iterables of rows with ``frame``, ``id``
and ``box`` attributes (gt rows used by :func:`occlusion_profile` also need
``visibility``), so parsed files and live tracker output evaluate the same way.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .geometry import iou
from .tracker import hungarian

# cost for pairs below the IoU threshold; large enough that the solver always
# prefers one more admissible match over any cost saving among admissible ones
_FORBIDDEN = 1e6


@dataclass(frozen=True)
class EvalResult:
    mota: float
    idf1: float
    fp: int
    fn: int
    ids: int
    gt_count: int
    idtp: int = 0
    hyp_count: int = 0

    @classmethod
    def from_counts(cls, fp: int, fn: int, ids: int, gt_count: int, idtp: int, hyp_count: int) -> "EvalResult":
        mota = 1.0 - (fn + fp + ids) / gt_count if gt_count else math.nan
        denom = gt_count + hyp_count
        return cls(mota, 2.0 * idtp / denom if denom else 1.0, fp, fn, ids, gt_count, idtp, hyp_count)

    @staticmethod
    def merge(results: Iterable["EvalResult"]) -> "EvalResult":
        """Sum counts over sequences, then recompute the ratios."""
        results = list(results)
        keys = ("fp", "fn", "ids", "gt_count", "idtp", "hyp_count")
        return EvalResult.from_counts(*(sum(getattr(r, k) for r in results) for k in keys))


def _by_frame(rows) -> dict[int, list]:
    out: dict[int, list] = {}
    for r in rows:
        out.setdefault(int(r.frame), []).append(r)
    for f, rs in out.items():
        ids = [r.id for r in rs]
        if len(set(ids)) != len(ids):
            raise ValueError(f"frame {f}: duplicate ids {sorted(ids)}")
    return out


def _check_threshold(t: float) -> None:
    if not 0.0 < t <= 1.0:
        raise ValueError(f"IoU threshold must lie in (0, 1], got {t}")


def match_frame(gts: Sequence, hyps: Sequence, carried: dict, threshold: float) -> dict:
    """One frame of CLEAR matching: ``gt id -> hyp id``.

    Pairs in ``carried`` (previous frame's matches) survive if both are present
    and still overlap by at least ``threshold``; the rest are matched by a
    minimum ``1 - IoU`` assignment restricted to admissible pairs.
    """
    g_by_id = {g.id: g for g in gts}
    h_by_id = {h.id: h for h in hyps}
    matched = {}
    for gid, hid in carried.items():
        if gid in g_by_id and hid in h_by_id and iou(g_by_id[gid].box, h_by_id[hid].box) >= threshold:
            matched[gid] = hid
    taken = set(matched.values())
    rest_g = [g for g in gts if g.id not in matched]
    rest_h = [h for h in hyps if h.id not in taken]
    if rest_g and rest_h:
        ious = np.array([[iou(g.box, h.box) for h in rest_h] for g in rest_g])
        cost = np.where(ious >= threshold, 1.0 - ious, _FORBIDDEN)
        for r, c in hungarian(cost).items():
            if ious[r, c] >= threshold:
                matched[rest_g[r].id] = rest_h[c].id
    return matched


def clear_mot_counts(gt, hyp, threshold: float = 0.5) -> tuple[int, int, int, int, list[dict]]:
    """``(fp, fn, ids, gt_count, per-frame matches)``."""
    _check_threshold(threshold)
    g_frames, h_frames = _by_frame(gt), _by_frame(hyp)
    fp = fn = ids = n_gt = 0
    last_hyp: dict = {}
    prev: dict = {}
    prev_frame = None
    history = []
    for f in sorted(set(g_frames) | set(h_frames)):
        gts, hyps = g_frames.get(f, []), h_frames.get(f, [])
        carried = prev if prev_frame == f - 1 else {}
        m = match_frame(gts, hyps, carried, threshold)
        n_gt += len(gts)
        fn += len(gts) - len(m)
        fp += len(hyps) - len(m)
        for gid, hid in m.items():
            if gid in last_hyp and last_hyp[gid] != hid:
                ids += 1
            last_hyp[gid] = hid
        history.append(m)
        prev, prev_frame = m, f
    return fp, fn, ids, n_gt, history


def idtp(gt, hyp, threshold: float = 0.5) -> int:
    """Identity true positives under the best one-to-one gt-id / hyp-id pairing."""
    _check_threshold(threshold)
    g_ids = sorted({r.id for r in gt})
    h_ids = sorted({r.id for r in hyp})
    if not g_ids or not h_ids:
        return 0
    gi = {g: k for k, g in enumerate(g_ids)}
    hi = {h: k for k, h in enumerate(h_ids)}
    overlap = np.zeros((len(g_ids), len(h_ids)), dtype=np.int64)
    h_frames = _by_frame(hyp)
    for g in gt:
        for h in h_frames.get(int(g.frame), []):
            if iou(g.box, h.box) >= threshold:
                overlap[gi[g.id], hi[h.id]] += 1
    assign = hungarian(-overlap.astype(np.float64))
    return int(sum(overlap[r, c] for r, c in assign.items()))


def idf1(gt, hyp, threshold: float = 0.5) -> float:
    """``2 IDTP / (|gt| + |hyp|)``; 1.0 when both are empty."""
    gt, hyp = list(gt), list(hyp)
    denom = len(gt) + len(hyp)
    return 2.0 * idtp(gt, hyp, threshold) / denom if denom else 1.0


def clear_mot(gt, hyp, threshold: float = 0.5) -> EvalResult:
    """CLEAR MOT counts plus IDF1. MOTA is NaN when there is no ground truth."""
    gt, hyp = list(gt), list(hyp)
    fp, fn, ids, n_gt, _ = clear_mot_counts(gt, hyp, threshold)
    return EvalResult.from_counts(fp, fn, ids, n_gt, idtp(gt, hyp, threshold), len(hyp))


# ---------------------------------------------------------------- occlusion profile


@dataclass
class OcclusionProfile:
    bins: int = 10
    occurrences: np.ndarray = field(default=None)
    tracked: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.occurrences is None:
            self.occurrences = np.zeros(self.bins, dtype=np.int64)
        if self.tracked is None:
            self.tracked = np.zeros(self.bins, dtype=np.int64)

    @property
    def edges(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.bins + 1)

    @property
    def fractions(self) -> np.ndarray:
        """Tracked fraction per bin; NaN for empty bins."""
        occ = self.occurrences.astype(np.float64)
        return np.divide(self.tracked, occ, out=np.full(self.bins, np.nan), where=occ > 0)

    def __add__(self, other: "OcclusionProfile") -> "OcclusionProfile":
        if other.bins != self.bins:
            raise ValueError("cannot add profiles with different binning")
        return OcclusionProfile(self.bins, self.occurrences + other.occurrences, self.tracked + other.tracked)

    def pooled_fraction(self, lo: float, hi: float = 1.0) -> float:
        """Tracked fraction over all bins whose range lies within ``[lo, hi]``."""
        e = self.edges
        sel = (e[:-1] >= lo - 1e-12) & (e[1:] <= hi + 1e-12)
        occ = int(self.occurrences[sel].sum())
        return float(self.tracked[sel].sum()) / occ if occ else math.nan


def occlusion_bin(visibility: float, bins: int = 10) -> int:
    """Bin of occlusion level ``1 - visibility``; the last bin is closed at 100%."""
    if not 0.0 <= visibility <= 1.0:
        raise ValueError(f"visibility must lie in [0, 1], got {visibility}")
    # round first so that e.g. visibility 0.9 lands in [10%, 20%) despite 1 - 0.9 < 0.1
    k = math.floor(round((1.0 - visibility) * bins, 9))
    return min(k, bins - 1)


def occlusion_profile(gt, hyp, bins: int = 10, threshold: float = 0.5) -> OcclusionProfile:
    """Per occlusion bin: gt box count and how many overlap any same-frame hyp box."""
    if bins < 1:
        raise ValueError("need at least one bin")
    prof = OcclusionProfile(bins)
    h_frames: dict[int, list] = {}
    for h in hyp:
        h_frames.setdefault(int(h.frame), []).append(h.box)
    for g in gt:
        k = occlusion_bin(g.visibility, bins)
        prof.occurrences[k] += 1
        if any(iou(g.box, b) >= threshold for b in h_frames.get(int(g.frame), [])):
            prof.tracked[k] += 1
    return prof


# ---------------------------------------------------------------- reporting


def _f(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.6f}"


def eval_csv(rows: Sequence[tuple[str, EvalResult]]) -> str:
    lines = ["variant,mota,idf1,fp,fn,ids,gt_count"]
    for name, r in rows:
        lines.append(f"{name},{_f(r.mota)},{_f(r.idf1)},{r.fp},{r.fn},{r.ids},{r.gt_count}")
    return "\n".join(lines) + "\n"


def occlusion_csv(rows: Sequence[tuple[str, OcclusionProfile]]) -> str:
    lines = ["bin_low,bin_high,occurrences,tracked_fraction,variant"]
    for name, p in rows:
        e, fr = p.edges, p.fractions
        for k in range(p.bins):
            lines.append(f"{e[k]:.1f},{e[k + 1]:.1f},{p.occurrences[k]},{_f(fr[k])},{name}")
    return "\n".join(lines) + "\n"


def format_table(header: Sequence[str], rows: Sequence[Sequence], widths: Optional[Sequence[int]] = None) -> str:
    """Plain fixed-width table for terminal output."""
    cells = [[str(h) for h in header]] + [[c if isinstance(c, str) else
                                           (f"{c:.4f}" if isinstance(c, float) else str(c)) for c in r]
                                          for r in rows]
    widths = widths or [max(len(r[k]) for r in cells) for k in range(len(header))]
    fmt = "  ".join(f"{{:>{w}}}" for w in widths)
    out = [fmt.format(*cells[0]), "  ".join("-" * w for w in widths)]
    out += [fmt.format(*r) for r in cells[1:]]
    return "\n".join(out) + "\n"

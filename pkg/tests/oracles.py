"""Exhaustive reference implementations for small evaluation instances."""
from itertools import permutations

import numpy as np

from occlutrack.geometry import BBox, iou
from occlutrack.motio import GtRecord, ResultRecord


def partial_matchings(left, right, allowed):
    """Every one-to-one pairing of ``left`` into ``right`` using only ``allowed`` pairs."""
    if not left:
        yield {}
        return
    head, tail = left[0], left[1:]
    for rest in partial_matchings(tail, right, allowed):
        yield rest
        used = set(rest.values())
        for r in right:
            if r not in used and (head, r) in allowed:
                yield {**rest, head: r}


def brute_clear_mot(gt, hyp, threshold=0.5):
    """(fp, fn, ids, gt_count) by enumerating every admissible matching per frame."""
    frames = sorted({r.frame for r in gt} | {r.frame for r in hyp})
    fp = fn = ids = n_gt = 0
    last, prev, prev_frame = {}, {}, None
    for f in frames:
        g = {r.id: r.box for r in gt if r.frame == f}
        h = {r.id: r.box for r in hyp if r.frame == f}
        m = {}
        if prev_frame == f - 1:
            m = {gi: hi for gi, hi in prev.items() if gi in g and hi in h and iou(g[gi], h[hi]) >= threshold}
        rest_g = [k for k in g if k not in m]
        rest_h = [k for k in h if k not in m.values()]
        allowed = {(a, b) for a in rest_g for b in rest_h if iou(g[a], h[b]) >= threshold}
        best, best_key = {}, (0, 0.0)
        for cand in partial_matchings(rest_g, rest_h, allowed):
            key = (len(cand), -sum(1.0 - iou(g[a], h[b]) for a, b in cand.items()))
            if key > best_key:
                best, best_key = cand, key
        m.update(best)
        n_gt += len(g)
        fn += len(g) - len(m)
        fp += len(h) - len(m)
        for gi, hi in m.items():
            if gi in last and last[gi] != hi:
                ids += 1
            last[gi] = hi
        prev, prev_frame = m, f
    return fp, fn, ids, n_gt


def brute_idtp(gt, hyp, threshold=0.5):
    g_ids = sorted({r.id for r in gt})
    h_ids = sorted({r.id for r in hyp})
    overlap = {(a, b): 0 for a in g_ids for b in h_ids}
    for g in gt:
        for h in hyp:
            if h.frame == g.frame and iou(g.box, h.box) >= threshold:
                overlap[g.id, h.id] += 1
    best = 0
    if len(g_ids) <= len(h_ids):
        for perm in permutations(h_ids, len(g_ids)):
            best = max(best, sum(overlap[a, b] for a, b in zip(g_ids, perm)))
    else:
        for perm in permutations(g_ids, len(h_ids)):
            best = max(best, sum(overlap[a, b] for a, b in zip(perm, h_ids)))
    return best


def fuzz_instance(seed, max_frames=5, max_ids=4):
    """Random gt and jittered hypotheses crowded into a small area, so matches compete."""
    rng = np.random.default_rng(seed)
    n_frames = int(rng.integers(1, max_frames + 1))
    n_gt = int(rng.integers(1, max_ids + 1))
    n_hyp_ids = int(rng.integers(1, max_ids + 1))
    gt, hyp = [], []
    for f in range(1, n_frames + 1):
        present = [k for k in range(1, n_gt + 1) if rng.random() < 0.85]
        hyp_ids = list(rng.permutation(np.arange(1, n_hyp_ids + 1)))
        for k in present:
            box = BBox(*(rng.uniform(0, 25, 2)), *(rng.uniform(15, 25, 2)))
            gt.append(GtRecord(f, k, box, visibility=float(rng.uniform(0, 1))))
            if hyp_ids and rng.random() < 0.8:
                jit = BBox(box.left + rng.normal(0, 3), box.top + rng.normal(0, 3), box.width, box.height)
                hyp.append(ResultRecord(f, int(hyp_ids.pop()), jit))
        for hid in hyp_ids:
            if rng.random() < 0.3:
                hyp.append(ResultRecord(f, int(hid), BBox(*(rng.uniform(0, 40, 2)), *(rng.uniform(15, 25, 2)))))
    return gt, hyp

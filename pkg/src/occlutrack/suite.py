"""Seeded scenario suites and ablation runs over tracker variants."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from . import metrics
from .geometry import iou
from .motio import scenario_gt
from .sim import Scenario, SimConfig, generate, render_frame
from .tracker import FrameOutput, TrackerConfig, run_sequence
from .weights import Model

# The six ablation rows, plus the everything-off baseline used for drift checks.
VARIANTS: dict[str, dict] = {
    "full": {},
    "no_ta_da": {"use_ta": False, "use_da": False},
    "ta_only": {"use_da": False},
    "da_only": {"use_ta": False},
    "no_adaptive_weight": {"adaptive_weight": False},
    "no_memory": {"use_memory": False},
}
DISABLED = {"use_ta": False, "use_da": False, "use_memory": False}
ALL_VARIANTS = {**VARIANTS, "disabled": DISABLED}

PEAK_RANGE = (0.7, 0.95)


def variant_config(name: str, base: TrackerConfig = TrackerConfig()) -> TrackerConfig:
    try:
        return replace(base, **ALL_VARIANTS[name])
    except KeyError:
        raise KeyError(f"unknown variant {name!r}; choose from {sorted(ALL_VARIANTS)}") from None


def crossing_suite(n: int = 100, seed: int = 0, peak_range: tuple[float, float] = PEAK_RANGE,
                   base: SimConfig = SimConfig()) -> list[Scenario]:
    """``n`` crossing scenarios; scenario k uses seed ``seed + k`` and a seeded peak IoU."""
    lo, hi = peak_range
    out = []
    for k in range(n):
        s = seed + k
        peak = lo + (hi - lo) * np.random.default_rng([s, 5]).random()
        out.append(generate(replace(base, pattern="crossing", peak_iou=float(peak)), seed=s))
    return out


def render_all(scen: Scenario) -> list[np.ndarray]:
    return [render_frame(scen, t) for t in range(scen.frames)]


def own_ids(scen: Scenario, outputs: Sequence[FrameOutput], threshold: float = 0.5) -> dict[int, int]:
    """Object id -> hypothesis id that first covered it (IoU >= threshold), in frame order."""
    own: dict[int, int] = {}
    for o in sorted(outputs, key=lambda o: (o.frame, o.id)):
        for obj in scen.objects:
            if obj.id in own or o.id in own.values():
                continue
            if iou(o.box, obj.boxes[o.frame - 1]) >= threshold:
                own[obj.id] = o.id
                break
    return own


def tracked_through(scen: Scenario, outputs: Sequence[FrameOutput], offset: int = 2,
                    threshold: float = 0.5) -> tuple[int, int]:
    """(still tracked, total) objects ``offset`` frames after the peak, each by its own id."""
    if scen.peak_frame is None:
        raise ValueError("scenario has no occlusion peak")
    t = min(scen.peak_frame + offset, scen.frames - 1)
    own = own_ids(scen, outputs, threshold)
    at = {o.id: o.box for o in outputs if o.frame == t + 1}
    hit = sum(
        1 for obj in scen.objects
        if obj.id in own and own[obj.id] in at and iou(at[own[obj.id]], obj.boxes[t]) >= threshold
    )
    return hit, len(scen.objects)


@dataclass
class VariantReport:
    name: str
    result: metrics.EvalResult
    profile: metrics.OcclusionProfile
    through: int
    total: int

    @property
    def through_rate(self) -> float:
        return self.through / self.total if self.total else float("nan")


def run_configs(model: Model, scenarios: Sequence[Scenario], configs: dict[str, TrackerConfig],
                frames: Optional[list] = None) -> dict[str, VariantReport]:
    """Track every scenario under each named config and collect metrics."""
    frames = frames if frames is not None else [render_all(s) for s in scenarios]
    gts = [scenario_gt(s) for s in scenarios]
    reports = {}
    for name, cfg in configs.items():
        results, prof, hit, total = [], metrics.OcclusionProfile(), 0, 0
        for scen, fr, gt in zip(scenarios, frames, gts):
            out = run_sequence(model, cfg, fr, scen.detections)
            results.append(metrics.clear_mot(gt, out))
            prof = prof + metrics.occlusion_profile(gt, out)
            if scen.peak_frame is not None:
                h, n = tracked_through(scen, out)
                hit, total = hit + h, total + n
        reports[name] = VariantReport(name, metrics.EvalResult.merge(results), prof, hit, total)
    return reports


def run_variants(model: Model, scenarios: Sequence[Scenario], names: Iterable[str] = VARIANTS,
                 base: TrackerConfig = TrackerConfig(), frames: Optional[list] = None) -> dict[str, VariantReport]:
    return run_configs(model, scenarios, {n: variant_config(n, base) for n in names}, frames)

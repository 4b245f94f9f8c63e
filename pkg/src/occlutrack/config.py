"""Key-value run configuration with a single table of documented defaults.

File syntax: one ``key = value`` per line, ``#`` starts a comment, blank lines
ignored. Unknown keys and unparsable values are errors.
"""
from __future__ import annotations

import hashlib
from dataclasses import fields, replace
from pathlib import Path
from typing import Any, Mapping, Optional

from .sim import SimConfig
from .tracker import TrackerConfig
from .trainer import AttentionTrainConfig, TrainConfig


class ConfigError(ValueError):
    pass


# key: (default, description)
DEFAULTS: dict[str, tuple[Any, str]] = {
    "sim.n_objects": (2, "objects per scenario"),
    "sim.pattern": ("crossing", "motion pattern: parallel, crossing or follow"),
    "sim.peak_iou": (0.8, "target peak pairwise IoU for crossing/follow"),
    "sim.frames": (30, "frames per scenario"),
    "sim.world_width": (256, "world width in pixels (multiple of 8)"),
    "sim.world_height": (160, "world height in pixels (multiple of 8)"),
    "sim.obj_width": (32, "object width in pixels"),
    "sim.obj_height": (64, "object height in pixels"),
    "sim.min_speed": (3, "slowest crossing speed, px/frame"),
    "sim.max_speed": (5, "fastest crossing speed, px/frame"),
    "sim.noise_sigma": (0.1, "feature noise standard deviation"),
    "sim.det_jitter": (1.0, "detection box jitter, px"),
    "sim.dropout": ("default", "detection miss law: default, never, or threshold:<v>"),
    "tracker.o_min": (0.2, "IoU below which attention is gated off"),
    "tracker.reid_threshold": (0.4, "max cosine distance to re-identify a lost track"),
    "tracker.score_threshold": (0.6, "min prediction score (pooled cosine) to stay active"),
    "tracker.patience": (30, "frames a lost track waits before removal"),
    "tracker.search_radius": (8, "position search radius, px"),
    "tracker.det_conf_threshold": (0.5, "min detection confidence to start a track"),
    "tracker.claim_iou": (0.5, "IoU at which a track claims a detection or two tracks count as duplicates"),
    "eval.iou_threshold": (0.5, "match threshold for CLEAR MOT, IDF1 and profiles"),
    "eval.bins": (10, "occlusion profile bins"),
    "suite.scenarios": (100, "crossing scenarios in the ablation suite"),
    "suite.peak_low": (0.7, "lowest peak IoU in the suite"),
    "suite.peak_high": (0.95, "highest peak IoU in the suite"),
    "train.steps": (600, "identity training steps"),
    "train.learning_rate": (0.05, "identity training SGD step"),
    "train.margin": (0.3, "triplet margin"),
    "train.batch": (6, "identities per batch"),
    "train.n_identities": (10, "synthetic identities"),
    "train.seq_len": (3, "patches per training sequence"),
    "train.occlusion_prob": (0.5, "chance a training patch is occluded"),
    "train.attention_steps": (300, "attention training steps (0 skips)"),
    "train.attention_learning_rate": (0.1, "attention training SGD step"),
}


def _coerce(key: str, raw: str) -> Any:
    default = DEFAULTS[key][0]
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "on", "off", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "on", "1")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def parse_config(text: str) -> dict[str, Any]:
    """Overrides from a config file; keys must appear in :data:`DEFAULTS`."""
    out: dict[str, Any] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


class RunConfig:
    """Effective configuration: defaults overlaid by a file, then by overrides."""

    def __init__(self, overrides: Optional[Mapping[str, Any]] = None):
        self.values = {k: v for k, (v, _) in DEFAULTS.items()}
        for k, v in (overrides or {}).items():
            if k not in DEFAULTS:
                raise ConfigError(f"unknown key {k!r}")
            self.values[k] = v

    @classmethod
    def load(cls, path: Optional[str] = None) -> "RunConfig":
        return cls(parse_config(Path(path).read_text()) if path else None)

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def canonical(self) -> str:
        return "".join(f"{k}={self.values[k]!r}\n" for k in sorted(self.values))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]

    def _section(self, prefix: str, cls, base):
        names = {f.name for f in fields(cls)}
        vals = {k[len(prefix):]: v for k, v in self.values.items()
                if k.startswith(prefix) and k[len(prefix):] in names}
        return replace(base, **vals)

    def sim(self) -> SimConfig:
        cfg = self._section("sim.", SimConfig, SimConfig())
        cfg.validate()
        return cfg

    def tracker(self, **flags) -> TrackerConfig:
        return replace(self._section("tracker.", TrackerConfig, TrackerConfig()), **flags)

    def train(self, seed: int) -> TrainConfig:
        return replace(self._section("train.", TrainConfig, TrainConfig()), seed=seed)

    def attention_train(self, seed: int) -> AttentionTrainConfig:
        return AttentionTrainConfig(learning_rate=self["train.attention_learning_rate"],
                                    steps=self["train.attention_steps"], seed=seed)


def defaults_table() -> str:
    width = max(len(k) for k in DEFAULTS)
    return "".join(f"{k:<{width}}  {v!r:<12}  {doc}\n" for k, (v, doc) in DEFAULTS.items())

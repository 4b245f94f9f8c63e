"""Occlusion-aware online multi-object tracking on synthetic feature scenes.

Submodules: ``tensor`` (numpy autograd), ``geometry``, ``attention``,
``memory``, ``trainer``, ``sim``, ``tracker``, ``motio``, ``metrics``,
``suite`` and ``cli``.
"""
from .geometry import BBox, adaptive_weight, iou
from .tracker import Tracker, TrackerConfig, run_sequence
from .weights import Model, WeightStore, load_default_model

__version__ = "0.1.0"

__all__ = ["BBox", "Model", "Tracker", "TrackerConfig", "WeightStore", "adaptive_weight", "iou",
           "load_default_model", "run_sequence"]

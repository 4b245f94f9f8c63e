"""Target / distractor non-local attention and the additive feature refinement.

The same ``theta``/``phi``/``rho`` 1x1 convolutions serve both the target and
the distractor branch. Attention rows are softmax-normalised over reference
locations.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import ConvLayer, ShapeError, Tensor


@dataclass
class AttentionWeights:
    theta: ConvLayer
    phi: ConvLayer
    rho: ConvLayer

    def __post_init__(self):
        c = self.theta.in_channels
        for name in ("theta", "phi", "rho"):
            layer = getattr(self, name)
            if layer.size != 1 or layer.in_channels != c or layer.out_channels != c:
                raise ShapeError(f"attention.{name} must be a {c}->{c} 1x1 convolution")

    @property
    def channels(self) -> int:
        return self.theta.in_channels

    def layers(self) -> dict[str, ConvLayer]:
        return {"theta": self.theta, "phi": self.phi, "rho": self.rho}

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers().values() for p in layer.parameters()]

    @classmethod
    def random(cls, rng: np.random.Generator, channels: int, gain: float = 1.0) -> "AttentionWeights":
        return cls(*(ConvLayer.random(rng, channels, channels, 1, gain=gain) for _ in range(3)))


def attention_matrix(query, reference, w: AttentionWeights) -> Tensor:
    """Row-stochastic ``(..., HW, HW)`` matrix; row i attends over reference locations j."""
    query, reference = T.as_tensor(query), T.as_tensor(reference)
    if query.shape != reference.shape:
        raise ShapeError(f"non_local: query {query.shape} vs reference {reference.shape}")
    *lead, c, h, wd = query.shape
    q = T.reshape(T.conv2d(query, w.theta), (*lead, c, h * wd))
    k = T.reshape(T.conv2d(reference, w.phi), (*lead, c, h * wd))
    logits = T.matmul(T.transpose(q, (*range(len(lead)), len(lead) + 1, len(lead))), k)
    return T.softmax(logits, axis=-1)


def non_local(query, reference, w: AttentionWeights) -> Tensor:
    """``out_i = sum_j A[i, j] * rho(reference)_j`` with ``A = softmax_j <theta(q)_i, phi(r)_j>``."""
    query, reference = T.as_tensor(query), T.as_tensor(reference)
    attn = attention_matrix(query, reference, w)
    *lead, c, h, wd = reference.shape
    v = T.reshape(T.conv2d(reference, w.rho), (*lead, c, h * wd))
    out = T.matmul(v, T.transpose(attn, (*range(len(lead)), len(lead) + 1, len(lead))))
    return T.reshape(out, reference.shape)


def refine(feature, query_embed, target_ref, distractor_ref: Optional[object], w: float,
           weights: AttentionWeights, use_target: bool = True, use_distractor: bool = True) -> Tensor:
    """``feature + w * (TA - DA)``.

    ``use_target``/``use_distractor`` switch a branch off for ablations. With
    ``w == 0`` (or both branches off) the input feature is returned untouched.
    """
    feature = T.as_tensor(feature)
    if not 0.0 <= w <= 1.0:
        raise ValueError(f"attention weight must lie in [0, 1], got {w}")
    for other in (query_embed, target_ref, distractor_ref):
        if other is not None and T.as_tensor(other).shape != feature.shape:
            raise ShapeError(f"refine: shape mismatch {T.as_tensor(other).shape} vs {feature.shape}")
    has_da = use_distractor and distractor_ref is not None
    if w == 0.0 or not (use_target or has_da):
        return feature
    delta = None
    if use_target:
        delta = non_local(query_embed, target_ref, weights)
    if has_da:
        da = non_local(query_embed, distractor_ref, weights)
        delta = T.scale(da, -1.0) if delta is None else T.sub(delta, da)
    return T.add(feature, T.scale(delta, w))

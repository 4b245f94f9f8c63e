"""Finite-difference checks for every differentiable building block.

Each case builds small seeded inputs and weights and returns a closure that
recomputes a scalar loss, together with the tensors to perturb. The scalar is
``sum(output * R)`` for a fixed random ``R`` so every output element matters.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import attention as att
from . import memory as mem
from . import tensor as T
from .attention import AttentionWeights
from .memory import MemoryWeights
from .tensor import ConvLayer, Tensor
from .trainer import batch_ce, batch_hard_triplet, ce_loss, triplet_loss

TOLERANCE = 1e-4
EPSILON = 1e-5

Case = Callable[[np.random.Generator], tuple[Callable[[], Tensor], list[Tensor]]]


def _param(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def _conv_case(k: int) -> Case:
    def case(rng):
        x = _param(rng, 3, 5, 6)
        layer = ConvLayer(_param(rng, 4, 3, k, k, scale=0.5), _param(rng, 4, scale=0.1))
        r = rng.normal(size=(4, 5, 6))
        return (lambda: T.sum_(T.mul(T.conv2d(x, layer), r))), [x, layer.kernel, layer.bias]
    return case


def _memory(rng, channels=3) -> MemoryWeights:
    w = MemoryWeights.random(rng, channels, hidden=4)
    # zero biases put pre-activations exactly on the ReLU kink wherever a
    # whole input column is dead; random biases keep the probe point generic
    for layer in w.layers().values():
        layer.bias.data[:] = rng.normal(0.0, 0.3, size=layer.bias.shape)
    return w


def _init_case(rng):
    w = _memory(rng)
    x = _param(rng, 3, 4, 4)
    r = rng.normal(size=(3, 4, 4))
    params = [x] + [p for layer in w.init_layers for p in layer.parameters()]
    return (lambda: T.sum_(T.mul(mem.init_state(x, w).state, r))), params


def _gru_case(gate: str) -> Case:
    def case(rng):
        w = _memory(rng)
        h = Tensor(np.tanh(rng.normal(size=(3, 4, 4))), requires_grad=True)
        x = Tensor(np.tanh(rng.normal(size=(3, 4, 4))), requires_grad=True)
        layer = getattr(w, f"gru_{gate}")
        r = rng.normal(size=(3, 4, 4))
        return (lambda: T.sum_(T.mul(mem.gru_step(h, x, w), r))), [h, x, *layer.parameters()]
    return case


def _attention_case(rng):
    c = 3
    aw = AttentionWeights.random(rng, c)
    feat = _param(rng, c, 4, 4)
    query = _param(rng, c, 4, 4)
    t_ref = _param(rng, c, 4, 4)
    d_ref = _param(rng, c, 4, 4)
    wt = float(rng.uniform(0.1, 1.0))
    r = rng.normal(size=(c, 4, 4))
    fn = lambda: T.sum_(T.mul(att.refine(feat, query, t_ref, d_ref, wt, aw), r))  # noqa: E731
    return fn, [feat, query, t_ref, d_ref, *aw.parameters()]


def _ce_case(rng):
    logits = _param(rng, 5)
    label = int(rng.integers(5))
    return (lambda: ce_loss(logits, label)), [logits]


def _triplet_case(rng):
    a, p, n = _param(rng, 4), _param(rng, 4), _param(rng, 4)
    # margin chosen so the hinge is active with a comfortable gap from its kink
    d = float(np.linalg.norm(a.data - p.data) - np.linalg.norm(a.data - n.data))
    margin = max(0.3, 0.5 - d)
    return (lambda: triplet_loss(a, p, n, margin)), [a, p, n]


def _batch_case(rng):
    labels = np.repeat(np.arange(3), 2)
    pooled = _param(rng, 6, 4)
    weight, bias = _param(rng, 3, 4, scale=0.3), _param(rng, 3, scale=0.1)
    fn = lambda: T.add(batch_ce(pooled, labels, weight, bias),  # noqa: E731
                       batch_hard_triplet(pooled, labels, margin=3.0))
    return fn, [pooled, weight, bias]


CASES: dict[str, Case] = {
    "conv2d_3x3": _conv_case(3),
    "conv2d_1x1": _conv_case(1),
    "memory_init_layers": _init_case,
    "gru_update_gate": _gru_case("update"),
    "gru_reset_gate": _gru_case("reset"),
    "gru_candidate": _gru_case("candidate"),
    "attention_block": _attention_case,
    "cross_entropy": _ce_case,
    "triplet": _triplet_case,
    "batch_losses": _batch_case,
}


@dataclass
class CheckResult:
    op: str
    max_error: float
    seeds: int

    @property
    def ok(self) -> bool:
        return self.max_error <= TOLERANCE


def run_case(name: str, seeds=range(20), epsilon: float = EPSILON) -> CheckResult:
    worst = 0.0
    seeds = list(seeds)
    for s in seeds:
        fn, params = CASES[name](np.random.default_rng([s, 17]))
        worst = max(worst, T.grad_check(fn, params, epsilon))
    return CheckResult(name, worst, len(seeds))


def run_all(seeds=range(20), epsilon: float = EPSILON) -> list[CheckResult]:
    return [run_case(name, seeds, epsilon) for name in CASES]

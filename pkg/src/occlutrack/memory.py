"""Identity memory: state initialisation, convolutional GRU update, pooling."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ConvLayer, ShapeError, Tensor

EMBED_CHANNELS = 16
EMBED_SIZE = 8


@dataclass
class MemoryWeights:
    init_layers: list[ConvLayer]
    gru_update: ConvLayer
    gru_reset: ConvLayer
    gru_candidate: ConvLayer

    def __post_init__(self):
        if len(self.init_layers) != 4:
            raise ShapeError(f"need 4 init layers, got {len(self.init_layers)}")
        c = self.channels
        chain = c
        for i, layer in enumerate(self.init_layers, 1):
            if layer.in_channels != chain:
                raise ShapeError(f"init layer {i} expects {layer.in_channels} channels, chain has {chain}")
            chain = layer.out_channels
        if chain != c:
            raise ShapeError("init layers must map C channels back to C channels")
        for name in ("gru_update", "gru_reset", "gru_candidate"):
            layer = getattr(self, name)
            if layer.in_channels != 2 * c or layer.out_channels != c or layer.size != 3:
                raise ShapeError(f"{name} must be a 3x3 conv from {2 * c} to {c} channels")

    @property
    def channels(self) -> int:
        return self.init_layers[0].in_channels

    def layers(self) -> dict[str, ConvLayer]:
        named = {f"init.{i}": layer for i, layer in enumerate(self.init_layers, 1)}
        named.update(
            {"gru.update": self.gru_update, "gru.reset": self.gru_reset, "gru.candidate": self.gru_candidate}
        )
        return named

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers().values() for p in layer.parameters()]

    @classmethod
    def near_identity(cls, rng: np.random.Generator, channels: int = EMBED_CHANNELS,
                      gain: float = 2.0, noise: float = 0.05, update_bias: float = -1.5,
                      cand_gain: float = 1.3) -> "MemoryWeights":
        """Init layers start as ``tanh(gain * x)`` routed through a +/- ReLU split.

        The hidden width is ``2 * channels``; small Gaussian noise breaks symmetry.
        """
        eye = np.eye(channels)
        split = np.concatenate([eye, -eye])  # (2C, C)
        kernels = [np.zeros((2 * channels, channels, 3, 3)), np.eye(2 * channels)[:, :, None, None],
                   np.eye(2 * channels)[:, :, None, None], gain * split.T[:, :, None, None]]
        kernels[0][:, :, 1, 1] = split
        init = []
        for k in kernels:
            k = k + rng.normal(0.0, noise / np.sqrt(k.shape[1] * k.shape[2] * k.shape[3]), size=k.shape)
            init.append(ConvLayer(Tensor(k, requires_grad=True), Tensor(np.zeros(k.shape[0]), requires_grad=True)))
        # GRU starts as a moving average: candidate copies the input, update gate
        # is a constant sigmoid(update_bias), reset passes the state through.
        def gate(center: np.ndarray, bias: float) -> ConvLayer:
            k = np.zeros((channels, 2 * channels, 3, 3))
            k[:, :, 1, 1] = center
            k += rng.normal(0.0, noise / np.sqrt(2 * channels * 9), size=k.shape)
            return ConvLayer(Tensor(k, requires_grad=True),
                             Tensor(np.full(channels, float(bias)), requires_grad=True))

        zero = np.zeros((channels, 2 * channels))
        return cls(
            init_layers=init,
            gru_update=gate(zero, update_bias),
            gru_reset=gate(zero, 2.0),
            gru_candidate=gate(np.concatenate([cand_gain * eye, 0 * eye], axis=1), 0.0),
        )

    @classmethod
    def random(cls, rng: np.random.Generator, channels: int = EMBED_CHANNELS,
               hidden: int = 2 * EMBED_CHANNELS, update_bias: float = 0.0) -> "MemoryWeights":
        init = [ConvLayer.random(rng, channels, hidden, 3, gain=np.sqrt(2.0))]
        init += [ConvLayer.random(rng, hidden, hidden, 1, gain=np.sqrt(2.0)) for _ in range(2)]
        init += [ConvLayer.random(rng, hidden, channels, 1)]
        return cls(
            init_layers=init,
            gru_update=ConvLayer.random(rng, 2 * channels, channels, 3, bias=update_bias),
            gru_reset=ConvLayer.random(rng, 2 * channels, channels, 3),
            gru_candidate=ConvLayer.random(rng, 2 * channels, channels, 3),
        )


@dataclass
class MemoryState:
    state: Tensor
    steps: int = field(default=1)


def _check_input(x: Tensor, w: MemoryWeights) -> None:
    if x.ndim not in (3, 4) or x.shape[-3] != w.channels:
        raise ShapeError(f"expected (C={w.channels}, H, W) input, got {x.shape}")


def init_state(raw_embed, w: MemoryWeights) -> MemoryState:
    """Four convolutions, ReLU after the first three and tanh after the last."""
    x = T.as_tensor(raw_embed)
    _check_input(x, w)
    for layer in w.init_layers[:-1]:
        x = T.relu(T.conv2d(x, layer))
    return MemoryState(T.tanh(T.conv2d(x, w.init_layers[-1])))


def extract_embedding(raw_patch, w: MemoryWeights) -> Tensor:
    """Embedding of a single patch: the memory aggregated over a length-1 sequence."""
    return init_state(raw_patch, w).state


def gru_step(h, x, w: MemoryWeights) -> Tensor:
    h, x = T.as_tensor(h), T.as_tensor(x)
    if h.shape != x.shape:
        raise ShapeError(f"memory update: state {h.shape} vs input {x.shape}")
    axis = h.ndim - 3
    xh = T.concat([x, h], axis=axis)
    z = T.sigmoid(T.conv2d(xh, w.gru_update))
    r = T.sigmoid(T.conv2d(xh, w.gru_reset))
    cand = T.tanh(T.conv2d(T.concat([x, T.mul(r, h)], axis=axis), w.gru_candidate))
    # h' = (1 - z) * h + z * cand, written to keep h exact when z underflows to 0
    return T.add(h, T.mul(z, T.sub(cand, h)))


def update(memory: MemoryState, refined_embed, w: MemoryWeights) -> MemoryState:
    x = T.as_tensor(refined_embed)
    _check_input(x, w)
    return MemoryState(gru_step(memory.state, x, w), memory.steps + 1)


def aggregate(sequence, w: MemoryWeights) -> MemoryState:
    """Run a whole sequence: initialise on the first element, GRU-update on the rest."""
    seq = list(sequence)
    if not seq:
        raise ValueError("empty sequence")
    mem = init_state(seq[0], w)
    for x in seq[1:]:
        mem = update(mem, extract_embedding(x, w), w)
    return mem


def pool(embed) -> np.ndarray:
    """Spatial mean per channel, L2-normalised; an all-zero mean stays zero."""
    data = embed.data if isinstance(embed, Tensor) else np.asarray(embed, dtype=np.float64)
    v = data.mean(axis=(-2, -1))
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return np.divide(v, n, out=np.zeros_like(v), where=n > 0)


def pool_t(embed) -> Tensor:
    """Differentiable :func:`pool` for training (inputs assumed nonzero)."""
    embed = T.as_tensor(embed)
    v = T.mean(embed, axis=(-2, -1))
    n = T.sqrt(T.add(T.sum_(T.mul(v, v), axis=-1, keepdims=True), 1e-12))
    return T.mul(v, T.reciprocal(n))

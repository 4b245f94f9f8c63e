"""Named parameter container and its JSON file format.

File layout: one JSON object mapping tensor name to
``{"shape": [ints], "data": [row-major doubles]}``. Canonical names::

    attention.{theta,phi,rho}.{kernel,bias}
    memory.init.{1..4}.{kernel,bias}
    memory.gru.{update,reset,candidate}.{kernel,bias}
    classifier.{weight,bias}          (optional; training only)
"""
from __future__ import annotations

import hashlib
import json
from importlib import resources
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, MutableMapping, Optional

import numpy as np

from .attention import AttentionWeights
from .memory import EMBED_CHANNELS, MemoryWeights
from .tensor import ConvLayer, Tensor


class WeightStore(MutableMapping):
    """Ordered ``name -> Tensor`` mapping with a stable JSON encoding."""

    def __init__(self, tensors: Optional[dict[str, Tensor]] = None):
        self._t: dict[str, Tensor] = dict(tensors or {})

    def __getitem__(self, name: str) -> Tensor:
        return self._t[name]

    def __setitem__(self, name: str, value) -> None:
        self._t[name] = value if isinstance(value, Tensor) else Tensor(value)

    def __delitem__(self, name: str) -> None:
        del self._t[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._t)

    def __len__(self) -> int:
        return len(self._t)

    def to_json(self) -> str:
        doc = {
            name: {"shape": list(t.shape), "data": [float(v) for v in t.data.reshape(-1)]}
            for name, t in sorted(self._t.items())
        }
        return json.dumps(doc, indent=None, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "WeightStore":
        doc = json.loads(text)
        store = cls()
        for name, entry in doc.items():
            shape = tuple(int(s) for s in entry["shape"])
            data = np.asarray(entry["data"], dtype=np.float64)
            if data.size != int(np.prod(shape)):
                raise ValueError(f"{name}: {data.size} values do not fill shape {shape}")
            store[name] = Tensor(data.reshape(shape))
        return store

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "WeightStore":
        return cls.from_json(Path(path).read_text())

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


@dataclass
class Model:
    """All learnable pieces the tracker and trainer share."""

    memory: MemoryWeights
    attention: AttentionWeights
    classifier_weight: Optional[Tensor] = None
    classifier_bias: Optional[Tensor] = None

    @property
    def channels(self) -> int:
        return self.memory.channels

    @classmethod
    def random(cls, seed: int, channels: int = EMBED_CHANNELS, n_classes: int = 0) -> "Model":
        rng = np.random.default_rng(seed)
        memory = MemoryWeights.near_identity(rng, channels)
        attention = AttentionWeights.random(rng, channels)
        model = cls(memory, attention)
        if n_classes:
            model.classifier_weight = Tensor(rng.normal(0, 0.1, (n_classes, channels)), requires_grad=True)
            model.classifier_bias = Tensor(np.zeros(n_classes), requires_grad=True)
        return model

    def named_layers(self) -> dict[str, ConvLayer]:
        named = {f"attention.{k}": v for k, v in self.attention.layers().items()}
        named.update({f"memory.{k}": v for k, v in self.memory.layers().items()})
        return named

    def to_store(self) -> WeightStore:
        store = WeightStore()
        for name, layer in self.named_layers().items():
            store[f"{name}.kernel"] = layer.kernel
            store[f"{name}.bias"] = layer.bias
        if self.classifier_weight is not None:
            store["classifier.weight"] = self.classifier_weight
            store["classifier.bias"] = self.classifier_bias
        return store

    @classmethod
    def from_store(cls, store: WeightStore) -> "Model":
        def layer(name: str) -> ConvLayer:
            try:
                return ConvLayer(Tensor(store[f"{name}.kernel"].data.copy(), requires_grad=True),
                                 Tensor(store[f"{name}.bias"].data.copy(), requires_grad=True))
            except KeyError as exc:
                raise KeyError(f"weight store lacks {exc.args[0]}") from None

        memory = MemoryWeights(
            init_layers=[layer(f"memory.init.{i}") for i in range(1, 5)],
            gru_update=layer("memory.gru.update"),
            gru_reset=layer("memory.gru.reset"),
            gru_candidate=layer("memory.gru.candidate"),
        )
        attention = AttentionWeights(layer("attention.theta"), layer("attention.phi"), layer("attention.rho"))
        model = cls(memory, attention)
        if "classifier.weight" in store:
            model.classifier_weight = Tensor(store["classifier.weight"].data.copy(), requires_grad=True)
            model.classifier_bias = Tensor(store["classifier.bias"].data.copy(), requires_grad=True)
        return model


DEFAULT_WEIGHTS = "default_weights.json"


def load_default_model() -> Model:
    """Weights shipped with the package (see ``trainer.build_default_model``)."""
    text = resources.files("occlutrack").joinpath("data").joinpath(DEFAULT_WEIGHTS).read_text()
    return Model.from_store(WeightStore.from_json(text))

"""Desk-scale training of the embedding/memory network and the attention block.

Identity training follows the usual re-id recipe: pooled embeddings feed a
linear classifier (cross-entropy) and a batch-hard triplet loss, applied both
to single-patch embeddings and to memory states after aggregation. Patches
are cut from rendered synthetic scenes so they share the statistics of what
the tracker sees, including partial occluders and box misalignment.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import attention as att
from . import memory as mem
from . import tensor as T
from .geometry import BBox, iou, weight_from_iou
from .sim import Scenario, SimObject, render_frame
from .tensor import Tensor
from .tracker import roi_extract
from .weights import Model

log = logging.getLogger(__name__)

PATCH_WORLD = (96, 96)
TARGET_BOX = BBox(32, 16, 32, 64)


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, what: str = "loss"):
        super().__init__(f"non-finite {what} at step {step}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    margin: float = 0.3
    learning_rate: float = 0.05
    steps: int = 600
    batch: int = 6
    seed: int = 0
    n_identities: int = 10
    seqs_per_identity: int = 2
    seq_len: int = 3
    noise_sigma: float = 0.1
    occlusion_prob: float = 0.5

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("triplet margin must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.steps < 0 or self.batch < 2 or self.seqs_per_identity < 1 or self.seq_len < 1:
            raise ValueError("invalid batch geometry")
        if self.batch > self.n_identities:
            raise ValueError("batch cannot hold more identities than exist")


@dataclass
class IdentityBatch:
    patches: np.ndarray  # (N, L, C, 8, 8)
    labels: np.ndarray  # (N,)

    def __post_init__(self):
        uniq, counts = np.unique(self.labels, return_counts=True)
        if len(uniq) < 2:
            raise ValueError("an identity batch needs at least two identities")
        if self.patches.shape[1] * counts.min() < 2:
            raise ValueError("an identity batch needs at least two samples per identity")


@dataclass
class LossCurve:
    rows: list[tuple[int, float, float, float]] = field(default_factory=list)

    def append(self, step: int, ce: float, triplet: float) -> None:
        self.rows.append((step, ce, triplet, ce + triplet))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["step", "ce", "triplet", "total"])
        for step, ce, tri, total in self.rows:
            writer.writerow([step, repr(ce), repr(tri), repr(total)])
        return buf.getvalue()


# ---------------------------------------------------------------- losses


def ce_loss(logits, label: int) -> Tensor:
    logits = T.as_tensor(logits)
    if logits.data.size == 0:
        raise ValueError("empty logits")
    if not 0 <= label < logits.shape[-1]:
        raise IndexError(f"label {label} outside {logits.shape[-1]} classes")
    return T.scale(T.take(T.log_softmax(logits), label), -1.0)


def triplet_loss(anchor, positive, negative, margin: float) -> Tensor:
    anchor, positive, negative = T.as_tensor(anchor), T.as_tensor(positive), T.as_tensor(negative)
    if not anchor.shape == positive.shape == negative.shape:
        raise ValueError("triplet inputs must share one length")
    d_ap = _distance(anchor, positive)
    d_an = _distance(anchor, negative)
    return T.relu(T.add(T.sub(d_ap, d_an), margin))


def _distance(a: Tensor, b: Tensor) -> Tensor:
    diff = T.sub(a, b)
    sq = T.sum_(T.mul(diff, diff), axis=-1)
    # exact zero distance has an undefined sqrt gradient; route it to 0
    safe = sq.data > 0
    if np.all(safe):
        return T.sqrt(sq)
    out = np.sqrt(sq.data)
    return T._make(out, (sq,), lambda g: (np.where(safe, g * 0.5 / np.where(safe, out, 1.0), 0.0),))


def batch_ce(pooled: Tensor, labels: np.ndarray, weight: Tensor, bias: Tensor) -> Tensor:
    logits = T.add(T.matmul(pooled, T.transpose(weight, (1, 0))), bias)
    logp = T.log_softmax(logits, axis=-1)
    picked = T.take(logp, (np.arange(len(labels)), labels))
    return T.scale(T.mean(picked), -1.0)


def batch_hard_triplet(pooled: Tensor, labels: np.ndarray, margin: float) -> Tensor:
    """Mean over anchors of the hardest-positive / hardest-negative triplet loss."""
    n = len(labels)
    diff = T.sub(T.reshape(pooled, (n, 1, -1)), T.reshape(pooled, (1, n, -1)))
    dist = _distance(diff, T.Tensor(np.zeros(diff.shape)))
    same = labels[:, None] == labels[None, :]
    d = dist.data
    pos = np.where(same & ~np.eye(n, dtype=bool), d, -np.inf).argmax(axis=1)
    neg = np.where(~same, d, np.inf).argmin(axis=1)
    rows = np.arange(n)
    d_ap = T.take(dist, (rows, pos))
    d_an = T.take(dist, (rows, neg))
    return T.mean(T.relu(T.add(T.sub(d_ap, d_an), margin)))


# ---------------------------------------------------------------- synthetic patches


def render_patch(rng: np.random.Generator, signature: np.ndarray, sigma: float,
                 occluder: Optional[np.ndarray] = None, occluder_front: bool = True,
                 occluder_offset: tuple[int, int] = (0, 0), roi_jitter: int = 4,
                 target_box: BBox = TARGET_BOX, clean: bool = False) -> np.ndarray:
    """ROI feature of a target in a small rendered scene, optionally occluded."""
    objs = [SimObject(1, [target_box], 1, np.asarray(signature, dtype=np.float64))]
    if occluder is not None:
        ob = target_box.shifted(*occluder_offset)
        objs.append(SimObject(2, [ob], 0 if occluder_front else 2, np.asarray(occluder, dtype=np.float64)))
        objs[0].depth = 1
    scen = Scenario(1, PATCH_WORLD[0], PATCH_WORLD[1], objs, 0.0 if clean else sigma)
    frame = render_frame(scen, 0, seed=int(rng.integers(2**31)))
    jx, jy = rng.integers(-roi_jitter, roi_jitter + 1, size=2) if roi_jitter else (0, 0)
    return roi_extract(frame, target_box.shifted(int(jx), int(jy)))


def random_signatures(rng: np.random.Generator, n: int, channels: int) -> np.ndarray:
    s = rng.normal(size=(n, channels))
    return s / np.linalg.norm(s, axis=1, keepdims=True)


def _occluded_patch(rng, sigs, label, cfg: TrainConfig) -> np.ndarray:
    if rng.random() >= cfg.occlusion_prob:
        return render_patch(rng, sigs[label], cfg.noise_sigma)
    other = random_signatures(rng, 1, sigs.shape[1])[0] if rng.random() < 0.5 else \
        sigs[(label + int(rng.integers(1, len(sigs)))) % len(sigs)]
    off = (int(rng.integers(-28, 29)), int(rng.integers(-12, 13)))
    return render_patch(rng, sigs[label], cfg.noise_sigma, occluder=other,
                        occluder_front=bool(rng.random() < 0.7), occluder_offset=off)


def make_batch(rng: np.random.Generator, sigs: np.ndarray, cfg: TrainConfig) -> IdentityBatch:
    ids = rng.choice(len(sigs), size=cfg.batch, replace=False)
    labels = np.repeat(ids, cfg.seqs_per_identity)
    patches = np.stack([
        np.stack([_occluded_patch(rng, sigs, int(lab), cfg) for _ in range(cfg.seq_len)]) for lab in labels
    ])
    return IdentityBatch(patches, labels)


# ---------------------------------------------------------------- identity training


def _embed_batch(patches: np.ndarray, w: mem.MemoryWeights) -> tuple[Tensor, Tensor]:
    """Pre-aggregation embeddings (N*L, C, H, W) and final memory states (N, C, H, W)."""
    n, length = patches.shape[:2]
    flat = patches.reshape(n * length, *patches.shape[2:])
    embeds = mem.extract_embedding(flat, w)
    per_step = T.reshape(embeds, (n, length, *patches.shape[2:]))
    h = T.take(per_step, (slice(None), 0))
    for k in range(1, length):
        h = mem.gru_step(h, T.take(per_step, (slice(None), k)), w)
    return embeds, h


def identity_losses(model: Model, batch: IdentityBatch, margin: float) -> tuple[Tensor, Tensor]:
    embeds, states = _embed_batch(batch.patches, model.memory)
    length = batch.patches.shape[1]
    pre = mem.pool_t(embeds)
    post = mem.pool_t(states)
    pre_labels = np.repeat(batch.labels, length)
    ce = T.add(batch_ce(pre, pre_labels, model.classifier_weight, model.classifier_bias),
               batch_ce(post, batch.labels, model.classifier_weight, model.classifier_bias))
    tri = T.add(batch_hard_triplet(pre, pre_labels, margin), batch_hard_triplet(post, batch.labels, margin))
    return ce, tri


def _trainable(model: Model) -> list[Tensor]:
    return model.memory.parameters() + [model.classifier_weight, model.classifier_bias]


def fit(cfg: TrainConfig, model: Optional[Model] = None,
        signatures: Optional[np.ndarray] = None) -> tuple[Model, LossCurve, np.ndarray]:
    """Joint CE + triplet gradient descent; returns the model, loss curve and identity signatures."""
    rng = np.random.default_rng(cfg.seed)
    if signatures is None:
        signatures = random_signatures(rng, cfg.n_identities, 16 if model is None else model.channels)
    if model is None:
        model = Model.random(cfg.seed, channels=signatures.shape[1], n_classes=len(signatures))
    elif model.classifier_weight is None or model.classifier_weight.shape[0] != len(signatures):
        c_rng = np.random.default_rng([cfg.seed, 1])
        model.classifier_weight = Tensor(c_rng.normal(0, 0.1, (len(signatures), model.channels)), requires_grad=True)
        model.classifier_bias = Tensor(np.zeros(len(signatures)), requires_grad=True)
    params = _trainable(model)
    for p in params:
        p.requires_grad = True
    curve = LossCurve()
    for step in range(cfg.steps):
        batch = make_batch(rng, signatures, cfg)
        for p in params:
            p.zero_grad()
        ce, tri = identity_losses(model, batch, cfg.margin)
        total = T.add(ce, tri)
        if not np.isfinite(total.data):
            raise TrainingDiverged(step)
        total.backward()
        curve.append(step, float(ce.data), float(tri.data))
        for p in params:
            if p.grad is None:
                continue
            if not np.all(np.isfinite(p.grad)):
                raise TrainingDiverged(step, "gradient")
            p.data -= cfg.learning_rate * p.grad
            p.zero_grad()
        if step % 100 == 0:
            log.info("step %d ce %.4f triplet %.4f", step, float(ce.data), float(tri.data))
    return model, curve, signatures


# ---------------------------------------------------------------- attention training


@dataclass(frozen=True)
class AttentionTrainConfig:
    learning_rate: float = 0.1
    steps: int = 300
    batch: int = 16
    seed: int = 0
    noise_sigma: float = 0.1
    o_min: float = 0.2
    memory_len: int = 3


def occlusion_sample(rng: np.random.Generator, channels: int, sigma: float, o_min: float,
                     memory_len: int, model: Model):
    """One contaminated target feature with its clean counterpart and references.

    Returns ``(feature, clean, target_ref, distractor_ref, weight, target_sig)``.
    The distractor sits in front of the target at a random offset; the weight
    is the occlusion gate for the two boxes.
    """
    sig_t, sig_d = random_signatures(rng, 2, channels)
    while True:
        off = (int(rng.integers(-24, 25)), int(rng.integers(-12, 13)))
        w = weight_from_iou(iou(TARGET_BOX, TARGET_BOX.shifted(*off)), o_min)
        if w > 0:
            break
    jitter = rng.integers(-3, 4, size=2)
    roi_box = TARGET_BOX.shifted(int(jitter[0]), int(jitter[1]))
    seed = int(rng.integers(2**31))
    feat = render_patch(np.random.default_rng(seed), sig_t, sigma, occluder=sig_d,
                        occluder_offset=off, roi_jitter=0, target_box=roi_box)
    clean = render_patch(np.random.default_rng(seed), sig_t, sigma, roi_jitter=0, target_box=roi_box)
    refs = []
    for sig in (sig_t, sig_d):
        seq = [render_patch(rng, sig, sigma, roi_jitter=2) for _ in range(memory_len)]
        refs.append(mem.aggregate(seq, model.memory).state.data)
    return feat, clean, refs[0], refs[1], w, sig_t


def attention_loss(model: Model, samples) -> Tensor:
    """Mean squared gap between the refined feature's spatial mean and the unoccluded one."""
    feats = np.stack([s[0] for s in samples])
    cleans = np.stack([s[1] for s in samples])
    t_refs = np.stack([s[2] for s in samples])
    d_refs = np.stack([s[3] for s in samples])
    weights = np.array([s[4] for s in samples])
    queries = mem.extract_embedding(feats, model.memory).detach()
    ta = att.non_local(queries, t_refs, model.attention)
    da = att.non_local(queries, d_refs, model.attention)
    refined = T.add(feats, T.mul(T.sub(ta, da), weights[:, None, None, None]))
    gap = T.sub(T.mean(refined, axis=(-2, -1)), cleans.mean(axis=(-2, -1)))
    return T.mean(T.sum_(T.mul(gap, gap), axis=-1))


def fit_attention(model: Model, cfg: AttentionTrainConfig = AttentionTrainConfig()) -> tuple[Model, list[float]]:
    rng = np.random.default_rng([cfg.seed, 31337])
    params = model.attention.parameters()
    for p in params:
        p.requires_grad = True
    curve = []
    for step in range(cfg.steps):
        samples = [occlusion_sample(rng, model.channels, cfg.noise_sigma, cfg.o_min, cfg.memory_len, model)
                   for _ in range(cfg.batch)]
        for p in params:
            p.zero_grad()
        loss = attention_loss(model, samples)
        if not np.isfinite(loss.data):
            raise TrainingDiverged(step)
        loss.backward()
        curve.append(float(loss.data))
        for p in params:
            if p.grad is not None:
                p.data -= cfg.learning_rate * p.grad
                p.zero_grad()
    return model, curve


def build_default_model(seed: int = 0) -> tuple[Model, LossCurve, list[float]]:
    """The recipe behind the bundled weights: identity training, then attention training."""
    model, curve, _ = fit(TrainConfig(seed=seed))
    model, att_curve = fit_attention(model, AttentionTrainConfig(seed=seed))
    return model, curve, att_curve


# ---------------------------------------------------------------- evaluation


def rank1_retrieval(gallery: np.ndarray, gallery_labels: Sequence, probes: np.ndarray,
                    probe_labels: Sequence) -> float:
    """Fraction of probes whose Euclidean-nearest gallery vector shares their label."""
    gallery = np.atleast_2d(np.asarray(gallery, dtype=np.float64))
    probes = np.atleast_2d(np.asarray(probes, dtype=np.float64))
    if gallery.size == 0 or probes.size == 0:
        raise ValueError("gallery and probes must be non-empty")
    g_lab = np.asarray(gallery_labels)
    p_lab = np.asarray(probe_labels)
    d = np.linalg.norm(probes[:, None, :] - gallery[None, :, :], axis=-1)
    return float(np.mean(g_lab[d.argmin(axis=1)] == p_lab))


def pooled_embeddings(model: Model, patches: np.ndarray) -> np.ndarray:
    return mem.pool(mem.extract_embedding(patches, model.memory))


def pooled_memories(model: Model, sequences: np.ndarray) -> np.ndarray:
    _, states = _embed_batch(sequences, model.memory)
    return mem.pool(states)

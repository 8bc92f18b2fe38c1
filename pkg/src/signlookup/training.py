"""Balanced pair construction and the SGD + plateau-scheduler training loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, CorpusError, NumericError, ShapeError
from .features import (
    AdaptiveQueryFeatures,
    FeatureExtractor,
    TargetFeatureSequence,
    VideoClip,
    extract_adaptive_query,
    extract_target_sequence,
    window_spans,
)
from .metrics import AnnotatedSegment
from .model import SignLookupModel, forward
from .numerics import RngState, Tensor, add, clip, mul, no_grad, tlog, tmean, _as_generator

WINDOW_LEN = 64
WINDOW_STRIDE = 32
PROB_EPS = 1e-7


@dataclass
class TrainingPair:
    """One query against one target window with per-frame occurrence labels."""

    query: AdaptiveQueryFeatures
    target: TargetFeatureSequence
    labels: np.ndarray
    gloss_id: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.float32)
        if self.labels.shape[0] != self.target.n_frames:
            raise ShapeError(
                f"{self.labels.shape[0]} labels for {self.target.n_frames} target frames"
            )

    @property
    def is_positive(self) -> bool:
        return bool(self.labels.any())


@dataclass
class TrainConfig:
    batch_size: int = 8
    lr0: float = 1e-2
    patience: int = 20
    factor: float = 0.1
    epochs: int = 60
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 < self.factor < 1.0:
            raise ConfigError(f"decay factor must be in (0, 1), got {self.factor}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")

    def to_dict(self) -> dict:
        return {
            "batch_size": self.batch_size, "lr0": self.lr0, "patience": self.patience,
            "factor": self.factor, "epochs": self.epochs, "seed": self.seed,
        }


def _window_labels(span: tuple[int, int], segments: Sequence[AnnotatedSegment], gloss_id: int) -> np.ndarray:
    start, end = span
    labels = np.zeros(end - start, dtype=np.float32)
    for seg in segments:
        if seg.gloss_id != gloss_id:
            continue
        lo = max(seg.start, start)
        hi = min(seg.end, end)
        if lo < hi:
            labels[lo - start:hi - start] = 1.0
    return labels


def build_pairs(
    corpus: Sequence[tuple[VideoClip, Sequence[AnnotatedSegment]]],
    dictionary: Mapping[int, VideoClip],
    ex: FeatureExtractor,
    rng,
    m_levels: int = 4,
    window: int = WINDOW_LEN,
    stride: int = WINDOW_STRIDE,
) -> list[TrainingPair]:
    """Tile each target into windows and emit balanced positive/negative pairs.

    Every (window, overlapping gloss) combination yields a positive pair; for
    each one, a negative is drawn uniformly over all (window, absent gloss)
    combinations.
    """
    gen = _as_generator(rng)
    for _, segments in corpus:
        for seg in segments:
            if seg.gloss_id not in dictionary:
                raise CorpusError(f"gloss {seg.gloss_id} has no dictionary exemplar")
    queries = {
        gloss: extract_adaptive_query(clip, ex, m_levels)
        for gloss, clip in dictionary.items()
    }
    all_glosses = sorted(dictionary.keys())

    # windows[(clip_idx, span)] plus which glosses occur inside each
    windows = []
    features = []
    for clip_idx, (clip, segments) in enumerate(corpus):
        feats = extract_target_sequence(clip, ex)
        features.append(feats)
        for span in window_spans(clip.n_frames, window, stride):
            present = {
                seg.gloss_id for seg in segments
                if min(seg.end, span[1]) > max(seg.start, span[0])
            }
            windows.append((clip_idx, span, present, segments))

    pairs: list[TrainingPair] = []
    n_positive = 0
    for clip_idx, span, present, segments in windows:
        for gloss in sorted(present):
            target = TargetFeatureSequence(features[clip_idx].y[span[0]:span[1]])
            labels = _window_labels(span, segments, gloss)
            pairs.append(TrainingPair(queries[gloss], target, labels, gloss))
            n_positive += 1

    negative_slots = [
        (clip_idx, span, [g for g in all_glosses if g not in present])
        for clip_idx, span, present, _ in windows
    ]
    total_slots = sum(len(absent) for _, _, absent in negative_slots)
    if n_positive > 0 and total_slots == 0:
        raise CorpusError("no (window, absent gloss) combination available for negatives")
    for _ in range(n_positive):
        pick = int(gen.integers(0, total_slots))
        for clip_idx, span, absent in negative_slots:
            if pick < len(absent):
                gloss = absent[pick]
                target = TargetFeatureSequence(features[clip_idx].y[span[0]:span[1]])
                labels = np.zeros(span[1] - span[0], dtype=np.float32)
                pairs.append(TrainingPair(queries[gloss], target, labels, gloss))
                break
            pick -= len(absent)
    return pairs


def bce_loss(probs, labels) -> Tensor:
    """Mean binary cross-entropy; probabilities clamped away from 0 and 1."""
    p = probs if isinstance(probs, Tensor) else Tensor(probs)
    y = np.asarray(labels, dtype=p.data.dtype)
    if p.data.shape != y.shape:
        raise ShapeError(f"{p.data.shape} probabilities vs {y.shape} labels")
    p = clip(p, PROB_EPS, 1.0 - PROB_EPS)
    per_frame = add(mul(tlog(p), y), mul(tlog(add(1.0, mul(p, -1.0))), 1.0 - y))
    return mul(tmean(per_frame), -1.0)


def sgd_step(model: SignLookupModel, gradients: Mapping[str, np.ndarray] | None, lr: float) -> SignLookupModel:
    """Plain SGD: every parameter moves against its gradient, no momentum."""
    for name, param in model.params.items():
        grad = gradients.get(name) if gradients is not None else param.grad
        if grad is None:
            continue
        if np.shape(grad) != param.data.shape:
            raise ShapeError(f"gradient for {name} has shape {np.shape(grad)}, want {param.data.shape}")
        param.data = param.data - lr * np.asarray(grad, dtype=param.data.dtype)
    return model


@dataclass(frozen=True)
class PlateauState:
    """Reduce-on-plateau bookkeeping, lower-is-better."""

    lr: float
    patience: int = 20
    factor: float = 0.1
    best: float = math.inf
    stall: int = 0


def plateau_schedule(state: PlateauState, new_metric: float) -> tuple[PlateauState, float]:
    """Strict improvements reset the stall counter; hitting patience decays lr."""
    if not math.isfinite(new_metric):
        raise NumericError(f"scheduler metric is not finite: {new_metric}")
    if new_metric < state.best:
        state = replace(state, best=new_metric, stall=0)
    else:
        stall = state.stall + 1
        if stall >= state.patience:
            state = replace(state, lr=state.lr * state.factor, stall=0)
        else:
            state = replace(state, stall=stall)
    return state, state.lr


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float


def evaluate_pairs(model: SignLookupModel, pairs: Sequence[TrainingPair],
                   threshold: float = 0.5) -> tuple[float, float]:
    """Mean BCE and pooled frame accuracy over pairs, inference mode."""
    total_loss = 0.0
    correct = 0
    frames = 0
    with no_grad():
        for pair in pairs:
            acts = forward(pair.query, pair.target, model)
            total_loss += float(bce_loss(acts.probs, pair.labels).data)
            pred = acts.probs.data >= threshold
            correct += int(np.count_nonzero(pred == (pair.labels > 0.5)))
            frames += pair.labels.shape[0]
    return total_loss / len(pairs), correct / frames


def train(
    model: SignLookupModel,
    pairs: Sequence[TrainingPair],
    val_pairs: Sequence[TrainingPair],
    cfg: TrainConfig,
) -> tuple[SignLookupModel, list[EpochStats]]:
    """Shuffled mini-batch SGD with the plateau scheduler stepped per epoch.

    With no validation pairs the training pairs double as the monitored set.
    """
    if not pairs:
        raise CorpusError("cannot train on an empty pair list")
    gen = RngState(cfg.seed, 0).generator()
    sched = PlateauState(lr=cfg.lr0, patience=cfg.patience, factor=cfg.factor)
    monitored = val_pairs if val_pairs else pairs
    history: list[EpochStats] = []
    for epoch in range(cfg.epochs):
        order = gen.permutation(len(pairs))
        epoch_loss = 0.0
        for batch_idx in range(0, len(order), cfg.batch_size):
            batch = order[batch_idx:batch_idx + cfg.batch_size]
            model.zero_grad()
            batch_loss = None
            for pair_idx in batch:
                pair = pairs[pair_idx]
                acts = forward(pair.query, pair.target, model, gen, training=True)
                loss = bce_loss(acts.probs, pair.labels)
                batch_loss = loss if batch_loss is None else add(batch_loss, loss)
            batch_loss = mul(batch_loss, 1.0 / len(batch))
            if not np.isfinite(batch_loss.data):
                raise NumericError(
                    f"non-finite loss at epoch {epoch}, batch {batch_idx // cfg.batch_size}"
                )
            batch_loss.backward()
            sgd_step(model, None, sched.lr)
            epoch_loss += float(batch_loss.data) * len(batch)
        train_loss = epoch_loss / len(order)
        val_loss, val_acc = evaluate_pairs(model, monitored)
        sched, _ = plateau_schedule(sched, val_loss)
        history.append(EpochStats(epoch, train_loss, val_loss, val_acc))
    return model, history


def write_history(path, history: Sequence[EpochStats]) -> None:
    """CSV lines 'epoch,train_loss,val_loss,val_acc'."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch,train_loss,val_loss,val_acc\n")
        for row in history:
            fh.write(f"{row.epoch},{row.train_loss:.6f},{row.val_loss:.6f},{row.val_acc:.6f}\n")

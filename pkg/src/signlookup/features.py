"""Frame sequences to feature streams.

The query side gets M multi-stride features (each a 16-frame gather at
stride 2^(m-1) around the clip center); the target side gets one feature per
frame from a centered 16-frame sliding window. The clip-to-vector extractor
is pluggable; the default is a fixed seeded linear projection with a tanh
squashing, standing in for a frozen video backbone at desk scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .errors import BoundsError, ConfigError, ShapeError
from .numerics import RngState, xavier_init

WINDOW_FRAMES = 16
_CENTER_SLOT = WINDOW_FRAMES // 2  # the clip center lands at gather index 8


@dataclass
class VideoClip:
    """One clip: an N x d_frame matrix, one row per frame."""

    frames: np.ndarray
    frame_rate: float = 25.0

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ShapeError(f"clip frames must be N x d_frame with N >= 1, got {self.frames.shape}")
        if not np.isfinite(self.frames).all():
            raise ShapeError("clip frames must be finite")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def d_frame(self) -> int:
        return self.frames.shape[1]


@dataclass
class AdaptiveQueryFeatures:
    """M stride-banked query features; stride of level m (1-based) is 2^(m-1)."""

    x: np.ndarray
    strides: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float32)
        if not self.strides:
            self.strides = [2 ** m for m in range(self.x.shape[0])]
        if len(self.strides) != self.x.shape[0]:
            raise ShapeError("one stride per feature row required")

    @property
    def m_levels(self) -> int:
        return self.x.shape[0]


@dataclass
class TargetFeatureSequence:
    """Per-frame target features: T x d_feat, one row per target frame."""

    y: np.ndarray

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.float32)

    @property
    def n_frames(self) -> int:
        return self.y.shape[0]


class FeatureExtractor(Protocol):
    """Deterministic map from a 16 x d_frame clip to a d_feat vector."""

    d_feat: int
    d_frame: int

    def extract(self, clip16: np.ndarray) -> np.ndarray: ...


def adaptive_indices(center: int, m: int, n_frames: int) -> np.ndarray:
    """The 16 frame indices gathered for level m around ``center``.

    i_k = clamp(center + 2^(m-1) * (k - 8), 0, n_frames - 1); the center frame
    itself sits at slot k=8.
    """
    if not 0 <= center < n_frames:
        raise BoundsError(f"center {center} outside [0, {n_frames})")
    if m < 1:
        raise ConfigError(f"stride level must be >= 1, got {m}")
    stride = 2 ** (m - 1)
    k = np.arange(WINDOW_FRAMES)
    return np.clip(center + stride * (k - _CENTER_SLOT), 0, n_frames - 1)


def extract_adaptive_query(clip: VideoClip, ex: FeatureExtractor, m_levels: int = 4) -> AdaptiveQueryFeatures:
    """Extract M features around the middle frame, one per stride level."""
    if m_levels < 1:
        raise ConfigError(f"need at least one stride level, got {m_levels}")
    center = clip.n_frames // 2
    rows = []
    strides = []
    for m in range(1, m_levels + 1):
        idx = adaptive_indices(center, m, clip.n_frames)
        rows.append(ex.extract(clip.frames[idx]))
        strides.append(2 ** (m - 1))
    return AdaptiveQueryFeatures(np.stack(rows), strides)


def extract_target_sequence(clip: VideoClip, ex: FeatureExtractor) -> TargetFeatureSequence:
    """One feature per frame from a centered 16-frame window (edges clamped)."""
    n = clip.n_frames
    offsets = np.arange(-_CENTER_SLOT, WINDOW_FRAMES - _CENTER_SLOT)
    rows = []
    for t in range(n):
        idx = np.clip(t + offsets, 0, n - 1)
        rows.append(ex.extract(clip.frames[idx]))
    return TargetFeatureSequence(np.stack(rows))


def window_spans(n_frames: int, window: int = 64, stride: int = 32) -> list[tuple[int, int]]:
    """Half-open window spans tiling the sequence; the tail gets an end-aligned window.

    Sequences shorter than ``window`` yield a single clamped span.
    """
    if n_frames < 1 or window < 1 or stride < 1:
        raise ConfigError(f"bad tiling ({n_frames} frames, window {window}, stride {stride})")
    if n_frames <= window:
        return [(0, n_frames)]
    spans = [(s, s + window) for s in range(0, n_frames - window + 1, stride)]
    if spans[-1][1] < n_frames:
        spans.append((n_frames - window, n_frames))
    return spans


class ProjectionExtractor:
    """Fixed seeded linear projection of the flattened window, tanh-squashed.

    Not trained; it only has to preserve temporal order inside the window so
    that stride-level differences stay observable downstream.
    """

    def __init__(self, d_frame: int, d_feat: int, seed: int):
        if d_frame < 1 or d_feat < 1:
            raise ConfigError(f"dimensions must be positive, got {d_frame}, {d_feat}")
        self.d_frame = d_frame
        self.d_feat = d_feat
        self.seed = seed
        self._w = xavier_init(WINDOW_FRAMES * d_frame, d_feat, RngState(seed, 0))

    def extract(self, clip16: np.ndarray) -> np.ndarray:
        clip16 = np.asarray(clip16, dtype=np.float32)
        if clip16.shape != (WINDOW_FRAMES, self.d_frame):
            raise ShapeError(f"extractor expects ({WINDOW_FRAMES}, {self.d_frame}), got {clip16.shape}")
        return np.tanh(clip16.reshape(-1) @ self._w)


def projection_extractor(d_frame: int, d_feat: int, seed: int) -> ProjectionExtractor:
    return ProjectionExtractor(d_frame, d_feat, seed)

"""Seeded synthetic corpus: the desk-scale ground-truth oracle.

Each sign category is a smooth trajectory through random control points in
frame-vector space. Continuous targets concatenate speed-warped renders with
a linear cross-fade (co-articulation) and per-signer style offsets; isolated
dictionary exemplars come from a held-out signer at speed 1. The whole corpus
is a pure function of its config.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline

from .datastore import Manifest, ManifestEntry, write_annotations, write_manifest, write_matrix
from .errors import ConfigError
from .features import VideoClip
from .metrics import AnnotatedSegment
from .numerics import RngState

CONTROL_POINTS = 6
BASE_LENGTH_RANGE = (10, 24)
SIGNER_OFFSET_SCALE = 0.6

# disjoint RNG stream namespaces so every artifact draws independently
_VOCAB_STREAM = 0
_SIGNER_STREAM = 100_000
_DICT_STREAM = 200_000
_TARGET_STREAM = 300_000


@dataclass
class SignPrototype:
    """One sign category: control points plus its canonical duration."""

    gloss_id: int
    control_points: np.ndarray  # K x d_frame
    base_length: int

    def __post_init__(self):
        self.control_points = np.asarray(self.control_points, dtype=np.float32)
        if self.control_points.shape[0] < 3:
            raise ConfigError("a prototype needs at least 3 control points")
        lo, hi = BASE_LENGTH_RANGE
        if not lo <= self.base_length <= hi:
            raise ConfigError(f"base_length must lie in [{lo}, {hi}], got {self.base_length}")


@dataclass
class SynthConfig:
    n_categories: int = 20
    n_signers: int = 4
    d_frame: int = 16
    targets: int = 200
    signs_per_target: int = 6
    speed_range: tuple[float, float] = (0.5, 2.0)
    blend_frames: int = 3
    noise_sigma: float = 0.05
    seed: int = 7

    def __post_init__(self):
        self.speed_range = (float(self.speed_range[0]), float(self.speed_range[1]))
        if self.speed_range[0] <= 0 or self.speed_range[0] > self.speed_range[1]:
            raise ConfigError(f"bad speed range {self.speed_range}")
        if self.blend_frames >= BASE_LENGTH_RANGE[0]:
            raise ConfigError(f"blend_frames {self.blend_frames} must stay below the shortest sign")
        if min(self.n_categories, self.n_signers, self.d_frame, self.targets, self.signs_per_target) < 1:
            raise ConfigError("all corpus extents must be positive")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["speed_range"] = list(self.speed_range)
        return out


def gen_vocabulary(cfg: SynthConfig) -> list[SignPrototype]:
    """One prototype per category, deterministic per (seed, gloss_id)."""
    vocab = []
    for gloss_id in range(cfg.n_categories):
        gen = RngState(cfg.seed, _VOCAB_STREAM + gloss_id).generator()
        points = gen.uniform(-1.0, 1.0, size=(CONTROL_POINTS, cfg.d_frame)).astype(np.float32)
        base_length = int(gen.integers(BASE_LENGTH_RANGE[0], BASE_LENGTH_RANGE[1] + 1))
        vocab.append(SignPrototype(gloss_id, points, base_length))
    return vocab


def prototype_path(proto: SignPrototype, n_frames: int) -> np.ndarray:
    """The prototype trajectory sampled at n_frames points, endpoints exact."""
    knots = np.linspace(0.0, 1.0, proto.control_points.shape[0])
    spline = CubicSpline(knots, proto.control_points.astype(np.float64), axis=0)
    return spline(np.linspace(0.0, 1.0, n_frames)).astype(np.float32)


def render_sign(proto: SignPrototype, speed: float, signer_offset: np.ndarray,
                noise_sigma: float, rng) -> VideoClip:
    """Sample the trajectory at round(base_length / speed) frames, add style and noise."""
    if speed <= 0:
        raise ConfigError(f"speed must be positive, got {speed}")
    n_frames = int(round(proto.base_length / speed))
    if n_frames < 2:
        raise ConfigError(f"speed {speed} leaves {n_frames} frames for gloss {proto.gloss_id}")
    frames = prototype_path(proto, n_frames)
    frames = frames + np.asarray(signer_offset, dtype=np.float32)
    if noise_sigma > 0:
        gen = rng if isinstance(rng, np.random.Generator) else rng.generator()
        frames = frames + gen.normal(0.0, noise_sigma, size=frames.shape).astype(np.float32)
    return VideoClip(frames)


def signer_offsets(cfg: SynthConfig) -> np.ndarray:
    """Style offsets for target signers 0..n-1 plus the held-out dictionary signer."""
    rows = []
    for s in range(cfg.n_signers + 1):
        gen = RngState(cfg.seed, _SIGNER_STREAM + s).generator()
        rows.append(gen.normal(0.0, SIGNER_OFFSET_SCALE, size=cfg.d_frame).astype(np.float32))
    return np.stack(rows)


def gen_continuous(vocab: list[SignPrototype], cfg: SynthConfig, signer: int,
                   rng) -> tuple[VideoClip, list[AnnotatedSegment]]:
    """Concatenate random speed-warped signs with a linear cross-fade.

    Adjacent renders overlap by blend_frames; annotation boundaries sit at
    the blend midpoints, so segments abut without overlapping.
    """
    if cfg.signs_per_target < 1:
        raise ConfigError("need at least one sign per target")
    gen = rng if isinstance(rng, np.random.Generator) else rng.generator()
    offsets = signer_offsets(cfg)
    blend = cfg.blend_frames
    frames = None
    starts = []  # output offset of each rendered sign
    glosses = []
    for _ in range(cfg.signs_per_target):
        gloss = int(gen.integers(0, len(vocab)))
        speed = float(gen.uniform(cfg.speed_range[0], cfg.speed_range[1]))
        clip = render_sign(vocab[gloss], speed, offsets[signer], cfg.noise_sigma, gen)
        glosses.append(gloss)
        if frames is None:
            frames = clip.frames
            starts.append(0)
        else:
            starts.append(frames.shape[0] - blend)
            if blend > 0:
                w = (np.arange(1, blend + 1, dtype=np.float32) / (blend + 1))[:, None]
                frames[-blend:] = (1.0 - w) * frames[-blend:] + w * clip.frames[:blend]
                frames = np.concatenate([frames, clip.frames[blend:]])
            else:
                frames = np.concatenate([frames, clip.frames])
    total = frames.shape[0]
    boundaries = [0]
    for start in starts[1:]:
        boundaries.append(start + (blend + 1) // 2)
    boundaries.append(total)
    segments = [
        AnnotatedSegment(glosses[i], boundaries[i], boundaries[i + 1])
        for i in range(len(glosses))
    ]
    return VideoClip(frames), segments


def gen_corpus(cfg: SynthConfig, out_dir) -> Manifest:
    """Write dictionary clips, targets, annotations and the manifest to disk."""
    out = Path(out_dir)
    (out / "dictionary").mkdir(parents=True, exist_ok=True)
    (out / "targets").mkdir(parents=True, exist_ok=True)
    vocab = gen_vocabulary(cfg)
    offsets = signer_offsets(cfg)
    dict_signer = cfg.n_signers  # held-out style, never used in targets
    entries = []
    for proto in vocab:
        clip = render_sign(
            proto, 1.0, offsets[dict_signer], cfg.noise_sigma,
            RngState(cfg.seed, _DICT_STREAM + proto.gloss_id),
        )
        rel = f"dictionary/gloss_{proto.gloss_id:04d}.slft"
        write_matrix(out / rel, clip.frames)
        entries.append(ManifestEntry(rel, "dictionary", gloss_id=proto.gloss_id, signer_id=dict_signer))
    n_val = cfg.targets // 5
    n_train = cfg.targets - n_val
    for i in range(cfg.targets):
        signer = i % cfg.n_signers
        clip, segments = gen_continuous(vocab, cfg, signer, RngState(cfg.seed, _TARGET_STREAM + i))
        split = "train" if i < n_train else "val"
        clip_rel = f"targets/target_{i:04d}.slft"
        ann_rel = f"targets/target_{i:04d}.tsv"
        write_matrix(out / clip_rel, clip.frames)
        write_annotations(out / ann_rel, segments)
        entries.append(ManifestEntry(clip_rel, "target", signer_id=signer, split=split))
        entries.append(ManifestEntry(ann_rel, "annotation", split=split))
    manifest = Manifest(entries)
    write_manifest(out / "manifest.json", manifest)
    return manifest

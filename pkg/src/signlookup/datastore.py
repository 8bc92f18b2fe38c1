"""Bit-exact file formats: matrices, annotations, predictions, models, manifests.

All binary payloads are little-endian. Matrix files carry magic ``SLFT``,
model files carry magic ``SLMD``; both are versioned. Text formats are a TSV
for annotations (``gloss_id<TAB>start<TAB>end``, ``#`` comments) and a CSV
for per-frame probabilities (``frame,probability``).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError
from .metrics import AnnotatedSegment
from .model import ModelConfig, SignLookupModel
from .numerics import Tensor, parameter

MATRIX_MAGIC = b"SLFT"
MODEL_MAGIC = b"SLMD"
FORMAT_VERSION = 1


@dataclass
class ManifestEntry:
    path: str
    kind: str  # dictionary | target | annotation
    gloss_id: int | None = None
    signer_id: int | None = None
    split: str | None = None  # train | val

    def to_dict(self) -> dict:
        out = {"path": self.path, "kind": self.kind}
        if self.gloss_id is not None:
            out["gloss_id"] = self.gloss_id
        if self.signer_id is not None:
            out["signer_id"] = self.signer_id
        if self.split is not None:
            out["split"] = self.split
        return out


@dataclass
class Manifest:
    entries: list[ManifestEntry] = field(default_factory=list)

    def of_kind(self, kind: str, split: str | None = None) -> list[ManifestEntry]:
        found = [e for e in self.entries if e.kind == kind]
        if split is not None:
            found = [e for e in found if e.split == split]
        return found


def _read_exact(fh, n: int, path, what: str) -> bytes:
    offset = fh.tell()
    blob = fh.read(n)
    if len(blob) != n:
        raise FormatError(f"{path}: truncated {what} at offset {offset} (wanted {n} bytes, got {len(blob)})")
    return blob


def write_matrix(path, matrix: np.ndarray) -> None:
    matrix = np.asarray(matrix, dtype=np.float32)
    if matrix.ndim != 2:
        raise DataError(f"matrix files hold 2-d arrays, got shape {matrix.shape}")
    if matrix.size and not np.isfinite(matrix).all():
        raise DataError("matrix values must be finite")
    with open(path, "wb") as fh:
        fh.write(MATRIX_MAGIC)
        fh.write(struct.pack("<III", FORMAT_VERSION, matrix.shape[0], matrix.shape[1]))
        fh.write(matrix.astype("<f4").tobytes(order="C"))


def read_matrix(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, path, "magic")
        if magic != MATRIX_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r} at offset 0")
        version, rows, cols = struct.unpack("<III", _read_exact(fh, 12, path, "header"))
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported version {version} at offset 4")
        payload = _read_exact(fh, rows * cols * 4, path, "payload")
        extra = fh.read(1)
        if extra:
            raise FormatError(f"{path}: trailing bytes at offset {fh.tell() - 1}")
    return np.frombuffer(payload, dtype="<f4").reshape(rows, cols).copy()


def write_annotations(path, segments: list[AnnotatedSegment]) -> None:
    ordered = sorted(segments, key=lambda s: (s.start, s.end, s.gloss_id))
    _check_non_overlapping(ordered, str(path))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for seg in ordered:
            fh.write(f"{seg.gloss_id}\t{seg.start}\t{seg.end}\n")


def read_annotations(path) -> list[AnnotatedSegment]:
    segments = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise FormatError(f"{path}:{lineno}: expected gloss<TAB>start<TAB>end, got {raw.rstrip()!r}")
            try:
                gloss_id, start, end = (int(f) for f in fields)
            except ValueError:
                raise FormatError(f"{path}:{lineno}: non-integer field in {raw.rstrip()!r}") from None
            if start >= end or start < 0:
                raise DataError(f"{path}:{lineno}: invalid span [{start}, {end})")
            segments.append(AnnotatedSegment(gloss_id, start, end))
    segments.sort(key=lambda s: (s.start, s.end, s.gloss_id))
    _check_non_overlapping(segments, str(path))
    return segments


def _check_non_overlapping(segments: list[AnnotatedSegment], where: str) -> None:
    for prev, cur in zip(segments, segments[1:]):
        if cur.start < prev.end:
            raise DataError(f"{where}: overlapping segments [{prev.start},{prev.end}) and [{cur.start},{cur.end})")


def write_predictions(path, probabilities) -> None:
    probs = np.asarray(probabilities, dtype=np.float64)
    if probs.ndim != 1:
        raise DataError(f"predictions must be a vector, got shape {probs.shape}")
    if probs.size and (probs.min() < 0.0 or probs.max() > 1.0):
        raise DataError("probabilities must lie in [0, 1]")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("frame,probability\n")
        for t, p in enumerate(probs):
            fh.write(f"{t},{p:.6f}\n")


def read_predictions(path) -> np.ndarray:
    probs = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "frame,probability":
            raise FormatError(f"{path}:1: expected header 'frame,probability', got {header!r}")
        for lineno, raw in enumerate(fh, start=2):
            line = raw.strip()
            if not line:
                continue
            fields = line.split(",")
            if len(fields) != 2:
                raise FormatError(f"{path}:{lineno}: expected frame,probability, got {raw.rstrip()!r}")
            try:
                frame, p = int(fields[0]), float(fields[1])
            except ValueError:
                raise FormatError(f"{path}:{lineno}: unparseable line {raw.rstrip()!r}") from None
            if frame != len(probs):
                raise FormatError(f"{path}:{lineno}: frame index {frame}, expected {len(probs)}")
            probs.append(p)
    return np.asarray(probs, dtype=np.float64)


def write_manifest(path, manifest: Manifest) -> None:
    doc = {"entries": [e.to_dict() for e in manifest.entries]}
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_manifest(path) -> Manifest:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(doc, dict) or "entries" not in doc:
        raise FormatError(f"{path}: manifest must be an object with an 'entries' list")
    entries = []
    for i, raw in enumerate(doc["entries"]):
        if "path" not in raw or "kind" not in raw:
            raise FormatError(f"{path}: entry {i} missing path/kind")
        entries.append(ManifestEntry(
            path=raw["path"], kind=raw["kind"],
            gloss_id=raw.get("gloss_id"), signer_id=raw.get("signer_id"),
            split=raw.get("split"),
        ))
    base = Path(path).parent
    for e in entries:
        if not (base / e.path).exists():
            raise FormatError(f"{path}: referenced file {e.path} does not exist")
    return Manifest(entries)


# model files ----------------------------------------------------------------


def write_model(path, model: SignLookupModel, extras: dict | None = None) -> None:
    """Magic, version, length-prefixed JSON config, then named f32 tensors.

    Tensor order is the model's construction order; each record is
    (name_len u32, name bytes, rank u32, dims u32 x rank, f32 payload).
    """
    doc = {"config": model.config.to_dict()}
    if extras:
        doc["extras"] = extras
    config_blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(config_blob)))
        fh.write(config_blob)
        for name, tens in model.params.items():
            blob = np.ascontiguousarray(tens.data, dtype="<f4")
            name_bytes = name.encode("utf-8")
            fh.write(struct.pack("<I", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<I", blob.ndim))
            fh.write(struct.pack(f"<{blob.ndim}I", *blob.shape))
            fh.write(blob.tobytes(order="C"))


def read_model(path) -> tuple[SignLookupModel, dict]:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, path, "magic")
        if magic != MODEL_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r} at offset 0")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, path, "version"))
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported version {version} at offset 4")
        (config_len,) = struct.unpack("<I", _read_exact(fh, 4, path, "config length"))
        config_blob = _read_exact(fh, config_len, path, "config block")
        try:
            doc = json.loads(config_blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: bad config block at offset 12: {exc}") from None
        try:
            config = ModelConfig(**doc["config"])
        except (KeyError, TypeError) as exc:
            raise FormatError(f"{path}: config block missing fields: {exc}") from None
        params: dict[str, Tensor] = {}
        while True:
            head = fh.read(4)
            if not head:
                break
            if len(head) != 4:
                raise FormatError(f"{path}: truncated record header at offset {fh.tell() - len(head)}")
            (name_len,) = struct.unpack("<I", head)
            name = _read_exact(fh, name_len, path, "tensor name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, path, "tensor rank"))
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, path, "tensor dims"))
            count = int(np.prod(dims, dtype=np.int64)) if rank else 1
            payload = _read_exact(fh, count * 4, path, f"tensor {name}")
            params[name] = parameter(np.frombuffer(payload, dtype="<f4").reshape(dims).copy())
    reference = SignLookupModel.init(config, 0).params
    if list(params.keys()) != list(reference.keys()):
        raise FormatError(f"{path}: parameter names or order do not match the config")
    for name, tens in params.items():
        if tens.data.shape != reference[name].data.shape:
            raise FormatError(
                f"{path}: tensor {name} has shape {tens.data.shape}, expected {reference[name].data.shape}"
            )
    return SignLookupModel(config, params), doc.get("extras", {})

"""Image-side inputs: feature-grid files, manifests, and the learned projection.

Features arrive precomputed (grid cells or detections) in a small binary
format; the model never runs a ConvNet. The projection maps each location
to the working width d' with a ReLU and average-pools a global descriptor.

Feature-grid file layout (little-endian throughout):
    magic "IMGF" | version u16 = 1 | K u32 | d u32 | K*d float32, row-major
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, DimensionError, FormatError
from .tensor import Tensor, matmul, relu, reshape, tensor_mean, transpose

MAGIC = b"IMGF"
VERSION = 1


@dataclass
class FeatureGrid:
    """K feature vectors of width d for one image."""

    image_id: str
    features: Tensor  # [K, d], constant (no gradient)

    @property
    def location_count(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]


@dataclass
class EncodedImage:
    """Projected per-location states and the global descriptor."""

    states: Tensor  # V: [K, d'], all entries >= 0
    v_global: Tensor  # [d']


def project(grid: FeatureGrid, w_f: Tensor, w_g: Tensor) -> EncodedImage:
    """v_k = ReLU(W_f f_k) per location; v_g = ReLU(W_g mean_k f_k)."""
    d = grid.feature_dim
    if w_f.ndim != 2 or w_f.shape[1] != d:
        raise DimensionError(f"W_f {w_f.shape} does not accept features of width {d}")
    if w_g.ndim != 2 or w_g.shape[1] != d:
        raise DimensionError(f"W_g {w_g.shape} does not accept features of width {d}")
    states = relu(matmul(grid.features, transpose(w_f)))
    pooled = reshape(tensor_mean(grid.features, axis=0), (d, 1))
    v_global = relu(reshape(matmul(w_g, pooled), (w_g.shape[0],)))
    return EncodedImage(states=states, v_global=v_global)


def save_feature_grid(grid: FeatureGrid, path) -> None:
    k, d = grid.features.shape
    payload = grid.features.data.astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", VERSION))
        fh.write(struct.pack("<II", k, d))
        fh.write(payload)


def load_feature_grid(path) -> FeatureGrid:
    """Read a grid exactly as stored; save(load(p)) reproduces p byte for byte."""
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic at byte 0")
    if len(raw) < 6:
        raise FormatError(f"{path}: truncated version field at byte 4")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte 4")
    if len(raw) < 14:
        raise FormatError(f"{path}: truncated header at byte {len(raw)}")
    k, d = struct.unpack_from("<II", raw, 6)
    if k < 1 or d < 1:
        raise FormatError(f"{path}: non-positive extents K={k} d={d} at byte 6")
    expected = 14 + 4 * k * d
    if len(raw) != expected:
        raise FormatError(
            f"{path}: payload ends at byte {len(raw)}, expected {expected}")
    values = np.frombuffer(raw, dtype="<f4", offset=14).reshape(k, d)
    if not np.all(np.isfinite(values)):
        raise DataError(f"{path}: non-finite feature value")
    return FeatureGrid(image_id=Path(path).stem,
                       features=Tensor(values.astype(np.float64)))


@dataclass
class ManifestRecord:
    image_id: str
    feature_path: Path
    captions: list[str]
    slots: list[int] | None = None  # synthetic-task ground-truth alignment


def load_manifest(path) -> list[ManifestRecord]:
    """Line-delimited JSON: {"id", "features", "captions"[, "slots"]}."""
    path = Path(path)
    records = []
    base = path.parent
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: bad JSON: {exc}") from exc
            for key in ("id", "features", "captions"):
                if key not in obj:
                    raise FormatError(f"{path}:{lineno}: missing key {key!r}")
            records.append(ManifestRecord(
                image_id=str(obj["id"]),
                feature_path=base / obj["features"],
                captions=[str(c) for c in obj["captions"]],
                slots=list(obj["slots"]) if "slots" in obj else None,
            ))
    return records


def write_manifest(records: list[ManifestRecord], path) -> None:
    path = Path(path)
    base = path.parent
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            obj = {
                "id": rec.image_id,
                "features": str(Path(rec.feature_path).relative_to(base)),
                "captions": rec.captions,
            }
            if rec.slots is not None:
                obj["slots"] = rec.slots
            fh.write(json.dumps(obj) + "\n")

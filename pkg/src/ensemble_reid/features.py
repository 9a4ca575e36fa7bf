"""Flip-averaged descriptor extraction and the feature-file binary format.

A feature matrix is (n, D) float32 with aligned person/camera id arrays and
a list of labeled column segments (dim_tags) recording which model produced
which slice. Stored descriptors are unnormalized; retrieval normalizes when
it computes cosine distances.

File layout (all little-endian), magic "ENSF", version 1:

    bytes 0..3    magic b"ENSF"
    u32           version (= 1)
    u64           n_rows
    u64           dim
    u32           n_segments
    per segment:  u16 label byte-length, UTF-8 label, u64 offset, u64 length
    n_rows * i32  person ids
    n_rows * i32  camera ids
    n_rows*dim f32  descriptors, row-major

Round trips are bit-exact; malformed files raise errors naming the byte
offset where parsing failed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import AugmentConfig, Sample, hflip, resize_image, standardize

MAGIC = b"ENSF"
VERSION = 1


@dataclass(frozen=True)
class DimTag:
    label: str
    offset: int
    length: int


@dataclass
class FeatureMatrix:
    vectors: np.ndarray
    person_ids: np.ndarray
    camera_ids: np.ndarray
    dim_tags: list[DimTag] = field(default_factory=list)

    def __post_init__(self):
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        self.person_ids = np.ascontiguousarray(self.person_ids, dtype=np.int32)
        self.camera_ids = np.ascontiguousarray(self.camera_ids, dtype=np.int32)
        if self.vectors.ndim != 2:
            raise ValueError(f"vectors must be 2-D, got shape {self.vectors.shape}")
        n = self.vectors.shape[0]
        if self.person_ids.shape != (n,) or self.camera_ids.shape != (n,):
            raise ValueError(
                f"id arrays must both have length {n}, got person_ids "
                f"{self.person_ids.shape} and camera_ids {self.camera_ids.shape}")
        if not self.dim_tags:
            self.dim_tags = [DimTag("features", 0, self.vectors.shape[1])]
        expected = 0
        for tag in self.dim_tags:
            if tag.offset != expected or tag.length < 1:
                raise ValueError(f"dim_tags must tile the columns contiguously; "
                                 f"segment {tag} found where offset {expected} was expected")
            expected += tag.length
        if expected != self.vectors.shape[1]:
            raise ValueError(f"dim_tags cover {expected} columns but vectors have "
                             f"{self.vectors.shape[1]}")

    @property
    def n_rows(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def segment(self, index: int) -> np.ndarray:
        """Column block of one dim_tag segment (a view, not a copy)."""
        tag = self.dim_tags[index]
        return self.vectors[:, tag.offset:tag.offset + tag.length]


def _batch_tensor(images: list[np.ndarray], cfg: AugmentConfig) -> torch.Tensor:
    arr = np.stack([standardize(img, cfg) for img in images])
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


def _forward_descriptors(model, batch: torch.Tensor) -> np.ndarray:
    with torch.no_grad():
        features, _ = model(batch)
        return torch.cat(features, dim=1).numpy().astype(np.float32, copy=False)


def extract_descriptor(model, image: np.ndarray, cfg: AugmentConfig) -> np.ndarray:
    """Descriptor of one image: mean of the original and mirrored passes.

    ``image`` is float32 (H, W, 3) in [0, 1] already at the model's input
    size; the model must be in evaluation mode.
    """
    if model.training:
        raise RuntimeError("descriptor extraction requires the model in evaluation mode")
    if tuple(image.shape[:2]) != tuple(model.config.input_size):
        raise ValueError(f"image size {image.shape[:2]} does not match the model input size "
                         f"{tuple(model.config.input_size)}")
    batch = _batch_tensor([image, hflip(image)], cfg)
    desc = _forward_descriptors(model, batch)
    return desc.mean(axis=0)


def extract_all(model, samples: list[Sample], cfg: AugmentConfig,
                batch_size: int = 32, source_label: str = "model") -> FeatureMatrix:
    """Flip-averaged descriptors for a list of samples.

    Images are resized to the model input size (no other augmentation at
    evaluation time). Each batch holds the originals and their mirrors, and
    the two halves are averaged per sample.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    model.eval()
    if not samples:
        return FeatureMatrix(
            vectors=np.zeros((0, model.descriptor_dim), dtype=np.float32),
            person_ids=np.zeros(0, dtype=np.int32),
            camera_ids=np.zeros(0, dtype=np.int32),
            dim_tags=[DimTag(source_label, 0, model.descriptor_dim)],
        )
    size = tuple(model.config.input_size)
    rows = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        images = [resize_image(s.image, size) for s in chunk]
        batch = _batch_tensor(images + [hflip(img) for img in images], cfg)
        desc = _forward_descriptors(model, batch)
        rows.append((desc[:len(chunk)] + desc[len(chunk):]) / 2.0)
    vectors = np.concatenate(rows, axis=0)
    return FeatureMatrix(
        vectors=vectors,
        person_ids=np.array([s.person_id for s in samples], dtype=np.int32),
        camera_ids=np.array([s.camera_id for s in samples], dtype=np.int32),
        dim_tags=[DimTag(source_label, 0, vectors.shape[1])],
    )


def concat_ensemble(matrices: list[FeatureMatrix]) -> FeatureMatrix:
    """Column-concatenate feature matrices from independent models.

    All inputs must describe the same rows: equal person and camera ids in
    the same order. dim_tags carry over with shifted offsets, so each input
    block stays recoverable.
    """
    if not matrices:
        raise ValueError("no feature matrices to concatenate")
    first = matrices[0]
    for k, fm in enumerate(matrices[1:], start=1):
        if fm.n_rows != first.n_rows:
            raise ValueError(f"matrix {k} has {fm.n_rows} rows, matrix 0 has {first.n_rows}")
        for name in ("person_ids", "camera_ids"):
            a, b = getattr(first, name), getattr(fm, name)
            bad = np.nonzero(a != b)[0]
            if bad.size:
                raise ValueError(f"matrix {k} disagrees with matrix 0 on {name} "
                                 f"at row {int(bad[0])} ({int(b[bad[0]])} vs {int(a[bad[0]])})")
    tags = []
    offset = 0
    for fm in matrices:
        for tag in fm.dim_tags:
            tags.append(DimTag(tag.label, offset + tag.offset, tag.length))
        offset += fm.dim
    return FeatureMatrix(
        vectors=np.hstack([fm.vectors for fm in matrices]),
        person_ids=first.person_ids.copy(),
        camera_ids=first.camera_ids.copy(),
        dim_tags=tags,
    )


def save_features(fm: FeatureMatrix, path) -> None:
    parts = [MAGIC, struct.pack("<I", VERSION),
             struct.pack("<QQ", fm.n_rows, fm.dim),
             struct.pack("<I", len(fm.dim_tags))]
    for tag in fm.dim_tags:
        label = tag.label.encode("utf-8")
        if len(label) > 0xFFFF:
            raise ValueError(f"segment label too long to store ({len(label)} bytes)")
        parts.append(struct.pack("<H", len(label)))
        parts.append(label)
        parts.append(struct.pack("<QQ", tag.offset, tag.length))
    parts.append(fm.person_ids.astype("<i4").tobytes())
    parts.append(fm.camera_ids.astype("<i4").tobytes())
    parts.append(fm.vectors.astype("<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Cursor:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise ValueError(f"{self.path}: truncated at byte {self.pos} "
                             f"(needed {n} bytes for {what}, "
                             f"{len(self.blob) - self.pos} available)")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_features(path) -> FeatureMatrix:
    with open(path, "rb") as fh:
        blob = fh.read()
    cur = _Cursor(blob, path)
    magic = cur.take(4, "magic")
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r} at byte 0, expected {MAGIC!r}")
    (version,) = cur.unpack("<I", "version")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version} at byte 4")
    n_rows, dim = cur.unpack("<QQ", "row and dimension counts")
    (n_segments,) = cur.unpack("<I", "segment count")
    tags = []
    for k in range(n_segments):
        (label_len,) = cur.unpack("<H", f"label length of segment {k}")
        label = cur.take(label_len, f"label of segment {k}").decode("utf-8")
        offset, length = cur.unpack("<QQ", f"extent of segment {k}")
        tags.append(DimTag(label, offset, length))
    person_ids = np.frombuffer(cur.take(4 * n_rows, "person ids"), dtype="<i4").copy()
    camera_ids = np.frombuffer(cur.take(4 * n_rows, "camera ids"), dtype="<i4").copy()
    vec_start = cur.pos
    vectors = np.frombuffer(cur.take(4 * n_rows * dim, "descriptors"),
                            dtype="<f4").copy().reshape(n_rows, dim)
    if cur.pos != len(blob):
        raise ValueError(f"{path}: {len(blob) - cur.pos} unexpected trailing bytes "
                         f"at byte {cur.pos}")
    try:
        return FeatureMatrix(vectors, person_ids, camera_ids, tags)
    except ValueError as exc:
        raise ValueError(f"{path}: inconsistent header (descriptors start at byte "
                         f"{vec_start}): {exc}") from exc

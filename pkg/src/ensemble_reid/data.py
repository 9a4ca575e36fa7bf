"""Dataset ingestion, synthetic desk-scale data, and training-time augmentation.

Images are float32 RGB arrays of shape (H, W, 3) with values in [0, 1].
Person ids follow the usual re-identification conventions: positive ids are
real identities, 0 marks distractor images (present in the gallery, never a
true match), and -1 marks junk images (ignored by the evaluation protocol).
"""

from __future__ import annotations

import csv
import io
import os
import re
from dataclasses import dataclass, replace
from pathlib import Path

import cv2
import numpy as np

IMAGE_EXTENSIONS = {".jpg", ".jpeg", ".png", ".bmp"}

_MARKET_NAME = re.compile(r"^(-?\d+)_c(\d+)")

# Tags that keep the independent synthetic RNG streams from colliding.
_SEED_TAG_ROWS = 1
_SEED_TAG_APPEARANCE = 2
_SEED_TAG_CAMERA = 3


@dataclass(frozen=True)
class Sample:
    """One image with its identity and camera annotations.

    ``person_id`` is the class label (0..C-1) for training samples and the
    original dataset id for query/gallery samples.
    """

    image: np.ndarray
    person_id: int
    camera_id: int
    path: str

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError(
                f"sample image must be (H, W, 3), got {self.image.shape} for {self.path!r}"
            )


@dataclass(frozen=True)
class Dataset:
    """Train/query/gallery splits plus the number of distinct train classes."""

    train: list[Sample]
    query: list[Sample]
    gallery: list[Sample]
    num_train_classes: int


@dataclass(frozen=True)
class AugmentConfig:
    """Knobs for the training-time transform chain and pixel normalization.

    The chain runs resize -> pad-and-random-crop -> random horizontal flip ->
    random erasing, each stage individually switchable. ``erase_fill`` of None
    means "fill erased rectangles with the per-channel normalization mean".
    """

    target_size: tuple[int, int] = (384, 128)
    crop_enabled: bool = True
    flip_enabled: bool = True
    erase_enabled: bool = True
    erase_probability: float = 0.5
    erase_area_range: tuple[float, float] = (0.02, 0.4)
    erase_aspect_range: tuple[float, float] = (0.3, 3.33)
    pad_pixels: int = 10
    erase_fill: tuple[float, float, float] | None = None
    norm_mean: tuple[float, float, float] = (0.485, 0.456, 0.406)
    norm_std: tuple[float, float, float] = (0.229, 0.224, 0.225)

    def __post_init__(self):
        h, w = self.target_size
        if h < 1 or w < 1:
            raise ValueError(f"target_size must be positive, got {self.target_size}")
        if not 0.0 <= self.erase_probability <= 1.0:
            raise ValueError(f"erase_probability must be in [0, 1], got {self.erase_probability}")
        lo, hi = self.erase_area_range
        if not 0.0 < lo <= hi:
            raise ValueError(f"bad erase_area_range {self.erase_area_range}")
        lo, hi = self.erase_aspect_range
        if not 0.0 < lo <= hi:
            raise ValueError(f"bad erase_aspect_range {self.erase_aspect_range}")
        if self.pad_pixels < 0:
            raise ValueError(f"pad_pixels must be >= 0, got {self.pad_pixels}")
        if any(s <= 0 for s in self.norm_std):
            raise ValueError(f"norm_std entries must be positive, got {self.norm_std}")

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentConfig":
        d = dict(d)
        for key in ("target_size", "erase_area_range", "erase_aspect_range",
                    "erase_fill", "norm_mean", "norm_std"):
            if key in d and d[key] is not None:
                d[key] = tuple(d[key])
        return cls(**d)


def parse_market_filename(name: str) -> tuple[int, int]:
    """Extract (person_id, camera_id) from a Market-style file name.

    Names look like ``0001_c1s1_000151_00.jpg``: person id, then the camera
    index after the letter c. Junk images use id -1, distractors id 0.
    """
    base = os.path.basename(name)
    m = _MARKET_NAME.match(base)
    if m is None:
        raise ValueError(f"cannot parse person/camera ids from file name {name!r}")
    return int(m.group(1)), int(m.group(2))


def resize_image(image: np.ndarray, target_size: tuple[int, int]) -> np.ndarray:
    """Bilinear-resize to (height, width); returns a new float32 array."""
    h, w = target_size
    image = np.ascontiguousarray(image, dtype=np.float32)
    if image.shape[0] == h and image.shape[1] == w:
        return image.copy()
    return cv2.resize(image, (w, h), interpolation=cv2.INTER_LINEAR)


def hflip(image: np.ndarray) -> np.ndarray:
    """Mirror an (H, W, C) image left-right."""
    return np.ascontiguousarray(image[:, ::-1])


def standardize(image: np.ndarray, cfg: AugmentConfig) -> np.ndarray:
    """Per-channel (x - mean) / std, float32."""
    mean = np.asarray(cfg.norm_mean, dtype=np.float32).reshape(1, 1, 3)
    std = np.asarray(cfg.norm_std, dtype=np.float32).reshape(1, 1, 3)
    return ((image - mean) / std).astype(np.float32)


def _pad_and_random_crop(image: np.ndarray, pad: int, rng: np.random.Generator) -> np.ndarray:
    if pad == 0:
        return image
    h, w = image.shape[:2]
    padded = np.pad(image, ((pad, pad), (pad, pad), (0, 0)))
    top = int(rng.integers(0, 2 * pad + 1))
    left = int(rng.integers(0, 2 * pad + 1))
    return padded[top:top + h, left:left + w]


def _random_erase(image: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    if rng.random() >= cfg.erase_probability:
        return image
    h, w = image.shape[:2]
    fill = cfg.erase_fill if cfg.erase_fill is not None else cfg.norm_mean
    fill = np.asarray(fill, dtype=np.float32)
    for _ in range(100):
        area = rng.uniform(*cfg.erase_area_range) * h * w
        aspect = rng.uniform(*cfg.erase_aspect_range)
        eh = int(round(np.sqrt(area * aspect)))
        ew = int(round(np.sqrt(area / aspect)))
        if eh < h and ew < w and eh > 0 and ew > 0:
            top = int(rng.integers(0, h - eh + 1))
            left = int(rng.integers(0, w - ew + 1))
            image[top:top + eh, left:left + ew] = fill
            return image
    return image


def augment(sample: Sample, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Apply the training transform chain to one sample.

    Returns a float32 (target_h, target_w, 3) array in image space (not yet
    standardized). Stage order is fixed: resize, pad-and-crop, flip, erase.
    """
    if sample.image.size == 0:
        raise ValueError(f"empty image for sample {sample.path!r}")
    img = resize_image(sample.image, cfg.target_size)
    if cfg.crop_enabled:
        img = _pad_and_random_crop(img, cfg.pad_pixels, rng)
    if cfg.flip_enabled and rng.random() < 0.5:
        img = hflip(img)
    if cfg.erase_enabled:
        img = np.ascontiguousarray(img)
        img = _random_erase(img, cfg, rng)
    return img


def _freeze(image: np.ndarray) -> np.ndarray:
    image = np.ascontiguousarray(image, dtype=np.float32)
    image.flags.writeable = False
    return image


def _relabel_train(samples: list[Sample]) -> tuple[list[Sample], int]:
    """Map original train ids onto contiguous labels 0..C-1 (sorted id order)."""
    ids = sorted({s.person_id for s in samples})
    if any(i == -1 for i in ids):
        raise ValueError("junk samples (person_id -1) are not allowed in the train split")
    label = {pid: k for k, pid in enumerate(ids)}
    relabeled = [replace(s, person_id=label[s.person_id]) for s in samples]
    return relabeled, len(ids)


# ---------------------------------------------------------------------------
# Market-style directory layout
# ---------------------------------------------------------------------------

def _scan_image_dir(directory: Path) -> list[tuple[Path, int, int]]:
    out = []
    for name in sorted(os.listdir(directory)):
        p = directory / name
        if p.suffix.lower() not in IMAGE_EXTENSIONS or not p.is_file():
            continue
        pid, cam = parse_market_filename(name)
        out.append((p, pid, cam))
    return out


def _read_image(path: Path) -> np.ndarray:
    raw = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if raw is None:
        raise IOError(f"failed to decode image file {path}")
    rgb = cv2.cvtColor(raw, cv2.COLOR_BGR2RGB)
    return _freeze(rgb.astype(np.float32) / 255.0)


def _load_market_style(root: Path) -> Dataset:
    subdirs = {
        "train": root / "bounding_box_train",
        "gallery": root / "bounding_box_test",
        "query": root / "query",
    }
    for role, d in subdirs.items():
        if not d.is_dir():
            raise FileNotFoundError(f"missing {role} directory {d}")

    train = []
    for p, pid, cam in _scan_image_dir(subdirs["train"]):
        if pid == -1:
            continue
        train.append(Sample(_read_image(p), pid, cam, str(p)))
    if not train:
        raise ValueError(f"no usable train identities under {subdirs['train']}")
    train, num_classes = _relabel_train(train)

    query = []
    for p, pid, cam in _scan_image_dir(subdirs["query"]):
        if pid <= 0:
            continue
        query.append(Sample(_read_image(p), pid, cam, str(p)))
    if not query:
        raise ValueError(f"empty query directory {subdirs['query']}")

    gallery = [
        Sample(_read_image(p), pid, cam, str(p))
        for p, pid, cam in _scan_image_dir(subdirs["gallery"])
    ]
    if not gallery:
        raise ValueError(f"empty gallery directory {subdirs['gallery']}")

    return Dataset(train=train, query=query, gallery=gallery, num_train_classes=num_classes)


# ---------------------------------------------------------------------------
# Synthetic desk-scale dataset
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _Row:
    person_id: int
    camera_id: int
    split: str
    seed: int


def _synthetic_rows(num_ids: int, images_per_id: int, num_cams: int, seed: int) -> list[_Row]:
    if num_ids < 2:
        raise ValueError(f"num_ids must be >= 2, got {num_ids}")
    if images_per_id < 2:
        raise ValueError(f"images_per_id must be >= 2, got {images_per_id}")
    if num_cams < 2:
        raise ValueError(f"num_cams must be >= 2, got {num_cams}")
    seed_rng = np.random.default_rng([seed, _SEED_TAG_ROWS])
    image_seeds = seed_rng.integers(0, 2**31 - 1, size=(num_ids, images_per_id))
    num_gallery = max(1, (images_per_id - 1) // 3)
    rows = []
    for pid in range(1, num_ids + 1):
        for j in range(images_per_id):
            cam = (j % num_cams) + 1
            if j == 0:
                split = "query"
            elif j <= num_gallery:
                split = "gallery"
            else:
                split = "train"
            rows.append(_Row(pid, cam, split, int(image_seeds[pid - 1, j])))
    return rows


def _identity_appearance(base_seed: int, person_id: int) -> dict:
    rng = np.random.default_rng([base_seed, person_id, _SEED_TAG_APPEARANCE])
    return {
        "head": rng.uniform(0.15, 0.95, 3),
        "torso": rng.uniform(0.15, 0.95, 3),
        "legs": rng.uniform(0.15, 0.95, 3),
        "head_end": rng.uniform(0.18, 0.30),
        "torso_end": rng.uniform(0.55, 0.72),
        "half_width": rng.uniform(0.22, 0.42),
    }


def _camera_effect(camera_id: int) -> tuple[np.ndarray, float]:
    rng = np.random.default_rng([camera_id, _SEED_TAG_CAMERA])
    cast = rng.uniform(-0.06, 0.06, 3)
    gain = float(rng.uniform(0.9, 1.1))
    return cast, gain


def _render_sample(size: tuple[int, int], appearance: dict, camera_id: int,
                   noise_seed: int) -> np.ndarray:
    """Draw one person-like figure: head/torso/legs color blocks on a gray
    background, with a per-camera color cast and per-image jitter and noise."""
    h, w = size
    cast, gain = _camera_effect(camera_id)
    noise = np.random.default_rng(noise_seed)
    img = np.full((h, w, 3), 0.5, dtype=np.float64) + cast.reshape(1, 1, 3)
    dx = int(noise.integers(-2, 3))
    cx = w // 2 + dx
    half = max(1, round(appearance["half_width"] * w))
    c0, c1 = max(0, cx - half), min(w, cx + half)
    r_head = max(1, round(appearance["head_end"] * h))
    r_torso = max(r_head + 1, round(appearance["torso_end"] * h))
    img[:r_head, c0:c1] = appearance["head"] * gain
    img[r_head:r_torso, c0:c1] = appearance["torso"] * gain
    img[r_torso:, c0:c1] = appearance["legs"] * gain
    img += noise.normal(0.0, 0.035, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _dataset_from_rows(rows: list[_Row], size: tuple[int, int], base_seed: int) -> Dataset:
    appearances: dict[int, dict] = {}
    splits: dict[str, list[Sample]] = {"train": [], "query": [], "gallery": []}
    for row in rows:
        if row.split not in splits:
            raise ValueError(f"unknown split {row.split!r} in synthetic manifest")
        if row.person_id not in appearances:
            appearances[row.person_id] = _identity_appearance(base_seed, row.person_id)
        img = _render_sample(size, appearances[row.person_id], row.camera_id, row.seed)
        path = f"{row.person_id:04d}_c{row.camera_id}_{row.seed:010d}.synthetic"
        splits[row.split].append(Sample(_freeze(img), row.person_id, row.camera_id, path))
    train, num_classes = _relabel_train(splits["train"])
    return Dataset(train=train, query=splits["query"], gallery=splits["gallery"],
                   num_train_classes=num_classes)


def make_synthetic_dataset(num_ids: int = 20, images_per_id: int = 8, num_cams: int = 3,
                           size: tuple[int, int] = (64, 32), seed: int = 7) -> Dataset:
    """Generate a deterministic colored-figure dataset.

    Per identity, image 0 goes to query, the next max(1, (k-1)//3) images to
    gallery, the rest to train; image j is assigned camera (j mod num_cams)+1,
    so the gallery always holds a cross-camera true match for every query.
    Identical arguments reproduce identical pixel data.
    """
    rows = _synthetic_rows(num_ids, images_per_id, num_cams, seed)
    return _dataset_from_rows(rows, size, seed)


def save_synthetic_manifest(path: str | Path, num_ids: int = 20, images_per_id: int = 8,
                            num_cams: int = 3, size: tuple[int, int] = (64, 32),
                            seed: int = 7) -> None:
    """Write a manifest that regenerates the same dataset via load_dataset.

    Format: '#' comments, ``key=value`` preamble (height, width, base_seed),
    then a CSV block with header ``person_id,camera_id,split,seed``.
    """
    rows = _synthetic_rows(num_ids, images_per_id, num_cams, seed)
    buf = io.StringIO()
    buf.write("# synthetic person re-identification manifest\n")
    buf.write(f"height={size[0]}\n")
    buf.write(f"width={size[1]}\n")
    buf.write(f"base_seed={seed}\n")
    writer = csv.writer(buf)
    writer.writerow(["person_id", "camera_id", "split", "seed"])
    for row in rows:
        writer.writerow([row.person_id, row.camera_id, row.split, row.seed])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def _load_synthetic_manifest(path: Path) -> Dataset:
    preamble: dict[str, int] = {}
    csv_lines: list[str] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if not csv_lines and "=" in line and "," not in line:
                key, _, value = line.partition("=")
                try:
                    preamble[key.strip()] = int(value.strip())
                except ValueError:
                    raise ValueError(
                        f"{path}:{lineno}: preamble value for {key.strip()!r} is not an integer"
                    ) from None
                continue
            csv_lines.append(line)
    for key in ("height", "width", "base_seed"):
        if key not in preamble:
            raise ValueError(f"{path}: manifest preamble is missing {key!r}")
    if not csv_lines:
        raise ValueError(f"{path}: manifest has no sample rows")
    reader = csv.DictReader(csv_lines)
    expected = ["person_id", "camera_id", "split", "seed"]
    if reader.fieldnames != expected:
        raise ValueError(f"{path}: manifest header must be {','.join(expected)}, "
                         f"got {reader.fieldnames}")
    rows = []
    for rec in reader:
        try:
            rows.append(_Row(int(rec["person_id"]), int(rec["camera_id"]),
                             rec["split"], int(rec["seed"])))
        except (TypeError, ValueError):
            raise ValueError(f"{path}: malformed manifest row {rec}") from None
    size = (preamble["height"], preamble["width"])
    return _dataset_from_rows(rows, size, preamble["base_seed"])


def load_dataset(root: str | Path, layout: str = "market_style") -> Dataset:
    """Load a dataset from disk.

    ``market_style`` expects bounding_box_train/, bounding_box_test/ and
    query/ under root. ``synthetic`` expects root to be a manifest file or a
    directory containing manifest.txt; images are regenerated from the
    manifest, byte-identical to the original generation.
    """
    root = Path(root)
    if layout == "market_style":
        if not root.is_dir():
            raise FileNotFoundError(f"dataset root {root} is not a directory")
        return _load_market_style(root)
    if layout == "synthetic":
        manifest = root if root.is_file() else root / "manifest.txt"
        if not manifest.is_file():
            raise FileNotFoundError(f"synthetic manifest {manifest} not found")
        return _load_synthetic_manifest(manifest)
    raise ValueError(f"unknown dataset layout {layout!r}")

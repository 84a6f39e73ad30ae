"""Datasets, landmark-aware augmentation, batching and synthetic faces.

Landmarks are stored normalized to [-1, 1]: pixel ``p`` in an image of
width ``W`` maps to ``2p/(W-1) - 1``. The y axis points down.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

LANDMARK_NAMES = ("left_eye", "right_eye", "nose")
CSV_COLUMNS = ("filename", "left_eye_x", "left_eye_y", "right_eye_x", "right_eye_y", "nose_x", "nose_y")
IMAGE_SUFFIXES = (".png", ".bmp", ".tif", ".tiff", ".pgm", ".ppm")
ANNOTATIONS_NAME = "annotations.csv"

ROTATION_RANGE = 30.0
TRANSLATION_RANGE = 3
NOISE_SIGMA = 0.02
MAX_RETRIES = 10


class DataError(ValueError):
    """Bad input data: missing files, malformed rows, invalid annotations."""


def to_normalized(pixels, size: int) -> np.ndarray:
    return 2.0 * np.asarray(pixels, dtype=np.float64) / (size - 1) - 1.0


def to_pixels(coords, size: int) -> np.ndarray:
    return (np.asarray(coords, dtype=np.float64) + 1.0) * (size - 1) / 2.0


def check_landmarks(coords) -> np.ndarray:
    arr = np.asarray(coords, dtype=np.float64)
    if arr.shape != (6,):
        raise DataError(f"a landmark set has exactly 6 coordinates, got shape {arr.shape}")
    if not np.all(np.abs(arr) <= 1.0):
        raise DataError(f"landmark coordinates must lie in [-1, 1], got {arr.tolist()}")
    return arr


@dataclass
class Sample:
    image: np.ndarray  # [C, S, S] in [0, 1]
    landmarks: Optional[np.ndarray] = None  # 6 normalized coords
    source_id: str = ""

    @property
    def labeled(self) -> bool:
        return self.landmarks is not None


@dataclass
class Dataset:
    """Stacked images [n, C, S, S] with optional landmarks [n, 6]."""

    images: np.ndarray
    landmarks: Optional[np.ndarray] = None
    ids: list[str] = field(default_factory=list)
    tag: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim != 4:
            raise DataError(f"images must be [n, C, S, S], got {self.images.shape}")
        if not self.ids:
            self.ids = [f"{self.tag or 'sample'}-{i:05d}" for i in range(len(self.images))]
        if self.landmarks is not None:
            self.landmarks = np.asarray(self.landmarks, dtype=np.float64)
            if self.landmarks.shape != (len(self.images), 6):
                raise DataError(f"landmarks must be [n, 6], got {self.landmarks.shape}")

    @property
    def labeled(self) -> bool:
        return self.landmarks is not None

    @property
    def size(self) -> int:
        return self.images.shape[-1]

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i: int) -> Sample:
        lm = None if self.landmarks is None else self.landmarks[i]
        return Sample(self.images[i], lm, self.ids[i])

    def subset(self, indices: Sequence[int], tag: Optional[str] = None) -> "Dataset":
        idx = np.asarray(indices, dtype=int)
        lm = None if self.landmarks is None else self.landmarks[idx]
        return Dataset(self.images[idx], lm, [self.ids[i] for i in idx], tag or self.tag)

    def unlabeled(self) -> "Dataset":
        return Dataset(self.images, None, list(self.ids), self.tag)

    @classmethod
    def from_samples(cls, samples: Sequence[Sample], tag: str = "") -> "Dataset":
        if not samples:
            raise DataError("cannot build a dataset from zero samples")
        labeled = [s.labeled for s in samples]
        if any(labeled) and not all(labeled):
            raise DataError("labeled datasets must contain only labeled samples")
        images = np.stack([s.image for s in samples])
        lm = np.stack([s.landmarks for s in samples]) if all(labeled) else None
        return cls(images, lm, [s.source_id for s in samples], tag)


# ---------------------------------------------------------------------------
# disk I/O


def read_image(path: Path, size: int, channels: int) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert("L" if channels == 1 else "RGB")
            planes = [im] if channels == 1 else list(im.split())
            out = [
                np.asarray(p.convert("F").resize((size, size), Image.BILINEAR), dtype=np.float64) / 255.0
                for p in planes
            ]
    except (OSError, ValueError) as exc:
        raise DataError(f"{path}: cannot decode image ({exc})") from exc
    return np.clip(np.stack(out), 0.0, 1.0)


def image_dimensions(path: Path) -> tuple[int, int]:
    try:
        with Image.open(path) as im:
            return im.size
    except OSError as exc:
        raise DataError(f"{path}: cannot decode image ({exc})") from exc


def read_annotations(path: Path) -> list[tuple[int, str, list[float]]]:
    rows = []
    seen: dict[str, int] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_COLUMNS:
            raise DataError(f"{path}: header must be {','.join(CSV_COLUMNS)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(CSV_COLUMNS):
                raise DataError(f"{path}:{lineno}: expected {len(CSV_COLUMNS)} fields, got {len(row)}")
            name = row[0].strip()
            if name in seen:
                raise DataError(f"{path}:{lineno}: duplicate filename {name!r} (first on line {seen[name]})")
            seen[name] = lineno
            try:
                coords = [float(c) for c in row[1:]]
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: non-numeric coordinate ({exc})") from exc
            if not all(math.isfinite(c) for c in coords):
                raise DataError(f"{path}:{lineno}: non-finite coordinate")
            rows.append((lineno, name, coords))
    return rows


def load_dataset(
    image_dir,
    annotations=None,
    size: int = 32,
    channels: int = 1,
    tag: Optional[str] = None,
) -> Dataset:
    """Load every image in ``image_dir`` (lexicographic order).

    With ``annotations``, only the annotated files are loaded and pixel
    coordinates (original resolution) are normalized to [-1, 1].
    """
    image_dir = Path(image_dir)
    if not image_dir.is_dir():
        raise DataError(f"{image_dir}: not a directory")
    tag = tag or image_dir.name
    if annotations is None or str(annotations) == "":
        files = sorted(p for p in image_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise DataError(f"{image_dir}: no images found")
        images = np.stack([read_image(p, size, channels) for p in files])
        return Dataset(images, None, [p.name for p in files], tag)

    annotations = Path(annotations)
    if not annotations.is_file():
        raise DataError(f"{annotations}: annotation file not found")
    rows = sorted(read_annotations(annotations), key=lambda r: r[1])
    if not rows:
        raise DataError(f"{annotations}: no annotation rows")
    images, landmarks, ids = [], [], []
    for lineno, name, coords in rows:
        path = image_dir / name
        if not path.is_file():
            raise DataError(f"{annotations}:{lineno}: image {name!r} not found in {image_dir}")
        w, h = image_dimensions(path)
        xs, ys = np.array(coords[0::2]), np.array(coords[1::2])
        if np.any(xs < 0) or np.any(xs > w - 1) or np.any(ys < 0) or np.any(ys > h - 1):
            raise DataError(f"{annotations}:{lineno}: landmark outside the {w}x{h} image {name!r}")
        norm = np.empty(6)
        norm[0::2] = to_normalized(xs, w)
        norm[1::2] = to_normalized(ys, h)
        images.append(read_image(path, size, channels))
        landmarks.append(norm)
        ids.append(name)
    return Dataset(np.stack(images), np.stack(landmarks), ids, tag)


def write_dataset(dataset: Dataset, out_dir) -> Path:
    """Write 8-bit PNGs plus ``annotations.csv`` (if labeled) to ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, img in zip(dataset.ids, dataset.images):
        pixels = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
        pil = Image.fromarray(pixels[0]) if pixels.shape[0] == 1 else Image.fromarray(pixels.transpose(1, 2, 0))
        pil.save(out_dir / name)
    if dataset.labeled:
        with open(out_dir / ANNOTATIONS_NAME, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_COLUMNS)
            for name, lm in zip(dataset.ids, dataset.landmarks):
                writer.writerow([name] + [repr(float(v)) for v in to_pixels(lm, dataset.size)])
    return out_dir


def load_dataset_dir(path, size: int = 32, channels: int = 1, labeled: bool = True) -> Dataset:
    """Load a directory laid out by :func:`write_dataset`."""
    path = Path(path)
    ann = path / ANNOTATIONS_NAME
    if labeled and not ann.is_file():
        raise DataError(f"{path}: expected {ANNOTATIONS_NAME} for a labeled dataset")
    return load_dataset(path, ann if labeled else None, size=size, channels=channels)


# ---------------------------------------------------------------------------
# augmentation


def _rotation_matrix(angle_degrees: float) -> np.ndarray:
    t = math.radians(angle_degrees)
    return np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])


def rotate_landmarks(coords: np.ndarray, angle_degrees: float) -> np.ndarray:
    """Rotate normalized (x, y) pairs about the image centre (y down)."""
    if angle_degrees == 0:
        return np.array(coords, dtype=np.float64)
    pts = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    return (pts @ _rotation_matrix(angle_degrees).T).reshape(-1)


def rotate_image(image: np.ndarray, angle_degrees: float) -> np.ndarray:
    """Bilinear rotation about the centre with edge-replicated fill."""
    if angle_degrees == 0:
        return image.copy()
    c, h, w = image.shape
    centre = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    inv = _rotation_matrix(-angle_degrees)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    pts = np.stack([xs.ravel() - centre[0], ys.ravel() - centre[1]])
    src = inv @ pts + centre[:, None]
    coords = np.stack([src[1], src[0]])
    out = np.stack([
        ndimage.map_coordinates(image[k], coords, order=1, mode="nearest").reshape(h, w) for k in range(c)
    ])
    return np.clip(out, 0.0, 1.0)


def augment_rotation(sample: Sample, angle_degrees: float, rng: np.random.Generator,
                     max_retries: int = MAX_RETRIES) -> Sample:
    """Rotate image and landmarks together.

    If the rotated landmarks leave [-1, 1], a fresh angle is drawn from
    ``rng``; after ``max_retries`` failures the sample passes through.
    """
    angle = float(angle_degrees)
    for _ in range(max_retries + 1):
        if sample.landmarks is None:
            return replace(sample, image=rotate_image(sample.image, angle))
        lm = rotate_landmarks(sample.landmarks, angle)
        if np.all(np.abs(lm) <= 1.0):
            return replace(sample, image=rotate_image(sample.image, angle), landmarks=lm)
        angle = float(rng.uniform(-ROTATION_RANGE, ROTATION_RANGE))
    return sample


def random_rotation(sample: Sample, rng: np.random.Generator) -> Sample:
    return augment_rotation(sample, rng.uniform(-ROTATION_RANGE, ROTATION_RANGE), rng)


def translate(sample: Sample, dx: int, dy: int) -> Sample:
    """Shift content by (dx, dy) whole pixels with edge replication."""
    img = sample.image
    c, h, w = img.shape
    pad = max(abs(dx), abs(dy))
    if pad == 0:
        return replace(sample, image=img.copy())
    padded = np.pad(img, ((0, 0), (pad, pad), (pad, pad)), mode="edge")
    out = padded[:, pad - dy:pad - dy + h, pad - dx:pad - dx + w].copy()
    lm = sample.landmarks
    if lm is not None:
        lm = lm.copy()
        lm[0::2] += 2.0 * dx / (w - 1)
        lm[1::2] += 2.0 * dy / (h - 1)
    return replace(sample, image=out, landmarks=lm)


def augment_target(sample: Sample, rng: np.random.Generator, max_shift: int = TRANSLATION_RANGE,
                   noise_sigma: float = NOISE_SIGMA, max_retries: int = MAX_RETRIES) -> Sample:
    """Random integer translation then clamped Gaussian noise."""
    shifted = None
    for _ in range(max_retries + 1):
        dx, dy = (int(v) for v in rng.integers(-max_shift, max_shift + 1, size=2))
        candidate = translate(sample, dx, dy)
        if candidate.landmarks is None or np.all(np.abs(candidate.landmarks) <= 1.0):
            shifted = candidate
            break
    if shifted is None:
        shifted = translate(sample, 0, 0)
    if noise_sigma > 0:
        noisy = shifted.image + rng.normal(0.0, noise_sigma, size=shifted.image.shape)
        shifted = replace(shifted, image=np.clip(noisy, 0.0, 1.0))
    return shifted


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    images: np.ndarray
    landmarks: Optional[np.ndarray]
    indices: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)


def batches(dataset: Dataset, batch_size: int, rng: np.random.Generator,
            cycle: bool = False) -> Iterator[Batch]:
    """Shuffled minibatches; the last short batch is kept. Cycles forever if asked."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if len(dataset) == 0:
        raise DataError("cannot batch an empty dataset")
    while True:
        order = rng.permutation(len(dataset))
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            lm = None if dataset.landmarks is None else dataset.landmarks[idx]
            yield Batch(dataset.images[idx], lm, idx)
        if not cycle:
            return


def augment_batch(batch: Batch, rng: np.random.Generator, target: bool) -> Batch:
    images, landmarks = [], []
    for i in range(len(batch)):
        lm = None if batch.landmarks is None else batch.landmarks[i]
        s = random_rotation(Sample(batch.images[i], lm), rng)
        if target:
            s = augment_target(s, rng)
        images.append(s.image)
        landmarks.append(s.landmarks)
    lm_out = None if batch.landmarks is None else np.stack(landmarks)
    return Batch(np.stack(images), lm_out, batch.indices)


# ---------------------------------------------------------------------------
# synthetic two-domain faces

EYE_ROWS = (8.0, 14.0)
LEFT_EYE_COLS = (6.0, 14.0)
RIGHT_EYE_COLS = (18.0, 26.0)
NOSE_ROWS = (18.0, 24.0)
NOSE_COLS = (12.0, 20.0)


def _grid(size):
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    return xs, ys


def _disc(xs, ys, cx, cy, r):
    return (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r


def _ring(xs, ys, cx, cy, r, thickness=1.0):
    d = np.hypot(xs - cx, ys - cy)
    return np.abs(d - r) <= thickness / 2.0


def _plus(xs, ys, cx, cy, arm):
    horiz = (np.abs(ys - cy) <= 0.5) & (np.abs(xs - cx) <= arm + 0.5)
    vert = (np.abs(xs - cx) <= 0.5) & (np.abs(ys - cy) <= arm + 0.5)
    return horiz | vert


def _triangle(xs, ys, cx, cy, height):
    top = cy - height / 2.0
    inside = (ys >= top - 0.5) & (ys <= cy + height / 2.0 + 0.5)
    half_width = (ys - top + 0.5) / 2.0
    return inside & (np.abs(xs - cx) <= half_width)


def _sample_centres(rng, scale):
    def band(lo_hi):
        return rng.uniform(lo_hi[0] * scale, lo_hi[1] * scale)

    return [
        (band(LEFT_EYE_COLS), band(EYE_ROWS)),
        (band(RIGHT_EYE_COLS), band(EYE_ROWS)),
        (band(NOSE_COLS), band(NOSE_ROWS)),
    ]


def render_face(domain: str, centres, size: int = 32, brightness: float = 0.0,
                eye_radii=(2.5, 2.5)) -> np.ndarray:
    xs, ys = _grid(size)
    scale = size / 32.0
    (lx, ly), (rx, ry), (nx, ny) = centres
    if domain == "source":
        img = np.full((size, size), 0.8 + brightness)
        for (cx, cy), r in zip(((lx, ly), (rx, ry)), eye_radii):
            img[_disc(xs, ys, cx, cy, r * scale)] = 0.1
        img[_plus(xs, ys, nx, ny, 2.0 * scale)] = 0.15
    elif domain == "target":
        img = np.full((size, size), 0.2 + brightness)
        for cx, cy in ((lx, ly), (rx, ry)):
            img[_ring(xs, ys, cx, cy, 3.0 * scale)] = 0.9
        img[_triangle(xs, ys, nx, ny, 5.0 * scale)] = 0.85
    else:
        raise ValueError(f"unknown domain {domain!r}; use 'source' or 'target'")
    return np.clip(img, 0.0, 1.0)[None]


def generate_synthetic(domain: str, count: int, seed: int, size: int = 32) -> Dataset:
    """Deterministic cartoon faces; labels are the exact feature centres.

    Source faces: light background, dark filled-disc eyes, dark plus nose.
    Target faces: dark background, bright ring eyes, bright triangle nose.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if domain not in ("source", "target"):
        raise ValueError(f"unknown domain {domain!r}; use 'source' or 'target'")
    rng = np.random.default_rng([seed, 0 if domain == "source" else 1])
    scale = size / 32.0
    images, landmarks = [], []
    for _ in range(count):
        centres = _sample_centres(rng, scale)
        brightness = rng.uniform(-0.05, 0.05)
        radii = tuple(rng.uniform(2.0, 3.0, size=2))
        images.append(render_face(domain, centres, size, brightness, radii))
        landmarks.append(to_normalized(np.array(centres).reshape(-1), size))
    ids = [f"{domain}_{seed}_{i:05d}.png" for i in range(count)]
    return Dataset(np.stack(images), np.stack(landmarks), ids, tag=f"synthetic-{domain}")

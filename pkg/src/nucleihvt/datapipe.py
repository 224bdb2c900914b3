"""Patch extraction, augmentation, normalization and pixel-file codecs.

On-disk datasets use binary PPM (P6, RGB) images and PGM (P5) class-index
masks::

    root/
      dataset.txt      one stem per line, defines order
      images/<stem>.ppm
      masks/<stem>.pgm
      norm_stats.txt   3 means then 3 stds (optional)

Images are held in memory as float32 in [0, 1] with shape (3, h, w) and
normalized only when batches are assembled.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

MONUSAC_CLASSES = ("background", "epithelial", "lymphocyte", "macrophage", "neutrophil")
MONUSEG_CLASSES = ("background", "nucleus")
STD_FLOOR = 1e-6


class DataError(ValueError):
    """Malformed or inconsistent pixel data."""


@dataclass
class Sample:
    image: np.ndarray  # (3, h, w) float32
    mask: np.ndarray  # (h, w) uint8 class indices
    source: str = ""
    offset: tuple[int, int] = (0, 0)

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[1:] != self.mask.shape:
            raise DataError(f"image {self.image.shape} and mask {self.mask.shape} disagree on spatial shape")


@dataclass(frozen=True)
class AugmentPolicy:
    flip: bool = True
    flip_h_prob: float = 0.5
    flip_v_prob: float = 0.5
    affine: bool = True
    rotation: float = 15.0
    translation: float = 0.05
    scale: tuple[float, float] = (0.9, 1.1)
    photometric: bool = True
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2

    def __post_init__(self):
        for name in ("flip_h_prob", "flip_v_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        lo, hi = self.scale
        if lo <= 0 or hi < lo:
            raise ValueError(f"invalid scale range {self.scale}")

    @classmethod
    def disabled(cls) -> "AugmentPolicy":
        return cls(flip=False, affine=False, photometric=False)


@dataclass(frozen=True)
class NormStats:
    mean: tuple[float, float, float]
    std: tuple[float, float, float]

    def __post_init__(self):
        if len(self.mean) != 3 or len(self.std) != 3:
            raise ValueError("NormStats needs three means and three stds")
        if any(s <= 0 for s in self.std):
            raise ValueError(f"NormStats std must be positive, got {self.std}")

    def save(self, path) -> None:
        Path(path).write_text(" ".join(repr(float(v)) for v in (*self.mean, *self.std)) + "\n")

    @classmethod
    def load(cls, path) -> "NormStats":
        values = [float(v) for v in Path(path).read_text().split()]
        if len(values) != 6:
            raise DataError(f"{path}: expected 6 numbers, found {len(values)}")
        return cls(tuple(values[:3]), tuple(values[3:]))


# ---------------------------------------------------------------------------
# PPM / PGM codecs


def _parse_header(buf: bytes, magic: bytes, path) -> tuple[int, int, int]:
    if buf[:2] != magic:
        raise DataError(f"{path}: bad magic {buf[:2]!r} at byte 0, expected {magic!r}")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and buf[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: malformed header at byte {start}")
        fields.append(int(buf[start:pos]))
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise DataError(f"{path}: missing whitespace after header at byte {pos}")
    width, height, maxval = fields
    if maxval != 255:
        raise DataError(f"{path}: maxval {maxval} unsupported (only 255)")
    return width, height, pos + 1


def _read_netpbm(path, magic: bytes, channels: int) -> np.ndarray:
    buf = Path(path).read_bytes()
    width, height, offset = _parse_header(buf, magic, path)
    need = width * height * channels
    if len(buf) - offset < need:
        raise DataError(f"{path}: truncated payload at byte {len(buf)}, expected {offset + need} bytes")
    arr = np.frombuffer(buf, dtype=np.uint8, count=need, offset=offset)
    return arr.reshape((height, width, channels) if channels > 1 else (height, width)).copy()


def read_image_u8(path) -> np.ndarray:
    """H x W x 3 uint8 pixels from a binary PPM."""
    return _read_netpbm(path, b"P6", 3)


def read_image(path) -> np.ndarray:
    """H x W x 3 float32 in [0, 1] from a binary PPM."""
    return read_image_u8(path).astype(np.float32) / np.float32(255)


def write_image(path, image: np.ndarray) -> None:
    """Write H x W x 3 pixels (uint8, or reals in [0, 1]) as binary PPM."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DataError(f"expected an H x W x 3 image, got {image.shape}")
    if image.dtype != np.uint8:
        image = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = image.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(image).tobytes())


def read_mask(path, num_classes: int | None = None) -> np.ndarray:
    mask = _read_netpbm(path, b"P5", 1)
    if num_classes is not None:
        validate_mask(mask, num_classes, path)
    return mask


def write_mask(path, mask: np.ndarray) -> None:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise DataError(f"expected an H x W mask, got {mask.shape}")
    if mask.size and (mask.min() < 0 or mask.max() > 255):
        raise DataError("mask values must fit in 8 bits")
    h, w = mask.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + mask.astype(np.uint8).tobytes())


def validate_mask(mask: np.ndarray, num_classes: int, source="mask") -> None:
    if mask.size and mask.max() >= num_classes:
        raise DataError(f"{source}: class value {int(mask.max())} >= num_classes {num_classes}")


# ---------------------------------------------------------------------------
# tiling


def padded_extent(n: int, size: int, stride: int) -> int:
    if n <= size:
        return size
    return math.ceil((n - size) / stride) * stride + size


def extract_patches(image: np.ndarray, mask: np.ndarray, size: int = 256, stride: int | None = None, source: str = "") -> list[Sample]:
    """Reflect-pad to full stride coverage and tile into size x size samples.

    ``image`` is H x W x 3 (uint8 or [0, 1] reals), ``mask`` is H x W.
    """
    if size <= 0:
        raise ValueError("patch size must be positive")
    stride = size if stride is None else stride
    if stride <= 0:
        raise ValueError("patch stride must be positive")
    if image.shape[:2] != mask.shape:
        raise DataError(f"image {image.shape[:2]} and mask {mask.shape} differ in size")
    if image.dtype == np.uint8:
        image = image.astype(np.float32) / np.float32(255)
    h, w = mask.shape
    ph, pw = padded_extent(h, size, stride) - h, padded_extent(w, size, stride) - w
    img = np.pad(image, ((0, ph), (0, pw), (0, 0)), mode="reflect")
    msk = np.pad(mask, ((0, ph), (0, pw)), mode="reflect")
    out = []
    for r in range(0, img.shape[0] - size + 1, stride):
        for c in range(0, img.shape[1] - size + 1, stride):
            out.append(
                Sample(
                    np.ascontiguousarray(img[r : r + size, c : c + size].transpose(2, 0, 1), dtype=np.float32),
                    np.ascontiguousarray(msk[r : r + size, c : c + size]),
                    source,
                    (r, c),
                )
            )
    return out


# ---------------------------------------------------------------------------
# augmentation


def hflip(s: Sample) -> Sample:
    return Sample(s.image[:, :, ::-1].copy(), s.mask[:, ::-1].copy(), s.source, s.offset)


def vflip(s: Sample) -> Sample:
    return Sample(s.image[:, ::-1, :].copy(), s.mask[::-1, :].copy(), s.source, s.offset)


def _affine(s: Sample, angle: float, shift: tuple[float, float], scale: float) -> Sample:
    h, w = s.mask.shape
    theta = math.radians(angle)
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]]) / scale
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    # output pixel o samples input at rot @ (o - center - shift) + center
    offset = center - rot @ (center + np.asarray(shift))
    image = np.stack(
        [ndimage.affine_transform(ch, rot, offset, order=1, mode="reflect") for ch in s.image]
    ).astype(np.float32)
    mask = ndimage.affine_transform(s.mask, rot, offset, order=0, mode="reflect")
    return Sample(image, mask.astype(s.mask.dtype), s.source, s.offset)


def _photometric(image: np.ndarray, rng: np.random.Generator, p: AugmentPolicy) -> np.ndarray:
    img = image + np.float32(rng.uniform(-p.brightness, p.brightness))
    mean = img.mean()
    img = (img - mean) * np.float32(rng.uniform(1 - p.contrast, 1 + p.contrast)) + mean
    gray = img.mean(axis=0, keepdims=True)
    img = gray + (img - gray) * np.float32(rng.uniform(1 - p.saturation, 1 + p.saturation))
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def augment(s: Sample, rng: np.random.Generator, p: AugmentPolicy) -> Sample:
    """Random flips, affine warp and photometric jitter.

    Geometry is shared by image (bilinear) and mask (nearest neighbour);
    photometric changes touch the image only.
    """
    if p.flip:
        if rng.random() < p.flip_h_prob:
            s = hflip(s)
        if rng.random() < p.flip_v_prob:
            s = vflip(s)
    if p.affine:
        h, w = s.mask.shape
        angle = rng.uniform(-p.rotation, p.rotation)
        shift = (rng.uniform(-p.translation, p.translation) * h, rng.uniform(-p.translation, p.translation) * w)
        scale = rng.uniform(*p.scale)
        s = _affine(s, angle, shift, scale)
    if p.photometric:
        s = Sample(_photometric(s.image, rng, p), s.mask, s.source, s.offset)
    return s


# ---------------------------------------------------------------------------
# normalization


def normalize(image: np.ndarray, stats: NormStats) -> np.ndarray:
    """(x - mean) / std per channel on a (3, h, w) or (N, 3, h, w) array."""
    mean = np.asarray(stats.mean, dtype=np.float32).reshape(3, 1, 1)
    std = np.asarray(stats.std, dtype=np.float32).reshape(3, 1, 1)
    return ((image - mean) / std).astype(np.float32)


def denormalize(image: np.ndarray, stats: NormStats) -> np.ndarray:
    mean = np.asarray(stats.mean, dtype=np.float32).reshape(3, 1, 1)
    std = np.asarray(stats.std, dtype=np.float32).reshape(3, 1, 1)
    return (image * std + mean).astype(np.float32)


def compute_norm_stats(images: Iterable[np.ndarray]) -> NormStats:
    """Per-channel mean and population std over (3, h, w) images, two passes."""
    images = list(images)
    if not images:
        raise ValueError("cannot compute normalization statistics of an empty dataset")
    count = sum(im.shape[1] * im.shape[2] for im in images)
    total = np.zeros(3)
    for im in images:
        total += im.reshape(3, -1).sum(axis=1, dtype=np.float64)
    mean = total / count
    sq = np.zeros(3)
    for im in images:
        d = im.reshape(3, -1).astype(np.float64) - mean[:, None]
        sq += (d * d).sum(axis=1)
    std = np.sqrt(sq / count)
    if (std < STD_FLOOR).any():
        log.warning("channel std below %g; flooring (constant channel?)", STD_FLOOR)
        std = np.maximum(std, STD_FLOOR)
    return NormStats(tuple(float(v) for v in mean), tuple(float(v) for v in std))


# ---------------------------------------------------------------------------
# datasets and batching


def save_dataset(root, samples: Sequence[Sample], stems: Sequence[str], stats: NormStats | None = None) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s, stem in zip(samples, stems):
        write_image(root / "images" / f"{stem}.ppm", s.image.transpose(1, 2, 0))
        write_mask(root / "masks" / f"{stem}.pgm", s.mask)
    (root / "dataset.txt").write_text("".join(f"{stem}\n" for stem in stems))
    if stats is not None:
        stats.save(root / "norm_stats.txt")


def load_dataset(root, num_classes: int | None = None) -> list[Sample]:
    root = Path(root)
    manifest = root / "dataset.txt"
    if not manifest.exists():
        raise DataError(f"{root}: missing dataset.txt manifest")
    stems = [line.strip() for line in manifest.read_text().splitlines() if line.strip()]
    if not stems:
        raise DataError(f"{manifest}: manifest lists no samples")
    out = []
    for stem in stems:
        image = read_image(root / "images" / f"{stem}.ppm")
        mask = read_mask(root / "masks" / f"{stem}.pgm", num_classes)
        out.append(Sample(np.ascontiguousarray(image.transpose(2, 0, 1)), mask, stem))
    return out


@dataclass
class BatchStream:
    """Deterministic batches: step ``s`` depends only on (seed, s).

    Each epoch visits samples in a seeded permutation; every sample is
    augmented with its own generator derived from (seed, step, slot), so a
    resumed run sees exactly the batches an uninterrupted run would.
    """

    samples: Sequence[Sample]
    batch_size: int
    stats: NormStats
    policy: AugmentPolicy = field(default_factory=AugmentPolicy.disabled)
    seed: int = 0

    def __post_init__(self):
        if not self.samples:
            raise ValueError("batch stream needs at least one sample")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def indices(self, step: int) -> list[int]:
        n = len(self.samples)
        out = []
        for slot in range(self.batch_size):
            pos = step * self.batch_size + slot
            epoch, i = divmod(pos, n)
            order = np.random.default_rng([self.seed, epoch]).permutation(n)
            out.append(int(order[i]))
        return out

    def batch(self, step: int) -> tuple[np.ndarray, np.ndarray]:
        images, masks = [], []
        for slot, idx in enumerate(self.indices(step)):
            s = self.samples[idx]
            s = augment(s, np.random.default_rng([self.seed, step, slot]), self.policy)
            images.append(normalize(s.image, self.stats))
            masks.append(s.mask)
        return np.stack(images), np.stack(masks).astype(np.int64)


def stack_samples(samples: Sequence[Sample], stats: NormStats) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([normalize(s.image, stats) for s in samples]), np.stack([s.mask for s in samples]).astype(np.int64)


# ---------------------------------------------------------------------------
# synthetic data


NUCLEUS_COLORS = np.array(
    [
        (0.93, 0.78, 0.86),  # background (eosin pink)
        (0.35, 0.20, 0.55),
        (0.20, 0.12, 0.45),
        (0.50, 0.30, 0.60),
        (0.28, 0.25, 0.62),
    ],
    dtype=np.float32,
)


def synthetic_nuclei(count: int, size: int = 64, num_classes: int = 2, seed: int = 0, blobs: int = 6) -> list[Sample]:
    """H&E-like toy patches: elliptical dark 'nuclei' on a pink background.

    With more than two classes each blob gets a random nucleus type whose
    color and size differ slightly.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    out = []
    for n in range(count):
        mask = np.zeros((size, size), dtype=np.uint8)
        for _ in range(blobs):
            cls = int(rng.integers(1, num_classes))
            r = size * rng.uniform(0.06, 0.12) * (1 + 0.15 * (cls - 1))
            ry, rx = r * rng.uniform(0.7, 1.3), r * rng.uniform(0.7, 1.3)
            cy, cx = rng.uniform(r, size - r), rng.uniform(r, size - r)
            t = rng.uniform(0, np.pi)
            dy, dx = yy - cy, xx - cx
            u = dy * np.cos(t) + dx * np.sin(t)
            v = -dy * np.sin(t) + dx * np.cos(t)
            mask[(u / ry) ** 2 + (v / rx) ** 2 <= 1.0] = cls
        colors = NUCLEUS_COLORS[np.minimum(mask, len(NUCLEUS_COLORS) - 1)]
        noise = rng.normal(0.0, 0.04, size=(size, size, 3)).astype(np.float32)
        image = np.clip(colors + noise, 0.0, 1.0)
        image = np.rint(image * 255) / np.float32(255)  # representable in 8 bits
        out.append(Sample(np.ascontiguousarray(image.transpose(2, 0, 1), dtype=np.float32), mask, f"synthetic_{n:03d}"))
    return out

"""Synthetic grayscale shape images, deterministic splits, and container I/O.

Eight classes on a 32x32 canvas, built around two confusable families: the
ring shares its outer contour with the disk (and the other solid shapes
share the same size and placement), while the checkerboard shares its
period range with both stripe classes.  Every instance is randomly placed
and sized within bounds and drawn at a random contrast, then additive
uniform noise of amplitude 0.1 is applied and the result clamped to [0, 1].

Generation is per-class seeded (seed XOR class index), so classes can be
produced in any order, or in parallel, without changing a single pixel.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FileFormatError

DATASET_MAGIC = b"CASED1\x00"
DATASET_VERSION = 1

IMAGE_SIDE = 32
CLASS_NAMES = ("disk", "vertical-stripes", "triangle", "square",
               "ring", "cross", "horizontal-stripes", "checkerboard")

_YY, _XX = np.mgrid[0:IMAGE_SIDE, 0:IMAGE_SIDE].astype(np.float64)


@dataclass
class LabeledImage:
    pixels: np.ndarray  # (1, 32, 32) float64 in [0, 1]
    label: int

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.shape != (1, IMAGE_SIDE, IMAGE_SIDE):
            raise ValueError(f"image must be (1, {IMAGE_SIDE}, {IMAGE_SIDE}), got {self.pixels.shape}")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")
        if not 0 <= self.label < len(CLASS_NAMES):
            raise ValueError(f"label {self.label} out of range")


@dataclass
class DatasetSplit:
    train: list
    validation: list
    test: list
    seed: int
    class_count: int = len(CLASS_NAMES)


def _shape_mask(label, rng):
    """Binary silhouette (as float64) for one random instance of a class.

    Three class pairs are near twins separated by one small feature: the
    ring is a disk with a pixel-scale hole, the cross is the square's
    diamond silhouette with four shallow notches, and the checkerboard
    matches the horizontal stripes row-for-row with sparse vertical seams.
    The twin feature is readable on a bright instance and lost in noise on
    a faint one, so each twin pair trades mistakes at a steady rate while
    the triangle and the vertical stripes stay cleanly separated.
    """
    cy = 16.0 + rng.uniform(-2.0, 2.0)
    cx = 16.0 + rng.uniform(-2.0, 2.0)
    r = rng.uniform(9.0, 11.5)
    d2 = (_XX - cx) ** 2 + (_YY - cy) ** 2
    window = d2 <= r * r

    name = CLASS_NAMES[label]
    if name == "disk":
        return window.astype(np.float64)
    if name == "ring":
        # the hole stays a few pixels wide, so the ring is never literally
        # a disk; faint instances still bury it in noise, and the two
        # classes trade mistakes at a rate training cannot remove
        hole = r * rng.uniform(0.18, 0.34)
        return (window & (d2 >= hole * hole)).astype(np.float64)
    if name == "square":
        # rotated 45 degrees; the tips past the window radius keep the
        # square family apart from the disk even when faint
        diamond = (np.abs(_XX - cx) + np.abs(_YY - cy)) <= 1.15 * r
        return diamond.astype(np.float64)
    if name == "triangle":
        top = cy - r
        base = cy + 0.8 * r
        halfwidth = (_YY - top) * 0.62
        mask = (_YY >= top) & (_YY <= base) & (np.abs(_XX - cx) <= halfwidth)
        return (mask & window).astype(np.float64)
    if name == "cross":
        # the square's diamond with a notch bitten out of each edge
        # midpoint, leaving a four-armed star
        d = 1.15 * r
        ax, ay = np.abs(_XX - cx), np.abs(_YY - cy)
        # the smallest notches carve out no pixel at all, so a slice of
        # crosses is pixel-identical to squares
        rho = d * rng.uniform(0.26, 0.34)
        notch = (ax - 0.5 * d) ** 2 + (ay - 0.5 * d) ** 2 <= rho * rho
        return ((ax + ay <= d) & ~notch).astype(np.float64)

    if name == "horizontal-stripes":
        period = rng.uniform(3.5, 5.5)
        phase = rng.uniform(0.0, period)
        bands = np.floor((_YY + phase) / period).astype(np.int64) % 2 == 0
        return (window & bands).astype(np.float64)
    if name == "vertical-stripes":
        period = rng.uniform(3.5, 5.5)
        phase = rng.uniform(0.0, period)
        bands = np.floor((_XX + phase) / period).astype(np.int64) % 2 == 0
        return (window & bands).astype(np.float64)
    # strongly elongated tiles: the row period matches the horizontal
    # stripes, and only the sparse vertical seams separate a checkerboard
    # from a plain stripe field; an elongated enough tile can leave no
    # seam inside the window at all
    period_y = rng.uniform(3.5, 5.5)
    period_x = rng.uniform(6.0, 9.0)
    band_y = np.floor((_YY + rng.uniform(0.0, period_y)) / period_y).astype(np.int64)
    band_x = np.floor((_XX + rng.uniform(0.0, period_x)) / period_x).astype(np.int64)
    checker = (band_y + band_x) % 2 == 0
    return (window & checker).astype(np.float64)


# Contrast is capped well below full brightness and spans down to near
# the noise floor.  The faint end produces instances whose twin-pair
# identity is genuinely ambiguous, and the cap keeps activations small
# enough that a standard training run ends at moderate confidence instead
# of saturating.
INTENSITY_RANGE = (0.45, 0.85)
NOISE_AMPLITUDE = 0.1


def render_class_instance(label, rng):
    """One noisy instance of a class as a (1, 32, 32) float64 image."""
    field = _shape_mask(label, rng)
    intensity = rng.uniform(*INTENSITY_RANGE)
    img = field * intensity
    img += rng.uniform(-NOISE_AMPLITUDE, NOISE_AMPLITUDE, size=img.shape)
    np.clip(img, 0.0, 1.0, out=img)
    # snap to the float32 grid once, so the on-disk container (which stores
    # float32) round-trips value-exactly
    img = img.astype(np.float32).astype(np.float64)
    return img[None, :, :]


def generate(seed, per_class):
    """``per_class`` images for each of the 8 classes, class-major order."""
    if per_class < 0:
        raise ValueError("per_class must be non-negative")
    images = []
    for label in range(len(CLASS_NAMES)):
        rng = np.random.default_rng((seed ^ label) & 0xFFFFFFFFFFFFFFFF)
        for _ in range(per_class):
            images.append(LabeledImage(render_class_instance(label, rng), label))
    return images


def split(images, fractions, seed):
    """Stratified three-way split with a seeded shuffle.

    ``fractions`` must sum to 1.  Within each class the shuffled indices are
    cut at cumulatively rounded boundaries, so per-class counts differ from
    exact stratification by at most one.
    """
    if len(fractions) != 3:
        raise ValueError("fractions must be (train, validation, test)")
    total = float(sum(fractions))
    if not np.isclose(total, 1.0, atol=1e-9):
        raise ValueError(f"fractions must sum to 1, got {total}")
    if any(f < 0 for f in fractions):
        raise ValueError("fractions must be non-negative")
    rng = np.random.default_rng(seed)
    parts = ([], [], [])
    labels = sorted({im.label for im in images})
    for label in labels:
        idx = [i for i, im in enumerate(images) if im.label == label]
        rng.shuffle(idx)
        n = len(idx)
        b1 = int(np.floor(fractions[0] * n + 0.5))
        b2 = int(np.floor((fractions[0] + fractions[1]) * n + 0.5))
        for part, sel in zip(parts, (idx[:b1], idx[b1:b2], idx[b2:])):
            part.extend(images[i] for i in sel)
    return DatasetSplit(parts[0], parts[1], parts[2], seed)


def save_container(images, path):
    """Binary container: magic, version, count, then label + f32 pixels."""
    out = bytearray()
    out += DATASET_MAGIC
    out += struct.pack("<I", DATASET_VERSION)
    out += struct.pack("<I", len(images))
    for im in images:
        out += struct.pack("<H", im.label)
        out += np.ascontiguousarray(im.pixels, dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(bytes(out))


def load_container(path):
    with open(path, "rb") as f:
        data = f.read()
    pos = 0
    if data[:len(DATASET_MAGIC)] != DATASET_MAGIC:
        raise FileFormatError(
            f"bad magic {data[:len(DATASET_MAGIC)]!r}, expected {DATASET_MAGIC!r}", 0)
    pos = len(DATASET_MAGIC)
    if len(data) < pos + 8:
        raise FileFormatError("truncated header", pos)
    version, count = struct.unpack_from("<II", data, pos)
    if version != DATASET_VERSION:
        raise FileFormatError(f"unsupported dataset version {version}", pos)
    pos += 8
    pixels_bytes = IMAGE_SIDE * IMAGE_SIDE * 4
    images = []
    for k in range(count):
        if len(data) < pos + 2:
            raise FileFormatError(f"truncated label of image {k}", pos)
        (label,) = struct.unpack_from("<H", data, pos)
        pos += 2
        if len(data) < pos + pixels_bytes:
            raise FileFormatError(f"truncated pixel data of image {k}", pos)
        px = np.frombuffer(data, dtype="<f4", count=IMAGE_SIDE * IMAGE_SIDE, offset=pos)
        pos += pixels_bytes
        images.append(LabeledImage(px.astype(np.float64).reshape(1, IMAGE_SIDE, IMAGE_SIDE), label))
    if pos != len(data):
        raise FileFormatError(f"{len(data) - pos} trailing bytes after last image", pos)
    return images


def mean_pixel(images):
    """Mean pixel value across a list of images (the ablation fill source)."""
    if not images:
        raise ValueError("mean_pixel of an empty image list")
    return float(np.mean([im.pixels.mean() for im in images]))

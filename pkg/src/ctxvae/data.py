"""Dataset ingestion: IDX and PPM containers, dynamic binarization, synthesis.

Loaders are lossless; the only stochastic transform is binarization, which is
reproducible from (seed, epoch).  Because this sandbox has no dataset
downloads, :func:`synthetic_digits` and :func:`synthetic_photo` procedurally
generate stand-ins with hand-digit / photograph statistics; they write and
load through the same containers as real data.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Dataset", "load_idx", "write_idx", "load_ppm", "write_ppm",
    "binarize_dynamic", "synthetic_digits", "synthetic_photo", "data_root",
]

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

DATA_ROOT_ENV = "CTXVAE_DATA"


def data_root(default="data"):
    """Directory searched for datasets, overridable by environment."""
    return os.environ.get(DATA_ROOT_ENV, default)


@dataclass
class Dataset:
    """Images as uint8 (N, Ch, D, D) plus provenance for replayable runs."""

    images: np.ndarray
    path: str = ""
    split: str = ""
    checksum: str = ""
    labels: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, Ch, D, D), got {self.images.shape}")
        if self.images.dtype != np.uint8:
            raise ValueError(f"images must be uint8, got {self.images.dtype}")
        if not self.checksum:
            self.checksum = hashlib.sha256(self.images.tobytes()).hexdigest()

    def __len__(self):
        return self.images.shape[0]

    def subset(self, index, split=""):
        return Dataset(images=self.images[index], path=self.path,
                       split=split or self.split,
                       labels=None if self.labels is None else self.labels[index])


# ---------------------------------------------------------------------------
# IDX container
# ---------------------------------------------------------------------------

def load_idx(path):
    """Parse a big-endian IDX image (or label) file into a Dataset."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4:
        raise ValueError(f"{path}: truncated IDX header at byte offset 0 "
                         f"(need 4 bytes, have {len(blob)})")
    magic = int.from_bytes(blob[0:4], "big")
    if magic == IDX_IMAGES_MAGIC:
        ndim = 3
    elif magic == IDX_LABELS_MAGIC:
        ndim = 1
    else:
        raise ValueError(f"{path}: bad IDX magic 0x{magic:08x} at byte offset 0")
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise ValueError(f"{path}: truncated IDX header at byte offset {len(blob)} "
                         f"(need {header} bytes)")
    extents = [int.from_bytes(blob[4 + 4 * i:8 + 4 * i], "big") for i in range(ndim)]
    count = int(np.prod(extents))
    expected = header + count
    if len(blob) != expected:
        raise ValueError(f"{path}: IDX payload length mismatch at byte offset "
                         f"{min(len(blob), expected)}: expected {expected} bytes "
                         f"total, got {len(blob)}")
    data = np.frombuffer(blob, dtype=np.uint8, offset=header).reshape(extents)
    if ndim == 1:
        images = np.zeros((extents[0], 1, 1, 1), dtype=np.uint8)
        return Dataset(images=images, path=str(path), labels=data.copy())
    return Dataset(images=data.reshape(extents[0], 1, extents[1], extents[2]).copy(),
                   path=str(path))


def write_idx(images, path):
    """Write (N, 1, H, W) or (N, H, W) uint8 images as an IDX file."""
    arr = np.asarray(images, dtype=np.uint8)
    if arr.ndim == 4:
        if arr.shape[1] != 1:
            raise ValueError(f"IDX stores single-channel images, got {arr.shape}")
        arr = arr[:, 0]
    if arr.ndim != 3:
        raise ValueError(f"expected (N, H, W) images, got shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(IDX_IMAGES_MAGIC.to_bytes(4, "big"))
        for extent in arr.shape:
            fh.write(int(extent).to_bytes(4, "big"))
        fh.write(arr.tobytes())


# ---------------------------------------------------------------------------
# binary PPM (P6)
# ---------------------------------------------------------------------------

def _read_ppm_token(blob, pos):
    # skip whitespace and '#' comments per the P6 header grammar
    n = len(blob)
    while pos < n:
        c = blob[pos:pos + 1]
        if c.isspace():
            pos += 1
        elif c == b"#":
            while pos < n and blob[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        else:
            break
    start = pos
    while pos < n and not blob[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise ValueError("unexpected end of PPM header")
    return blob[start:pos], pos


def load_ppm(path):
    """Read a binary P6 image with maxval 255 into uint8 (3, H, W)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    token, pos = _read_ppm_token(blob, 0)
    if token != b"P6":
        raise ValueError(f"{path}: not a binary PPM (magic {token!r})")
    fields = []
    for _ in range(3):
        token, pos = _read_ppm_token(blob, pos)
        fields.append(int(token))
    width, height, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: unsupported PPM maxval {maxval} (only 255)")
    pos += 1  # single whitespace byte after maxval
    need = width * height * 3
    if len(blob) - pos < need:
        raise ValueError(f"{path}: truncated PPM payload: expected {need} bytes, "
                         f"got {len(blob) - pos}")
    pixels = np.frombuffer(blob, dtype=np.uint8, count=need, offset=pos)
    return pixels.reshape(height, width, 3).transpose(2, 0, 1).copy()


def write_ppm(image, path):
    """Write uint8 (3, H, W) as binary P6 with maxval 255."""
    arr = np.asarray(image, dtype=np.uint8)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"expected (3, H, W) image, got shape {arr.shape}")
    _, H, W = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{W} {H}\n255\n".encode("ascii"))
        fh.write(arr.transpose(1, 2, 0).tobytes())


# ---------------------------------------------------------------------------
# dynamic binarization
# ---------------------------------------------------------------------------

def binarize_dynamic(images, seed, epoch=None):
    """Bernoulli draw per pixel with success probability intensity/255.

    Training splits pass the epoch index so every epoch re-draws a fresh but
    reproducible binarization; evaluation splits pass ``epoch=None`` for one
    fixed draw derived from the seed alone.
    """
    arr = np.asarray(images)
    if arr.dtype != np.uint8:
        raise ValueError(f"binarization expects uint8 intensities, got {arr.dtype}")
    key = (int(seed),) if epoch is None else (int(seed), int(epoch))
    rng = np.random.default_rng(np.random.SeedSequence(key))
    u = rng.random(arr.shape)
    return (u * 255.0 < arr).astype(np.uint8)


# ---------------------------------------------------------------------------
# procedural stand-in data
# ---------------------------------------------------------------------------

def _arc(cx, cy, r, a0, a1, n=14, ry=None):
    t = np.linspace(np.deg2rad(a0), np.deg2rad(a1), n)
    return np.stack([cx + r * np.cos(t), cy + (ry or r) * np.sin(t)], axis=1)


def _path(*pts):
    return np.asarray(pts, dtype=np.float64)


# stroke skeletons per digit, coordinates in a unit box (x right, y down)
_DIGIT_STROKES = {
    0: [_arc(0.5, 0.5, 0.26, 0, 360, n=24, ry=0.36)],
    1: [_path((0.38, 0.26), (0.54, 0.12), (0.54, 0.88))],
    2: [np.concatenate([_arc(0.5, 0.32, 0.21, 180, -10, n=12),
                        _path((0.69, 0.4), (0.31, 0.86), (0.72, 0.86))])],
    3: [_arc(0.48, 0.32, 0.2, 150, -80, n=12),
        _arc(0.47, 0.67, 0.23, 80, -150, n=12)],
    4: [_path((0.63, 0.12), (0.28, 0.6), (0.78, 0.6)),
        _path((0.63, 0.3), (0.63, 0.88))],
    5: [_path((0.7, 0.14), (0.34, 0.14), (0.33, 0.45)),
        _arc(0.47, 0.64, 0.23, -110, 130, n=14)],
    6: [np.concatenate([_path((0.64, 0.12), (0.42, 0.42)),
                        _arc(0.5, 0.65, 0.2, 140, -220, n=18)])],
    7: [_path((0.28, 0.15), (0.73, 0.15), (0.42, 0.88))],
    8: [_arc(0.5, 0.31, 0.17, 90, 450, n=18),
        _arc(0.5, 0.68, 0.21, 90, 450, n=20)],
    9: [_arc(0.5, 0.36, 0.19, 0, 360, n=16),
        _path((0.69, 0.36), (0.66, 0.6), (0.52, 0.88))],
}


def _render_strokes(strokes, radius, grid):
    gx, gy = grid
    img = np.zeros(gx.shape, dtype=np.float64)
    for pts in strokes:
        for (x0, y0), (x1, y1) in zip(pts[:-1], pts[1:]):
            dx, dy = x1 - x0, y1 - y0
            norm2 = dx * dx + dy * dy
            if norm2 < 1e-12:
                dist = np.hypot(gx - x0, gy - y0)
            else:
                t = np.clip(((gx - x0) * dx + (gy - y0) * dy) / norm2, 0.0, 1.0)
                dist = np.hypot(gx - (x0 + t * dx), gy - (y0 + t * dy))
            # saturated stroke core with a narrow anti-aliased rim
            img = np.maximum(img, np.clip((1.3 - dist / radius) / 0.45, 0.0, 1.0))
    return np.clip(img, 0.0, 1.0)


def synthetic_digits(n, seed, size=28, labels=False):
    """Procedural handwritten-digit stand-ins as uint8 (n, 1, size, size).

    Each image renders a jittered affine copy of a digit skeleton with a
    randomized stroke width, giving roughly centred bright strokes on a dark
    background.
    """
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0x6D)))
    ys, xs = np.mgrid[0:size, 0:size]
    out = np.zeros((n, 1, size, size), dtype=np.uint8)
    digits = rng.integers(0, 10, size=n)
    for i in range(n):
        strokes = _DIGIT_STROKES[int(digits[i])]
        angle = rng.normal(0.0, 0.14)
        scale = rng.uniform(0.85, 1.12)
        shear = rng.normal(0.0, 0.1)
        tx, ty = rng.uniform(-0.07, 0.07, size=2)
        ca, sa = np.cos(angle), np.sin(angle)
        A = np.array([[ca * scale, -sa * scale + shear], [sa * scale, ca * scale]])
        warped = []
        for pts in strokes:
            centered = pts - 0.5
            warped.append(centered @ A.T + 0.5 + np.array([tx, ty]))
        radius = rng.uniform(0.045, 0.075)
        # pixel grid in stroke coordinates, with a 2px margin like MNIST's frame
        gx = (xs - size / 2) / (size * 0.78) + 0.5
        gy = (ys - size / 2) / (size * 0.78) + 0.5
        img = _render_strokes(warped, radius, (gx, gy))
        out[i, 0] = np.clip(img * 255.0 + rng.normal(0, 2.5, img.shape), 0, 255).astype(np.uint8)
    if labels:
        return out, digits.astype(np.uint8)
    return out


def synthetic_photo(height, width, seed, channels=3):
    """Smooth photograph-like uint8 (channels, height, width) test image.

    Sums a handful of low-frequency gradients, soft discs and band-limited
    texture so compression harnesses see natural-image-like spectra.
    """
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0x70)))
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    ys /= height
    xs /= width
    img = np.zeros((channels, height, width), dtype=np.float64)
    for c in range(channels):
        acc = 0.45 + 0.25 * np.sin(2 * np.pi * (rng.uniform(0.4, 1.4) * xs
                                                + rng.uniform(0.4, 1.4) * ys
                                                + rng.uniform()))
        for _ in range(5):
            cx, cy = rng.uniform(0.1, 0.9, size=2)
            r = rng.uniform(0.08, 0.3)
            soft = rng.uniform(0.02, 0.12)
            dist = np.hypot(xs - cx, ys - cy)
            acc += rng.uniform(-0.35, 0.35) * np.clip((r - dist) / soft, 0.0, 1.0)
        noise = rng.normal(0.0, 1.0, (height, width))
        for axis in (0, 1):  # cheap separable smoothing for band-limited texture
            kernel = np.ones(9) / 9.0
            noise = np.apply_along_axis(
                lambda m: np.convolve(m, kernel, mode="same"), axis, noise)
        acc += 0.2 * noise
        img[c] = acc
    img = (img - img.min()) / (img.max() - img.min() + 1e-12)
    return np.clip(img * 255.0, 0, 255).astype(np.uint8)

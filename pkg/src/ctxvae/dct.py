"""Deterministic, non-trainable context codec.

Two interchangeable codecs turn an image into a small integer code and back:

* ``dct`` mode: orthonormal type-II DCT per channel, crop to the top-left
  d x d low-frequency block, divide by a per-frequency normalization matrix S
  (the training-set maximum of absolute coefficients), clamp to [-1, 1] and
  round so that value * S is an integer.  Decoding zero-pads the integer
  coefficients back to D x D and applies the inverse transform.
* ``downsample`` mode: average pooling by a window v, quantized to a uniform
  256-level grid over the declared pixel range; decoding is nearest-neighbour
  upsampling.

Everything here is plain numpy; codes never carry gradients.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "EPS_S", "DctBasis", "dct_matrix", "dct2", "idct2",
    "ContextCodec", "ContextCode", "fit_normalization",
    "encode_context", "decode_context",
    "encode_context_downsample", "decode_context_downsample",
    "serialize_context", "deserialize_context",
]

# lower bound on S entries so frequencies absent from training data stay usable
EPS_S = 1e-6

_MAGIC = b"DCTX"
_VERSION = 1
_MODE_ID = {"dct": 0, "downsample": 1}
_MODE_NAME = {v: k for k, v in _MODE_ID.items()}


@dataclass(frozen=True)
class DctBasis:
    """Orthonormal type-II DCT matrix for a fixed side length."""

    C: np.ndarray

    @property
    def D(self):
        return self.C.shape[0]


def dct_matrix(D):
    """Build the D x D orthonormal cosine basis.

    Row 0 is constant sqrt(1/D); row k > 0 is
    sqrt(2/D) * cos(pi/D * (n + 1/2) * k).
    """
    if D < 1:
        raise ValueError(f"side length must be >= 1, got {D}")
    n = np.arange(D, dtype=np.float64)
    k = n.reshape(-1, 1)
    C = np.sqrt(2.0 / D) * np.cos(np.pi / D * (n + 0.5) * k)
    C[0, :] = np.sqrt(1.0 / D)
    return DctBasis(C=C)


def dct2(x, basis):
    """Two-sided transform C x C^T applied over the trailing two axes."""
    x = np.asarray(x, dtype=np.float64)
    D = basis.D
    if x.shape[-2:] != (D, D):
        raise ValueError(f"input extents {x.shape} do not match basis side {D}")
    return basis.C @ x @ basis.C.T


def idct2(z, basis):
    """Inverse of :func:`dct2`, C^T z C over the trailing two axes."""
    z = np.asarray(z, dtype=np.float64)
    D = basis.D
    if z.shape[-2:] != (D, D):
        raise ValueError(f"input extents {z.shape} do not match basis side {D}")
    return basis.C.T @ z @ basis.C


@dataclass
class ContextCodec:
    """Configuration plus fitted state for the context transformation.

    ``S`` is present only in dct mode after fitting; ``v`` only matters in
    downsample mode.  ``pixel_range`` declares the value range quantized by
    the downsample grid (it is not part of the serialized format).
    """

    D: int
    d: int
    Ch: int = 1
    mode: str = "dct"
    v: int = 2
    S: np.ndarray | None = None
    pixel_range: tuple[float, float] = (0.0, 1.0)
    basis: DctBasis = field(default=None, repr=False)

    def __post_init__(self):
        if self.mode not in _MODE_ID:
            raise ValueError(f"unknown codec mode {self.mode!r}")
        if self.mode == "downsample":
            if self.v < 1 or self.D % self.v:
                raise ValueError(f"D={self.D} not divisible by window v={self.v}")
            # code side is implied by the window in this mode
            self.d = self.D // self.v
        if not (1 <= self.d <= self.D):
            raise ValueError(f"context side d={self.d} must lie in [1, D={self.D}]")
        if self.basis is None:
            self.basis = dct_matrix(self.D)
        if self.S is not None:
            self.S = np.maximum(np.asarray(self.S, dtype=np.float64), EPS_S)

    # -- fitted-state helpers -------------------------------------------------

    @property
    def fitted(self):
        return self.mode == "downsample" or self.S is not None

    @property
    def code_shape(self):
        return (self.Ch, self.d, self.d)

    @property
    def units(self):
        return self.Ch * self.d * self.d

    def require_fitted(self):
        if not self.fitted:
            raise RuntimeError("codec has no normalization matrix; fit it on "
                               "training images first")

    # -- integer <-> [-1, 1] grid ----------------------------------------------

    def normalize(self, values):
        """Map integer codes onto the [-1, 1] grid the prior models."""
        if self.mode == "dct":
            self.require_fitted()
            return values / self.S
        return values.astype(np.float64) * (2.0 / 255.0) - 1.0

    def grid_round(self, y):
        """Snap [-1, 1] values to the nearest representable integer code."""
        if self.mode == "dct":
            self.require_fitted()
            kmax = np.floor(self.S)
            return np.clip(np.rint(y * self.S), -kmax, kmax).astype(np.int32)
        return np.clip(np.rint((y + 1.0) * (255.0 / 2.0)), 0, 255).astype(np.int32)

    def bin_reciprocal_width(self):
        """Per-coordinate b such that quantization bins span x +- 1/b."""
        if self.mode == "dct":
            self.require_fitted()
            return 2.0 * self.S
        return np.full(self.code_shape, 255.0)

    @property
    def grid_anchor(self):
        """A point the normalized grid passes through (for on-grid checks)."""
        return 0.0 if self.mode == "dct" else 1.0

    # -- batched raw-array paths (used by training) -----------------------------

    def encode_values(self, x):
        """Integer codes for one image (Ch,D,D) or a batch (...,Ch,D,D)."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-3:] != (self.Ch, self.D, self.D):
            raise ValueError(f"image extents {x.shape} do not match codec "
                             f"(Ch={self.Ch}, D={self.D})")
        if self.mode == "dct":
            self.require_fitted()
            coeff = dct2(x, self.basis)[..., :self.d, :self.d]
            clamped = np.clip(coeff, -self.S, self.S)
            kmax = np.floor(self.S)
            return np.clip(np.rint(clamped), -kmax, kmax).astype(np.int32)
        lo, hi = self.pixel_range
        pooled = _block_mean(x, self.v)
        frac = (pooled - lo) / (hi - lo)
        return np.clip(np.rint(frac * 255.0), 0, 255).astype(np.int32)

    def decode_values(self, values):
        """Image reconstruction for codes (...,Ch,d,d)."""
        values = np.asarray(values)
        if values.shape[-3:] != self.code_shape:
            raise ValueError(f"code extents {values.shape} do not match codec "
                             f"code shape {self.code_shape}")
        if self.mode == "dct":
            # stored integers already equal coefficient * S / S * S = value * S,
            # i.e. they are the dequantized DCT coefficients themselves
            padded = np.zeros(values.shape[:-2] + (self.D, self.D), dtype=np.float64)
            padded[..., :self.d, :self.d] = values
            return idct2(padded, self.basis)
        lo, hi = self.pixel_range
        pixels = lo + values.astype(np.float64) / 255.0 * (hi - lo)
        return np.repeat(np.repeat(pixels, self.v, axis=-2), self.v, axis=-1)


@dataclass(frozen=True)
class ContextCode:
    """Quantized context of a single image: integers with |code / S| <= 1."""

    values: np.ndarray  # int32, (Ch, d, d)
    codec: ContextCodec

    def normalized(self):
        return self.codec.normalize(self.values)


def _block_mean(x, v):
    *lead, H, W = x.shape
    shape = (*lead, H // v, v, W // v, v)
    nd = len(shape)
    return x.reshape(shape).mean(axis=(nd - 3, nd - 1))


def fit_normalization(images, codec):
    """Elementwise max of |cropped DCT coefficients| over training images.

    ``images`` is an array (N,Ch,D,D) or any iterable of (Ch,D,D) arrays; the
    streaming and batch forms give identical results.  Entries are floored at
    EPS_S so held-out data never divides by zero.
    """
    codec = ContextCodec(D=codec.D, d=codec.d, Ch=codec.Ch, mode="dct",
                         pixel_range=codec.pixel_range, basis=codec.basis)
    S = None
    count = 0
    for x in images:
        x = np.asarray(x, dtype=np.float64)
        batch = x if x.ndim == 4 else x[None]
        coeff = np.abs(dct2(batch, codec.basis)[..., :codec.d, :codec.d])
        peak = coeff.max(axis=0)
        S = peak if S is None else np.maximum(S, peak)
        count += batch.shape[0]
    if count == 0:
        raise ValueError("cannot fit normalization on an empty training set")
    codec.S = np.maximum(S, EPS_S)
    return codec


def encode_context(x, codec):
    """Quantize one image into its integer context code."""
    codec.require_fitted()
    if codec.mode != "dct":
        raise ValueError("encode_context expects a dct-mode codec")
    return ContextCode(values=codec.encode_values(x), codec=codec)


def decode_context(code, codec=None):
    """Zero-pad the integer coefficients and invert the transform."""
    codec = codec or code.codec
    return codec.decode_values(code.values)


def encode_context_downsample(x, codec):
    if codec.mode != "downsample":
        raise ValueError("encode_context_downsample expects a downsample-mode codec")
    return ContextCode(values=codec.encode_values(x), codec=codec)


def decode_context_downsample(code, codec=None):
    codec = codec or code.codec
    if codec.mode != "downsample":
        raise ValueError("decode_context_downsample expects a downsample-mode codec")
    return codec.decode_values(code.values)


# ---------------------------------------------------------------------------
# bit-exact file format
# ---------------------------------------------------------------------------

def serialize_context(code):
    """Pack one context code (and the fitted S, in dct mode) into bytes.

    Layout: magic ``DCTX``, version u8, mode u8, Ch/D/d/v u16 little-endian,
    then S as float64 little-endian (dct mode only), then the coefficients as
    int32 little-endian, row-major per channel.
    """
    codec = code.codec
    mode = _MODE_ID[codec.mode]
    v = codec.v if codec.mode == "downsample" else 0
    head = _MAGIC + struct.pack("<BBHHHH", _VERSION, mode, codec.Ch, codec.D,
                                codec.d, v)
    body = b""
    if codec.mode == "dct":
        body += np.ascontiguousarray(codec.S, dtype="<f8").tobytes()
    body += np.ascontiguousarray(code.values, dtype="<i4").tobytes()
    return head + body


def deserialize_context(blob, pixel_range=(0.0, 1.0)):
    """Inverse of :func:`serialize_context`; returns a ContextCode.

    The downsample grid's pixel range is not part of the format, so callers
    decoding downsample files must supply it (defaults to [0, 1]).
    """
    if blob[:4] != _MAGIC:
        raise ValueError(f"bad context magic {blob[:4]!r}")
    version, mode_id, Ch, D, d, v = struct.unpack("<BBHHHH", blob[4:14])
    if version != _VERSION:
        raise ValueError(f"unsupported context format version {version}")
    mode = _MODE_NAME[mode_id]
    off = 14
    S = None
    if mode == "dct":
        n = Ch * d * d
        S = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(Ch, d, d)
        off += 8 * n
    n = Ch * d * d
    expected = off + 4 * n
    if len(blob) < expected:
        raise ValueError(f"truncated context blob: expected {expected} bytes, "
                         f"got {len(blob)}")
    values = np.frombuffer(blob, dtype="<i4", count=n, offset=off)
    values = values.reshape(Ch, d, d).astype(np.int32)
    codec = ContextCodec(D=D, d=d, Ch=Ch, mode=mode,
                         v=v if mode == "downsample" else 2,
                         S=None if S is None else S.copy(),
                         pixel_range=pixel_range)
    return ContextCode(values=values, codec=codec)

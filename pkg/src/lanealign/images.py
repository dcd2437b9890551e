"""8-bit grayscale images with validity masks, and PGM import/export."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError


@dataclass
class GrayImage:
    """8-bit grayscale raster plus a per-pixel validity mask."""

    values: np.ndarray                 # (H, W) uint8
    mask: np.ndarray = None            # (H, W) bool; default all-valid

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.dtype != np.uint8:
            raise ValidationError("GrayImage values must be uint8")
        if self.values.ndim != 2:
            raise ValidationError("GrayImage values must be 2-D")
        if self.mask is None:
            self.mask = np.ones(self.values.shape, dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != self.values.shape:
            raise ValidationError("GrayImage mask shape mismatch")

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @classmethod
    def from_float(cls, values: np.ndarray, mask=None) -> "GrayImage":
        """Quantize float intensities in [0,1] to 8 bits."""
        v = np.clip(np.asarray(values, dtype=float), 0.0, 1.0)
        return cls((v * 255.0 + 0.5).astype(np.uint8), mask)

    def as_float(self) -> np.ndarray:
        return self.values.astype(float) / 255.0


def write_pgm(path, image: GrayImage) -> None:
    with open(path, "wb") as f:
        f.write(f"P5\n{image.width} {image.height}\n255\n".encode())
        f.write(image.values.tobytes())


def write_pgm16(path, values: np.ndarray) -> None:
    """16-bit PGM (big-endian samples, per the format)."""
    v = np.asarray(values)
    if v.dtype != np.uint16:
        raise ValidationError("write_pgm16 expects uint16")
    with open(path, "wb") as f:
        f.write(f"P5\n{v.shape[1]} {v.shape[0]}\n65535\n".encode())
        f.write(v.astype(">u2").tobytes())


def _read_pgm_header(f):
    tokens = []
    while len(tokens) < 4:
        line = f.readline()
        if not line:
            raise ValidationError("truncated PGM header")
        line = line.split(b"#", 1)[0]
        tokens.extend(line.split())
    return tokens


def read_pgm(path) -> GrayImage:
    with open(path, "rb") as f:
        magic, w, h, maxval = _read_pgm_header(f)
        if magic != b"P5":
            raise ValidationError(f"{path}: not a binary PGM")
        w, h, maxval = int(w), int(h), int(maxval)
        if maxval != 255:
            raise ValidationError(f"{path}: expected 8-bit PGM, maxval={maxval}")
        data = f.read(w * h)
        if len(data) != w * h:
            raise ValidationError(f"{path}: truncated pixel data")
    return GrayImage(np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy())


def read_pgm16(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic, w, h, maxval = _read_pgm_header(f)
        if magic != b"P5" or int(maxval) != 65535:
            raise ValidationError(f"{path}: not a 16-bit binary PGM")
        w, h = int(w), int(h)
        data = f.read(w * h * 2)
        if len(data) != w * h * 2:
            raise ValidationError(f"{path}: truncated pixel data")
    return np.frombuffer(data, dtype=">u2").reshape(h, w).astype(np.uint16)


def gradient_magnitude(values: np.ndarray) -> np.ndarray:
    """Central-difference gradient magnitude of a float image."""
    gy, gx = np.gradient(np.asarray(values, dtype=float))
    return np.hypot(gx, gy)


def sample_bspline(values: np.ndarray, u: np.ndarray, v: np.ndarray):
    """Uniform cubic B-spline sample of a float image with analytic gradient.

    The surface is C2 everywhere (including at pixel knots), so central
    finite differences of anything built on it agree with the analytic
    gradient to high order. The spline smooths rather than interpolates;
    comparisons must sample both channels through this same function.

    Returns (value, d/du, d/dv). Samples need the 4x4 support inside the
    image (1 <= u <= W-2, 1 <= v <= H-2); out-of-range samples return NaN.
    """
    img = np.asarray(values, dtype=float)
    h, w = img.shape
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    ok = (u >= 1.0) & (u <= w - 2.0) & (v >= 1.0) & (v <= h - 2.0)
    uc = np.clip(u, 1.0, w - 2.0)
    vc = np.clip(v, 1.0, h - 2.0)
    x0 = np.minimum(np.floor(uc).astype(int), w - 3)
    y0 = np.minimum(np.floor(vc).astype(int), h - 3)
    fx = uc - x0
    fy = vc - y0

    def bs_weights(t):
        t2 = t * t
        t3 = t2 * t
        w0 = (1.0 - t) ** 3 / 6.0
        w1 = (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0
        w2 = (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0
        w3 = t3 / 6.0
        d0 = -0.5 * (1.0 - t) ** 2
        d1 = 1.5 * t2 - 2.0 * t
        d2 = -1.5 * t2 + t + 0.5
        d3 = 0.5 * t2
        return (w0, w1, w2, w3), (d0, d1, d2, d3)

    wx, dwx = bs_weights(fx)
    wy, dwy = bs_weights(fy)
    val = np.zeros_like(uc)
    dval_du = np.zeros_like(uc)
    dval_dv = np.zeros_like(uc)
    for j in range(4):
        row_val = np.zeros_like(uc)
        row_der = np.zeros_like(uc)
        for i in range(4):
            pix = img[y0 + j - 1, x0 + i - 1]
            row_val += wx[i] * pix
            row_der += dwx[i] * pix
        val += wy[j] * row_val
        dval_du += wy[j] * row_der
        dval_dv += dwy[j] * row_val
    val[~ok] = np.nan
    dval_du[~ok] = np.nan
    dval_dv[~ok] = np.nan
    return val, dval_du, dval_dv

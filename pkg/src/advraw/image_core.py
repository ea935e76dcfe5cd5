"""Image containers, Bayer bookkeeping and bit-exact Netpbm I/O.

RAW planes are stored as 16-bit binary PGM files with a small JSON sidecar
(``<stem>.meta.json``) carrying the Bayer layout and the black/white levels.
RGB images are stored as 8-bit binary PPM files.
"""

from __future__ import annotations

import enum
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

PathLike = Union[str, os.PathLike]


class ImageFormatError(ValueError):
    """Raised for malformed image files, sidecars or image contents."""


class BayerPattern(str, enum.Enum):
    RGGB = "RGGB"
    BGGR = "BGGR"
    GRBG = "GRBG"
    GBRG = "GBRG"

    def channel_at(self, i: int, j: int) -> int:
        """Channel index (0=R, 1=G, 2=B) sampled at site ``(i, j)``."""
        letter = self.value[2 * (i % 2) + (j % 2)]
        return "RGB".index(letter)

    def channel_map(self, height: int, width: int) -> np.ndarray:
        quad = np.array([[self.channel_at(0, 0), self.channel_at(0, 1)],
                         [self.channel_at(1, 0), self.channel_at(1, 1)]])
        return np.tile(quad, (height // 2 + 1, width // 2 + 1))[:height, :width]

    def masks(self, height: int, width: int) -> np.ndarray:
        """Boolean site masks of shape ``(3, height, width)`` for R, G, B."""
        cmap = self.channel_map(height, width)
        return np.stack([cmap == c for c in range(3)])


def _frozen(data: np.ndarray) -> np.ndarray:
    arr = np.array(data, dtype=np.float64, copy=True)
    arr.flags.writeable = False
    return arr


def _check_unit_range(data: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(data)):
        raise ImageFormatError(f"{what} contains non-finite values")
    if data.size and (data.min() < 0.0 or data.max() > 1.0):
        raise ImageFormatError(f"{what} values must lie in [0, 1]")


@dataclass(frozen=True)
class RawImage:
    """Single-channel Bayer mosaic with intensities in [0, 1]."""

    data: np.ndarray
    pattern: BayerPattern = BayerPattern.RGGB
    black_level: float = 0.0
    white_level: float = 1.0

    def __post_init__(self) -> None:
        data = _frozen(self.data)
        if data.ndim != 2:
            raise ImageFormatError(f"RAW data must be 2-D, got shape {data.shape}")
        m, n = data.shape
        if m == 0 or n == 0 or m % 2 or n % 2:
            raise ImageFormatError(f"RAW dimensions must be even and non-zero, got {m}x{n}")
        _check_unit_range(data, "RAW data")
        if not (0.0 <= self.black_level < self.white_level <= 1.0):
            raise ImageFormatError(
                f"need 0 <= black_level < white_level <= 1, got {self.black_level}, {self.white_level}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "pattern", BayerPattern(self.pattern))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def replace(self, data: np.ndarray) -> "RawImage":
        """Same metadata, new sample plane."""
        return RawImage(data, self.pattern, self.black_level, self.white_level)


@dataclass(frozen=True)
class RgbImage:
    """Three-channel image, ``height x width x 3``, channel order R, G, B."""

    data: np.ndarray = field()

    def __post_init__(self) -> None:
        data = _frozen(self.data)
        if data.ndim != 3 or data.shape[2] != 3:
            raise ImageFormatError(f"RGB data must be HxWx3, got shape {data.shape}")
        _check_unit_range(data, "RGB data")
        object.__setattr__(self, "data", data)

    @classmethod
    def from_unclamped(cls, data: np.ndarray) -> "RgbImage":
        return cls(np.clip(data, 0.0, 1.0))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


def _as_array(img) -> np.ndarray:
    if isinstance(img, (RawImage, RgbImage)):
        return img.data
    return np.asarray(img, dtype=np.float64)


def l2_loss(a, b) -> float:
    """Mean squared difference over every element (pixels and channels)."""
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    diff = a - b
    return float(np.mean(diff * diff))


def psnr(a, b, peak: float = 1.0) -> float:
    mse = l2_loss(a, b)
    return float("inf") if mse == 0 else 10.0 * float(np.log10(peak * peak / mse))


def mosaic(rgb: RgbImage, pattern: BayerPattern = BayerPattern.RGGB) -> RawImage:
    """Sample the channel each Bayer site sees; the inverse of demosaicing."""
    pattern = BayerPattern(pattern)
    h, w = rgb.height, rgb.width
    if h % 2 or w % 2:
        raise ImageFormatError(f"mosaic needs even dimensions, got {h}x{w}")
    cmap = pattern.channel_map(h, w)
    rows, cols = np.indices((h, w))
    return RawImage(rgb.data[rows, cols, cmap], pattern, 0.0, 1.0)


# --------------------------------------------------------------------------- Netpbm

def _read_netpbm(path: PathLike, magic: bytes) -> tuple[int, int, int, bytes]:
    raw = Path(path).read_bytes()
    if raw[:2] != magic:
        raise ImageFormatError(f"{path}: expected magic {magic!r}, got {raw[:2]!r}")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        # whitespace and comments between header tokens
        while pos < len(raw) and (raw[pos:pos + 1].isspace() or raw[pos:pos + 1] == b"#"):
            if raw[pos:pos + 1] == b"#":
                end = raw.find(b"\n", pos)
                pos = len(raw) if end < 0 else end + 1
            else:
                pos += 1
        start = pos
        while pos < len(raw) and raw[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ImageFormatError(f"{path}: malformed header")
        fields.append(int(raw[start:pos]))
    if pos >= len(raw) or not raw[pos:pos + 1].isspace():
        raise ImageFormatError(f"{path}: malformed header terminator")
    width, height, maxval = fields
    if width <= 0 or height <= 0 or not (0 < maxval < 65536):
        raise ImageFormatError(f"{path}: invalid header values {fields}")
    return width, height, maxval, raw[pos + 1:]


def _decode_samples(payload: bytes, count: int, maxval: int, path: PathLike) -> np.ndarray:
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = count * dtype.itemsize
    if len(payload) < need:
        raise ImageFormatError(f"{path}: truncated pixel data ({len(payload)} < {need} bytes)")
    return np.frombuffer(payload[:need], dtype=dtype).astype(np.float64) / maxval


def sidecar_path(path: PathLike) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def load_raw(path: PathLike) -> RawImage:
    width, height, maxval, payload = _read_netpbm(path, b"P5")
    if width % 2 or height % 2:
        raise ImageFormatError(f"{path}: RAW dimensions must be even, got {height}x{width}")
    data = _decode_samples(payload, width * height, maxval, path).reshape(height, width)
    meta = {}
    side = sidecar_path(path)
    if side.exists():
        try:
            meta = json.loads(side.read_text())
            if not isinstance(meta, dict):
                raise ValueError("sidecar must hold a JSON object")
            pattern = BayerPattern(meta.get("pattern", "RGGB"))
            black = float(meta.get("black_level", 0.0))
            white = float(meta.get("white_level", 1.0))
        except (ValueError, TypeError) as exc:
            raise ImageFormatError(f"{side}: {exc}") from exc
    else:
        pattern, black, white = BayerPattern.RGGB, 0.0, 1.0
    return RawImage(data, pattern, black, white)


def _quantize(data: np.ndarray, maxval: int) -> np.ndarray:
    return np.floor(np.clip(data, 0.0, 1.0) * maxval + 0.5)


def save_raw(img: RawImage, path: PathLike) -> None:
    path = Path(path)
    samples = _quantize(img.data, 65535).astype(">u2")
    header = f"P5\n{img.width} {img.height}\n65535\n".encode("ascii")
    path.write_bytes(header + samples.tobytes())
    meta = {"pattern": img.pattern.value, "black_level": img.black_level,
            "white_level": img.white_level}
    sidecar_path(path).write_text(json.dumps(meta, indent=2) + "\n")


def load_rgb(path: PathLike) -> RgbImage:
    width, height, maxval, payload = _read_netpbm(path, b"P6")
    data = _decode_samples(payload, width * height * 3, maxval, path)
    return RgbImage(data.reshape(height, width, 3))


def save_rgb(img: RgbImage, path: PathLike) -> None:
    samples = _quantize(img.data, 255).astype(np.uint8)
    header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + samples.tobytes())

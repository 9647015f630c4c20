"""Keypoint/descriptor containers, coordinate normalization, feature-file I/O.

Feature file layout (all integers little-endian):

    bytes 0..3    magic ``GLFM``
    bytes 4..7    format version (u32, currently 1)
    bytes 8..15   image width, height (u32 each)
    bytes 16..23  point count N, descriptor width d_in (u32 each)
    then          N*2 float32 point coordinates (row-major x, y)
    then          N*d_in float32 descriptors (row-major)

Detection scores are carried in memory for API completeness but are not part
of the on-disk format and never influence matching.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FileFormatError, InvalidInput

MAGIC = b"GLFM"
VERSION = 1


@dataclass
class FeatureSet:
    """Keypoints and descriptors extracted from one image."""

    image_size: tuple[int, int]  # (width, height) in pixels
    points: np.ndarray  # (N, 2) float32 pixel coordinates
    descriptors: np.ndarray  # (N, d_in) float32
    scores: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float32)
        self.descriptors = np.ascontiguousarray(self.descriptors, dtype=np.float32)
        w, h = self.image_size
        if w <= 0 or h <= 0:
            raise InvalidInput(f"image size must be positive, got {self.image_size}")
        if self.points.ndim != 2 or self.points.shape[1] != 2:
            raise InvalidInput(f"points must be (N, 2), got {self.points.shape}")
        if self.descriptors.shape[0] != self.points.shape[0]:
            raise InvalidInput(
                f"descriptor rows ({self.descriptors.shape[0]}) != point count ({self.points.shape[0]})"
            )
        if self.scores is not None:
            self.scores = np.ascontiguousarray(self.scores, dtype=np.float32)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def desc_dim(self) -> int:
        return self.descriptors.shape[1]


@dataclass
class NormalizedPoints:
    """Coordinates mapped to [-1, 1] with the image aspect ratio preserved."""

    coords: np.ndarray  # (N, 2) in [-1, 1]
    image_size: tuple[int, int]

    @property
    def n(self) -> int:
        return self.coords.shape[0]


def normalize_points(fs: FeatureSet) -> NormalizedPoints:
    """Center the frame at the origin and scale by 2/max(width, height).

    The longer image side spans [-1, 1]; the shorter side spans a
    proportionally smaller interval, so relative geometry is unchanged.
    """
    w, h = fs.image_size
    if w <= 0 or h <= 0:
        raise InvalidInput(f"image size must be positive, got {fs.image_size}")
    scale = 2.0 / max(w, h)
    center = np.array([w / 2.0, h / 2.0], dtype=np.float64)
    coords = (fs.points.astype(np.float64) - center) * scale
    return NormalizedPoints(coords.astype(fs.points.dtype), (w, h))


def denormalize_points(npts: NormalizedPoints) -> np.ndarray:
    """Inverse of ``normalize_points`` (pixel coordinates back out)."""
    w, h = npts.image_size
    scale = max(w, h) / 2.0
    center = np.array([w / 2.0, h / 2.0], dtype=np.float64)
    return (npts.coords.astype(np.float64) * scale + center).astype(np.float32)


def write_features(fs: FeatureSet, path) -> None:
    """Serialize to the binary container; little-endian float32 payload."""
    header = MAGIC + struct.pack("<5I", VERSION, fs.image_size[0], fs.image_size[1], fs.n, fs.desc_dim)
    body = fs.points.astype("<f4").tobytes() + fs.descriptors.astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(body)


def read_features(path) -> FeatureSet:
    """Parse a feature file, reporting the byte offset of any malformation."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise FileFormatError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}", offset=0)
    if len(raw) < 24:
        raise FileFormatError("truncated header", offset=len(raw))
    version, w, h, n, d_in = struct.unpack("<5I", raw[4:24])
    if version != VERSION:
        raise FileFormatError(f"unsupported version {version}", offset=4)
    if w == 0 or h == 0:
        raise FileFormatError(f"zero image dimension {w}x{h}", offset=8)
    pts_bytes = n * 2 * 4
    desc_bytes = n * d_in * 4
    expected = 24 + pts_bytes + desc_bytes
    if len(raw) < expected:
        raise FileFormatError(
            f"truncated payload: expected {expected} bytes, file has {len(raw)}", offset=len(raw)
        )
    if len(raw) > expected:
        raise FileFormatError(
            f"descriptor width mismatch or trailing bytes: expected {expected} bytes, file has {len(raw)}",
            offset=expected,
        )
    points = np.frombuffer(raw, dtype="<f4", count=n * 2, offset=24).reshape(n, 2)
    descriptors = np.frombuffer(raw, dtype="<f4", count=n * d_in, offset=24 + pts_bytes).reshape(n, d_in)
    return FeatureSet((w, h), points.copy(), descriptors.copy())

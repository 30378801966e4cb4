"""Depth, normal and point-cloud primitives, camera geometry, and raster file I/O.

Conventions used throughout the package:
  * depth values are meters, 0 marks a missing/invalid pixel
  * the camera looks down +z; valid normals are oriented toward the camera (z <= 0)
  * on disk, depth is 16-bit millimeters (binary PGM), normals are raw float32
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MM_PER_M = 1000.0
DEPTH_MAXVAL = 65535
NORMAL_MAGIC = b"NRM1"

DEFAULT_D_MAX = 8.0


class FormatError(ValueError):
    """Raised when a container file does not conform to the expected layout."""


class RangeError(ValueError):
    """Raised when stored values fall outside the declared depth range."""


@dataclass
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def validate(self, width: int, height: int) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < width and 0 <= self.cy < height):
            raise ValueError("principal point must lie inside the image")

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]), cy=float(d["cy"]))


def default_intrinsics(height: int, width: int) -> CameraIntrinsics:
    """Desk-scale pinhole defaults: ~80 degree horizontal field of view."""
    return CameraIntrinsics(fx=0.6 * width, fy=0.6 * width,
                            cx=(width - 1) / 2.0, cy=(height - 1) / 2.0)


@dataclass
class DepthMap:
    """H x W range image in meters; 0 means the sensor returned nothing."""

    values: np.ndarray
    d_max: float = DEFAULT_D_MAX

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("depth map must be 2-D")
        h, w = self.values.shape
        if h < 8 or w < 8:
            raise ValueError("depth map must be at least 8x8")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("depth values must be finite")
        if self.values.min() < 0 or self.values.max() > self.d_max:
            raise ValueError("depth values must lie in [0, d_max]")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def valid(self) -> np.ndarray:
        return self.values > 0


@dataclass
class RgbImage:
    """H x W x 3 color image with channels in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3 or self.values.shape[2] != 3:
            raise ValueError("rgb image must be HxWx3")
        if self.values.min() < 0 or self.values.max() > 1:
            raise ValueError("rgb channels must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass
class NormalMap:
    """H x W x 3 unit normals in camera coordinates; the zero vector marks invalid.

    Stored as float32 on disk; in memory the float dtype of the input is kept
    so exact-arithmetic constructions stay exact.
    """

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if not np.issubdtype(self.values.dtype, np.floating):
            self.values = self.values.astype(np.float32)
        if self.values.ndim != 3 or self.values.shape[2] != 3:
            raise ValueError("normal map must be HxWx3")

    @property
    def valid(self) -> np.ndarray:
        return np.any(self.values != 0, axis=2)


@dataclass
class PointCloud:
    """N x 3 points in meters, camera frame."""

    points: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point coordinates must be finite")


# ---------------------------------------------------------------------------
# depth container: binary PGM (P5, maxval 65535), big-endian u16 millimeters,
# sidecar JSON with intrinsics next to it


def _read_pnm_header(f, magic: bytes):
    if f.read(2) != magic:
        raise FormatError(f"bad magic, expected {magic!r}")
    fields = []
    while len(fields) < 3:
        tok = b""
        ch = f.read(1)
        while ch.isspace():
            ch = f.read(1)
        if ch == b"#":  # comment runs to end of line
            while ch not in (b"\n", b""):
                ch = f.read(1)
            continue
        while ch and not ch.isspace():
            tok += ch
            ch = f.read(1)
        if not tok.isdigit():
            raise FormatError("malformed header token")
        fields.append(int(tok))
    return fields  # width, height, maxval


def write_depth(path, depth: DepthMap, intrinsics: CameraIntrinsics,
                domain: str = "synth", seed: int = 0) -> None:
    """Write a depth map as 16-bit PGM (millimeters) plus its JSON sidecar."""
    path = Path(path)
    mm = np.round(depth.values * MM_PER_M).astype(np.int64)
    if mm.max() > DEPTH_MAXVAL:
        raise RangeError("depth exceeds 16-bit millimeter range")
    h, w = depth.values.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n{DEPTH_MAXVAL}\n".encode("ascii"))
        f.write(mm.astype(">u2").tobytes())
    sidecar = dict(intrinsics.to_dict(), d_max_m=depth.d_max, domain=domain, seed=seed)
    path.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True))


def read_depth(path) -> tuple[DepthMap, CameraIntrinsics]:
    """Read a 16-bit PGM depth map (millimeters) and its sidecar intrinsics."""
    path = Path(path)
    with open(path, "rb") as f:
        w, h, maxval = _read_pnm_header(f, b"P5")
        if maxval != DEPTH_MAXVAL:
            raise FormatError(f"depth container requires maxval {DEPTH_MAXVAL}")
        raw = f.read(w * h * 2)
    if len(raw) != w * h * 2:
        raise FormatError("truncated depth payload")
    mm = np.frombuffer(raw, dtype=">u2").astype(np.float64).reshape(h, w)
    sidecar_path = path.with_suffix(".json")
    if not sidecar_path.exists():
        raise FormatError(f"missing sidecar {sidecar_path}")
    meta = json.loads(sidecar_path.read_text())
    d_max = float(meta["d_max_m"])
    if mm.max() > d_max * MM_PER_M:
        raise RangeError("stored depth exceeds d_max")
    depth = DepthMap(values=mm / MM_PER_M, d_max=d_max)
    return depth, CameraIntrinsics.from_dict(meta)


def write_rgb(path, rgb: RgbImage) -> None:
    """Write an RGB image as 8-bit binary PPM."""
    h, w = rgb.values.shape[:2]
    data = np.clip(np.round(rgb.values * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_rgb(path) -> RgbImage:
    with open(path, "rb") as f:
        w, h, maxval = _read_pnm_header(f, b"P6")
        if maxval != 255:
            raise FormatError("rgb container requires maxval 255")
        raw = f.read(w * h * 3)
    if len(raw) != w * h * 3:
        raise FormatError("truncated rgb payload")
    data = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)
    return RgbImage(values=data.astype(np.float64) / 255.0)


def write_normals(path, normals: NormalMap) -> None:
    """Write a normal map: "NRM1" magic, u32 w/h/reserved, float32 LE row-major."""
    h, w = normals.values.shape[:2]
    with open(path, "wb") as f:
        f.write(NORMAL_MAGIC)
        f.write(struct.pack("<III", w, h, 0))
        f.write(normals.values.astype("<f4").tobytes())


def read_normals(path) -> NormalMap:
    with open(path, "rb") as f:
        if f.read(4) != NORMAL_MAGIC:
            raise FormatError("bad normal-map magic")
        w, h, _reserved = struct.unpack("<III", f.read(12))
        raw = f.read(w * h * 3 * 4)
    if len(raw) != w * h * 3 * 4:
        raise FormatError("truncated normal payload")
    vals = np.frombuffer(raw, dtype="<f4").reshape(h, w, 3)
    return NormalMap(values=vals.copy())


# ---------------------------------------------------------------------------
# camera geometry


def backproject(depth: DepthMap, intrinsics: CameraIntrinsics) -> PointCloud:
    """Lift valid pixels to 3-D camera-frame points, row-major scan order."""
    k = intrinsics
    h, w = depth.values.shape
    v, u = np.mgrid[0:h, 0:w]
    z = depth.values
    mask = z > 0
    x = (u - k.cx) * z / k.fx
    y = (v - k.cy) * z / k.fy
    pts = np.stack([x[mask], y[mask], z[mask]], axis=1)
    return PointCloud(points=pts)


def reproject(points: np.ndarray, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Project camera-frame points back to pixel coordinates (u, v)."""
    k = intrinsics
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    u = k.fx * pts[:, 0] / pts[:, 2] + k.cx
    v = k.fy * pts[:, 1] / pts[:, 2] + k.cy
    return np.stack([u, v], axis=1)


def normals_from_depth(depth: DepthMap, intrinsics: CameraIntrinsics) -> NormalMap:
    """Estimate normals from depth by crossing central-difference tangents.

    Tangents are taken on the backprojected 3-D points (correct under
    perspective), and any pixel whose 4-neighborhood touches a missing pixel
    or the image border gets the zero vector.
    """
    k = intrinsics
    h, w = depth.values.shape
    v, u = np.mgrid[0:h, 0:w]
    z = depth.values
    pts = np.stack([(u - k.cx) * z / k.fx, (v - k.cy) * z / k.fy, z], axis=2)

    valid = z > 0
    ok = np.zeros((h, w), dtype=bool)
    ok[1:-1, 1:-1] = (valid[1:-1, 1:-1] & valid[1:-1, :-2] & valid[1:-1, 2:]
                      & valid[:-2, 1:-1] & valid[2:, 1:-1])

    tu = np.zeros_like(pts)
    tv = np.zeros_like(pts)
    tu[1:-1, 1:-1] = pts[1:-1, 2:] - pts[1:-1, :-2]
    tv[1:-1, 1:-1] = pts[2:, 1:-1] - pts[:-2, 1:-1]

    n = np.cross(tu, tv)
    norm = np.linalg.norm(n, axis=2)
    ok &= norm > 1e-12
    out = np.zeros((h, w, 3), dtype=np.float64)
    out[ok] = n[ok] / norm[ok][:, None]
    flip = out[:, :, 2] > 0
    out[flip] = -out[flip]
    return NormalMap(values=out.astype(np.float32))


def hole_fraction(depth: DepthMap) -> float:
    """Fraction of pixels with no measurement."""
    return float(np.count_nonzero(depth.values == 0)) / depth.values.size

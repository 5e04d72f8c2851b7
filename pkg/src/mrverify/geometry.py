"""Homography estimation and perspective warping for frame alignment.

Alignment maps the target frame onto the reference frame's pixel grid using
points sampled on the shared tag plane. The estimator is the normalised direct
linear transform (exact least squares, no outlier rejection); warps use inverse
mapping so every output pixel is sampled exactly once.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy import ndimage

from .errors import DegenerateConfiguration, PointAtInfinity, SingularHomography
from .imaging import Frame, Mask

__all__ = [
    "Point2",
    "Correspondence",
    "Homography",
    "estimate_homography",
    "alignment_homography",
    "project",
    "project_many",
    "warp_frame",
    "warp_mask",
    "align_target",
]

DET_EPS = 1e-12
W_EPS = 1e-12
COLLINEAR_AREA = 1e-9
RANK_RATIO = 1e-9
SNAP_EPS = 1e-6
IDENTITY_EPS = 1e-9


class Point2(NamedTuple):
    x: float
    y: float


class Correspondence(NamedTuple):
    src: Point2
    dst: Point2


@dataclass(frozen=True, eq=False)
class Homography:
    """A 3x3 projective transform, scaled so that `m[2, 2] == 1` when possible."""

    m: np.ndarray

    def __post_init__(self) -> None:
        m = np.array(self.m, dtype=np.float64)
        if m.shape != (3, 3) or not np.isfinite(m).all():
            raise SingularHomography(f"expected a finite 3x3 matrix, got shape {m.shape}")
        if abs(m[2, 2]) > W_EPS:
            m = m / m[2, 2]
        if abs(np.linalg.det(m)) <= DET_EPS:
            raise SingularHomography("homography determinant is zero")
        m.flags.writeable = False
        object.__setattr__(self, "m", m)

    @classmethod
    def identity(cls) -> Homography:
        return cls(np.eye(3))

    @classmethod
    def translation(cls, dx: float, dy: float) -> Homography:
        return cls(np.array([[1.0, 0.0, dx], [0.0, 1.0, dy], [0.0, 0.0, 1.0]]))

    @classmethod
    def scaling(cls, sx: float, sy: float) -> Homography:
        return cls(np.diag([sx, sy, 1.0]))

    def inverse(self) -> Homography:
        return Homography(np.linalg.inv(self.m))

    def is_identity(self, tol: float = IDENTITY_EPS) -> bool:
        return bool(np.abs(self.m - np.eye(3)).max() < tol)

    def __matmul__(self, other: Homography) -> Homography:
        return Homography(self.m @ other.m)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Homography):
            return NotImplemented
        return bool(np.array_equal(self.m, other.m))

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self) -> str:
        rows = "; ".join(" ".join(f"{v:.6g}" for v in row) for row in self.m)
        return f"Homography([{rows}])"


def _as_array(points: Sequence[Point2] | np.ndarray) -> np.ndarray:
    array = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if not np.isfinite(array).all():
        raise DegenerateConfiguration("point coordinates must be finite")
    return array


def _normalize(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Translate to zero mean and scale to a mean distance of sqrt(2)."""

    mean = points.mean(axis=0)
    average = np.linalg.norm(points - mean, axis=1).mean()
    if average <= 0.0:
        raise DegenerateConfiguration("all points coincide")
    s = math.sqrt(2.0) / average
    transform = np.array([[s, 0.0, -s * mean[0]], [0.0, s, -s * mean[1]], [0.0, 0.0, 1.0]])
    return (points - mean) * s, transform


def _has_collinear_triple(points: np.ndarray) -> bool:
    for a, b, c in itertools.combinations(points, 3):
        area = 0.5 * abs((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
        if area < COLLINEAR_AREA:
            return True
    return False


def _design_matrix(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    n = len(src)
    x, y = src[:, 0], src[:, 1]
    u, v = dst[:, 0], dst[:, 1]
    zeros, ones = np.zeros(n), np.ones(n)
    a = np.empty((2 * n, 9))
    a[0::2] = np.column_stack([zeros, zeros, zeros, -x, -y, -ones, v * x, v * y, v])
    a[1::2] = np.column_stack([x, y, ones, zeros, zeros, zeros, -u * x, -u * y, -u])
    return a


def _dlt(src: np.ndarray, dst: np.ndarray) -> Homography:
    if len(src) != len(dst):
        raise DegenerateConfiguration(f"{len(src)} source points but {len(dst)} destination points")
    if len(src) < 4:
        raise DegenerateConfiguration(f"need at least 4 correspondences, got {len(src)}")
    src_n, t_src = _normalize(src)
    dst_n, t_dst = _normalize(dst)
    if len(src) == 4 and (_has_collinear_triple(src_n) or _has_collinear_triple(dst_n)):
        raise DegenerateConfiguration("three of the four points are collinear")
    _, s, vt = np.linalg.svd(_design_matrix(src_n, dst_n))
    if s[0] <= 0.0 or s[7] / s[0] < RANK_RATIO:
        raise DegenerateConfiguration("the normalised system is rank deficient")
    h_normalized = vt[-1].reshape(3, 3)
    m = np.linalg.inv(t_dst) @ h_normalized @ t_src
    try:
        return Homography(m)
    except SingularHomography as e:
        raise DegenerateConfiguration(f"estimated homography is singular: {e.message}") from e


def estimate_homography(pairs: Sequence[Correspondence]) -> Homography:
    """The homography mapping each `src` onto its `dst`.

    Raises:
        DegenerateConfiguration: fewer than four pairs, collinear points or a
            rank-deficient normalised system.
    """

    if len(pairs) < 4:
        raise DegenerateConfiguration(f"need at least 4 correspondences, got {len(pairs)}")
    src = _as_array([p.src for p in pairs])
    dst = _as_array([p.dst for p in pairs])
    return _dlt(src, dst)


def alignment_homography(
    ref_points: Sequence[Point2] | np.ndarray, tgt_points: Sequence[Point2] | np.ndarray
) -> Homography:
    """Target-to-reference homography from index-paired point sets."""

    return _dlt(_as_array(tgt_points), _as_array(ref_points))


def project(h: Homography, p: Point2) -> Point2:
    x, y = float(p[0]), float(p[1])
    m = h.m
    w = m[2, 0] * x + m[2, 1] * y + m[2, 2]
    if abs(w) <= W_EPS:
        raise PointAtInfinity(f"point ({x}, {y}) maps to infinity")
    return Point2(
        (m[0, 0] * x + m[0, 1] * y + m[0, 2]) / w,
        (m[1, 0] * x + m[1, 1] * y + m[1, 2]) / w,
    )


def project_many(h: Homography, points: np.ndarray) -> np.ndarray:
    """Vectorised :func:`project` over an `(n, 2)` array."""

    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    homogeneous = np.column_stack([points, np.ones(len(points))]) @ h.m.T
    w = homogeneous[:, 2]
    if (np.abs(w) <= W_EPS).any():
        raise PointAtInfinity("a point maps to infinity")
    return homogeneous[:, :2] / w[:, None]


def _source_coordinates(h: Homography, out_size: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Input-space sample positions `(xs, ys)` for every output pixel."""

    inverse = np.linalg.inv(h.m)
    if not np.isfinite(inverse).all():
        raise SingularHomography("homography is not invertible")
    width, height = out_size
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    u = inverse[0, 0] * xs + inverse[0, 1] * ys + inverse[0, 2]
    v = inverse[1, 0] * xs + inverse[1, 1] * ys + inverse[1, 2]
    w = inverse[2, 0] * xs + inverse[2, 1] * ys + inverse[2, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        sx = np.where(np.abs(w) > W_EPS, u / w, np.nan)
        sy = np.where(np.abs(w) > W_EPS, v / w, np.nan)
    # Snap round-off so translations and quarter turns sample whole pixels.
    for coords in (sx, sy):
        nearest = np.rint(coords)
        snap = np.abs(coords - nearest) < SNAP_EPS
        coords[snap] = nearest[snap]
    return sx, sy


def warp_frame(frame: Frame, h: Homography, out_size: tuple[int, int]) -> Frame:
    """Bilinear inverse-mapping warp; samples outside the input are black."""

    sx, sy = _source_coordinates(h, out_size)
    valid = (sx >= 0) & (sx <= frame.width - 1) & (sy >= 0) & (sy <= frame.height - 1)
    rows = np.where(valid, sy, 0.0)
    cols = np.where(valid, sx, 0.0)
    out = np.zeros((out_size[1], out_size[0], 3), dtype=np.uint8)
    source = frame.pixels.astype(np.float64)
    for channel in range(3):
        sampled = ndimage.map_coordinates(source[:, :, channel], [rows, cols], order=1, mode="nearest")
        out[:, :, channel] = np.where(valid, np.clip(np.rint(sampled), 0, 255), 0).astype(np.uint8)
    return Frame(out)


def warp_mask(mask: Mask, h: Homography, out_size: tuple[int, int]) -> Mask:
    """Nearest-neighbour inverse-mapping warp; the result stays binary."""

    sx, sy = _source_coordinates(h, out_size)
    with np.errstate(invalid="ignore"):
        ix = np.rint(sx)
        iy = np.rint(sy)
        valid = (ix >= 0) & (ix < mask.width) & (iy >= 0) & (iy < mask.height)
    out = np.zeros((out_size[1], out_size[0]), dtype=np.bool_)
    out[valid] = mask.bits[iy[valid].astype(np.intp), ix[valid].astype(np.intp)]
    return Mask(out)


def align_target(
    ref_points: Sequence[Point2] | np.ndarray,
    tgt_points: Sequence[Point2] | np.ndarray,
    target: Frame,
    out_size: tuple[int, int],
) -> Frame:
    """Warp `target` onto the reference grid defined by the paired points."""

    h = alignment_homography(ref_points, tgt_points)
    if h.is_identity() and out_size == target.size:
        return target
    return warp_frame(target, h, out_size)

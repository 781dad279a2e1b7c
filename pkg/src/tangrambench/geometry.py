"""Tangram piece geometry: templates, poses, polygon IoU and raster IoU.

World frame is the square canvas [0, 10] x [0, 10].  Rasters use the image
convention: world (0, 0) is the top-left corner and world y grows downward
with the row index, so no axis flip happens between world and pixel space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

CANVAS_SIDE = 10.0
DEFAULT_RESOLUTION = 512
DEFAULT_DILATION = 1
MAX_DILATION = 2

_CONVEX_EPS = 1e-12


class GeometryError(ValueError):
    pass


class NonConvexPolygonError(GeometryError):
    pass


class PieceType(str, Enum):
    LARGE_TRIANGLE_1 = "large-triangle-1"
    LARGE_TRIANGLE_2 = "large-triangle-2"
    MEDIUM_TRIANGLE = "medium-triangle"
    SMALL_TRIANGLE_1 = "small-triangle-1"
    SMALL_TRIANGLE_2 = "small-triangle-2"
    SQUARE = "square"
    PARALLELOGRAM = "parallelogram"

    @property
    def chiral(self) -> bool:
        return self is PieceType.PARALLELOGRAM

    @property
    def symmetry_period(self) -> float:
        """Smallest positive rotation (degrees) mapping the piece onto itself."""
        if self is PieceType.SQUARE:
            return 90.0
        if self is PieceType.PARALLELOGRAM:
            return 180.0
        return 360.0


# Classic seven-piece decomposition of the 4x4 square.  Duplicated triangles
# share the first instance's coordinates so both copies use one template.
_DECOMPOSITION = {
    PieceType.LARGE_TRIANGLE_1: [(0, 0), (4, 0), (2, 2)],
    PieceType.LARGE_TRIANGLE_2: [(0, 0), (4, 0), (2, 2)],
    PieceType.MEDIUM_TRIANGLE: [(4, 4), (4, 2), (2, 4)],
    PieceType.SQUARE: [(2, 2), (3, 1), (4, 2), (3, 3)],
    PieceType.SMALL_TRIANGLE_1: [(4, 0), (4, 2), (3, 1)],
    PieceType.SMALL_TRIANGLE_2: [(4, 0), (4, 2), (3, 1)],
    PieceType.PARALLELOGRAM: [(0, 4), (1, 3), (3, 3), (2, 4)],
}


def signed_area(vertices: np.ndarray) -> float:
    x = vertices[:, 0]
    y = vertices[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def polygon_centroid(vertices: np.ndarray) -> np.ndarray:
    x = vertices[:, 0]
    y = vertices[:, 1]
    xn = np.roll(x, -1)
    yn = np.roll(y, -1)
    cross = x * yn - xn * y
    a = cross.sum() / 2.0
    cx = ((x + xn) * cross).sum() / (6.0 * a)
    cy = ((y + yn) * cross).sum() / (6.0 * a)
    return np.array([cx, cy])


@dataclass(frozen=True, eq=False)
class Polygon:
    """Ordered vertex list; stored counter-clockwise (positive shoelace area)."""

    vertices: np.ndarray

    def __post_init__(self):
        v = np.array(self.vertices, dtype=float).reshape(-1, 2)
        if len(v) >= 3 and signed_area(v) < 0:
            v = v[::-1].copy()
        v.setflags(write=False)
        object.__setattr__(self, "vertices", v)

    def __len__(self) -> int:
        return len(self.vertices)

    @property
    def area(self) -> float:
        if len(self.vertices) < 3:
            return 0.0
        return abs(signed_area(self.vertices))

    @property
    def centroid(self) -> np.ndarray:
        return polygon_centroid(self.vertices)

    def is_convex(self) -> bool:
        v = self.vertices
        n = len(v)
        if n < 3:
            return False
        e = np.roll(v, -1, axis=0) - v
        cross = e[:, 0] * np.roll(e[:, 1], -1) - e[:, 1] * np.roll(e[:, 0], -1)
        scale = max(1.0, float(np.abs(v).max()) ** 2)
        return bool(np.all(cross >= -_CONVEX_EPS * scale))

    def transformed(self, rotation_deg: float = 0.0, translation=(0.0, 0.0)) -> "Polygon":
        """Rigid motion: rotate about the origin, then translate."""
        th = math.radians(rotation_deg)
        c, s = math.cos(th), math.sin(th)
        rot = np.array([[c, -s], [s, c]])
        return Polygon(self.vertices @ rot.T + np.asarray(translation, dtype=float))


@dataclass(frozen=True, eq=False)
class PieceTemplate:
    piece_type: PieceType
    vertices: np.ndarray
    area: float


@lru_cache(maxsize=None)
def template_of(piece_type: PieceType | str) -> PieceTemplate:
    piece_type = PieceType(piece_type)
    v = np.array(_DECOMPOSITION[piece_type], dtype=float)
    if signed_area(v) < 0:
        v = v[::-1].copy()
    v = v - polygon_centroid(v)
    v.setflags(write=False)
    return PieceTemplate(piece_type, v, abs(signed_area(v)))


def _normalize_angle(angle: float) -> float:
    a = math.fmod(float(angle), 360.0)
    if a < 0:
        a += 360.0
    # fmod of a tiny negative can round up to exactly 360
    return 0.0 if a >= 360.0 else a


@dataclass(frozen=True)
class Placement:
    """Pose of one piece: world centroid, CCW angle in degrees, size, chirality flip."""

    piece_type: PieceType
    pos: tuple[float, float]
    angle: float = 0.0
    size: float = 1.0
    flip: bool = False

    def __post_init__(self):
        object.__setattr__(self, "piece_type", PieceType(self.piece_type))
        x, y = (float(c) for c in self.pos)
        object.__setattr__(self, "pos", (x, y))
        object.__setattr__(self, "angle", _normalize_angle(self.angle))
        object.__setattr__(self, "size", float(self.size))
        object.__setattr__(self, "flip", bool(self.flip))
        if not (self.size > 0 and math.isfinite(self.size)):
            raise GeometryError(f"size must be positive and finite, got {self.size}")
        if not (0.0 <= x <= CANVAS_SIDE and 0.0 <= y <= CANVAS_SIDE):
            raise GeometryError(f"pos {self.pos} outside canvas [0,{CANVAS_SIDE:g}]^2")

    @property
    def area(self) -> float:
        return self.size**2 * template_of(self.piece_type).area

    def replace(self, **changes) -> "Placement":
        fields = dict(
            piece_type=self.piece_type, pos=self.pos, angle=self.angle, size=self.size, flip=self.flip
        )
        fields.update(changes)
        return Placement(**fields)


def realize(p: Placement) -> Polygon:
    """World polygon of a placed piece: pos + R(angle) . M(flip) . size . template."""
    v = template_of(p.piece_type).vertices * p.size
    if p.flip:
        # mirror about the local vertical axis, then restore CCW order
        v = (v * np.array([-1.0, 1.0]))[::-1]
    th = math.radians(p.angle)
    c, s = math.cos(th), math.sin(th)
    rot = np.array([[c, -s], [s, c]])
    return Polygon(v @ rot.T + np.asarray(p.pos))


def _require_convex(poly: Polygon, name: str) -> None:
    if not poly.is_convex():
        raise NonConvexPolygonError(f"{name} is not a convex polygon")


def convex_intersection(a: Polygon, b: Polygon) -> Polygon | None:
    """Intersection of two convex polygons by half-plane clipping.

    Returns None when the intersection has zero area.
    """
    _require_convex(a, "first polygon")
    _require_convex(b, "second polygon")
    out = [tuple(p) for p in a.vertices]
    clip = b.vertices
    n = len(clip)
    for i in range(n):
        if not out:
            return None
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        inp = out
        out = []
        sx, sy = inp[-1]
        s_side = ex * (sy - ay) - ey * (sx - ax)
        for px, py in inp:
            p_side = ex * (py - ay) - ey * (px - ax)
            if p_side >= 0:
                if s_side < 0:
                    t = s_side / (s_side - p_side)
                    out.append((sx + t * (px - sx), sy + t * (py - sy)))
                out.append((px, py))
            elif s_side >= 0:
                t = s_side / (s_side - p_side)
                out.append((sx + t * (px - sx), sy + t * (py - sy)))
            sx, sy, s_side = px, py, p_side
    if len(out) < 3:
        return None
    poly = Polygon(np.array(out))
    if poly.area <= 1e-14 * max(a.area, b.area):
        return None
    return poly


def exact_iou(a: Polygon, b: Polygon) -> float:
    inter = convex_intersection(a, b)
    if inter is None:
        return 0.0
    ia = inter.area
    return ia / (a.area + b.area - ia)


def overlap_area(a: Placement, b: Placement) -> float:
    inter = convex_intersection(realize(a), realize(b))
    return 0.0 if inter is None else inter.area


# --------------------------------------------------------------------------
# Raster side


@dataclass(frozen=True, eq=False)
class RasterMask:
    """Square binary occupancy grid over the canvas.

    ``bbox`` is (row0, row1, col0, col1), half-open, covering every set pixel
    (not necessarily tight); None means the mask is empty.
    """

    bits: np.ndarray
    bbox: tuple[int, int, int, int] | None

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def resolution(self) -> int:
        return self.bits.shape[0]

    @property
    def scale(self) -> float:
        """Pixels per canvas unit."""
        return self.resolution / CANVAS_SIDE

    @property
    def pixel_area(self) -> float:
        return (CANVAS_SIDE / self.resolution) ** 2

    def world_to_pixel(self, xy) -> np.ndarray:
        """Map world (x, y) to continuous pixel (col, row) coordinates."""
        return np.asarray(xy, dtype=float) * self.scale

    def popcount(self) -> int:
        if self.bbox is None:
            return 0
        r0, r1, c0, c1 = self.bbox
        return int(np.count_nonzero(self.bits[r0:r1, c0:c1]))

    def __eq__(self, other) -> bool:
        if not isinstance(other, RasterMask):
            return NotImplemented
        return self.bits.shape == other.bits.shape and bool(np.array_equal(self.bits, other.bits))

    __hash__ = None


def empty_mask(resolution: int = DEFAULT_RESOLUTION) -> RasterMask:
    bits = np.zeros((resolution, resolution), dtype=bool)
    bits.setflags(write=False)
    return RasterMask(bits, None)


def _fill_polygon(bits: np.ndarray, vertices_px: np.ndarray):
    """Even-odd fill of pixel centers; returns the touched bbox or None.

    A center exactly on a boundary counts as inside on left/top edges and
    outside on right/bottom edges (half-open rule), so polygons sharing an edge
    never both claim a pixel.
    """
    res = bits.shape[0]
    xmin, ymin = vertices_px.min(axis=0)
    xmax, ymax = vertices_px.max(axis=0)
    c0 = max(0, int(math.floor(xmin - 0.5)))
    c1 = min(res, int(math.ceil(xmax + 0.5)))
    r0 = max(0, int(math.floor(ymin - 0.5)))
    r1 = min(res, int(math.ceil(ymax + 0.5)))
    if c0 >= c1 or r0 >= r1:
        return None
    xs = np.arange(c0, c1) + 0.5
    ys = np.arange(r0, r1) + 0.5
    inside = np.zeros((r1 - r0, c1 - c0), dtype=bool)
    n = len(vertices_px)
    for i in range(n):
        x1, y1 = vertices_px[i]
        x2, y2 = vertices_px[(i + 1) % n]
        if y1 == y2:
            continue
        lo, hi = (y1, y2) if y1 < y2 else (y2, y1)
        rows = np.nonzero((ys >= lo) & (ys < hi))[0]
        if rows.size == 0:
            continue
        xint = x1 + (ys[rows] - y1) * (x2 - x1) / (y2 - y1)
        inside[rows] ^= xs[None, :] < xint[:, None]
    bits[r0:r1, c0:c1] |= inside
    return (r0, r1, c0, c1)


def rasterize(polys: Iterable[Polygon], resolution: int = DEFAULT_RESOLUTION) -> RasterMask:
    """Union of polygons sampled at pixel centers (even-odd per polygon)."""
    if resolution < 64:
        raise GeometryError(f"resolution must be >= 64, got {resolution}")
    bits = np.zeros((resolution, resolution), dtype=bool)
    scale = resolution / CANVAS_SIDE
    bbox = None
    for poly in polys:
        box = _fill_polygon(bits, np.asarray(poly.vertices, dtype=float) * scale)
        if box is None:
            continue
        if bbox is None:
            bbox = box
        else:
            bbox = (min(bbox[0], box[0]), max(bbox[1], box[1]), min(bbox[2], box[2]), max(bbox[3], box[3]))
    bits.setflags(write=False)
    return RasterMask(bits, bbox)


def mask_from_bits(bits: np.ndarray) -> RasterMask:
    bits = np.array(bits, dtype=bool)
    if bits.ndim != 2 or bits.shape[0] != bits.shape[1]:
        raise GeometryError(f"mask must be square, got shape {bits.shape}")
    rows = np.nonzero(bits.any(axis=1))[0]
    cols = np.nonzero(bits.any(axis=0))[0]
    bbox = None
    if rows.size:
        bbox = (int(rows[0]), int(rows[-1]) + 1, int(cols[0]), int(cols[-1]) + 1)
    bits.setflags(write=False)
    return RasterMask(bits, bbox)


_CROSS = ndimage.generate_binary_structure(2, 1)


def _check_radius(radius_px: int) -> int:
    r = int(radius_px)
    if r != radius_px or not 0 <= r <= MAX_DILATION:
        raise GeometryError(f"dilation radius must be one of 0..{MAX_DILATION}, got {radius_px}")
    return r


def _window(boxes, pad: int, res: int):
    boxes = [b for b in boxes if b is not None]
    if not boxes:
        return None
    r0 = max(0, min(b[0] for b in boxes) - pad)
    r1 = min(res, max(b[1] for b in boxes) + pad)
    c0 = max(0, min(b[2] for b in boxes) - pad)
    c1 = min(res, max(b[3] for b in boxes) + pad)
    return r0, r1, c0, c1


def _dilate_crop(crop: np.ndarray, radius: int) -> np.ndarray:
    if radius == 0:
        return crop
    return ndimage.binary_dilation(crop, structure=_CROSS, iterations=radius)


def dilate(m: RasterMask, radius_px: int) -> RasterMask:
    """Binary dilation by a 3x3 cross, applied ``radius_px`` times."""
    r = _check_radius(radius_px)
    if r == 0 or m.bbox is None:
        return m
    win = _window([m.bbox], r, m.resolution)
    r0, r1, c0, c1 = win
    bits = np.zeros_like(m.bits)
    bits[r0:r1, c0:c1] = _dilate_crop(m.bits[r0:r1, c0:c1], r)
    bits.setflags(write=False)
    return RasterMask(bits, win)


def raster_iou(a: RasterMask, b: RasterMask, dilation_px: int = DEFAULT_DILATION) -> float:
    """IoU of two masks after dilating both by ``dilation_px``.

    Two empty masks match perfectly (1.0); exactly one empty mask scores 0.0.
    """
    if a.bits.shape != b.bits.shape:
        raise GeometryError(f"resolution mismatch: {a.bits.shape} vs {b.bits.shape}")
    r = _check_radius(dilation_px)
    if a.bbox is None and b.bbox is None:
        return 1.0
    if a.bbox is None or b.bbox is None:
        return 0.0
    r0, r1, c0, c1 = _window([a.bbox, b.bbox], r, a.resolution)
    da = _dilate_crop(a.bits[r0:r1, c0:c1], r)
    db = _dilate_crop(b.bits[r0:r1, c0:c1], r)
    union = np.count_nonzero(da | db)
    if union == 0:
        return 1.0
    return np.count_nonzero(da & db) / union


def placements_mask(placements: Sequence[Placement], resolution: int = DEFAULT_RESOLUTION) -> RasterMask:
    return rasterize([realize(p) for p in placements], resolution)


def union_iou(
    pred: Sequence[Placement],
    gt: Sequence[Placement],
    dilation_px: int = DEFAULT_DILATION,
    resolution: int = DEFAULT_RESOLUTION,
) -> float:
    """Raster IoU between the union of predicted pieces and the union of GT pieces."""
    if len(pred) != len(gt):
        raise GeometryError(f"piece count mismatch: {len(pred)} predicted vs {len(gt)} ground truth")
    if not 1 <= len(gt) <= 2:
        raise GeometryError(f"expected 1 or 2 pieces, got {len(gt)}")
    return raster_iou(placements_mask(pred, resolution), placements_mask(gt, resolution), dilation_px)


def inside_canvas(poly: Polygon, margin: float = 0.0) -> bool:
    """True when every vertex lies strictly inside the canvas shrunk by ``margin``."""
    v = poly.vertices
    return bool(np.all(v > margin) and np.all(v < CANVAS_SIDE - margin))

"""Scene annotations, SVG import/export, silhouette rendering, synthetic splits and tasks."""

from __future__ import annotations

import io
import json
import math
import re
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from ._io import atomic_write_bytes, atomic_write_text
from .geometry import (
    CANVAS_SIDE,
    DEFAULT_RESOLUTION,
    GeometryError,
    PieceType,
    Placement,
    Polygon,
    RasterMask,
    inside_canvas,
    mask_from_bits,
    overlap_area,
    placements_mask,
    realize,
    template_of,
)

JSON_DECIMALS = 6
MAX_OVERLAP_FRACTION = 0.02
FIT_TOLERANCE = 0.05


class DatasetError(ValueError):
    pass


class SVGParseError(DatasetError):
    pass


class UnsupportedSVGFeature(SVGParseError):
    pass


class UnfittablePolygonError(DatasetError):
    pass


class Split(str, Enum):
    SINGLE = "single"
    TWO_PIECE = "two-piece"

    @property
    def piece_count(self) -> int:
        return 1 if self is Split.SINGLE else 2


class Mode(str, Enum):
    POS = "pos"
    ANGLE = "angle"
    SIZE = "size"
    ALL = "all"
    TWO_POS = "two-pos"
    TWO_ANGLE = "two-angle"
    TWO_POS_ANGLE = "two-pos-angle"

    @property
    def piece_count(self) -> int:
        return 2 if self.value.startswith("two-") else 1

    @property
    def targets(self) -> tuple[str, ...]:
        return _MODE_TARGETS[self]

    @property
    def involves_position(self) -> bool:
        return "pos" in self.targets


_MODE_TARGETS = {
    Mode.POS: ("pos",),
    Mode.ANGLE: ("angle",),
    Mode.SIZE: ("size",),
    Mode.ALL: ("pos", "angle", "size"),
    Mode.TWO_POS: ("pos",),
    Mode.TWO_ANGLE: ("angle",),
    Mode.TWO_POS_ANGLE: ("pos", "angle"),
}

POSE_FIELDS = ("pos", "angle", "size")


@dataclass(frozen=True)
class SceneAnnotation:
    scene_id: str
    pieces: tuple[Placement, ...]
    split: Split = Split.SINGLE
    source: str = "synthetic"
    canvas: dict = field(default_factory=lambda: {"frame": "unit10", "raster": DEFAULT_RESOLUTION})

    def __post_init__(self):
        object.__setattr__(self, "pieces", tuple(self.pieces))
        object.__setattr__(self, "split", Split(self.split))
        if len(self.pieces) not in (1, 2):
            raise DatasetError(f"{self.scene_id}: scenes hold 1 or 2 pieces, got {len(self.pieces)}")
        if self.split.piece_count != len(self.pieces):
            raise DatasetError(
                f"{self.scene_id}: split {self.split.value!r} inconsistent with {len(self.pieces)} piece(s)"
            )

    def check_invariants(self) -> None:
        """Raise DatasetError unless every piece is inside the canvas and pieces don't overlap."""
        for i, p in enumerate(self.pieces):
            if not inside_canvas(realize(p)):
                raise DatasetError(f"{self.scene_id}: piece {i} leaves the canvas")
        if len(self.pieces) == 2:
            a, b = self.pieces
            frac = overlap_area(a, b) / min(a.area, b.area)
            if frac > MAX_OVERLAP_FRACTION:
                raise DatasetError(f"{self.scene_id}: pieces overlap by {frac:.3%} of the smaller piece")

    def to_dict(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "split": self.split.value,
            "source": self.source,
            "pieces": [placement_to_dict(p) for p in self.pieces],
            "canvas": dict(self.canvas),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "SceneAnnotation":
        pieces = [placement_from_dict(p) for p in d["pieces"]]
        split = d.get("split") or (Split.SINGLE if len(pieces) == 1 else Split.TWO_PIECE)
        return cls(
            scene_id=str(d["scene_id"]),
            pieces=tuple(pieces),
            split=split,
            source=d.get("source", "synthetic"),
            canvas=dict(d.get("canvas") or {"frame": "unit10", "raster": DEFAULT_RESOLUTION}),
        )


def _r(x: float) -> float:
    v = round(float(x), JSON_DECIMALS)
    return 0.0 if v == 0 else v


def placement_to_dict(p: Placement) -> dict:
    return {
        "type": p.piece_type.value,
        "pos": [_r(p.pos[0]), _r(p.pos[1])],
        "angle": _r(p.angle),
        "size": _r(p.size),
        "flip": p.flip,
    }


def placement_from_dict(d: dict) -> Placement:
    if "size" in d:
        size = d["size"]
    elif "scale" in d:
        size = d["scale"]
    else:
        raise DatasetError(f"piece record lacks 'size'/'scale': {d}")
    return Placement(
        piece_type=PieceType(d["type"]),
        pos=tuple(d["pos"]),
        angle=float(d.get("angle", 0.0)),
        size=float(size),
        flip=bool(d.get("flip", False)),
    )


def rounded(p: Placement) -> Placement:
    """The placement exactly as it survives a JSON round trip."""
    return placement_from_dict(placement_to_dict(p))


def save_annotation(a: SceneAnnotation, path) -> None:
    atomic_write_text(path, a.to_json())


def load_annotation(path) -> SceneAnnotation:
    with open(path, "r", encoding="utf-8") as fh:
        return SceneAnnotation.from_dict(json.load(fh))


# --------------------------------------------------------------------------
# SVG


_NUM = re.compile(r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?")
_PATH_TOKEN = re.compile(r"([A-Za-z])|([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)")
_CONTAINERS = {"svg", "g", "defs", "title", "desc", "metadata", "style"}
_CURVE_COMMANDS = {"C": "cubic bezier", "S": "smooth cubic bezier", "Q": "quadratic bezier",
                   "T": "smooth quadratic bezier", "A": "elliptical arc"}


def _local(tag: str) -> str:
    return tag.rsplit("}", 1)[-1]


def _numbers(text: str) -> list[float]:
    return [float(t) for t in _NUM.findall(text or "")]


def _points(text: str) -> np.ndarray:
    nums = _numbers(text)
    if len(nums) % 2:
        raise SVGParseError(f"odd number of coordinates in points list: {text!r}")
    return np.array(nums, dtype=float).reshape(-1, 2)


def _dedupe_closed(pts: np.ndarray) -> np.ndarray:
    keep = [pts[0]]
    for p in pts[1:]:
        if not np.allclose(p, keep[-1], atol=1e-12):
            keep.append(p)
    if len(keep) > 1 and np.allclose(keep[0], keep[-1], atol=1e-12):
        keep.pop()
    return np.array(keep)


def _path_polygons(d: str) -> list[np.ndarray]:
    tokens = _PATH_TOKEN.findall(d or "")
    polys: list[np.ndarray] = []
    current: list[tuple[float, float]] = []
    cmd = None
    x = y = 0.0
    start = (0.0, 0.0)
    nums: list[float] = []

    def flush():
        nonlocal current
        if len(current) >= 3:
            polys.append(_dedupe_closed(np.array(current)))
        elif current and len(current) > 1:
            raise SVGParseError(f"path subpath with fewer than 3 vertices in {d!r}")
        current = []

    def run(c, args):
        nonlocal x, y, start, current
        up = c.upper()
        rel = c.islower()
        if up in _CURVE_COMMANDS:
            raise UnsupportedSVGFeature(f"path command {c!r} ({_CURVE_COMMANDS[up]}) is not supported")
        if up == "Z":
            if args:
                raise SVGParseError(f"arguments after close command in {d!r}")
            flush()
            x, y = start
            return
        arity = {"M": 2, "L": 2, "H": 1, "V": 1}.get(up)
        if arity is None:
            raise UnsupportedSVGFeature(f"path command {c!r} is not supported")
        if not args or len(args) % arity:
            raise SVGParseError(f"path command {c!r} has {len(args)} argument(s)")
        for i in range(0, len(args), arity):
            chunk = args[i : i + arity]
            if up == "M" and i == 0:
                flush()
                x, y = (x + chunk[0], y + chunk[1]) if rel else (chunk[0], chunk[1])
                start = (x, y)
                current = [(x, y)]
                continue
            if up in ("M", "L"):
                x, y = (x + chunk[0], y + chunk[1]) if rel else (chunk[0], chunk[1])
            elif up == "H":
                x = x + chunk[0] if rel else chunk[0]
            else:
                y = y + chunk[0] if rel else chunk[0]
            if not current:
                current = [start]
            current.append((x, y))

    for letter, number in tokens:
        if letter:
            if cmd is not None:
                run(cmd, nums)
            elif nums:
                raise SVGParseError(f"path data must start with a command: {d!r}")
            cmd, nums = letter, []
        else:
            nums.append(float(number))
    if cmd is not None:
        run(cmd, nums)
    if len(current) >= 3:
        # unterminated subpath: SVG fills it as if closed
        flush()
    return polys


def _dimensions(root) -> tuple[float, float, float, float]:
    vb = root.get("viewBox")
    if vb:
        nums = _numbers(vb)
        if len(nums) != 4 or nums[2] <= 0 or nums[3] <= 0:
            raise SVGParseError(f"bad viewBox {vb!r}")
        return tuple(nums)
    w, h = _numbers(root.get("width", "")), _numbers(root.get("height", ""))
    if not w or not h:
        raise SVGParseError("SVG root needs a viewBox or width/height")
    return 0.0, 0.0, w[0], h[0]


def _svg_elements(document) -> tuple[list[tuple[Polygon, dict]], float, float]:
    if isinstance(document, str):
        document = document.encode("utf-8")
    try:
        root = ET.fromstring(document)
    except ET.ParseError as exc:
        raise SVGParseError(f"malformed SVG: {exc}") from exc
    if _local(root.tag) != "svg":
        raise SVGParseError(f"root element is <{_local(root.tag)}>, expected <svg>")
    min_x, min_y, width, height = _dimensions(root)
    shift = np.array([min_x, min_y])
    out: list[tuple[Polygon, dict]] = []
    for el in root.iter():
        tag = _local(el.tag)
        if el is not root and el.get("transform"):
            raise UnsupportedSVGFeature(f"transform attribute on <{tag}> is not supported")
        if tag in _CONTAINERS:
            continue
        if tag == "polygon":
            rings = [_dedupe_closed(_points(el.get("points")))]
        elif tag == "polyline":
            pts = _points(el.get("points"))
            if len(pts) < 4 or not np.allclose(pts[0], pts[-1]):
                raise UnsupportedSVGFeature("open <polyline> is not a polygon")
            rings = [_dedupe_closed(pts)]
        elif tag == "path":
            rings = _path_polygons(el.get("d"))
        else:
            raise UnsupportedSVGFeature(f"<{tag}> elements are not supported")
        for ring in rings:
            if len(ring) < 3:
                raise SVGParseError(f"<{tag}> has fewer than 3 distinct vertices")
            out.append((Polygon(ring - shift), dict(el.attrib)))
    return out, width, height


def parse_svg(document) -> tuple[list[Polygon], float, float]:
    """Polygons in SVG user units (y down, viewBox origin moved to 0) plus width/height."""
    elements, width, height = _svg_elements(document)
    return [p for p, _ in elements], width, height


def export_svg(a: SceneAnnotation, pixels: int = DEFAULT_RESOLUTION) -> str:
    """Scene as an SVG in the 10x10 canvas frame; pieces carry their type as an attribute."""
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {CANVAS_SIDE:g} {CANVAS_SIDE:g}" '
        f'width="{pixels}" height="{pixels}">'
    ]
    for p in a.pieces:
        pts = " ".join(f"{x!r},{y!r}" for x, y in realize(p).vertices.tolist())
        lines.append(f'  <polygon data-piece-type="{p.piece_type.value}" points="{pts}" fill="black"/>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# Template fitting


@dataclass(frozen=True)
class FitResult:
    piece_type: PieceType
    placement: Placement
    residual: float


def _edge_signature(v: np.ndarray) -> np.ndarray:
    e = np.linalg.norm(np.roll(v, -1, axis=0) - v, axis=1)
    return np.sort(e) / e.max()


# one representative per distinct shape, used when no type hint is given
_SHAPE_REPRESENTATIVES = (
    PieceType.LARGE_TRIANGLE_1,
    PieceType.MEDIUM_TRIANGLE,
    PieceType.SMALL_TRIANGLE_1,
    PieceType.SQUARE,
    PieceType.PARALLELOGRAM,
)


def _align(template_v: np.ndarray, target: np.ndarray):
    """Best rotation of template_v onto target (same vertex order): (angle_deg, mean distance)."""
    dot = float(np.sum(template_v * target))
    cross = float(np.sum(template_v[:, 0] * target[:, 1] - template_v[:, 1] * target[:, 0]))
    th = math.atan2(cross, dot)
    c, s = math.cos(th), math.sin(th)
    rotated = template_v @ np.array([[c, -s], [s, c]]).T
    return math.degrees(th), float(np.mean(np.linalg.norm(rotated - target, axis=1)))


def fit_template(poly: Polygon, piece_type: PieceType | str | None = None) -> FitResult:
    """Recover the piece type and pose of a polygon given in the canvas frame.

    All three triangles are similar, so without a ``piece_type`` hint the type
    whose implied size is nearest 1 is chosen.
    """
    v = np.asarray(poly.vertices, dtype=float)
    n = len(v)
    if n not in (3, 4):
        raise UnfittablePolygonError(f"polygon has {n} vertices; Tangram pieces have 3 or 4")
    if piece_type is not None:
        candidates = [PieceType(piece_type)]
    else:
        candidates = [t for t in _SHAPE_REPRESENTATIVES if len(template_of(t).vertices) == n]
    sig = _edge_signature(v)
    area = poly.area
    center = poly.centroid
    local = v - center
    best = None
    for t in candidates:
        tmpl = template_of(t)
        if len(tmpl.vertices) != n:
            continue
        if np.max(np.abs(_edge_signature(tmpl.vertices) - sig)) > FIT_TOLERANCE:
            continue
        size = math.sqrt(area / tmpl.area)
        for flip in ((False, True) if t.chiral else (False,)):
            tv = tmpl.vertices * size
            if flip:
                tv = (tv * np.array([-1.0, 1.0]))[::-1]
            for k in range(n):
                angle, resid = _align(tv, np.roll(local, -k, axis=0))
                angle = angle % 360.0
                if angle >= 360.0:
                    angle = 0.0
                key = (round(resid / size, 9), abs(math.log(size)), angle)
                if best is None or key < best[0]:
                    best = (key, t, size, flip, angle, resid)
    if best is None or best[5] > FIT_TOLERANCE * best[2]:
        raise UnfittablePolygonError("no Tangram template matches this polygon")
    _, t, size, flip, angle, resid = best
    try:
        placement = Placement(t, (float(center[0]), float(center[1])), angle, size, flip)
    except GeometryError as exc:
        raise UnfittablePolygonError(str(exc)) from exc
    return FitResult(t, placement, resid)


def _type_hint(attrs: dict) -> PieceType | None:
    for key in ("data-piece-type", "data-type", "id", "class"):
        val = attrs.get(key)
        if not val:
            continue
        for token in val.split():
            try:
                return PieceType(token)
            except ValueError:
                continue
    return None


def canvas_transform(width: float, height: float) -> tuple[float, np.ndarray]:
    """Aspect-preserving map of a WxH document into the canvas, letterboxed and centered."""
    s = CANVAS_SIDE / max(width, height)
    offset = np.array([(CANVAS_SIDE - width * s) / 2.0, (CANVAS_SIDE - height * s) / 2.0])
    return s, offset


def import_svg(document, scene_id: str = "svg", source: str = "svg-import") -> SceneAnnotation:
    elements, width, height = _svg_elements(document)
    s, offset = canvas_transform(width, height)
    pieces = []
    for i, (poly, attrs) in enumerate(elements):
        world = Polygon(poly.vertices * s + offset)
        try:
            pieces.append(fit_template(world, _type_hint(attrs)).placement)
        except DatasetError as exc:
            raise type(exc)(f"polygon {i}: {exc}") from exc
    split = Split.SINGLE if len(pieces) == 1 else Split.TWO_PIECE
    if len(pieces) not in (1, 2):
        raise DatasetError(f"{scene_id}: SVG holds {len(pieces)} polygons; scenes hold 1 or 2")
    return SceneAnnotation(scene_id, tuple(pieces), split, source)


# --------------------------------------------------------------------------
# Rendering


def scene_mask(a: SceneAnnotation, resolution: int = DEFAULT_RESOLUTION) -> RasterMask:
    return placements_mask(a.pieces, resolution)


def silhouette(mask: RasterMask) -> np.ndarray:
    return np.where(mask.bits, 0, 255).astype(np.uint8)


def png_bytes(gray: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(gray, dtype=np.uint8), mode="L").save(buf, format="PNG")
    return buf.getvalue()


def render_scene(a: SceneAnnotation, resolution: int = DEFAULT_RESOLUTION) -> bytes:
    """Black silhouette of the piece union on white, as 8-bit grayscale PNG bytes."""
    return png_bytes(silhouette(scene_mask(a, resolution)))


def mask_from_png(data: bytes, threshold: int = 128) -> RasterMask:
    img = np.asarray(Image.open(io.BytesIO(data)).convert("L"))
    return mask_from_bits(img < threshold)


# --------------------------------------------------------------------------
# Synthetic generation


def generate_synthetic(
    count: int,
    split: Split | str = Split.SINGLE,
    piece_filter: Iterable[PieceType | str] | None = None,
    seed: int = 0,
    pos_range: tuple[float, float] = (2.0, 8.0),
    size_range: tuple[float, float] = (0.8, 1.8),
    max_attempts: int = 100,
    id_prefix: str | None = None,
) -> list[SceneAnnotation]:
    """Seeded random scenes whose values are already rounded to the JSON precision.

    A draw is rejected when a piece leaves the canvas or, for two-piece scenes,
    when the pieces overlap by more than 2% of the smaller piece.
    """
    if count < 1:
        raise DatasetError(f"count must be >= 1, got {count}")
    split = Split(split)
    types = [PieceType(t) for t in piece_filter] if piece_filter else list(PieceType)
    if not types:
        raise DatasetError("piece_filter is empty")
    prefix = id_prefix if id_prefix is not None else ("single" if split is Split.SINGLE else "two")
    rng = np.random.default_rng(seed)
    scenes = []
    for i in range(count):
        scene_id = f"{prefix}-{i:05d}"
        for _ in range(max_attempts):
            if split.piece_count == 1:
                chosen = [types[rng.integers(len(types))]]
            elif len(types) >= 2:
                idx = rng.choice(len(types), size=2, replace=False)
                chosen = [types[j] for j in idx]
            else:
                chosen = [types[0], types[0]]
            pieces = []
            for t in chosen:
                pos = rng.uniform(pos_range[0], pos_range[1], size=2)
                angle = rng.uniform(0.0, 360.0)
                size = rng.uniform(size_range[0], size_range[1])
                flip = bool(rng.integers(2)) if t.chiral else False
                pieces.append(rounded(Placement(t, tuple(pos), angle, size, flip)))
            scene = SceneAnnotation(scene_id, tuple(pieces), split, "synthetic")
            try:
                scene.check_invariants()
            except DatasetError:
                continue
            scenes.append(scene)
            break
        else:
            raise DatasetError(f"{scene_id}: no valid scene after {max_attempts} attempts")
    return scenes


def write_dataset(scenes: Sequence[SceneAnnotation], root, resolution: int = DEFAULT_RESOLUTION) -> tuple[Path, Path]:
    """Write ``root/images/<id>.png`` and ``root/gt/<id>.json``; returns (image_dir, gt_dir)."""
    root = Path(root)
    img_dir, gt_dir = root / "images", root / "gt"
    for a in scenes:
        save_annotation(a, gt_dir / f"{a.scene_id}.json")
        atomic_write_bytes(img_dir / f"{a.scene_id}.png", render_scene(a, resolution))
    return img_dir, gt_dir


# --------------------------------------------------------------------------
# Tasks


@dataclass(frozen=True)
class TaskSpec:
    """Which pose fields a model must predict; the rest are fixed to GT.

    ``fixed_fields`` holds one dict per piece and always includes the piece
    type and flip, which no mode asks the model to predict.
    """

    scene_id: str
    mode: Mode
    fixed_fields: tuple[dict, ...]
    target_fields: tuple[str, ...]

    @property
    def piece_count(self) -> int:
        return len(self.fixed_fields)


def effective_mode(mode: Mode | str, piece_count: int) -> Mode | None:
    """Counterpart of ``mode`` for a scene with ``piece_count`` pieces (None if there is none)."""
    mode = Mode(mode)
    if mode.piece_count == piece_count:
        return mode
    pairs = {Mode.POS: Mode.TWO_POS, Mode.ANGLE: Mode.TWO_ANGLE, Mode.ALL: Mode.TWO_POS_ANGLE}
    if piece_count == 2:
        return pairs.get(mode)
    inverse = {v: k for k, v in pairs.items()}
    return inverse.get(mode)


def make_task(a: SceneAnnotation, mode: Mode | str) -> TaskSpec:
    mode = Mode(mode)
    if mode.piece_count != len(a.pieces):
        raise DatasetError(
            f"{a.scene_id}: mode {mode.value!r} needs {mode.piece_count} piece(s), scene has {len(a.pieces)}"
        )
    targets = mode.targets
    fixed = []
    for p in a.pieces:
        d = {"type": p.piece_type, "flip": p.flip}
        for name in POSE_FIELDS:
            if name not in targets:
                d[name] = getattr(p, name)
        fixed.append(d)
    return TaskSpec(a.scene_id, mode, tuple(fixed), targets)


def merge_fields(task: TaskSpec, pred_fields: Sequence[dict]) -> list[Placement]:
    """Full placements from predicted target fields layered over the task's fixed fields."""
    if len(pred_fields) != task.piece_count:
        raise DatasetError(f"expected {task.piece_count} predicted piece(s), got {len(pred_fields)}")
    out = []
    for fixed, pred in zip(task.fixed_fields, pred_fields):
        missing = [f for f in task.target_fields if f not in pred]
        extra = [f for f in pred if f not in task.target_fields]
        if missing or extra:
            raise DatasetError(f"predicted fields {sorted(pred)} do not match targets {list(task.target_fields)}")
        merged = dict(fixed)
        merged.update(pred)
        out.append(
            Placement(merged["type"], tuple(merged["pos"]), merged["angle"], merged["size"], merged["flip"])
        )
    return out


def target_values(a: SceneAnnotation, task: TaskSpec) -> list[dict]:
    """The GT values of the task's target fields, one dict per piece."""
    out = []
    for p in a.pieces:
        d = {}
        for name in task.target_fields:
            v = getattr(p, name)
            d[name] = tuple(v) if name == "pos" else v
        out.append(d)
    return out

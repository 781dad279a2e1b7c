"""Per-scene error metrics and mean/CI aggregation."""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

from .dataset import DatasetError, Mode, SceneAnnotation, TaskSpec, merge_fields
from .geometry import (
    CANVAS_SIDE,
    DEFAULT_DILATION,
    DEFAULT_RESOLUTION,
    PieceType,
    Placement,
    overlap_area,
    union_iou,
)

# worst-case values recorded for a prediction that could not be parsed
WORST_L2 = CANVAS_SIDE * math.sqrt(2.0)
WORST_ANGLE = 180.0
WORST_SIZE = 1.0

Z95 = 1.96


def l2_error(pred_pos, gt_pos) -> float:
    return math.hypot(pred_pos[0] - gt_pos[0], pred_pos[1] - gt_pos[1])


def _wrap(delta: float, period: float) -> float:
    d = math.fmod(abs(delta), period)
    return min(d, period - d)


def angle_error(pred_deg: float, gt_deg: float, piece_type: PieceType | str | None = None,
                symmetry_aware: bool = True) -> float:
    """Smallest rotation (degrees) between two angles.

    With ``symmetry_aware`` the difference is taken modulo the piece's
    rotational symmetry period (90 for the square, 180 for the parallelogram).
    """
    period = 360.0
    if symmetry_aware and piece_type is not None:
        period = PieceType(piece_type).symmetry_period
    return _wrap(pred_deg - gt_deg, period)


def size_error(pred_s: float, gt_s: float) -> float:
    if pred_s <= 0 or gt_s <= 0:
        raise ValueError("sizes must be positive")
    return abs(pred_s - gt_s) / gt_s


def overlap_penalty(p1: Placement, p2: Placement) -> float:
    """Mutual overlap area normalised by the smaller piece's area."""
    return min(1.0, overlap_area(p1, p2) / min(p1.area, p2.area))


@dataclass
class MetricRecord:
    scene_id: str
    mode: str
    l2_pos: list[float] = field(default_factory=list)
    angle_err: list[float] = field(default_factory=list)
    angle_err_raw: list[float] = field(default_factory=list)
    size_err: list[float] = field(default_factory=list)
    iou: float = 0.0
    union_iou: float | None = None
    overlap_penalty: float | None = None
    parse_failed: bool = False
    status: str = "ok"
    error: str | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricRecord":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)

    @property
    def scored(self) -> bool:
        return self.status in ("ok", "parse-failed")


def score_placements(scene_id: str, mode: Mode | str, pred: Sequence[Placement],
                     gt: Sequence[Placement], dilation_px: int = DEFAULT_DILATION,
                     resolution: int = DEFAULT_RESOLUTION) -> MetricRecord:
    mode = Mode(mode)
    rec = MetricRecord(scene_id, mode.value)
    for p, g in zip(pred, gt):
        rec.l2_pos.append(l2_error(p.pos, g.pos))
        rec.angle_err.append(angle_error(p.angle, g.angle, g.piece_type, True))
        rec.angle_err_raw.append(angle_error(p.angle, g.angle, None, False))
        rec.size_err.append(size_error(p.size, g.size))
    rec.iou = union_iou(pred, gt, dilation_px, resolution)
    if len(gt) == 2:
        rec.union_iou = rec.iou
        rec.overlap_penalty = overlap_penalty(pred[0], pred[1])
    return rec


def parse_failure_record(task: TaskSpec, reason: str | None = None) -> MetricRecord:
    n = task.piece_count
    rec = MetricRecord(
        task.scene_id,
        task.mode.value,
        l2_pos=[WORST_L2] * n,
        angle_err=[WORST_ANGLE] * n,
        angle_err_raw=[WORST_ANGLE] * n,
        size_err=[WORST_SIZE] * n,
        iou=0.0,
        parse_failed=True,
        status="parse-failed",
        error=reason,
    )
    if n == 2:
        rec.union_iou = 0.0
        rec.overlap_penalty = 1.0
    return rec


def score_prediction(task: TaskSpec, gt: SceneAnnotation, pred_fields: Sequence[dict] | None,
                     dilation_px: int = DEFAULT_DILATION, resolution: int = DEFAULT_RESOLUTION,
                     parse_error: str | None = None) -> MetricRecord:
    """Score predicted target fields against GT; ``pred_fields=None`` means the parse failed.

    Pieces are matched by index.
    """
    if pred_fields is None:
        return parse_failure_record(task, parse_error)
    if task.scene_id != gt.scene_id:
        raise DatasetError(f"task {task.scene_id!r} does not belong to scene {gt.scene_id!r}")
    pred = merge_fields(task, pred_fields)
    return score_placements(task.scene_id, task.mode, pred, gt.pieces, dilation_px, resolution)


# --------------------------------------------------------------------------
# Aggregation

METRIC_NAMES = ("iou", "l2_pos", "angle_err", "angle_err_raw", "size_err", "union_iou", "overlap_penalty")


@dataclass
class Aggregate:
    key: dict
    n: int
    parse_failures: int
    mean: dict[str, float]
    ci95: dict[str, float]

    def to_dict(self) -> dict:
        return asdict(self)


def _record_value(rec: MetricRecord, name: str) -> float | None:
    v = getattr(rec, name)
    if isinstance(v, list):
        return math.fsum(v) / len(v) if v else None
    return v


def mean_ci(values: Sequence[float]) -> tuple[float, float]:
    """Mean and 95% normal-approximation half-width (sample std, ddof=1)."""
    n = len(values)
    if n == 0:
        return math.nan, math.nan
    m = math.fsum(values) / n
    if n == 1:
        return m, 0.0
    var = math.fsum((v - m) ** 2 for v in values) / (n - 1)
    return m, Z95 * math.sqrt(var) / math.sqrt(n)


def aggregate(records: Iterable[MetricRecord], key: dict | None = None) -> Aggregate:
    """Mean and CI of every metric over scored records (parse failures count with IoU 0)."""
    recs = [r for r in records if r.scored]
    means, cis = {}, {}
    for name in METRIC_NAMES:
        vals = [v for v in (_record_value(r, name) for r in recs) if v is not None]
        if vals:
            means[name], cis[name] = mean_ci(vals)
    return Aggregate(dict(key or {}), len(recs), sum(r.parse_failed for r in recs), means, cis)


def group_aggregate(records: Iterable[MetricRecord],
                    key_fn: Callable[[MetricRecord], dict]) -> list[Aggregate]:
    groups: dict[tuple, list[MetricRecord]] = defaultdict(list)
    keys: dict[tuple, dict] = {}
    for r in records:
        k = key_fn(r)
        t = tuple(sorted(k.items()))
        groups[t].append(r)
        keys[t] = k
    return [aggregate(groups[t], keys[t]) for t in sorted(groups)]


def read_jsonl(path) -> list[MetricRecord]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(MetricRecord.from_dict(json.loads(line)))
    return out

"""Reward-guided test-time refinement.

The loop queries a proposal backend up to ``T`` times, scores every candidate
against ground truth, keeps the highest-reward one and stops early once its
IoU reaches ``tau``.  If the best candidate is still short of ``tau`` and the
task predicts positions, a deterministic 3x3 grid hill-climb over (x, y)
finishes the job.

Reward and stopping both read GT at test time: the verifier is part of the
benchmark, not something a deployed model would have.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

from .dataset import SceneAnnotation, TaskSpec, merge_fields
from .geometry import (
    CANVAS_SIDE,
    DEFAULT_DILATION,
    DEFAULT_RESOLUTION,
    placements_mask,
    raster_iou,
)
from .metrics import angle_error, l2_error, size_error
from .proposal import BackendError, build_prompt

LOCAL_SEARCH_STEPS = (0.6, 0.3, 0.15)
# row-major order defines which improving move is "first"
NEIGHBOR_OFFSETS = tuple((a, b) for a in (-1, 0, 1) for b in (-1, 0, 1) if (a, b) != (0, 0))


class TraceInvariantError(AssertionError):
    pass


@dataclass(frozen=True)
class RewardParams:
    lam: float = 0.1
    canvas_side: float = CANVAS_SIDE
    dilation_px: int = DEFAULT_DILATION
    resolution: int = DEFAULT_RESOLUTION
    # optional regularisers, off by default to match the position-only reward
    angle_weight: float = 0.0
    size_weight: float = 0.0

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError(f"lambda must be > 0, got {self.lam}")
        if self.canvas_side != CANVAS_SIDE:
            raise ValueError(f"canvas_side is fixed at {CANVAS_SIDE:g}")


def reward_value(iou: float, l2: float, lam: float, canvas_side: float = CANVAS_SIDE) -> float:
    return iou - lam * (l2 / canvas_side)


class Scorer:
    """Scores candidate target fields for one task, caching the GT mask."""

    def __init__(self, task: TaskSpec, gt: SceneAnnotation, params: RewardParams):
        self.task = task
        self.gt = gt
        self.params = params
        self._gt_mask = placements_mask(gt.pieces, params.resolution)

    def iou(self, fields: Sequence[dict]) -> float:
        pred = merge_fields(self.task, fields)
        return raster_iou(placements_mask(pred, self.params.resolution), self._gt_mask, self.params.dilation_px)

    def __call__(self, fields: Sequence[dict]) -> tuple[float, float, float]:
        """(reward, iou, l2); l2 is the mean centroid distance over pieces."""
        pred = merge_fields(self.task, fields)
        iou = raster_iou(placements_mask(pred, self.params.resolution), self._gt_mask, self.params.dilation_px)
        l2 = math.fsum(l2_error(p.pos, g.pos) for p, g in zip(pred, self.gt.pieces)) / len(pred)
        r = reward_value(iou, l2, self.params.lam, self.params.canvas_side)
        if self.params.angle_weight:
            ang = sum(angle_error(p.angle, g.angle, g.piece_type) for p, g in zip(pred, self.gt.pieces)) / len(pred)
            r -= self.params.angle_weight * ang / 180.0
        if self.params.size_weight:
            se = sum(size_error(p.size, g.size) for p, g in zip(pred, self.gt.pieces)) / len(pred)
            r -= self.params.size_weight * se
        return r, iou, l2


def reward(candidate: Sequence[dict], gt: SceneAnnotation, task: TaskSpec,
           params: RewardParams | None = None) -> tuple[float, float, float]:
    return Scorer(task, gt, params or RewardParams())(candidate)


@dataclass(frozen=True)
class LoopConfig:
    T: int = 6
    tau: float = 0.9
    k: int = 15
    temperature: float = 0.0
    local_search_enabled: bool = True
    seed: int = 0
    max_parse_failures: int = 3

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if not 0 < self.tau <= 1:
            raise ValueError("tau must be in (0, 1]")
        if self.k < 0 or self.temperature < 0:
            raise ValueError("k and temperature must be >= 0")

    @classmethod
    def single_shot(cls, k: int = 0, temperature: float = 0.0, seed: int = 0) -> "LoopConfig":
        return cls(T=1, tau=1.0, k=k, temperature=temperature, local_search_enabled=False, seed=seed)

    @property
    def is_single_shot(self) -> bool:
        return self.T == 1 and not self.local_search_enabled


@dataclass
class IterationEntry:
    iteration: int
    raw_text: str
    fields: list[dict] | None
    iou: float | None
    reward: float | None
    l2: float | None
    accepted_as_best: bool
    feedback_hint_used: bool
    best_iou: float | None
    best_reward: float | None
    parse_error: str | None = None


@dataclass
class SearchEntry:
    step: float
    piece: int
    offset: tuple[int, int]
    pos: tuple[float, float]
    iou: float
    accepted: bool


@dataclass
class RefineTrace:
    scene_id: str
    entries: list[IterationEntry] = field(default_factory=list)
    local_search: list[SearchEntry] = field(default_factory=list)
    stop_reason: str = "exhausted"
    best_iou: float = 0.0
    best_reward: float | None = None

    def check_invariants(self, tau: float) -> None:
        last = -math.inf
        for e in self.entries:
            if e.best_reward is None:
                continue
            if e.best_reward < last:
                raise TraceInvariantError(f"{self.scene_id}: best reward decreased at iteration {e.iteration}")
            last = e.best_reward
        if self.stop_reason == "threshold":
            final = self.entries[-1]
            if final.best_iou is None or final.best_iou < tau:
                raise TraceInvariantError(f"{self.scene_id}: threshold stop with best iou below tau")
        accepted = [s.iou for s in self.local_search if s.accepted]
        if any(b <= a for a, b in zip(accepted, accepted[1:])):
            raise TraceInvariantError(f"{self.scene_id}: accepted local-search move did not increase IoU")

    def to_jsonl(self) -> str:
        lines = []
        for e in self.entries:
            lines.append(json.dumps({"kind": "iteration", "scene_id": self.scene_id, **asdict(e)}, sort_keys=True,
                                    ensure_ascii=False))
        for s in self.local_search:
            lines.append(json.dumps({"kind": "local_search", "scene_id": self.scene_id, **asdict(s)}, sort_keys=True))
        lines.append(json.dumps({"kind": "summary", "scene_id": self.scene_id, "stop_reason": self.stop_reason,
                                 "best_iou": self.best_iou, "best_reward": self.best_reward}, sort_keys=True))
        return "\n".join(lines) + "\n"


@dataclass
class RefineResult:
    best_fields: list[dict] | None
    best_iou: float
    best_reward: float | None
    trace: RefineTrace


def _copy_fields(fields: Sequence[dict]) -> list[dict]:
    return [dict(d) for d in fields]


def local_search(start_fields: Sequence[dict], gt: SceneAnnotation, task: TaskSpec,
                 params: RewardParams | None = None, steps: Sequence[float] = LOCAL_SEARCH_STEPS,
                 log: list | None = None) -> tuple[list[dict], float]:
    """First-improvement 3x3 hill-climb over piece positions at shrinking step sizes.

    At each step size a piece moves until no neighbour improves IoU; for two
    pieces, piece 1 settles before piece 2, once per step size.  Neighbours
    outside the canvas are skipped.  Only ``pos`` is changed.
    """
    if not task.mode.involves_position:
        raise ValueError(f"local search needs a positional mode, got {task.mode.value!r}")
    scorer = Scorer(task, gt, params or RewardParams())
    fields = _copy_fields(start_fields)
    iou = scorer.iou(fields)
    for h in steps:
        for idx in range(len(fields)):
            improved = True
            while improved:
                improved = False
                x, y = fields[idx]["pos"]
                for a, b in NEIGHBOR_OFFSETS:
                    nx, ny = x + h * a, y + h * b
                    if not (0.0 <= nx <= CANVAS_SIDE and 0.0 <= ny <= CANVAS_SIDE):
                        continue
                    cand = _copy_fields(fields)
                    cand[idx]["pos"] = (nx, ny)
                    ci = scorer.iou(cand)
                    accepted = ci > iou
                    if log is not None:
                        log.append(SearchEntry(h, idx, (a, b), (nx, ny), ci, accepted))
                    if accepted:
                        fields, iou = cand, ci
                        improved = True
                        break
    return fields, iou


def refine_loop(task: TaskSpec, gt: SceneAnnotation, backend, exemplar_pool: Sequence[SceneAnnotation],
                loop_cfg: LoopConfig | None = None, reward_params: RewardParams | None = None,
                target_image: bytes | None = None) -> RefineResult:
    """Run the verifier-refiner loop for one scene.

    Backend failures (transport errors, exhausted replays) propagate; parse
    failures consume an iteration and leave the best candidate untouched.
    """
    cfg = loop_cfg or LoopConfig()
    params = reward_params or RewardParams()
    scorer = Scorer(task, gt, params)
    trace = RefineTrace(task.scene_id)
    best_fields = None
    best_iou = 0.0
    best_reward = None
    consecutive_failures = 0
    stop = "exhausted"
    for t in range(1, cfg.T + 1):
        bundle = build_prompt(task, exemplar_pool, cfg.k, iteration=t,
                              prev_best_iou=best_iou if t >= 2 else None, seed=cfg.seed,
                              temperature=cfg.temperature, target_image=target_image)
        resp = backend.propose(bundle)
        if not resp.ok:
            consecutive_failures += 1
            trace.entries.append(IterationEntry(t, resp.raw_text, None, None, None, None, False,
                                                bundle.feedback_hint is not None, best_iou if best_fields else None,
                                                best_reward, resp.parse_error))
            if consecutive_failures >= cfg.max_parse_failures:
                stop = "parse-failure-budget"
                break
            continue
        consecutive_failures = 0
        r, iou, l2 = scorer(resp.parsed)
        accepted = best_reward is None or r > best_reward
        if accepted:
            best_fields, best_iou, best_reward = _copy_fields(resp.parsed), iou, r
        trace.entries.append(IterationEntry(t, resp.raw_text, _copy_fields(resp.parsed), iou, r, l2, accepted,
                                            bundle.feedback_hint is not None, best_iou, best_reward))
        if best_iou >= cfg.tau:
            stop = "threshold"
            break
    trace.stop_reason = stop
    if (best_fields is not None and best_iou < cfg.tau and cfg.local_search_enabled
            and task.mode.involves_position):
        best_fields, _ = local_search(best_fields, gt, task, params, log=trace.local_search)
    if best_fields is not None:
        # final reward recomputed on whatever is returned
        best_reward, best_iou, _ = scorer(best_fields)
    trace.best_iou = best_iou
    trace.best_reward = best_reward
    trace.check_invariants(cfg.tau)
    return RefineResult(best_fields, best_iou, best_reward, trace)


__all__ = [
    "BackendError",
    "LoopConfig",
    "RefineResult",
    "RefineTrace",
    "RewardParams",
    "Scorer",
    "local_search",
    "refine_loop",
    "reward",
    "reward_value",
]

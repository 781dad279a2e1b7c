"""Evaluation pipeline, ablation sweeps, oracle calibration and report tables."""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from ._io import atomic_write_bytes, atomic_write_text
from .dataset import (
    Mode,
    SceneAnnotation,
    effective_mode,
    load_annotation,
    make_task,
    merge_fields,
    placement_to_dict,
    png_bytes,
    scene_mask,
)
from .geometry import placements_mask
from .metrics import Aggregate, MetricRecord, aggregate, group_aggregate, mean_ci, score_prediction
from .proposal import BackendConfig, NoisyOracleBackend, OracleParams, make_backend, trace_line
from .refine import LoopConfig, RefineResult, RewardParams, refine_loop

logger = logging.getLogger(__name__)

OVERLAY_BACKGROUND = 255
OVERLAY_GT_ONLY = 200
OVERLAY_PRED_ONLY = 120
OVERLAY_BOTH = 0


class ConfigError(ValueError):
    pass


class CalibrationError(ValueError):
    pass


@dataclass
class RunConfig:
    in_dir: str
    gt_dir: str
    out_dir: str
    mode: Mode = Mode.POS
    backend: BackendConfig = field(default_factory=BackendConfig)
    loop: LoopConfig = field(default_factory=LoopConfig.single_shot)
    reward: RewardParams = field(default_factory=RewardParams)
    seed: int = 0
    workers: int = 1
    piece_filter: str = "all"

    def __post_init__(self):
        self.mode = Mode(self.mode)
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    @property
    def model(self) -> str:
        return self.backend.label()

    def manifest(self) -> dict:
        return {
            "version": __version__,
            "in_dir": str(self.in_dir),
            "gt_dir": str(self.gt_dir),
            "out_dir": str(self.out_dir),
            "mode": self.mode.value,
            "model": self.model,
            "backend": _jsonable(asdict(self.backend)),
            "loop": asdict(self.loop),
            "single_shot": self.loop.is_single_shot,
            "reward": asdict(self.reward),
            "seed": self.seed,
            "workers": self.workers,
            "piece_filter": self.piece_filter,
        }


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


# --------------------------------------------------------------------------
# One scene


@dataclass
class SceneOutcome:
    stem: str
    record: MetricRecord
    result: RefineResult | None = None
    pred_pieces: list | None = None
    scene: SceneAnnotation | None = None


def overlay_image(gt_mask, pred_mask) -> np.ndarray:
    """Grayscale overlay: GT-only light gray, prediction-only mid gray, both black."""
    g, p = gt_mask.bits, pred_mask.bits
    img = np.full(g.shape, OVERLAY_BACKGROUND, dtype=np.uint8)
    img[g & ~p] = OVERLAY_GT_ONLY
    img[p & ~g] = OVERLAY_PRED_ONLY
    img[g & p] = OVERLAY_BOTH
    return img


def _pool_for(scene: SceneAnnotation, pool: Sequence[SceneAnnotation]) -> list[SceneAnnotation]:
    return [s for s in pool if len(s.pieces) == len(scene.pieces) and s.scene_id != scene.scene_id]


def evaluate_scene(stem: str, scene: SceneAnnotation | None, mode: Mode, backend,
                   pool: Sequence[SceneAnnotation], loop: LoopConfig, reward: RewardParams,
                   image: bytes | None = None) -> SceneOutcome:
    """Predict, score and collect everything for one scene; never raises."""
    if scene is None:
        rec = MetricRecord(stem, mode.value, status="unpaired", error="no ground-truth annotation")
        return SceneOutcome(stem, rec)
    m = effective_mode(mode, len(scene.pieces))
    if m is None:
        rec = MetricRecord(scene.scene_id, mode.value, status="skipped",
                           error=f"mode {mode.value!r} has no {len(scene.pieces)}-piece counterpart")
        return SceneOutcome(stem, rec, scene=scene)
    try:
        task = make_task(scene, m)
        candidates = _pool_for(scene, pool)
        k = min(loop.k, len(candidates))
        if k < loop.k:
            logger.info("%s: exemplar pool holds %d scenes, using k=%d", stem, len(candidates), k)
        cfg = replace(loop, k=k)
        result = refine_loop(task, scene, backend, candidates, cfg, reward, target_image=image)
        if result.best_fields is None:
            last = result.trace.entries[-1].parse_error if result.trace.entries else None
            rec = score_prediction(task, scene, None, reward.dilation_px, reward.resolution, parse_error=last)
            return SceneOutcome(stem, rec, result, None, scene)
        rec = score_prediction(task, scene, result.best_fields, reward.dilation_px, reward.resolution)
        return SceneOutcome(stem, rec, result, merge_fields(task, result.best_fields), scene)
    except Exception as exc:  # crash isolation: a scene failure becomes a flagged record
        logger.warning("%s failed: %s", stem, exc)
        rec = MetricRecord(scene.scene_id, m.value, status="error", error=f"{type(exc).__name__}: {exc}")
        return SceneOutcome(stem, rec, scene=scene)


def evaluate_scenes(items: Sequence[tuple[str, SceneAnnotation | None, bytes | None]], mode: Mode, backend,
                    pool: Sequence[SceneAnnotation], loop: LoopConfig, reward: RewardParams,
                    workers: int = 1) -> list[SceneOutcome]:
    """Evaluate many scenes; results come back in input order whatever the worker count."""
    def one(item):
        stem, scene, image = item
        return evaluate_scene(stem, scene, mode, backend, pool, loop, reward, image)

    if workers <= 1:
        return [one(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(one, items))


# --------------------------------------------------------------------------
# Directory runs


@dataclass
class RunSummary:
    records: list[MetricRecord]
    aggregates: list[Aggregate]
    failures: int
    out_dir: str

    @property
    def exit_code(self) -> int:
        return 2 if self.failures else 0

    @property
    def mean_iou(self) -> float:
        vals = [r.iou for r in self.records if r.scored]
        return math.fsum(vals) / len(vals) if vals else math.nan


def load_pairs(in_dir, gt_dir) -> list[tuple[str, SceneAnnotation | None, bytes]]:
    in_dir, gt_dir = Path(in_dir), Path(gt_dir)
    if not in_dir.is_dir():
        raise ConfigError(f"input directory not found: {in_dir}")
    if not gt_dir.is_dir():
        raise ConfigError(f"ground-truth directory not found: {gt_dir}")
    items = []
    for png in sorted(in_dir.glob("*.png")):
        gt_path = gt_dir / f"{png.stem}.json"
        scene = load_annotation(gt_path) if gt_path.exists() else None
        items.append((png.stem, scene, png.read_bytes()))
    return items


def _pred_json(outcome: SceneOutcome) -> str:
    res = outcome.result
    d = {
        "scene_id": outcome.record.scene_id,
        "mode": outcome.record.mode,
        "status": outcome.record.status,
        "fields": None,
        "pieces": None,
        "iou": outcome.record.iou if outcome.record.scored else None,
        "reward": res.best_reward if res else None,
        "stop_reason": res.trace.stop_reason if res else None,
        "error": outcome.record.error,
    }
    if res and res.best_fields is not None:
        d["fields"] = [{k: (list(v) if isinstance(v, tuple) else v) for k, v in f.items()} for f in res.best_fields]
    if outcome.pred_pieces is not None:
        d["pieces"] = [placement_to_dict(p) for p in outcome.pred_pieces]
    return json.dumps(d, indent=2, sort_keys=True) + "\n"


def write_scene_outputs(outcome: SceneOutcome, out_dir: Path, resolution: int) -> None:
    sdir = out_dir / "scenes" / outcome.stem
    atomic_write_text(sdir / "pred.json", _pred_json(outcome))
    if outcome.scene is None or outcome.record.status == "skipped":
        return
    gt_mask = scene_mask(outcome.scene, resolution)
    pred_mask = placements_mask(outcome.pred_pieces or [], resolution)
    atomic_write_bytes(sdir / "gt.png", png_bytes(np.where(gt_mask.bits, 0, 255).astype(np.uint8)))
    atomic_write_bytes(sdir / "pred.png", png_bytes(np.where(pred_mask.bits, 0, 255).astype(np.uint8)))
    atomic_write_bytes(sdir / "overlay.png", png_bytes(overlay_image(gt_mask, pred_mask)))


def _group_key(cfg: RunConfig):
    def key(rec: MetricRecord) -> dict:
        split = "two-piece" if Mode(rec.mode).piece_count == 2 else "single"
        return {"model": cfg.model, "mode": rec.mode, "split": split, "piece_filter": cfg.piece_filter}
    return key


def run_eval(cfg: RunConfig, backend=None) -> RunSummary:
    """Evaluate every PNG in ``in_dir`` against its paired GT JSON and write all outputs."""
    items = load_pairs(cfg.in_dir, cfg.gt_dir)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scenes = [s for _, s, _ in items if s is not None]
    if backend is None:
        bcfg = cfg.backend
        if bcfg.kind == "noisy-oracle" and bcfg.oracle.seed != cfg.seed:
            bcfg = replace(bcfg, oracle=replace(bcfg.oracle, seed=cfg.seed))
        backend = make_backend(bcfg, {s.scene_id: s for s in scenes}, log_path=out_dir / "remote_log.jsonl")
    loop = replace(cfg.loop, seed=cfg.seed)
    outcomes = evaluate_scenes(items, cfg.mode, backend, scenes, loop, cfg.reward, cfg.workers)
    for o in outcomes:
        write_scene_outputs(o, out_dir, cfg.reward.resolution)
    records = [o.record for o in outcomes]
    atomic_write_text(out_dir / "metrics.jsonl", "".join(r.to_json() + "\n" for r in records))
    responses = []
    for o in outcomes:
        if o.result is not None:
            responses.extend(trace_line(o.record.scene_id, e.iteration, e.raw_text) for e in o.result.trace.entries)
    atomic_write_text(out_dir / "responses.jsonl", "".join(line + "\n" for line in responses))
    atomic_write_text(out_dir / "traces.jsonl",
                      "".join(o.result.trace.to_jsonl() for o in outcomes if o.result is not None))
    aggs = group_aggregate([r for r in records if r.scored], _group_key(cfg))
    failures = sum(r.status == "error" for r in records)
    manifest = cfg.manifest()
    manifest["backend_identity"] = getattr(backend, "identity", type(backend).__name__)
    manifest["scenes"] = len(records)
    atomic_write_text(out_dir / "run_manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    atomic_write_text(out_dir / "summary.json",
                      json.dumps([a.to_dict() for a in aggs], indent=2, sort_keys=True) + "\n")
    return RunSummary(records, aggs, failures, str(out_dir))


# --------------------------------------------------------------------------
# Calibration


@dataclass
class CalibrationResult:
    sigma_pos: float
    achieved: float
    evaluations: int


def single_shot_mean(scenes: Sequence[SceneAnnotation], mode: Mode | str, oracle: OracleParams,
                     reward: RewardParams | None = None, seed: int = 0) -> float:
    reward = reward or RewardParams()
    backend = NoisyOracleBackend({s.scene_id: s for s in scenes}, oracle)
    items = [(s.scene_id, s, None) for s in scenes]
    outs = evaluate_scenes(items, Mode(mode), backend, scenes, LoopConfig.single_shot(seed=seed), reward)
    vals = [o.record.iou for o in outs if o.record.scored]
    return math.fsum(vals) / len(vals)


def calibrate_oracle(scenes: Sequence[SceneAnnotation], target_iou: float, tolerance: float = 0.03,
                     mode: Mode | str = Mode.POS, base: OracleParams | None = None,
                     bounds: tuple[float, float] = (0.0, 5.0), max_evals: int = 20,
                     reward: RewardParams | None = None) -> CalibrationResult:
    """Bisect the oracle's position noise until single-shot mean IoU is within ``tolerance`` of target."""
    if not 0 < target_iou <= 1:
        raise CalibrationError("target_iou must be in (0, 1]")
    base = base or OracleParams()
    lo, hi = bounds
    evals = 0

    def f(sigma):
        nonlocal evals
        evals += 1
        return single_shot_mean(scenes, mode, replace(base, sigma_pos=sigma), reward)

    f_lo = f(lo)
    if abs(f_lo - target_iou) <= tolerance:
        return CalibrationResult(lo, f_lo, evals)
    if target_iou > f_lo:
        raise CalibrationError(f"target {target_iou} unreachable: sigma={lo:g} already gives {f_lo:.4f}")
    f_hi = f(hi)
    if abs(f_hi - target_iou) <= tolerance:
        return CalibrationResult(hi, f_hi, evals)
    if target_iou < f_hi:
        raise CalibrationError(f"target {target_iou} unreachable: sigma={hi:g} still gives {f_hi:.4f}")
    while evals < max_evals:
        mid = 0.5 * (lo + hi)
        f_mid = f(mid)
        if abs(f_mid - target_iou) <= tolerance:
            return CalibrationResult(mid, f_mid, evals)
        if f_mid > target_iou:
            lo = mid
        else:
            hi = mid
    raise CalibrationError(f"no sigma within {max_evals} evaluations reached {target_iou}±{tolerance}")


# --------------------------------------------------------------------------
# Ablations

ABLATION_COLUMNS = ("Setting Number", "Description", "ICL (k)", "Loop", "Threshold", "Temp.", "IoU (final)",
                    "Replications")


@dataclass(frozen=True)
class AblationCell:
    setting: int
    description: str
    k: int = 15
    loops: int | None = 6
    tau: float | None = 0.9
    temperature: float = 0.0
    local_search: bool = True

    def loop_config(self, seed: int) -> LoopConfig:
        if self.loops is None:
            return LoopConfig.single_shot(k=self.k, temperature=self.temperature, seed=seed)
        return LoopConfig(T=self.loops, tau=self.tau if self.tau is not None else 0.9, k=self.k,
                          temperature=self.temperature, local_search_enabled=self.local_search, seed=seed)


def _describe(k: int, loops: int | None, temperature: float) -> str:
    parts = ["VLM"]
    if k:
        parts.append("ICL")
    if loops is not None:
        parts.append("Loop")
    if temperature:
        parts.append("temp")
    return " + ".join(parts) if len(parts) > 1 else "VLM only"


@dataclass
class AblationGrid:
    scenes: list[SceneAnnotation]
    cells: list[AblationCell]
    mode: Mode = Mode.POS
    oracle: OracleParams = field(default_factory=OracleParams)
    reward: RewardParams = field(default_factory=RewardParams)
    replications: int = 1
    seed: int = 0
    workers: int = 1
    exemplar_pool: list[SceneAnnotation] | None = None

    @staticmethod
    def cells_from_axes(k: Sequence[int] = (15,), T: Sequence[int] = (6,), tau: Sequence[float] = (0.9,),
                        temperature: Sequence[float] = (0.0,), icl: Sequence[bool] = (True,),
                        loop: Sequence[bool] = (True,), local_search: Sequence[bool] = (True,)) -> list[AblationCell]:
        """Cartesian product of the axes, numbered in enumeration order; duplicates dropped."""
        cells, seen = [], set()
        for use_loop, use_icl, kk, tt, ta, temp, ls in itertools.product(loop, icl, k, T, tau, temperature,
                                                                         local_search):
            key = (kk if use_icl else 0, tt if use_loop else None, ta if use_loop else None, temp,
                   ls if use_loop else False)
            if key in seen:
                continue
            seen.add(key)
            cells.append(AblationCell(len(cells) + 1, _describe(key[0], key[1], temp), *key))
        return cells


def component_cells() -> list[AblationCell]:
    return [
        AblationCell(1, "VLM + ICL + Loop", 15, 6, 0.9, 0.0),
        AblationCell(2, "VLM + Loop", 0, 6, 0.9, 0.0),
        AblationCell(3, "VLM + ICL + Loop", 20, 6, 0.9, 0.0),
        AblationCell(4, "VLM + ICL", 15, None, None, 0.0),
        AblationCell(5, "VLM + ICL + temp", 15, None, None, 0.5),
        AblationCell(6, "VLM only", 0, None, None, 0.0),
    ]


def budget_threshold_cells() -> list[AblationCell]:
    rows = [(1, 6, 0.9), (7, 4, 0.9), (8, 2, 0.9), (9, 6, 0.5), (10, 4, 0.5), (11, 2, 0.5), (12, 6, 0.8),
            (13, 6, 0.7), (14, 6, 0.6), (15, 8, 0.9), (16, 10, 0.9), (17, 12, 0.9)]
    return [AblationCell(n, "ICL + Loop", 15, T, tau, 0.0) for n, T, tau in rows]


def exemplar_count_cells() -> list[AblationCell]:
    return [AblationCell(i + 1, "ICL + Loop", k, 8, 0.9, 0.0) for i, k in enumerate((15, 20, 25))]


PRESETS = {"components": component_cells, "budget-threshold": budget_threshold_cells, "exemplar-count": exemplar_count_cells}


@dataclass
class AblationRow:
    cell: AblationCell
    iou: float | None
    ci95: float | None
    replications: int
    error: str | None = None

    def as_columns(self) -> list[str]:
        c = self.cell
        na = "n/a"
        return [
            str(c.setting),
            c.description,
            str(c.k) if c.k else na,
            str(c.loops) if c.loops is not None else na,
            f"{c.tau:g}" if c.loops is not None and c.tau is not None else na,
            f"{c.temperature:g}",
            f"{self.iou:.4f}" if self.iou is not None else f"FAILED: {self.error}",
            str(self.replications),
        ]


def run_ablation(grid: AblationGrid) -> list[AblationRow]:
    """Run every cell on the same scenes and the same noise streams (paired comparison)."""
    if not grid.scenes:
        raise ConfigError("ablation needs at least one scene")
    lookup = {s.scene_id: s for s in grid.scenes}
    pool = grid.exemplar_pool if grid.exemplar_pool is not None else grid.scenes
    items = [(s.scene_id, s, None) for s in grid.scenes]
    rows = []
    for cell in sorted(grid.cells, key=lambda c: c.setting):
        try:
            means = []
            for r in range(grid.replications):
                seed = grid.seed + r
                backend = NoisyOracleBackend(lookup, replace(grid.oracle, seed=seed))
                outs = evaluate_scenes(items, grid.mode, backend, pool, cell.loop_config(seed), grid.reward,
                                       grid.workers)
                errors = [o.record.error for o in outs if o.record.status == "error"]
                if errors:
                    raise RuntimeError(errors[0])
                vals = [o.record.iou for o in outs if o.record.scored]
                means.append(math.fsum(vals) / len(vals))
            m, ci = mean_ci(means)
            rows.append(AblationRow(cell, m, ci, grid.replications))
        except Exception as exc:
            logger.warning("ablation setting %d failed: %s", cell.setting, exc)
            rows.append(AblationRow(cell, None, None, grid.replications, str(exc)))
    return rows


def ablation_csv(rows: Sequence[AblationRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_COLUMNS)
    for row in rows:
        w.writerow(row.as_columns())
    return buf.getvalue()


def read_ablation_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def text_table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(str(h)), *(len(str(r[i])) for r in rows)) if rows else len(str(h))
              for i, h in enumerate(header)]
    def line(cells):
        return "  ".join(str(c).ljust(w) for c, w in zip(cells, widths)).rstrip()
    out = [line(header), line("-" * w for w in widths)]
    out.extend(line(r) for r in rows)
    return "\n".join(out) + "\n"


# --------------------------------------------------------------------------
# Reports over runs

SINGLE_COLUMNS = (("pos", "Pos IoU"), ("angle", "Angle IoU"), ("size", "Size IoU"), ("all", "All IoU"))
TWO_COLUMNS = (("two-pos", "Pos IoU"), ("two-angle", "Angle IoU"), ("two-pos-angle", "All IoU"))


@dataclass
class ModelTable:
    title: str
    columns: list[str]
    rows: dict[str, dict[str, tuple[float, float, int]]]

    def header(self) -> list[str]:
        return ["Model"] + [label for _, label in self._cols]

    @property
    def _cols(self):
        return SINGLE_COLUMNS if self.title == "single" else TWO_COLUMNS

    def cells(self) -> list[list[str]]:
        out = []
        for model in sorted(self.rows):
            row = [model]
            for mode, _ in self._cols:
                v = self.rows[model].get(mode)
                row.append(f"{v[0]:.3f} ± {v[1]:.3f}" if v else "-")
            out.append(row)
        return out


def collect_runs(run_dirs: Sequence) -> list[tuple[str, MetricRecord]]:
    from .metrics import read_jsonl

    out = []
    for d in run_dirs:
        d = Path(d)
        metrics = d / "metrics.jsonl"
        if not metrics.exists():
            raise ConfigError(f"no metrics.jsonl in {d}")
        model = d.name
        manifest = d / "run_manifest.json"
        if manifest.exists():
            model = json.loads(manifest.read_text(encoding="utf-8")).get("model", model)
        out.extend((model, r) for r in read_jsonl(metrics))
    return out


def model_tables(labelled: Sequence[tuple[str, MetricRecord]]) -> tuple[ModelTable, ModelTable]:
    """Models x modes mean IoU tables for the single-piece and two-piece splits."""
    groups: dict[tuple[str, str], list[MetricRecord]] = {}
    for model, rec in labelled:
        if rec.scored:
            groups.setdefault((model, rec.mode), []).append(rec)
    single = ModelTable("single", [m for m, _ in SINGLE_COLUMNS], {})
    two = ModelTable("two-piece", [m for m, _ in TWO_COLUMNS], {})
    for (model, mode), recs in sorted(groups.items()):
        agg = aggregate(recs)
        table = two if Mode(mode).piece_count == 2 else single
        table.rows.setdefault(model, {})[mode] = (agg.mean["iou"], agg.ci95["iou"], agg.n)
    return single, two


def table_csv(table: ModelTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    modes = [m for m, _ in table._cols]
    w.writerow(["model"] + [f"{m}_iou" for m in modes] + [f"{m}_ci95" for m in modes] + [f"{m}_n" for m in modes])
    for model in sorted(table.rows):
        vals = [table.rows[model].get(m) for m in modes]
        w.writerow([model]
                   + [f"{v[0]:.6f}" if v else "" for v in vals]
                   + [f"{v[1]:.6f}" if v else "" for v in vals]
                   + [str(v[2]) if v else "" for v in vals])
    return buf.getvalue()


def write_report(run_dirs: Sequence, out_dir, figures: bool = True) -> list[Path]:
    """Per-model summary tables (text + CSV) and optional bar charts for a set of runs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    single, two = model_tables(collect_runs(run_dirs))
    written = []
    for name, table in (("single", single), ("two_piece", two)):
        if not table.rows:
            continue
        txt = out_dir / f"table_{name}.txt"
        atomic_write_text(txt, text_table(table.header(), table.cells()))
        csv_path = out_dir / f"table_{name}.csv"
        atomic_write_text(csv_path, table_csv(table))
        written += [txt, csv_path]
        if figures:
            from .plotting import model_iou_figure

            fig = out_dir / f"table_{name}.png"
            model_iou_figure(table, fig)
            written.append(fig)
    return written


def write_ablation(rows: Sequence[AblationRow], out_dir, figures: bool = True) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "ablation.csv"
    atomic_write_text(csv_path, ablation_csv(rows))
    txt = out_dir / "ablation.txt"
    atomic_write_text(txt, text_table(ABLATION_COLUMNS, [r.as_columns() for r in rows]))
    written = [csv_path, txt]
    if figures:
        from .plotting import ablation_figure

        fig = out_dir / "ablation.png"
        ablation_figure(read_ablation_csv(csv_path), fig)
        written.append(fig)
    return written

"""Command-line entry point: ``tangrambench <subcommand> [flags]``.

Exit status is 0 on success, 1 on a configuration error and 2 when a run
finished but some scenes failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import yaml

from . import __version__
from .dataset import (
    DatasetError,
    Mode,
    Split,
    generate_synthetic,
    import_svg,
    load_annotation,
    write_dataset,
)
from .geometry import DEFAULT_RESOLUTION, MAX_DILATION, PieceType, template_of, union_iou
from .harness import (
    PRESETS,
    AblationGrid,
    CalibrationError,
    ConfigError,
    RunConfig,
    calibrate_oracle,
    run_ablation,
    run_eval,
    write_ablation,
    write_report,
)
from .proposal import BackendConfig, OracleParams
from .refine import LoopConfig, RewardParams

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL = 0, 1, 2

log = logging.getLogger("tangrambench")


class _Parser(argparse.ArgumentParser):
    """argparse variant whose usage errors map to the config-error exit status."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _pieces(text: str) -> list[str]:
    if text in ("all", ""):
        return [t.value for t in PieceType]
    out = []
    for t in text.split(","):
        try:
            out.append(PieceType(t.strip().replace("_", "-")).value)
        except ValueError:
            raise argparse.ArgumentTypeError(
                f"unknown piece type {t!r}; choose from {', '.join(p.value for p in PieceType)}") from None
    return out


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML or JSON file whose keys provide defaults for these flags")
    p.add_argument("--seed", type=int, default=0, help="master seed for sampling, exemplars and oracle noise")
    p.add_argument("--resolution", type=int, default=DEFAULT_RESOLUTION, help="raster side in pixels (>= 64)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _add_source(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("scene source (either --gt-dir or --synthetic)")
    g.add_argument("--gt-dir", help="directory of annotation JSONs")
    g.add_argument("--synthetic", type=int, metavar="N", help="generate N synthetic scenes instead")
    g.add_argument("--split", choices=[s.value for s in Split], default="single", help="synthetic split")
    g.add_argument("--piece-filter", type=_pieces, default=_pieces("all"),
                   help="comma-separated piece types for synthetic scenes, or 'all'")
    g.add_argument("--scene-seed", type=int, default=None, help="seed for synthetic scenes (default: --seed)")


def _add_model(p: argparse.ArgumentParser, loop_defaults: bool) -> None:
    g = p.add_argument_group("proposal backend")
    g.add_argument("--backend", choices=["remote", "oracle", "replay"], default="oracle",
                   help="remote VLM endpoint, noisy oracle simulator, or recorded trace")
    g.add_argument("--endpoint", help="chat-completions URL for --backend remote")
    g.add_argument("--model", help="model name sent to the remote endpoint (also the report label)")
    g.add_argument("--api-key-env", default="TANGRAM_API_KEY", help="env var holding the API key")
    g.add_argument("--timeout", type=float, default=60.0, help="remote request timeout in seconds")
    g.add_argument("--max-retries", type=int, default=3, help="remote retries on 429/5xx/transport errors")
    g.add_argument("--rate-limit", type=int, default=4, help="max concurrent remote requests")
    g.add_argument("--min-interval", type=float, default=0.0, help="minimum seconds between remote requests")
    g.add_argument("--trace", help="JSONL trace of recorded responses for --backend replay")
    g.add_argument("--sigma-pos", type=float, default=0.0, help="oracle position noise (canvas units)")
    g.add_argument("--sigma-angle", type=float, default=0.0, help="oracle angle noise (degrees)")
    g.add_argument("--sigma-size", type=float, default=0.0, help="oracle log-size noise")
    g.add_argument("--gamma", type=float, default=0.5, help="oracle per-iteration position noise contraction")

    g = p.add_argument_group("prompting and refinement")
    g.add_argument("--k", type=int, default=15 if loop_defaults else 0, help="in-context exemplars")
    g.add_argument("--loops", type=int, default=6 if loop_defaults else 1, help="max proposal iterations T")
    g.add_argument("--tau", type=float, default=0.9 if loop_defaults else 1.0, help="early-stop IoU threshold")
    g.add_argument("--lambda", dest="lam", type=float, default=0.1, help="position penalty weight in the reward")
    g.add_argument("--temperature", type=float, default=0.0, help="sampling temperature")
    g.add_argument("--no-local-search", action="store_true", help="skip the positional hill-climb after the loop")
    g.add_argument("--dilation", type=int, choices=range(MAX_DILATION + 1), default=1,
                   help="mask dilation radius in pixels before IoU")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tangrambench", description="Continuous-pose tangram benchmark and refinement loop.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="write synthetic scenes or import SVG drawings")
    _add_common(p)
    p.add_argument("--out-dir", required=True, help="dataset root; images/ and gt/ are created inside")
    p.add_argument("--count", type=int, default=100, help="number of synthetic scenes")
    p.add_argument("--split", choices=[s.value for s in Split], default="single", help="one or two pieces")
    p.add_argument("--piece-filter", type=_pieces, default=_pieces("all"),
                   help="comma-separated piece types, or 'all'")
    p.add_argument("--in-dir", help="import every *.svg in this directory instead of generating")
    p.add_argument("--verify-outline", metavar="DIR",
                   help="with --in-dir: compare each import against DIR/<stem>.json and log union IoU")

    for name, loop in (("eval", False), ("refine", True)):
        p = sub.add_parser(name, help="single-shot evaluation" if not loop else "evaluation with the refinement loop")
        _add_common(p)
        p.add_argument("--in-dir", required=True, help="directory of scene PNGs")
        p.add_argument("--gt-dir", required=True, help="directory of annotation JSONs paired by file stem")
        p.add_argument("--out-dir", required=True, help="output directory")
        p.add_argument("--mode", choices=[m.value for m in Mode], default="pos", help="which pose fields to predict")
        p.add_argument("--workers", type=int, default=None,
                       help="parallel scenes (default: CPU count, or --rate-limit for remote)")
        _add_model(p, loop)

    p = sub.add_parser("ablate", help="run a grid of settings with paired seeds")
    _add_common(p)
    _add_source(p)
    p.add_argument("--out-dir", required=True, help="where ablation.csv/.txt/.png go")
    p.add_argument("--mode", choices=[m.value for m in Mode], default="pos", help="task mode")
    p.add_argument("--preset", choices=sorted(PRESETS), help="predefined grid of ablation settings")
    p.add_argument("--grid", help="YAML/JSON with axes: k, T, tau, temperature, icl, loop, local_search")
    p.add_argument("--replications", type=int, default=1, help="oracle seeds per cell")
    p.add_argument("--calibrate-to", type=float, metavar="IOU",
                   help="first calibrate sigma-pos to this single-shot mean IoU")
    p.add_argument("--workers", type=int, default=None, help="parallel scenes")
    p.add_argument("--no-figures", action="store_true", help="skip the PNG chart")
    _add_model(p, True)

    p = sub.add_parser("calibrate", help="find the oracle noise that gives a target single-shot IoU")
    _add_common(p)
    _add_source(p)
    p.add_argument("--mode", choices=[m.value for m in Mode], default="pos", help="task mode")
    p.add_argument("--target", type=float, required=True, help="target single-shot mean IoU")
    p.add_argument("--tolerance", type=float, default=0.03, help="accepted distance from target")
    p.add_argument("--sigma-min", type=float, default=0.0, help="lower sigma bound")
    p.add_argument("--sigma-max", type=float, default=5.0, help="upper sigma bound")
    p.add_argument("--dilation", type=int, choices=range(MAX_DILATION + 1), default=1, help="mask dilation")

    p = sub.add_parser("report", help="tables and charts from finished runs")
    p.add_argument("runs", nargs="*", help="run directories containing metrics.jsonl")
    p.add_argument("--out-dir", required=True, help="where tables and figures go")
    p.add_argument("--ablation", help="an ablation.csv to render as table and chart")
    p.add_argument("--no-figures", action="store_true", help="text and CSV only")
    p.add_argument("--config", help="YAML or JSON defaults")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = sub.add_parser("dump-templates", help="print canonical piece templates as JSON")
    p.add_argument("--out", help="write to this file instead of stdout")
    p.add_argument("--config", help="YAML or JSON defaults")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return parser


def _load_config(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    data = yaml.safe_load(text) if not str(path).endswith(".json") else json.loads(text)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a mapping")
    return {k.replace("-", "_"): v for k, v in data.items()}


def parse_args(argv):
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config:
        cfg = _load_config(known.config)
        if "lambda" in cfg:
            cfg["lam"] = cfg.pop("lambda")
        choices = parser._subparsers._group_actions[0].choices
        command = next((t for t in argv if t in choices), None)
        if command is not None:
            actions = {a.dest: a for a in choices[command]._actions}
            unknown = set(cfg) - set(actions)
            if unknown:
                raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
            for key, value in cfg.items():
                # config values count as supplied, so required flags may come from the file
                actions[key].required = False
                actions[key].default = value
    return parser.parse_args(argv)


def _backend_config(a) -> BackendConfig:
    oracle = OracleParams(sigma_pos=a.sigma_pos, sigma_angle=a.sigma_angle, sigma_size=a.sigma_size,
                          gamma=a.gamma, seed=a.seed)
    return BackendConfig(kind=a.backend, endpoint_url=a.endpoint, model_name=a.model, api_key_env=a.api_key_env,
                         timeout=a.timeout, max_retries=a.max_retries, max_concurrent=a.rate_limit,
                         min_interval=a.min_interval, oracle=oracle, trace_path=a.trace)


def _loop_config(a) -> LoopConfig:
    if a.command == "eval" and a.loops == 1:
        return LoopConfig.single_shot(k=a.k, temperature=a.temperature, seed=a.seed)
    return LoopConfig(T=a.loops, tau=a.tau, k=a.k, temperature=a.temperature,
                      local_search_enabled=not a.no_local_search, seed=a.seed)


def _workers(a, backend: BackendConfig) -> int:
    if a.workers is not None:
        return a.workers
    if backend.kind == "remote":
        return backend.max_concurrent
    return os.cpu_count() or 1


def _scenes(a):
    if a.gt_dir and a.synthetic:
        raise ConfigError("give either --gt-dir or --synthetic, not both")
    if a.gt_dir:
        root = Path(a.gt_dir)
        if not root.is_dir():
            raise ConfigError(f"ground-truth directory not found: {root}")
        scenes = [load_annotation(p) for p in sorted(root.glob("*.json"))]
        if not scenes:
            raise ConfigError(f"no annotations in {root}")
        return scenes
    if a.synthetic:
        seed = a.seed if a.scene_seed is None else a.scene_seed
        return generate_synthetic(a.synthetic, a.split, a.piece_filter, seed=seed)
    raise ConfigError("a scene source is required: --gt-dir or --synthetic")


def cmd_generate(a) -> int:
    out = Path(a.out_dir)
    if a.in_dir:
        src = Path(a.in_dir)
        if not src.is_dir():
            raise ConfigError(f"SVG directory not found: {src}")
        failures = 0
        checks = []
        for svg in sorted(src.glob("*.svg")):
            try:
                scene = import_svg(svg.read_text(encoding="utf-8"), svg.stem, source=str(svg.name))
            except DatasetError as exc:
                log.error("%s: %s", svg.name, exc)
                failures += 1
                continue
            write_dataset([scene], out, a.resolution)
            if a.verify_outline:
                ref_path = Path(a.verify_outline) / f"{svg.stem}.json"
                if ref_path.exists():
                    ref = load_annotation(ref_path)
                    ok = len(ref.pieces) == len(scene.pieces)
                    iou = union_iou(list(scene.pieces), list(ref.pieces), 0, a.resolution) if ok else None
                    checks.append({"scene_id": svg.stem, "union_iou": iou})
                    log.info("%s: outline IoU %s", svg.stem, iou)
        if a.verify_outline:
            out.mkdir(parents=True, exist_ok=True)
            (out / "outline_check.jsonl").write_text("".join(json.dumps(c) + "\n" for c in checks), encoding="utf-8")
        return EXIT_PARTIAL if failures else EXIT_OK
    if a.count < 1:
        raise ConfigError("--count must be >= 1")
    scenes = generate_synthetic(a.count, a.split, a.piece_filter, seed=a.seed)
    write_dataset(scenes, out, a.resolution)
    print(f"wrote {len(scenes)} scenes to {out}")
    return EXIT_OK


def cmd_eval(a) -> int:
    backend = _backend_config(a)
    cfg = RunConfig(a.in_dir, a.gt_dir, a.out_dir, Mode(a.mode), backend, _loop_config(a),
                    RewardParams(lam=a.lam, dilation_px=a.dilation, resolution=a.resolution),
                    seed=a.seed, workers=_workers(a, backend))
    summary = run_eval(cfg)
    for agg in summary.aggregates:
        key = " ".join(f"{k}={v}" for k, v in agg.key.items())
        print(f"{key} n={agg.n} iou={agg.mean.get('iou', float('nan')):.4f}"
              f"±{agg.ci95.get('iou', float('nan')):.4f} parse_failures={agg.parse_failures}")
    if summary.failures:
        log.error("%d scene(s) failed; see metrics.jsonl", summary.failures)
    return summary.exit_code


def _grid_cells(a):
    if a.preset and a.grid:
        raise ConfigError("give either --preset or --grid")
    if a.preset:
        return PRESETS[a.preset]()
    if a.grid:
        axes = _load_config(a.grid)
        allowed = {"k", "T", "tau", "temperature", "icl", "loop", "local_search"}
        bad = set(axes) - allowed
        if bad:
            raise ConfigError(f"unknown grid axes: {', '.join(sorted(bad))}")
        axes = {k: v if isinstance(v, list) else [v] for k, v in axes.items()}
        return AblationGrid.cells_from_axes(**axes)
    return AblationGrid.cells_from_axes(k=[a.k], T=[a.loops], tau=[a.tau], temperature=[a.temperature],
                                        local_search=[not a.no_local_search])


def cmd_ablate(a) -> int:
    if a.backend != "oracle":
        raise ConfigError("ablation sweeps run on the oracle simulator")
    scenes = _scenes(a)
    reward = RewardParams(lam=a.lam, dilation_px=a.dilation, resolution=a.resolution)
    oracle = OracleParams(sigma_pos=a.sigma_pos, sigma_angle=a.sigma_angle, sigma_size=a.sigma_size,
                          gamma=a.gamma, seed=a.seed)
    if a.calibrate_to is not None:
        cal = calibrate_oracle(scenes, a.calibrate_to, mode=a.mode, base=oracle, reward=reward)
        print(f"calibrated sigma_pos={cal.sigma_pos:.6f} single-shot iou={cal.achieved:.4f}")
        oracle = OracleParams(**{**asdict(oracle), "sigma_pos": cal.sigma_pos})
    grid = AblationGrid(scenes, _grid_cells(a), Mode(a.mode), oracle, reward, a.replications, a.seed,
                        a.workers or (os.cpu_count() or 1))
    rows = run_ablation(grid)
    paths = write_ablation(rows, a.out_dir, figures=not a.no_figures)
    print(Path(paths[1]).read_text(encoding="utf-8"), end="")
    return EXIT_PARTIAL if any(r.error for r in rows) else EXIT_OK


def cmd_calibrate(a) -> int:
    scenes = _scenes(a)
    try:
        res = calibrate_oracle(scenes, a.target, a.tolerance, mode=a.mode,
                               base=OracleParams(seed=a.seed), bounds=(a.sigma_min, a.sigma_max),
                               reward=RewardParams(dilation_px=a.dilation, resolution=a.resolution))
    except CalibrationError as exc:
        raise ConfigError(str(exc)) from None
    print(json.dumps({"sigma_pos": res.sigma_pos, "achieved_iou": res.achieved, "evaluations": res.evaluations}))
    return EXIT_OK


def cmd_report(a) -> int:
    if not a.runs and not a.ablation:
        raise ConfigError("nothing to report: give run directories and/or --ablation")
    written = []
    if a.runs:
        written += write_report(a.runs, a.out_dir, figures=not a.no_figures)
    if a.ablation:
        from .harness import read_ablation_csv, text_table, ABLATION_COLUMNS

        if not Path(a.ablation).exists():
            raise ConfigError(f"ablation CSV not found: {a.ablation}")
        rows = read_ablation_csv(a.ablation)
        out = Path(a.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        txt = out / "ablation.txt"
        txt.write_text(text_table(ABLATION_COLUMNS, [[r[c] for c in ABLATION_COLUMNS] for r in rows]),
                       encoding="utf-8")
        written.append(txt)
        if not a.no_figures:
            from .plotting import ablation_figure

            written.append(ablation_figure(rows, out / "ablation.png"))
    for p in written:
        print(p)
    return EXIT_OK


def cmd_dump_templates(a) -> int:
    data = {}
    for t in PieceType:
        tpl = template_of(t)
        data[t.value] = {
            "vertices": tpl.vertices.tolist(),
            "area": tpl.area,
            "chiral": t.chiral,
            "symmetry_period": t.symmetry_period,
        }
    text = json.dumps(data, indent=2) + "\n"
    if a.out:
        Path(a.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "eval": cmd_eval,
    "refine": cmd_eval,
    "ablate": cmd_ablate,
    "calibrate": cmd_calibrate,
    "report": cmd_report,
    "dump-templates": cmd_dump_templates,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except ConfigError as exc:
        print(f"tangrambench: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"tangrambench: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

"""Proposal generators: prompt assembly, response parsing and the pluggable backends.

A backend turns a :class:`PromptBundle` into a :class:`ProposalResponse`.
Three are provided: a chat-completion HTTP client for real VLMs, a seeded
noisy oracle that perturbs ground truth, and a replay of a recorded trace.
"""

from __future__ import annotations

import base64
import json
import logging
import math
import os
import random
import threading
import time
import zlib
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .dataset import Mode, SceneAnnotation, TaskSpec, make_task, render_scene, target_values
from .geometry import CANVAS_SIDE

logger = logging.getLogger(__name__)

PROMPT_VERSION = "tangram-prompt-v1"
HINT_TEMPLATE = "previous IoU={iou:.2f}. Try a small correction (Δx, Δy)."

_FIELD_HELP = {
    "pos": '"pos": [x, y] (centroid, canvas units)',
    "angle": '"angle": degrees in [0, 360)',
    "size": '"size": positive multiplier of the canonical piece',
}


class BackendError(RuntimeError):
    pass


class ReplayExhausted(BackendError):
    pass


# --------------------------------------------------------------------------
# Prompts


def _fmt(v) -> str:
    return f"{v:.2f}"


def answer_object(values: Sequence[dict], mode: Mode, decimals: int | None = None) -> dict:
    """JSON answer shape for a mode: flat for one piece, ``{"pieces": [...]}`` for two."""
    def num(v):
        v = float(v)
        return v if decimals is None else round(v, decimals)

    pieces = []
    for d in values:
        out = {}
        for name in mode.targets:
            v = d[name]
            out[name] = [num(v[0]), num(v[1])] if name == "pos" else num(v)
        pieces.append(out)
    return pieces[0] if mode.piece_count == 1 else {"pieces": pieces}


def format_answer(values: Sequence[dict], mode: Mode) -> str:
    """Answer JSON at two-decimal precision, the form used for exemplars."""
    return json.dumps(answer_object(values, mode, decimals=2))


def system_text(mode: Mode) -> str:
    fields = ", ".join(_FIELD_HELP[f] for f in mode.targets)
    if mode.piece_count == 1:
        shape = "{" + ", ".join(f'"{f}": ...' for f in mode.targets) + "}"
    else:
        inner = "{" + ", ".join(f'"{f}": ...' for f in mode.targets) + "}"
        shape = '{"pieces": [' + inner + ", " + inner + "]}"
    return (
        "You see a black silhouette of Tangram piece(s) on a white square canvas. "
        f"The canvas frame is [0,{CANVAS_SIDE:g}] x [0,{CANVAS_SIDE:g}] with (0,0) at the top-left corner, "
        "x increasing to the right and y increasing downward. "
        "A piece is its canonical template scaled by size, rotated by angle degrees "
        "(positive turns +x toward +y), and moved so its centroid sits at pos. "
        f"Predict only these fields: {fields}. "
        f"Reply with a minimal JSON object of the form {shape} and nothing else."
    )


def task_text(task: TaskSpec) -> str:
    lines = []
    for i, fixed in enumerate(task.fixed_fields, 1):
        known = [f"type={fixed['type'].value}", f"flip={'true' if fixed['flip'] else 'false'}"]
        if "pos" in fixed:
            known.append(f"pos=[{_fmt(fixed['pos'][0])}, {_fmt(fixed['pos'][1])}]")
        for name in ("angle", "size"):
            if name in fixed:
                known.append(f"{name}={_fmt(fixed[name])}")
        lines.append(f"Piece {i}: " + ", ".join(known) + ".")
    lines.append("Predict: " + ", ".join(task.target_fields) + ".")
    return "\n".join(lines)


@dataclass
class Exemplar:
    """One solved in-context example; the image is rendered only when requested."""

    scene: SceneAnnotation
    task: TaskSpec
    answer_text: str

    @property
    def scene_id(self) -> str:
        return self.scene.scene_id

    @property
    def image(self) -> bytes:
        return render_scene(self.scene)


@dataclass
class PromptBundle:
    scene_id: str
    iteration: int
    task: TaskSpec
    system_text: str
    user_text: str
    exemplars: list[Exemplar]
    target_image: bytes | None = None
    feedback_hint: str | None = None
    temperature: float = 0.0

    @property
    def mode(self) -> Mode:
        return self.task.mode

    @property
    def k(self) -> int:
        return len(self.exemplars)


def feedback_hint(prev_best_iou: float) -> str:
    return HINT_TEMPLATE.format(iou=prev_best_iou)


def sample_exemplars(pool: Sequence[SceneAnnotation], k: int, exclude: str, seed: int) -> list[SceneAnnotation]:
    candidates = [s for s in pool if s.scene_id != exclude]
    if k > len(candidates):
        raise ValueError(f"k={k} exceeds exemplar pool size {len(candidates)}")
    if k <= 0:
        return []
    rng = random.Random(f"{seed}:{exclude}")
    return rng.sample(candidates, k)


def build_prompt(
    task: TaskSpec,
    exemplar_pool: Sequence[SceneAnnotation],
    k: int,
    iteration: int = 1,
    prev_best_iou: float | None = None,
    seed: int = 0,
    temperature: float = 0.0,
    target_image: bytes | None = None,
) -> PromptBundle:
    """Assemble one query; a feedback hint is attached from the second iteration on."""
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    chosen = sample_exemplars(exemplar_pool, k, task.scene_id, seed)
    exemplars = []
    for scene in chosen:
        ex_task = make_task(scene, task.mode)
        exemplars.append(Exemplar(scene, ex_task, format_answer(target_values(scene, ex_task), task.mode)))
    hint = None
    if iteration >= 2 and prev_best_iou is not None:
        hint = feedback_hint(prev_best_iou)
    user = task_text(task)
    if hint:
        user = f"{user}\n{hint}"
    return PromptBundle(
        scene_id=task.scene_id,
        iteration=iteration,
        task=task,
        system_text=system_text(task.mode),
        user_text=user,
        exemplars=exemplars,
        target_image=target_image,
        feedback_hint=hint,
        temperature=temperature,
    )


# --------------------------------------------------------------------------
# Response parsing


@dataclass
class ProposalResponse:
    raw_text: str
    parsed: list[dict] | None = None
    parse_error: str | None = None
    error_kind: str | None = None
    clamped: bool = False

    def __post_init__(self):
        if (self.parsed is None) == (self.parse_error is None):
            raise ValueError("exactly one of parsed / parse_error must be set")

    @property
    def ok(self) -> bool:
        return self.parsed is not None


class _Invalid(Exception):
    def __init__(self, kind: str, msg: str):
        super().__init__(msg)
        self.kind = kind


_DECODER = json.JSONDecoder()


def _is_answer_like(v) -> bool:
    return isinstance(v, dict) or (isinstance(v, list) and bool(v) and all(isinstance(x, dict) for x in v))


def extract_json(text: str):
    """First balanced JSON value in ``text``, preferring objects over bare arrays.

    Surrounding prose and code fences are skipped.  Raises _Invalid when no
    value decodes.
    """
    first = None
    i = 0
    n = len(text)
    while i < n:
        j_obj = text.find("{", i)
        j_arr = text.find("[", i)
        starts = [j for j in (j_obj, j_arr) if j >= 0]
        if not starts:
            break
        j = min(starts)
        try:
            value, end = _DECODER.raw_decode(text, j)
        except (ValueError, RecursionError):
            i = j + 1
            continue
        if _is_answer_like(value):
            return value
        if first is None:
            first = (value,)
        i = end
    if first is not None:
        return first[0]
    raise _Invalid("no-json", "no JSON object found in response")


def _number(v, name: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise _Invalid("non-numeric", f"{name} is not numeric: {v!r}")
    f = float(v)
    if not math.isfinite(f):
        raise _Invalid("non-finite", f"{name} is not finite: {v!r}")
    return f


def _pieces_of(value, piece_count: int) -> list:
    if isinstance(value, dict) and "pieces" in value:
        value = value["pieces"]
    if isinstance(value, dict):
        pieces = [value]
    elif isinstance(value, list) and all(isinstance(p, dict) for p in value):
        pieces = value
    else:
        raise _Invalid("bad-structure", "expected a JSON object (or a list of piece objects)")
    if len(pieces) != piece_count:
        raise _Invalid("wrong-arity", f"expected {piece_count} piece(s), got {len(pieces)}")
    return pieces


def parse_response(raw_text, mode: Mode | str, piece_count: int | None = None) -> ProposalResponse:
    """Extract and validate the mode's target fields. Never raises."""
    if isinstance(raw_text, (bytes, bytearray)):
        raw_text = bytes(raw_text).decode("utf-8", errors="replace")
    raw_text = str(raw_text)
    try:
        mode = Mode(mode)
        count = piece_count if piece_count is not None else mode.piece_count
        pieces = _pieces_of(extract_json(raw_text), count)
        out = []
        clamped = False
        for idx, p in enumerate(pieces, 1):
            d = {}
            for name in mode.targets:
                key = name
                if name == "size" and "size" not in p and "scale" in p:
                    key = "scale"
                if key not in p:
                    raise _Invalid("missing-field", f"piece {idx}: missing {name!r}")
                v = p[key]
                if name == "pos":
                    if not isinstance(v, (list, tuple)) or len(v) != 2:
                        raise _Invalid("wrong-arity", f"piece {idx}: pos must be [x, y], got {v!r}")
                    x, y = (_number(c, "pos") for c in v)
                    cx = min(max(x, 0.0), CANVAS_SIDE)
                    cy = min(max(y, 0.0), CANVAS_SIDE)
                    if (cx, cy) != (x, y):
                        clamped = True
                        logger.debug("clamped pos %s -> %s", (x, y), (cx, cy))
                    d["pos"] = (cx, cy)
                elif name == "angle":
                    a = math.fmod(_number(v, "angle"), 360.0)
                    if a < 0:
                        a += 360.0
                    d["angle"] = 0.0 if a >= 360.0 else a
                else:
                    s = _number(v, "size")
                    if s <= 0:
                        raise _Invalid("invalid-size", f"piece {idx}: size must be > 0, got {s}")
                    d["size"] = s
            out.append(d)
        return ProposalResponse(raw_text, parsed=out, clamped=clamped)
    except _Invalid as exc:
        return ProposalResponse(raw_text, parse_error=str(exc), error_kind=exc.kind)
    except Exception as exc:  # parse_response is total by contract
        return ProposalResponse(raw_text, parse_error=f"unexpected: {exc!r}", error_kind="internal")


# --------------------------------------------------------------------------
# Backends


@dataclass
class OracleParams:
    """Noise model of the simulated proposer.

    The first, hint-free guess has its noise scaled by an in-context factor
    that saturates with k.  Once a feedback hint is present, position noise
    instead contracts by ``gamma`` per iteration from the raw level.
    Temperature inflates all noise.  These are simulator assumptions, not measured VLM traits.
    """

    sigma_pos: float = 0.0
    sigma_angle: float = 0.0
    sigma_size: float = 0.0
    bias_pos: tuple[float, float] = (0.0, 0.0)
    bias_angle: float = 0.0
    bias_size: float = 0.0
    gamma: float = 0.5
    icl_gain: float = 0.35
    icl_k0: float = 5.0
    temp_gain: float = 0.2
    seed: int = 0

    def __post_init__(self):
        for name in ("sigma_pos", "sigma_angle", "sigma_size"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must be in (0, 1]")

    def icl_factor(self, k: int) -> float:
        return 1.0 - self.icl_gain * (1.0 - math.exp(-k / self.icl_k0))

    def noise_scale(self, k: int, temperature: float) -> float:
        return self.icl_factor(k) * (1.0 + self.temp_gain * temperature)


def noise_rng(seed: int, scene_id: str, iteration: int) -> np.random.Generator:
    """Noise stream keyed by scene and iteration, independent of call order."""
    return np.random.default_rng([seed, zlib.crc32(scene_id.encode("utf-8")), iteration])


class NoisyOracleBackend:
    kind = "noisy-oracle"

    def __init__(self, scenes: Mapping[str, SceneAnnotation], params: OracleParams | None = None):
        self.scenes = dict(scenes)
        self.params = params or OracleParams()

    @property
    def identity(self) -> str:
        p = self.params
        return f"oracle(sigma_pos={p.sigma_pos:g},sigma_angle={p.sigma_angle:g},sigma_size={p.sigma_size:g},gamma={p.gamma:g})"

    def propose(self, bundle: PromptBundle) -> ProposalResponse:
        try:
            gt = self.scenes[bundle.scene_id]
        except KeyError:
            raise BackendError(f"oracle has no ground truth for {bundle.scene_id!r}") from None
        p = self.params
        rng = noise_rng(p.seed, bundle.scene_id, bundle.iteration)
        scale = p.noise_scale(bundle.k, bundle.temperature)
        if bundle.feedback_hint:
            # hinted corrections contract from the raw noise level; exemplars only shape the first guess
            pos_scale = (1.0 + p.temp_gain * bundle.temperature) * p.gamma ** (bundle.iteration - 1)
        else:
            pos_scale = scale
        values = []
        for piece in gt.pieces:
            # fixed draw order keeps the stream aligned across modes
            z = rng.standard_normal(4)
            d = {}
            if "pos" in bundle.task.target_fields:
                d["pos"] = [
                    piece.pos[0] + p.bias_pos[0] + p.sigma_pos * pos_scale * z[0],
                    piece.pos[1] + p.bias_pos[1] + p.sigma_pos * pos_scale * z[1],
                ]
            if "angle" in bundle.task.target_fields:
                d["angle"] = piece.angle + p.bias_angle + p.sigma_angle * scale * z[2]
            if "size" in bundle.task.target_fields:
                d["size"] = piece.size * (1.0 + p.bias_size) * math.exp(p.sigma_size * scale * z[3])
            values.append(d)
        raw = json.dumps(answer_object(values, bundle.mode))
        return parse_response(raw, bundle.mode, bundle.task.piece_count)


def read_trace(path) -> dict[tuple[str, int], str]:
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                out[(str(rec["scene_id"]), int(rec["iteration"]))] = rec["raw_text"]
    return out


def trace_line(scene_id: str, iteration: int, raw_text: str) -> str:
    return json.dumps({"scene_id": scene_id, "iteration": iteration, "raw_text": raw_text}, ensure_ascii=False)


class ReplayBackend:
    kind = "replay"

    def __init__(self, responses: Mapping[tuple[str, int], str] | None = None, path=None):
        if responses is None:
            if path is None:
                raise ValueError("replay needs responses or a trace path")
            responses = read_trace(path)
        self.responses = dict(responses)
        self.path = path

    @property
    def identity(self) -> str:
        return f"replay({self.path})" if self.path else "replay"

    def propose(self, bundle: PromptBundle) -> ProposalResponse:
        key = (bundle.scene_id, bundle.iteration)
        if key not in self.responses:
            raise ReplayExhausted(f"no recorded response for scene {key[0]!r} iteration {key[1]}")
        return parse_response(self.responses[key], bundle.mode, bundle.task.piece_count)


def _data_url(png: bytes) -> str:
    return "data:image/png;base64," + base64.b64encode(png).decode("ascii")


class RemoteBackend:
    """Chat-completion client with retries, a concurrency cap and request spacing."""

    kind = "remote"

    def __init__(
        self,
        endpoint_url: str,
        model_name: str,
        api_key_env: str = "TANGRAM_API_KEY",
        timeout: float = 60.0,
        max_retries: int = 3,
        backoff: float = 1.0,
        max_concurrent: int = 4,
        min_interval: float = 0.0,
        log_path=None,
        text_only_exemplars: bool = False,
        client=None,
        sleep=time.sleep,
    ):
        if not endpoint_url or not model_name:
            raise ValueError("remote backend requires endpoint_url and model_name")
        import httpx

        self._httpx = httpx
        self.endpoint_url = endpoint_url
        self.model_name = model_name
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff = backoff
        self.min_interval = min_interval
        self.log_path = log_path
        self.text_only_exemplars = text_only_exemplars
        self._client = client or httpx.Client(timeout=timeout)
        self._sleep = sleep
        self._slots = threading.BoundedSemaphore(max(1, max_concurrent))
        self._spacing = threading.Lock()
        self._last_request = 0.0
        self._log_lock = threading.Lock()

    @property
    def identity(self) -> str:
        return f"remote({self.model_name}@{self.endpoint_url})"

    def build_request(self, bundle: PromptBundle) -> dict:
        messages: list[dict] = [{"role": "system", "content": bundle.system_text}]
        for ex in bundle.exemplars:
            content: list[dict] = [{"type": "text", "text": task_text(ex.task)}]
            if not self.text_only_exemplars:
                content.append({"type": "image_url", "image_url": {"url": _data_url(ex.image)}})
            messages.append({"role": "user", "content": content})
            messages.append({"role": "assistant", "content": ex.answer_text})
        content = [{"type": "text", "text": bundle.user_text}]
        if bundle.target_image is not None:
            content.append({"type": "image_url", "image_url": {"url": _data_url(bundle.target_image)}})
        messages.append({"role": "user", "content": content})
        return {"model": self.model_name, "temperature": bundle.temperature, "messages": messages}

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _wait_turn(self) -> None:
        with self._spacing:
            now = time.monotonic()
            wait = self._last_request + self.min_interval - now
            if wait > 0:
                self._sleep(wait)
            self._last_request = time.monotonic()

    def _log(self, bundle: PromptBundle, request: dict, status, body: str) -> None:
        if not self.log_path:
            return
        line = json.dumps(
            {"scene_id": bundle.scene_id, "iteration": bundle.iteration, "request": request,
             "status": status, "response": body},
            ensure_ascii=False,
        )
        with self._log_lock:
            os.makedirs(os.path.dirname(os.path.abspath(self.log_path)), exist_ok=True)
            with open(self.log_path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")

    def propose(self, bundle: PromptBundle) -> ProposalResponse:
        request = self.build_request(bundle)
        delay = self.backoff
        last_error = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                self._sleep(delay)
                delay *= 2
            with self._slots:
                self._wait_turn()
                try:
                    resp = self._client.post(self.endpoint_url, json=request, headers=self._headers())
                except self._httpx.TransportError as exc:
                    last_error = f"transport error: {exc!r}"
                    self._log(bundle, request, None, last_error)
                    logger.warning("%s (attempt %d)", last_error, attempt + 1)
                    continue
            self._log(bundle, request, resp.status_code, resp.text)
            if resp.status_code == 429 or resp.status_code >= 500:
                last_error = f"HTTP {resp.status_code}"
                logger.warning("%s from %s (attempt %d)", last_error, self.endpoint_url, attempt + 1)
                continue
            if resp.status_code >= 400:
                raise BackendError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                text = resp.json()["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise BackendError(f"malformed chat-completion response: {exc!r}") from exc
            if isinstance(text, list):
                text = "".join(part.get("text", "") for part in text if isinstance(part, dict))
            return parse_response(text or "", bundle.mode, bundle.task.piece_count)
        raise BackendError(f"request failed after {self.max_retries + 1} attempts: {last_error}")


@dataclass
class BackendConfig:
    kind: str = "noisy-oracle"
    endpoint_url: str | None = None
    model_name: str | None = None
    api_key_env: str = "TANGRAM_API_KEY"
    timeout: float = 60.0
    max_retries: int = 3
    max_concurrent: int = 4
    min_interval: float = 0.0
    text_only_exemplars: bool = False
    oracle: OracleParams = field(default_factory=OracleParams)
    trace_path: str | None = None

    def __post_init__(self):
        aliases = {"oracle": "noisy-oracle"}
        self.kind = aliases.get(self.kind, self.kind)
        if self.kind not in ("remote", "noisy-oracle", "replay"):
            raise ValueError(f"unknown backend kind {self.kind!r}")
        if self.kind == "remote" and not (self.endpoint_url and self.model_name):
            raise ValueError("remote backend requires endpoint_url and model_name")
        if self.kind == "replay" and not self.trace_path:
            raise ValueError("replay backend requires trace_path")
        if isinstance(self.oracle, dict):
            self.oracle = OracleParams(**self.oracle)

    def label(self) -> str:
        if self.kind == "remote":
            return self.model_name or "remote"
        if self.kind == "replay":
            return "replay"
        return "oracle"


def make_backend(cfg: BackendConfig, scenes: Mapping[str, SceneAnnotation] | None = None, log_path=None):
    if cfg.kind == "remote":
        return RemoteBackend(
            cfg.endpoint_url, cfg.model_name, cfg.api_key_env, cfg.timeout, cfg.max_retries,
            max_concurrent=cfg.max_concurrent, min_interval=cfg.min_interval, log_path=log_path,
            text_only_exemplars=cfg.text_only_exemplars,
        )
    if cfg.kind == "replay":
        return ReplayBackend(path=cfg.trace_path)
    return NoisyOracleBackend(scenes or {}, cfg.oracle)


def propose(backend, bundle: PromptBundle) -> ProposalResponse:
    return backend.propose(bundle)

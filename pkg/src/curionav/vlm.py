"""Role-typed VLM interface: prompt construction, parsing, and backends.

Three roles drive the navigation loop.  Predict scores the six panorama
directions 0-10, Plan emits the next subtask plus a goal-detected flag,
and Reason picks one numbered action marker.  Prompt wording lives in
``prompts/*.txt``; builders here fill the templates and attach images,
parsers pull the structured answer back out of free-form text.

Two production backends are provided: a deterministic oracle that
answers from simulator ground truth (carried on ``PromptBundle.context``
and ignored by every other backend), and a generic HTTP chat-completion
client.  Recording and replay wrappers make HTTP runs reproducible.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import math
import os
import re
import threading
import time
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
import requests
from PIL import Image, ImageDraw

from .geometry import PANORAMA_VIEW_OFFSETS_DEG
from .simulator import (AgentBody, GEODESIC_RESOLUTION, goal_distance_field,
                        is_goal_visible)

ROLE_PREDICT = "predict"
ROLE_PLAN = "plan"
ROLE_REASON = "reason"

STAGE_EXPLORATION = "exploration"
STAGE_GOAL = "goal_approach"

VIEW_LABELS = tuple(str(int(d)) for d in PANORAMA_VIEW_OFFSETS_DEG)
NUM_VIEWS = len(VIEW_LABELS)
SCORE_MIN, SCORE_MAX = 0, 10


class ParseFailure(ValueError):
    """Raised when a VLM response does not contain the mandated answer."""


class BackendError(RuntimeError):
    """Backend returned a non-success result (carries ``status`` when HTTP)."""

    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


class BackendUnavailable(BackendError):
    """Network failure or timeout; the call never produced a response."""


@dataclass
class PromptBundle:
    """One VLM call: role, instruction text, exactly one attached image.

    ``context`` is a side channel of simulator ground truth consumed only
    by the oracle backend; HTTP and replay backends never read it.
    """

    role: str
    text: str
    images: list
    context: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.role not in (ROLE_PREDICT, ROLE_PLAN, ROLE_REASON):
            raise ValueError(f"unknown role {self.role!r}")
        if len(self.images) != 1:
            raise ValueError(f"{self.role} prompt must carry exactly one image, "
                             f"got {len(self.images)}")


@dataclass(frozen=True)
class Cost:
    """Feedback pair threaded between steps: last subtask + goal flag."""

    prev_subtask: str
    goal_flag: bool = False


def initial_cost(goal_category: str) -> Cost:
    return Cost(f"explore to find the {goal_category}", False)


@dataclass(frozen=True)
class ParsedPrediction:
    scores: tuple  # six ints, each clamped to [0, 10]

    def __post_init__(self):
        if len(self.scores) != NUM_VIEWS:
            raise ValueError("prediction needs six scores")


@dataclass(frozen=True)
class ParsedPlan:
    subtask: str
    goal_flag: bool
    explanation: str = ""

    def __post_init__(self):
        if not self.subtask:
            raise ValueError("subtask must be nonempty")


@dataclass(frozen=True)
class ParsedAction:
    index: int


# ---------------------------------------------------------------------------
# Prompt templates

_template_cache: dict[str, str] = {}


def _template(name: str) -> str:
    if name not in _template_cache:
        path = resources.files(__package__) / "prompts" / f"{name}.txt"
        _template_cache[name] = path.read_text()
    return _template_cache[name]


def build_predict_prompt(panorama, goal_category: str, legend: str = "",
                         context: dict | None = None) -> PromptBundle:
    """Score-six-directions prompt around a labeled panorama image."""
    if not goal_category:
        raise ValueError("goal category must be nonempty")
    text = _template("predict").format(goal=goal_category, legend=legend)
    return PromptBundle(ROLE_PREDICT, text, [panorama], context or {})


def build_plan_prompt(view, cost: Cost, goal_category: str,
                      selection_explanation: str = "", legend: str = "",
                      context: dict | None = None) -> PromptBundle:
    """Next-subtask + goal-detection prompt for the chosen view."""
    if not goal_category:
        raise ValueError("goal category must be nonempty")
    text = _template("plan").format(
        goal=goal_category,
        prev_subtask=cost.prev_subtask,
        explanation=selection_explanation or "first step, no selection yet",
        legend=legend)
    return PromptBundle(ROLE_PLAN, text, [view], context or {})


def build_reason_prompt(annotated_view, subtask: str, cost: Cost, stage: str,
                        goal_category: str = "goal", num_actions: int | None = None,
                        legend: str = "", context: dict | None = None) -> PromptBundle:
    """Pick-a-marker prompt; a raised goal flag forces the goal configuration."""
    if stage not in (STAGE_EXPLORATION, STAGE_GOAL):
        raise ValueError(f"unknown stage {stage!r}")
    if cost.goal_flag:
        stage = STAGE_GOAL
    choices = ""
    if num_actions is not None:
        choices = f" Valid marker numbers: 0 to {num_actions - 1}."
    name = "reason_goal" if stage == STAGE_GOAL else "reason_explore"
    text = _template(name).format(goal=goal_category, subtask=subtask,
                                  legend=legend, choices=choices)
    return PromptBundle(ROLE_REASON, text, [annotated_view], context or {})


# ---------------------------------------------------------------------------
# Response parsing

def parse_prediction(raw: str) -> ParsedPrediction:
    """Extract six direction scores; values clamp to [0, 10].

    Accepts label-keyed answers ("30: 7" per view label) or any text
    containing exactly six integers in panorama order.
    """
    labeled = []
    for label in VIEW_LABELS:
        m = re.search(rf"\b{label}\s*(?:deg|degrees)?\s*[:=]\s*(-?\d+)", raw)
        if m is None:
            break
        labeled.append(int(m.group(1)))
    if len(labeled) == NUM_VIEWS:
        return ParsedPrediction(tuple(_clamp_score(v) for v in labeled))
    ints = re.findall(r"-?\d+", raw)
    if len(ints) != NUM_VIEWS:
        raise ParseFailure(f"expected {NUM_VIEWS} scores, found {len(ints)} "
                           f"integers in response")
    return ParsedPrediction(tuple(_clamp_score(int(v)) for v in ints))


def _clamp_score(v: int) -> int:
    return max(SCORE_MIN, min(SCORE_MAX, v))


def format_prediction(scores) -> str:
    """Canonical label-keyed rendering; parse_prediction inverts it."""
    if len(scores) != NUM_VIEWS:
        raise ValueError("need six scores")
    return "\n".join(f"{label}: {int(s)}"
                     for label, s in zip(VIEW_LABELS, scores))


_TRUE_WORDS = {"yes", "true", "1", "y"}
_FALSE_WORDS = {"no", "false", "0", "n"}


def parse_plan(raw: str) -> ParsedPlan:
    """Extract subtask / goal flag / explanation from text or embedded JSON."""
    obj = _maybe_json(raw)
    if obj is not None:
        subtask = str(obj.get("subtask", "")).strip()
        flag = obj.get("goal_detected", obj.get("goal_flag"))
        if subtask and isinstance(flag, bool):
            return ParsedPlan(subtask, flag, str(obj.get("explanation", "")))
        if subtask and isinstance(flag, str):
            return ParsedPlan(subtask, _parse_bool(flag),
                              str(obj.get("explanation", "")))
    m_sub = re.search(r"subtask\s*[:=]\s*(.+)", raw, re.IGNORECASE)
    m_flag = re.search(r"goal[_ ]?(?:detected|flag)\s*[:=]\s*(\w+)", raw,
                       re.IGNORECASE)
    if m_sub is None or m_flag is None:
        raise ParseFailure("response missing subtask or goal_detected line")
    subtask = m_sub.group(1).strip()
    if not subtask:
        raise ParseFailure("empty subtask")
    m_expl = re.search(r"explanation\s*[:=]\s*(.+)", raw, re.IGNORECASE)
    return ParsedPlan(subtask, _parse_bool(m_flag.group(1)),
                      m_expl.group(1).strip() if m_expl else "")


def _parse_bool(word: str) -> bool:
    w = word.strip().lower()
    if w in _TRUE_WORDS:
        return True
    if w in _FALSE_WORDS:
        return False
    raise ParseFailure(f"not a yes/no answer: {word!r}")


def _maybe_json(raw: str):
    start, end = raw.find("{"), raw.rfind("}")
    if start < 0 or end <= start:
        return None
    try:
        obj = json.loads(raw[start:end + 1])
    except json.JSONDecodeError:
        return None
    return obj if isinstance(obj, dict) else None


def parse_action(raw: str, num_actions: int) -> ParsedAction:
    """Extract the chosen marker index; out-of-range is a ParseFailure."""
    m = re.search(r"choice\s*[:=]\s*(\d+)", raw, re.IGNORECASE)
    if m is not None:
        idx = int(m.group(1))
    else:
        ints = re.findall(r"-?\d+", raw)
        if len(ints) != 1:
            raise ParseFailure("no unambiguous marker number in response")
        idx = int(ints[0])
    if not 0 <= idx < num_actions:
        raise ParseFailure(f"marker {idx} outside 0..{num_actions - 1}")
    return ParsedAction(idx)


# ---------------------------------------------------------------------------
# Prompt imagery: flat-color semantic rendering, strip labels, markers

_COLOR_TABLE = (
    ("red", (220, 50, 47)),
    ("green", (40, 160, 60)),
    ("blue", (38, 110, 220)),
    ("yellow", (230, 200, 40)),
    ("magenta", (200, 60, 180)),
    ("cyan", (40, 190, 200)),
    ("orange", (235, 140, 30)),
    ("purple", (130, 80, 200)),
    ("brown", (150, 100, 60)),
    ("pink", (240, 150, 170)),
    ("olive", (120, 130, 40)),
    ("teal", (0, 130, 130)),
)
_BACKGROUND_RGB = (205, 205, 205)
_SKY_RGB = (245, 245, 245)


def semantic_to_rgb(semantic: np.ndarray, depth: np.ndarray | None = None) -> np.ndarray:
    """Flat-color image: gray structure, one fixed color per category id."""
    h, w = semantic.shape
    out = np.empty((h, w, 3), dtype=np.uint8)
    out[:] = _BACKGROUND_RGB
    if depth is not None:
        out[~np.isfinite(depth)] = _SKY_RGB
    for sid in np.unique(semantic):
        if sid <= 0:
            continue
        out[semantic == sid] = _COLOR_TABLE[(sid - 1) % len(_COLOR_TABLE)][1]
    return out


def color_legend(category_ids: dict[str, int]) -> str:
    """One-line color key for prompts, matching semantic_to_rgb."""
    parts = [f"{_COLOR_TABLE[(sid - 1) % len(_COLOR_TABLE)][0]} = {cat}"
             for cat, sid in sorted(category_ids.items(), key=lambda kv: kv[1])]
    if not parts:
        return "Colors: gray = floor and walls."
    return "Colors: gray = floor and walls; " + "; ".join(parts) + "."


def label_strip(image: np.ndarray, label: str) -> np.ndarray:
    """Stamp a text label into the top-left corner of a view image."""
    img = Image.fromarray(np.ascontiguousarray(image))
    draw = ImageDraw.Draw(img)
    w = 7 * len(label) + 8
    draw.rectangle([0, 0, w, 14], fill=(255, 255, 255))
    draw.text((4, 2), label, fill=(0, 0, 0))
    return np.asarray(img)


def compose_panorama(views: list, labels=VIEW_LABELS) -> np.ndarray:
    """Concatenate six labeled strips left to right with thin separators."""
    if len(views) != len(labels):
        raise ValueError("need one label per view")
    strips = [label_strip(v, lab) for v, lab in zip(views, labels)]
    h = strips[0].shape[0]
    sep = np.zeros((h, 2, 3), dtype=np.uint8)
    parts = []
    for i, s in enumerate(strips):
        if i:
            parts.append(sep)
        parts.append(s)
    return np.concatenate(parts, axis=1)


def annotate_markers(image: np.ndarray, pixels) -> np.ndarray:
    """Draw numbered circular markers at (u, v) pixel positions."""
    img = Image.fromarray(np.ascontiguousarray(image))
    draw = ImageDraw.Draw(img)
    r = 8
    for i, (u, v) in enumerate(pixels):
        draw.ellipse([u - r, v - r, u + r, v + r], fill=(255, 255, 255),
                     outline=(0, 0, 0), width=2)
        text = str(i)
        tx = u - 3 * len(text)
        draw.text((tx, v - 6), text, fill=(0, 0, 0))
    return np.asarray(img)


def encode_png(image: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(image)).save(buf, format="PNG")
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Backends

class VlmBackend:
    """Interface: turn a PromptBundle into raw response text."""

    def query(self, bundle: PromptBundle) -> str:
        raise NotImplementedError


def prompt_hash(bundle: PromptBundle) -> str:
    """Stable digest of role + text + raw image bytes, for record/replay."""
    h = hashlib.sha256()
    h.update(bundle.role.encode())
    h.update(b"\x00")
    h.update(bundle.text.encode())
    for img in bundle.images:
        arr = np.ascontiguousarray(img)
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


class OracleBackend(VlmBackend):
    """Deterministic ground-truth answers computed from bundle.context.

    Predict: 10 for a visible goal, else round(10 * (1 - g/g_max)) where
    g is the geodesic distance from the view's closest navigable cell to
    the goal's success region and g_max the scene diameter.  Plan: goal
    flag from a visibility test, subtask names the goal's room.  Reason:
    the marker whose endpoint minimizes geodesic distance to the goal.
    """

    def __init__(self, body: AgentBody | None = None, d_thres: float = 1.0,
                 resolution: float = GEODESIC_RESOLUTION):
        self.body = body or AgentBody()
        self.d_thres = d_thres
        self.resolution = resolution

    def query(self, bundle: PromptBundle) -> str:
        ctx = bundle.context
        if "scene" not in ctx or "goal" not in ctx:
            raise BackendError("oracle backend requires simulator context "
                               "(scene, goal) on the prompt bundle")
        if bundle.role == ROLE_PREDICT:
            return self._predict(ctx)
        if bundle.role == ROLE_PLAN:
            return self._plan(ctx)
        return self._reason(ctx)

    def _field(self, scene, goal):
        return goal_distance_field(scene, goal, self.body, self.d_thres,
                                   self.resolution)

    def _field_at(self, field, xy) -> float:
        nx, ny = field.shape
        cx = min(nx - 1, max(0, int(xy[0] / self.resolution)))
        cy = min(ny - 1, max(0, int(xy[1] / self.resolution)))
        return float(field[cx, cy])

    def _predict(self, ctx) -> str:
        scene, goal, cam = ctx["scene"], ctx["goal"], ctx["cam"]
        field = self._field(scene, goal)
        g_max = scene.diameter
        scores = []
        for pose, xy in zip(ctx["view_poses"], ctx["per_view_xy"]):
            if is_goal_visible(scene, pose, cam, goal):
                scores.append(SCORE_MAX)
                continue
            xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
            if xy.shape[0] == 0:
                scores.append(0)
                continue
            g = min(self._field_at(field, p) for p in xy)
            if math.isinf(g):
                scores.append(0)
                continue
            frac = max(0.0, min(1.0, 1.0 - g / g_max))
            scores.append(int(math.floor(SCORE_MAX * frac + 0.5)))
        return format_prediction(scores)

    def _plan(self, ctx) -> str:
        scene, goal, cam = ctx["scene"], ctx["goal"], ctx["cam"]
        pose = ctx["view_pose"]
        flag = is_goal_visible(scene, pose, cam, goal)
        probe = ctx.get("commit_probe")
        if flag and probe is not None:
            # commit only when approaching now can actually end in success
            flag = bool(probe())
        instances = scene.instances_of(goal)
        room = None
        if instances:
            room = scene.room_label_at(instances[0].x, instances[0].y)
        where = room or "the scene"
        lines = [f"subtask: search {where} for the {goal}",
                 f"goal_detected: {'yes' if flag else 'no'}",
                 "explanation: this view has the shortest remaining path"]
        return "\n".join(lines)

    def _reason(self, ctx) -> str:
        scene, goal = ctx["scene"], ctx["goal"]
        endpoints = np.asarray(ctx["endpoints"], dtype=np.float64).reshape(-1, 2)
        if ctx.get("stage") == STAGE_GOAL:
            # final approach: judge markers the way success is judged,
            # by straight-line distance to the nearest goal instance
            instances = scene.instances_of(goal)
            gs = [min((math.hypot(ex - o.x, ey - o.y) for o in instances),
                      default=math.inf) for ex, ey in endpoints]
        else:
            field = self._field(scene, goal)
            gs = [self._field_at(field, p) for p in endpoints]
        best, best_g = 0, math.inf
        for i, g in enumerate(gs):
            if g < best_g:
                best, best_g = i, g
        return f"choice: {best}"


class HttpBackend(VlmBackend):
    """Generic chat-completion client with image attachments.

    Reads the API key from ``api_key_env`` when not given explicitly.
    Timeouts and connection failures raise BackendUnavailable after
    ``max_retries`` exponential-backoff attempts; non-2xx responses raise
    BackendError carrying the status (429/5xx are retried first).
    """

    API_KEY_ENV = "CURIONAV_API_KEY"

    def __init__(self, base_url: str, model: str, api_key: str | None = None,
                 api_key_env: str | None = None, timeout: float = 60.0,
                 max_retries: int = 2, backoff: float = 0.5,
                 log_path=None, max_tokens: int = 300):
        env = api_key_env or self.API_KEY_ENV
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key = api_key if api_key is not None else os.environ.get(env)
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff = backoff
        self.log_path = log_path
        self.max_tokens = max_tokens
        self._log_lock = threading.Lock()

    def _endpoint(self) -> str:
        if self.base_url.endswith("/chat/completions"):
            return self.base_url
        return self.base_url + "/chat/completions"

    def _request_body(self, bundle: PromptBundle) -> dict:
        content = [{"type": "text", "text": bundle.text}]
        for img in bundle.images:
            b64 = base64.b64encode(encode_png(np.asarray(img))).decode()
            content.append({"type": "image_url",
                            "image_url": {"url": f"data:image/png;base64,{b64}"}})
        return {"model": self.model,
                "max_tokens": self.max_tokens,
                "messages": [{"role": "user", "content": content}]}

    def _log(self, record: dict) -> None:
        if self.log_path is None:
            return
        with self._log_lock, open(self.log_path, "a") as fh:
            fh.write(json.dumps(record) + "\n")

    def query(self, bundle: PromptBundle) -> str:
        body = self._request_body(bundle)
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        log_base = {"role": bundle.role, "url": self._endpoint(),
                    "request": {k: v for k, v in body.items() if k != "messages"},
                    "text": bundle.text, "num_images": len(bundle.images),
                    "headers": {"Authorization": "Bearer ***"} if self.api_key else {}}
        last_err: BackendError | None = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                time.sleep(self.backoff * (2 ** (attempt - 1)))
            try:
                resp = requests.post(self._endpoint(), json=body,
                                     headers=headers, timeout=self.timeout)
            except (requests.Timeout, requests.ConnectionError) as exc:
                last_err = BackendUnavailable(f"VLM endpoint unreachable: {exc}")
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last_err = BackendError(
                    f"VLM endpoint returned {resp.status_code}",
                    status=resp.status_code)
                continue
            if not 200 <= resp.status_code < 300:
                err = BackendError(f"VLM endpoint returned {resp.status_code}",
                                   status=resp.status_code)
                self._log({**log_base, "status": resp.status_code,
                           "error": str(err)})
                raise err
            try:
                text = resp.json()["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                err = BackendError(f"malformed VLM response body: {exc}",
                                   status=resp.status_code)
                self._log({**log_base, "status": resp.status_code,
                           "error": str(err)})
                raise err
            self._log({**log_base, "status": resp.status_code, "response": text})
            return text
        self._log({**log_base, "error": str(last_err)})
        raise last_err


class RecordingBackend(VlmBackend):
    """Wraps another backend and appends {role, prompt_hash, response} lines."""

    def __init__(self, inner: VlmBackend, path):
        self.inner = inner
        self.path = path
        self._lock = threading.Lock()

    def query(self, bundle: PromptBundle) -> str:
        response = self.inner.query(bundle)
        record = {"role": bundle.role, "prompt_hash": prompt_hash(bundle),
                  "response": response}
        with self._lock, open(self.path, "a") as fh:
            fh.write(json.dumps(record) + "\n")
        return response


class ReplayBackend(VlmBackend):
    """Answers from a recorded fixture, keyed by prompt hash.

    Repeated identical prompts consume recorded responses in order and
    stick to the last one once exhausted.
    """

    def __init__(self, path):
        self.path = path
        self._responses: dict[str, list[str]] = {}
        self._cursor: dict[str, int] = {}
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                self._responses.setdefault(rec["prompt_hash"], []).append(
                    rec["response"])

    def query(self, bundle: PromptBundle) -> str:
        key = prompt_hash(bundle)
        if key not in self._responses:
            raise BackendError(
                f"no recorded response for {bundle.role} prompt {key[:12]}...")
        seq = self._responses[key]
        i = self._cursor.get(key, 0)
        self._cursor[key] = i + 1
        return seq[min(i, len(seq) - 1)]

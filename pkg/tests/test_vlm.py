"""VLM layer tests: prompt building, response parsing, and all backends.

The HTTP backend talks to a scripted localhost server so status handling,
retries, auth headers, and logging are exercised over a real socket.
"""

import base64
import io
import json
import math
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from conftest import box_scene, goal_box_scene

from curionav.geometry import CameraModel, Pose
from curionav.simulator import AgentBody, SceneObject
from curionav.vlm import (STAGE_EXPLORATION, STAGE_GOAL, VIEW_LABELS,
                          BackendError, BackendUnavailable, Cost, HttpBackend,
                          OracleBackend, ParseFailure, PromptBundle,
                          RecordingBackend, ReplayBackend, annotate_markers,
                          build_plan_prompt, build_predict_prompt,
                          build_reason_prompt, color_legend, compose_panorama,
                          encode_png, format_prediction, initial_cost,
                          parse_action, parse_plan, parse_prediction,
                          prompt_hash, semantic_to_rgb)

IMG = np.zeros((8, 8, 3), dtype=np.uint8)


def bundle(role="predict", text="t", image=IMG, context=None):
    return PromptBundle(role, text, [image], context or {})


# ---------------------------------------------------------------------------
# parsing

def test_parse_prediction_labeled_any_order():
    raw = "90: 3\n330: 1\n30 deg: 7\n150 = 0\n210: 10\n270: 5"
    assert parse_prediction(raw).scores == (7, 3, 0, 10, 5, 1)


def test_parse_prediction_bare_integers_in_order():
    assert parse_prediction("[7, 3, 0, 10, 5, 1]").scores == (7, 3, 0, 10, 5, 1)


def test_parse_prediction_clamps():
    assert parse_prediction("42 -3 0 10 5 1").scores == (10, 0, 0, 10, 5, 1)


@pytest.mark.parametrize("raw", ["1 2 3 4 5", "1 2 3 4 5 6 7",
                                 "no numbers here"])
def test_parse_prediction_failures(raw):
    with pytest.raises(ParseFailure):
        parse_prediction(raw)


@given(st.tuples(*[st.integers(0, 10)] * 6))
def test_format_prediction_roundtrip(scores):
    assert parse_prediction(format_prediction(scores)).scores == scores


def test_parse_plan_line_format():
    plan = parse_plan("subtask: check the kitchen\n"
                      "goal_detected: Yes\nexplanation: tv ahead")
    assert plan.subtask == "check the kitchen"
    assert plan.goal_flag is True
    assert plan.explanation == "tv ahead"


def test_parse_plan_embedded_json():
    raw = ('Sure! {"subtask": "approach the bed", "goal_detected": false, '
           '"explanation": "no"} hope that helps')
    plan = parse_plan(raw)
    assert plan.subtask == "approach the bed"
    assert plan.goal_flag is False
    raw = '{"subtask": "x", "goal_detected": "yes"}'
    assert parse_plan(raw).goal_flag is True


@pytest.mark.parametrize("raw", [
    "goal_detected: yes",                       # no subtask
    "subtask: look around",                     # no flag
    "subtask: x\ngoal_detected: perhaps",       # unparseable flag
])
def test_parse_plan_failures(raw):
    with pytest.raises(ParseFailure):
        parse_plan(raw)


def test_parse_action_formats():
    assert parse_action("choice: 2", 5).index == 2
    assert parse_action("I pick marker Choice = 4 obviously", 5).index == 4
    assert parse_action("3", 5).index == 3


@pytest.mark.parametrize("raw, n", [
    ("choice: 9", 5), ("-1", 5), ("2 or maybe 3", 5), ("none", 5),
])
def test_parse_action_failures(raw, n):
    with pytest.raises(ParseFailure):
        parse_action(raw, n)


def test_initial_cost():
    cost = initial_cost("chair")
    assert cost.prev_subtask == "explore to find the chair"
    assert cost.goal_flag is False


# ---------------------------------------------------------------------------
# prompt bundles

def test_prompt_bundle_validation():
    with pytest.raises(ValueError):
        PromptBundle("oracle", "t", [IMG])
    with pytest.raises(ValueError):
        PromptBundle("predict", "t", [])
    with pytest.raises(ValueError):
        PromptBundle("predict", "t", [IMG, IMG])


def test_build_prompts_mention_their_inputs():
    pano = np.zeros((8, 48, 3), dtype=np.uint8)
    b = build_predict_prompt(pano, "sofa", legend="Colors: gray = floor.")
    assert b.role == "predict" and "sofa" in b.text
    assert all(label in b.text for label in VIEW_LABELS)
    assert "Colors: gray = floor." in b.text

    b = build_plan_prompt(IMG, Cost("look around"), "sofa",
                          selection_explanation="highest curiosity")
    assert b.role == "plan"
    assert "look around" in b.text and "highest curiosity" in b.text

    b = build_reason_prompt(IMG, "go left", Cost("go left"),
                            STAGE_EXPLORATION, "sofa", num_actions=4)
    assert b.role == "reason" and "0 to 3" in b.text

    with pytest.raises(ValueError):
        build_predict_prompt(pano, "")
    with pytest.raises(ValueError):
        build_reason_prompt(IMG, "s", Cost("s"), "warp", "sofa")


def test_reason_prompt_goal_flag_forces_goal_stage():
    explore = build_reason_prompt(IMG, "s", Cost("s", False),
                                  STAGE_EXPLORATION, "tv", num_actions=3)
    forced = build_reason_prompt(IMG, "s", Cost("s", True),
                                 STAGE_EXPLORATION, "tv", num_actions=3)
    goal = build_reason_prompt(IMG, "s", Cost("s", False), STAGE_GOAL, "tv",
                               num_actions=3)
    assert forced.text == goal.text
    assert forced.text != explore.text


def test_prompt_hash_sensitivity():
    a = bundle(text="hello")
    assert prompt_hash(a) == prompt_hash(bundle(text="hello"))
    assert prompt_hash(a) != prompt_hash(bundle(text="hello!"))
    assert prompt_hash(a) != prompt_hash(bundle(role="plan", text="hello"))
    other = IMG.copy()
    other[3, 3, 0] = 9
    assert prompt_hash(a) != prompt_hash(bundle(image=other))
    # context is simulator-side only and must not affect the digest
    assert prompt_hash(a) == prompt_hash(bundle(text="hello",
                                                context={"scene": 1}))


# ---------------------------------------------------------------------------
# prompt imagery

def test_semantic_to_rgb_colors():
    sem = np.zeros((4, 4), dtype=np.uint8)
    sem[1, 1] = 1
    sem[2, 2] = 2
    depth = np.full((4, 4), 2.0)
    depth[0, 0] = np.inf
    rgb = semantic_to_rgb(sem, depth)
    assert tuple(rgb[3, 3]) == (205, 205, 205)    # structure
    assert tuple(rgb[0, 0]) == (245, 245, 245)    # sky
    assert tuple(rgb[1, 1]) != tuple(rgb[2, 2])   # distinct categories
    assert tuple(rgb[1, 1]) == (220, 50, 47)


def test_color_legend_orders_by_id():
    legend = color_legend({"tv": 2, "bed": 1})
    assert legend.index("bed") < legend.index("tv")
    assert "red = bed" in legend
    assert color_legend({}) == "Colors: gray = floor and walls."


def test_compose_panorama_geometry():
    views = [np.full((10, 20, 3), i * 30, dtype=np.uint8) for i in range(6)]
    pano = compose_panorama(views)
    assert pano.shape == (10, 6 * 20 + 5 * 2, 3)
    with pytest.raises(ValueError):
        compose_panorama(views[:4])


def test_annotate_markers_draws_without_mutating():
    img = np.full((40, 40, 3), 90, dtype=np.uint8)
    before = img.copy()
    out = annotate_markers(img, [(20.0, 20.0)])
    assert np.array_equal(img, before)
    assert not np.array_equal(out, img)
    region = out[12:29, 12:29]
    assert np.all(region == 255, axis=-1).any()  # white disk
    assert np.all(region == 0, axis=-1).any()    # numbered label


def test_encode_png_roundtrip():
    img = np.arange(4 * 5 * 3, dtype=np.uint8).reshape(4, 5, 3)
    data = encode_png(img)
    back = np.asarray(Image.open(io.BytesIO(data)))
    assert np.array_equal(back, img)


# ---------------------------------------------------------------------------
# oracle backend

CAM = CameraModel(64, 48, math.radians(79))


def test_oracle_requires_context():
    with pytest.raises(BackendError):
        OracleBackend().query(bundle())


def test_oracle_predict_scores():
    scene = goal_box_scene()  # chair at (4.5, 2.5)
    looking = Pose(1.5, 2.5, 0.88, 0.0)
    away = Pose(1.5, 2.5, 0.88, math.pi)
    ctx = {"scene": scene, "goal": "chair", "cam": CAM,
           "view_poses": [looking, away] + [away] * 4,
           "per_view_xy": [[(2.0, 2.5)], [(1.0, 2.5)], [], [], [], []]}
    raw = OracleBackend().query(PromptBundle("predict", "t", [IMG], ctx))
    scores = parse_prediction(raw).scores
    assert scores[0] == 10            # goal visible from this view
    assert scores[2:] == (0, 0, 0, 0)  # views with no navigable cells
    # view 1: distance-discounted score from its nearest navigable cell
    from curionav.simulator import goal_distance_field
    field = goal_distance_field(scene, "chair", AgentBody())
    g = float(field[int(1.0 / 0.1), int(2.5 / 0.1)])
    expect = int(math.floor(10 * max(0.0, 1.0 - g / scene.diameter) + 0.5))
    assert scores[1] == expect
    assert 0 < scores[1] < 10


def test_oracle_predict_unreachable_region_scores_zero():
    from curionav.simulator import WallSegment
    walls = [WallSegment(2.0, 2.0, 4.0, 2.0), WallSegment(4.0, 2.0, 4.0, 4.0),
             WallSegment(4.0, 4.0, 2.0, 4.0), WallSegment(2.0, 4.0, 2.0, 2.0)]
    scene = box_scene(6.0, 5.0, walls=walls,
                      objects=[SceneObject("chair", 3.0, 3.0, 0.2, 0.7)])
    pose = Pose(1.0, 1.0, 0.88, math.pi)
    ctx = {"scene": scene, "goal": "chair", "cam": CAM,
           "view_poses": [pose] * 6,
           "per_view_xy": [[(1.0, 1.0)]] * 6}
    raw = OracleBackend().query(PromptBundle("predict", "t", [IMG], ctx))
    assert parse_prediction(raw).scores == (0,) * 6


def test_oracle_plan_flag_and_commit_probe():
    scene = goal_box_scene()
    visible = Pose(1.5, 2.5, 0.88, 0.0)
    ctx = {"scene": scene, "goal": "chair", "cam": CAM, "view_pose": visible}
    plan = parse_plan(OracleBackend().query(
        PromptBundle("plan", "t", [IMG], ctx)))
    assert plan.goal_flag is True
    assert plan.subtask == "search the scene for the chair"

    vetoed = parse_plan(OracleBackend().query(PromptBundle(
        "plan", "t", [IMG], {**ctx, "commit_probe": lambda: False})))
    assert vetoed.goal_flag is False

    hidden = parse_plan(OracleBackend().query(PromptBundle(
        "plan", "t", [IMG],
        {**ctx, "view_pose": Pose(1.5, 2.5, 0.88, math.pi)})))
    assert hidden.goal_flag is False


def test_oracle_reason_exploration_minimizes_remaining_path():
    scene = goal_box_scene()
    ctx = {"scene": scene, "goal": "chair", "cam": CAM,
           "endpoints": [(1.0, 1.0), (4.0, 2.5), (2.0, 4.0)],
           "stage": STAGE_EXPLORATION}
    raw = OracleBackend().query(PromptBundle("reason", "t", [IMG], ctx))
    assert parse_action(raw, 3).index == 1


def test_oracle_reason_goal_stage_uses_straight_line():
    scene = goal_box_scene()
    ctx = {"scene": scene, "goal": "chair", "cam": CAM,
           "endpoints": [(4.0, 2.5), (4.4, 2.5)], "stage": STAGE_GOAL}
    raw = OracleBackend().query(PromptBundle("reason", "t", [IMG], ctx))
    assert parse_action(raw, 2).index == 1
    # ties resolve to the lowest index
    tie = {**ctx, "endpoints": [(4.0, 2.5), (5.0, 2.5)]}
    raw = OracleBackend().query(PromptBundle("reason", "t", [IMG], tie))
    assert parse_action(raw, 2).index == 0


# ---------------------------------------------------------------------------
# record / replay

class ScriptedBackend:
    def __init__(self, responses):
        self.responses = list(responses)
        self.calls = 0

    def query(self, b):
        self.calls += 1
        return self.responses.pop(0)


def test_record_then_replay_roundtrip(tmp_path):
    path = tmp_path / "rec.jsonl"
    inner = ScriptedBackend(["5 5 5 5 5 5", "choice: 0"])
    rec = RecordingBackend(inner, path)
    b1 = bundle(text="score these")
    b2 = bundle(role="reason", text="pick one")
    assert rec.query(b1) == "5 5 5 5 5 5"
    assert rec.query(b2) == "choice: 0"

    lines = [json.loads(l) for l in path.read_text().splitlines()]
    assert [l["role"] for l in lines] == ["predict", "reason"]
    assert lines[0]["prompt_hash"] == prompt_hash(b1)
    assert set(lines[0]) == {"role", "prompt_hash", "response"}

    rep = ReplayBackend(path)
    assert rep.query(b1) == "5 5 5 5 5 5"
    assert rep.query(b2) == "choice: 0"


def test_replay_fifo_then_sticks(tmp_path):
    path = tmp_path / "rec.jsonl"
    rec = RecordingBackend(ScriptedBackend(["first", "second"]), path)
    b = bundle(text="same prompt twice")
    rec.query(b)
    rec.query(b)
    rep = ReplayBackend(path)
    assert rep.query(b) == "first"
    assert rep.query(b) == "second"
    assert rep.query(b) == "second"  # exhausted: stick to the last


def test_replay_unknown_prompt_raises(tmp_path):
    path = tmp_path / "rec.jsonl"
    RecordingBackend(ScriptedBackend(["x"]), path).query(bundle(text="known"))
    rep = ReplayBackend(path)
    with pytest.raises(BackendError):
        rep.query(bundle(text="never recorded"))


# ---------------------------------------------------------------------------
# HTTP backend against a scripted local server

DEFAULT_BODY = {"choices": [{"message": {"content": "ok"}}]}


class _StubHandler(BaseHTTPRequestHandler):
    def do_POST(self):
        length = int(self.headers.get("Content-Length", 0))
        body = json.loads(self.rfile.read(length)) if length else {}
        self.server.requests.append(
            {"path": self.path,
             "auth": self.headers.get("Authorization"),
             "body": body})
        status, payload = (self.server.script.pop(0) if self.server.script
                           else (200, DEFAULT_BODY))
        data = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


@pytest.fixture
def stub_server():
    server = ThreadingHTTPServer(("127.0.0.1", 0), _StubHandler)
    server.script = []
    server.requests = []
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        yield server
    finally:
        server.shutdown()
        server.server_close()


def _backend(server, **kw):
    url = f"http://127.0.0.1:{server.server_address[1]}/v1"
    kw.setdefault("api_key", "sk-test")
    kw.setdefault("backoff", 0.01)
    return HttpBackend(url, "test-model", **kw)


def test_http_success_request_shape(stub_server):
    stub_server.script = [(200, {"choices": [{"message":
                                              {"content": "7 7 7 7 7 7"}}]})]
    backend = _backend(stub_server)
    out = backend.query(bundle(text="score the panorama"))
    assert out == "7 7 7 7 7 7"

    req = stub_server.requests[0]
    assert req["path"] == "/v1/chat/completions"
    assert req["auth"] == "Bearer sk-test"
    assert req["body"]["model"] == "test-model"
    assert req["body"]["max_tokens"] == 300
    content = req["body"]["messages"][0]["content"]
    assert content[0] == {"type": "text", "text": "score the panorama"}
    url = content[1]["image_url"]["url"]
    assert url.startswith("data:image/png;base64,")
    png = base64.b64decode(url.split(",", 1)[1])
    assert np.array_equal(np.asarray(Image.open(io.BytesIO(png))), IMG)


def test_http_retries_5xx_then_succeeds(stub_server):
    stub_server.script = [(500, {}), (429, {}), (200, DEFAULT_BODY)]
    assert _backend(stub_server, max_retries=2).query(bundle()) == "ok"
    assert len(stub_server.requests) == 3


def test_http_retries_exhausted_raises(stub_server):
    stub_server.script = [(503, {})] * 3
    with pytest.raises(BackendError) as err:
        _backend(stub_server, max_retries=2).query(bundle())
    assert err.value.status == 503
    assert len(stub_server.requests) == 3


def test_http_client_error_no_retry(stub_server):
    stub_server.script = [(404, {})]
    with pytest.raises(BackendError) as err:
        _backend(stub_server, max_retries=2).query(bundle())
    assert err.value.status == 404
    assert len(stub_server.requests) == 1


def test_http_malformed_body_raises(stub_server):
    stub_server.script = [(200, {"unexpected": True})]
    with pytest.raises(BackendError, match="malformed"):
        _backend(stub_server).query(bundle())


def test_http_connection_refused_is_unavailable():
    backend = HttpBackend("http://127.0.0.1:9", "m", api_key="k",
                          max_retries=0, backoff=0.01, timeout=1.0)
    with pytest.raises(BackendUnavailable):
        backend.query(bundle())


def test_http_key_from_environment(stub_server, monkeypatch):
    monkeypatch.setenv(HttpBackend.API_KEY_ENV, "sk-from-env")
    url = f"http://127.0.0.1:{stub_server.server_address[1]}/v1"
    HttpBackend(url, "m").query(bundle())
    assert stub_server.requests[0]["auth"] == "Bearer sk-from-env"


def test_http_no_key_no_header(stub_server, monkeypatch):
    monkeypatch.delenv(HttpBackend.API_KEY_ENV, raising=False)
    url = f"http://127.0.0.1:{stub_server.server_address[1]}/v1"
    HttpBackend(url, "m").query(bundle())
    assert stub_server.requests[0]["auth"] is None


def test_http_log_redacts_key(stub_server, tmp_path):
    log = tmp_path / "vlm_log.jsonl"
    stub_server.script = [(200, DEFAULT_BODY)]
    _backend(stub_server, log_path=log).query(bundle(text="secret prompt"))
    records = [json.loads(l) for l in log.read_text().splitlines()]
    assert records[0]["status"] == 200
    assert records[0]["response"] == "ok"
    assert records[0]["headers"] == {"Authorization": "Bearer ***"}
    assert "sk-test" not in log.read_text()


def test_http_endpoint_suffix_not_duplicated(stub_server):
    port = stub_server.server_address[1]
    backend = HttpBackend(f"http://127.0.0.1:{port}/v1/chat/completions",
                          "m", api_key="k")
    backend.query(bundle())
    assert stub_server.requests[0]["path"] == "/v1/chat/completions"

"""Verification tools, transports and the reviewer line protocol."""

import base64
import json
import os
import stat
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cxrtriage import imaging, tools
from cxrtriage.tools import (
    AdapterTimer,
    ConfidenceSignal,
    HttpScorer,
    ScorerResponse,
    StubChatClient,
    StubScorer,
    SubprocessScorer,
    ToolError,
    VlmParseError,
    format_vlm_line,
    parse_vlm_reply,
    run_moe,
    run_tta,
    run_vlm,
    with_retries,
)


class RecordingScorer:
    """Returns scripted posteriors in order; keeps what it was shown."""

    def __init__(self, posteriors, failures=0):
        self.posteriors = list(posteriors)
        self.failures = failures
        self.calls = 0
        self.seen_digests = []
        self.seen_dtypes = []
        self.seen_ids = []
        self.name = "recording"
        self.version = "recording-1"

    def score(self, case_id, pixels, source_path=None):
        if self.failures > 0:
            self.failures -= 1
            raise ToolError("scripted transport failure")
        self.seen_digests.append(imaging.pixel_digest(np.asarray(pixels, dtype=np.float64)))
        self.seen_dtypes.append(pixels.dtype)
        self.seen_ids.append(id(pixels))
        p = self.posteriors[self.calls % len(self.posteriors)]
        self.calls += 1
        return ScorerResponse(p=p, model_version=self.version)


class FixedScorer:
    def __init__(self, p, name="fixed"):
        self.p = p
        self.name = name
        self.version = f"fixed:{p}"

    def score(self, case_id, pixels, source_path=None):
        return ScorerResponse(p=self.p, model_version=self.version)


def test_confidence_signal():
    assert ConfidenceSignal(0.8).c == 0.8
    assert ConfidenceSignal(0.2).c == 0.8
    assert ConfidenceSignal(0.5).label == "positive"
    assert ConfidenceSignal(0.49).label == "negative"


def test_scorer_response_range_check():
    with pytest.raises(ToolError):
        ScorerResponse(p=1.5, model_version="x")
    with pytest.raises(ToolError):
        ScorerResponse(p=float("nan"), model_version="x")


def test_with_retries_eventually_succeeds():
    attempts = []

    def flaky():
        attempts.append(1)
        if len(attempts) < 3:
            raise ToolError("down")
        return "ok"

    assert with_retries(flaky, retries=2) == "ok"
    assert len(attempts) == 3


def test_with_retries_exhausted():
    def always_down():
        raise ToolError("down")

    with pytest.raises(ToolError, match="failed after 3 attempts"):
        with_retries(always_down, retries=2)


# ---------------------------------------------------------------------------
# test-time augmentation


def test_tta_deterministic_for_a_seed(rng):
    pixels = rng.uniform(0.0, 1.0, (32, 32))
    first = RecordingScorer([0.7, 0.72, 0.68, 0.71])
    second = RecordingScorer([0.7, 0.72, 0.68, 0.71])
    a = run_tta("case", pixels, first, k=6, seed=11)
    b = run_tta("case", pixels.copy(), second, k=6, seed=11)
    assert a.samples == b.samples
    assert a.mu == b.mu and a.sigma == b.sigma
    # Identical seeds produce identical augmented frames, pixel for pixel.
    assert first.seen_digests == second.seen_digests
    third = RecordingScorer([0.7])
    run_tta("case", pixels, third, k=6, seed=12)
    assert third.seen_digests != first.seen_digests


def test_tta_summary_statistics(rng):
    pixels = rng.uniform(0.0, 1.0, (16, 16))
    scripted = [0.62, 0.58, 0.66, 0.54]
    result = run_tta("case", pixels, RecordingScorer(scripted), k=4, seed=0)
    assert result.samples == scripted
    assert result.mu == pytest.approx(np.mean(scripted))
    assert result.sigma == pytest.approx(np.std(scripted, ddof=1))
    assert result.mu_conf == pytest.approx(0.6)
    assert result.label == "positive"


def test_tta_requires_two_samples(rng):
    with pytest.raises(ValueError, match="k >= 2"):
        run_tta("case", rng.uniform(0.0, 1.0, (8, 8)), FixedScorer(0.5), k=1)


def test_tta_feeds_clamped_float32_and_reuses_buffer(rng):
    pixels = rng.uniform(0.0, 1.0, (24, 24))
    scorer = RecordingScorer([0.5])

    seen_ranges = []
    original = scorer.score

    def checking(case_id, arr, source_path=None):
        seen_ranges.append((float(arr.min()), float(arr.max())))
        return original(case_id, arr, source_path=source_path)

    scorer.score = checking
    run_tta("case", pixels, scorer, k=5, seed=3)
    assert all(dt == np.float32 for dt in scorer.seen_dtypes)
    assert all(0.0 <= lo and hi <= 1.0 for lo, hi in seen_ranges)
    # One scratch buffer serves every augmented sample.
    assert len(set(scorer.seen_ids)) == 1


def test_tta_survives_transient_scorer_failures(rng):
    scorer = RecordingScorer([0.6], failures=2)
    result = run_tta("case", rng.uniform(0.0, 1.0, (8, 8)), scorer, k=3, seed=0, retries=2)
    assert len(result.samples) == 3


def test_tta_gives_up_after_retry_budget(rng):
    scorer = RecordingScorer([0.6], failures=50)
    with pytest.raises(ToolError):
        run_tta("case", rng.uniform(0.0, 1.0, (8, 8)), scorer, k=3, seed=0, retries=1)


# ---------------------------------------------------------------------------
# expert committee


def test_moe_majority(rng):
    pixels = rng.uniform(0.0, 1.0, (8, 8))
    experts = [FixedScorer(0.9, "e0"), FixedScorer(0.8, "e1"), FixedScorer(0.1, "e2")]
    result = run_moe("case", pixels, experts, base_label="negative")
    assert result.majority_label == "positive"
    assert result.agreement == 2 / 3
    assert not result.tied
    assert result.votes == [("e0", "positive"), ("e1", "positive"), ("e2", "negative")]


def test_moe_tie_falls_back_to_base_label(rng):
    pixels = rng.uniform(0.0, 1.0, (8, 8))
    experts = [FixedScorer(0.9), FixedScorer(0.9), FixedScorer(0.1), FixedScorer(0.1)]
    result = run_moe("case", pixels, experts, base_label="negative")
    assert result.tied
    assert result.agreement == 0.5
    assert result.majority_label == "negative"
    # The same split backs the base's positive call too.
    assert run_moe("case", pixels, experts, base_label="positive").majority_label == "positive"


def test_moe_needs_a_committee(rng):
    with pytest.raises(ValueError, match="at least two"):
        run_moe("case", rng.uniform(0.0, 1.0, (4, 4)), [FixedScorer(0.9)], "positive")


def test_moe_expert_failure_propagates(rng):
    class DeadExpert:
        name = "dead"

        def score(self, case_id, pixels, source_path=None):
            raise ToolError("no route")

    with pytest.raises(ToolError):
        run_moe(
            "case",
            rng.uniform(0.0, 1.0, (4, 4)),
            [FixedScorer(0.9), DeadExpert()],
            "positive",
            retries=1,
        )


# ---------------------------------------------------------------------------
# reviewer protocol


@pytest.mark.parametrize(
    "label,conf,explanation",
    [
        ("positive", 0.85, "hazy costophrenic angle"),
        ("negative", 0.1, "clear fields"),
        ("positive", 0.5, "borderline but callable"),
        ("negative", 0.0, ""),
        ("positive", 1.0, "unambiguous"),
    ],
)
def test_vlm_round_trip(label, conf, explanation):
    result = parse_vlm_reply(format_vlm_line(label, conf, explanation))
    assert result.label == label
    assert result.conf == conf
    assert result.explanation == explanation


def test_vlm_ranking_confidence():
    assert parse_vlm_reply(format_vlm_line("negative", 0.2, "x")).ranking_conf == 0.8
    assert parse_vlm_reply(format_vlm_line("positive", 0.9, "x")).ranking_conf == 0.9


@pytest.mark.parametrize(
    "payload,kind",
    [
        ("1|0.9|fine", "markers"),
        ("===LINE===\n1|0.9|fine", "markers"),
        ("===LINE===\n1|0.9|fine\n===END===\nextra", "markers"),
        ("===LINE===\n1|0.9\n===END===", "field_count"),
        ("===LINE===\n1|0.9|a|b\n===END===", "field_count"),
        ("===LINE===\n2|0.9|fine\n===END===", "label"),
        ("===LINE===\nyes|0.9|fine\n===END===", "label"),
        ("===LINE===\n1|high|fine\n===END===", "conf"),
        ("===LINE===\n1|-0.2|fine\n===END===", "conf"),
        ("===LINE===\n1|9e-1|fine\n===END===", "conf"),
        ("===LINE===\n1|1.2|fine\n===END===", "conf_range"),
        ("===LINE===\n1|0.3|fine\n===END===", "consistency"),
        ("===LINE===\n0|0.7|fine\n===END===", "consistency"),
    ],
)
def test_vlm_rejects_are_classified(payload, kind):
    with pytest.raises(VlmParseError) as err:
        parse_vlm_reply(payload)
    assert err.value.kind == kind


def test_vlm_accepts_crlf_and_padding():
    reply = "\n===LINE===\r\n1|0.75|ok\r\n===END===\n\n"
    assert parse_vlm_reply(reply).conf == 0.75


def test_vlm_rejects_non_text():
    with pytest.raises(VlmParseError) as err:
        parse_vlm_reply(None)
    assert err.value.kind == "markers"


@settings(max_examples=100, deadline=None)
@given(
    label=st.sampled_from(["positive", "negative"]),
    conf_milli=st.integers(min_value=0, max_value=1000),
    explanation=st.text(
        alphabet=st.characters(
            codec="ascii", exclude_characters="|\r\n", exclude_categories=("Cc",)
        ),
        max_size=40,
    ),
)
def test_vlm_round_trip_property(label, conf_milli, explanation):
    conf = conf_milli / 1000.0
    if (label == "positive") != (conf >= 0.5):
        label = "positive" if conf >= 0.5 else "negative"
    result = parse_vlm_reply(format_vlm_line(label, conf, explanation))
    assert (result.label, result.conf, result.explanation) == (label, conf, explanation)


class ScriptedChat:
    def __init__(self, replies):
        self.replies = list(replies)
        self.calls = 0

    def complete(self, system, user, image_png=None):
        reply = self.replies[min(self.calls, len(self.replies) - 1)]
        self.calls += 1
        if isinstance(reply, Exception):
            raise reply
        return reply


def test_run_vlm_retries_a_bad_parse_once(rng):
    pixels = rng.uniform(0.0, 1.0, (8, 8))
    good = format_vlm_line("positive", 0.8, "ok")
    client = ScriptedChat(["garbage", good])
    result = run_vlm("case", pixels, client, prompt="sys")
    assert result.label == "positive"
    assert client.calls == 2


def test_run_vlm_two_bad_parses_raise(rng):
    client = ScriptedChat(["garbage", "still garbage"])
    with pytest.raises(VlmParseError):
        run_vlm("case", rng.uniform(0.0, 1.0, (8, 8)), client, prompt="sys")
    assert client.calls == 2


def test_run_vlm_transport_failures_exhaust(rng):
    client = ScriptedChat([ToolError("down")])
    with pytest.raises(ToolError):
        run_vlm("case", rng.uniform(0.0, 1.0, (8, 8)), client, prompt="sys", retries=1)


# ---------------------------------------------------------------------------
# scripted scorer


def test_stub_scorer_base_vs_augmented(rng):
    pixels = rng.uniform(0.0, 1.0, (32, 32))
    behaviors = {
        "c1": {
            "digest": imaging.pixel_fingerprint(pixels),
            "p": 0.9,
            "tta": [0.8, 0.7],
            "cam": [[0.0, 1.0], [0.5, 0.0]],
        }
    }
    scorer = StubScorer(behaviors)
    base = scorer.score("c1", pixels)
    assert base.p == 0.9
    assert base.cam.tolist() == [[0.0, 1.0], [0.5, 0.0]]

    other = rng.uniform(0.0, 1.0, (32, 32))
    replayed = [scorer.score("c1", other).p for _ in range(4)]
    assert replayed == [0.8, 0.7, 0.8, 0.7]  # cyclic replay
    assert scorer.score("c1", pixels).p == 0.9  # base still matches


def test_stub_scorer_scripted_failures(rng):
    pixels = rng.uniform(0.0, 1.0, (8, 8))
    scorer = StubScorer({"c1": {"p": 0.5, "fail_times": 2}})
    with pytest.raises(ToolError):
        scorer.score("c1", pixels)
    with pytest.raises(ToolError):
        scorer.score("c1", pixels)
    assert scorer.score("c1", pixels).p == 0.5

    permanent = StubScorer({"c1": {"p": 0.5, "fail": True}})
    for _ in range(3):
        with pytest.raises(ToolError):
            permanent.score("c1", pixels)


def test_stub_scorer_unknown_case(rng):
    with pytest.raises(ToolError, match="no scripted behavior"):
        StubScorer({}).score("ghost", rng.uniform(0.0, 1.0, (4, 4)))


def test_stub_chat_client_answers_by_image_digest(rng):
    pixels = rng.uniform(0.0, 1.0, (16, 16))
    digest = imaging.pixel_fingerprint(
        imaging.to_unit(imaging.decode_gray(imaging.encode_png(pixels)))
    )
    client = StubChatClient.from_image_digests({digest: "scripted reply"})
    assert client.complete("sys", "user", imaging.encode_png(pixels)) == "scripted reply"
    with pytest.raises(ToolError, match="no scripted reply"):
        client.complete("sys", "user", imaging.encode_png(rng.uniform(0.0, 1.0, (16, 16))))
    with pytest.raises(ToolError, match="image attachment"):
        client.complete("sys", "user", None)


# ---------------------------------------------------------------------------
# subprocess transport


CHILD_SCRIPT = """#!/usr/bin/env python3
import os
import sys

die_flag = sys.argv[1]
for line in sys.stdin:
    path, case_id = line.rstrip("\\n").split("\\t")
    if os.path.exists(die_flag):
        sys.exit(1)
    answer = "0.9" if os.path.exists(path) else "0.1"
    print(answer, flush=True)
"""


def _write_child(tmp_path):
    script = tmp_path / "scorer_child.py"
    script.write_text(CHILD_SCRIPT)
    script.chmod(script.stat().st_mode | stat.S_IEXEC)
    return script


def test_subprocess_scorer_round_trip(rng, tmp_path):
    script = _write_child(tmp_path)
    flag = tmp_path / "die"
    source = tmp_path / "img.png"
    imaging.write_png(source, rng.uniform(0.0, 1.0, (16, 16)))
    scorer = SubprocessScorer(["python3", str(script), str(flag)])
    try:
        assert scorer.score("c1", None, source_path=str(source)).p == 0.9
        # Without a source path a temporary PNG stands in; the child sees a
        # real file either way.
        assert scorer.score("c2", rng.uniform(0.0, 1.0, (16, 16))).p == 0.9
    finally:
        scorer.close()


def test_subprocess_scorer_respawns_after_failure(rng, tmp_path):
    script = _write_child(tmp_path)
    flag = tmp_path / "die"
    source = tmp_path / "img.png"
    imaging.write_png(source, rng.uniform(0.0, 1.0, (16, 16)))
    scorer = SubprocessScorer(["python3", str(script), str(flag)])
    try:
        flag.write_text("")
        with pytest.raises(ToolError):
            scorer.score("c1", None, source_path=str(source))
        flag.unlink()
        # A fresh child comes up on the next call.
        assert scorer.score("c1", None, source_path=str(source)).p == 0.9
    finally:
        scorer.close()


# ---------------------------------------------------------------------------
# http transports


class _ScorerHandler(BaseHTTPRequestHandler):
    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        pixels = imaging.decode_gray(base64.b64decode(body["image"]))
        if body["case_id"] == "boom":
            self.send_response(500)
            self.end_headers()
            return
        cam = base64.b64encode(imaging.encode_png(pixels[::4, ::4])).decode()
        payload = json.dumps(
            {"p": 0.75, "cam": cam, "model_version": "srv-1"}
        ).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *args):
        pass


class _ChatHandler(BaseHTTPRequestHandler):
    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        text = f"echo:{body['user']}" + (":img" if "image_b64" in body else "")
        payload = json.dumps({"text": text}).encode()
        self.send_response(200)
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *args):
        pass


@pytest.fixture
def http_server():
    def start(handler):
        server = ThreadingHTTPServer(("127.0.0.1", 0), handler)
        thread = threading.Thread(target=server.serve_forever, daemon=True)
        thread.start()
        servers.append(server)
        return f"http://127.0.0.1:{server.server_port}"

    servers = []
    yield start
    for server in servers:
        server.shutdown()
        server.server_close()


def test_http_scorer_round_trip(rng, http_server):
    endpoint = http_server(_ScorerHandler)
    scorer = HttpScorer(endpoint)
    resp = scorer.score("c1", rng.uniform(0.0, 1.0, (32, 32)))
    assert resp.p == 0.75
    assert resp.model_version == "srv-1"
    assert resp.cam is not None and resp.cam.shape == (8, 8)
    with pytest.raises(ToolError):
        scorer.score("boom", rng.uniform(0.0, 1.0, (32, 32)))


def test_http_chat_client(rng, http_server):
    endpoint = http_server(_ChatHandler)
    client = tools.HttpChatClient(endpoint)
    assert client.complete("sys", "hello") == "echo:hello"
    png = imaging.encode_png(rng.uniform(0.0, 1.0, (8, 8)))
    assert client.complete("sys", "hello", image_png=png) == "echo:hello:img"


def test_http_scorer_unreachable_endpoint(rng):
    scorer = HttpScorer("http://127.0.0.1:9", timeout=0.2)
    with pytest.raises(ToolError):
        scorer.score("c1", rng.uniform(0.0, 1.0, (8, 8)))


# ---------------------------------------------------------------------------
# adapter timing


def test_adapter_timer_accumulates():
    timer = AdapterTimer()

    class SlowAdapter:
        name = "slow"

        def score(self, case_id, pixels, source_path=None):
            time.sleep(0.01)
            return ScorerResponse(p=0.5, model_version="slow-1")

        def complete(self, system, user, image_png=None):
            time.sleep(0.01)
            return "ok"

    wrapped = timer.wrap(SlowAdapter())
    assert wrapped.name == "slow"  # passthrough for plain attributes
    wrapped.score("c", None)
    wrapped.complete("s", "u")
    with timer.segment():
        time.sleep(0.01)
    assert timer.seconds >= 0.03


def test_adapter_timer_counts_failed_calls():
    timer = AdapterTimer()

    class FailingAdapter:
        def score(self, case_id, pixels, source_path=None):
            time.sleep(0.005)
            raise ToolError("down")

    wrapped = timer.wrap(FailingAdapter())
    with pytest.raises(ToolError):
        wrapped.score("c", None)
    assert timer.seconds >= 0.005

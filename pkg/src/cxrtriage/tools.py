"""Verification tools and the adapters that back them.

Three tool families sit behind the router: test-time augmentation (re-score
under small seeded perturbations), an expert committee (majority vote over
independent scorers), and a vision-language reviewer speaking a strict
single-line protocol. Scorers are reached through interchangeable transports:
in-process stubs, a line-oriented subprocess, or an HTTP endpoint.
"""

from __future__ import annotations

import base64
import json
import logging
import os
import re
import subprocess
import tempfile
import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
import requests

from cxrtriage import imaging

log = logging.getLogger(__name__)

DEFAULT_TTA_SAMPLES = 8
DEFAULT_TRANSPORT_RETRIES = 2

VLM_LINE_MARK = "===LINE==="
VLM_END_MARK = "===END==="
_CONF_RE = re.compile(r"^(?:\d+(?:\.\d*)?|\.\d+)$")


class ToolError(RuntimeError):
    """A tool could not produce a result (transport or adapter failure)."""


class VlmParseError(ValueError):
    """Reviewer reply violated the line protocol; ``kind`` classifies how."""

    def __init__(self, kind: str, detail: str = ""):
        super().__init__(f"vlm protocol violation [{kind}] {detail}".rstrip())
        self.kind = kind


def with_retries(fn, retries: int = DEFAULT_TRANSPORT_RETRIES, label: str = "adapter"):
    """Run fn(), retrying transport-level failures; raise ToolError after."""
    last = None
    for attempt in range(retries + 1):
        try:
            return fn()
        except ToolError as exc:
            last = exc
            log.warning("%s attempt %d/%d failed: %s", label, attempt + 1, retries + 1, exc)
    raise ToolError(f"{label} failed after {retries + 1} attempts: {last}")


# ---------------------------------------------------------------------------
# scorer adapters


@dataclass
class ScorerResponse:
    p: float
    model_version: str
    cam: np.ndarray = None

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0 or not np.isfinite(self.p):
            raise ToolError(f"scorer returned p={self.p!r} outside [0, 1]")


class StubScorer:
    """In-process scripted scorer (the test double and desk-run backend).

    Behaviors are keyed by case id. A call whose pixels fingerprint-match
    the scripted base image returns the scripted base posterior; other calls
    for the same case replay the scripted augmentation samples in order.
    Given identical input bytes and call history the outputs are identical.
    """

    def __init__(self, behaviors: dict, name: str = "stub", version: str = "stub-1"):
        self.behaviors = behaviors
        self.name = name
        self.version = version
        self.capabilities = {"cam"}
        self._aug_calls = {}

    def score(self, case_id: str, pixels: np.ndarray, source_path=None) -> ScorerResponse:
        spec = self.behaviors.get(case_id)
        if spec is None:
            raise ToolError(f"{self.name}: no scripted behavior for case {case_id}")
        fails = int(spec.get("fail_times", 0))
        if spec.get("fail") or self._aug_calls.get((case_id, "fails"), 0) < fails:
            self._aug_calls[(case_id, "fails")] = self._aug_calls.get((case_id, "fails"), 0) + 1
            raise ToolError(f"{self.name}: scripted transport failure for {case_id}")

        base_digest = spec.get("digest")
        if base_digest is None or imaging.pixel_fingerprint(pixels) == base_digest:
            p = float(spec["p"])
        else:
            samples = spec.get("tta") or [spec["p"]]
            idx = self._aug_calls.get((case_id, "aug"), 0)
            self._aug_calls[(case_id, "aug")] = idx + 1
            p = float(samples[idx % len(samples)])
        cam = spec.get("cam")
        return ScorerResponse(
            p=p,
            model_version=self.version,
            cam=None if cam is None else np.asarray(cam, dtype=np.float64),
        )


class SubprocessScorer:
    """Scorer spoken to over stdin/stdout: ``path<TAB>case_id`` in, ``p`` out.

    The child is spawned lazily and respawned after a failure. Calls without
    a source path (augmented images) write a temporary PNG first.
    """

    def __init__(self, cmd: list, name: str = "subprocess"):
        self.cmd = list(cmd)
        self.name = name
        self.version = f"subprocess:{os.path.basename(self.cmd[0])}"
        self.capabilities = set()
        self._proc = None

    def _child(self):
        if self._proc is None or self._proc.poll() is not None:
            self._proc = subprocess.Popen(
                self.cmd,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                bufsize=1,
            )
        return self._proc

    def close(self):
        if self._proc is not None and self._proc.poll() is None:
            self._proc.terminate()
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.kill()
        self._proc = None

    def score(self, case_id: str, pixels: np.ndarray, source_path=None) -> ScorerResponse:
        tmp = None
        if source_path is None:
            fd, tmp = tempfile.mkstemp(suffix=".png")
            os.close(fd)
            imaging.write_png(tmp, pixels)
            source_path = tmp
        try:
            child = self._child()
            child.stdin.write(f"{source_path}\t{case_id}\n")
            child.stdin.flush()
            line = child.stdout.readline()
            if not line:
                raise ValueError("child closed its output")
            return ScorerResponse(p=float(line.strip()), model_version=self.version)
        except (OSError, ValueError) as exc:
            self.close()
            raise ToolError(f"{self.name}: {exc}") from exc
        finally:
            if tmp is not None:
                os.unlink(tmp)


class HttpScorer:
    """Scorer behind an HTTP endpoint.

    Request: JSON ``{"case_id": ..., "image": <base64 PNG>}``.
    Response: JSON ``{"p": number, "cam": <base64 PNG, optional>,
    "model_version": string}``.
    """

    def __init__(self, endpoint: str, name: str = "http", timeout: float = 10.0):
        self.endpoint = endpoint
        self.name = name
        self.version = f"http:{endpoint}"
        self.timeout = timeout
        self.capabilities = {"cam"}

    def score(self, case_id: str, pixels: np.ndarray, source_path=None) -> ScorerResponse:
        payload = {
            "case_id": case_id,
            "image": base64.b64encode(imaging.encode_png(pixels)).decode(),
        }
        try:
            resp = requests.post(self.endpoint, json=payload, timeout=self.timeout)
            resp.raise_for_status()
            body = resp.json()
            p = float(body["p"])
            version = str(body.get("model_version", "unknown"))
            cam = None
            if body.get("cam"):
                cam = imaging.to_unit(imaging.decode_gray(base64.b64decode(body["cam"])))
        except (requests.RequestException, ValueError, KeyError, TypeError) as exc:
            raise ToolError(f"{self.name}: {exc}") from exc
        return ScorerResponse(p=p, model_version=version, cam=cam)


# ---------------------------------------------------------------------------
# confidence signal


@dataclass(frozen=True)
class ConfidenceSignal:
    """Posterior for the positive class plus the max-class reading of it."""

    p: float

    @property
    def c(self) -> float:
        return max(self.p, 1.0 - self.p)

    @property
    def label(self) -> str:
        return "positive" if self.p >= 0.5 else "negative"


# ---------------------------------------------------------------------------
# test-time augmentation


@dataclass
class TtaResult:
    samples: list
    mu: float
    sigma: float

    @property
    def mu_conf(self) -> float:
        return max(self.mu, 1.0 - self.mu)

    @property
    def label(self) -> str:
        return "positive" if self.mu >= 0.5 else "negative"


def run_tta(
    case_id: str,
    pixels: np.ndarray,
    adapter,
    k: int = DEFAULT_TTA_SAMPLES,
    seed: int = 0,
    retries: int = DEFAULT_TRANSPORT_RETRIES,
) -> TtaResult:
    """Score k augmented copies and summarize the posterior spread.

    Per sample, drawn in this order from one seeded generator: horizontal
    flip with probability 0.5, rotation uniform in [-5, +5] degrees, contrast
    scale uniform in [0.9, 1.1] about the mean intensity, then a clamp to
    [0, 1]. The spread uses the n-1 denominator. Geometry and photometric
    transforms run in single precision, and the augmented buffer is reused
    between samples: adapters must consume it inside the call, not retain it.
    """
    if k < 2:
        raise ValueError(f"test-time augmentation needs k >= 2, got {k}")
    rng = np.random.default_rng(seed)
    base = np.ascontiguousarray(pixels, dtype=np.float32)
    aug = np.empty_like(base)
    samples = []
    for _ in range(k):
        flip = bool(rng.random() < 0.5)
        angle = float(rng.uniform(-5.0, 5.0))
        scale = float(rng.uniform(0.9, 1.1))
        imaging.augment_geometry(base, angle, flip=flip, dst=aug)
        mean = float(aug.mean(dtype=np.float64))
        aug -= mean
        aug *= scale
        aug += mean
        np.clip(aug, 0.0, 1.0, out=aug)
        resp = with_retries(
            lambda: adapter.score(case_id, aug), retries=retries, label="tta scorer"
        )
        samples.append(resp.p)
    arr = np.array(samples)
    return TtaResult(samples=samples, mu=float(arr.mean()), sigma=float(arr.std(ddof=1)))


# ---------------------------------------------------------------------------
# expert committee


@dataclass
class MoeResult:
    votes: list  # (expert name, label) in committee order
    agreement: float
    majority_label: str
    tied: bool


def run_moe(
    case_id: str,
    pixels: np.ndarray,
    experts: list,
    base_label: str,
    retries: int = DEFAULT_TRANSPORT_RETRIES,
    source_path=None,
) -> MoeResult:
    """Majority vote of max-class labels across the committee.

    Agreement is majority count over committee size; an exact tie reads 1/2
    and the majority label falls back to the base classifier's label.
    """
    if len(experts) < 2:
        raise ValueError(f"committee needs at least two experts, got {len(experts)}")
    votes = []
    for expert in experts:
        resp = with_retries(
            lambda e=expert: e.score(case_id, pixels, source_path=source_path),
            retries=retries,
            label=f"expert {getattr(expert, 'name', '?')}",
        )
        votes.append((getattr(expert, "name", "expert"), ConfidenceSignal(resp.p).label))
    pos = sum(1 for _, lab in votes if lab == "positive")
    neg = len(votes) - pos
    if pos == neg:
        return MoeResult(votes=votes, agreement=0.5, majority_label=base_label, tied=True)
    majority = "positive" if pos > neg else "negative"
    return MoeResult(
        votes=votes,
        agreement=max(pos, neg) / len(votes),
        majority_label=majority,
        tied=False,
    )


# ---------------------------------------------------------------------------
# vision-language reviewer


@dataclass
class VlmResult:
    label: str  # positive / negative
    conf: float  # directional confidence, 1.0 = certainly positive
    explanation: str

    @property
    def ranking_conf(self) -> float:
        return max(self.conf, 1.0 - self.conf)


def parse_vlm_reply(text: str) -> VlmResult:
    """Parse a reviewer reply; accepts exactly the three-line protocol.

    Grammar: a ``===LINE===`` marker line, one ``L|C|E`` payload line, a
    ``===END===`` marker line, nothing else. L is 0 or 1, C a plain decimal
    in [0, 1], E is free text without '|'. L must equal [C >= 0.5].
    Violations raise VlmParseError with a classifying ``kind``.
    """
    if not isinstance(text, str):
        raise VlmParseError("markers", "reply is not text")
    lines = [ln.rstrip("\r") for ln in text.strip().split("\n")]
    if len(lines) != 3 or lines[0] != VLM_LINE_MARK or lines[2] != VLM_END_MARK:
        raise VlmParseError("markers", "expected marker, payload, marker")
    fields = lines[1].split("|")
    if len(fields) != 3:
        raise VlmParseError("field_count", f"expected 3 fields, got {len(fields)}")
    raw_label, raw_conf, explanation = fields
    if raw_label not in ("0", "1"):
        raise VlmParseError("label", f"label must be 0 or 1, got {raw_label!r}")
    if not _CONF_RE.match(raw_conf):
        raise VlmParseError("conf", f"confidence not a plain decimal: {raw_conf!r}")
    conf = float(raw_conf)
    if conf > 1.0:
        raise VlmParseError("conf_range", f"confidence {conf} outside [0, 1]")
    if (raw_label == "1") != (conf >= 0.5):
        raise VlmParseError("consistency", f"label {raw_label} contradicts conf {conf}")
    return VlmResult(
        label="positive" if raw_label == "1" else "negative",
        conf=conf,
        explanation=explanation,
    )


def format_vlm_line(label: str, conf: float, explanation: str) -> str:
    """Render a protocol-conformant reply (used by stubs and round-trip tests)."""
    bit = "1" if label == "positive" else "0"
    return f"{VLM_LINE_MARK}\n{bit}|{conf}|{explanation}\n{VLM_END_MARK}"


def run_vlm(
    case_id: str,
    pixels: np.ndarray,
    client,
    prompt: str,
    retries: int = DEFAULT_TRANSPORT_RETRIES,
) -> VlmResult:
    """Ask the reviewer for a protocol line; one fresh attempt on a bad parse."""
    image = imaging.encode_png(pixels)

    def ask():
        return with_retries(
            lambda: client.complete(
                system=prompt, user="Assess the attached chest radiograph.", image_png=image
            ),
            retries=retries,
            label="vlm client",
        )

    try:
        return parse_vlm_reply(ask())
    except VlmParseError as first:
        log.warning("vlm reply unparseable (%s) for %s, retrying once", first.kind, case_id)
        return parse_vlm_reply(ask())


# ---------------------------------------------------------------------------
# chat clients (vision-language reviewer and router model)


class StubChatClient:
    """Scripted chat client; a responder callable supplies every reply."""

    def __init__(self, responder, name: str = "stub-chat", version: str = "stub-chat-1"):
        self.responder = responder
        self.name = name
        self.version = version

    @classmethod
    def from_image_digests(cls, mapping: dict, **kw) -> "StubChatClient":
        """Answer by fingerprint of the attached image's decoded pixels."""

        def responder(system, user, image_png):
            if image_png is None:
                raise ToolError("scripted reviewer needs an image attachment")
            digest = imaging.pixel_fingerprint(imaging.to_unit(imaging.decode_gray(image_png)))
            try:
                return mapping[digest]
            except KeyError:
                raise ToolError(f"no scripted reply for image digest {digest[:12]}") from None

        return cls(responder, **kw)

    def complete(self, system: str, user: str, image_png: bytes = None) -> str:
        return self.responder(system, user, image_png)


class HttpChatClient:
    """Chat-completion endpoint: {system, user, image_b64?} -> {text}."""

    def __init__(self, endpoint: str, name: str = "http-chat", timeout: float = 30.0):
        self.endpoint = endpoint
        self.name = name
        self.version = f"http-chat:{endpoint}"
        self.timeout = timeout

    def complete(self, system: str, user: str, image_png: bytes = None) -> str:
        payload = {"system": system, "user": user}
        if image_png is not None:
            payload["image_b64"] = base64.b64encode(image_png).decode()
        try:
            resp = requests.post(self.endpoint, json=payload, timeout=self.timeout)
            resp.raise_for_status()
            return str(resp.json()["text"])
        except (requests.RequestException, ValueError, KeyError, TypeError) as exc:
            raise ToolError(f"{self.name}: {exc}") from exc


@dataclass
class AdapterTimer:
    """Accumulates wall time spent inside adapter calls for one case."""

    seconds: float = 0.0

    @contextmanager
    def segment(self):
        """Attribute a block of inline adapter work (e.g. segmentation)."""
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.seconds += time.perf_counter() - t0

    def wrap(self, adapter):
        timer = self

        class _Timed:
            def __init__(self, inner):
                self._inner = inner

            def __getattr__(self, item):
                return getattr(self._inner, item)

            def score(self, *a, **kw):
                t0 = time.perf_counter()
                try:
                    return self._inner.score(*a, **kw)
                finally:
                    timer.seconds += time.perf_counter() - t0

            def complete(self, *a, **kw):
                t0 = time.perf_counter()
                try:
                    return self._inner.complete(*a, **kw)
                finally:
                    timer.seconds += time.perf_counter() - t0

            def segment(self, *a, **kw):
                t0 = time.perf_counter()
                try:
                    return self._inner.segment(*a, **kw)
                finally:
                    timer.seconds += time.perf_counter() - t0

            def inpaint(self, *a, **kw):
                t0 = time.perf_counter()
                try:
                    return self._inner.inpaint(*a, **kw)
                finally:
                    timer.seconds += time.perf_counter() - t0

        return _Timed(adapter)

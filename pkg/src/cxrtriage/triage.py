"""Disposition of decided cases and the per-case audit trace.

Accepted cases land in positive/ or negative/, abstains in
Human_Intervention_Needed/ with a suggestion sidecar, undecodable inputs in
quarantine/. Every move is write-then-rename within the destination
filesystem; name collisions get a case-id suffix; an unwritable destination
diverts to holding/. Each case produces exactly one trace file under
traces/, validated against the published schema asset.
"""

from __future__ import annotations

import json
import logging
import os
import queue
import shutil
import threading
from dataclasses import dataclass
from functools import lru_cache
from importlib.resources import files

import jsonschema

from cxrtriage import TRACE_SCHEMA_VERSION, imaging

log = logging.getLogger(__name__)

DEST_POSITIVE = "positive"
DEST_NEGATIVE = "negative"
DEST_HUMAN = "Human_Intervention_Needed"
DEST_QUARANTINE = "quarantine"
FOLDER_NAMES = (DEST_POSITIVE, DEST_NEGATIVE, DEST_HUMAN, DEST_QUARANTINE, "holding", "traces")

TRACE_SCHEMA_ASSET = "trace_schema_v1.json"


@lru_cache(maxsize=1)
def load_trace_schema() -> dict:
    return json.loads(files("cxrtriage").joinpath(f"assets/{TRACE_SCHEMA_ASSET}").read_text())


@lru_cache(maxsize=1)
def _trace_validator() -> jsonschema.Draft202012Validator:
    schema = load_trace_schema()
    jsonschema.Draft202012Validator.check_schema(schema)
    return jsonschema.Draft202012Validator(schema)


def validate_trace(trace: dict) -> None:
    """Raise jsonschema.ValidationError when a trace violates the schema."""
    error = jsonschema.exceptions.best_match(_trace_validator().iter_errors(trace))
    if error is not None:
        raise error


def ensure_tree(out_root) -> dict:
    paths = {}
    for name in FOLDER_NAMES:
        path = os.path.join(out_root, name)
        os.makedirs(path, exist_ok=True)
        paths[name] = path
    return paths


def destination_for(outcome) -> str:
    if outcome.decision == "accept":
        return DEST_POSITIVE if outcome.final_label == "positive" else DEST_NEGATIVE
    return DEST_HUMAN


@dataclass
class DispositionResult:
    destination: str  # logical destination (folder the case belongs to)
    stored_path: str
    sidecar_path: str = None
    held: bool = False  # True when the file was diverted to holding/


def _atomic_move(source_path: str, dest_dir: str, filename: str, case_id: str) -> str:
    """Copy to a temp name inside dest_dir, rename, then drop the source."""
    final = os.path.join(dest_dir, filename)
    if os.path.exists(final):
        stem, ext = os.path.splitext(filename)
        final = os.path.join(dest_dir, f"{stem}_{case_id}{ext}")
    tmp = os.path.join(dest_dir, f".tmp-{case_id}")
    shutil.copyfile(source_path, tmp)
    os.replace(tmp, final)
    os.unlink(source_path)
    return final


def dispose(case_id: str, source_path: str, outcome, out_root) -> DispositionResult:
    """Move a decided case into its outcome folder.

    Abstains additionally get a ``.suggestion.txt`` sidecar with the
    suggested label, rationale and decision confidence.
    """
    tree = ensure_tree(out_root)
    destination = destination_for(outcome)
    filename = os.path.basename(source_path)
    try:
        stored = _atomic_move(source_path, tree[destination], filename, case_id)
        held = False
    except OSError as exc:
        log.error("destination %s unwritable for %s: %s; holding", destination, case_id, exc)
        stored = _atomic_move(source_path, tree["holding"], filename, case_id)
        held = True

    sidecar = None
    if outcome.decision == "abstain" and not held:
        stem, _ = os.path.splitext(os.path.basename(stored))
        sidecar = os.path.join(tree[DEST_HUMAN], f"{stem}.suggestion.txt")
        body = (
            f"suggested_label: {outcome.suggested_label}\n"
            f"rationale: {outcome.rationale}\n"
            f"confidence: {outcome.confidence}\n"
        )
        tmp = f"{sidecar}.tmp-{case_id}"
        with open(tmp, "w") as fh:
            fh.write(body)
        os.replace(tmp, sidecar)
    return DispositionResult(
        destination=destination, stored_path=stored, sidecar_path=sidecar, held=held
    )


def dispose_quarantine(case_id: str, source_path: str, out_root) -> DispositionResult:
    tree = ensure_tree(out_root)
    stored = _atomic_move(source_path, tree[DEST_QUARANTINE], os.path.basename(source_path), case_id)
    return DispositionResult(destination=DEST_QUARANTINE, stored_path=stored)


def write_trace(trace: dict, out_root) -> str:
    """Persist one schema-valid trace with stable key order."""
    validate_trace(trace)
    tree = ensure_tree(out_root)
    path = os.path.join(tree["traces"], f"{trace['case_id']}.trace.json")
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(trace, fh, sort_keys=True, indent=2)
        fh.write("\n")
    os.replace(tmp, path)
    return path


def read_traces(out_root) -> list:
    """Load every trace under out_root/traces in name order."""
    traces_dir = os.path.join(out_root, "traces")
    out = []
    for name in sorted(os.listdir(traces_dir)):
        if name.endswith(".trace.json"):
            with open(os.path.join(traces_dir, name)) as fh:
                out.append(json.load(fh))
    return out


class ArtifactWriter:
    """Flush bulky artifact files off the decision path.

    One background thread drains a queue of (path, bytes) pairs. Callers
    block on ``drain`` (or ``close``) before reporting a batch done so the
    output tree is complete when anyone looks. A failed write is logged and
    recorded rather than raised: by the time it surfaces the decision and
    trace are already final, and a missing visual does not change either.
    """

    def __init__(self):
        self._queue = queue.Queue()
        self.failures = []
        self._thread = threading.Thread(target=self._run, name="artifact-writer", daemon=True)
        self._thread.start()

    def submit(self, path, data: bytes) -> None:
        self._queue.put((path, data))

    def _run(self) -> None:
        while True:
            item = self._queue.get()
            try:
                if item is None:
                    return
                path, data = item
                try:
                    with open(path, "wb") as fh:
                        fh.write(data)
                except OSError as exc:
                    log.error("artifact write failed for %s: %s", path, exc)
                    self.failures.append((str(path), str(exc)))
            finally:
                self._queue.task_done()

    def drain(self) -> None:
        self._queue.join()

    def close(self) -> None:
        self._queue.put(None)
        self._thread.join()


def persist_artifacts(
    case_id: str, out_root, cam_artifact=None, suppressed=None, writer: ArtifactWriter = None
) -> dict:
    """Encode artifact images next to the traces; returns relative paths.

    With a ``writer`` the encoded bytes are handed off for background
    writing; otherwise files land before returning.
    """
    tree = ensure_tree(out_root)

    def put(path, pixels):
        data = imaging.encode_png_stored(pixels)
        if writer is None:
            with open(path, "wb") as fh:
                fh.write(data)
        else:
            writer.submit(path, data)

    written = {"cam": None, "cam_overlay": None, "suppressed": None}
    if cam_artifact is not None:
        heat_path = os.path.join(tree["traces"], f"{case_id}.cam.png")
        put(heat_path, cam_artifact.native_u8)
        over_path = os.path.join(tree["traces"], f"{case_id}.cam_overlay.png")
        put(over_path, cam_artifact.overlay)
        written["cam"] = os.path.relpath(heat_path, out_root)
        written["cam_overlay"] = os.path.relpath(over_path, out_root)
    if suppressed is not None:
        sup_path = os.path.join(tree["traces"], f"{case_id}.suppressed.png")
        put(sup_path, suppressed)
        written["suppressed"] = os.path.relpath(sup_path, out_root)
    return written


def destination_counts(out_root) -> dict:
    """Count stored cases per folder (sidecars and traces excluded)."""
    counts = {}
    for name in FOLDER_NAMES:
        folder = os.path.join(out_root, name)
        if name == "traces" or not os.path.isdir(folder):
            continue
        entries = [
            f
            for f in os.listdir(folder)
            if not f.endswith(".suggestion.txt") and not f.startswith(".tmp-")
        ]
        counts[name] = len(entries)
    return counts


def trace_template(case_id: str) -> dict:
    """Skeleton trace with every schema-required key present."""
    return {
        "schema_version": TRACE_SCHEMA_VERSION,
        "case_id": case_id,
        "source": {"path": None, "format": None, "original_size": None, "resize_filter": "bilinear"},
        "timestamps": {"received": "", "decided": ""},
        "versions": {
            "engine": "",
            "router_prompt": "",
            "trace_schema": TRACE_SCHEMA_VERSION,
            "model_file": None,
            "adapters": {},
        },
        "config_hash": "0" * 16,
        "thresholds": {"tau_conf": 0.0, "tau_tta": 0.0, "tau_moe": 0.0, "tau_ood": None},
        "router": None,
        "signals": None,
        "guardrail": None,
        "tool_events": [],
        "decisions": [],
        "violations": [],
        "decision": {
            "decision": "quarantine",
            "final_label": None,
            "suggested_label": None,
            "rationale": "",
            "decided_by": "ingestion",
            "confidence": None,
            "unlocked_by": None,
        },
        "artifacts": {"cam": None, "cam_overlay": None, "suppressed": None, "lwi": None, "notes": []},
        "destination": DEST_QUARANTINE,
        "timing": {"orchestration_ms": 0.0, "adapter_ms": 0.0},
    }

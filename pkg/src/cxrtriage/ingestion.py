"""Folder ingestion: watching, decoding and normalizing incoming cases.

A polling watcher emits each file exactly once, after its size has been
stable for the configured window. Formats are inferred from magic bytes,
never from the extension alone; DICOM needs a decode adapter and is
quarantined as unsupported without one. Every decoded image becomes an
8-bit grayscale matrix, bilinearly resized to 1024 x 1024 and scaled to
[0, 1]. Case ids are the first 16 hex digits of the content hash, with a
counter suffix on duplicate content.
"""

from __future__ import annotations

import hashlib
import logging
import os
import queue
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from cxrtriage import imaging

log = logging.getLogger(__name__)

TARGET_SIZE = 1024
ACCEPTED_SUFFIXES = (".dcm", ".png", ".jpg", ".jpeg")
DEFAULT_POLL_INTERVAL = 0.5
DEFAULT_STABILITY_WINDOW = 1.0

# Metadata fields scrubbed before anything is persisted or logged.
DEFAULT_PHI_FIELDS = (
    "PatientName",
    "PatientID",
    "PatientBirthDate",
    "PatientSex",
    "PatientAddress",
    "AccessionNumber",
    "ReferringPhysicianName",
    "InstitutionName",
    "StationName",
    "OperatorsName",
)


class WatcherError(RuntimeError):
    """The watched folder disappeared or became unlistable."""


class UnsupportedFormatError(ValueError):
    """Input bytes are not a format this deployment can decode."""


class DecodeError(ValueError):
    """Input bytes claimed a known format but did not decode."""


@dataclass
class RawCase:
    path: str
    data: bytes
    detected_at: float


@dataclass
class QuarantineEvent:
    path: str
    reason: str


@dataclass
class CaseRecord:
    case_id: str
    pixels: np.ndarray  # (1024, 1024) float64 in [0, 1]
    source_path: str
    source_meta: dict = field(default_factory=dict)
    received_at: float = 0.0


def sniff_format(data: bytes):
    """Identify png/jpeg/dicom from magic bytes; None when unrecognized."""
    if data[:8] == b"\x89PNG\r\n\x1a\n":
        return "png"
    if data[:3] == b"\xff\xd8\xff":
        return "jpeg"
    if len(data) > 132 and data[128:132] == b"DICM":
        return "dicom"
    return None


class CaseIdAllocator:
    """Content-hash ids, disambiguated with a counter on duplicate bytes."""

    def __init__(self):
        self._seen = {}
        self._lock = threading.Lock()

    def allocate(self, data: bytes) -> str:
        base = hashlib.sha256(data).hexdigest()[:16]
        with self._lock:
            n = self._seen.get(base, 0)
            self._seen[base] = n + 1
        return base if n == 0 else f"{base}-{n}"


def normalize_case(
    raw: RawCase,
    case_id: str,
    dicom_decoder=None,
    phi_drop=DEFAULT_PHI_FIELDS,
) -> CaseRecord:
    """Decode and normalize one raw case to the canonical record.

    Raises UnsupportedFormatError for unrecognized bytes or DICOM without a
    decoder, DecodeError for corrupt payloads. No pixel leaves this function
    outside [0, 1].
    """
    fmt = sniff_format(raw.data)
    if fmt is None:
        raise UnsupportedFormatError("unsupported_format")

    meta = {}
    if fmt == "dicom":
        if dicom_decoder is None:
            raise UnsupportedFormatError("unsupported_format")
        gray, dicom_meta = dicom_decoder.decode(raw.data)
        gray = np.asarray(gray)
        meta.update({k: v for k, v in (dicom_meta or {}).items() if k not in set(phi_drop)})
    else:
        try:
            gray = imaging.decode_gray(raw.data)
        except ValueError as exc:
            raise DecodeError(f"undecodable_image: {exc}") from exc

    if gray.ndim != 2 or gray.size == 0:
        raise DecodeError(f"decoded image has bad shape {gray.shape}")
    original_size = [int(gray.shape[0]), int(gray.shape[1])]
    resized = imaging.resize_bilinear(gray, TARGET_SIZE, TARGET_SIZE)
    pixels = imaging.to_unit(resized)
    if resized.dtype != np.uint8:  # 8-bit input is in range by construction
        pixels = np.clip(pixels, 0.0, 1.0)
    meta.update({"format": fmt, "original_size": original_size})
    return CaseRecord(
        case_id=case_id,
        pixels=pixels,
        source_path=raw.path,
        source_meta=meta,
        received_at=raw.detected_at,
    )


def watch_folder(
    input_dir,
    poll_interval: float = DEFAULT_POLL_INTERVAL,
    stability_window: float = DEFAULT_STABILITY_WINDOW,
    stop_event: threading.Event = None,
    suffixes=ACCEPTED_SUFFIXES,
):
    """Yield RawCase / QuarantineEvent items from a polled drop folder.

    A file is emitted once its size has not changed for stability_window
    seconds, and never again afterwards. Unreadable files yield a quarantine
    event instead. The generator raises WatcherError if the folder vanishes
    and returns cleanly when stop_event is set.
    """
    sizes = {}
    done = set()
    while stop_event is None or not stop_event.is_set():
        if not os.path.isdir(input_dir):
            raise WatcherError(f"watched folder vanished: {input_dir}")
        now = time.monotonic()
        try:
            names = sorted(os.listdir(input_dir))
        except OSError as exc:
            raise WatcherError(f"cannot list {input_dir}: {exc}") from exc
        for name in names:
            path = os.path.join(input_dir, name)
            if path in done or not os.path.isfile(path):
                continue
            if os.path.splitext(name)[1].lower() not in suffixes:
                continue
            try:
                size = os.path.getsize(path)
            except OSError:
                continue  # vanished mid-poll; retry next round
            entry = sizes.get(path)
            if entry is None or entry[0] != size:
                sizes[path] = (size, now)
                continue
            if now - entry[1] < stability_window:
                continue
            done.add(path)
            try:
                with open(path, "rb") as fh:
                    data = fh.read()
            except OSError as exc:
                yield QuarantineEvent(path=path, reason=f"unreadable: {exc}")
                continue
            yield RawCase(path=path, data=data, detected_at=time.time())
        if stop_event is None:
            time.sleep(poll_interval)
        else:
            stop_event.wait(poll_interval)


class QueueClosed(RuntimeError):
    pass


class CaseQueue:
    """Bounded handoff between the watcher and workers.

    ``put`` blocks when full (backpressure) and raises once the queue is
    closed; ``get`` returns None when the queue is closed and drained.
    """

    def __init__(self, maxsize: int = 8):
        self._q = queue.Queue(maxsize=maxsize)
        self._closed = threading.Event()

    def put(self, item, timeout: float = None) -> None:
        if self._closed.is_set():
            raise QueueClosed("queue is closed")
        self._q.put(item, timeout=timeout)

    def get(self, timeout: float = None):
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            try:
                return self._q.get(timeout=0.05)
            except queue.Empty:
                if self._closed.is_set() and self._q.empty():
                    return None
                if deadline is not None and time.monotonic() > deadline:
                    raise

    def close(self) -> None:
        self._closed.set()

    def __len__(self) -> int:
        return self._q.qsize()

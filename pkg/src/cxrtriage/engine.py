"""Orchestration engine: raw files in, decided and filed cases out.

Wires the adapters (scorer, expert committee, reviewer, router model,
segmentation) into the guardrail and routing policies, then disposes each
case and writes its audit trace. Timing is split into orchestration and
adapter components so remote-model latency can be accounted separately.

A failing base scorer is fatal: without a posterior no routing is possible,
so the engine raises instead of silently abstaining on every case.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

from cxrtriage import __version__, features, imaging, ingestion, policy, quantify, tools, triage

log = logging.getLogger(__name__)

DEFAULT_COMMITTEE_SIZE = 4

_libs_warm = False


def _warm_imaging_libs() -> None:
    """Exercise the warp, colormap, and deflate paths once on tiny inputs.

    cv2 spins up worker pools and zlib allocates its state lazily; paying
    those one-time costs at construction keeps them out of the first
    case's latency measurement.
    """
    global _libs_warm
    if _libs_warm:
        return
    tiny = np.zeros((32, 32), dtype=np.float32)
    imaging.augment_geometry(tiny, 1.0, flip=True)
    quantify.build_cam_artifact(np.zeros((32, 32)), np.eye(2))
    imaging.encode_png_stored(np.zeros((32, 32), dtype=np.uint8))
    _libs_warm = True


class EngineAdapterError(RuntimeError):
    """The base scorer could not produce a posterior after retries."""


# ---------------------------------------------------------------------------
# scripted adapters beyond the generic tool stubs


class _ScriptExpert:
    """One committee member reading its vote from the stub script."""

    def __init__(self, index: int, cases: dict):
        self.index = index
        self.name = f"expert_{index}"
        self.version = f"script-expert:{index}"
        self._cases = cases

    def score(self, case_id: str, pixels, source_path=None) -> tools.ScorerResponse:
        spec = self._cases.get(case_id)
        if spec is None:
            raise tools.ToolError(f"{self.name}: no scripted vote for case {case_id}")
        votes = spec.get("moe")
        if not votes:
            raise tools.ToolError(f"{self.name}: case {case_id} has no committee script")
        return tools.ScorerResponse(
            p=float(votes[self.index % len(votes)]), model_version=self.version
        )


class RubricRouterClient:
    """Deterministic stand-in for the routing model.

    Applies a fixed playbook to the serialized state: quantify when offered,
    accept when permitted (keeping the session open for positive cases so
    quantification can follow), otherwise escalate through the verification
    tools in their published order, and abstain when nothing is left.
    """

    name = "rubric-router"
    version = "rubric-router:1"

    def complete(self, system: str, user: str, image_png: bytes = None) -> str:
        state = json.loads(user[user.index("{"): user.rindex("}") + 1])
        available = state.get("available_tools") or []
        if "POST_ACCEPT" in available:
            choice = {"next_tool": "POST_ACCEPT", "stop": True, "reason": "quantify opacity"}
        elif "accept" in available:
            choice = {
                "next_tool": "accept",
                "stop": float(state.get("p") or 0.0) < 0.5,
                "reason": "confidence in accept region",
            }
        else:
            for tool in ("tta", "moe", "vlm"):
                if tool in available:
                    choice = {"next_tool": tool, "stop": False, "reason": "escalate verification"}
                    break
            else:
                choice = {"next_tool": "abstain", "stop": True, "reason": "no tools remaining"}
        return json.dumps(choice)


# ---------------------------------------------------------------------------
# toolset wiring


@dataclass
class Toolset:
    """Resolved adapter instances for one engine."""

    scorer: object
    experts: list
    vlm_client: object = None
    llm_client: object = None
    seg_adapter: object = None
    inpaint_adapter: object = None
    dicom_decoder: object = None

    def close(self) -> None:
        for adapter in (self.scorer, *self.experts, self.vlm_client, self.llm_client):
            close = getattr(adapter, "close", None)
            if callable(close):
                close()


def build_toolset(config) -> Toolset:
    """Instantiate every adapter named by the configuration.

    Stub transports replay the cohort's stub script and therefore require
    ``stub_script`` to be set.
    """
    from cxrtriage.cohort import load_stub_script

    script = load_stub_script(config.stub_script) if config.stub_script else None
    cases = script["cases"] if script else None

    def need_script(what: str) -> dict:
        if cases is None:
            raise ValueError(f"{what} uses the stub transport but no stub_script is configured")
        return cases

    transport = config.scorer.get("transport", "stub")
    if transport == "stub":
        scorer = tools.StubScorer(need_script("scorer"))
    elif transport == "subprocess":
        scorer = tools.SubprocessScorer(cmd=list(config.scorer["cmd"]))
    elif transport == "http":
        scorer = tools.HttpScorer(
            endpoint=config.scorer["endpoint"],
            timeout=float(config.scorer.get("timeout", 10.0)),
        )
    else:
        raise ValueError(f"unknown scorer transport {transport!r}")

    experts = []
    if config.experts:
        for i, entry in enumerate(config.experts):
            kind = entry.get("transport", "http")
            name = entry.get("name", f"expert_{i}")
            if kind == "http":
                experts.append(tools.HttpScorer(endpoint=entry["endpoint"], name=name))
            elif kind == "subprocess":
                experts.append(tools.SubprocessScorer(cmd=list(entry["cmd"]), name=name))
            else:
                raise ValueError(f"unknown expert transport {kind!r}")
    else:
        committee = need_script("expert committee")
        experts = [_ScriptExpert(i, committee) for i in range(DEFAULT_COMMITTEE_SIZE)]

    vlm_transport = config.vlm.get("transport", "stub")
    if vlm_transport == "stub":
        replies = {
            spec["digest"]: spec["vlm"]
            for spec in need_script("reviewer").values()
            if spec.get("vlm")
        }
        vlm_client = tools.StubChatClient.from_image_digests(replies)
    elif vlm_transport == "http":
        vlm_client = tools.HttpChatClient(endpoint=config.vlm["endpoint"])
    elif vlm_transport == "none":
        vlm_client = None
    else:
        raise ValueError(f"unknown vlm transport {vlm_transport!r}")

    llm_transport = config.llm.get("transport", "rubric")
    if llm_transport == "rubric":
        llm_client = RubricRouterClient()
    elif llm_transport == "http":
        llm_client = tools.HttpChatClient(endpoint=config.llm["endpoint"])
    elif llm_transport == "none":
        llm_client = None
    else:
        raise ValueError(f"unknown llm transport {llm_transport!r}")

    if config.segmentation == "ellipse":
        seg_adapter = quantify.EllipseLungAdapter()
    elif config.segmentation == "none":
        seg_adapter = None
    else:
        raise ValueError(f"unknown segmentation adapter {config.segmentation!r}")

    return Toolset(
        scorer=scorer,
        experts=experts,
        vlm_client=vlm_client,
        llm_client=llm_client,
        seg_adapter=seg_adapter,
    )


class CaseToolbox:
    """Per-case verification tools bound to one record and one timer."""

    def __init__(self, record, toolset: Toolset, config, timer: tools.AdapterTimer):
        self._record = record
        self._toolset = toolset
        self._config = config
        self._timer = timer
        seed_material = hashlib.sha256(f"{config.seed}:{record.case_id}".encode()).digest()
        self.tta_seed = int.from_bytes(seed_material[:8], "big")

    def tta(self) -> tools.TtaResult:
        return tools.run_tta(
            self._record.case_id,
            self._record.pixels,
            self._timer.wrap(self._toolset.scorer),
            k=self._config.tta_k,
            seed=self.tta_seed,
            retries=self._config.retries,
        )

    def moe(self, base_label: str) -> tools.MoeResult:
        experts = [self._timer.wrap(e) for e in self._toolset.experts]
        return tools.run_moe(
            self._record.case_id,
            self._record.pixels,
            experts,
            base_label,
            retries=self._config.retries,
            source_path=self._record.source_path,
        )

    def vlm(self) -> tools.VlmResult:
        client = self._toolset.vlm_client
        if client is None:
            raise tools.ToolError("no reviewer client configured")
        return tools.run_vlm(
            self._record.case_id,
            self._record.pixels,
            self._timer.wrap(client),
            prompt=policy.load_asset(policy.VLM_PROMPT_ASSET),
            retries=self._config.retries,
        )


# ---------------------------------------------------------------------------
# the engine


@dataclass
class CaseResult:
    case_id: str
    decision: str  # accept | abstain | quarantine
    final_label: str
    destination: str
    trace_path: str
    total_ms: float
    adapter_ms: float

    @property
    def orchestration_ms(self) -> float:
        return max(self.total_ms - self.adapter_ms, 0.0)


@dataclass
class BatchSummary:
    counts: dict
    mean_orchestration_ms: float
    results: list = field(default_factory=list)


def _iso(epoch: float) -> str:
    return datetime.fromtimestamp(epoch, tz=timezone.utc).isoformat()


class TriageEngine:
    """Drives one case from raw bytes to disposition plus audit trace."""

    def __init__(self, config, bundle, toolset: Toolset, out_root):
        if config.router == "llm" and toolset.llm_client is None:
            raise ValueError("router=llm requires an llm client transport")
        self.config = config
        self.bundle = bundle
        self.toolset = toolset
        self.out_root = str(out_root)
        self.thresholds = policy.Thresholds(
            tau_conf=config.tau_conf, tau_tta=config.tau_tta, tau_moe=config.tau_moe
        )
        self.router_policy = policy.RouterPolicy(
            mode=config.policy_mode,
            max_auto_accept_frd_multiple=config.max_auto_accept_frd_multiple,
        )
        self.allocator = ingestion.CaseIdAllocator()
        self._config_hash = config.snapshot_hash()
        self._versions = self._adapter_versions()
        self._artifact_writer = None
        triage.ensure_tree(self.out_root)
        _warm_imaging_libs()

    def _adapter_versions(self) -> dict:
        versions = {"scorer": str(getattr(self.toolset.scorer, "version", "unknown"))}
        for expert in self.toolset.experts:
            versions[str(expert.name)] = str(getattr(expert, "version", "unknown"))
        for key, adapter in (
            ("vlm", self.toolset.vlm_client),
            ("llm", self.toolset.llm_client),
            ("segmentation", self.toolset.seg_adapter),
        ):
            if adapter is not None:
                versions[key] = str(getattr(adapter, "version", "unknown"))
        return versions

    # -- single-case paths --------------------------------------------------

    def process_path(self, path) -> CaseResult:
        t_start = time.perf_counter()
        try:
            with open(path, "rb") as fh:
                data = fh.read()
        except OSError as exc:
            return self._trace_unreadable(str(path), f"unreadable: {exc}", t_start)
        raw = ingestion.RawCase(path=str(path), data=data, detected_at=time.time())
        return self._process_raw(raw, t_start)

    def process_raw(self, raw) -> CaseResult:
        return self._process_raw(raw, time.perf_counter())

    def _process_raw(self, raw, t_start: float) -> CaseResult:
        case_id = self.allocator.allocate(raw.data)
        try:
            record = ingestion.normalize_case(
                raw,
                case_id,
                dicom_decoder=self.toolset.dicom_decoder,
                phi_drop=self.config.phi_drop,
            )
        except (ingestion.UnsupportedFormatError, ingestion.DecodeError) as exc:
            return self._quarantine(case_id, raw, str(exc), t_start)
        return self._decide(record, t_start)

    def _decide(self, record, t_start: float) -> CaseResult:
        config = self.config
        timer = tools.AdapterTimer()
        scorer = timer.wrap(self.toolset.scorer)
        try:
            response = tools.with_retries(
                lambda: scorer.score(record.case_id, record.pixels, source_path=record.source_path),
                retries=config.retries,
                label="base scorer",
            )
        except tools.ToolError as exc:
            raise EngineAdapterError(f"base scorer failed for {record.case_id}: {exc}") from exc

        conf = tools.ConfidenceSignal(p=response.p)
        raw_features = features.extract_features(record.pixels)
        _, ood_signal = self.bundle.score_raw(raw_features)
        guard = policy.evaluate_guardrail(conf, ood_signal, self.thresholds)
        toolbox = CaseToolbox(record, self.toolset, config, timer)

        if config.router == "llm":
            run = policy.run_llm_router(
                conf,
                ood_signal,
                guard,
                toolbox,
                self.thresholds,
                self.router_policy,
                timer.wrap(self.toolset.llm_client),
                max_steps=config.max_steps,
            )
        else:
            run = policy.run_rule_router(conf, guard, toolbox, self.thresholds)
        outcome = run.outcome

        artifacts = {"cam": None, "cam_overlay": None, "suppressed": None, "lwi": None, "notes": []}
        if outcome.decision == "accept" and outcome.final_label == "positive":
            artifacts = self._quantify_positive(record, response, timer)

        disposition = triage.dispose(record.case_id, record.source_path, outcome, self.out_root)
        if disposition.held:
            artifacts["notes"].append("destination_unwritable_held")

        decided_at = time.time()
        total_ms = (time.perf_counter() - t_start) * 1000.0
        adapter_ms = timer.seconds * 1000.0

        trace = triage.trace_template(record.case_id)
        trace["source"].update(
            {
                "path": record.source_path,
                "format": record.source_meta.get("format"),
                "original_size": record.source_meta.get("original_size"),
            }
        )
        trace["timestamps"] = {"received": _iso(record.received_at), "decided": _iso(decided_at)}
        self._common_trace_fields(trace)
        trace["router"] = config.router
        trace["signals"] = {
            "p": conf.p,
            "c": conf.c,
            "label_initial": conf.label,
            "frd_maha": ood_signal.score,
            "thr_maha": ood_signal.tau,
            "in_domain": not ood_signal.is_ood,
        }
        trace["guardrail"] = {
            "allow_accept": guard.allow_accept,
            "available_tools": list(guard.available_tools),
        }
        trace["tool_events"] = run.events
        trace["decisions"] = [d.as_dict() for d in run.decisions]
        trace["violations"] = run.violations
        # final_label echoes the suggestion for abstains so coverage sweeps
        # always have a label to score at full coverage.
        trace["decision"] = {
            "decision": outcome.decision,
            "final_label": outcome.final_label,
            "suggested_label": outcome.suggested_label,
            "rationale": outcome.rationale,
            "decided_by": outcome.decided_by,
            "confidence": outcome.confidence,
            "unlocked_by": outcome.unlocked_by,
        }
        trace["artifacts"] = artifacts
        trace["destination"] = disposition.destination
        trace["timing"] = {
            "orchestration_ms": max(total_ms - adapter_ms, 0.0),
            "adapter_ms": adapter_ms,
        }
        trace_path = triage.write_trace(trace, self.out_root)
        return CaseResult(
            case_id=record.case_id,
            decision=outcome.decision,
            final_label=outcome.final_label,
            destination=disposition.destination,
            trace_path=trace_path,
            total_ms=total_ms,
            adapter_ms=adapter_ms,
        )

    def _quantify_positive(self, record, response, timer: tools.AdapterTimer) -> dict:
        seg = self.toolset.seg_adapter
        inpaint = self.toolset.inpaint_adapter
        report, suppressed, notes = quantify.quantify_opacity(
            record.case_id,
            record.pixels,
            seg_adapter=None if seg is None else timer.wrap(seg),
            inpaint_adapter=None if inpaint is None else timer.wrap(inpaint),
        )
        cam_artifact = None
        if response.cam is None:
            notes.append("cam_unavailable")
        else:
            try:
                cam_artifact = quantify.build_cam_artifact(record.pixels, response.cam)
            except ValueError as exc:
                log.warning("malformed cam for %s: %s", record.case_id, exc)
                notes.append("cam_malformed")
        if suppressed is record.pixels:
            # No-op suppression: the image is byte-identical to the source
            # already filed in the destination folder, so storing a second
            # copy would say nothing.
            suppressed = None
        written = triage.persist_artifacts(
            record.case_id,
            self.out_root,
            cam_artifact=cam_artifact,
            suppressed=suppressed,
            writer=self._artifact_writer,
        )
        written["lwi"] = None if report is None else report.as_dict()
        written["notes"] = notes
        return written

    def _common_trace_fields(self, trace: dict) -> None:
        trace["versions"].update(
            {
                "engine": f"cxrtriage:{__version__}",
                "router_prompt": policy.asset_version_tag(policy.ROUTER_PROMPT_ASSET),
                "model_file": self.bundle.version_tag or None,
                "adapters": dict(self._versions),
            }
        )
        trace["config_hash"] = self._config_hash
        trace["thresholds"] = {
            "tau_conf": self.config.tau_conf,
            "tau_tta": self.config.tau_tta,
            "tau_moe": self.config.tau_moe,
            "tau_ood": self.bundle.tau_ood,
        }

    def _quarantine(self, case_id: str, raw, reason: str, t_start: float) -> CaseResult:
        notes = [reason]
        try:
            disposition = triage.dispose_quarantine(case_id, raw.path, self.out_root)
            destination = disposition.destination
        except OSError as exc:
            log.error("cannot move %s to quarantine: %s", raw.path, exc)
            notes.append("source_left_in_place")
            destination = triage.DEST_QUARANTINE
        decided_at = time.time()
        trace = triage.trace_template(case_id)
        trace["source"].update(
            {"path": str(raw.path), "format": ingestion.sniff_format(raw.data)}
        )
        trace["timestamps"] = {"received": _iso(raw.detected_at), "decided": _iso(decided_at)}
        self._common_trace_fields(trace)
        trace["decision"]["rationale"] = reason
        trace["artifacts"]["notes"] = notes
        total_ms = (time.perf_counter() - t_start) * 1000.0
        trace["timing"] = {"orchestration_ms": total_ms, "adapter_ms": 0.0}
        trace_path = triage.write_trace(trace, self.out_root)
        return CaseResult(
            case_id=case_id,
            decision="quarantine",
            final_label=None,
            destination=destination,
            trace_path=trace_path,
            total_ms=total_ms,
            adapter_ms=0.0,
        )

    def _trace_unreadable(self, path: str, reason: str, t_start: float) -> CaseResult:
        case_id = hashlib.sha256(path.encode()).hexdigest()[:16]
        raw = ingestion.RawCase(path=path, data=b"", detected_at=time.time())
        return self._quarantine(case_id, raw, reason, t_start)

    # -- batch and watch ----------------------------------------------------

    def run_batch(self, paths) -> BatchSummary:
        ordered = sorted(str(p) for p in paths)
        self._artifact_writer = triage.ArtifactWriter()
        try:
            if self.config.workers <= 1:
                results = [self.process_path(p) for p in ordered]
            else:
                with ThreadPoolExecutor(max_workers=self.config.workers) as pool:
                    results = list(pool.map(self.process_path, ordered))
        finally:
            self._artifact_writer.close()
            self._artifact_writer = None
        return summarize_results(results)

    def watch(self, input_dir, stop_event: threading.Event = None, callback=None) -> None:
        """Watch a drop folder until stopped; one callback per finished case."""
        self._artifact_writer = triage.ArtifactWriter()
        try:
            self._watch(input_dir, stop_event, callback)
        finally:
            self._artifact_writer.close()
            self._artifact_writer = None

    def _watch(self, input_dir, stop_event, callback) -> None:
        stop = stop_event if stop_event is not None else threading.Event()
        queue = ingestion.CaseQueue(maxsize=self.config.queue_size)
        errors = []

        def pump():
            try:
                for item in ingestion.watch_folder(
                    input_dir,
                    poll_interval=self.config.poll_ms / 1000.0,
                    stability_window=self.config.stability_ms / 1000.0,
                    stop_event=stop,
                ):
                    queue.put(item)
            except Exception as exc:  # watcher failure ends the run
                errors.append(exc)
                stop.set()
            finally:
                queue.close()

        def work():
            while True:
                item = queue.get()
                if item is None:  # queue closed and drained
                    return
                try:
                    if isinstance(item, ingestion.QuarantineEvent):
                        result = self._trace_unreadable(
                            str(item.path), item.reason, time.perf_counter()
                        )
                    else:
                        result = self.process_raw(item)
                except Exception as exc:
                    errors.append(exc)
                    stop.set()
                    return
                if callback is not None:
                    callback(result)

        producer = threading.Thread(target=pump, name="cxr-watch", daemon=True)
        producer.start()
        workers = [
            threading.Thread(target=work, name=f"cxr-case-{i}", daemon=True)
            for i in range(max(1, self.config.workers))
        ]
        for thread in workers:
            thread.start()
        try:
            for thread in workers:
                thread.join()
            producer.join()
        except KeyboardInterrupt:
            # Graceful stop: the watcher exits and closes the queue, workers
            # drain whatever was already picked up, then we return normally.
            stop.set()
            for thread in workers:
                thread.join()
            producer.join()
        if errors:
            raise errors[0]


def summarize_results(results: list) -> BatchSummary:
    counts = {"accepted_pos": 0, "accepted_neg": 0, "abstained": 0, "quarantined": 0}
    for result in results:
        if result.decision == "accept":
            key = "accepted_pos" if result.final_label == "positive" else "accepted_neg"
            counts[key] += 1
        elif result.decision == "abstain":
            counts["abstained"] += 1
        else:
            counts["quarantined"] += 1
    mean = (
        sum(r.orchestration_ms for r in results) / len(results) if results else 0.0
    )
    return BatchSummary(counts=counts, mean_orchestration_ms=mean, results=results)

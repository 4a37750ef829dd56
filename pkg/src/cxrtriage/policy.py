"""Guardrail and routing policy.

The guardrail derives the permitted action set from two signals: the
Mahalanobis distance against its calibrated threshold (out-of-distribution
check) and the max-class confidence against the accept threshold. Direct
acceptance requires both in-distribution standing and sufficient confidence;
a verification success (stable test-time augmentation or committee
agreement) can unlock acceptance afterwards. Values exactly at a threshold
count as passing.

Two routers consume the guardrail: a deterministic rule router with a fixed
escalation order (direct accept, tta, moe, vlm) and a language-model router
that picks one action per step from the serialized state, with every choice
clamped to the permitted set. The vision-language reviewer is always
terminal: it abstains with a suggested label.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from functools import lru_cache
from hashlib import sha256
from importlib.resources import files

from cxrtriage.tools import (
    ConfidenceSignal,
    MoeResult,
    ToolError,
    TtaResult,
    VlmParseError,
)

log = logging.getLogger(__name__)

DEFAULT_MAX_STEPS = 6
ROUTER_PROMPT_ASSET = "router_prompt_v1.txt"
VLM_PROMPT_ASSET = "vlm_prompt_v1.txt"

_STATE_LABEL = {"positive": "PE_yes", "negative": "PE_no"}
_VERIFY_ORDER = ("tta", "moe", "vlm")


@lru_cache(maxsize=None)
def load_asset(name: str) -> str:
    return files("cxrtriage").joinpath(f"assets/{name}").read_text()


def asset_version_tag(name: str) -> str:
    text = load_asset(name)
    return f"{name.rsplit('.', 1)[0]}:{sha256(text.encode()).hexdigest()[:16]}"


@dataclass(frozen=True)
class Thresholds:
    """Operating thresholds for accept, augmentation spread and agreement."""

    tau_conf: float = 0.60
    tau_tta: float = 0.05
    tau_moe: float = 0.75


@dataclass(frozen=True)
class RouterPolicy:
    """Policy block carried in the router state.

    ``max_auto_accept_frd_multiple`` is surfaced to the model but never
    consulted by local logic.
    """

    mode: str = "default"
    max_auto_accept_frd_multiple: float = 3.0

    def __post_init__(self):
        if self.mode not in ("default", "conservative", "sensitive"):
            raise ValueError(f"unknown policy mode {self.mode!r}")


@dataclass
class GuardrailDecision:
    allow_accept: bool
    is_ood: bool
    available_tools: list


def evaluate_guardrail(conf: ConfidenceSignal, ood, th: Thresholds) -> GuardrailDecision:
    """Permit direct acceptance only for confident, in-distribution cases."""
    allow = (not ood.is_ood) and (conf.c >= th.tau_conf)
    tools = (["accept"] if allow else []) + list(_VERIFY_ORDER)
    return GuardrailDecision(allow_accept=allow, is_ood=ood.is_ood, available_tools=tools)


@dataclass
class TriageOutcome:
    decision: str  # accept | abstain
    final_label: str  # positive | negative; for abstains, echoes the suggestion
    suggested_label: str
    rationale: str
    decided_by: str
    confidence: float
    unlocked_by: str = None

    def __post_init__(self):
        if self.decision not in ("accept", "abstain"):
            raise ValueError(f"bad decision {self.decision!r}")
        if self.decision == "abstain" and self.suggested_label is None:
            raise ValueError("abstain requires a suggested label")
        if self.decision == "accept" and self.suggested_label is not None:
            raise ValueError("accept must not carry a suggested label")


@dataclass
class RouterDecision:
    step: int
    next_tool: str
    reason: str
    stop: bool
    final_label: str  # PE_yes | PE_no | None
    decided_by: str

    def as_dict(self) -> dict:
        return {
            "step": self.step,
            "next_tool": self.next_tool,
            "reason": self.reason,
            "stop": self.stop,
            "final_label": self.final_label,
            "decided_by": self.decided_by,
        }


@dataclass
class RouterHistory:
    """Mutable per-case routing state shared by both routers."""

    current_p: float
    current_label: str
    ran_tta: bool = False
    ran_moe: bool = False
    ran_vlm: bool = False
    tta: TtaResult = None
    moe: MoeResult = None
    unlocked_by: str = None
    accepted: bool = False
    final_label: str = None


@dataclass
class RouterRun:
    outcome: TriageOutcome
    decisions: list
    events: list
    violations: list = field(default_factory=list)
    post_accept_requested: bool = False
    history: RouterHistory = None


def _call_tool(toolbox, name: str, events: list, **kw):
    t0 = time.perf_counter()
    try:
        result = getattr(toolbox, name)(**kw)
        error = None
    except (ToolError, VlmParseError) as exc:
        result, error = None, exc
    duration = (time.perf_counter() - t0) * 1e3
    events.append(
        {
            "tool": name,
            "outputs": _summarize(name, result),
            "error": None if error is None else f"{type(error).__name__}: {error}",
            "duration_ms": duration,
        }
    )
    return result, error


def _summarize(name: str, result) -> dict:
    if result is None:
        return None
    if name == "tta":
        return {
            "k": len(result.samples),
            "mu": result.mu,
            "sigma": result.sigma,
            "mu_conf": result.mu_conf,
            "label": result.label,
        }
    if name == "moe":
        return {
            "votes": [list(v) for v in result.votes],
            "agreement": result.agreement,
            "majority_label": result.majority_label,
            "tied": result.tied,
        }
    return {"label": result.label, "conf": result.conf, "explanation": result.explanation}


def _ranking_confidence(conf: ConfidenceSignal, history: RouterHistory) -> float:
    if history.unlocked_by == "tta":
        return history.tta.mu_conf
    if history.unlocked_by == "moe":
        return history.moe.agreement
    return conf.c


def _tta_stable(tta: TtaResult, th: Thresholds) -> bool:
    return tta.sigma <= th.tau_tta and tta.mu_conf >= th.tau_conf


def _apply_tta(history: RouterHistory, tta: TtaResult, th: Thresholds) -> None:
    history.ran_tta = True
    if tta is None:
        return
    history.tta = tta
    if _tta_stable(tta, th):
        history.unlocked_by = history.unlocked_by or "tta"
        history.current_p = tta.mu
        history.current_label = tta.label


def _apply_moe(history: RouterHistory, moe: MoeResult, th: Thresholds) -> None:
    history.ran_moe = True
    if moe is None:
        return
    history.moe = moe
    if moe.agreement >= th.tau_moe:
        if history.unlocked_by is None:
            history.unlocked_by = "moe"
        history.current_label = moe.majority_label


def _complete_by_rule(
    conf: ConfidenceSignal,
    guardrail: GuardrailDecision,
    toolbox,
    th: Thresholds,
    history: RouterHistory,
    decisions: list,
    events: list,
    fallback_mode: bool = False,
) -> TriageOutcome:
    """Finish a case in the deterministic order, honoring tools already run."""
    step = len(decisions) + 1
    terminal_by = "fallback" if fallback_mode else None

    def can_accept():
        return guardrail.allow_accept or history.unlocked_by is not None

    if can_accept():
        label = history.current_label
        decided_by = terminal_by or (
            "guardrail_direct" if history.unlocked_by is None else history.unlocked_by
        )
        decisions.append(
            RouterDecision(
                step,
                "accept",
                "confident and permitted to accept",
                True,
                _STATE_LABEL[label],
                decided_by,
            )
        )
        rationale = (
            "guardrail_direct_accept"
            if history.unlocked_by is None
            else f"{history.unlocked_by}_verified_accept"
        )
        return TriageOutcome(
            decision="accept",
            final_label=label,
            suggested_label=None,
            rationale=rationale,
            decided_by=decided_by,
            confidence=_ranking_confidence(conf, history),
            unlocked_by=history.unlocked_by,
        )

    if not history.ran_tta:
        decisions.append(
            RouterDecision(
                step, "tta", "cheapest verification first", False, None, "rule_router"
            )
        )
        step += 1
        tta, _ = _call_tool(toolbox, "tta", events)
        _apply_tta(history, tta, th)
        if tta is not None and _tta_stable(tta, th):
            decided_by = terminal_by or "tta"
            decisions.append(
                RouterDecision(
                    step,
                    "accept",
                    "augmentation spread within tolerance",
                    True,
                    _STATE_LABEL[tta.label],
                    decided_by,
                )
            )
            return TriageOutcome(
                decision="accept",
                final_label=tta.label,
                suggested_label=None,
                rationale="tta_stable",
                decided_by=decided_by,
                confidence=tta.mu_conf,
                unlocked_by="tta",
            )

    if not history.ran_moe:
        decisions.append(
            RouterDecision(
                step, "moe", "escalate to committee vote", False, None, "rule_router"
            )
        )
        step += 1
        moe, _ = _call_tool(toolbox, "moe", events, base_label=conf.label)
        _apply_moe(history, moe, th)
        if moe is not None and moe.agreement >= th.tau_moe:
            decided_by = terminal_by or "moe"
            decisions.append(
                RouterDecision(
                    step,
                    "accept",
                    "committee agreement above threshold",
                    True,
                    _STATE_LABEL[moe.majority_label],
                    decided_by,
                )
            )
            return TriageOutcome(
                decision="accept",
                final_label=moe.majority_label,
                suggested_label=None,
                rationale="moe_agreement",
                decided_by=decided_by,
                confidence=moe.agreement,
                unlocked_by="moe",
            )

    if not history.ran_vlm:
        decisions.append(
            RouterDecision(
                step, "vlm", "terminal reviewer escalation", False, None, "rule_router"
            )
        )
        step += 1
        history.ran_vlm = True
        vlm, error = _call_tool(toolbox, "vlm", events)
        if vlm is not None:
            decided_by = terminal_by or "vlm"
            decisions.append(
                RouterDecision(
                    step,
                    "abstain",
                    "reviewer suggestion recorded",
                    True,
                    _STATE_LABEL[vlm.label],
                    decided_by,
                )
            )
            return TriageOutcome(
                decision="abstain",
                final_label=vlm.label,
                suggested_label=vlm.label,
                rationale=vlm.explanation,
                decided_by=decided_by,
                confidence=vlm.ranking_conf,
                unlocked_by=history.unlocked_by,
            )
        if isinstance(error, VlmParseError):
            decisions.append(
                RouterDecision(
                    step,
                    "abstain",
                    "reviewer reply unparseable after retry",
                    True,
                    _STATE_LABEL[conf.label],
                    "fallback",
                )
            )
            return TriageOutcome(
                decision="abstain",
                final_label=conf.label,
                suggested_label=conf.label,
                rationale="vlm_parse_failure",
                decided_by="fallback",
                confidence=conf.c,
                unlocked_by=history.unlocked_by,
            )

    decisions.append(
        RouterDecision(
            len(decisions) + 1,
            "abstain",
            "no verification stage produced a decision",
            True,
            _STATE_LABEL[conf.label],
            "fallback",
        )
    )
    return TriageOutcome(
        decision="abstain",
        final_label=conf.label,
        suggested_label=conf.label,
        rationale="tool_chain_failure",
        decided_by="fallback",
        confidence=conf.c,
        unlocked_by=history.unlocked_by,
    )


def run_rule_router(
    conf: ConfidenceSignal, guardrail: GuardrailDecision, toolbox, th: Thresholds
) -> RouterRun:
    """Deterministic escalation: direct accept, then tta, moe, vlm."""
    history = RouterHistory(current_p=conf.p, current_label=conf.label)
    decisions, events = [], []
    outcome = _complete_by_rule(conf, guardrail, toolbox, th, history, decisions, events)
    return RouterRun(outcome=outcome, decisions=decisions, events=events, history=history)


# ---------------------------------------------------------------------------
# language-model router


def build_router_state(
    conf: ConfidenceSignal,
    ood,
    guardrail: GuardrailDecision,
    th: Thresholds,
    policy: RouterPolicy,
    history: RouterHistory,
) -> dict:
    """Serialize the router state with the exact published keys and nesting."""
    available = []
    if not history.accepted and (guardrail.allow_accept or history.unlocked_by):
        available.append("accept")
    if not history.accepted:
        available.extend(t for t in _VERIFY_ORDER if not getattr(history, f"ran_{t}"))
    if history.accepted and history.final_label == "positive":
        available.append("POST_ACCEPT")
    return {
        "p": history.current_p,
        "frd_maha": ood.score,
        "thr_maha": ood.tau,
        "tta_std": history.tta.sigma if history.tta is not None else None,
        "moe_a": history.moe.agreement if history.moe is not None else None,
        "in_domain": not ood.is_ood,
        "policy": {
            "mode": policy.mode,
            "p_accept": th.tau_conf,
            "std_ok": th.tau_tta,
            "moe_thr": th.tau_moe,
            "max_auto_accept_frd_multiple": policy.max_auto_accept_frd_multiple,
        },
        "already_ran": {
            "tta": history.ran_tta,
            "moe": history.ran_moe,
            "vlm": history.ran_vlm,
        },
        "available_tools": available,
        "accepted": history.accepted,
        "final_label": (
            _STATE_LABEL[history.final_label] if history.final_label is not None else None
        ),
    }


def render_router_messages(state: dict, prompt_text: str = None) -> tuple:
    """Split the prompt at STATE: the rubric is system text, the live state
    plus closing instruction is the user turn."""
    text = prompt_text if prompt_text is not None else load_asset(ROUTER_PROMPT_ASSET)
    idx = text.index("STATE:")
    system = text[:idx].rstrip("\n")
    user = "STATE:\n" + json.dumps(state, indent=2) + "\n\nDecide next_tool."
    return system, user


def parse_router_reply(text: str) -> dict:
    """Extract the decision object; raise ValueError when malformed."""
    if not isinstance(text, str):
        raise ValueError("router reply is not text")
    stripped = text.strip()
    try:
        decision = json.loads(stripped)
    except json.JSONDecodeError:
        start, end = stripped.find("{"), stripped.rfind("}")
        if start < 0 or end <= start:
            raise ValueError("no JSON object in router reply") from None
        try:
            decision = json.loads(stripped[start : end + 1])
        except json.JSONDecodeError as exc:
            raise ValueError(f"unparseable router reply: {exc}") from None
    if not isinstance(decision, dict):
        raise ValueError("router reply is not an object")
    if not isinstance(decision.get("next_tool"), str):
        raise ValueError("router reply lacks a next_tool string")
    stop = decision.get("stop", False)
    if not isinstance(stop, bool):
        raise ValueError("router reply stop flag is not boolean")
    decision["stop"] = stop
    decision.setdefault("reason", "")
    if decision.get("final_label") not in ("PE_yes", "PE_no", None):
        decision["final_label"] = None
    return decision


def run_llm_router(
    conf: ConfidenceSignal,
    ood,
    guardrail: GuardrailDecision,
    toolbox,
    th: Thresholds,
    policy: RouterPolicy,
    client,
    prompt_text: str = None,
    max_steps: int = DEFAULT_MAX_STEPS,
) -> RouterRun:
    """One clamped model decision per step until a terminal action or budget.

    Invalid or forbidden choices are replaced with the first permitted
    verification tool not yet run (violation logged). A malformed reply is
    retried once; on a second failure the case completes under the rule
    policy with decided_by=fallback. The reviewer remains terminal, each
    verification tool runs at most once, and acceptance is only ever executed
    when the guardrail allows it or a verification success unlocked it.
    """
    history = RouterHistory(current_p=conf.p, current_label=conf.label)
    decisions, events, violations = [], [], []
    prompt = prompt_text if prompt_text is not None else load_asset(ROUTER_PROMPT_ASSET)
    post_accept = False

    def finish(outcome):
        return RouterRun(
            outcome=outcome,
            decisions=decisions,
            events=events,
            violations=violations,
            post_accept_requested=post_accept,
            history=history,
        )

    def accept_outcome(decided_by="llm_router"):
        return TriageOutcome(
            decision="accept",
            final_label=history.final_label,
            suggested_label=None,
            rationale=(
                "guardrail_direct_accept"
                if history.unlocked_by is None
                else f"{history.unlocked_by}_verified_accept"
            ),
            decided_by=decided_by,
            confidence=_ranking_confidence(conf, history),
            unlocked_by=history.unlocked_by,
        )

    for step in range(1, max_steps + 1):
        state = build_router_state(conf, ood, guardrail, th, policy, history)
        system, user = render_router_messages(state, prompt)

        decision = None
        for _ in range(2):
            try:
                decision = parse_router_reply(client.complete(system=system, user=user))
                break
            except (ValueError, ToolError) as exc:
                log.warning("router reply rejected at step %d: %s", step, exc)
        if decision is None:
            violations.append(
                {
                    "step": step,
                    "requested": None,
                    "replaced_with": "rule_fallback",
                    "reason": "malformed router reply twice",
                }
            )
            if history.accepted:
                return finish(accept_outcome(decided_by="fallback"))
            outcome = _complete_by_rule(
                conf, guardrail, toolbox, th, history, decisions, events, fallback_mode=True
            )
            return finish(outcome)

        requested = decision["next_tool"]
        tool = requested
        if history.accepted and requested not in state["available_tools"]:
            # An executed accept is final; no later choice may undo it.
            violations.append(
                {
                    "step": step,
                    "requested": requested,
                    "replaced_with": "stop",
                    "reason": "case already accepted, finalizing",
                }
            )
            decisions.append(
                RouterDecision(step, "stop", "finalize accepted case", True, None, "llm_router")
            )
            return finish(accept_outcome())
        if requested != "abstain" and requested not in state["available_tools"]:
            replacement = next(
                (t for t in _VERIFY_ORDER if not getattr(history, f"ran_{t}")),
                "abstain",
            )
            violations.append(
                {
                    "step": step,
                    "requested": requested,
                    "replaced_with": replacement,
                    "reason": "tool not permitted in current state",
                }
            )
            tool = replacement

        decisions.append(
            RouterDecision(
                step,
                tool,
                decision.get("reason", ""),
                decision["stop"],
                decision.get("final_label"),
                "llm_router",
            )
        )

        if tool == "accept":
            history.accepted = True
            history.final_label = history.current_label
            if decision["stop"]:
                return finish(accept_outcome())
            continue

        if tool == "abstain":
            return finish(
                TriageOutcome(
                    decision="abstain",
                    final_label=history.current_label,
                    suggested_label=history.current_label,
                    rationale=decision.get("reason") or "llm_abstain",
                    decided_by="llm_router",
                    confidence=_ranking_confidence(conf, history),
                    unlocked_by=history.unlocked_by,
                )
            )

        if tool == "POST_ACCEPT":
            post_accept = True
            return finish(accept_outcome())

        if tool == "tta":
            tta, _ = _call_tool(toolbox, "tta", events)
            _apply_tta(history, tta, th)
        elif tool == "moe":
            moe, _ = _call_tool(toolbox, "moe", events, base_label=conf.label)
            _apply_moe(history, moe, th)
        elif tool == "vlm":
            history.ran_vlm = True
            vlm, error = _call_tool(toolbox, "vlm", events)
            if vlm is not None:
                return finish(
                    TriageOutcome(
                        decision="abstain",
                        final_label=vlm.label,
                        suggested_label=vlm.label,
                        rationale=vlm.explanation,
                        decided_by="vlm",
                        confidence=vlm.ranking_conf,
                        unlocked_by=history.unlocked_by,
                    )
                )
            if isinstance(error, VlmParseError):
                return finish(
                    TriageOutcome(
                        decision="abstain",
                        final_label=history.current_label,
                        suggested_label=history.current_label,
                        rationale="vlm_parse_failure",
                        decided_by="fallback",
                        confidence=_ranking_confidence(conf, history),
                        unlocked_by=history.unlocked_by,
                    )
                )

        if decision["stop"]:
            if history.accepted:
                return finish(accept_outcome())
            return finish(
                TriageOutcome(
                    decision="abstain",
                    final_label=history.current_label,
                    suggested_label=history.current_label,
                    rationale=decision.get("reason") or "llm_stop",
                    decided_by="llm_router",
                    confidence=_ranking_confidence(conf, history),
                    unlocked_by=history.unlocked_by,
                )
            )

    if history.accepted:
        return finish(accept_outcome())
    return finish(
        TriageOutcome(
            decision="abstain",
            final_label=conf.label,
            suggested_label=conf.label,
            rationale="step_budget_exhausted",
            decided_by="fallback",
            confidence=conf.c,
            unlocked_by=history.unlocked_by,
        )
    )

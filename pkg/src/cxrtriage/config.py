"""Engine configuration: one file, environment overrides, then flags.

Precedence is flags > environment > file > defaults. The effective
configuration is hashed and the hash recorded in every trace, so a run can
be tied back to the exact settings that produced it.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

import yaml

from cxrtriage.ingestion import DEFAULT_PHI_FIELDS

ENV_PREFIX = "CXRTRIAGE_"


@dataclass
class EngineConfig:
    # thresholds
    tau_conf: float = 0.60
    tau_tta: float = 0.05
    tau_moe: float = 0.75
    # routing
    router: str = "rule"  # rule | llm
    policy_mode: str = "default"
    max_auto_accept_frd_multiple: float = 3.0
    max_steps: int = 6
    retries: int = 2
    # test-time augmentation
    tta_k: int = 8
    seed: int = 0
    # ingestion / concurrency
    poll_ms: int = 500
    stability_ms: int = 1000
    workers: int = 2
    queue_size: int = 8
    phi_drop: list = field(default_factory=lambda: list(DEFAULT_PHI_FIELDS))
    # reference fitting
    lambda_rel: float = 1e-6
    ood_percentile: float = 95.0
    # adapters
    scorer: dict = field(default_factory=lambda: {"transport": "stub"})
    experts: list = field(default_factory=list)  # empty = four stub experts
    vlm: dict = field(default_factory=lambda: {"transport": "stub"})
    llm: dict = field(default_factory=lambda: {"transport": "rubric"})
    segmentation: str = "ellipse"  # ellipse | none
    stub_script: str = None

    def __post_init__(self):
        if self.router not in ("rule", "llm"):
            raise ValueError(f"router must be rule or llm, got {self.router!r}")
        if self.tta_k < 2:
            raise ValueError("tta_k must be at least 2")
        for name in ("tau_conf", "tau_tta", "tau_moe"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {value}")

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    def snapshot_hash(self) -> str:
        canon = json.dumps(self.as_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]


_FIELDS = {f.name: f for f in dataclasses.fields(EngineConfig)}


def _coerce(name: str, value, reference):
    if isinstance(reference, bool):
        if isinstance(value, str):
            return value.lower() in ("1", "true", "yes", "on")
        return bool(value)
    if isinstance(reference, int) and not isinstance(value, bool):
        return int(value)
    if isinstance(reference, float):
        return float(value)
    return value


def load_config(path=None, env=None, **overrides) -> EngineConfig:
    """Build the effective configuration.

    ``path`` points at a YAML mapping of config fields; environment
    variables named CXRTRIAGE_<FIELD> override scalar fields; keyword
    overrides (CLI flags) win over both. Unknown keys are an error.
    """
    values = {}

    if path is not None:
        with open(path) as fh:
            loaded = yaml.safe_load(fh) or {}
        if not isinstance(loaded, dict):
            raise ValueError(f"config file {path} must hold a mapping")
        unknown = sorted(set(loaded) - set(_FIELDS))
        if unknown:
            raise ValueError(f"unknown config key(s) in {path}: {', '.join(unknown)}")
        values.update(loaded)

    env = os.environ if env is None else env
    for name, fld in _FIELDS.items():
        raw = env.get(f"{ENV_PREFIX}{name.upper()}")
        if raw is None:
            continue
        default = fld.default if fld.default is not dataclasses.MISSING else None
        if isinstance(default, (dict, list)) or (
            fld.default_factory is not dataclasses.MISSING
            and isinstance(fld.default_factory(), (dict, list))
        ):
            values[name] = json.loads(raw)
        else:
            values[name] = raw

    for name, value in overrides.items():
        if name not in _FIELDS:
            raise ValueError(f"unknown config override {name!r}")
        if value is not None:
            values[name] = value

    defaults = EngineConfig()
    coerced = {}
    for name, value in values.items():
        coerced[name] = _coerce(name, value, getattr(defaults, name))
    return EngineConfig(**coerced)

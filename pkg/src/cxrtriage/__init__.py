"""Uncertainty-aware triage engine for chest radiographs.

Pipeline stages: folder ingestion and normalization, radiomic feature
extraction with out-of-distribution scoring, guardrailed routing through
verification tools (test-time augmentation, expert committee, vision-language
review), post-accept opacity quantification, and auditable disposition with
selective-prediction analytics.
"""

__version__ = "0.1.0"

TRACE_SCHEMA_VERSION = "trace-v1"
MODEL_SCHEMA_VERSION = "model-v1"
STUB_SCRIPT_VERSION = "stubs-v1"

"""Command-line surface.

Subcommands: calibrate, watch, run, eval, gen-cohort. Exit codes: 0 on
success, 1 for usage problems, 2 for data problems (missing or malformed
inputs, degenerate reference sets), 3 when a required adapter fails.
"""

from __future__ import annotations

import json
import os
import threading

import click

from cxrtriage import analytics, ingestion, triage
from cxrtriage.cohort import SyntheticCohortSpec, generate_cohort
from cxrtriage.config import load_config
from cxrtriage.engine import EngineAdapterError, TriageEngine, build_toolset
from cxrtriage.features import FeatureSpaceError, extract_features, read_feature_table
from cxrtriage.ood import ModelBundle, SingularCovarianceError, fit_bundle


class DataError(Exception):
    """Input data problem surfaced as exit code 2."""


def _config_options(fn):
    options = [
        click.option("--config", "config_path", default=None,
                     type=click.Path(exists=True, dir_okay=False), help="YAML config file."),
        click.option("--router", type=click.Choice(["rule", "llm"]), default=None),
        click.option("--workers", type=int, default=None),
        click.option("--seed", type=int, default=None),
        click.option("--tta-k", "tta_k", type=int, default=None),
        click.option("--stub-script", "stub_script", default=None,
                     type=click.Path(dir_okay=False), help="Scripted adapter behavior file."),
        click.option("--tau-conf", "tau_conf", type=float, default=None),
        click.option("--tau-tta", "tau_tta", type=float, default=None),
        click.option("--tau-moe", "tau_moe", type=float, default=None),
        click.option("--policy-mode", "policy_mode", default=None,
                     type=click.Choice(["default", "conservative", "sensitive"])),
        click.option("--max-steps", "max_steps", type=int, default=None),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


def _load_config(config_path, **overrides):
    try:
        return load_config(config_path, **overrides)
    except (ValueError, OSError) as exc:
        raise DataError(f"bad configuration: {exc}") from exc


def _load_model(path) -> ModelBundle:
    if not os.path.isfile(path):
        raise DataError(f"model file not found: {path}")
    try:
        return ModelBundle.load(path)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot load model {path}: {exc}") from exc


def _build_toolset(config):
    try:
        return build_toolset(config)
    except (ValueError, OSError) as exc:
        raise DataError(f"adapter setup failed: {exc}") from exc


def _case_paths(input_dir) -> list:
    out = []
    for name in sorted(os.listdir(input_dir)):
        path = os.path.join(input_dir, name)
        if os.path.isfile(path) and os.path.splitext(name)[1].lower() in ingestion.ACCEPTED_SUFFIXES:
            out.append(path)
    return out


@click.group()
def cli():
    """Uncertainty-aware triage for chest radiographs."""


@cli.command("gen-cohort")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--n-cases", default=200, show_default=True, type=int)
@click.option("--n-reference", default=100, show_default=True, type=int)
@click.option("--ood-fraction", default=0.10, show_default=True, type=float)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--image-size", default=1024, show_default=True, type=int)
@click.option("--tta-k", "tta_k", default=8, show_default=True, type=int)
def cmd_gen_cohort(out_dir, n_cases, n_reference, ood_fraction, seed, image_size, tta_k):
    """Write a deterministic synthetic cohort plus scripted stub behaviors."""
    try:
        spec = SyntheticCohortSpec(
            n_cases=n_cases,
            n_reference=n_reference,
            ood_fraction=ood_fraction,
            seed=seed,
            image_size=image_size,
            tta_k=tta_k,
        )
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    manifest = generate_cohort(spec, out_dir)
    click.echo(f"cases: {manifest.n_cases} ({manifest.n_ood} out-of-distribution)")
    click.echo(f"reference: {manifest.n_reference}")
    click.echo(f"planted_accuracy: {manifest.planted_accuracy:.4f}")
    click.echo(f"cases_dir: {manifest.cases_dir}")
    click.echo(f"reference_dir: {manifest.reference_dir}")
    click.echo(f"labels: {manifest.labels_path}")
    click.echo(f"stubs: {manifest.stubs_path}")


def _reference_vectors(input_dir) -> list:
    vectors = []
    for path in _case_paths(input_dir):
        try:
            with open(path, "rb") as fh:
                data = fh.read()
        except OSError as exc:
            raise DataError(f"cannot read reference {path}: {exc}") from exc
        raw = ingestion.RawCase(path=path, data=data, detected_at=0.0)
        try:
            record = ingestion.normalize_case(raw, case_id=os.path.basename(path))
        except (ingestion.UnsupportedFormatError, ingestion.DecodeError) as exc:
            raise DataError(f"reference {path}: {exc}") from exc
        vectors.append(extract_features(record.pixels))
    return vectors


@cli.command("calibrate")
@click.option("--input", "input_dir", default=None,
              type=click.Path(exists=True, file_okay=False), help="Reference image directory.")
@click.option("--features", "features_path", default=None,
              type=click.Path(exists=True, dir_okay=False), help="Reference feature table (CSV).")
@click.option("--out", "model_path", required=True, type=click.Path(dir_okay=False))
@click.option("--lambda-rel", "lambda_rel", type=float, default=None)
@click.option("--ood-percentile", "ood_percentile", type=float, default=None)
@click.option("--config", "config_path", default=None,
              type=click.Path(exists=True, dir_okay=False))
def cmd_calibrate(input_dir, features_path, model_path, lambda_rel, ood_percentile, config_path):
    """Fit the reference feature space and the distance threshold."""
    if (input_dir is None) == (features_path is None):
        raise click.UsageError("provide exactly one of --input or --features")
    config = _load_config(config_path, lambda_rel=lambda_rel, ood_percentile=ood_percentile)
    if input_dir is not None:
        vectors = _reference_vectors(input_dir)
    else:
        try:
            vectors = [vec for _, vec in read_feature_table(features_path)]
        except (ValueError, OSError) as exc:
            raise DataError(str(exc)) from exc
    if not vectors:
        raise DataError("no reference cases found")
    try:
        bundle = fit_bundle(
            vectors, lambda_rel=config.lambda_rel, percentile=config.ood_percentile
        )
    except (FeatureSpaceError, SingularCovarianceError, ValueError) as exc:
        raise DataError(f"calibration failed: {exc}") from exc
    tag = bundle.save(model_path)
    click.echo(f"d: {len(bundle.catalog.retained)}")
    click.echo(f"n: {bundle.reference.n_ref}")
    click.echo(f"lambda: {bundle.reference.lam:.6g}")
    click.echo(f"tau_ood: {bundle.tau_ood:.6f}")
    click.echo(f"model: {model_path} ({tag})")


@cli.command("run")
@click.option("--input", "input_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--model", "model_path", required=True, type=click.Path(dir_okay=False))
@click.option("--out", "out_root", required=True, type=click.Path(file_okay=False))
@_config_options
def cmd_run(input_dir, model_path, out_root, config_path, **overrides):
    """Process every case file in a directory to completion."""
    config = _load_config(config_path, **overrides)
    bundle = _load_model(model_path)
    toolset = _build_toolset(config)
    try:
        engine = TriageEngine(config, bundle, toolset, out_root)
        summary = engine.run_batch(_case_paths(input_dir))
    finally:
        toolset.close()
    for key in ("accepted_pos", "accepted_neg", "abstained", "quarantined"):
        click.echo(f"{key}: {summary.counts[key]}")
    click.echo(f"mean_orchestration_ms: {summary.mean_orchestration_ms:.2f}")


@cli.command("watch")
@click.option("--input", "input_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--model", "model_path", required=True, type=click.Path(dir_okay=False))
@click.option("--out", "out_root", required=True, type=click.Path(file_okay=False))
@click.option("--poll-ms", "poll_ms", type=int, default=None)
@click.option("--stability-ms", "stability_ms", type=int, default=None)
@_config_options
def cmd_watch(input_dir, model_path, out_root, poll_ms, stability_ms, config_path, **overrides):
    """Watch a drop folder and triage each stable new file."""
    config = _load_config(config_path, poll_ms=poll_ms, stability_ms=stability_ms, **overrides)
    bundle = _load_model(model_path)
    toolset = _build_toolset(config)
    stop = threading.Event()

    def on_result(result):
        click.echo(f"{result.case_id} {result.decision} -> {result.destination}")

    click.echo(
        f"watching {input_dir} (poll {config.poll_ms} ms, "
        f"stability {config.stability_ms} ms); interrupt to stop",
        err=True,
    )
    try:
        engine = TriageEngine(config, bundle, toolset, out_root)
        engine.watch(input_dir, stop_event=stop, callback=on_result)
    except ingestion.WatcherError as exc:
        raise DataError(str(exc)) from exc
    finally:
        toolset.close()


@cli.command("eval")
@click.option("--traces", "run_root", required=True,
              type=click.Path(exists=True, file_okay=False),
              help="Run output root (the directory containing traces/).")
@click.option("--labels", "labels_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", default=None, type=click.Path(file_okay=False),
              help="Report directory (defaults to the run root).")
@click.option("--coverage", "coverages", multiple=True, type=float, default=(0.8,),
              show_default=True)
@click.option("--budget", "budgets", multiple=True, type=float, default=(0.05,),
              show_default=True)
@click.option("--folds", type=int, default=None)
@click.option("--seed", type=int, default=0, show_default=True)
def cmd_eval(run_root, labels_path, out_dir, coverages, budgets, folds, seed):
    """Score a finished run against a truth-label table."""
    root = os.path.normpath(run_root)
    if not os.path.isdir(os.path.join(root, "traces")):
        if os.path.basename(root) == "traces":
            root = os.path.dirname(root)
        else:
            raise DataError(f"no traces directory under {run_root}")
    traces = triage.read_traces(root)
    if not traces:
        raise DataError(f"no traces found under {root}")
    try:
        labels = analytics.read_labels(labels_path)
    except (ValueError, OSError) as exc:
        raise DataError(str(exc)) from exc

    decided = [t for t in traces if t["decision"]["decision"] != "quarantine"]
    missing = sorted({t["case_id"] for t in decided} - set(labels))
    if missing:
        shown = ", ".join(missing[:5]) + ("..." if len(missing) > 5 else "")
        click.echo(f"warning: {len(missing)} case(s) lack labels, excluded: {shown}", err=True)
        decided = [t for t in decided if t["case_id"] in labels]
    if not decided:
        raise DataError("no labeled decided cases to evaluate")

    predictions = analytics.predictions_from_traces(decided, labels)
    report = analytics.evaluate_run(
        predictions,
        coverages=tuple(coverages),
        budgets=tuple(budgets),
        folds=folds,
        seed=seed,
    )
    out_base = out_dir if out_dir is not None else root
    os.makedirs(out_base, exist_ok=True)
    report_path = os.path.join(out_base, "report.json")
    with open(report_path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    curve_path = os.path.join(out_base, "curve.csv")
    analytics.write_curve_table(predictions, curve_path)
    click.echo(json.dumps(report, indent=2, sort_keys=True))
    click.echo(f"report: {report_path}", err=True)
    click.echo(f"curve: {curve_path}", err=True)


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Exit as exc:
        return int(exc.exit_code)
    except click.UsageError as exc:
        click.echo(f"Error: {exc.format_message()}", err=True)
        if exc.ctx is not None:
            click.echo(exc.ctx.get_usage(), err=True)
        return 1
    except click.Abort:
        return 130
    except click.ClickException as exc:
        exc.show()
        return 2
    except DataError as exc:
        click.echo(f"Error: {exc}", err=True)
        return 2
    except EngineAdapterError as exc:
        click.echo(f"Adapter error: {exc}", err=True)
        return 3
    return 0

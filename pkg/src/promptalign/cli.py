"""Command-line entry point for the full pipeline.

Commands: ``optimize`` (iterative loop), ``one-pass`` (fine-tuned or ICL
single call), ``export`` (SFT / ICL-pool files), ``report`` (summary table),
``correlate`` (human vs automatic scores).

Exit codes: 0 on success, 2 when some prompts failed but others completed,
1 on fatal errors. Diagnostics go to standard error; every file-producing
run also writes a ``<out>.manifest.json`` describing what ran.
"""

from __future__ import annotations

import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any

import click

from . import analytics, datastore
from .backends.base import BackendConfig, BackendSuite
from .backends.http import http_suite
from .backends.synthetic import synthetic_suite
from .optimizer import (
    CallTracker,
    OptimizationAborted,
    OptimizeConfig,
    optimize_iterative,
    optimize_one_pass,
)
from .util import derive_seed, utc_now_iso

logger = logging.getLogger(__name__)

SECRET_ENV_TEMPLATE = "FPA_API_KEY_{kind}"


def load_backend_configs(path: str | Path) -> tuple[dict[str, BackendConfig], dict[str, Any]]:
    """Parse the backend config file: per-kind connection settings plus extras."""
    with Path(path).open("r", encoding="utf-8") as handle:
        data = json.load(handle)
    configs = {}
    for kind, entry in data.get("backends", {}).items():
        configs[kind] = BackendConfig(
            kind=kind,
            endpoint=entry["endpoint"],
            model_id=entry.get("model_id", ""),
            timeout_ms=int(entry.get("timeout_ms", 60_000)),
            max_retries=int(entry.get("max_retries", 3)),
            rate_limit_per_min=int(entry.get("rate_limit_per_min", 60)),
            auth=entry.get("auth", SECRET_ENV_TEMPLATE.format(kind=kind.upper())),
        )
    extras = {key: value for key, value in data.items() if key != "backends"}
    return configs, extras


def _build_suite(
    synthetic: bool,
    backend_config: str | None,
    seed: int,
    noise: float,
    cache_dir: str | None,
) -> BackendSuite:
    cache = datastore.ResponseCache(cache_dir) if cache_dir else None
    if synthetic:
        return synthetic_suite(seed, noise_scale=noise, cache=cache)
    if not backend_config:
        raise click.UsageError("either --synthetic or --backend-config is required")
    configs, extras = load_backend_configs(backend_config)
    return http_suite(configs, cache=cache, image_dir=extras.get("image_dir"))


def _write_manifest(
    out: str,
    command: str,
    config: dict[str, Any],
    suite: BackendSuite | None,
    started_at: str,
    exit_status: int,
    **counts: Any,
) -> None:
    manifest = {
        "command": command,
        "config": config,
        "engine_seed": config.get("seed"),
        "backend_fingerprints": suite.fingerprint() if suite else {},
        "started_at": started_at,
        "finished_at": utc_now_iso(),
        "exit_status": exit_status,
    }
    manifest.update(counts)
    path = Path(f"{out}.manifest.json")
    with path.open("w", encoding="utf-8") as handle:
        json.dump(manifest, handle, ensure_ascii=False, indent=2)
        handle.write("\n")


@click.group()
@click.option("--verbose", is_flag=True, help="Log debug detail to stderr.")
def main(verbose: bool) -> None:
    """Prompt optimization pipeline for text-to-image alignment."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )


@main.command("optimize")
@click.option("--prompts", "prompts_path", required=True, type=click.Path())
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--m", default=4, show_default=True, help="Paraphrases per iteration.")
@click.option("--k", default=2, show_default=True, help="Iterations.")
@click.option("--q", default=4, show_default=True, help="Questions per prompt.")
@click.option("--seed", default=0, show_default=True, help="Engine seed.")
@click.option("--backend-config", type=click.Path(), default=None)
@click.option("--parallelism", default=1, show_default=True)
@click.option("--synthetic", is_flag=True, help="Use the offline synthetic backends.")
@click.option("--synthetic-noise", default=0.0, show_default=True)
@click.option("--cache-dir", type=click.Path(), default=None)
@click.option("--format", "prompt_format", default="auto", show_default=True)
@click.option("--dataset", default=None, help="Dataset tag override for plain files.")
@click.option("--mode-label", default=None, help="Mode tag stored on each record.")
@click.option("--pool-incumbent/--no-pool-incumbent", default=True, show_default=True)
def optimize_command(**kwargs: Any) -> None:
    sys.exit(cmd_optimize(**kwargs))


def cmd_optimize(
    prompts_path: str,
    out_path: str,
    m: int,
    k: int,
    q: int,
    seed: int,
    backend_config: str | None,
    parallelism: int,
    synthetic: bool,
    synthetic_noise: float,
    cache_dir: str | None,
    prompt_format: str,
    dataset: str | None,
    mode_label: str | None,
    pool_incumbent: bool,
) -> int:
    started_at = utc_now_iso()
    mode = mode_label or f"iterative-m{m}-k{k}"
    suite = None
    try:
        prompts = datastore.load_prompts(prompts_path, format=prompt_format, dataset=dataset)
        suite = _build_suite(synthetic, backend_config, seed, synthetic_noise, cache_dir)
        cfg = OptimizeConfig(
            m=m,
            k=k,
            q=q,
            pool_incumbent=pool_incumbent,
            parallelism=1,  # per-candidate parallelism stays inside the optimizer
            engine_seed=seed,
        )
    except (OSError, ValueError, click.UsageError) as exc:
        click.echo(f"error: {exc}", err=True)
        return 1

    done = datastore.completed_ids(out_path)
    todo = [p for p in prompts if p.id not in done]
    if done:
        logger.info("resuming: %d of %d prompts already complete", len(done), len(prompts))

    failures: list[str] = []
    written = 0

    def run_one(prompt):
        return optimize_iterative(prompt, cfg, suite)

    # Records are written in input order regardless of completion order so
    # identical runs produce identical bytes.
    with ThreadPoolExecutor(max_workers=max(1, parallelism)) as pool:
        for prompt, outcome in zip(todo, pool.map(_trap(run_one), todo)):
            if isinstance(outcome, OptimizationAborted):
                failures.append(f"{prompt.id}: {outcome.cause}")
                logger.error("prompt %s aborted: %s", prompt.id, outcome.cause)
            elif isinstance(outcome, Exception):
                failures.append(f"{prompt.id}: {outcome}")
                logger.error("prompt %s failed: %s", prompt.id, outcome)
            else:
                datastore.append_record(out_path, outcome, mode)
                written += 1

    status = 0 if not failures else 2
    config = {
        "prompts": str(prompts_path),
        "out": str(out_path),
        "m": m,
        "k": k,
        "q": q,
        "seed": seed,
        "mode": mode,
        "pool_incumbent": pool_incumbent,
        "synthetic": synthetic,
        "synthetic_noise": synthetic_noise,
        "parallelism": parallelism,
        "cache_dir": cache_dir,
    }
    _write_manifest(
        out_path,
        "optimize",
        config,
        suite,
        started_at,
        status,
        records_written=written,
        prompts_skipped=len(done),
        prompts_failed=len(failures),
        failures=failures,
    )
    click.echo(f"wrote {written} record(s) to {out_path}; {len(failures)} failed", err=True)
    return status


def _trap(fn):
    def wrapped(arg):
        try:
            return fn(arg)
        except Exception as exc:
            return exc

    return wrapped


@main.command("one-pass")
@click.option("--prompts", "prompts_path", required=True, type=click.Path())
@click.option("--mode", type=click.Choice(["finetuned", "icl"]), required=True)
@click.option("--examples", "examples_path", type=click.Path(), default=None)
@click.option("--n", default=0, show_default=True, help="Examples sampled for ICL history.")
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--backend-config", type=click.Path(), default=None)
@click.option("--synthetic", is_flag=True)
@click.option("--cache-dir", type=click.Path(), default=None)
@click.option("--format", "prompt_format", default="auto", show_default=True)
def one_pass_command(**kwargs: Any) -> None:
    sys.exit(cmd_one_pass(**kwargs))


def cmd_one_pass(
    prompts_path: str,
    mode: str,
    examples_path: str | None,
    n: int,
    seed: int,
    out_path: str,
    backend_config: str | None,
    synthetic: bool,
    cache_dir: str | None,
    prompt_format: str,
) -> int:
    started_at = utc_now_iso()
    suite = None
    try:
        prompts = datastore.load_prompts(prompts_path, format=prompt_format)
        suite = _build_suite(synthetic, backend_config, seed, 0.0, cache_dir)
        examples = []
        if mode == "icl" and n > 0:
            if not examples_path:
                raise ValueError("--examples is required when --mode icl and --n > 0")
            pool = datastore.load_example_pairs(examples_path)
            if len(pool) < n:
                raise ValueError(f"example pool holds {len(pool)} pairs, need {n}")
            # One fixed subset per run: every prompt sees the same history.
            examples = datastore.sample_examples(pool, n, seed)
    except (OSError, ValueError, click.UsageError) as exc:
        click.echo(f"error: {exc}", err=True)
        return 1

    tracker = CallTracker()
    failures: list[str] = []
    written = 0
    with Path(out_path).open("w", encoding="utf-8") as handle:
        for prompt in prompts:
            try:
                optimized = optimize_one_pass(
                    prompt,
                    mode,  # type: ignore[arg-type]
                    suite,
                    examples=examples,
                    tracker=tracker,
                    seed=derive_seed(seed, prompt.id, "one_pass"),
                )
            except Exception as exc:
                failures.append(f"{prompt.id}: {exc}")
                logger.error("prompt %s failed: %s", prompt.id, exc)
                continue
            row = {"id": prompt.id, "original": prompt.text, "optimized": optimized}
            handle.write(json.dumps(row, ensure_ascii=False) + "\n")
            handle.flush()
            written += 1

    status = 0 if not failures else 2
    config = {
        "prompts": str(prompts_path),
        "out": str(out_path),
        "mode": mode,
        "n": n,
        "seed": seed,
        "examples": examples_path,
        "synthetic": synthetic,
    }
    _write_manifest(
        out_path,
        "one-pass",
        config,
        suite,
        started_at,
        status,
        records_written=written,
        prompts_failed=len(failures),
        stats_totals=tracker.snapshot().as_dict(),
    )
    click.echo(f"wrote {written} row(s) to {out_path}; {len(failures)} failed", err=True)
    return status


@main.command("export")
@click.option("--records", "records_path", required=True, type=click.Path())
@click.option("--format", "export_format", type=click.Choice(["sft", "icl-pool"]), required=True)
@click.option("--min-gain", default=0.0, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--dedup", is_flag=True, help="Drop exact-duplicate original prompts.")
def export_command(**kwargs: Any) -> None:
    sys.exit(cmd_export(**kwargs))


def cmd_export(
    records_path: str, export_format: str, min_gain: float, out_path: str, dedup: bool
) -> int:
    started_at = utc_now_iso()
    try:
        stored, errors = datastore.read_record_file(records_path)
        if errors:
            raise ValueError(f"{records_path}: " + "; ".join(errors))
    except (OSError, ValueError) as exc:
        click.echo(f"error: {exc}", err=True)
        return 1

    records = [item.record for item in stored]
    if export_format == "sft":
        count = datastore.export_sft(records, out_path, min_gain=min_gain, dedup=dedup)
    else:
        count = datastore.export_icl_pool(records, out_path, min_gain=min_gain, dedup=dedup)
    _write_manifest(
        out_path,
        "export",
        {
            "records": str(records_path),
            "format": export_format,
            "min_gain": min_gain,
            "dedup": dedup,
            "out": str(out_path),
        },
        None,
        started_at,
        0,
        rows_written=count,
    )
    click.echo(f"{count} row(s)")
    return 0


@main.command("report")
@click.option(
    "--records", "records_paths", required=True, multiple=True, type=click.Path()
)
@click.option("--group-by", default="dataset,mode", show_default=True)
@click.option("--include-original", is_flag=True, help="Add rows for pre-optimization scores.")
@click.option("--json", "as_json", is_flag=True)
def report_command(**kwargs: Any) -> None:
    sys.exit(cmd_report(**kwargs))


def cmd_report(
    records_paths: tuple[str, ...], group_by: str, include_original: bool, as_json: bool
) -> int:
    keys = {key.strip() for key in group_by.split(",") if key.strip()}
    if not keys <= {"dataset", "mode"}:
        click.echo(f"error: unsupported --group-by {group_by!r}", err=True)
        return 1
    rows = []
    for path in records_paths:
        try:
            stored, errors = datastore.read_record_file(path)
        except OSError as exc:
            click.echo(f"error: {exc}", err=True)
            return 1
        for error in errors:
            logger.warning("%s: %s", path, error)
        rows.extend(analytics.rows_from_records(stored))
        if include_original:
            rows.extend(
                analytics.ScoredRow(
                    dataset=row.dataset, mode="original-prompts", tifa=row.tifa, vqa=row.vqa
                )
                for row in analytics.rows_from_records(stored, use_final=False)
            )
    if keys != {"dataset", "mode"}:
        rows = [
            analytics.ScoredRow(
                dataset=row.dataset if "dataset" in keys else "",
                mode=row.mode if "mode" in keys else "",
                tifa=row.tifa,
                vqa=row.vqa,
            )
            for row in rows
        ]
    table = analytics.aggregate(rows)
    if as_json:
        click.echo(json.dumps([row.__dict__ for row in table], ensure_ascii=False, indent=2))
    else:
        click.echo(analytics.render_table(table))
    return 0


@main.command("correlate")
@click.option("--ratings", "ratings_path", required=True, type=click.Path())
@click.option("--records", "records_path", required=True, type=click.Path())
@click.option("--per-case", is_flag=True, help="One matrix per prompt case instead of pooled.")
@click.option("--json", "as_json", is_flag=True)
def correlate_command(**kwargs: Any) -> None:
    sys.exit(cmd_correlate(**kwargs))


def cmd_correlate(
    ratings_path: str, records_path: str, per_case: bool, as_json: bool
) -> int:
    try:
        ratings = analytics.load_ratings(ratings_path)
        stored, _ = datastore.read_record_file(records_path)
        scores = analytics.scores_from_records(stored)
        result = analytics.correlate_human(ratings, scores, pool_cases=not per_case)
    except (OSError, ValueError, KeyError) as exc:
        click.echo(f"error: {exc}", err=True)
        return 1

    if isinstance(result, dict):
        if as_json:
            click.echo(
                json.dumps(
                    {case: matrix.as_dict() for case, matrix in result.items()},
                    ensure_ascii=False,
                    indent=2,
                )
            )
        else:
            for case, matrix in result.items():
                click.echo(f"case: {case}")
                click.echo(analytics.render_correlations(matrix))
    else:
        if as_json:
            click.echo(json.dumps(result.as_dict(), ensure_ascii=False, indent=2))
        else:
            click.echo(analytics.render_correlations(result))
    return 0


if __name__ == "__main__":
    main()

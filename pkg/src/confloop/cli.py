"""Command-line entry points: synth, run, report, serve."""

from __future__ import annotations

import csv as csv_mod
import hashlib
import json
import logging
import threading
import time
from dataclasses import replace
from pathlib import Path

import click

from .agent.backends import HttpAgentBackend, MockAgentBackend
from .config import ConfigError, RunConfig, load_config
from .dataset import load_dataset
from .knowledge import (
    HashedTokenEmbedding,
    HttpToolSource,
    Index,
    LocalDirectoryTool,
    RemoteEmbeddingBackend,
    ingest,
)
from .orchestrator import run_pipeline
from .review import AutoAcceptPolicy, InteractivePolicy, ScriptedPolicy
from .service import RunStateStore, serve_review_api
from .synth import SynthConfig, SynthError, generate, write_fixture

log = logging.getLogger(__name__)


def run_id_for(cfg: RunConfig) -> str:
    digest = hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()
    return f"run-{digest[:12]}"


def build_backend(cfg: RunConfig):
    if cfg.agent.backend_kind == "mock":
        if not cfg.agent.mock_fixture:
            raise ConfigError("agent.backend_kind=mock requires agent.mock_fixture")
        return MockAgentBackend(cfg.agent.mock_fixture)
    return HttpAgentBackend(cfg.agent.http)


def build_knowledge(cfg: RunConfig) -> tuple[Index | None, list]:
    spec = cfg.knowledge
    if spec.embed_backend == "remote":
        backend = RemoteEmbeddingBackend(dimension=spec.embed_dimension)
    else:
        backend = HashedTokenEmbedding(spec.embed_dimension)
    index = None
    if spec.corpus_dir:
        index = ingest(spec.corpus_dir, backend, spec.chunk_size, spec.chunk_overlap)
    tools: list = [LocalDirectoryTool(d) for d in spec.tool_dirs]
    tools.extend(HttpToolSource(e) for e in spec.tool_endpoints)
    return index, tools


def build_policy(cfg: RunConfig, store: RunStateStore | None = None, run_id: str = ""):
    policy = cfg.review.policy
    if policy == "auto_accept":
        return AutoAcceptPolicy()
    if policy == "scripted":
        return ScriptedPolicy(cfg.review.scripted_fixture)
    if store is None:
        raise ConfigError("interactive policy requires the review service (use `confloop serve`)")
    return InteractivePolicy(store.register_pending(run_id), timeout=cfg.review.timeout)


def _write_meta(out: Path, run_id: str, started: float, status: str) -> None:
    (out / "run_meta.json").write_text(
        json.dumps(
            {"run_id": run_id, "started_at": started, "finished_at": time.time(), "status": status},
            indent=2,
        ),
        encoding="utf-8",
    )


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Enable debug logging.")
def main(verbose: bool) -> None:
    """Iterative confounder discovery over causal trees."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")


@main.command("synth")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True),
              help="Generator config (JSON).")
@click.option("--out", "out_dir", required=True, type=click.Path(), help="Output directory.")
@click.option("--seed", type=int, default=None, help="Override the config seed.")
def cmd_synth(config_path: str, out_dir: str, seed: int | None) -> None:
    """Generate a synthetic dataset (CSV + metadata + ground truth)."""
    try:
        cfg = SynthConfig.from_dict(json.loads(Path(config_path).read_text(encoding="utf-8")))
        if seed is not None:
            cfg = replace(cfg, seed=seed)
        ds, truth = generate(cfg)
    except (SynthError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise click.ClickException(f"invalid generator config: {exc}") from None
    paths = write_fixture(ds, truth, out_dir)
    for label, path in paths.items():
        click.echo(f"{label}: {path}")


@main.command("run")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.argument("data_path", type=click.Path(exists=True))
@click.argument("meta_path", type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path(), help="Run output directory.")
@click.option("--seed", type=int, default=None, help="Override the split seed.")
def cmd_run(config_path: str, data_path: str, meta_path: str, out_dir: str, seed: int | None) -> None:
    """Execute the full pipeline in batch mode."""
    try:
        cfg = load_config(config_path)
        if seed is not None:
            cfg = replace(cfg, split=replace(cfg.split, seed=seed))
        if cfg.review.policy == "interactive":
            raise ConfigError("interactive policy requires the review service (use `confloop serve`)")
        backend = build_backend(cfg)
        policy = build_policy(cfg)
        index, tools = build_knowledge(cfg)
    except ConfigError as exc:
        raise click.ClickException(str(exc)) from None
    ds = load_dataset(data_path, meta_path)
    run_id = run_id_for(cfg)
    out = Path(out_dir)
    started = time.time()
    try:
        report, _model = run_pipeline(
            ds, cfg, backend, policy, index=index, tools=tools,
            out_dir=out, run_id=run_id,
        )
    except Exception as exc:
        out.mkdir(parents=True, exist_ok=True)
        _write_meta(out, run_id, started, "failed")
        raise click.ClickException(f"run aborted: {exc}") from exc
    _write_meta(out, run_id, started, "completed")
    click.echo(f"run {run_id} completed: {report['termination_reason']}")
    click.echo(f"report: {out / 'report.json'}")


@main.command("report")
@click.argument("run_dir", type=click.Path(exists=True))
@click.option("--csv", "csv_path", type=click.Path(), default=None,
              help="Also write the table as CSV.")
def cmd_report(run_dir: str, csv_path: str | None) -> None:
    """Print per-iteration confounders, CI widths, and stability counts."""
    report_path = Path(run_dir) / "report.json"
    if not report_path.exists():
        raise click.ClickException(f"no report.json under {run_dir}")
    try:
        report = json.loads(report_path.read_text(encoding="utf-8"))
        rows = report["iterations"]
    except (json.JSONDecodeError, KeyError) as exc:
        raise click.ClickException(f"corrupt report: {exc}") from None

    header = f"{'iter':>4}  {'confounders':<28} {'mean CI width':>13} {'stable':>7} {'unstable':>8}"
    click.echo(header)
    click.echo("-" * len(header))
    for row in rows:
        width = "-" if row["mean_ci_width"] is None else f"{row['mean_ci_width']:.4f}"
        names = ",".join(row["new_confounders"]) or "-"
        click.echo(f"{row['index']:>4}  {names:<28} {width:>13} {row['stable_count']:>7} {row['unstable_count']:>8}")
    click.echo(f"validated: {', '.join(report['validated']) or '(none)'}")
    click.echo(f"termination: {report['termination_reason']}")

    if csv_path:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv_mod.writer(fh)
            writer.writerow(["iteration", "new_confounders", "mean_ci_width", "stable_count", "unstable_count"])
            for row in rows:
                writer.writerow([
                    row["index"], ";".join(row["new_confounders"]),
                    "" if row["mean_ci_width"] is None else row["mean_ci_width"],
                    row["stable_count"], row["unstable_count"],
                ])
        click.echo(f"csv: {csv_path}")


@main.command("serve")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.argument("data_path", type=click.Path(exists=True))
@click.argument("meta_path", type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--bind", default="127.0.0.1:8000", show_default=True, help="host:port to serve on.")
@click.option("--ui-dir", type=click.Path(), default=None, help="Static UI assets to serve at /ui.")
def cmd_serve(config_path: str, data_path: str, meta_path: str, out_dir: str,
              bind: str, ui_dir: str | None) -> None:
    """Serve the review API while the pipeline runs; blocks at review gates."""
    try:
        cfg = load_config(config_path)
        backend = build_backend(cfg)
        index, tools = build_knowledge(cfg)
    except ConfigError as exc:
        raise click.ClickException(str(exc)) from None
    ds = load_dataset(data_path, meta_path)
    run_id = run_id_for(cfg)
    store = RunStateStore()
    store.register_run(run_id)
    policy = build_policy(cfg, store=store, run_id=run_id)
    out = Path(out_dir)
    started = time.time()

    def pipeline() -> None:
        try:
            run_pipeline(ds, cfg, backend, policy, index=index, tools=tools,
                         out_dir=out, run_id=run_id, sink=store)
            store.set_status(run_id, "completed")
            _write_meta(out, run_id, started, "completed")
        except Exception:
            log.exception("pipeline failed")
            store.set_status(run_id, "failed")
            out.mkdir(parents=True, exist_ok=True)
            _write_meta(out, run_id, started, "failed")

    worker = threading.Thread(target=pipeline, daemon=True, name="confloop-pipeline")
    worker.start()
    handle = serve_review_api(store, bind=bind, ui_dir=ui_dir)
    click.echo(f"review service on http://{bind} (run {run_id}); Ctrl-C to stop")
    try:
        while handle.thread.is_alive():
            handle.thread.join(timeout=0.5)
    except KeyboardInterrupt:
        pass
    finally:
        handle.stop()
        if worker.is_alive():
            # Pipeline still blocked (e.g. at a review gate): persist what we have.
            out.mkdir(parents=True, exist_ok=True)
            partial = store.get_report(run_id)
            (out / "report.partial.json").write_text(
                json.dumps(partial, sort_keys=True, indent=2), encoding="utf-8"
            )
            _write_meta(out, run_id, started, "interrupted")
            click.echo(f"partial report persisted to {out / 'report.partial.json'}")


if __name__ == "__main__":
    main()

#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Command Line Interface - Интерфейс командной строки

``davit`` command group: analyze, selftest, train-toy, infer, export-features,
schema, presets and probe. Machine-readable output goes to stdout, logs and
errors to stderr.

Exit codes: 0 success, 1 runtime or numeric failure, 2 usage or config error.
"""

import functools
import json
import logging
from dataclasses import asdict
from pathlib import Path
from typing import List, Optional

import click
import numpy as np
from rich.console import Console
from rich.table import Table

from app.config import Settings
from app.core.config import RunConfig
from app.core.errors import ConfigError, DavitError, DimensionError, FormatError
from app.core.parallel import set_num_threads
from app.core.rng import Rng
from app.core.tensor import Tensor
from app.logging_conf import configure_logging
from app.models.checkpoint import load_checkpoint, save_checkpoint
from app.models.config import ModelConfig, get_preset, preset_names
from app.models.davit import build_model
from app.models.layers import Mode
from app.services.analysis import count_flops, count_params, scaling_probe
from app.services.feature_export import export_feature_maps, read_image
from app.services.selftest import LEVELS, run_selftest
from app.services.toy_data import generate_toy_dataset
from app.services.training import Trainer
from app.utils.export_manager import ExportFormat, ReportExporter

logger = logging.getLogger(__name__)

USAGE_ERRORS = (ConfigError, DimensionError, FormatError)


def handle_errors(fn):
    """Map library errors to exit codes"""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except USAGE_ERRORS as exc:
            click.echo(f"error: {exc}", err=True)
            raise SystemExit(2)
        except DavitError as exc:
            click.echo(f"error: {exc}", err=True)
            raise SystemExit(1)
    return wrapper


def model_options(fn):
    """--preset/--config plus the model override flags"""
    options = [
        click.option("--preset", type=str, default=None, help="Model preset name"),
        click.option("--config", "config_path", type=click.Path(path_type=Path), default=None,
                     help="Run-config file (YAML or JSON)"),
        click.option("--scale-mode", type=click.Choice(["inv_sqrt_Cg", "inv_sqrt_P"]), default=None),
        click.option("--ffn/--no-ffn", "ffn_enabled", default=None),
        click.option("--block-order", type=click.Choice(["window_first", "channel_first", "parallel"]),
                     default=None),
        click.option("--window-mode", type=click.Choice(["fit", "fixed", "global"]), default=None),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


def _run_config(subcommand: str, **values) -> RunConfig:
    return RunConfig(subcommand=subcommand, **values)


def _console() -> Console:
    return Console(highlight=False)


@click.group()
@click.option("--log-level", default=None, help="Override DAVIT_LOG_LEVEL")
@click.option("--threads", type=int, default=None, help="Override DAVIT_THREADS (0 = auto)")
@click.pass_context
@handle_errors
def cli(ctx, log_level, threads):
    """Dual attention vision backbone toolkit"""
    settings = Settings.load(log_level=log_level, threads=threads)
    configure_logging(settings)
    set_num_threads(settings.threads)
    ctx.obj = settings


@cli.command()
@model_options
@click.option("--res", "resolution", type=int, default=224, show_default=True)
@click.option("--out", type=click.Path(path_type=Path), default=None,
              help="Write the report here (.csv for rows, anything else JSON)")
@click.option("--table", is_flag=True, help="Print a per-term table instead of JSON")
@handle_errors
def analyze(preset, config_path, scale_mode, ffn_enabled, block_order, window_mode,
            resolution, out, table):
    """Parameter and FLOP report for a preset or config"""
    run = _run_config("analyze", preset=preset, config_path=config_path, resolution=resolution,
                      out=out, scale_mode=scale_mode, ffn_enabled=ffn_enabled,
                      block_order=block_order, window_mode=window_mode)
    config = run.resolve_model()
    report = count_flops(config, resolution)
    exporter = ReportExporter()
    if out is not None:
        export_format = ExportFormat.CSV if out.suffix.lower() == ".csv" else ExportFormat.JSON
        exporter.export_cost_report(report, export_format, out)
    if table:
        grid = Table(title=f"{config.name} @ {resolution}")
        grid.add_column("term")
        grid.add_column("params", justify="right")
        grid.add_column("GFLOPs", justify="right")
        for term, totals in report.by_term().items():
            grid.add_row(term, f"{totals['params']:,}", f"{totals['flops'] / 1e9:.3f}")
        grid.add_row("total", f"{report.total_params:,}", f"{report.total_flops / 1e9:.3f}")
        _console().print(grid)
    else:
        click.echo(report.to_json())


@cli.command()
@click.option("--level", type=click.Choice(LEVELS), default="quick", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--json", "as_json", is_flag=True, help="Emit the report as JSON")
@handle_errors
def selftest(level, seed, as_json):
    """Run the invariant suites"""
    report = run_selftest(level, seed)
    if as_json:
        click.echo(json.dumps(report.to_dict(), indent=2))
    else:
        for line in report.lines():
            click.echo(line)
        click.echo(f"{len(report.results) - len(report.failures)}/{len(report.results)} checks "
                   f"passed ({level})")
    if not report.passed:
        raise SystemExit(1)


@cli.command("train-toy")
@model_options
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(path_type=Path), default=None,
              help="Output directory (default <output_dir>/toy)")
@click.option("--epochs", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--lr", "peak_lr", type=float, default=None)
@click.option("--progress/--no-progress", default=None)
@click.pass_obj
@handle_errors
def train_toy(settings, preset, config_path, scale_mode, ffn_enabled, block_order, window_mode,
              seed, out, epochs, batch_size, peak_lr, progress):
    """Train on the procedural toy dataset, write a checkpoint and a train log"""
    if preset is None and config_path is None:
        preset = "micro"
    run = _run_config("train-toy", preset=preset, config_path=config_path, seed=seed, out=out,
                      scale_mode=scale_mode, ffn_enabled=ffn_enabled, block_order=block_order,
                      window_mode=window_mode)
    manager = run.manager()
    manager.apply_overrides("training", epochs=epochs, batch_size=batch_size, peak_lr=peak_lr,
                            progress=progress)
    config = manager.model_config()
    hyperparams = manager.training()
    spec = manager.dataset()
    if config.num_classes != spec.num_classes or config.in_chans != spec.channels:
        raise ConfigError(f"model expects {config.in_chans} channels / {config.num_classes} "
                          f"classes but the dataset has {spec.channels} / {spec.num_classes}")
    config.stage_windows(spec.image_size, spec.image_size)

    out = out or Path(settings.output_dir) / "toy"
    out.mkdir(parents=True, exist_ok=True)
    dataset = generate_toy_dataset(spec)
    model = build_model(config, seed=seed)
    trainer = Trainer(model, hyperparams, Rng(seed).spawn(0))
    log = trainer.fit(dataset)

    manager.save_config(out / "run_config.yaml")
    log_path = log.write(out / "train_log.jsonl")
    checkpoint = save_checkpoint(model, out / "model.ckpt",
                                 extra={"train_state": trainer.state.to_dict()})
    click.echo(json.dumps({"checkpoint": str(checkpoint), "log": str(log_path),
                           "steps": trainer.state.step,
                           "final_test_accuracy": log.final_test_accuracy}, indent=2))


def _model_for(checkpoint: Optional[Path], run: RunConfig, seed: int):
    explicit = run.preset is not None or run.config_path is not None
    if checkpoint is not None:
        return load_checkpoint(checkpoint, run.resolve_model() if explicit else None)
    if not explicit:
        raise ConfigError("give --checkpoint or a model via --preset/--config")
    return build_model(run.resolve_model(), seed=seed)


@cli.command()
@click.option("--checkpoint", type=click.Path(path_type=Path, exists=True), required=True)
@click.option("--image", type=click.Path(path_type=Path, exists=True), required=True,
              help="Tensor container or binary PPM")
@model_options
@handle_errors
def infer(checkpoint, image, preset, config_path, scale_mode, ffn_enabled, block_order,
          window_mode):
    """Classify an image with a stored model"""
    run = _run_config("infer", preset=preset, config_path=config_path,
                      scale_mode=scale_mode, ffn_enabled=ffn_enabled, block_order=block_order,
                      window_mode=window_mode)
    model = _model_for(checkpoint, run, 0)
    batch = read_image(image, dtype=model.dtype)
    logits = model(Tensor(batch, dtype=model.dtype), Mode.EVAL).data
    predictions = [{"class": int(np.argmax(row)), "logits": [float(v) for v in row]}
                   for row in logits]
    click.echo(json.dumps({"predictions": predictions}, indent=2))


def _parse_channels(value: Optional[str]) -> Optional[List[int]]:
    if value is None:
        return None
    try:
        return [int(part) for part in value.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"--channels expects comma-separated integers, got '{value}'") from None


@cli.command("export-features")
@click.option("--checkpoint", type=click.Path(path_type=Path, exists=True), default=None)
@click.option("--image", type=click.Path(path_type=Path, exists=True), required=True)
@click.option("--stage", type=int, required=True)
@click.option("--channels", type=str, default=None, help="Comma-separated channel indices")
@click.option("--top-k", type=int, default=None)
@click.option("--out-channel", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(path_type=Path), default=None)
@click.option("--seed", type=int, default=0, show_default=True)
@model_options
@click.pass_obj
@handle_errors
def export_features(settings, checkpoint, image, stage, channels, top_k, out_channel, out, seed,
                    preset, config_path, scale_mode, ffn_enabled, block_order, window_mode):
    """Write stage feature maps as PGM files"""
    run = _run_config("export-features", preset=preset, config_path=config_path, seed=seed,
                      out=out, scale_mode=scale_mode, ffn_enabled=ffn_enabled,
                      block_order=block_order, window_mode=window_mode)
    model = _model_for(checkpoint, run, seed)
    batch = read_image(image, dtype=model.dtype)
    out = out or Path(settings.output_dir) / "features"
    written = export_feature_maps(model, batch, stage, out, channels=_parse_channels(channels),
                                  top_k=top_k, out_channel=out_channel)
    click.echo(json.dumps({"files": [str(path) for path in written]}, indent=2))


@cli.command()
def schema():
    """Print the model config JSON schema"""
    click.echo(json.dumps(ModelConfig.model_json_schema(), indent=2))


@cli.command()
@click.option("--res", "resolution", type=int, default=224, show_default=True)
@handle_errors
def presets(resolution):
    """Table of presets with parameters and FLOPs"""
    grid = Table(title=f"presets @ {resolution}")
    grid.add_column("preset")
    grid.add_column("dims")
    grid.add_column("depths")
    grid.add_column("ffn")
    grid.add_column("params (M)", justify="right")
    grid.add_column("GFLOPs", justify="right")
    for name in preset_names():
        config = get_preset(name)
        params = count_params(config).total_params
        try:
            gflops = f"{count_flops(config, resolution).total_flops / 1e9:.2f}"
        except DimensionError:
            gflops = "n/a"
        grid.add_row(name, str(config.stage_dims), str(list(config.depths)),
                     "yes" if config.ffn_enabled else "no", f"{params / 1e6:.2f}", gflops)
    _console().print(grid)


@cli.command()
@model_options
@click.option("--res", "resolutions", type=int, multiple=True, default=(224, 448),
              show_default=True)
@click.option("--global-baseline", is_flag=True, help="Also probe the whole-grid-window baseline")
@click.option("--json", "as_json", is_flag=True)
@handle_errors
def probe(preset, config_path, scale_mode, ffn_enabled, block_order, window_mode, resolutions,
          global_baseline, as_json):
    """Attention-term FLOPs against token count"""
    run = _run_config("probe", preset=preset, config_path=config_path, scale_mode=scale_mode,
                      ffn_enabled=ffn_enabled, block_order=block_order, window_mode=window_mode)
    config = run.resolve_model()
    variants = [(config.name, config)]
    if global_baseline:
        variants.append((f"{config.name} (global)", config.with_overrides(window_mode="global")))
    results = {label: scaling_probe(cfg, list(resolutions)) for label, cfg in variants}
    if as_json:
        click.echo(json.dumps({label: [asdict(row) for row in rows]
                               for label, rows in results.items()}, indent=2))
        return
    grid = Table(title="attention scaling")
    for column in ("config", "res", "P", "attention GFLOPs", "FLOPs / P"):
        grid.add_column(column)
    for label, rows in results.items():
        for row in rows:
            grid.add_row(label, str(row.resolution), str(row.tokens),
                         f"{row.attention_flops / 1e9:.3f}", f"{row.ratio:,.1f}")
    _console().print(grid)


def main():
    cli(prog_name="davit")


if __name__ == "__main__":
    main()

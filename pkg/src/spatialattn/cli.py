"""Command-line entry point: ``spatialattn <command>``."""
from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from .config import ConfigError, ExperimentConfig, parse_config


def _load(config_path: str | None, seed: int | None) -> ExperimentConfig:
    try:
        cfg = parse_config(config_path)
        if seed is not None:
            cfg = cfg.with_overrides(training={"seed": seed})
    except ConfigError as exc:
        raise click.ClickException(f"invalid config: {exc}") from None
    return cfg


def _out_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise click.ClickException(f"cannot create {out}: {exc}") from None
    return out


def _manifest(path: str):
    from .scene import DatasetManifest

    p = Path(path)
    if p.is_dir():
        p = p / "manifest.jsonl"
    try:
        return DatasetManifest.load(p)
    except (OSError, ValueError) as exc:
        raise click.ClickException(f"cannot load manifest {p}: {exc}") from None


def _checkpoint(path: str):
    from .training import ModelCheckpoint

    try:
        return ModelCheckpoint.load(path)
    except (OSError, ValueError) as exc:
        raise click.ClickException(f"cannot load checkpoint {path}: {exc}") from None


config_opt = click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                          help="INI config file; defaults apply when omitted.")
seed_opt = click.option("--seed", type=int, default=None, help="Override training.seed (the root seed).")
out_opt = click.option("--out", required=True, type=click.Path(file_okay=False), help="Output directory.")


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose):
    """Multi-channel front end with spatial attention: simulation, training and analysis."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, stream=sys.stderr,
                        format="%(asctime)s %(name)s %(message)s")


@main.command()
@config_opt
@out_opt
@seed_opt
def simulate(config_path, out, seed):
    """Generate train and eval mixtures with manifests under OUT/train and OUT/eval."""
    from .experiment import simulate as run_sim

    cfg = _load(config_path, seed)
    root = _out_dir(out)
    (root / "config.ini").write_text(cfg.dumps())
    tr, ev = run_sim(cfg, root)
    click.echo(f"train: {len(tr)} utterances -> {root / 'train' / 'manifest.jsonl'}")
    click.echo(f"eval: {len(ev)} utterances -> {root / 'eval' / 'manifest.jsonl'}")


@main.command()
@config_opt
@click.option("--data", required=True, type=click.Path(exists=True), help="Training manifest (or its directory).")
@out_opt
@seed_opt
@click.option("--variant", default=None, help="Pooling variant; defaults to training.variant.")
@click.option("--mode", type=click.Choice(["online", "offline", "latency"]), default=None,
              help="Attention mode; shorthand for --variant attention-<mode>.")
def train(config_path, data, out, seed, variant, mode):
    """Train one model and write checkpoint.bin and metrics.jsonl."""
    from .model import VARIANTS
    from .training import TrainingError
    from .training import train as run_train

    cfg = _load(config_path, seed)
    if mode is not None:
        if variant is not None and variant != f"attention-{mode}":
            raise click.ClickException("--variant and --mode disagree")
        variant = f"attention-{mode}"
    if variant is not None and variant not in VARIANTS:
        raise click.ClickException(f"unknown variant {variant!r}; expected one of {', '.join(VARIANTS)}")
    manifest = _manifest(data)
    try:
        ckpt, metrics = run_train(cfg, manifest, _out_dir(out), variant)
    except TrainingError as exc:
        raise click.ClickException(str(exc)) from None
    last = metrics[-1] if metrics else {}
    click.echo(f"{ckpt.variant}: {len(metrics)} epochs, val loss {last.get('val_loss', float('nan')):.4f}")


@main.command()
@click.option("--ckpt", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", required=True, type=click.Path(exists=True), help="Evaluation manifest (or its directory).")
@out_opt
def evaluate(ckpt, data, out):
    """Score a checkpoint; writes report.json, logits.csv and (attention models) attention.csv."""
    from .analysis import (
        dumps_report,
        run_inference,
        write_attention_csv,
        write_logits_csv,
    )
    from .analysis import evaluate as run_eval
    from .training import load_utterances

    ck = _checkpoint(ckpt)
    manifest = _manifest(data)
    root = _out_dir(out)
    try:
        utts = load_utterances(manifest, ck.config)
        inf = run_inference(ck, utts, ck.config, ck.config.training.batch_size)
        report = run_eval(ck, utts, inference=inf)
    except ValueError as exc:
        raise click.ClickException(str(exc)) from None
    text = dumps_report(report)
    (root / "report.json").write_text(text)
    write_logits_csv(inf.logits, root / "logits.csv")
    if inf.attention:
        write_attention_csv(inf.attention, root / "attention.csv")
    click.echo(text, nl=False)


@main.command()
@click.option("--mode", type=click.Choice(["online", "offline", "latency", "all"]), default="all",
              help="Check one attention mode, or every pooling variant (default).")
@click.option("--eps", type=float, default=1e-6, show_default=True)
@click.option("--no-sweep", is_flag=True, help="Skip the step-size sweep.")
def gradcheck(mode, eps, no_sweep):
    """Compare analytic gradients with central differences on a tiny model."""
    from .gradcheck import TOLERANCE, run_gradcheck
    from .model import VARIANTS

    variants = VARIANTS if mode == "all" else (f"attention-{mode}",)
    reports, errs, convex, ok = run_gradcheck(variants, eps, sweep=not no_sweep)
    for r in reports:
        click.echo("\n".join(r.lines()))
    if errs:
        curve = ", ".join(f"{k:g}: {v:.3e}" for k, v in sorted(errs.items(), reverse=True))
        click.echo(f"eps sweep ({reports[0].variant}): {curve}; {'convex' if convex else 'NOT convex'}")
    click.echo(f"gradcheck {'PASS' if ok else 'FAIL'} (tolerance {TOLERANCE:g})")
    if not ok:
        sys.exit(1)


@main.command()
@click.option("--ckpt", required=True, type=click.Path(exists=True, dir_okay=False))
@out_opt
@click.option("--az-step", type=float, default=5.0, show_default=True)
@click.option("--el-step", type=float, default=5.0, show_default=True)
def directivity(ckpt, out, az_step, el_step):
    """White-noise directivity grids and raw weights of the learned spatial filters."""
    from .analysis import directivity as grids_for
    from .analysis import write_directivity_csv, write_filters_csv
    from .beamformer import FrontEndParams
    from .scene import ArrayGeometry

    ck = _checkpoint(ckpt)
    cfg = ck.config
    W = FrontEndParams.from_params(ck.params).W
    geom = ArrayGeometry.rectangle(cfg.array.width_m, cfg.array.depth_m)
    try:
        grids = grids_for(W, geom, cfg.dsp.sample_rate, cfg.dsp.resolved_fft_size, az_step, el_step,
                          cfg.array.speed_of_sound)
    except ValueError as exc:
        raise click.ClickException(str(exc)) from None
    root = _out_dir(out)
    write_directivity_csv(grids, root / "directivity.csv")
    write_filters_csv(W, root / "filters.csv")
    for g in grids:
        az, el = g.argmax
        click.echo(f"filter {g.p}: peak at azimuth {az:g}, elevation {el:g}; dynamic range {g.dynamic_range_db:.2f} dB")


@main.command("attention-viz")
@click.option("--ckpt", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", required=True, type=click.Path(exists=True))
@out_opt
def attention_viz(ckpt, data, out):
    """Export attention traces (attention.csv) and their statistics (attention_stats.json)."""
    from .analysis import attention_stats, run_inference, write_attention_csv
    from .training import load_utterances

    ck = _checkpoint(ckpt)
    if ck.spec.pooling != "attention":
        raise click.ClickException(f"checkpoint variant {ck.variant!r} has no attention subnet")
    utts = load_utterances(_manifest(data), ck.config)
    inf = run_inference(ck, utts, ck.config, ck.config.training.batch_size)
    root = _out_dir(out)
    write_attention_csv(inf.attention, root / "attention.csv")
    stats = attention_stats(inf.attention, ck.config.dsp.hop_s)
    text = json.dumps(stats, indent=2) + "\n"
    (root / "attention_stats.json").write_text(text)
    click.echo(text, nl=False)


@main.command()
@config_opt
@out_opt
@seed_opt
def experiment(config_path, out, seed):
    """Simulate, train every configured variant, evaluate, and tabulate."""
    from .experiment import format_table, run_experiment

    cfg = _load(config_path, seed)
    try:
        rows, ok = run_experiment(cfg, _out_dir(out))
    except (ValueError, OSError) as exc:
        raise click.ClickException(str(exc)) from None
    click.echo(format_table(rows), nl=False)
    if not ok:
        sys.exit(1)


if __name__ == "__main__":
    main()

"""Simulate -> train every pooling variant -> evaluate -> comparison table."""
from __future__ import annotations

import csv
import logging
from pathlib import Path

from .analysis import dumps_report, evaluate, run_inference, write_attention_csv
from .config import ExperimentConfig
from .scene import DatasetManifest, SimConfig, generate_dataset
from .training import load_utterances, train

log = logging.getLogger(__name__)

TABLE_FIELDS = ("variant", "status", "frame_accuracy", "utterance_accuracy", "mean_cross_entropy", "epochs")


def sim_config(cfg: ExperimentConfig, split: str) -> SimConfig:
    s, d, a = cfg.simulation, cfg.dsp, cfg.array
    return SimConfig(
        count=s.train_count if split == "train" else s.eval_count, split=split, seed=cfg.training.seed,
        n_classes=s.n_classes, sample_rate=d.sample_rate, duration_s=s.duration_s,
        snr_range_db=(s.snr_min_db, s.snr_max_db),
        elevation_range_deg=(s.elevation_min_deg, s.elevation_max_deg),
        distance_range_m=(s.distance_min_m, s.distance_max_m), min_separation_deg=s.min_separation_deg,
        reflection_order=s.reflection_order, reflection_coeff=s.reflection_coeff,
        speed_of_sound=a.speed_of_sound, array_width=a.width_m, array_depth=a.depth_m,
        window_len_s=d.window_len_s, hop_s=d.hop_s, wav_format=s.wav_format,
    )


def simulate(cfg: ExperimentConfig, out_dir: str | Path) -> tuple[DatasetManifest, DatasetManifest]:
    out = Path(out_dir)
    train_m = generate_dataset(sim_config(cfg, "train"), out / "train")
    eval_m = generate_dataset(sim_config(cfg, "eval"), out / "eval")
    return train_m, eval_m


def write_table(rows: list[dict], out: Path) -> None:
    with open(out / "comparison.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TABLE_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in TABLE_FIELDS})
    (out / "comparison.txt").write_text(format_table(rows))


def format_table(rows: list[dict]) -> str:
    lines = [f"{'variant':<20} {'frame_acc':>9} {'utt_acc':>8} {'ce':>8}  status"]
    for r in rows:
        if r["status"] == "ok":
            lines.append(f"{r['variant']:<20} {r['frame_accuracy']:>9.4f} {r['utterance_accuracy']:>8.4f} "
                         f"{r['mean_cross_entropy']:>8.4f}  ok")
        else:
            lines.append(f"{r['variant']:<20} {'-':>9} {'-':>8} {'-':>8}  {r['status']}")
    return "\n".join(lines) + "\n"


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path) -> tuple[list[dict], bool]:
    """Run the comparison; returns (table rows, all stages succeeded).

    Each variant writes ``config.ini``, ``metrics.jsonl``, ``checkpoint.bin``
    and ``report.json`` under ``<out>/<variant>/``. The table is rewritten
    after every variant so partial results survive a failure.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.dumps())
    if cfg.experiment.simulate:
        train_m, eval_m = simulate(cfg, out / "data")
    else:
        if not cfg.paths.data or not cfg.paths.eval_data:
            raise ValueError("paths.data and paths.eval_data are required when experiment.simulate is false")
        train_m, eval_m = DatasetManifest.load(cfg.paths.data), DatasetManifest.load(cfg.paths.eval_data)
    train_utts = load_utterances(train_m, cfg)
    eval_utts = load_utterances(eval_m, cfg)
    rows: list[dict] = []
    ok = True
    for variant in cfg.experiment.variant_list:
        vdir = out / variant
        try:
            ckpt, metrics = train(cfg, train_m, vdir, variant, utterances=train_utts)
            inf = run_inference(ckpt, eval_utts, cfg, cfg.training.batch_size)
            report = evaluate(ckpt, eval_utts, inference=inf)
            (vdir / "report.json").write_text(dumps_report(report))
            if inf.attention:
                write_attention_csv(inf.attention, vdir / "attention.csv")
            rows.append({"variant": variant, "status": "ok", "epochs": len(metrics),
                         **{k: report[k] for k in ("frame_accuracy", "utterance_accuracy", "mean_cross_entropy")}})
            log.info("%s: frame accuracy %.4f", variant, report["frame_accuracy"])
        except Exception as exc:  # keep going; the failure is recorded in the table
            log.exception("variant %s failed", variant)
            rows.append({"variant": variant, "status": f"failed: {exc}"})
            ok = False
        write_table(rows, out)
    return rows, ok

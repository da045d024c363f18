"""Development driver: run the reference desk-scale pipeline and print the
quantities the acceptance suite asserts. Not part of the package."""

import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from lalign.config import config_from_flat
from lalign.experiment import run
from lalign.metrics import parse_metrics_csv


def reference_flat(seed=0, **overrides):
    flat = {
        "seed": seed,
        "run_id": "calibrate",
        "stages": ["gen_data", "pretrain_teacher", "maskembed", "probe"],
        "data.grid": 8, "data.patch_size": 4, "data.num_classes": 16,
        "data.classes_min": 2, "data.classes_max": 5,
        "data.occlusion_rate": 0.3,
        "data.align_count": 512, "data.probe_train_count": 256, "data.probe_eval_count": 128,
        "model.dim": 48, "model.depth": 4, "model.heads": 4, "model.softcap": 30.0,
        "teacher.epochs": 10, "teacher.batch_size": 32,
        "teacher.max_lr": 2e-3, "teacher.min_lr": 2e-4, "teacher.warmup_steps": 20,
        "teacher.mask_augment_prob": 0.5,
        "maskembed.epochs": 8, "maskembed.batch_size": 32,
        "maskembed.max_lr": 1e-3, "maskembed.min_lr": 1e-4, "maskembed.warmup_steps": 20,
        "probe.heads": ["transformer"],
        "probe.interventions": ["none"],
        "probe.targets": ["teacher", "encoder"],
        "probe.epochs": 6, "probe.batch_size": 32,
        "probe.max_lr": 1e-3, "probe.min_lr": 1e-4, "probe.warmup_steps": 30,
    }
    flat.update(overrides)
    return flat


def show(out_dir):
    rows = parse_metrics_csv(Path(out_dir) / "metrics.csv")
    probe = {r.metric_name: r.value for r in rows if r.stage == "probe"}
    for name in sorted(probe):
        if "size_bin" not in name:
            print(f"  {name:<55} {probe[name]:.4f}")
    for stage in ("pretrain_teacher", "maskembed", "mim", "clipself_baseline"):
        losses = [r.value for r in rows if r.stage == stage and r.metric_name == "loss"]
        if losses:
            print(f"  {stage}: loss {losses[0]:.4f} -> {losses[-1]:.4f}")
    ident = [r.value for r in rows if r.metric_name == "identity_score"]
    clean = [r.value for r in rows if r.metric_name == "clean_recon_error"]
    if ident:
        print(f"  identity_score {ident[0]:.3f} -> {ident[-1]:.3f}; "
              f"clean_recon {clean[0]:.4f} -> {clean[-1]:.4f}")
    return probe


if __name__ == "__main__":
    overrides = {}
    out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("/tmp/calib")
    t0 = time.time()
    cfg = config_from_flat(reference_flat())
    run(cfg, out)
    print(f"total {time.time() - t0:.0f}s")
    probe = show(out)
    t_loc = probe["teacher.transformer.none.local_macro_recall"]
    e_loc = probe["encoder.transformer.none.local_macro_recall"]
    t_glob = probe["teacher.transformer.none.global_macro_recall"]
    e_glob = probe["encoder.transformer.none.global_macro_recall"]
    print(f"\nC5 local gap: {100 * (e_loc - t_loc):+.1f} points (need >= +5)")
    print(f"C5 global drop: {100 * (e_glob - t_glob):+.1f} points (need >= -1)")

"""Desk-scale comparison of all five modes on one synthetic dataset.

Synthesizes 10/2/4 train/val/test studies at 32x32x16, trains every mode
for 100 epochs at batch 4 with one seed, and scores the best-validation
checkpoints plus the raw low-count input on the test split.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import replace
from pathlib import Path

from .data import DatasetConfig, build_dataset, load_manifest
from .evaluation import LOW_COUNT, evaluate, format_table, write_csv, write_summary
from .model import MODES, ModelConfig
from .training import TrainConfig, load_checkpoint, train

log = logging.getLogger(__name__)


def desk_configs(seed: int = 0, epochs: int = 100):
    data = DatasetConfig(
        n_train=10,
        n_val=2,
        n_test=4,
        train_realizations=8,
        val_realizations=8,
        test_realizations=8,
        dims=(32, 32, 16),
        seed=seed,
    )
    return data, TrainConfig(epochs=epochs, batch_size=4, seed=seed), ModelConfig()


def run_desk_experiment(out_dir, seed: int = 0, epochs: int = 100, modes=MODES, data_config=None, model_config=None):
    """Run (or resume) the experiment under ``out_dir``; returns the summary dict.

    A mode whose ``best.ckpt`` already exists under ``out_dir`` is not
    retrained, so an interrupted run can be continued.
    """
    out = Path(out_dir)
    dcfg, tcfg, mcfg = desk_configs(seed, epochs)
    dcfg = data_config or dcfg
    mcfg = model_config or mcfg
    if (out / "data" / "manifest.json").exists():
        manifest = load_manifest(out / "data")
    else:
        manifest = build_dataset(dcfg, out / "data")

    timings = {}
    ckpts = []
    for mode in modes:
        mdir = out / mode
        timing = mdir / "train_seconds.txt"
        if not (mdir / "best.ckpt").exists():
            start = time.perf_counter()
            train(manifest, tcfg, replace(mcfg, mode=mode), mdir)
            timing.write_text(f"{time.perf_counter() - start:.3f}\n")
        if timing.exists():
            timings[mode] = float(timing.read_text())
            log.info("%s trained in %.0fs", mode, timings[mode])
        ckpts.append(load_checkpoint(mdir / "best.ckpt"))

    result = evaluate(ckpts, manifest, "test", names=list(modes))
    write_csv(result, out / "test_metrics.csv")
    write_summary(result, out / "test_summary.json")
    summary = result.summary()
    summary["train_seconds"] = timings
    summary["test_mae"] = {m: result.mean(m, "mae") for m in [LOW_COUNT, *modes]}
    (out / "experiment.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    log.info("\n%s", format_table(result))
    return summary

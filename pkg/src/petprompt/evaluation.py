"""Per-realization metric rows, per-study ensemble statistics and slice images."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .data import DatasetManifest, load_volume
from .metrics import SSIMConfig, ensemble_stats, mae, mse, psnr, ssim3d
from .training import ModelCheckpoint, denoise

# fixed column order; extending it is a versioned change
CSV_COLUMNS = ("method", "study_id", "realization", "delta", "mae", "mse", "psnr", "ssim")
REPORT_VERSION = 1
LOW_COUNT = "unprocessed_low_count"
METHOD_LABELS = {
    "dual": "dual prompts",
    "gpd": "general prompt only (blind prompting)",
    "clp": "count-level prompt only",
    "film": "condition-delta (FiLM stand-in for a conditional model)",
    "none": "plain U-Net (direct train)",
    LOW_COUNT: "unprocessed low count",
}


@dataclass
class EvalResult:
    rows: list[dict] = field(default_factory=list)
    ensembles: dict[str, dict[str, dict]] = field(default_factory=dict)

    def methods(self) -> list[str]:
        return list(dict.fromkeys(r["method"] for r in self.rows))

    def mean(self, method: str, metric: str) -> float:
        return float(np.mean([r[metric] for r in self.rows if r["method"] == method]))

    def summary(self) -> dict:
        table = []
        for m in self.methods():
            entry = {"method": m, "label": METHOD_LABELS.get(m.split("@")[0], m)}
            for k in ("mae", "mse", "psnr", "ssim"):
                entry[k] = self.mean(m, k)
            entry["n"] = sum(r["method"] == m for r in self.rows)
            table.append(entry)
        table.sort(key=lambda e: e["mae"])
        return {"report_version": REPORT_VERSION, "methods": table, "ensemble": self.ensembles}


def _metric_row(method, vol, pred, ref, ssim_cfg, data_range, mask):
    return {
        "method": method,
        "study_id": vol.study_id,
        "realization": vol.realization,
        "delta": vol.delta,
        "mae": mae(pred, ref, mask),
        "mse": mse(pred, ref, mask),
        "psnr": psnr(pred, ref, data_range, mask),
        "ssim": ssim3d(pred, ref, ssim_cfg),
    }


def method_name(ckpt: ModelCheckpoint, taken: Iterable[str]) -> str:
    name = ckpt.model_config.mode
    n = 2
    while name in taken:
        name = f"{ckpt.model_config.mode}@{n}"
        n += 1
    return name


def evaluate(
    checkpoints: list[ModelCheckpoint],
    manifest: DatasetManifest,
    split: str = "test",
    ssim_cfg: SSIMConfig | None = None,
    data_range: float | None = None,
    use_support_mask: bool = False,
    slices_dir=None,
    names: list[str] | None = None,
) -> EvalResult:
    """Score each checkpoint and the raw low-count input against the full-count reference."""
    studies = manifest.split(split)
    if not studies:
        raise ValueError(f"manifest has no {split!r} split")
    ssim_cfg = ssim_cfg or SSIMConfig(data_range=data_range)
    if names is None:
        names = []
        for c in checkpoints:
            names.append(method_name(c, names))
    models = [c.build_model() for c in checkpoints]

    result = EvalResult()
    for study in studies:
        ref = load_volume(manifest.resolve(study.full_count_path))
        truth = load_volume(manifest.resolve(study.ground_truth_path))
        mask = truth.voxels > 0 if use_support_mask else None
        lows = [load_volume(manifest.resolve(r.path)) for r in study.realizations]
        outputs = {LOW_COUNT: [v.voxels for v in lows]}
        for name, ckpt, model in zip(names, checkpoints, models):
            outputs[name] = [denoise(ckpt, v, model=model).voxels for v in lows]
        for name, preds in outputs.items():
            for vol, pred in zip(lows, preds):
                result.rows.append(_metric_row(name, vol, pred, ref, ssim_cfg, data_range, mask))
            if len(preds) >= 2:
                stats = ensemble_stats(preds, ref, mask)
                result.ensembles.setdefault(name, {})[study.study_id] = stats.summary()
        if slices_dir is not None:
            write_slices(Path(slices_dir), study.study_id, lows[0].voxels, outputs, ref.voxels)
    # stable row order: method, then study, then realization
    order = {m: i for i, m in enumerate([LOW_COUNT, *names])}
    result.rows.sort(key=lambda r: (order[r["method"]], r["study_id"], r["realization"]))
    return result


def write_csv(result: EvalResult, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
        w.writeheader()
        for r in result.rows:
            w.writerow({k: ("" if r[k] is None else r[k]) for k in CSV_COLUMNS})


def write_summary(result: EvalResult, path) -> None:
    Path(path).write_text(json.dumps(result.summary(), indent=1, sort_keys=True) + "\n")


def format_table(result: EvalResult) -> str:
    lines = [f"{'method':<20} {'MAE':>9} {'MSE':>9} {'PSNR':>9} {'SSIM':>8}"]
    for e in result.summary()["methods"]:
        lines.append(f"{e['method']:<20} {e['mae']:9.4f} {e['mse']:9.4f} {e['psnr']:9.3f} {e['ssim']:8.4f}")
    return "\n".join(lines)


def write_slices(out: Path, study_id: str, low: np.ndarray, outputs: dict, ref: np.ndarray) -> None:
    """Mid-axial slices of input, each method's first output, reference, and bias map.

    All intensity images share the reference's [min, max] window.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out.mkdir(parents=True, exist_ok=True)
    z = ref.shape[2] // 2
    vmin, vmax = float(ref.min()), float(ref.max())
    if vmax <= vmin:
        vmax = vmin + 1.0
    plt.imsave(out / f"{study_id}_input.png", low[:, :, z], cmap="gray", vmin=vmin, vmax=vmax)
    plt.imsave(out / f"{study_id}_reference.png", ref[:, :, z], cmap="gray", vmin=vmin, vmax=vmax)
    half = 0.5 * (vmax - vmin)
    for name, preds in outputs.items():
        if name == LOW_COUNT:
            continue
        tag = name.replace("@", "_")
        plt.imsave(out / f"{study_id}_{tag}_denoised.png", preds[0][:, :, z], cmap="gray", vmin=vmin, vmax=vmax)
        bias = np.mean(np.stack(preds), axis=0) - ref
        plt.imsave(out / f"{study_id}_{tag}_bias.png", bias[:, :, z], cmap="gray", vmin=-half, vmax=half)

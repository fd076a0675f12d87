"""Dataset evaluation: blind and non-blind protocols, JSON/text reports.

Blind mode scores a manifest as-is (each image at its own recorded quality).
Non-blind mode compresses every clean image at each requested quality factor
and reports one row per factor. Metrics are means of per-image values, so a
single perfectly-restored image makes the row's PSNR infinite; infinities
are serialized as the string "inf" to keep the JSON strict.
"""

from __future__ import annotations

import json
import math

import numpy as np

from . import tensor as T
from .data import DatasetManifest
from .imgio import from_model_output, read_image, to_model_input
from .jpeg import DegradeSpec, jpeg_degrade
from .metrics import evaluate_pair


def restore_image(model, img):
    """Run one uint8 [H,W,3] image through the model (None = identity)."""
    if model is None:
        return np.array(img, copy=True)
    out = model(T.Tensor(to_model_input(img)))
    return from_model_output(out.data)


def _mean(values):
    if any(math.isinf(v) for v in values):
        return math.inf
    return sum(values) / len(values)


def _row(qf, reports):
    return {"qf": qf, "n_images": len(reports),
            "psnr": _mean([r.psnr for r in reports]),
            "ssim": _mean([r.ssim for r in reports]),
            "psnrb": _mean([r.psnrb for r in reports])}


def evaluate(model, manifest: DatasetManifest, mode="blind", qfs=None,
             subsampling="420"):
    """Score a model (None = identity) over a dataset. Returns a report dict."""
    if mode not in ("blind", "nonblind"):
        raise ValueError(f"mode must be blind or nonblind, got {mode!r}")
    if not manifest.records:
        raise ValueError("empty manifest")
    rows = []
    if mode == "blind":
        reports = []
        for rec in manifest.records:
            clean = read_image(manifest.clean_path(rec))
            degraded = read_image(manifest.degraded_path(rec))
            reports.append(evaluate_pair(clean, restore_image(model, degraded)))
        rows.append(_row("blind", reports))
    else:
        if not qfs:
            raise ValueError("nonblind mode needs at least one quality factor")
        cleans = [read_image(manifest.clean_path(rec))
                  for rec in manifest.records]
        for qf in qfs:
            spec = DegradeSpec(int(qf), subsampling)
            reports = []
            for clean in cleans:
                degraded = jpeg_degrade(clean, spec)
                reports.append(evaluate_pair(clean, restore_image(model, degraded)))
            rows.append(_row(int(qf), reports))
    return {"dataset": manifest.split, "mode": mode,
            "n_images": len(manifest.records), "subsampling": subsampling,
            "model": "identity" if model is None else "checkpoint",
            "rows": rows}


def _json_safe(value):
    if isinstance(value, float) and math.isinf(value):
        return "inf"
    return value


def report_to_json(report):
    safe = dict(report)
    safe["rows"] = [{k: _json_safe(v) for k, v in row.items()}
                    for row in report["rows"]]
    return json.dumps(safe, indent=2)


def report_from_json(text):
    report = json.loads(text)
    for row in report["rows"]:
        for key in ("psnr", "ssim", "psnrb"):
            if row[key] == "inf":
                row[key] = math.inf
    return report


def render_table(report):
    lines = [f"dataset: {report['dataset']}  mode: {report['mode']}  "
             f"model: {report['model']}",
             f"{'qf':>6}  {'images':>6}  {'psnr':>8}  {'ssim':>7}  {'psnrb':>8}"]
    for row in report["rows"]:
        psnr = f"{row['psnr']:8.2f}" if math.isfinite(row['psnr']) else f"{'inf':>8}"
        psnrb = f"{row['psnrb']:8.2f}" if math.isfinite(row['psnrb']) else f"{'inf':>8}"
        ssim = f"{row['ssim']:7.4f}" if math.isfinite(row['ssim']) else f"{'inf':>7}"
        lines.append(f"{row['qf']:>6}  {row['n_images']:>6}  {psnr}  "
                     f"{ssim}  {psnrb}")
    return "\n".join(lines)

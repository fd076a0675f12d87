"""Blind/non-blind evaluation, reports, and serialization."""

import json
import math

import numpy as np
import pytest

from promptcir.data import DatasetManifest, Record, manifest_from_dir
from promptcir.evaluate import (evaluate, render_table, report_from_json,
                                report_to_json, restore_image)
from promptcir.imgio import write_image
from promptcir.jpeg import DegradeSpec, jpeg_degrade
from promptcir.metrics import evaluate_pair, psnr
from promptcir.network import build, micro_config


@pytest.fixture
def clean_dir(tmp_path, rng):
    d = tmp_path / "clean"
    d.mkdir()
    for i in range(2):
        coarse = rng.integers(0, 256, size=(3, 4, 3), dtype=np.uint8)
        img = np.kron(coarse, np.ones((8, 8, 1), dtype=np.uint8))
        write_image(d / f"img{i}.png", img.astype(np.uint8))
    return d


def test_restore_image_identity_copies(rng):
    img = rng.integers(0, 256, size=(24, 16, 3), dtype=np.uint8)
    out = restore_image(None, img)
    np.testing.assert_array_equal(out, img)
    out[0, 0, 0] ^= 0xFF
    assert img[0, 0, 0] != out[0, 0, 0]  # no aliasing


def test_restore_image_with_model(rng):
    model = build(micro_config(), seed=0)
    img = rng.integers(0, 256, size=(24, 17, 3), dtype=np.uint8)
    out = restore_image(model, img)
    assert out.shape == img.shape and out.dtype == np.uint8


def test_identity_on_lossless_set_is_infinite(tmp_path):
    d = tmp_path / "set"
    d.mkdir()
    records = []
    for i, value in enumerate((64, 200)):
        clean = np.full((16, 16, 3), value, dtype=np.uint8)
        degraded = jpeg_degrade(clean, DegradeSpec(100, "444"))
        np.testing.assert_array_equal(degraded, clean)  # flat survives q=100
        write_image(d / f"c{i}.png", clean)
        write_image(d / f"d{i}.png", degraded)
        records.append(Record(clean=f"c{i}.png", degraded=f"d{i}.png", qf=100))
    manifest = DatasetManifest(root=str(d), split="lossless", records=records)
    report = evaluate(None, manifest, mode="blind")
    row = report["rows"][0]
    assert row["qf"] == "blind" and row["n_images"] == 2
    assert math.isinf(row["psnr"]) and math.isinf(row["psnrb"])
    assert row["ssim"] == pytest.approx(1.0)


def test_identity_nonblind_equals_jpeg_baseline(clean_dir, rng):
    manifest = manifest_from_dir(clean_dir)
    report = evaluate(None, manifest, mode="nonblind", qfs=[10, 30])
    assert [row["qf"] for row in report["rows"]] == [10, 30]

    from promptcir.imgio import read_image
    for row, qf in zip(report["rows"], (10, 30)):
        scores = []
        for rec in manifest.records:
            clean = read_image(manifest.clean_path(rec))
            degraded = jpeg_degrade(clean, DegradeSpec(qf, "420"))
            scores.append(evaluate_pair(clean, degraded))
        assert row["psnr"] == pytest.approx(
            sum(s.psnr for s in scores) / len(scores))
        assert row["ssim"] == pytest.approx(
            sum(s.ssim for s in scores) / len(scores))
        assert row["psnrb"] == pytest.approx(
            sum(s.psnrb for s in scores) / len(scores))
    # lower qf, worse baseline
    assert report["rows"][0]["psnr"] < report["rows"][1]["psnr"]


def test_row_metrics_are_means_of_per_image_values(tmp_path, rng):
    d = tmp_path / "set"
    d.mkdir()
    records = []
    per_image = []
    for i in range(2):
        coarse = rng.integers(0, 256, size=(2, 2, 3), dtype=np.uint8)
        clean = np.kron(coarse, np.ones((8, 8, 1), dtype=np.uint8)).astype(np.uint8)
        degraded = jpeg_degrade(clean, DegradeSpec(10 + 30 * i))
        write_image(d / f"c{i}.png", clean)
        write_image(d / f"d{i}.png", degraded)
        records.append(Record(clean=f"c{i}.png", degraded=f"d{i}.png",
                              qf=10 + 30 * i))
        per_image.append(psnr(clean, degraded))
    manifest = DatasetManifest(root=str(d), split="mix", records=records)
    report = evaluate(None, manifest, mode="blind")
    assert report["rows"][0]["psnr"] == pytest.approx(
        sum(per_image) / len(per_image))


def test_evaluate_validates(clean_dir):
    manifest = manifest_from_dir(clean_dir)
    with pytest.raises(ValueError):
        evaluate(None, manifest, mode="sideways")
    with pytest.raises(ValueError):
        evaluate(None, manifest, mode="nonblind", qfs=[])
    with pytest.raises(ValueError):
        evaluate(None, DatasetManifest(root=".", split="x"), mode="blind")
    with pytest.raises(ValueError):
        evaluate(None, manifest, mode="blind")  # no degraded images on disk


def test_report_json_round_trip(clean_dir):
    manifest = manifest_from_dir(clean_dir)
    report = evaluate(None, manifest, mode="nonblind", qfs=[50])
    text = report_to_json(report)
    json.loads(text)  # strict JSON
    back = report_from_json(text)
    assert back["rows"][0]["psnr"] == pytest.approx(report["rows"][0]["psnr"])

    report["rows"][0]["psnr"] = math.inf
    back = report_from_json(report_to_json(report))
    assert math.isinf(back["rows"][0]["psnr"])
    assert '"inf"' in report_to_json(report)


def test_render_table_layout(clean_dir):
    manifest = manifest_from_dir(clean_dir)
    report = evaluate(None, manifest, mode="nonblind", qfs=[10, 20])
    table = render_table(report)
    lines = table.splitlines()
    assert "psnrb" in lines[1] and "ssim" in lines[1]
    assert len(lines) == 4  # header + column row + one line per qf
    report["rows"][0]["psnr"] = math.inf
    assert "inf" in render_table(report)

"""End-to-end acceptance gates.

Eight numbered criteria, each printing one [PASS]/[FAIL]/[SKIP] line
(visible with `pytest -s` or in failure output). The heavy gates are the
2000-step single-image overfit and its byte-level determinism rerun; both
stay well inside their stated runtime budgets on one CPU core.
"""

import io
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

import promptcir.tensor as T
from promptcir.blocks import TransformerBlock
from promptcir.checks import run_gradchecks
from promptcir.cli import main as cli_main
from promptcir.data import list_images, make_blind_set, manifest_from_dir
from promptcir.evaluate import evaluate, report_to_json, restore_image
from promptcir.hat import HAB, OCAB, RHAG, window_partition, window_reverse
from promptcir.imgio import read_image, write_image
from promptcir.jpeg import DegradeSpec, dct8, idct8, jpeg_degrade
from promptcir.metrics import psnr, psnrb, ssim
from promptcir.network import build, micro_config, save_checkpoint, toy_config
from promptcir.prompt import PromptBank
from promptcir.train import (TrainConfig, desk_stage1, desk_stage2,
                             paper_stage1, paper_stage2, train)

REPO_ROOT = Path(__file__).resolve().parents[1]

BASELINE_EXPECTED = {10: (25.69, 0.743, 24.20), 20: (28.06, 0.826, 26.49)}
BASELINE_TOL = (0.15, 0.010, 0.25)

OVERFIT_STEPS = 2000
OVERFIT_BUDGET_S = 30 * 60
GRADCHECK_BUDGET_S = 10 * 60
BASELINE_BUDGET_S = 5 * 60


def _report(label, ok, detail=""):
    print(f"[{'PASS' if ok else 'FAIL'}] {label}"
          + (f" ({detail})" if detail else ""))
    assert ok, f"{label}: {detail}"


def _skip(label, reason):
    print(f"[SKIP] {label} ({reason})")
    pytest.skip(reason)


# ----------------------------------------------------------------- corpora

def _live1_dir():
    override = os.environ.get("PCIR_LIVE1_DIR")
    candidate = Path(override) if override else REPO_ROOT / "data" / "LIVE1"
    if not candidate.is_dir():
        return None
    try:
        images = list_images(candidate)
    except FileNotFoundError:
        return None
    return candidate if len(images) >= 29 else None


def _smooth_image(seed, h, w):
    rng = np.random.default_rng(seed)
    coarse = rng.integers(0, 256, size=(h // 16, w // 16, 3), dtype=np.uint8)
    img = np.asarray(Image.fromarray(coarse).resize((w, h), Image.BILINEAR))
    noise = rng.normal(0.0, 2.0, size=img.shape)
    return np.clip(img.astype(np.float64) + noise, 0, 255).astype(np.uint8)


@pytest.fixture(scope="module")
def surrogate_images():
    return [_smooth_image(seed, 144, 176) for seed in range(5)]


def _pil_jpeg(img, quality, subsampling="444"):
    buf = io.BytesIO()
    Image.fromarray(img).save(buf, format="JPEG", quality=quality,
                              subsampling=0 if subsampling == "444" else 2)
    buf.seek(0)
    return np.asarray(Image.open(buf).convert("RGB"))


# --------------------------------------------------- criterion 1: baseline

def test_c1_jpeg_baseline_on_live1(tmp_path):
    label = "criterion 1: JPEG baseline metrics on LIVE1 (q=10, q=20)"
    live1 = _live1_dir()
    if live1 is None:
        _skip(label, "LIVE1 corpus not found; place the 29 images under "
                     "data/LIVE1 or set PCIR_LIVE1_DIR "
                     "(codec fidelity is cross-checked by the surrogate gate)")
    report_path = tmp_path / "live1.json"
    start = time.monotonic()
    code = cli_main(["eval", "--identity", "--dataset", str(live1),
                     "--mode", "nonblind", "--qfs", "10,20",
                     "--json", str(report_path)])
    elapsed = time.monotonic() - start
    assert code == 0
    report = json.loads(report_path.read_text())
    rows = {row["qf"]: row for row in report["rows"]}
    details = []
    ok = elapsed < BASELINE_BUDGET_S
    for qf, (want_psnr, want_ssim, want_psnrb) in BASELINE_EXPECTED.items():
        row = rows[qf]
        details.append(f"q={qf}: {row['psnr']:.2f}/{row['ssim']:.3f}/"
                       f"{row['psnrb']:.2f}")
        ok &= abs(row["psnr"] - want_psnr) <= BASELINE_TOL[0]
        ok &= abs(row["ssim"] - want_ssim) <= BASELINE_TOL[1]
        ok &= abs(row["psnrb"] - want_psnrb) <= BASELINE_TOL[2]
    _report(label, ok, f"{'; '.join(details)}; {elapsed:.0f}s")


def test_c1_surrogate_codec_fidelity(surrogate_images):
    """Degradation codec tracks libjpeg on ungated synthetic images."""
    label = "criterion 1 surrogate: codec matches libjpeg within banding"
    worst_psnr_gap = worst_ssim_gap = 0.0
    for img in surrogate_images:
        for qf in (10, 20):
            ours = jpeg_degrade(img, DegradeSpec(qf, "444"))
            ref = _pil_jpeg(img, qf, "444")
            worst_psnr_gap = max(worst_psnr_gap,
                                 abs(psnr(img, ours) - psnr(img, ref)))
            worst_ssim_gap = max(worst_ssim_gap,
                                 abs(ssim(img, ours) - ssim(img, ref)))
    ok = worst_psnr_gap < 0.25 and worst_ssim_gap < 0.01
    _report(label, ok, f"max |dPSNR| {worst_psnr_gap:.3f} dB, "
                       f"max |dSSIM| {worst_ssim_gap:.4f}")


# ------------------------------------- criterion 2: full-scale rows waived

def test_c2_full_scale_rows_not_reproduced():
    label = ("criterion 2: published restoration rows need full-scale "
             "training; property gates stand in")
    s1, s2 = paper_stage1(), paper_stage2()
    ok = (s1.iterations, s2.iterations, s1.batch_size) == (800_000, 600_000, 24)
    ok &= desk_stage1().iterations <= 2000 and desk_stage2().iterations <= 1000
    _report(label, ok,
            f"recorded full-scale recipe {s1.iterations}+{s2.iterations} "
            f"steps at batch {s1.batch_size}; desk runs "
            f"{desk_stage1().iterations}+{desk_stage2().iterations}")


# ----------------------------------------------- criterion 3: derivatives

def test_c3_gradient_suite():
    label = "criterion 3: finite-difference gradient suite, 10 seeds"
    start = time.monotonic()
    results = run_gradchecks(seeds=10)
    elapsed = time.monotonic() - start
    failures = [r for r in results if not r["ok"]]
    worst = max(r["error"] / r["tolerance"] for r in results)
    ok = not failures and elapsed < GRADCHECK_BUDGET_S
    _report(label, ok, f"{len(results)} checks, worst err/tol {worst:.2e}, "
                       f"{elapsed:.0f}s")


# -------------------------------------------------- criterion 4: overfit

def _overfit_clean():
    return _smooth_image(42, 64, 64)


def _run_overfit(out_dir):
    clean_dir = Path(out_dir) / "clean"
    clean_dir.mkdir(parents=True)
    clean = _overfit_clean()
    write_image(clean_dir / "target.png", clean)
    config = TrainConfig(stage=1, crop=64, batch_size=1,
                         iterations=OVERFIT_STEPS, lr_init=2e-4, seed=5,
                         hflip=False, vflip=False, rot90=False, fixed_qf=10,
                         log_every=10 ** 9)
    start = time.monotonic()
    model, history = train(config, manifest_from_dir(clean_dir),
                           net_config=toy_config(), out_dir=out_dir)
    elapsed = time.monotonic() - start

    degraded = jpeg_degrade(clean, DegradeSpec(10))
    restored = restore_image(model, degraded)
    return {"elapsed": elapsed,
            "input_psnr": psnr(clean, degraded),
            "restored_psnr": psnr(clean, restored),
            "losses": [h["loss"] for h in history],
            "restored": restored,
            "checkpoint": (Path(out_dir) / "model_final.pcir").read_bytes()}


@pytest.fixture(scope="module")
def overfit_run(tmp_path_factory):
    return _run_overfit(tmp_path_factory.mktemp("overfit_a"))


def test_c4_desk_overfit_gain(overfit_run):
    label = (f"criterion 4: {OVERFIT_STEPS}-step single-image overfit "
             f"gains >= 3 dB over the q=10 input")
    gain = overfit_run["restored_psnr"] - overfit_run["input_psnr"]
    ok = gain >= 3.0 and overfit_run["elapsed"] < OVERFIT_BUDGET_S
    ok &= overfit_run["losses"][-1] < overfit_run["losses"][0]
    _report(label, ok,
            f"input {overfit_run['input_psnr']:.2f} dB -> restored "
            f"{overfit_run['restored_psnr']:.2f} dB (+{gain:.2f}), "
            f"{overfit_run['elapsed']:.0f}s")


# ------------------------------------------------ criterion 5: invariants

def test_c5_invariant_suites(rng):
    label = "criterion 5: structural invariants"

    # prompt weights are a softmax: nonnegative, sum to one everywhere
    bank = PromptBank(np.random.default_rng(0), in_channels=3, n_bases=4,
                      prompt_dim=3)
    for h, w in [(1, 1), (7, 5), (16, 16)]:
        feat = T.Tensor(rng.normal(size=(2, 3, h, w)).astype(np.float32))
        wts = bank.weights(feat).data
        assert wts.min() >= 0.0
        assert np.abs(wts.sum(axis=1) - 1.0).max() < 1e-6
        assert bank(feat).shape == (2, 3, h, w)  # odd/non-square sizes fine

    # sampling round trips are bit-exact
    x = rng.normal(size=(2, 8, 12, 12)).astype(np.float32)
    t = T.Tensor(x)
    np.testing.assert_array_equal(
        T.pixel_shuffle(T.pixel_unshuffle(t, 2), 2).data, x)
    np.testing.assert_array_equal(
        window_reverse(window_partition(t, 4), 4, 2, 12, 12).data, x)

    # 8x8 transform inverts to float64 roundoff
    worst = 0.0
    for _ in range(50):
        block = rng.normal(scale=100.0, size=(8, 8))
        worst = max(worst, np.abs(idct8(dct8(block)) - block).max())
    assert worst < 1e-10

    # blocking penalty never raises the score
    for i in range(200):
        pair_rng = np.random.default_rng(1000 + i)
        ref = pair_rng.integers(0, 256, size=(24, 24, 3), dtype=np.uint8)
        noise = pair_rng.normal(0, 12, size=ref.shape)
        test = np.clip(ref.astype(np.float64) + noise, 0, 255).astype(np.uint8)
        assert psnrb(ref, test) <= psnr(ref, test) + 1e-9

    # zeroed terminal weights give exact identities at every level
    block_rng = np.random.default_rng(3)
    xin = T.Tensor(rng.normal(size=(1, 4, 8, 8)).astype(np.float32))

    tb = TransformerBlock(block_rng, dim=4, heads=2)
    tb.attn.project_out.weight.data[:] = 0.0
    tb.ffn.project_out.weight.data[:] = 0.0
    np.testing.assert_array_equal(tb(xin).data, xin.data)

    hab = HAB(block_rng, 4, 2, window=4, shift=2, conv_scale=0.0)
    hab.attn.proj.weight.data[:] = 0.0
    hab.attn.proj.bias.data[:] = 0.0
    hab.mlp.fc2.weight.data[:] = 0.0
    hab.mlp.fc2.bias.data[:] = 0.0
    np.testing.assert_array_equal(hab(xin).data, xin.data)

    ocab = OCAB(block_rng, 4, 2, window=4, overlap_ratio=0.5)
    ocab.proj.weight.data[:] = 0.0
    ocab.proj.bias.data[:] = 0.0
    ocab.mlp.fc2.weight.data[:] = 0.0
    ocab.mlp.fc2.bias.data[:] = 0.0
    np.testing.assert_array_equal(ocab(xin).data, xin.data)

    group = RHAG(block_rng, 4, 2, depth=2, window=4)
    group.conv.weight.data[:] = 0.0
    group.conv.bias.data[:] = 0.0
    np.testing.assert_array_equal(group(xin).data, xin.data)

    net = build(micro_config(), seed=0)
    net.head.weight.data[:] = 0.0
    net.head.bias.data[:] = 0.0
    img = T.Tensor(rng.uniform(0, 1, size=(1, 3, 20, 28)).astype(np.float32))
    np.testing.assert_array_equal(net(img).data, img.data)

    _report(label, True, "weight sums, round trips, transform inverse, "
                         "blocking penalty, residual identities")


# ------------------------------------------------- criterion 6: ablations

def test_c6_ablation_structure(tmp_path, rng):
    label = "criterion 6: ablation variants build, train, and count params"
    clean_dir = tmp_path / "clean"
    clean_dir.mkdir()
    write_image(clean_dir / "img.png", _smooth_image(7, 16, 16))
    manifest = manifest_from_dir(clean_dir)

    counts, models = {}, {}
    for use_rhag in (True, False):
        for use_dpm in (True, False):
            cfg = micro_config(use_rhag=use_rhag, use_dpm=use_dpm)
            config = TrainConfig(stage=1, crop=16, batch_size=1, iterations=1,
                                 seed=0, log_every=10 ** 9)
            model, history = train(config, manifest, net_config=cfg)
            assert len(history) == 1 and math.isfinite(history[0]["loss"])
            counts[(use_rhag, use_dpm)] = model.num_params()
            models[(use_rhag, use_dpm)] = model

    distinct = len(set(counts.values())) == 4
    # the prompt-generator swap is exactly the whole-model count difference
    dyn, stat = models[(True, True)], models[(True, False)]
    gen_delta = sum(getattr(dyn, f"prompt{i}").gen.num_params()
                    - getattr(stat, f"prompt{i}").gen.num_params()
                    for i in (1, 2, 3))
    exact = counts[(True, True)] - counts[(True, False)] == gen_delta
    # dynamic 1x1 bases are the lightweight option vs stored prompt stacks
    light = counts[(True, True)] < counts[(True, False)]
    hybrid = counts[(True, True)] != counts[(False, True)]
    _report(label, distinct and exact and light and hybrid,
            f"counts {sorted(counts.values())}, generator delta {gen_delta}")


# ---------------------------------------------- criterion 7: determinism

def test_c7_byte_level_determinism(overfit_run, surrogate_images, tmp_path,
                                   tmp_path_factory):
    label = "criterion 7: reruns are byte-identical (eval + training)"

    # evaluation: two identical runs of the baseline protocol
    live1 = _live1_dir()
    if live1 is not None:
        reports = []
        for name in ("r1.json", "r2.json"):
            path = tmp_path / name
            assert cli_main(["eval", "--identity", "--dataset", str(live1),
                             "--mode", "nonblind", "--qfs", "10,20",
                             "--json", str(path)]) == 0
            reports.append(path.read_bytes())
        eval_ok = reports[0] == reports[1]
        eval_src = "LIVE1"
    else:
        d = tmp_path / "surrogate"
        d.mkdir()
        for i, img in enumerate(surrogate_images):
            write_image(d / f"img{i}.png", img)
        manifest = manifest_from_dir(d)
        texts = [report_to_json(evaluate(None, manifest, mode="nonblind",
                                         qfs=[10, 20])) for _ in range(2)]
        eval_ok = texts[0] == texts[1]
        eval_src = "surrogate set (LIVE1 absent)"

    # training: a second full overfit run from the same seed
    second = _run_overfit(tmp_path_factory.mktemp("overfit_b"))
    train_ok = (second["checkpoint"] == overfit_run["checkpoint"]
                and second["losses"] == overfit_run["losses"]
                and np.array_equal(second["restored"],
                                   overfit_run["restored"]))
    _report(label, eval_ok and train_ok,
            f"eval on {eval_src}; checkpoint {len(second['checkpoint'])} "
            f"bytes identical across runs")


# -------------------------------------- criterion 8: arbitrary resolutions

def test_c8_resolution_generalization(tmp_path, rng):
    label = "criterion 8: restoration preserves arbitrary input shapes"
    ckpt = tmp_path / "model.pcir"
    save_checkpoint(ckpt, build(micro_config(), seed=0),
                    stage={"stage": 1, "step": 0})

    shapes = [(67, 41), (96, 56), (128, 128)]
    for h, w in shapes:
        src = tmp_path / f"in_{h}x{w}.png"
        dst = tmp_path / f"out_{h}x{w}.png"
        write_image(src, rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8))
        assert cli_main(["restore", "--ckpt", str(ckpt), "--in", str(src),
                         "--out", str(dst)]) == 0
        assert read_image(dst).shape == (h, w, 3)

    model = build(micro_config(), seed=1)
    sizes = []
    for _ in range(20):
        h, w = int(rng.integers(16, 129)), int(rng.integers(16, 129))
        x = T.Tensor(rng.uniform(0, 1, size=(1, 3, h, w)).astype(np.float32))
        assert model(x).shape == (1, 3, h, w)
        sizes.append((h, w))
    _report(label, True, f"{shapes} via CLI; 20 random sizes "
                         f"{min(sizes)}..{max(sizes)} direct")

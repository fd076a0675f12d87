"""Command-line interface.

Subcommands: degrade (JPEG-compress images at fixed, random, or all seven
fixed quality levels), train (two-stage harness), restore (run a checkpoint
over images), eval (blind/non-blind metric tables), gradcheck (finite-
difference suite), params (parameter counts). Exit codes: 0 success, 2
usage error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import checks, data, evaluate as ev, train as tr
from .imgio import read_image, write_image
from .jpeg import SUBSAMPLINGS, DegradeSpec, jpeg_degrade
from .network import (NetworkConfig, build, count_params, load_checkpoint,
                      micro_config, reference_config, toy_config)


class UsageError(ValueError):
    """Bad flag combination or malformed argument (exit code 2)."""


PRESET_NETWORKS = {"reference": reference_config, "toy": toy_config,
                   "micro": micro_config}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="promptcir",
        description="Blind JPEG-artifact restoration: degrade, train, "
                    "restore, evaluate.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("degrade", help="JPEG-compress images to PNG")
    p.add_argument("--in", dest="input", required=True,
                   help="image file or directory")
    p.add_argument("--out", dest="output", required=True,
                   help="output file or directory")
    p.add_argument("--qf", type=int, help="fixed quality factor in [1, 100]")
    p.add_argument("--blind", action="store_true",
                   help="random per-image qf from [10, 70]")
    p.add_argument("--precompute", action="store_true",
                   help="write all seven fixed levels q10..q70")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--subsampling", choices=SUBSAMPLINGS, default="420")
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True,
                   help="clean-image directory or manifest.jsonl")
    p.add_argument("--out", dest="output", default="runs/train")
    p.add_argument("--config", help="JSON with train/network sections")
    p.add_argument("--stage", type=int, choices=(1, 2))
    p.add_argument("--preset", choices=("desk", "paper"), default="desk")
    p.add_argument("--init", help="stage-1 checkpoint to fine-tune (stage 2)")
    p.add_argument("--resume", help="same-stage checkpoint to continue")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("restore", help="restore images with a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", dest="output", required=True)
    p.set_defaults(func=cmd_restore)

    p = sub.add_parser("eval", help="metric table over a dataset")
    p.add_argument("--ckpt", help="model checkpoint")
    p.add_argument("--identity", action="store_true",
                   help="score the unrestored inputs (JPEG baseline)")
    p.add_argument("--dataset", required=True,
                   help="directory or manifest.jsonl")
    p.add_argument("--mode", choices=("blind", "nonblind"), default="blind")
    p.add_argument("--qfs", default="10,20,30,40",
                   help="comma-separated qfs for nonblind mode")
    p.add_argument("--json", dest="json_out", help="write the report here")
    p.add_argument("--subsampling", choices=SUBSAMPLINGS, default="420")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--module", action="append",
                   help=f"one of {sorted(checks.CHECKS)} (repeatable)")
    p.add_argument("--seeds", type=int, default=10)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("params", help="parameter counts for a config")
    p.add_argument("--config", help="JSON with a network section")
    p.add_argument("--preset", choices=sorted(PRESET_NETWORKS))
    p.set_defaults(func=cmd_params)
    return parser


def _load_json(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {path}") from exc
    except ValueError as exc:
        raise UsageError(f"{path}: invalid JSON: {exc}") from exc


def _network_config(doc):
    section = doc.get("network", {}) if doc else {}
    try:
        return NetworkConfig(**section)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad network config: {exc}") from exc


def cmd_degrade(args):
    chosen = [bool(args.qf is not None), args.blind, args.precompute]
    if sum(chosen) != 1:
        raise UsageError("pick exactly one of --qf, --blind, --precompute")
    src = Path(args.input)

    if args.blind:
        if not src.is_dir():
            raise UsageError("--blind needs an input directory")
        manifest = data.make_blind_set(src, args.output, seed=args.seed,
                                       subsampling=args.subsampling)
        print(f"wrote {len(manifest)} degraded images and manifest.jsonl "
              f"to {args.output}")
        return 0

    if args.precompute:
        if not src.is_dir():
            raise UsageError("--precompute needs an input directory")
        manifests = data.precompute_levels(src, args.output,
                                           subsampling=args.subsampling)
        n = sum(len(m) for m in manifests.values())
        print(f"wrote {n} degraded images across q"
              f"{','.join(str(q) for q in manifests)} to {args.output}")
        return 0

    try:
        spec = DegradeSpec(args.qf, args.subsampling)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    if src.is_dir():
        out = Path(args.output)
        out.mkdir(parents=True, exist_ok=True)
        records = []
        for p in data.list_images(src):
            write_image(out / f"{p.stem}.png", jpeg_degrade(read_image(p), spec))
            records.append(data.Record(clean=str(p.resolve()),
                                       degraded=f"{p.stem}.png", qf=args.qf))
        manifest = data.DatasetManifest(root=str(out), split=src.name,
                                        records=records)
        data.save_manifest(manifest, out / "manifest.jsonl")
        print(f"wrote {len(records)} images at qf={args.qf} to {out}")
    else:
        img = jpeg_degrade(read_image(src), spec)
        Path(args.output).parent.mkdir(parents=True, exist_ok=True)
        write_image(args.output, img)
        print(f"wrote {args.output} (qf={args.qf})")
    return 0


def _dataset_manifest(path_arg):
    path = Path(path_arg)
    if path.is_dir():
        candidate = path / "manifest.jsonl"
        if candidate.exists():
            return data.load_manifest(candidate)
        return data.manifest_from_dir(path)
    if path.is_file():
        return data.load_manifest(path)
    raise UsageError(f"dataset not found: {path_arg}")


def cmd_train(args):
    doc = _load_json(args.config) if args.config else {}
    stage = args.stage or doc.get("train", {}).get("stage") or 1
    base = {("desk", 1): tr.desk_stage1, ("desk", 2): tr.desk_stage2,
            ("paper", 1): tr.paper_stage1, ("paper", 2): tr.paper_stage2}[
                (args.preset, stage)]
    overrides = dict(doc.get("train", {}))
    overrides["stage"] = stage
    if args.seed is not None:
        overrides["seed"] = args.seed
    try:
        if args.preset == "desk":
            config = base(**overrides)
        else:
            config = dataclasses.replace(base(), **overrides)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad train config: {exc}") from exc

    net_config = _network_config(doc) if doc.get("network") else toy_config()
    manifest = _dataset_manifest(args.data)
    if stage == 2 and not (args.init or args.resume):
        raise UsageError("stage 2 needs --init with a stage-1 checkpoint "
                         "(or --resume)")
    model, history = tr.train(config, manifest, net_config=net_config,
                              out_dir=args.output, init_checkpoint=args.init,
                              resume=args.resume, log=print)
    print(f"finished stage {stage}: {len(history)} steps, "
          f"final loss {history[-1]['loss']:.5f}, "
          f"checkpoint {Path(args.output) / 'model_final.pcir'}")
    return 0


def cmd_restore(args):
    model, _ = load_checkpoint(args.ckpt)
    src = Path(args.input)
    if src.is_dir():
        out = Path(args.output)
        out.mkdir(parents=True, exist_ok=True)
        for p in data.list_images(src):
            restored = ev.restore_image(model, read_image(p))
            write_image(out / f"{p.stem}.png", restored)
            print(f"restored {p.name} -> {out / (p.stem + '.png')}")
    else:
        restored = ev.restore_image(model, read_image(src))
        Path(args.output).parent.mkdir(parents=True, exist_ok=True)
        write_image(args.output, restored)
        print(f"restored {src} -> {args.output}")
    return 0


def cmd_eval(args):
    if bool(args.ckpt) == bool(args.identity):
        raise UsageError("pass exactly one of --ckpt or --identity")
    model = None if args.identity else load_checkpoint(args.ckpt)[0]
    manifest = _dataset_manifest(args.dataset)
    qfs = None
    if args.mode == "nonblind":
        try:
            qfs = [int(q) for q in args.qfs.split(",") if q.strip()]
        except ValueError as exc:
            raise UsageError(f"bad --qfs list {args.qfs!r}") from exc
        if not qfs:
            raise UsageError("nonblind mode needs --qfs")
    if args.mode == "blind" and any(r.degraded is None
                                    for r in manifest.records):
        raise UsageError("blind mode needs a manifest with degraded images "
                         "(run `promptcir degrade --blind` first)")
    start = time.monotonic()
    report = ev.evaluate(model, manifest, mode=args.mode, qfs=qfs,
                         subsampling=args.subsampling)
    print(ev.render_table(report))
    print(f"evaluated {report['n_images']} images in "
          f"{time.monotonic() - start:.1f}s")
    if args.json_out:
        Path(args.json_out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.json_out).write_text(ev.report_to_json(report),
                                       encoding="utf-8")
        print(f"report written to {args.json_out}")
    return 0


def cmd_gradcheck(args):
    try:
        results = checks.run_gradchecks(modules=args.module, seeds=args.seeds,
                                        log=print)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if checks.all_ok(results):
        print(f"all {len(results)} gradient checks passed")
        return 0
    failed = [r for r in results if not r["ok"]]
    print(f"{len(failed)} of {len(results)} gradient checks FAILED")
    return 1


def cmd_params(args):
    if bool(args.config) == bool(args.preset):
        raise UsageError("pass exactly one of --config or --preset")
    if args.preset:
        config = PRESET_NETWORKS[args.preset]()
    else:
        config = _network_config(_load_json(args.config))
    model = build(config)
    total = count_params(model)
    print(f"config: {config}")
    by_child = {}
    for name, p in model.named_parameters():
        child = name.split(".", 1)[0]
        by_child[child] = by_child.get(child, 0) + p.data.size
    width = max(len(k) for k in by_child)
    for child, n in by_child.items():
        print(f"  {child:<{width}}  {n:>12,}")
    print(f"total parameters: {total:,}")
    return 0


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if not exc.code else 2
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

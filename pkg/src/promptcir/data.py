"""Dataset manifests, blind-set generation, and training patch sampling.

A manifest is a JSON-lines file: one header line carrying the split tag,
then one record per image with the clean path, the degraded path (if that
image has been compressed to disk), and the quality factor used. Paths are
stored relative to the manifest's directory so a dataset folder can move.

Training samples are produced by cropping a clean image, augmenting, and
compressing the crop on the fly at a stage-dependent quality factor. Stage 1
draws from the seven fixed levels {10..70 step 10}; stage 2 and blind test
sets draw uniform integers from [10, 70].
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imgio import read_image, write_image
from .jpeg import DegradeSpec, jpeg_degrade

FIXED_QUALITIES = (10, 20, 30, 40, 50, 60, 70)
BLIND_QF_LOW, BLIND_QF_HIGH = 10, 70
IMAGE_EXTENSIONS = (".png", ".ppm", ".bmp")


@dataclass
class Record:
    clean: str
    degraded: str = None
    qf: int = None

    def __post_init__(self):
        if self.degraded is not None and self.qf is None:
            raise ValueError(f"{self.clean}: degraded image without its qf")


@dataclass
class DatasetManifest:
    root: str
    split: str
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def clean_path(self, rec: Record) -> Path:
        return Path(self.root) / rec.clean

    def degraded_path(self, rec: Record) -> Path:
        if rec.degraded is None:
            raise ValueError(f"{rec.clean}: no degraded image on disk")
        return Path(self.root) / rec.degraded

    def validate(self):
        """Check every referenced file exists and decodes."""
        for rec in self.records:
            read_image(self.clean_path(rec))
            if rec.degraded is not None:
                read_image(self.degraded_path(rec))
        return self


def list_images(directory):
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"not a directory: {directory}")
    paths = sorted(p for p in d.iterdir()
                   if p.suffix.lower() in IMAGE_EXTENSIONS)
    if not paths:
        raise FileNotFoundError(f"no images ({'/'.join(IMAGE_EXTENSIONS)}) "
                                f"in {directory}")
    return paths


def manifest_from_dir(clean_dir, split=None):
    """In-memory manifest of the clean images in a directory."""
    paths = list_images(clean_dir)
    split = split or Path(clean_dir).name
    records = [Record(clean=p.name) for p in paths]
    return DatasetManifest(root=str(clean_dir), split=split, records=records)


def save_manifest(manifest: DatasetManifest, path):
    path = Path(path)
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps({"split": manifest.split}) + "\n")
        for rec in manifest.records:
            f.write(json.dumps({"clean": rec.clean, "degraded": rec.degraded,
                                "qf": rec.qf}) + "\n")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    with open(path, "r", encoding="utf-8") as f:
        lines = [ln for ln in f.read().splitlines() if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: empty manifest")
    header = json.loads(lines[0])
    records = [Record(**json.loads(ln)) for ln in lines[1:]]
    return DatasetManifest(root=str(path.parent), split=header.get("split"),
                           records=records)


def make_blind_set(clean_dir, out_dir, seed, subsampling="420", split=None):
    """Compress each clean image at a random qf from [10, 70]; write a manifest.

    The qf assignment depends only on the seed and the sorted file names, so
    the same inputs always produce the same manifest and the same bytes.
    """
    paths = list_images(clean_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    split = split or Path(clean_dir).name

    records = []
    for p in paths:
        qf = int(rng.integers(BLIND_QF_LOW, BLIND_QF_HIGH + 1))
        img = read_image(p)
        degraded = jpeg_degrade(img, DegradeSpec(qf, subsampling))
        name = f"{p.stem}_q{qf:02d}.png"
        write_image(out / name, degraded)
        records.append(Record(clean=os.path.relpath(p, out), degraded=name,
                              qf=qf))
    manifest = DatasetManifest(root=str(out), split=split, records=records)
    save_manifest(manifest, out / "manifest.jsonl")
    return manifest


def precompute_levels(clean_dir, out_dir, qualities=FIXED_QUALITIES,
                      subsampling="420"):
    """Write every clean image at each fixed quality level (stage-1 reuse)."""
    paths = list_images(clean_dir)
    manifests = {}
    for qf in qualities:
        sub = Path(out_dir) / f"q{qf:02d}"
        sub.mkdir(parents=True, exist_ok=True)
        records = []
        for p in paths:
            img = read_image(p)
            degraded = jpeg_degrade(img, DegradeSpec(qf, subsampling))
            write_image(sub / p.name, degraded)
            records.append(Record(clean=os.path.relpath(p, sub),
                                  degraded=p.name, qf=qf))
        manifest = DatasetManifest(root=str(sub), split=f"q{qf:02d}",
                                   records=records)
        save_manifest(manifest, sub / "manifest.jsonl")
        manifests[qf] = manifest
    return manifests


def random_crop(img, size, rng):
    h, w = img.shape[:2]
    if h < size or w < size:
        raise ValueError(f"image {h}x{w} smaller than crop {size}")
    i = int(rng.integers(0, h - size + 1))
    j = int(rng.integers(0, w - size + 1))
    return img[i:i + size, j:j + size]


def apply_augment(img, rng, hflip=True, vflip=True, rot90=True):
    if hflip and rng.integers(0, 2):
        img = img[:, ::-1]
    if vflip and rng.integers(0, 2):
        img = img[::-1]
    if rot90:
        img = np.rot90(img, k=int(rng.integers(0, 4)))
    return np.ascontiguousarray(img)


def sample_qf(stage, rng):
    if stage == 1:
        return int(rng.choice(FIXED_QUALITIES))
    return int(rng.integers(BLIND_QF_LOW, BLIND_QF_HIGH + 1))


class PatchSampler:
    """Deterministic stream of (degraded, clean) training patches.

    Crops are taken from clean images, augmented, then JPEG-compressed on
    the fly at a stage-dependent quality factor. All randomness flows from
    the rng handed in, so a fixed seed fixes the whole stream.
    """

    def __init__(self, manifest: DatasetManifest, crop, rng, stage=2,
                 subsampling="420", hflip=True, vflip=True, rot90=True,
                 fixed_qf=None):
        if not manifest.records:
            raise ValueError("empty manifest")
        self.manifest = manifest
        self.crop = crop
        self.rng = rng
        self.stage = stage
        self.subsampling = subsampling
        self.augment = dict(hflip=hflip, vflip=vflip, rot90=rot90)
        self.fixed_qf = fixed_qf
        self._cache = {}

    def _clean(self, idx):
        rec = self.manifest.records[idx]
        if idx not in self._cache:
            if len(self._cache) >= 16:
                self._cache.pop(next(iter(self._cache)))
            self._cache[idx] = read_image(self.manifest.clean_path(rec))
        return self._cache[idx]

    def sample(self):
        idx = int(self.rng.integers(0, len(self.manifest.records)))
        clean = random_crop(self._clean(idx), self.crop, self.rng)
        clean = apply_augment(clean, self.rng, **self.augment)
        qf = self.fixed_qf if self.fixed_qf is not None else sample_qf(
            self.stage, self.rng)
        degraded = jpeg_degrade(clean, DegradeSpec(qf, self.subsampling))
        return degraded, clean, qf

    def batch(self, n):
        """n patches as float32 [n,3,c,c] pairs (degraded, clean) plus qfs."""
        pairs = [self.sample() for _ in range(n)]
        deg = np.stack([p[0] for p in pairs]).transpose(0, 3, 1, 2)
        cln = np.stack([p[1] for p in pairs]).transpose(0, 3, 1, 2)
        scale = np.float32(1.0 / 255.0)
        return (deg.astype(np.float32) * scale, cln.astype(np.float32) * scale,
                [p[2] for p in pairs])

"""Grayscale image datasets: manifest loading, a synthetic angle-deviation
generator, and the fixed train/test class partitions."""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .seeding import CALIB, DATA, derive_rng

MANIFEST_FIELDS = ["path", "class_name", "class_id", "angle_id", "split"]

# Ten target classes in their conventional order; position i of a synthetic
# dataset plays the role of MSTAR_CLASSES[i].
MSTAR_CLASSES = ("T62", "BTR60", "ZSU234", "BMP2", "ZIL131", "T72", "BTR70", "2S1", "BRDM2", "D7")
TEST_CLASSES = {
    3: ("BTR60", "BRDM2", "T72"),
    5: ("BTR60", "BRDM2", "T72", "2S1", "D7"),
}


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (M, S, S) float64 in [0, 1]
    class_ids: np.ndarray
    angle_ids: np.ndarray
    class_names: List[str]
    splits: np.ndarray = None
    paths: List[str] = field(default_factory=list)

    def __post_init__(self):
        if self.splits is None:
            self.splits = np.array(["train"] * len(self.class_ids))
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64)
        self.angle_ids = np.asarray(self.angle_ids, dtype=np.int64)

    def __len__(self):
        return len(self.class_ids)

    @property
    def side(self) -> int:
        return self.images.shape[1]

    @property
    def classes(self) -> np.ndarray:
        return np.unique(self.class_ids)

    def subset(self, mask) -> "Dataset":
        idx = np.flatnonzero(mask)
        return Dataset(
            images=self.images[idx],
            class_ids=self.class_ids[idx],
            angle_ids=self.angle_ids[idx],
            class_names=self.class_names,
            splits=self.splits[idx],
            paths=[self.paths[i] for i in idx] if self.paths else [],
        )

    def split(self, name: str) -> "Dataset":
        return self.subset(self.splits == name)

    def with_classes(self, class_ids: Sequence[int]) -> "Dataset":
        return self.subset(np.isin(self.class_ids, list(class_ids)))


# ------------------------------------------------------------------ manifests


def write_pgm(path, pixels: np.ndarray):
    Image.fromarray(np.asarray(pixels, dtype=np.uint8), mode="L").save(path, format="PPM")


def read_pgm(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.format != "PPM" or im.mode != "L":
            raise DatasetError(f"{path}: expected 8-bit grayscale PGM, got {im.format}/{im.mode}")
        return np.asarray(im, dtype=np.uint8)


def load_dataset(manifest_path) -> Dataset:
    """Read a manifest CSV and decode every image to [0, 1] floats."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    with open(manifest_path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or list(reader.fieldnames) != MANIFEST_FIELDS:
            raise DatasetError(f"{manifest_path}: header must be {','.join(MANIFEST_FIELDS)}")
        rows = list(reader)
    if not rows:
        raise DatasetError(f"{manifest_path}: no records")
    images, cids, aids, splits, paths = [], [], [], [], []
    names = {}
    side = None
    for lineno, row in enumerate(rows, start=2):
        try:
            cid = int(row["class_id"])
            aid = int(row["angle_id"])
        except (TypeError, ValueError):
            raise DatasetError(f"{manifest_path}:{lineno}: malformed class_id/angle_id") from None
        if row["split"] not in ("train", "test"):
            raise DatasetError(f"{manifest_path}:{lineno}: split must be train or test, got {row['split']!r}")
        if names.setdefault(cid, row["class_name"]) != row["class_name"]:
            raise DatasetError(f"{manifest_path}:{lineno}: class_id {cid} has two names")
        path = root / row["path"]
        if not path.is_file():
            raise DatasetError(f"{manifest_path}:{lineno}: missing image {row['path']}")
        try:
            pix = read_pgm(path)
        except DatasetError:
            raise
        except Exception as exc:
            raise DatasetError(f"{manifest_path}:{lineno}: cannot decode {row['path']}: {exc}") from None
        if pix.shape[0] != pix.shape[1] or (side is not None and pix.shape[0] != side):
            raise DatasetError(f"{manifest_path}:{lineno}: image {row['path']} is {pix.shape}, expected square side {side}")
        side = pix.shape[0]
        images.append(pix)
        cids.append(cid)
        aids.append(aid)
        splits.append(row["split"])
        paths.append(row["path"])
    if sorted(names) != list(range(len(names))):
        raise DatasetError(f"{manifest_path}: class ids must be dense 0..{len(names) - 1}, got {sorted(names)}")
    splits = np.array(splits)
    cids = np.array(cids)
    overlap = set(cids[splits == "train"]) & set(cids[splits == "test"])
    if overlap:
        raise DatasetError(f"{manifest_path}: classes {sorted(overlap)} appear in both train and test")
    return Dataset(
        images=np.stack(images).astype(np.float64) / 255.0,
        class_ids=cids,
        angle_ids=np.array(aids),
        class_names=[names[i] for i in range(len(names))],
        splits=splits,
        paths=paths,
    )


def write_manifest(path, records: Sequence[Tuple[str, str, int, int, str]]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        w.writerows(records)


# ----------------------------------------------------------------- splitting


def test_class_ids(class_names: Sequence[str], n_way: int) -> List[int]:
    """Test-class ids for a task size; by name if the classes carry target names,
    otherwise by position in the conventional ten-class order."""
    if n_way not in TEST_CLASSES:
        raise DatasetError(f"no fixed class split for {n_way}-way (use 3 or 5)")
    wanted = TEST_CLASSES[n_way]
    if all(w in class_names for w in wanted):
        return sorted(list(class_names).index(w) for w in wanted)
    positions = sorted(MSTAR_CLASSES.index(w) for w in wanted)
    if max(positions) < len(class_names):
        return positions
    return list(range(len(class_names) - len(wanted), len(class_names)))


def hybrid_split(dataset: Dataset, n_way: int) -> Tuple[Dataset, Dataset]:
    """Fixed class partition (3-way: 3 test classes, 5-way: 5) with every angle kept in both."""
    n_classes = len(dataset.class_names)
    need = 8 if n_way == 3 else 10
    if n_classes < need:
        raise DatasetError(f"{n_way}-way split needs >= {need} classes, dataset has {n_classes}")
    test = test_class_ids(dataset.class_names, n_way)
    is_test = np.isin(dataset.class_ids, test)
    return dataset.subset(~is_test), dataset.subset(is_test)


# ------------------------------------------------------------------ synthesis


@dataclass
class SynthSpec:
    n_classes: int = 10
    samples_per_angle: int = 40
    side: int = 32
    angles: Tuple[int, ...] = (0, 1)
    deviation: float = 2.0
    noise: float = 0.25
    blobs: int = 6
    position_jitter: float = 0.6
    seed: int = 0
    split_n_way: int = 3

    def validate(self):
        if self.deviation < 0:
            raise DatasetError("deviation must be >= 0")
        if self.side < 8:
            raise DatasetError("side must be >= 8")
        if self.n_classes < 1 or self.samples_per_angle < 1 or not self.angles:
            raise DatasetError("need at least one class, sample and angle")
        return self


# Direction of the shared per-angle shift (unit vector, rows then columns).
SHIFT_DIRECTION = (math.sin(math.radians(30.0)), math.cos(math.radians(30.0)))
GRADIENT_GAIN = 0.15
BACKGROUND = 0.08


@dataclass
class ClassTemplate:
    centers: np.ndarray  # (G, 2) in pixels
    widths: np.ndarray  # (G,)
    amplitudes: np.ndarray  # (G,)


def class_templates(spec: SynthSpec) -> List[ClassTemplate]:
    out = []
    s = spec.side
    for c in range(spec.n_classes):
        rng = derive_rng(spec.seed, DATA, 0, c)
        base_width = rng.uniform(0.8, 2.2) * s / 32.0
        out.append(
            ClassTemplate(
                centers=rng.uniform(0.22 * s, 0.78 * s, size=(spec.blobs, 2)),
                widths=base_width * rng.uniform(0.7, 1.3, size=spec.blobs),
                amplitudes=rng.uniform(0.45, 1.0, size=spec.blobs),
            )
        )
    return out


def angle_offset(angle_index: int, deviation: float) -> np.ndarray:
    return angle_index * deviation * np.asarray(SHIFT_DIRECTION)


def render(template: ClassTemplate, angle_index: int, spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """One noisy sample in [0, 1] before quantization."""
    s = spec.side
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    centers = template.centers + angle_offset(angle_index, spec.deviation)
    centers = centers + rng.normal(0.0, spec.position_jitter, size=centers.shape)
    img = np.full((s, s), BACKGROUND)
    for (cy, cx), w, a in zip(centers, template.widths, template.amplitudes):
        img += a * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * w * w))
    # shared intensity ramp along the shift direction, zero at angle 0
    ramp = ((yy - s / 2) * SHIFT_DIRECTION[0] + (xx - s / 2) * SHIFT_DIRECTION[1]) / s
    img *= 1.0 + GRADIENT_GAIN * angle_index * spec.deviation * ramp
    if spec.noise > 0:
        shape = 1.0 / (spec.noise ** 2)
        img *= rng.gamma(shape, 1.0 / shape, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def quantize(img: np.ndarray) -> np.ndarray:
    return np.round(img * 255.0).astype(np.uint8)


def synth_arrays(spec: SynthSpec):
    """Generate quantized images in memory: (uint8 images, class ids, angle ids)."""
    spec.validate()
    templates = class_templates(spec)
    images, cids, aids = [], [], []
    for c, tpl in enumerate(templates):
        for ai, angle in enumerate(spec.angles):
            rng = derive_rng(spec.seed, DATA, 1, c, ai)
            for _ in range(spec.samples_per_angle):
                images.append(quantize(render(tpl, ai, spec, rng)))
                cids.append(c)
                aids.append(angle)
    return np.stack(images), np.array(cids), np.array(aids)


def synth_class_names(n_classes: int) -> List[str]:
    return [MSTAR_CLASSES[i] if i < len(MSTAR_CLASSES) else f"C{i}" for i in range(n_classes)]


def synth_dataset(spec: SynthSpec) -> Dataset:
    """In-memory equivalent of synth_generate followed by load_dataset."""
    pix, cids, aids = synth_arrays(spec)
    names = synth_class_names(spec.n_classes)
    splits = _splits_for(names, cids, spec.split_n_way)
    return Dataset(pix.astype(np.float64) / 255.0, cids, aids, names, splits)


def _splits_for(names, cids, n_way) -> np.ndarray:
    try:
        test = test_class_ids(names, n_way)
    except DatasetError:
        test = []
    return np.where(np.isin(cids, test), "test", "train")


def synth_generate(spec: SynthSpec, out_dir) -> Path:
    """Write PGM images plus ``manifest.csv`` into ``out_dir``; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    pix, cids, aids = synth_arrays(spec)
    names = synth_class_names(spec.n_classes)
    splits = _splits_for(names, cids, spec.split_n_way)
    records = []
    counters = {}
    for img, c, a, sp in zip(pix, cids, aids, splits):
        k = counters.get((c, a), 0)
        counters[(c, a)] = k + 1
        rel = f"images/c{c:02d}_a{a}_{k:04d}.pgm"
        write_pgm(out_dir / rel, img)
        records.append((rel, names[c], int(c), int(a), sp))
    manifest = out_dir / "manifest.csv"
    write_manifest(manifest, records)
    return manifest


# ------------------------------------------------------ raw-pixel oracle


def nearest_mean_accuracy(dataset: Dataset, n_way: int = 3, k_shot: int = 5, episodes: int = 300,
                          seed: int = 0, cross_angle: bool = True) -> float:
    """Accuracy of a nearest-class-mean classifier on raw pixels.

    With ``cross_angle`` the support set comes from one angle and the query
    from a different one, which is where angle deviation hurts most.
    """
    rng = derive_rng(seed, CALIB)
    classes = dataset.classes
    angles = np.unique(dataset.angle_ids)
    flat = dataset.images.reshape(len(dataset), -1)
    correct = 0
    for _ in range(episodes):
        chosen = rng.choice(classes, size=n_way, replace=False)
        target = rng.integers(n_way)
        if cross_angle and len(angles) > 1:
            a_sup, a_query = rng.choice(angles, size=2, replace=False)
        else:
            a_sup = a_query = None
        protos = []
        query = None
        for i, c in enumerate(chosen):
            pool = np.flatnonzero((dataset.class_ids == c) & ((dataset.angle_ids == a_sup) if a_sup is not None else True))
            pick = rng.choice(pool, size=k_shot, replace=False)
            protos.append(flat[pick].mean(axis=0))
            if i == target:
                qpool = np.flatnonzero((dataset.class_ids == c) & ((dataset.angle_ids == a_query) if a_query is not None else True))
                qpool = np.setdiff1d(qpool, pick)
                query = flat[rng.choice(qpool)]
        d = ((np.stack(protos) - query) ** 2).sum(axis=1)
        correct += int(np.argmin(d) == target)
    return correct / episodes


def calibrate_deviation(spec: SynthSpec, target: float = 0.75, n_way: int = 3, k_shot: int = 5,
                        episodes: int = 300, hi: float = 8.0, tol: float = 0.05) -> Tuple[float, float]:
    """Smallest deviation (to ``tol``) whose cross-angle oracle accuracy on the
    test classes is <= ``target``. Returns (deviation, oracle accuracy)."""
    def score(delta):
        ds = synth_dataset(dataclasses.replace(spec, deviation=delta))
        _, test = hybrid_split(ds, n_way)
        return nearest_mean_accuracy(test, n_way, k_shot, episodes, seed=spec.seed)

    lo_acc = score(0.0)
    if lo_acc <= target:
        return 0.0, lo_acc
    hi_acc = score(hi)
    if hi_acc > target:
        raise DatasetError(f"deviation {hi} still leaves the oracle at {hi_acc:.3f} > {target}")
    lo = 0.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        acc = score(mid)
        if acc <= target:
            hi, hi_acc = mid, acc
        else:
            lo = mid
    return hi, hi_acc

"""Dataset manifests, patient-level fold splits, image loading and synthetic data."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .augment import resize_bilinear
from .errors import DataError
from .stain import REFERENCE_HE, OpticalDensity, od_to_rgb

log = logging.getLogger(__name__)

LABELS = ("benign", "malignant")
MAGNIFICATIONS = ("40X", "100X", "200X", "400X", "NA")
MANIFEST_HEADER = ("path", "label", "patient_id", "magnification", "fold")


@dataclass(frozen=True)
class ManifestRow:
    path: str
    label: int  # 0 benign, 1 malignant
    patient_id: str
    magnification: str
    fold: int | None = None

    @property
    def label_name(self) -> str:
        return LABELS[self.label]


@dataclass
class DatasetManifest:
    rows: list[ManifestRow]
    root: Path

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.rows], dtype=int)

    @property
    def patient_ids(self) -> list[str]:
        return [r.patient_id for r in self.rows]

    def resolve(self, row: ManifestRow) -> Path:
        p = Path(row.path)
        return p if p.is_absolute() else self.root / p

    def subset(self, indices) -> "DatasetManifest":
        return DatasetManifest([self.rows[i] for i in indices], self.root)

    def filter_magnification(self, magnification: str | None) -> "DatasetManifest":
        if not magnification or magnification.lower() == "all":
            return self
        return DatasetManifest([r for r in self.rows if r.magnification == magnification], self.root)


def parse_label(text: str) -> int:
    key = text.strip().lower()
    if key in LABELS:
        return LABELS.index(key)
    if key in ("0", "1"):
        return int(key)
    raise ValueError(f"bad label {text!r}")


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    """Read and validate ``path,label,patient_id,magnification,fold`` rows."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest {path} not found")
    root = path.parent
    rows: list[ManifestRow] = []
    seen: dict[str, int] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = tuple(h.strip() for h in (reader.fieldnames or ()))
        if header[:4] != MANIFEST_HEADER[:4] or (len(header) > 4 and header[4] != "fold"):
            raise DataError(f"{path}: header must be {','.join(MANIFEST_HEADER)}")
        for lineno, rec in enumerate(reader, start=2):
            where = f"{path}: row {lineno}"
            item = (rec.get("path") or "").strip()
            if not item:
                raise DataError(f"{where}: empty path")
            if item in seen:
                raise DataError(f"{where}: duplicate path {item!r} (first at row {seen[item]})")
            seen[item] = lineno
            try:
                label = parse_label(rec.get("label") or "")
            except ValueError as exc:
                raise DataError(f"{where}: {exc}") from None
            patient = (rec.get("patient_id") or "").strip()
            if not patient:
                raise DataError(f"{where}: empty patient_id")
            mag = (rec.get("magnification") or "NA").strip().upper() or "NA"
            if mag not in MAGNIFICATIONS:
                raise DataError(f"{where}: bad magnification {mag!r}")
            fold_text = (rec.get("fold") or "").strip()
            fold = None
            if fold_text:
                if not fold_text.isdigit() or not 0 <= int(fold_text) <= 4:
                    raise DataError(f"{where}: fold must be in 0..4")
                fold = int(fold_text)
            row = ManifestRow(item, label, patient, mag, fold)
            if check_files and not (root / item if not Path(item).is_absolute() else Path(item)).is_file():
                raise DataError(f"{where}: image {item!r} does not exist")
            rows.append(row)
    if not rows:
        raise DataError("manifest has no rows")
    return DatasetManifest(rows, root)


def write_manifest(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_HEADER)
        for r in rows:
            w.writerow([r.path, LABELS[r.label], r.patient_id, r.magnification, "" if r.fold is None else r.fold])


@dataclass
class FoldSplit:
    fold: int
    train: list[int]
    val: list[int]
    test: list[int]


def _largest_remainder(total: int, ratios) -> list[int]:
    quotas = np.asarray(ratios, dtype=float) / float(np.sum(ratios)) * total
    counts = np.floor(quotas).astype(int)
    order = np.argsort(-(quotas - counts), kind="stable")
    for k in order[: total - counts.sum()]:
        counts[k] += 1
    return counts.tolist()


def split_folds(
    manifest: DatasetManifest, n_folds: int = 5, ratios=(0.6, 0.2, 0.2), seed: int = 0
) -> list[FoldSplit]:
    """Independent seeded patient-level resamplings into train/val/test.

    No patient appears in more than one part of a fold. Patient counts per part
    follow the ratios by largest-remainder rounding (within one patient).
    """
    patients = sorted(set(manifest.patient_ids))
    if len(patients) < n_folds:
        raise DataError(f"need at least {n_folds} patients, found {len(patients)}")
    by_patient: dict[str, list[int]] = {}
    for idx, row in enumerate(manifest.rows):
        by_patient.setdefault(row.patient_id, []).append(idx)
    n_train, n_val, _ = _largest_remainder(len(patients), ratios)
    splits = []
    for fold in range(n_folds):
        rng = np.random.default_rng([seed, fold])
        order = [patients[i] for i in rng.permutation(len(patients))]
        parts = (order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :])
        idx = [sorted(i for p in part for i in by_patient[p]) for part in parts]
        splits.append(FoldSplit(fold, *idx))
    return splits


@dataclass
class ImageSet:
    images: np.ndarray  # (M, S, S, 3) float64 in [0, 255]
    labels: np.ndarray
    patient_ids: list[str]
    item_ids: list[str]

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices) -> "ImageSet":
        indices = list(indices)
        return ImageSet(
            self.images[indices],
            self.labels[indices],
            [self.patient_ids[i] for i in indices],
            [self.item_ids[i] for i in indices],
        )


def read_png(path, size: int | None = None) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from None
    if size is not None and arr.shape[:2] != (size, size):
        arr = np.clip(resize_bilinear(arr, size, size), 0, 255)
    return arr


def write_png(path, image: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(image, dtype=np.float64)), 0, 255).astype(np.uint8)
    if arr.ndim == 2:
        Image.fromarray(arr, mode="L").save(path)
    else:
        Image.fromarray(arr, mode="RGB").save(path)


def load_images(manifest: DatasetManifest, size: int) -> ImageSet:
    images = np.stack([read_png(manifest.resolve(r), size) for r in manifest.rows])
    return ImageSet(images, manifest.labels, manifest.patient_ids, [r.path for r in manifest.rows])


def _stamp_ellipse(conc, cy, cx, ry, rx, angle, value):
    size = conc.shape[0]
    yy, xx = np.mgrid[0:size, 0:size]
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(angle), np.sin(angle)
    u = (c * dx + s * dy) / rx
    v = (-s * dx + c * dy) / ry
    r2 = u * u + v * v
    conc += value * np.exp(-2.0 * r2**2)


def render_synthetic(label: int, size: int, rng: np.random.Generator, stain_w: np.ndarray) -> np.ndarray:
    """Render one H&E-like tile.

    Benign tiles hold a few large pale round nuclei on a thick eosin stroma;
    malignant tiles hold many small dark elongated nuclei on thinner stroma.
    """
    hema = np.zeros((size, size))
    scale = size / 32.0
    if label == 0:
        count = rng.integers(3, 6)
        radii = rng.uniform(3.0, 4.5, count) * scale
        aspect = rng.uniform(0.85, 1.0, count)
        strength = rng.uniform(0.7, 1.0, count)
        eosin_base = rng.uniform(0.55, 0.75)
    else:
        count = rng.integers(12, 19)
        radii = rng.uniform(1.4, 2.4, count) * scale
        aspect = rng.uniform(0.4, 0.7, count)
        strength = rng.uniform(1.2, 1.7, count)
        eosin_base = rng.uniform(0.3, 0.45)
    for k in range(count):
        cy, cx = rng.uniform(0, size, 2)
        _stamp_ellipse(hema, cy, cx, radii[k] * aspect[k], radii[k], rng.uniform(0, np.pi), strength[k])
    # Smooth eosin texture: coarse noise upsampled.
    coarse = rng.uniform(-0.15, 0.15, (5, 5, 1))
    eosin = eosin_base + resize_bilinear(coarse, size, size)[..., 0]
    conc = np.stack([np.clip(hema, 0, 2.5).ravel(), np.clip(eosin, 0, None).ravel()])
    od = stain_w @ conc + rng.normal(0.0, 0.02, (3, size * size))
    return od_to_rgb(OpticalDensity(np.clip(od, 0, None), size, size))


def generate_synthetic_dataset(n_per_class: int, image_size: int = 32, seed: int = 0):
    """Two-class H&E-like tiles; every 4 consecutive tiles of a class share a patient.

    Each patient gets its own slightly perturbed stain basis so stain
    estimation and HED augmentation see realistic variation. Returns
    ``(images uint8 array, rows)`` where rows are ``ManifestRow`` records with
    relative paths ``<label>/img_<k>.png``.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    images, rows = [], []
    for label in (0, 1):
        stain_w = None
        for k in range(n_per_class):
            if k % 4 == 0:
                stain_w = np.abs(REFERENCE_HE + rng.normal(0.0, 0.04, (3, 2)))
                stain_w /= np.linalg.norm(stain_w, axis=0)
            img = render_synthetic(label, image_size, rng, stain_w)
            images.append(np.clip(np.rint(img), 0, 255).astype(np.uint8))
            rows.append(
                ManifestRow(f"{LABELS[label]}/img_{k:05d}.png", label, f"{LABELS[label][0]}{k // 4:04d}", "NA")
            )
    return np.stack(images), rows


def write_synthetic_dataset(out_dir, n_per_class: int, image_size: int = 32, seed: int = 0) -> Path:
    out = Path(out_dir)
    images, rows = generate_synthetic_dataset(n_per_class, image_size, seed)
    for name in LABELS:
        (out / name).mkdir(parents=True, exist_ok=True)
    for img, row in zip(images, rows):
        write_png(out / row.path, img)
    manifest_path = out / "manifest.csv"
    write_manifest(manifest_path, rows)
    return manifest_path

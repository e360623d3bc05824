"""Dataset ingestion, the synthetic two-class corpus, and augmentations.

The synthetic task is built so that class identity lives in *where* extra
brightness appears (an upper two-square band for class 1, a lower central
band for class 0) while total added brightness is identical by construction.
A mean-brightness probe therefore stays near chance and the classes are only
separable through spatial structure.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .imageio import read_image, write_ppm

SPLITS = ("train", "val", "test")


class DatasetError(Exception):
    pass


class MissingSplitError(DatasetError):
    pass


class EmptyClassError(DatasetError):
    pass


class PixelRangeError(DatasetError):
    """An image fed to the augmentation pipeline left [0, 1]."""


@dataclass
class DatasetIndex:
    """Lexicographically ordered (path, label) items per split."""

    root: str
    class_names: list[str]
    items: dict[str, list[tuple[str, int]]] = field(default_factory=dict)

    def counts(self) -> dict[str, int]:
        return {s: len(self.items.get(s, [])) for s in SPLITS}


def load_dataset(root, manifest=None) -> DatasetIndex:
    """Index a `train/ val/ test/` tree with one class subdirectory each.

    Labels follow the sorted order of class subdirectory names. A JSON
    manifest (path or dict) with {"class_names": [...], "splits": {split:
    [[relpath, label], ...]}} overrides directory inference entirely.
    """
    root = str(root)
    if manifest is not None:
        if not isinstance(manifest, dict):
            with open(manifest, "r", encoding="utf-8") as f:
                manifest = json.load(f)
        class_names = list(manifest["class_names"])
        items = {}
        for split in SPLITS:
            if split not in manifest["splits"]:
                raise MissingSplitError(f"manifest lacks split '{split}'")
            items[split] = [(os.path.join(root, rel), int(label))
                            for rel, label in manifest["splits"][split]]
        return DatasetIndex(root=root, class_names=class_names, items=items)

    class_names: list[str] | None = None
    items = {}
    for split in SPLITS:
        split_dir = os.path.join(root, split)
        if not os.path.isdir(split_dir):
            raise MissingSplitError(f"dataset root '{root}' lacks split '{split}'")
        classes = sorted(d for d in os.listdir(split_dir)
                         if os.path.isdir(os.path.join(split_dir, d)))
        if class_names is None:
            class_names = classes
        elif classes != class_names:
            raise DatasetError(f"split '{split}' classes {classes} differ from "
                               f"{class_names}")
        rows = []
        for label, cname in enumerate(classes):
            cdir = os.path.join(split_dir, cname)
            files = sorted(f for f in os.listdir(cdir)
                           if f.lower().endswith((".ppm", ".png")))
            if not files:
                raise EmptyClassError(f"class '{cname}' in split '{split}' has no images")
            rows.extend((os.path.join(cdir, f), label) for f in files)
        items[split] = rows
    return DatasetIndex(root=root, class_names=class_names or [], items=items)


def load_split_arrays(index: DatasetIndex, split: str) -> tuple[np.ndarray, np.ndarray]:
    """Materialize one split as (images (n, H, W, 3), labels (n,))."""
    rows = index.items[split]
    images = [read_image(path) for path, _ in rows]
    labels = np.array([label for _, label in rows], dtype=np.int64)
    return np.stack(images), labels


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------


def band_masks(image_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Boolean masks for the class-1 "eye" squares and the class-0 "mouth"
    band. Pixel counts are equalized exactly so mean brightness carries no
    label signal."""
    h = image_size
    eye = np.zeros((h, h), dtype=bool)
    r0, r1 = round(0.25 * h), round(0.45 * h)
    side = r1 - r0
    lc, rc = round(0.28 * h), round(0.72 * h)
    eye[r0:r1, lc:lc + side] = True
    eye[r0:r1, rc - side:rc] = True

    mouth = np.zeros((h, h), dtype=bool)
    m0, m1 = round(0.65 * h), round(0.80 * h)
    rows = m1 - m0
    area = int(eye.sum())
    width = area // rows
    extra = area - width * rows
    c0 = (h - width) // 2
    mouth[m0:m1, c0:c0 + width] = True
    if extra:
        mouth[m0:m0 + extra, c0 + width] = True
    assert int(mouth.sum()) == area
    return eye, mouth


def synth_image(image_size: int, label: int, rng: np.random.Generator) -> np.ndarray:
    base = rng.uniform(0.3, 0.7, size=(image_size, image_size, 3))
    eye, mouth = band_masks(image_size)
    mask = eye if label == 1 else mouth
    base[mask] = np.clip(base[mask] + 0.25, 0.0, 1.0)
    return base


def gen_synthetic(root, n_per_split, image_size: int, seed: int) -> DatasetIndex:
    """Write a two-class PPM corpus under root/{split}/{class}/.

    ``n_per_split`` maps split name to total count (classes split evenly).
    Same seed, same corpus, bit for bit.
    """
    if isinstance(n_per_split, (tuple, list)):
        n_per_split = dict(zip(SPLITS, n_per_split))
    root = str(root)
    class_dirs = ("class0", "class1")
    for si, split in enumerate(SPLITS):
        total = int(n_per_split[split])
        for label, cname in enumerate(class_dirs):
            cdir = os.path.join(root, split, cname)
            os.makedirs(cdir, exist_ok=True)
            count = total // 2 + (1 if label == 0 and total % 2 else 0)
            for k in range(count):
                rng = np.random.default_rng(
                    np.random.SeedSequence((seed, si, label, k)))
                img = synth_image(image_size, label, rng)
                write_ppm(os.path.join(cdir, f"img_{k:05d}.ppm"), img)
    return load_dataset(root)


# ---------------------------------------------------------------------------
# augmentations
# ---------------------------------------------------------------------------


@dataclass
class AugmentConfig:
    enabled: bool = True
    grayscale_p: float = 0.33
    solarize_p: float = 0.33
    solarize_threshold: float = 0.5
    blur_p: float = 0.33
    blur_sigma_min: float = 0.1
    blur_sigma_max: float = 2.0
    mix_p: float = 0.5            # chance of any pair op; then a fair coin
    mixup_alpha: float = 1.0
    cutmix_alpha: float = 1.0

    def violations(self) -> list[str]:
        bad = []
        for name in ("grayscale_p", "solarize_p", "blur_p", "mix_p"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                bad.append(f"augment.{name}={v} outside [0, 1]")
        if not 0.0 <= self.solarize_threshold <= 1.0:
            bad.append(f"augment.solarize_threshold={self.solarize_threshold} outside [0, 1]")
        if not 0.0 < self.blur_sigma_min <= self.blur_sigma_max:
            bad.append(f"augment.blur_sigma range [{self.blur_sigma_min}, "
                       f"{self.blur_sigma_max}] invalid")
        if self.mixup_alpha <= 0 or self.cutmix_alpha <= 0:
            bad.append("augment mixup_alpha/cutmix_alpha must be positive")
        return bad


GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])


def grayscale(image: np.ndarray) -> np.ndarray:
    lum = image @ GRAY_WEIGHTS
    return np.repeat(lum[:, :, None], 3, axis=2)


def solarize(image: np.ndarray, threshold: float) -> np.ndarray:
    return np.where(image >= threshold, 1.0 - image, image)


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, kernel truncated at two sigma, edges clamped."""
    radius = max(1, int(np.ceil(2.0 * sigma)))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (xs / sigma) ** 2)
    kernel /= kernel.sum()
    padded = np.pad(image, ((radius, radius), (0, 0), (0, 0)), mode="edge")
    rows = sum(kernel[i] * padded[i:i + image.shape[0]] for i in range(len(kernel)))
    padded = np.pad(rows, ((0, 0), (radius, radius), (0, 0)), mode="edge")
    return sum(kernel[i] * padded[:, i:i + image.shape[1]] for i in range(len(kernel)))


def _check_range(image: np.ndarray) -> None:
    lo, hi = float(image.min()), float(image.max())
    if lo < 0.0 or hi > 1.0:
        raise PixelRangeError(f"pixel values [{lo}, {hi}] outside [0, 1]")


def augment_photometric(image: np.ndarray, cfg: AugmentConfig,
                        rng: np.random.Generator) -> np.ndarray:
    """Grayscale, solarization and Gaussian blur, each fired independently."""
    _check_range(image)
    out = image
    if rng.random() < cfg.grayscale_p:
        out = grayscale(out)
    if rng.random() < cfg.solarize_p:
        out = solarize(out, cfg.solarize_threshold)
    if rng.random() < cfg.blur_p:
        sigma = rng.uniform(cfg.blur_sigma_min, cfg.blur_sigma_max)
        out = gaussian_blur(out, sigma)
    return np.clip(out, 0.0, 1.0)


def mixup(x1, y1, x2, y2, lam: float):
    return lam * x1 + (1.0 - lam) * x2, lam * y1 + (1.0 - lam) * y2


def cutmix(x1, y1, x2, y2, lam: float, rng: np.random.Generator):
    """Paste a random partner box; the label weight is the surviving area
    fraction of the first image."""
    h, w = x1.shape[:2]
    cut = np.sqrt(1.0 - lam)
    bh, bw = int(np.round(h * cut)), int(np.round(w * cut))
    cy, cx = int(rng.integers(h)), int(rng.integers(w))
    y0, y1b = np.clip([cy - bh // 2, cy - bh // 2 + bh], 0, h)
    x0, x1b = np.clip([cx - bw // 2, cx - bw // 2 + bw], 0, w)
    out = x1.copy()
    out[y0:y1b, x0:x1b] = x2[y0:y1b, x0:x1b]
    weight = 1.0 - ((y1b - y0) * (x1b - x0)) / (h * w)
    return out, weight * y1 + (1.0 - weight) * y2


def augment(image: np.ndarray, label_dist: np.ndarray, partner: np.ndarray,
            partner_dist: np.ndarray, cfg: AugmentConfig,
            rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Full per-sample pipeline: photometric ops on the image, then at most
    one of MixUp or CutMix against the (already photometric) partner."""
    out = augment_photometric(image, cfg, rng)
    y = np.asarray(label_dist, dtype=np.float64)
    if rng.random() < cfg.mix_p:
        if rng.random() < 0.5:
            lam = rng.beta(cfg.mixup_alpha, cfg.mixup_alpha)
            out, y = mixup(out, y, partner, partner_dist, lam)
        else:
            lam = rng.beta(cfg.cutmix_alpha, cfg.cutmix_alpha)
            out, y = cutmix(out, y, partner, partner_dist, lam, rng)
    return out, y


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), num_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Deterministic per-(seed, epoch, item) stream for the pipeline."""
    return np.random.default_rng(np.random.SeedSequence((seed, epoch, index)))


def normalize(images: np.ndarray) -> np.ndarray:
    """Model-input normalization: [0, 1] pixels to mean 0.5 / std 0.5."""
    return (images - 0.5) / 0.5

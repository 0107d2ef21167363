"""Datasets: one-folder-per-class image trees and synthetic oriented gratings."""

from __future__ import annotations

import csv
import warnings
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ConfigError, ProtocolError


IMAGE_SUFFIXES = (".bmp", ".png", ".jpg", ".jpeg")
TRAIN, TEST = "train", "test"


@dataclass
class DatasetManifest:
    """Images plus bookkeeping.

    ``images`` is (N, 1, H, W) float32 in [0, 1]; ``labels`` index into
    ``classes``; ``sources`` holds a path or a synthetic tag per sample;
    ``split`` is "train"/"test" per sample, or empty before splitting.
    """

    classes: list
    labels: np.ndarray
    images: np.ndarray
    sources: list
    image_size: tuple
    split: list = field(default_factory=list)
    skipped: list = field(default_factory=list)

    def __len__(self):
        return len(self.labels)

    @property
    def num_classes(self):
        return len(self.classes)

    def samples(self, class_index):
        return [i for i, lab in enumerate(self.labels) if lab == class_index]

    def subset(self, part):
        if not self.split:
            raise ProtocolError("dataset has not been split yet")
        idx = np.array([i for i, s in enumerate(self.split) if s == part], dtype=np.int64)
        return self.images[idx], self.labels[idx]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["class", "path", "split"])
            for i, src in enumerate(self.sources):
                writer.writerow([self.classes[self.labels[i]], src, self.split[i] if self.split else ""])


def normalize_image(img):
    """Per-image min-max scaling to [0, 1]; a constant image becomes zeros."""
    img = np.asarray(img, dtype=np.float64)
    lo, hi = img.min(), img.max()
    if hi <= lo:
        return np.zeros_like(img, dtype=np.float32)
    return ((img - lo) / (hi - lo)).astype(np.float32)


def read_image(path, target_size):
    h, w = target_size
    with Image.open(path) as im:
        gray = im.convert("L").resize((w, h), Image.Resampling.BILINEAR)
        return normalize_image(np.asarray(gray))


def load_image_dataset(root_dir, target_size=(64, 64)):
    """Load ``root/<class_id>/<sample>.{bmp,png,jpg}``.

    Classes and files are taken in lexicographic order. Unreadable files are
    skipped with a warning and listed in ``manifest.skipped``.
    """
    root = Path(root_dir)
    if not root.is_dir():
        raise ConfigError(f"data directory {root} does not exist")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if len(class_dirs) < 2:
        raise ConfigError(f"{root} must contain at least 2 class folders, found {len(class_dirs)}")
    classes, labels, images, sources, skipped = [], [], [], [], []
    for cdir in class_dirs:
        files = sorted(p for p in cdir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        loaded = []
        for f in files:
            try:
                loaded.append((f, read_image(f, target_size)))
            except (OSError, UnidentifiedImageError, ValueError) as exc:
                warnings.warn(f"skipping unreadable image {f}: {exc}")
                skipped.append(str(f))
        if len(loaded) < 2:
            raise ConfigError(f"class {cdir.name!r} has {len(loaded)} readable samples, need at least 2")
        label = len(classes)
        classes.append(cdir.name)
        for f, img in loaded:
            labels.append(label)
            images.append(img)
            sources.append(str(f))
    return DatasetManifest(classes, np.array(labels, dtype=np.int64),
                           np.stack(images)[:, None].astype(np.float32), sources,
                           tuple(target_size), skipped=skipped)


def split_dataset(manifest: DatasetManifest, per_class_train: int, seed: int) -> DatasetManifest:
    """Pick ``per_class_train`` samples per class uniformly for training."""
    rng = np.random.default_rng(seed)
    split = [TEST] * len(manifest)
    for c in range(manifest.num_classes):
        members = manifest.samples(c)
        if per_class_train >= len(members) or per_class_train < 1:
            raise ConfigError(f"class {manifest.classes[c]!r} has {len(members)} samples; "
                              f"cannot hold out {per_class_train} for training")
        for j in rng.choice(len(members), size=per_class_train, replace=False):
            split[members[j]] = TRAIN
    return replace(manifest, split=split)


def grating_wavelength(c, n_classes, short=4.0, long=8.0):
    if n_classes == 1:
        return short
    return short + (long - short) * c / (n_classes - 1)


def synth_textures(n_classes, samples_per_class, size=64, seed=0, noise=0.05,
                   rotation_jitter_deg=3.0, shift_jitter=2.0, phase_jitter=True):
    """Sinusoidal gratings, one orientation and wavelength per class.

    Class ``c`` is oriented at ``c * pi / n_classes`` with a wavelength
    spread linearly over 4..8 px. Each sample gets a random phase, a small
    rotation and shift, and Gaussian noise, then is clipped to [0, 1].
    """
    if n_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {n_classes}")
    h, w = (size, size) if np.isscalar(size) else tuple(size)
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.arange(h) - (h - 1) / 2, np.arange(w) - (w - 1) / 2, indexing="ij")
    images, labels, sources = [], [], []
    for c in range(n_classes):
        base = c * np.pi / n_classes
        lam = grating_wavelength(c, n_classes)
        for s in range(samples_per_class):
            theta = base + np.deg2rad(rng.uniform(-rotation_jitter_deg, rotation_jitter_deg))
            dx, dy = rng.uniform(-shift_jitter, shift_jitter, size=2)
            phase = rng.uniform(0, 2 * np.pi) if phase_jitter else 0.0
            xr = (xx - dx) * np.cos(theta) + (yy - dy) * np.sin(theta)
            img = 0.5 + 0.4 * np.cos(2 * np.pi * xr / lam + phase)
            if noise > 0:
                img = img + rng.normal(0.0, noise, size=img.shape)
            images.append(np.clip(img, 0.0, 1.0))
            labels.append(c)
            sources.append(f"synthetic:{c}:{s}")
    return DatasetManifest([f"class{c:02d}" for c in range(n_classes)], np.array(labels, dtype=np.int64),
                           np.stack(images)[:, None].astype(np.float32), sources, (h, w))


def save_image_tree(manifest: DatasetManifest, root_dir):
    """Write images as 8-bit PNGs in the one-folder-per-class layout."""
    root = Path(root_dir)
    counts = Counter()
    for i in range(len(manifest)):
        cdir = root / manifest.classes[manifest.labels[i]]
        cdir.mkdir(parents=True, exist_ok=True)
        idx = counts[cdir.name]
        counts[cdir.name] += 1
        pixels = np.round(manifest.images[i, 0] * 255).astype(np.uint8)
        Image.fromarray(pixels).save(cdir / f"{idx:03d}.png")
    return root

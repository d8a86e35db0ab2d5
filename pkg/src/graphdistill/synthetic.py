"""Synthetic Voronoi instance dataset: generation and on-disk layout.

Every pixel belongs to exactly one instance (nearest seed point, ties to the
lower seed index), so there is no background handling anywhere downstream.
Images are per-instance random gray levels plus clipped uniform noise. A
dataset directory holds train/ and test/ subdirectories with img_%04d.grdt
and lbl_%04d.grdt tensor files plus a spec.txt provenance file.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields

import numpy as np

from .tensors import (
    DomainError,
    LabelMask,
    deserialize_tensor,
    load_label_mask,
    save_label_mask,
    serialize_tensor,
)

_SPLIT_CODES = {"train": 0, "test": 1}


@dataclass
class SyntheticSpec:
    size: int = 32
    instances: int = 6
    train_count: int = 64
    test_count: int = 16
    noise: float = 0.06
    seed: int = 0

    def __post_init__(self):
        if self.instances < 2:
            raise DomainError("need at least 2 instances per image")
        if self.train_count < 1 or self.test_count < 1:
            raise DomainError("dataset split sizes must be >= 1")
        if self.size * self.size < self.instances:
            raise DomainError("grid too small for the instance count")
        if self.noise < 0:
            raise DomainError("noise amplitude must be >= 0")


def voronoi_labels(points, height: int, width: int) -> np.ndarray:
    """Label each pixel by its nearest seed point (squared Euclidean).

    Ties go to the lower point index; labels are 1-based.
    """
    rows = np.arange(height)[:, None]
    cols = np.arange(width)[None, :]
    dist2 = np.stack(
        [(rows - r) ** 2 + (cols - c) ** 2 for r, c in points]
    )
    return np.argmin(dist2, axis=0).astype(np.uint32) + 1


def _sample(spec: SyntheticSpec, split: str, index: int):
    for attempt in range(16):
        entropy = (spec.seed, _SPLIT_CODES[split], index, attempt)
        rng = np.random.default_rng(np.random.SeedSequence(entropy))
        flat = rng.choice(spec.size * spec.size, size=spec.instances, replace=False)
        points = [(int(p) // spec.size, int(p) % spec.size) for p in flat]
        labels = voronoi_labels(points, spec.size, spec.size)
        if len(np.unique(labels)) != spec.instances:
            continue  # unreachable with distinct seeds, kept as a guard
        # Random per-instance gray levels: a permutation of evenly spaced
        # levels plus jitter, so no two instances in one image collide.
        grays = rng.permutation(np.linspace(0.1, 0.9, spec.instances))
        grays = grays + rng.uniform(-0.04, 0.04, size=spec.instances)
        image = grays[labels - 1]
        image = image + rng.uniform(-spec.noise, spec.noise, size=image.shape)
        image = np.clip(image, 0.0, 1.0)
        return image[None, :, :], LabelMask(labels)
    raise DomainError("failed to generate a sample with all instances non-empty")


def generate_dataset(spec: SyntheticSpec, split: str = "train") -> list:
    """Deterministic list of (1 x H x W image, LabelMask) for one split."""
    if split not in _SPLIT_CODES:
        raise DomainError(f"unknown split {split!r}")
    count = spec.train_count if split == "train" else spec.test_count
    return [_sample(spec, split, i) for i in range(count)]


def save_dataset(directory, spec: SyntheticSpec) -> None:
    """Write both splits and a spec.txt provenance file."""
    for split in _SPLIT_CODES:
        split_dir = os.path.join(directory, split)
        os.makedirs(split_dir, exist_ok=True)
        for i, (image, mask) in enumerate(generate_dataset(spec, split)):
            serialize_tensor(
                os.path.join(split_dir, f"img_{i:04d}.grdt"),
                image.astype(np.float32),
            )
            save_label_mask(os.path.join(split_dir, f"lbl_{i:04d}.grdt"), mask)
    with open(os.path.join(directory, "spec.txt"), "w") as f:
        for spec_field in fields(spec):
            f.write(f"{spec_field.name}: {getattr(spec, spec_field.name)}\n")


def load_dataset(directory, split: str) -> list:
    """Read one split back as a list of (image, LabelMask)."""
    split_dir = os.path.join(directory, split)
    if not os.path.isdir(split_dir):
        raise FileNotFoundError(f"no {split!r} split under {directory}")
    samples = []
    for i in range(len([n for n in os.listdir(split_dir) if n.startswith("img_")])):
        image = deserialize_tensor(os.path.join(split_dir, f"img_{i:04d}.grdt"))
        mask = load_label_mask(os.path.join(split_dir, f"lbl_{i:04d}.grdt"))
        samples.append((image.astype(np.float64), mask))
    return samples

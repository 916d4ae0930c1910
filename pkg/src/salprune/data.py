"""Dataset ingestion: the CIFAR-10 binary format, a synthetic
localized-feature benchmark with saliency ground truth, and deterministic
splits.

Images are stored as float32 (N, C, H, W) tensors normalized by the train
split's per-channel mean/std; both constants are recorded on the dataset.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from salprune.rng import derive_seed, make_rng

CIFAR_RECORD_BYTES = 1 + 32 * 32 * 3  # label byte + channel-planar pixels


class DataError(RuntimeError):
    """Missing or corrupt dataset files."""


@dataclass
class Dataset:
    """In-memory dataset with tagged splits.

    ``splits`` maps train/val/test to disjoint index tensors; ``prune_ids``
    is the designated pruning subset, drawn from within the train split.
    Synthetic datasets carry per-sample patch boxes (top, left, height,
    width) as the saliency oracle.
    """

    kind: str
    images: torch.Tensor
    labels: torch.Tensor
    num_classes: int
    mean: torch.Tensor
    std: torch.Tensor
    splits: dict[str, torch.Tensor]
    prune_ids: torch.Tensor
    seed: int
    patch_boxes: torch.Tensor | None = None
    patterns: torch.Tensor | None = None
    fingerprint: str = field(default="")

    def __post_init__(self):
        if self.fingerprint == "":
            h = hashlib.sha256()
            h.update(self.kind.encode())
            h.update(str(self.seed).encode())
            h.update(np.ascontiguousarray(self.labels.numpy()).tobytes())
            h.update(np.ascontiguousarray(self.mean.numpy()).tobytes())
            h.update(np.ascontiguousarray(self.std.numpy()).tobytes())
            self.fingerprint = h.hexdigest()[:16]

    def split_tensors(self, split: str) -> tuple[torch.Tensor, torch.Tensor]:
        if split == "prune":
            ids = self.prune_ids
        else:
            ids = self.splits[split]
        return self.images[ids], self.labels[ids]

    @property
    def image_hw(self) -> tuple[int, int]:
        return self.images.shape[-2], self.images.shape[-1]


def split_indices(n: int, ratios, seed: int) -> list[torch.Tensor]:
    """Deterministic disjoint partition of range(n) by the given ratios."""
    ratios = tuple(float(r) for r in ratios)
    if abs(sum(ratios) - 1.0) > 1e-9 or any(r < 0 for r in ratios):
        raise ValueError(f"ratios must be non-negative and sum to 1, got {ratios}")
    order = torch.randperm(n, generator=make_rng(seed))
    parts, start = [], 0
    for i, r in enumerate(ratios):
        count = n - start if i == len(ratios) - 1 else int(round(r * n))
        parts.append(order[start:start + count].sort().values)
        start += count
    return parts


def _finalize_splits(n_official_train: int, n_test: int, seed: int,
                     prune_fraction: float = 0.05) -> tuple[dict, torch.Tensor]:
    """0.9/0.1 train/val over the official training ids, official test ids
    as test, plus a prune subset (prune_fraction of the official training
    set) drawn from inside the train split."""
    train_ids, val_ids = split_indices(n_official_train, (0.9, 0.1),
                                       derive_seed(seed, "trainval"))
    n_prune = int(round(prune_fraction * n_official_train))
    pick = torch.randperm(len(train_ids), generator=make_rng(derive_seed(seed, "prune")))
    prune_ids = train_ids[pick[:n_prune]].sort().values
    test_ids = torch.arange(n_official_train, n_official_train + n_test)
    return {"train": train_ids, "val": val_ids, "test": test_ids}, prune_ids


def _normalize(images: torch.Tensor, train_ids: torch.Tensor):
    mean = images[train_ids].mean(dim=(0, 2, 3))
    std = images[train_ids].std(dim=(0, 2, 3)).clamp_min(1e-6)
    images = (images - mean.view(1, -1, 1, 1)) / std.view(1, -1, 1, 1)
    return images, mean, std


def load_cifar10(root: str | Path, seed: int = 0) -> Dataset:
    """Parse the public CIFAR-10 binary batches under ``root``.

    Each record is 3073 bytes: 1 label byte then 3072 pixel bytes,
    row-major and channel-planar (all red, all green, all blue).
    """
    root = Path(root)
    base = root / "cifar-10-batches-bin" if (root / "cifar-10-batches-bin").is_dir() else root
    train_files = [base / f"data_batch_{i}.bin" for i in range(1, 6)]
    test_file = base / "test_batch.bin"
    for f in [*train_files, test_file]:
        if not f.exists():
            raise DataError(f"CIFAR-10 batch file missing: {f}")

    def parse(path: Path) -> tuple[np.ndarray, np.ndarray]:
        raw = np.fromfile(path, dtype=np.uint8)
        if raw.size % CIFAR_RECORD_BYTES != 0:
            raise DataError(
                f"{path} has {raw.size} bytes, not a multiple of {CIFAR_RECORD_BYTES}"
            )
        recs = raw.reshape(-1, CIFAR_RECORD_BYTES)
        labels = recs[:, 0].astype(np.int64)
        if labels.max(initial=0) > 9:
            raise DataError(f"{path} contains label bytes > 9; corrupt file?")
        pixels = recs[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
        return pixels, labels

    train_parts = [parse(f) for f in train_files]
    test_part = parse(test_file)
    images = torch.from_numpy(np.concatenate([p[0] for p in train_parts] + [test_part[0]]))
    labels = torch.from_numpy(np.concatenate([p[1] for p in train_parts] + [test_part[1]]))
    n_train = sum(len(p[1]) for p in train_parts)
    splits, prune_ids = _finalize_splits(n_train, len(test_part[1]), seed)
    images, mean, std = _normalize(images, splits["train"])
    return Dataset(kind="cifar10", images=images, labels=labels, num_classes=10,
                   mean=mean, std=std, splits=splits, prune_ids=prune_ids, seed=seed)


def make_synthetic(
    n: int,
    num_classes: int = 10,
    image_hw: tuple[int, int] = (32, 32),
    patch_hw: tuple[int, int] = (8, 8),
    seed: int = 0,
    noise_std: float = 0.35,
    test_fraction: float = 1.0 / 6.0,
) -> Dataset:
    """Localized-feature benchmark: background noise plus one
    class-determining patch at a uniformly random location per image.

    The patch bounding box of every sample is recorded as metadata; it is
    the saliency oracle for selector evaluation.
    """
    h, w = image_hw
    ph, pw = patch_hw
    if ph > h or pw > w:
        raise ValueError("patch must fit inside the image")
    rng = make_rng(derive_seed(seed, "synthetic"))
    # Fixed per-class patterns; sign patterns are mutually near-orthogonal.
    patterns = torch.where(torch.rand(num_classes, 3, ph, pw, generator=rng) < 0.5,
                           -1.0, 1.0)
    images = noise_std * torch.randn(n, 3, h, w, generator=rng)
    labels = torch.randint(0, num_classes, (n,), generator=rng)
    tops = torch.randint(0, h - ph + 1, (n,), generator=rng)
    lefts = torch.randint(0, w - pw + 1, (n,), generator=rng)
    for i in range(n):
        z, t = int(tops[i]), int(lefts[i])
        images[i, :, z:z + ph, t:t + pw] = patterns[labels[i]]
    boxes = torch.stack([tops, lefts, torch.full((n,), ph), torch.full((n,), pw)], dim=1)

    n_test = int(round(test_fraction * n))
    n_official = n - n_test
    splits, prune_ids = _finalize_splits(n_official, n_test, seed)
    images, mean, std = _normalize(images, splits["train"])
    return Dataset(kind="synthetic", images=images, labels=labels,
                   num_classes=num_classes, mean=mean, std=std, splits=splits,
                   prune_ids=prune_ids, seed=seed, patch_boxes=boxes,
                   patterns=patterns)


def patch_oracle_predict(ds: Dataset, ids: torch.Tensor) -> torch.Tensor:
    """Classify from the recorded patch pixels alone by nearest pattern
    (denormalized correlation); 100% on any synthetic dataset."""
    if ds.patch_boxes is None or ds.patterns is None:
        raise ValueError("patch oracle requires a synthetic dataset")
    preds = torch.empty(len(ids), dtype=torch.long)
    flat_patterns = ds.patterns.reshape(ds.patterns.shape[0], -1)
    for j, i in enumerate(ids.tolist()):
        z, t, ph, pw = ds.patch_boxes[i].tolist()
        patch = ds.images[i, :, z:z + ph, t:t + pw]
        patch = patch * ds.std.view(-1, 1, 1) + ds.mean.view(-1, 1, 1)
        preds[j] = (flat_patterns @ patch.reshape(-1)).argmax()
    return preds


def center_in_box(c_z: float, c_t: float, box) -> bool:
    """Whether a predicted center lies inside a (top, left, h, w) patch box."""
    z, t, ph, pw = (float(v) for v in box)
    return z <= c_z <= z + ph and t <= c_t <= t + pw

"""IQA manifests, score normalization, image preprocessing and split protocol."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch.utils.data import Dataset

IMAGE_SIZE = 512


class ManifestError(ValueError):
    """A manifest row could not be turned into a record."""

    def __init__(self, message: str, row: Optional[int] = None):
        self.row = row
        if row is not None:
            message = f"line {row}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class ImageRecord:
    image_ref: str
    mos_raw: float
    mos_norm: float
    dataset_id: str
    mos_std: Optional[float] = None


@dataclass(frozen=True)
class SplitPlan:
    seed: int
    train_refs: tuple[int, ...]
    test_refs: tuple[int, ...]
    repeat_index: int

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "repeat_index": self.repeat_index,
            "train": list(self.train_refs),
            "test": list(self.test_refs),
        }


def normalize_scores(raw: Sequence[float], scale_min: float, scale_max: float) -> list[float]:
    """Min-max map raw scores from ``[scale_min, scale_max]`` onto ``[0, 1]``.

    A zero-width scale maps every score to 0.5.
    """
    if scale_min > scale_max:
        raise ValueError(f"scale_min {scale_min} exceeds scale_max {scale_max}")
    for i, value in enumerate(raw):
        if not (scale_min <= value <= scale_max):
            raise ValueError(f"score at index {i} ({value}) lies outside [{scale_min}, {scale_max}]")
    if scale_min == scale_max:
        return [0.5 for _ in raw]
    span = scale_max - scale_min
    return [(value - scale_min) / span for value in raw]


def read_sidecar(path: Path) -> dict[str, str]:
    meta: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ManifestError(f"sidecar {path}: expected key=value", lineno)
        key, value = line.split("=", 1)
        meta[key.strip()] = value.strip()
    return meta


def sidecar_path(manifest: Path) -> Path:
    return manifest.with_suffix(".meta")


def load_manifest(path: str | Path) -> list[ImageRecord]:
    """Read a CSV manifest (columns ``image_path``, ``mos``, optional ``mos_std``).

    Image paths are resolved relative to the manifest's directory. An optional
    ``<manifest>.meta`` sidecar may declare ``dataset_id``, ``scale_min`` and
    ``scale_max``; without a declared scale the observed MOS range is used.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    meta = read_sidecar(sidecar_path(path)) if sidecar_path(path).is_file() else {}
    dataset_id = meta.get("dataset_id", path.stem)

    rows: list[tuple[str, float, Optional[float]]] = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ManifestError(f"{path}: missing header row")
        missing = {"image_path", "mos"} - set(reader.fieldnames)
        if missing:
            raise ManifestError(f"{path}: missing column(s) {sorted(missing)}", 1)
        for lineno, row in enumerate(reader, start=2):
            try:
                mos = float(row["mos"])
            except (TypeError, ValueError):
                raise ManifestError(f"non-numeric mos {row['mos']!r}", lineno) from None
            if not math.isfinite(mos):
                raise ManifestError(f"non-finite mos {row['mos']!r}", lineno)
            ref = (row.get("image_path") or "").strip()
            image_path = Path(ref)
            if not image_path.is_absolute():
                image_path = path.parent / image_path
            if not ref or not image_path.is_file():
                raise ManifestError(f"image not found: {ref!r}", lineno)
            std = row.get("mos_std")
            rows.append((str(image_path), mos, float(std) if std not in (None, "") else None))

    if not rows:
        raise ManifestError(f"{path}: manifest is empty")
    raw = [mos for _, mos, _ in rows]
    scale_min = float(meta["scale_min"]) if "scale_min" in meta else min(raw)
    scale_max = float(meta["scale_max"]) if "scale_max" in meta else max(raw)
    norm = normalize_scores(raw, scale_min, scale_max)
    return [
        ImageRecord(image_ref=ref, mos_raw=mos, mos_norm=n, dataset_id=dataset_id, mos_std=std)
        for (ref, mos, std), n in zip(rows, norm)
    ]


def preprocess_image(image, size: int = IMAGE_SIZE) -> torch.Tensor:
    """Resize an RGB image to ``size x size`` and map [0, 255] onto [-1, 1].

    Accepts a PIL image or an ``(H, W, C)`` array of 0-255 values. Returns a
    float32 tensor laid out as ``(3, size, size)``.
    """
    if isinstance(image, Image.Image):
        if image.width == 0 or image.height == 0:
            raise ValueError("image has no pixels")
        if image.mode != "RGB":
            image = image.convert("RGB")
        arr = np.asarray(image, dtype=np.float32)
    else:
        arr = np.asarray(image, dtype=np.float32)
        if arr.ndim == 2:
            arr = arr[..., None]
        if arr.ndim != 3 or arr.shape[0] == 0 or arr.shape[1] == 0:
            raise ValueError(f"image has no pixels or a bad shape: {arr.shape}")
        if arr.shape[2] == 1:
            arr = np.repeat(arr, 3, axis=2)
        elif arr.shape[2] == 4:
            arr = arr[..., :3]
        elif arr.shape[2] != 3:
            raise ValueError(f"unsupported channel count {arr.shape[2]}")

    x = torch.from_numpy(np.ascontiguousarray(arr)).permute(2, 0, 1).unsqueeze(0)
    if x.shape[-2:] != (size, size):
        x = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False, antialias=True)
    x = x / 127.5 - 1.0
    return x.clamp_(-1.0, 1.0).squeeze(0).contiguous()


def load_image(path: str | Path, size: int = IMAGE_SIZE) -> torch.Tensor:
    with Image.open(path) as im:
        return preprocess_image(im, size)


def make_splits(n_records: int, seeds: Sequence[int]) -> list[SplitPlan]:
    """One seeded shuffle plus 80/20 partition per seed; ``floor(0.8 n)`` go to train."""
    if n_records < 5:
        raise ValueError(f"need at least 5 records for the split protocol, got {n_records}")
    if not seeds:
        raise ValueError("at least one split seed is required")
    n_train = (4 * n_records) // 5
    plans = []
    for i, seed in enumerate(seeds):
        perm = np.random.default_rng(int(seed)).permutation(n_records)
        plans.append(
            SplitPlan(
                seed=int(seed),
                train_refs=tuple(sorted(int(j) for j in perm[:n_train])),
                test_refs=tuple(sorted(int(j) for j in perm[n_train:])),
                repeat_index=i,
            )
        )
    return plans


class IQADataset(Dataset):
    """Records paired with their preprocessed pixels and normalized scores."""

    def __init__(self, records: Sequence[ImageRecord], size: int = IMAGE_SIZE, cache: bool = True):
        self.records = list(records)
        self.size = size
        self.cache = cache
        self._pixels: dict[int, torch.Tensor] = {}

    def __len__(self):
        return len(self.records)

    def pixels(self, idx: int) -> torch.Tensor:
        if idx in self._pixels:
            return self._pixels[idx]
        x = load_image(self.records[idx].image_ref, self.size)
        if self.cache:
            self._pixels[idx] = x
        return x

    def __getitem__(self, idx):
        return self.pixels(idx), torch.tensor(self.records[idx].mos_norm, dtype=torch.float32)


class TensorIQADataset(Dataset):
    """In-memory images and scores, used for synthetic sets and tests."""

    def __init__(self, images: torch.Tensor, scores: Sequence[float]):
        if len(images) != len(scores):
            raise ValueError("images and scores differ in length")
        self.images = images
        self.scores = torch.as_tensor(scores, dtype=torch.float32)

    def __len__(self):
        return len(self.images)

    def __getitem__(self, idx):
        return self.images[idx], self.scores[idx]


def subset(dataset: Dataset, indices: Sequence[int]) -> torch.utils.data.Subset:
    return torch.utils.data.Subset(dataset, list(indices))


def synthetic_quality_set(n: int, size: int = IMAGE_SIZE, seed: int = 0) -> TensorIQADataset:
    """Smooth random scenes degraded by noise; quality falls as noise rises.

    Scores are distinct and evenly spaced in [0, 1].
    """
    gen = torch.Generator().manual_seed(seed)
    base = torch.rand(n, 3, 8, 8, generator=gen) * 2 - 1
    images = F.interpolate(base, size=(size, size), mode="bicubic", align_corners=False)
    scores = torch.linspace(0.0, 1.0, n)
    perm = torch.randperm(n, generator=gen)
    scores = scores[perm]
    noise = torch.randn(n, 3, size, size, generator=gen)
    images = images * (0.4 + 0.6 * scores.view(-1, 1, 1, 1)) + noise * (1 - scores).view(-1, 1, 1, 1) * 0.8
    return TensorIQADataset(images.clamp(-1, 1), scores.tolist())

"""Normalization of converted rasters into model-ready tensors."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .ingest import IMAGE_SIZE, Manifest, validate_manifest

TENSOR_SHAPE = (IMAGE_SIZE, IMAGE_SIZE, 3)


class PreprocessError(Exception):
    pass


@dataclass(frozen=True)
class ImageTensor:
    """A 224x224x3 float grid with every value in [0, 1]."""

    data: np.ndarray
    source: str = ""


@dataclass
class Dataset:
    """Stacked normalized inputs with aligned age targets and record ids."""

    inputs: np.ndarray   # (N, 224, 224, 3) float32 in [0, 1]
    targets: np.ndarray  # (N,) float64 ages in years
    ids: list[str]

    def __len__(self) -> int:
        return len(self.targets)

    def subset(self, indices: np.ndarray) -> "Dataset":
        indices = np.asarray(indices)
        return Dataset(inputs=self.inputs[indices],
                       targets=self.targets[indices],
                       ids=[self.ids[i] for i in indices])


def normalize(raw: np.ndarray, source: str = "") -> ImageTensor:
    """Map an 8-bit 224x224x3 grid to [0, 1] by dividing by 255."""
    raw = np.asarray(raw)
    if raw.shape != TENSOR_SHAPE:
        raise PreprocessError(f"expected shape {TENSOR_SHAPE}, got {raw.shape}")
    if raw.dtype != np.uint8:
        if not np.issubdtype(raw.dtype, np.integer):
            raise PreprocessError(f"expected 8-bit integer input, got dtype {raw.dtype}")
        if raw.min() < 0 or raw.max() > 255:
            raise PreprocessError("integer input has values outside [0, 255]")
    data = raw.astype(np.float32) / np.float32(255.0)
    return ImageTensor(data=data, source=source)


def denormalize(data: np.ndarray) -> np.ndarray:
    """Inverse of normalize on the 8-bit grid: round(x * 255)."""
    return np.rint(np.asarray(data, dtype=np.float64) * 255.0).astype(np.uint8)


def load_converted(path: str | Path) -> np.ndarray:
    """Load a converted PNG and check the 224x224x3 8-bit contract."""
    with Image.open(path) as img:
        arr = np.asarray(img)
    if arr.shape != TENSOR_SHAPE or arr.dtype != np.uint8:
        raise PreprocessError(
            f"{path}: converted file must be 224x224x3 8-bit, got shape "
            f"{arr.shape} dtype {arr.dtype}")
    return arr


def assemble_dataset(manifest: Manifest) -> Dataset:
    """Load and normalize every converted record, in manifest order."""
    validate_manifest(manifest)
    inputs = np.empty((len(manifest.records),) + TENSOR_SHAPE, dtype=np.float32)
    targets = np.empty(len(manifest.records), dtype=np.float64)
    ids = []
    for i, record in enumerate(manifest.records):
        if not record.converted_path:
            raise PreprocessError(f"record {record.source_path} has no converted file")
        path = Path(record.converted_path)
        if not path.is_file():
            raise PreprocessError(
                f"converted file missing for {record.source_path}: {path}")
        inputs[i] = normalize(load_converted(path), source=str(path)).data
        targets[i] = record.age_years
        ids.append(record.converted_path)
    return Dataset(inputs=inputs, targets=targets, ids=ids)

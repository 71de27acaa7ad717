"""Source discovery, label joining, and conversion to 224x224x3 PNG.

The scan step walks a source tree for MINC/DICOM/PNG files, joins each one
to its label-table row, and emits a manifest sorted by source path.  The
convert step renders every record (every selected slice, for volumes) as an
8-bit RGB PNG of size 224x224, min-max rescaled to [0, 255] per image.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace, asdict
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .dicom import read_dicom
from .minc import read_minc

log = logging.getLogger(__name__)

IMAGE_SIZE = 224

FORMAT_PNG = "png"
FORMAT_DICOM = "dicom"
FORMAT_MINC = "minc"
_FORMAT_BY_EXT = {".png": FORMAT_PNG, ".dcm": FORMAT_DICOM, ".mnc": FORMAT_MINC}

SLICE_MODES = ("middle", "every_k", "all")
SLICE_AXES = ("axial", "coronal", "sagittal")
_AXIS_INDEX = {"axial": 0, "coronal": 1, "sagittal": 2}

AGE_HARD_RANGE = (0.0, 130.0)
AGE_EXPECTED_RANGE = (18.0, 80.0)

_PNG_MAGIC = b"\x89PNG\r\n\x1a\n"
_HDF5_MAGIC = b"\x89HDF\r\n\x1a\n"


class IngestError(Exception):
    """Hard failure during scanning or conversion."""


class LabelError(IngestError):
    """Label table is missing, malformed, or inconsistent with the files."""


class ConversionError(IngestError):
    """A single record could not be converted."""


@dataclass
class ImageRecord:
    source_path: str
    source_format: str
    subject_id: str
    age_years: float
    sex: str = "unknown"
    converted_path: Optional[str] = None


@dataclass(frozen=True)
class SlicePolicy:
    """How 3-D volumes map to 2-D images: which axis, which indices."""

    mode: str = "middle"
    k: int = 1
    axis: str = "axial"

    def __post_init__(self):
        if self.mode not in SLICE_MODES:
            raise ValueError(f"slice mode must be one of {SLICE_MODES}, got {self.mode!r}")
        if self.axis not in SLICE_AXES:
            raise ValueError(f"slice axis must be one of {SLICE_AXES}, got {self.axis!r}")
        if self.k < 1:
            raise ValueError(f"slice stride k must be >= 1, got {self.k}")

    def indices(self, depth: int) -> list[int]:
        if self.mode == "middle":
            return [depth // 2]
        if self.mode == "every_k":
            return list(range(0, depth, self.k))
        return list(range(depth))


@dataclass
class Manifest:
    records: list[ImageRecord]
    created_at: str
    source_root: str


@dataclass
class ConversionReport:
    converted: int = 0
    failures: list[dict] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)


def _record_sort_key(record: ImageRecord):
    return (record.source_path, record.converted_path or "")


def validate_manifest(manifest: Manifest) -> None:
    """Check manifest invariants; raises IngestError on violation."""
    if not manifest.records:
        raise IngestError("manifest is empty")
    converted = [r for r in manifest.records if r.converted_path]
    if len(converted) == len(manifest.records):
        keys = [r.converted_path for r in manifest.records]
        what = "converted_path"
    else:
        keys = [r.source_path for r in manifest.records]
        what = "source_path"
    if len(set(keys)) != len(keys):
        dupes = sorted({k for k in keys if keys.count(k) > 1})
        raise IngestError(f"duplicate {what} values in manifest: {dupes[:5]}")
    for r in manifest.records:
        if r.source_format not in (FORMAT_PNG, FORMAT_DICOM, FORMAT_MINC):
            raise IngestError(f"unknown source_format {r.source_format!r} for {r.source_path}")
        if not AGE_HARD_RANGE[0] <= r.age_years <= AGE_HARD_RANGE[1]:
            raise IngestError(
                f"age {r.age_years} for {r.source_path} outside {AGE_HARD_RANGE}")
        if r.sex not in ("M", "F", "unknown"):
            raise IngestError(f"invalid sex {r.sex!r} for {r.source_path}")
    keys_all = [_record_sort_key(r) for r in manifest.records]
    if keys_all != sorted(keys_all):
        raise IngestError("manifest records are not in sorted order")


def _sniff_format(path: Path) -> Optional[str]:
    try:
        with open(path, "rb") as fh:
            head = fh.read(132)
    except OSError:
        return None
    if head.startswith(_PNG_MAGIC):
        return FORMAT_PNG
    if head.startswith(_HDF5_MAGIC) or head[:3] == b"CDF":
        return FORMAT_MINC
    if len(head) >= 132 and head[128:132] == b"DICM":
        return FORMAT_DICOM
    return None


def _normalize_sex(raw: Optional[str], source_path: str) -> str:
    if raw is None or raw.strip() == "":
        return "unknown"
    value = raw.strip()
    if value.upper() in ("M", "F"):
        return value.upper()
    if value.lower() == "unknown":
        return "unknown"
    raise LabelError(f"invalid sex value {raw!r} for {source_path} (want M, F, or unknown)")


def _read_label_table(labels_path: Path) -> dict[str, dict]:
    if not labels_path.is_file():
        raise LabelError(f"label table not found: {labels_path}")
    with open(labels_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise LabelError(f"label table {labels_path} has no header row")
        fields = [f.strip() for f in reader.fieldnames]
        required = {"source_path", "subject_id", "age_years"}
        missing = required - set(fields)
        if missing:
            raise LabelError(
                f"label table {labels_path} is missing columns: {sorted(missing)}")
        rows: dict[str, dict] = {}
        for lineno, row in enumerate(reader, start=2):
            key = (row.get("source_path") or "").strip()
            if not key:
                raise LabelError(f"{labels_path}:{lineno}: empty source_path")
            if key in rows:
                raise LabelError(f"duplicate source_path {key!r} in label table")
            rows[key] = row
    return rows


def scan_source(root: str | Path, labels: str | Path) -> Manifest:
    """Discover images under ``root`` and join them to the label table.

    Records are keyed by POSIX path relative to ``root`` and sorted
    lexicographically.  Every discovered file must have exactly one label
    row; missing labels and unparseable ages are hard errors.
    """
    root = Path(root)
    if not root.is_dir():
        raise IngestError(f"source root is not a directory: {root}")
    labels_by_path = _read_label_table(Path(labels))

    discovered: list[tuple[str, str]] = []
    for path in sorted(root.rglob("*")):
        if not path.is_file():
            continue
        fmt = _FORMAT_BY_EXT.get(path.suffix.lower())
        if fmt is None:
            continue
        rel = path.relative_to(root).as_posix()
        sniffed = _sniff_format(path)
        if sniffed is not None and sniffed != fmt:
            raise IngestError(
                f"{rel}: extension says {fmt} but file content looks like {sniffed}")
        discovered.append((rel, fmt))
    if not discovered:
        raise IngestError(f"no MINC/DICOM/PNG files found under {root}")

    missing = [rel for rel, _ in discovered if rel not in labels_by_path]
    if missing:
        raise LabelError(
            f"{len(missing)} discovered file(s) have no label row: {missing[:10]}")

    unused = set(labels_by_path) - {rel for rel, _ in discovered}
    if unused:
        log.warning("%d label row(s) match no discovered file (ignored)", len(unused))

    records = []
    for rel, fmt in discovered:
        row = labels_by_path[rel]
        try:
            age = float(row["age_years"])
        except (TypeError, ValueError) as exc:
            raise LabelError(f"unparseable age {row.get('age_years')!r} for {rel}") from exc
        if not AGE_HARD_RANGE[0] <= age <= AGE_HARD_RANGE[1]:
            raise LabelError(f"age {age} for {rel} outside plausible range {AGE_HARD_RANGE}")
        if not AGE_EXPECTED_RANGE[0] <= age <= AGE_EXPECTED_RANGE[1]:
            log.warning("age %.1f for %s outside expected band %s", age, rel,
                        AGE_EXPECTED_RANGE)
        subject = (row.get("subject_id") or "").strip()
        if not subject:
            raise LabelError(f"empty subject_id for {rel}")
        records.append(ImageRecord(
            source_path=rel,
            source_format=fmt,
            subject_id=subject,
            age_years=age,
            sex=_normalize_sex(row.get("sex"), rel),
        ))

    records.sort(key=_record_sort_key)
    manifest = Manifest(
        records=records,
        created_at=datetime.now(timezone.utc).isoformat(),
        source_root=str(root),
    )
    validate_manifest(manifest)
    return manifest


def _load_source_array(path: Path, fmt: str) -> np.ndarray:
    """Read a source file as float64: 2-D, HxWx3, or 3-D volume."""
    if fmt == FORMAT_PNG:
        with Image.open(path) as img:
            if img.mode in ("RGB", "RGBA", "P"):
                return np.asarray(img.convert("RGB"), dtype=np.float64)
            if img.mode in ("L", "LA"):
                return np.asarray(img.convert("L"), dtype=np.float64)
            # 16/32-bit grayscale modes
            return np.asarray(img, dtype=np.float64)
    if fmt == FORMAT_DICOM:
        return read_dicom(path)
    if fmt == FORMAT_MINC:
        return read_minc(path)
    raise ConversionError(f"unknown source format {fmt!r}")


def _resize_plane(plane: np.ndarray) -> np.ndarray:
    """Bilinear resize of one 2-D float plane to IMAGE_SIZE squared."""
    if plane.shape == (IMAGE_SIZE, IMAGE_SIZE):
        return plane
    img = Image.fromarray(plane.astype(np.float32), mode="F")
    img = img.resize((IMAGE_SIZE, IMAGE_SIZE), Image.BILINEAR)
    return np.asarray(img, dtype=np.float64)


def _quantize(arr: np.ndarray, rel: str, warnings: list[str]) -> np.ndarray:
    """Min-max rescale to [0, 255] and quantize to uint8."""
    lo = float(arr.min())
    hi = float(arr.max())
    if hi == lo:
        warnings.append(f"{rel}: zero-variance image, converted to all zeros")
        return np.zeros(arr.shape, dtype=np.uint8)
    scaled = (arr - lo) * (255.0 / (hi - lo))
    return np.rint(scaled).astype(np.uint8)


def convert_image(record: ImageRecord, policy: SlicePolicy, out_dir: str | Path,
                  source_root: str | Path,
                  warnings: Optional[list[str]] = None) -> list[ImageRecord]:
    """Convert one record to one PNG per selected slice.

    Output files are 224x224 8-bit RGB; grayscale planes are replicated to
    three channels.  Raises ConversionError for unreadable sources.
    """
    if warnings is None:
        warnings = []
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    src = Path(source_root) / record.source_path
    try:
        arr = _load_source_array(src, record.source_format)
    except IngestError:
        raise
    except Exception as exc:
        raise ConversionError(f"{record.source_path}: unreadable source ({exc})") from exc

    stem = record.source_path.replace("/", "__")
    stem = stem.rsplit(".", 1)[0]

    if arr.ndim == 2 or (arr.ndim == 3 and arr.shape[2] == 3 and arr.shape[0] != 3):
        planes = [(None, arr)]
    elif arr.ndim == 3:
        axis = _AXIS_INDEX[policy.axis]
        depth = arr.shape[axis]
        planes = [(i, np.take(arr, i, axis=axis)) for i in policy.indices(depth)]
    else:
        raise ConversionError(f"{record.source_path}: unsupported array shape {arr.shape}")

    outputs = []
    for slice_idx, plane in planes:
        if plane.ndim == 3:  # RGB source: resize channels, joint min-max
            resized = np.stack([_resize_plane(plane[:, :, c]) for c in range(3)], axis=2)
            rgb = _quantize(resized, record.source_path, warnings)
        else:
            resized = _resize_plane(plane)
            gray = _quantize(resized, record.source_path, warnings)
            rgb = np.repeat(gray[:, :, None], 3, axis=2)
        name = stem if slice_idx is None else f"{stem}_s{slice_idx:04d}"
        out_path = out_dir / f"{name}.png"
        Image.fromarray(rgb, mode="RGB").save(out_path, format="PNG")
        outputs.append(replace(record, converted_path=str(out_path)))
    return outputs


def convert_manifest(manifest: Manifest, policy: SlicePolicy,
                     out_dir: str | Path) -> tuple[Manifest, ConversionReport]:
    """Convert every record; per-record failures are collected, not fatal."""
    report = ConversionReport()
    converted: list[ImageRecord] = []
    for record in manifest.records:
        try:
            converted.extend(convert_image(record, policy, out_dir,
                                           manifest.source_root, report.warnings))
        except ConversionError as exc:
            log.error("conversion failed: %s", exc)
            report.failures.append({"source_path": record.source_path, "error": str(exc)})
    if not converted:
        raise IngestError("conversion produced no outputs (all records failed)")
    report.converted = len(converted)
    converted.sort(key=_record_sort_key)
    out = Manifest(records=converted,
                   created_at=datetime.now(timezone.utc).isoformat(),
                   source_root=manifest.source_root)
    validate_manifest(out)
    return out, report


def save_manifest(manifest: Manifest, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "created_at": manifest.created_at,
        "source_root": manifest.source_root,
        "records": [asdict(r) for r in manifest.records],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    if not path.is_file():
        raise IngestError(f"manifest not found: {path}")
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    manifest = Manifest(
        records=[ImageRecord(**r) for r in doc["records"]],
        created_at=doc["created_at"],
        source_root=doc["source_root"],
    )
    validate_manifest(manifest)
    return manifest


def save_conversion_report(report: ConversionReport, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(asdict(report), fh, indent=2, sort_keys=True)
        fh.write("\n")

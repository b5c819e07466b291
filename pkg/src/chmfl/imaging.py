"""Volume container IO, patient manifests and PET/CT preprocessing.

Preprocessing runs in this order: isotropic resampling, a fixed physical
bounding box around the tumor centroid, then per-volume percentile clipping
and z-score standardization of PET and CT. Masks are resampled by nearest
neighbour and never normalized.
"""

from __future__ import annotations

import csv
import enum
import os
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

MAGIC = b"CHVL"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sBB3Q3d")

MANIFEST_FIELDS = ("id", "pet", "ct", "mask", "dm_label")


class Modality(enum.IntEnum):
    CT = 0
    PET = 1
    MASK = 2


class VolumeFormatError(ValueError):
    pass


class ManifestError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Volume:
    """A 3-D scalar field with voxel spacing in mm (depth, height, width)."""

    voxels: np.ndarray
    spacing: Tuple[float, float, float]
    modality: Modality

    def __post_init__(self):
        vox = np.array(self.voxels, dtype=np.float32)
        if vox.ndim != 3 or min(vox.shape) < 1:
            raise ValueError(f"volume must be 3-D with positive extents, got {vox.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in spacing):
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")
        modality = Modality(self.modality)
        if modality is Modality.MASK and not np.isin(vox, (0.0, 1.0)).all():
            raise ValueError("MASK volume may only contain 0 and 1")
        vox.flags.writeable = False
        object.__setattr__(self, "voxels", vox)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "modality", modality)

    @property
    def extents(self) -> Tuple[int, int, int]:
        return self.voxels.shape

    def with_voxels(self, voxels: np.ndarray, spacing=None) -> "Volume":
        return Volume(voxels, self.spacing if spacing is None else spacing, self.modality)

    def same_as(self, other: "Volume") -> bool:
        return (self.modality == other.modality and self.spacing == other.spacing
                and self.extents == other.extents and np.array_equal(self.voxels, other.voxels))


@dataclass(frozen=True)
class PatientRecord:
    id: str
    pet: Volume
    ct: Volume
    mask: Volume
    dm_label: int

    def validate_raw(self) -> None:
        if self.dm_label not in (0, 1):
            raise ValueError(f"{self.id}: DM label must be 0 or 1, got {self.dm_label}")
        if self.pet.modality is not Modality.PET or self.ct.modality is not Modality.CT:
            raise ValueError(f"{self.id}: pet/ct volumes carry the wrong modality tag")
        if self.mask.modality is not Modality.MASK:
            raise ValueError(f"{self.id}: mask volume is not tagged MASK")
        if (self.pet.voxels < 0).any():
            raise ValueError(f"{self.id}: PET contains negative SUV values")
        if not self.mask.voxels.any():
            raise ValueError(f"{self.id}: tumor mask is empty")


# ---------------------------------------------------------------------------
# container IO

def write_volume(v: Volume, path) -> None:
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, int(v.modality), *v.extents, *v.spacing)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(v.voxels, dtype="<f4").tobytes())


def read_volume(path) -> Volume:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise VolumeFormatError(f"{path}: file shorter than the header")
    magic, version, modality, d, h, w, sd, sh, sw = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise VolumeFormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VolumeFormatError(f"{path}: unsupported version {version}")
    if modality not in Modality._value2member_map_:
        raise VolumeFormatError(f"{path}: unknown modality tag {modality}")
    count = d * h * w
    payload = raw[_HEADER.size:]
    if len(payload) < 4 * count:
        raise VolumeFormatError(f"{path}: truncated payload, expected {count} floats, found {len(payload) // 4}")
    if len(payload) > 4 * count:
        raise VolumeFormatError(f"{path}: {len(payload) - 4 * count} trailing bytes after payload")
    vox = np.frombuffer(payload, dtype="<f4").reshape(d, h, w)
    try:
        return Volume(vox, (sd, sh, sw), Modality(modality))
    except ValueError as e:
        raise VolumeFormatError(f"{path}: {e}") from None


# ---------------------------------------------------------------------------
# manifests (CSV: id, pet, ct, mask, dm_label; paths relative to the manifest)

def load_manifest(path) -> List[PatientRecord]:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    base = path.parent
    records: List[PatientRecord] = []
    seen = set()
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None:
            return records
        missing = set(MANIFEST_FIELDS) - set(reader.fieldnames)
        if missing:
            raise ManifestError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            pid = row["id"].strip()
            if pid in seen:
                raise ManifestError(f"{path}: duplicate patient id {pid!r}")
            seen.add(pid)
            try:
                label = int(row["dm_label"])
            except ValueError:
                raise ManifestError(f"{path}: {pid}: label {row['dm_label']!r} is not an integer") from None
            if label not in (0, 1):
                raise ManifestError(f"{path}: {pid}: DM label must be 0 or 1, got {label}")
            vols = {}
            for key in ("pet", "ct", "mask"):
                vp = base / row[key]
                if not vp.is_file():
                    raise ManifestError(f"{path}: {pid}: missing {key} file {vp}")
                vols[key] = read_volume(vp)
            rec = PatientRecord(pid, vols["pet"], vols["ct"], vols["mask"], label)
            try:
                rec.validate_raw()
            except ValueError as e:
                raise ManifestError(str(e)) from None
            records.append(rec)
    return records


def write_manifest(records: Sequence[PatientRecord], directory) -> Path:
    """Write every record's volumes into ``directory`` and return the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = directory / "manifest.csv"
    tmp = manifest.with_suffix(".csv.tmp")
    with open(tmp, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        for r in records:
            names = {}
            for key in ("pet", "ct", "mask"):
                names[key] = f"{r.id}_{key}.chvl"
                write_volume(getattr(r, key), directory / names[key])
            writer.writerow([r.id, names["pet"], names["ct"], names["mask"], r.dm_label])
    os.replace(tmp, manifest)
    return manifest


# ---------------------------------------------------------------------------
# preprocessing

def _axis_positions(n_old: int, n_new: int, ratio: float):
    # grids share their first voxel centre; positions past the last sample clamp to it
    pos = np.clip(np.arange(n_new) * ratio, 0, n_old - 1)
    lo = np.floor(pos).astype(np.intp)
    hi = np.minimum(lo + 1, n_old - 1)
    return pos, lo, hi, pos - lo


def _lerp_axis(a: np.ndarray, axis: int, n_new: int, ratio: float) -> np.ndarray:
    _, lo, hi, frac = _axis_positions(a.shape[axis], n_new, ratio)
    x0 = np.take(a, lo, axis=axis)
    x1 = np.take(a, hi, axis=axis)
    shape = [1] * a.ndim
    shape[axis] = n_new
    frac = frac.reshape(shape)
    out = x0 + frac * (x1 - x0)
    # a + f(b - a) can overshoot by an ulp; keep the result inside [min(a,b), max(a,b)]
    return np.clip(out, np.minimum(x0, x1), np.maximum(x0, x1))


def resample_isotropic(v: Volume, target_mm: float = 1.0) -> Volume:
    """Trilinear resampling onto a grid with ``target_mm`` spacing on every axis.

    Masks use nearest-neighbour lookup so they stay binary.
    """
    if not target_mm > 0:
        raise ValueError(f"target spacing must be positive, got {target_mm}")
    new_ext = [int(round(n * s / target_mm)) for n, s in zip(v.extents, v.spacing)]
    if min(new_ext) < 1:
        raise ValueError(f"resampling {v.extents} @ {v.spacing} mm to {target_mm} mm leaves an empty axis")
    ratios = [target_mm / s for s in v.spacing]
    if v.modality is Modality.MASK:
        idx = [np.clip(np.floor(np.arange(n) * r + 0.5), 0, old - 1).astype(np.intp)
               for n, r, old in zip(new_ext, ratios, v.extents)]
        out = v.voxels[np.ix_(*idx)]
        out = (out >= 0.5).astype(np.float32)
    else:
        out = v.voxels.astype(np.float64)
        for axis in range(3):
            out = _lerp_axis(out, axis, new_ext[axis], ratios[axis])
    return Volume(out, (target_mm,) * 3, v.modality)


def mask_centroid(mask: Volume) -> Tuple[int, int, int]:
    coords = np.argwhere(mask.voxels > 0)
    if len(coords) == 0:
        raise ValueError("tumor mask is empty")
    return tuple(int(c) for c in np.floor(coords.mean(axis=0) + 0.5))


def box_extents(box_mm: Sequence[float], spacing: Sequence[float]) -> Tuple[int, int, int]:
    ext = tuple(int(round(b / s)) for b, s in zip(box_mm, spacing))
    if min(ext) < 1:
        raise ValueError(f"bounding box {box_mm} mm is smaller than one voxel")
    return ext


def extract_bounding_box(v: Volume, mask: Volume, box_mm: Sequence[float] = (112, 112, 144)) -> Volume:
    """Crop a fixed physical box centred on the mask centroid, zero-padding outside the field of view.

    The centroid voxel lands at index ``extent // 2`` of the crop on each axis.
    """
    if v.extents != mask.extents or not np.allclose(v.spacing, mask.spacing):
        raise ValueError("volume and mask must share the same grid")
    centre = mask_centroid(mask)
    ext = box_extents(box_mm, v.spacing)
    out = np.zeros(ext, dtype=np.float32)
    src, dst = [], []
    for c, e, n in zip(centre, ext, v.extents):
        start = c - e // 2
        lo, hi = max(start, 0), min(start + e, n)
        src.append(slice(lo, max(lo, hi)))
        dst.append(slice(lo - start, lo - start + max(0, hi - lo)))
    out[tuple(dst)] = v.voxels[tuple(src)]
    return v.with_voxels(out)


def normalize_intensity(v: Volume, lower_pct: float = 0.5, upper_pct: float = 99.5) -> Volume:
    """Clip to the [0.5, 99.5] percentile range, then standardize to zero mean, unit variance."""
    x = v.voxels.astype(np.float64)
    lo, hi = np.percentile(x, [lower_pct, upper_pct])
    x = np.clip(x, lo, hi)
    std = x.std()
    if not std > 0:
        raise ValueError("cannot standardize a volume with zero variance")
    return v.with_voxels((x - x.mean()) / std)


def preprocess_record(r: PatientRecord, target_mm: float = 1.0,
                      box_mm: Sequence[float] = (112, 112, 144)) -> PatientRecord:
    pet = resample_isotropic(r.pet, target_mm)
    ct = resample_isotropic(r.ct, target_mm)
    mask = resample_isotropic(r.mask, target_mm)
    if not (pet.extents == ct.extents == mask.extents):
        raise ValueError(f"{r.id}: PET {pet.extents}, CT {ct.extents} and mask {mask.extents} disagree after resampling")
    pet = normalize_intensity(extract_bounding_box(pet, mask, box_mm))
    ct = normalize_intensity(extract_bounding_box(ct, mask, box_mm))
    mask_crop = extract_bounding_box(mask, mask, box_mm)
    return replace(r, pet=pet, ct=ct, mask=mask_crop)


def restore_box(box: np.ndarray, mask: Volume, target_mm: float = 1.0) -> np.ndarray:
    """Map a cropped box back onto the original grid of ``mask``.

    Inverse of the crop in :func:`preprocess_record` followed by a
    nearest-neighbour lookup from the resampled grid; voxels outside the box
    are zero.
    """
    resampled = resample_isotropic(mask, target_mm)
    centre = mask_centroid(resampled)
    full = np.zeros(resampled.extents, dtype=box.dtype)
    src, dst = [], []
    for c, e, n in zip(centre, box.shape, resampled.extents):
        start = c - e // 2
        lo, hi = max(start, 0), min(start + e, n)
        dst.append(slice(lo, max(lo, hi)))
        src.append(slice(lo - start, lo - start + max(0, hi - lo)))
    full[tuple(dst)] = box[tuple(src)]
    idx = [np.clip(np.floor((np.arange(n) * s) / target_mm + 0.5), 0, m - 1).astype(np.intp)
           for n, s, m in zip(mask.extents, mask.spacing, resampled.extents)]
    return full[np.ix_(*idx)]

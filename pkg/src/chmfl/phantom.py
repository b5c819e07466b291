"""Synthetic PET/CT patients whose DM label is encoded in tumor uptake heterogeneity.

Each patient has a smooth body on CT, one ellipsoidal tumor (the mask), and a
PET tumor whose uptake is modulated by a band-limited random field. The field
amplitude is drawn from a low range for DM=0 and a disjoint high range for
DM=1, so within-tumor PET variance separates the classes by construction.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import List, Tuple

import numpy as np

from .imaging import Modality, PatientRecord, Volume, write_manifest


@dataclass(frozen=True)
class PhantomConfig:
    extents: Tuple[int, int, int] = (40, 40, 40)
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    n_patients: int = 48
    dm_fraction: float = 0.5
    tumor_radius_mm: Tuple[float, float] = (6.0, 9.0)
    pet_background: float = 1.0
    tumor_uptake: float = 4.0
    heterogeneity_low: Tuple[float, float] = (0.0, 0.05)
    heterogeneity_high: Tuple[float, float] = (0.7, 0.9)
    wavelength_mm: Tuple[float, float] = (4.0, 8.0)
    noise_pet: float = 0.1
    noise_ct: float = 10.0
    seed: int = 0

    def __post_init__(self):
        for name in ("extents", "spacing", "tumor_radius_mm", "heterogeneity_low",
                     "heterogeneity_high", "wavelength_mm"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.n_patients < 0 or not 0 <= self.dm_fraction <= 1:
            raise ValueError("n_patients must be >= 0 and dm_fraction in [0, 1]")
        lo, hi = self.heterogeneity_low, self.heterogeneity_high
        if not (0 <= lo[0] <= lo[1] < hi[0] <= hi[1]):
            raise ValueError(f"heterogeneity ranges {lo} and {hi} must be ordered and disjoint")
        r0, r1 = self.tumor_radius_mm
        if not 0 < r0 <= r1:
            raise ValueError("tumor radius range must be positive and ordered")
        fov = min(e * s for e, s in zip(self.extents, self.spacing))
        if 2 * r1 + 2 * max(self.spacing) >= fov:
            raise ValueError(f"tumor radius up to {r1} mm does not fit a {fov} mm field of view")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def _grid_mm(cfg: PhantomConfig):
    return np.meshgrid(*[np.arange(n) * s for n, s in zip(cfg.extents, cfg.spacing)], indexing="ij")


def _heterogeneity_field(coords, rng, wavelengths, n_waves: int = 4) -> np.ndarray:
    field = np.zeros(coords[0].shape)
    for _ in range(n_waves):
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        k = 2 * np.pi / rng.uniform(*wavelengths)
        phase = rng.uniform(0, 2 * np.pi)
        field += np.cos(k * sum(d * c for d, c in zip(direction, coords)) + phase)
    return field


def _soft_ellipsoid(coords, centre, radii, edge_mm: float = 1.5) -> np.ndarray:
    r = np.sqrt(sum(((c - m) / a) ** 2 for c, m, a in zip(coords, centre, radii)))
    return 1.0 / (1.0 + np.exp((r - 1.0) * min(radii) / edge_mm))


def generate_patient(cfg: PhantomConfig, pid: str, label: int, rng: np.random.Generator) -> Tuple[PatientRecord, float]:
    """One synthetic patient plus the heterogeneity amplitude used for it."""
    coords = _grid_mm(cfg)
    size = np.array([n * s for n, s in zip(cfg.extents, cfg.spacing)])
    spacing = np.array(cfg.spacing)

    body_centre = size / 2 + rng.uniform(-0.05, 0.05, 3) * size
    body = _soft_ellipsoid(coords, body_centre, size * rng.uniform(0.42, 0.5, 3))
    bone = _soft_ellipsoid(coords, body_centre + rng.uniform(-0.1, 0.1, 3) * size, size * rng.uniform(0.06, 0.1, 3))

    radii = rng.uniform(*cfg.tumor_radius_mm, 3)
    margin = radii.max() + spacing.max()
    centre = np.array([rng.uniform(margin, s - margin) for s in size])
    r2 = sum(((c - m) / a) ** 2 for c, m, a in zip(coords, centre, radii))
    tumor = r2 <= 1.0
    if not tumor.any():
        # radii smaller than the grid can miss every voxel centre
        tumor[tuple(np.round(centre / spacing).astype(int))] = True

    amp_range = cfg.heterogeneity_high if label == 1 else cfg.heterogeneity_low
    amp = float(rng.uniform(*amp_range))
    field = _heterogeneity_field(coords, rng, cfg.wavelength_mm)
    inside = field[tumor]
    field = (field - inside.mean()) / (inside.std() if inside.std() > 0 else 1.0)

    pet = cfg.pet_background * (0.1 + 0.9 * body)
    pet = np.where(tumor, cfg.tumor_uptake * cfg.pet_background * (1 + amp * field), pet)
    pet = np.maximum(pet + rng.normal(0, cfg.noise_pet, pet.shape), 0.0)

    ct = -1000.0 + 1040.0 * body + 700.0 * bone
    ct = np.where(tumor, ct + 25.0, ct) + rng.normal(0, cfg.noise_ct, ct.shape)

    rec = PatientRecord(
        id=pid,
        pet=Volume(pet, cfg.spacing, Modality.PET),
        ct=Volume(ct, cfg.spacing, Modality.CT),
        mask=Volume(tumor.astype(np.float32), cfg.spacing, Modality.MASK),
        dm_label=int(label),
    )
    return rec, amp


def generate(cfg: PhantomConfig, return_amplitudes: bool = False):
    """Deterministic dataset of ``cfg.n_patients`` records (shuffled class order)."""
    seq = np.random.SeedSequence(cfg.seed)
    label_seq, *patient_seqs = seq.spawn(cfg.n_patients + 1)
    n_pos = int(round(cfg.n_patients * cfg.dm_fraction))
    labels = np.array([1] * n_pos + [0] * (cfg.n_patients - n_pos))
    labels = np.random.default_rng(label_seq).permutation(labels)
    records: List[PatientRecord] = []
    amps: List[float] = []
    for i, (label, s) in enumerate(zip(labels, patient_seqs)):
        rec, amp = generate_patient(cfg, f"P{i:03d}", int(label), np.random.default_rng(s))
        rec.validate_raw()
        records.append(rec)
        amps.append(amp)
    lo = [a for a, l in zip(amps, labels) if l == 0]
    hi = [a for a, l in zip(amps, labels) if l == 1]
    if lo and hi and max(lo) >= min(hi):
        raise AssertionError("generated heterogeneity amplitudes overlap between classes")
    return (records, amps) if return_amplitudes else records


def export(dataset, directory):
    """Write volumes and a manifest; returns the manifest path."""
    return write_manifest(dataset, directory)


def tumor_pet_variance(rec: PatientRecord) -> float:
    """Variance of PET voxels inside the tumor mask (the label-bearing feature)."""
    return float(rec.pet.voxels[rec.mask.voxels > 0].astype(np.float64).var())

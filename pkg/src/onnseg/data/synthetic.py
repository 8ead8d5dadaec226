"""Synthetic DWI/ADC volumes with ellipsoidal lesions and exact masks.

Lesions are bright in DWI and dark in ADC. A configurable fraction of
lesions carries no DWI contrast at all, so only a model that sees the ADC
channel can find them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from ..errors import ConfigurationError, ValidationError
from ..nifti import Volume


@dataclass(frozen=True)
class SyntheticSpec:
    n_patients: int = 10
    slices_per_patient: int = 8
    size: int = 64
    lesions_per_patient: Tuple[int, int] = (1, 3)
    lesion_radius: Tuple[float, float] = (3.0, 8.0)
    tissue_dwi: float = 0.35
    tissue_adc: float = 0.6
    dwi_contrast: float = 0.45
    adc_contrast: float = 0.35
    background_amplitude: float = 0.05
    noise: float = 0.02
    adc_only_fraction: float = 0.0
    min_lesion_slice_fraction: float = 0.8
    seed: int = 0

    def validate(self) -> None:
        lo, hi = self.lesions_per_patient
        rlo, rhi = self.lesion_radius
        if self.n_patients < 1 or self.slices_per_patient < 1 or self.size < 8:
            raise ConfigurationError(f"invalid synthetic dataset dimensions: {self}")
        if not 1 <= lo <= hi or not 0 < rlo <= rhi:
            raise ConfigurationError("lesion count/radius ranges must be positive and ordered")
        if not 0.0 <= self.adc_only_fraction <= 1.0:
            raise ConfigurationError("adc_only_fraction must be within [0, 1]")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)


@dataclass
class Lesion:
    centre: Tuple[float, float, float]  # (z, y, x)
    radii: Tuple[float, float, float]
    adc_only: bool = False


@dataclass
class PatientRecord:
    patient_id: str
    dwi: Volume
    adc: Optional[Volume]
    mask: Volume
    lesions: List[Lesion] = field(default_factory=list)

    def __post_init__(self):
        vols = [self.dwi, self.mask] + ([self.adc] if self.adc is not None else [])
        if len({v.extents for v in vols}) != 1:
            raise ValidationError(
                f"patient {self.patient_id}: modality extents differ "
                f"{[v.extents for v in vols]}")
        if not np.all((self.mask.voxels == 0) | (self.mask.voxels == 1)):
            raise ValidationError(f"patient {self.patient_id}: mask is not binary")


def _smooth_field(rng, shape, amplitude, n_waves=4):
    z, y, x = (np.arange(s, dtype=np.float64) / s for s in shape)
    zz, yy, xx = np.meshgrid(z, y, x, indexing="ij")
    out = np.zeros(shape)
    for _ in range(n_waves):
        fz, fy, fx = rng.uniform(-1.5, 1.5, 3)
        phase = rng.uniform(0, 2 * np.pi)
        out += np.cos(2 * np.pi * (fz * zz + fy * yy + fx * xx) + phase)
    return amplitude * out / n_waves


def _ellipsoid(shape, lesion: Lesion) -> np.ndarray:
    z, y, x = (np.arange(s, dtype=np.float64) for s in shape)
    cz, cy, cx = lesion.centre
    rz, ry, rx = lesion.radii
    d = (((z - cz) / rz) ** 2)[:, None, None] + (((y - cy) / ry) ** 2)[None, :, None] \
        + (((x - cx) / rx) ** 2)[None, None, :]
    return d <= 1.0


def _draw_lesion(rng, spec: SyntheticSpec, z_centre: Optional[float] = None) -> Lesion:
    n, s = spec.slices_per_patient, spec.size
    ry, rx = rng.uniform(*spec.lesion_radius, 2)
    # in-plane centre inside the inner part of the head ellipse
    ang = rng.uniform(0, 2 * np.pi)
    rad = np.sqrt(rng.uniform(0, 1)) * 0.55
    cy = s / 2 + rad * 0.36 * s * np.sin(ang)
    cx = s / 2 + rad * 0.42 * s * np.cos(ang)
    cz = rng.uniform(0.25 * n, 0.75 * n) - 0.5 if z_centre is None else z_centre
    rz = max(n * rng.uniform(0.8, 1.2), 1.0)
    return Lesion((float(cz), float(cy), float(cx)), (float(rz), float(ry), float(rx)))


def _head_mask(spec: SyntheticSpec) -> np.ndarray:
    s = spec.size
    y, x = np.mgrid[0:s, 0:s].astype(np.float64)
    inside = ((y - s / 2 + 0.5) / (0.40 * s)) ** 2 + ((x - s / 2 + 0.5) / (0.46 * s)) ** 2 <= 1
    return np.broadcast_to(inside, (spec.slices_per_patient, s, s))


def synth_dataset(spec: SyntheticSpec) -> List[PatientRecord]:
    """Generate ``spec.n_patients`` co-registered DWI/ADC/mask volumes.

    Every random draw comes from a PCG64 stream seeded by ``spec.seed``, so
    equal specs give bitwise-equal datasets.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    shape = (spec.slices_per_patient, spec.size, spec.size)
    head = _head_mask(spec)

    plans = []
    for _ in range(spec.n_patients):
        k = int(rng.integers(spec.lesions_per_patient[0], spec.lesions_per_patient[1] + 1))
        lesions = [_draw_lesion(rng, spec) for _ in range(k)]
        mask = np.zeros(shape, dtype=bool)
        for les in lesions:
            mask |= _ellipsoid(shape, les)
        mask &= head
        # top up slices without lesion so enough slices carry a label
        need = int(np.ceil(spec.min_lesion_slice_fraction * shape[0]))
        while np.count_nonzero(mask.any(axis=(1, 2))) < need:
            empty = np.flatnonzero(~mask.any(axis=(1, 2)))
            les = _draw_lesion(rng, spec, z_centre=float(empty[0]))
            lesions.append(les)
            mask |= _ellipsoid(shape, les) & head
        plans.append((lesions, mask))

    # choose ADC-only lesions across the whole dataset so the fraction is exact
    all_lesions = [les for lesions, _ in plans for les in lesions]
    n_adc_only = int(np.floor(spec.adc_only_fraction * len(all_lesions) + 0.5))
    for i in rng.permutation(len(all_lesions))[:n_adc_only]:
        all_lesions[i].adc_only = True

    records = []
    for p, (lesions, mask) in enumerate(plans):
        dwi = spec.tissue_dwi + _smooth_field(rng, shape, spec.background_amplitude)
        adc = spec.tissue_adc + _smooth_field(rng, shape, spec.background_amplitude)
        dwi_lesion = np.zeros(shape, dtype=bool)
        for les in lesions:
            if not les.adc_only:
                dwi_lesion |= _ellipsoid(shape, les)
        dwi = np.where(dwi_lesion & head, dwi + spec.dwi_contrast, dwi)
        adc = np.where(mask, adc - spec.adc_contrast, adc)
        dwi = np.where(head, dwi, 0.0) + spec.noise * rng.standard_normal(shape)
        adc = np.where(head, adc, 0.0) + spec.noise * rng.standard_normal(shape)
        dwi = np.clip(dwi, 0.0, None)
        adc = np.clip(adc, 0.0, None)
        pid = f"synth{p:03d}"
        records.append(PatientRecord(
            pid, Volume.from_array(dwi), Volume.from_array(adc),
            Volume.from_array(mask.astype(np.float64)), lesions))
    return records

"""Volumes to SliceSamples: slice, resize, normalise, composite.

The emitted stream is ordered by (patient position, slice index) whatever
the worker count.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from ..errors import ConfigurationError, ContractError, ValidationError
from ..nifti import read_volume, slice_axial
from .preprocess import MODALITY_CHANNELS, ClaheParams, compose_channels, normalize_minmax, resize
from .synthetic import PatientRecord

DEFAULT_SIZE = 256


@dataclass(frozen=True)
class SliceSample:
    patient_id: str
    z: int
    image: np.ndarray  # (1, C, S, S) in [0, 1]
    mask: np.ndarray  # (1, 1, S, S) in {0, 1}

    def __post_init__(self):
        img, m = self.image, self.mask
        if img.ndim != 4 or img.shape[0] != 1 or img.shape[1] not in (1, 2, 3):
            raise ContractError(f"slice image must be (1,C,S,S) with C in 1..3, got {img.shape}")
        if m.shape != (1, 1) + img.shape[2:] or img.shape[2] != img.shape[3]:
            raise ContractError(f"mask {m.shape} does not match square image {img.shape}")
        if not np.isfinite(img).all() or img.min() < 0.0 or img.max() > 1.0:
            raise ContractError(f"{self.patient_id} z={self.z}: image outside [0, 1]")
        if not np.all((m == 0) | (m == 1)):
            raise ContractError(f"{self.patient_id} z={self.z}: mask not binary")

    @property
    def size(self) -> int:
        return self.image.shape[-1]


@dataclass(frozen=True)
class PipelineConfig:
    mode: str = "dwi_adc_edwi"
    size: int = DEFAULT_SIZE
    normalization: str = "slice"  # or "volume"
    clahe: ClaheParams = ClaheParams()
    drop_empty: bool = False
    workers: int = 1

    def __post_init__(self):
        if self.mode not in MODALITY_CHANNELS:
            raise ConfigurationError(f"unknown modality mode {self.mode!r}")
        if self.normalization not in ("slice", "volume"):
            raise ConfigurationError(f"unknown normalization {self.normalization!r}")
        if self.size < 1 or self.workers < 1:
            raise ConfigurationError("size and workers must be positive")


def _volume_scaler(vol):
    arr = vol.array()
    lo, hi = float(arr.min()), float(arr.max())
    if hi == lo:
        return lambda img: np.zeros_like(img)
    return lambda img: np.clip((img - lo) / (hi - lo), 0.0, 1.0)


def _record_samples(record: PatientRecord, cfg: PipelineConfig) -> List[SliceSample]:
    needs_adc = cfg.mode != "dwi"
    if needs_adc and record.adc is None:
        raise ValidationError(f"patient {record.patient_id}: ADC volume missing for mode {cfg.mode}")
    out_size = (cfg.size, cfg.size)
    if cfg.normalization == "volume":
        norm_dwi = _volume_scaler(record.dwi)
        norm_adc = _volume_scaler(record.adc) if needs_adc else None
    else:
        norm_dwi = norm_adc = normalize_minmax

    samples = []
    for z in range(record.dwi.extents[2]):
        dwi = norm_dwi(resize(slice_axial(record.dwi, z), out_size, "bilinear"))
        adc = norm_adc(resize(slice_axial(record.adc, z), out_size, "bilinear")) if needs_adc else None
        mask = resize(slice_axial(record.mask, z), out_size, "nearest")
        samples.append(SliceSample(record.patient_id, z, compose_channels(dwi, adc, cfg.mode, cfg.clahe),
                                   mask[None, None].astype(np.float64)))
    return samples


def build_samples(records: Sequence[PatientRecord], cfg: PipelineConfig,
                  train: bool = False) -> List[SliceSample]:
    """Slice every record; ``train=True`` honours ``cfg.drop_empty``."""
    if cfg.workers == 1:
        per_record = [_record_samples(r, cfg) for r in records]
    else:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            per_record = list(pool.map(lambda r: _record_samples(r, cfg), records))
    samples = [s for group in per_record for s in group]
    if train and cfg.drop_empty:
        samples = [s for s in samples if s.mask.any()]
    return samples


def stack_batch(samples: Sequence[SliceSample]):
    """Concatenate samples into (N,C,S,S) images and (N,1,S,S) masks."""
    return (np.concatenate([s.image for s in samples]),
            np.concatenate([s.mask for s in samples]))


# -- manifests --------------------------------------------------------------

def load_manifest(path) -> Dict[str, Dict[str, str]]:
    """Read ``{"patients": {id: {"dwi": path, "adc": path, "mask": path}}}``.

    Relative paths resolve against the manifest's directory.
    """
    path = Path(path)
    doc = json.loads(path.read_text())
    patients = doc.get("patients")
    if not isinstance(patients, dict) or not patients:
        raise ValidationError(f"{path}: manifest has no 'patients' mapping")
    out = {}
    for pid, files in patients.items():
        if "dwi" not in files or "mask" not in files:
            raise ValidationError(f"{path}: patient {pid} lacks dwi or mask entry")
        out[pid] = {k: str((path.parent / v).resolve()) for k, v in files.items()}
    return out


def write_manifest(path, entries: Dict[str, Dict[str, str]]) -> None:
    Path(path).write_text(json.dumps({"patients": entries}, indent=2, sort_keys=True))


def records_from_manifest(manifest: Dict[str, Dict[str, str]], mode: str,
                          ids: Optional[Iterable[str]] = None) -> List[PatientRecord]:
    records = []
    for pid in (sorted(manifest) if ids is None else ids):
        files = manifest[pid]
        needs_adc = mode != "dwi"
        if needs_adc and "adc" not in files:
            raise ValidationError(f"patient {pid}: manifest lists no ADC file for mode {mode}")
        for key in ("dwi", "mask") + (("adc",) if needs_adc else ()):
            if not Path(files[key]).exists():
                raise ValidationError(f"patient {pid}: missing {key} file {files[key]}")
        records.append(PatientRecord(
            pid, read_volume(files["dwi"]),
            read_volume(files["adc"]) if needs_adc else None, read_volume(files["mask"])))
    return records

from .pipeline import (PipelineConfig, SliceSample, build_samples, load_manifest,
                       records_from_manifest, stack_batch, write_manifest)
from .preprocess import (CHANNEL_LAYOUT, MODALITY_CHANNELS, ClaheParams, clahe, compose_channels,
                         normalize_minmax, resize, rms_contrast)
from .splits import FoldPlan, SplitPlan, kfold, patient_split, seeded_shuffle
from .synthetic import Lesion, PatientRecord, SyntheticSpec, synth_dataset

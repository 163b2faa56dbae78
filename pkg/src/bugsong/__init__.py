"""Insect-sound classification pipeline.

Two interchangeable frontends turn 5-second audio chunks into (64, 1500)
time-frequency maps: a fixed log-mel spectrogram and a trainable
Gabor-filterbank frontend with learned Gaussian pooling and per-channel
energy normalization. A small CNN classifies the maps. The package also
covers dataset preparation (ingest, split, chunk), waveform augmentation,
training with early stopping, evaluation, filter-drift analysis, and a
synthetic corpus generator so the whole pipeline can run self-contained.
"""

__version__ = "0.1.0"

from .audio import AudioClip, PIPELINE_RATE, load_pipeline_audio, read_wav, write_wav
from .augment import (AugmentPlan, GenerationDraw, ImpulseResponse,
                      add_noise_snr, augment_samples, augment_store,
                      builtin_impulse_responses, convolve_ir, draw_generation,
                      frequency_mask, load_impulse_responses)
from .backend import ConvClassifier, count_parameters, parameter_table
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, config_from_dict, default_config_yaml, load_config
from .dataset import (ChunkRecord, ChunkStore, DatasetManifest, ManifestEntry,
                      chunk_clip, chunk_manifest, chunk_samples,
                      expected_chunk_count, ingest, split_counts,
                      split_per_class)
from .errors import BugsongError, ConfigError, DataError, TrainingAborted
from .evaluation import (ConfusionMatrix, FilterDriftReport, compute_metrics,
                         confusion_from_predictions, file_level_metrics,
                         filter_drift, load_confusion_csv, load_drift_csv,
                         save_confusion_csv, save_drift_csv)
from .leaf import (GaborFilterbank, GaussianLowpass, LeafFrontend, Pcen,
                   design_grid, load_param_snapshot, pcen, save_param_snapshot)
from .mel import (FeatureMap, MelConfig, MelFrontend, band_centers, hz_to_mel,
                  mel_filterbank, mel_to_hz, read_featuremap, write_featuremap)
from .synth import SpeciesSpec, default_species_specs, synth_clip, synth_dataset
from .training import (EarlyStopper, EvalReport, ExperimentResult, RunResult,
                       TrainData, early_stopper, evaluate_checkpoint,
                       run_experiment, run_training)

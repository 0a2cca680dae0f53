"""Slot-based generative source separation.

A mixture spectrogram is encoded to an unordered set of per-source
embeddings, each decoded to a source spectrogram; training matches
predictions to targets with an optimal assignment so the loss is
permutation invariant, and separation applies masks derived from the
predictions to the complex mixture spectrogram.
"""

from .autodiff import GradientTape, Tensor
from .data import (
    DatasetManifest,
    MixtureExample,
    SynthConfig,
    SyntheticDataset,
    load_manifest,
    random_crop,
    read_wav,
    synth_example,
    write_dataset,
    write_wav,
)
from .dsp import (
    ChunkList,
    ComplexSpectrogram,
    CompressedMagnitude,
    Waveform,
    chunk,
    compress,
    decompress,
    hann_window,
    istft,
    stft,
    stitch,
)
from .errors import DatasetIntegrityError, ShapeError, UnsupportedFormatError
from .matching import Assignment, hungarian, match_by_score, mse_cost_matrix, pit_mse_loss
from .metrics import EvalReport, evaluate_separation, si_snr, si_snri
from .model import ModelConfig, SeparationModel, fourier_feature_grid, fourier_features
from .pipeline import (
    AdamState,
    Checkpoint,
    EvalSummary,
    MetricsLog,
    TrainConfig,
    adam_step,
    evaluate,
    export_spectrogram_image,
    load_checkpoint,
    lr_schedule,
    save_checkpoint,
    train,
)
from .separation import MaskSet, apply_mask, compute_ibm, compute_wiener, separate

__version__ = "0.1.0"

"""Audio classification with a multiview-trained CNN/transformer and test-time refinement."""

from .audio_io import AudioClip, DatasetManifest, SynthSpec, decode_wav, encode_wav, load_manifest
from .config import ExperimentConfig, load_config
from .frontend import MelParams, TokenMatrix, mel_spectrogram
from .losses import TTDAConfig, en_loss, gen_loss, lsr_loss, nm_loss, ttda_objective
from .model import AMAuT, ModelConfig, load_checkpoint, save_checkpoint
from .training import TrainConfig, multiview_step, train
from .tta import agreement_rate, aug_refine, hyb_refine, mlt_refine, ttda_adapt

__version__ = "0.1.0"

__all__ = [
    "AMAuT", "AudioClip", "DatasetManifest", "ExperimentConfig", "MelParams", "ModelConfig",
    "SynthSpec", "TTDAConfig", "TokenMatrix", "TrainConfig", "agreement_rate", "aug_refine",
    "decode_wav", "en_loss", "encode_wav", "gen_loss", "hyb_refine", "load_checkpoint",
    "load_config", "load_manifest", "lsr_loss", "mel_spectrogram", "mlt_refine",
    "multiview_step", "nm_loss", "save_checkpoint", "train", "ttda_adapt", "ttda_objective",
]

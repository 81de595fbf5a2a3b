"""End-to-end adversarial attacks on a mel-spectrogram instrument classifier."""
from .attacks import AttackConfig, AttackResult, cw, fgsm, ms_cw, pgdn, run_attack, sample_target
from .audio_io import LABELS, DatasetManifest, Waveform, load_wav, resample, save_wav, split_dataset
from .classifier import ClassifierModel, fit, load_checkpoint, predict, save_checkpoint
from .frontend import FrontendConfig, backward_frontend, forward_frontend, log_mel
from .metrics import confusion, snr_db
from .spectral import multi_scale_spectral_loss

__all__ = [
    "AttackConfig", "AttackResult", "ClassifierModel", "DatasetManifest", "FrontendConfig", "LABELS", "Waveform",
    "backward_frontend", "confusion", "cw", "fgsm", "fit", "forward_frontend", "load_checkpoint", "load_wav",
    "log_mel", "ms_cw", "multi_scale_spectral_loss", "pgdn", "predict", "resample", "run_attack", "sample_target",
    "save_checkpoint", "save_wav", "snr_db", "split_dataset",
]

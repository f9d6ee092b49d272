"""EVA-Net: normative EEG brain-age modelling with ProbSparse attention, a
variational information bottleneck and age-conditioned latent prototypes."""

__version__ = "0.1.0"

from .anomaly import AnomalyReport, SubjectScore, bag, pae, score_cohorts  # noqa: E402
from .data import EegEpoch, EpochSet, SynthConfig, synth_cohort  # noqa: E402
from .encoder import EncoderConfig, encoder_forward  # noqa: E402
from .model import ModelConfig, forward_eval, forward_train, init_params  # noqa: E402
from .stats import welch_t_test  # noqa: E402
from .training import TrainConfig, run_cv  # noqa: E402

__all__ = [
    "AnomalyReport", "EegEpoch", "EncoderConfig", "EpochSet", "ModelConfig", "SubjectScore",
    "SynthConfig", "TrainConfig", "bag", "encoder_forward", "forward_eval", "forward_train",
    "init_params", "pae", "run_cv", "score_cohorts", "synth_cohort", "welch_t_test",
]

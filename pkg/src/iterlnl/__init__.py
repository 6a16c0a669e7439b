"""Black-box domain adaptation by iterative learning with noisy labels."""

from .blackbox import BlackBoxHandle, predict_batch, remote, serve, wrap_as_blackbox
from .datagen import DatasetSplit, ShiftSpec, load_csv, load_idx, make_synthetic_pair
from .errors import (CheckpointError, ConfigError, DataError, IterLNLError, ParseError,
                     ProtocolError, TransportError)
from .iterative import IterConfig, StepRecord, evaluate, run_iterlnl
from .lnl import (CategoryBuffers, LnlConfig, NoisyLabeling, RunMetrics, accept_sample,
                  empirical_noise_rate, estimate_noise_rate, high_conf_proportion, keep_ratio,
                  noisy_labeling, rescale, run_lnl, selection_threshold)
from .model import (ClassifierModel, SgdSchedule, TrainConfig, cross_entropy_loss, forward,
                    grad_check, load_checkpoint, save_checkpoint, sgd_step, train_source)

__version__ = "0.1.0"

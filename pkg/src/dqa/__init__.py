"""Quantization-aware training with a learnable attention mixture over
weight quantizers, plus fixed-quantizer and relaxation baselines."""

from .autodiff import (DimensionError, Tape, Tensor, ValidationError,
                       softmax_cross_entropy, ste_node)
from .attention import (AttentionState, TemperatureSchedule, attention_weights,
                        derive_decay, init_alpha, normalize_alpha, regularizer,
                        temperature_at)
from .quantizers import (Calibration, DegenerateRangeError, QuantizationResult,
                         QuantizerSpec, brute_force_quantize, bwn_quantize,
                         quantize, sawb_calibrate, sawb_quantize, twn_quantize,
                         uniform_quantize)
from .layers import Network, QuantizedLayer, Sgd, export_hard, load_hard_model, save_hard_model
from .data import Dataset, FormatError, gen_synthetic, load_csv, load_idx
from .config import ConfigError, ExperimentConfig, parse_config, serialize_config
from .train import (MetricsRecord, TrainAbort, TrainPlan, compare_runs, evaluate,
                    run_experiment, train)

__version__ = "0.1.0"

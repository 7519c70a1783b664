"""Hybrid self-attention/GRU translation engine with a decoding-latency profiler.

The package pairs a multi-head self-attention encoder with a single-layer GRU
decoder (plus a full Transformer as teacher/baseline), trains with MLE followed
by knowledge-distillation fine-tuning, decodes with length-penalized beam
search, and ships a per-submodule wall-clock profiler for decode runs.
"""

from .autodiff import NonFiniteError, ShapeError, Tape, Tensor, backward, make_rng
from .data import (CheckpointChecksumError, CheckpointError, CheckpointTruncatedError,
                   CheckpointVersionError, DataError, Vocabulary, build_vocab,
                   decode_line, encode_line, load_checkpoint, load_model,
                   make_synthetic_task, save_checkpoint, save_model)
from .inference import (BeamConfig, Hypothesis, beam_search, greedy_decode,
                        length_penalized_score, prepare_decoding)
from .model import (ConfigError, DecodeOptions, EncoderOutput, Model, ModelConfig,
                    init_params, parameter_count)
from .profiling import (TimingReport, Workload, ablate_optimizations,
                        compare_architectures, profile_decode, render_report,
                        report_to_csv)
from .tokens import BOS_ID, EOS_ID, PAD_ID, UNK_ID
from .training import (Adam, EpochStats, KDConfig, TrainConfig, TrainingDiverged,
                       distill_corpus, greedy_token_accuracy, kd_loss, mle_loss,
                       teacher_forced_accuracy, train, two_stage_pipeline)

__version__ = "0.1.0"

"""Multi-domain anatomical landmark detection with a domain-adaptive transformer.

Built on a small reverse-mode autodiff engine over numpy (:mod:`datr.numerics`).
"""

from .attention import TransformerBlock, WindowAttention, msa, shift_mask, window_partition, window_reverse
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .datasets import DatasetManifest, Sample, gen_synthetic, load_dataset, load_root, save_dataset
from .decoder import DAC, Decoder, Guidance, dac
from .encoder import Encoder, EncoderConfig, encode
from .metrics import EvalReport, evaluate_domain, mre, radial_errors, sdr
from .model import (DATR, PRESETS, DomainSpec, HeatmapStack, LandmarkSet, ModelConfig,
                    decode_landmarks, gaussian_target, gaussian_targets)
from .numerics import Tensor, backward, grad_check, no_grad, precision
from .trainer import TrainConfig, Trainer, evaluate, train, transfer

__version__ = "0.1.0"

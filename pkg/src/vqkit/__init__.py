"""Multi-codebook vector quantization toolkit with a small trainable tokenizer.

The package splits into a quantization core (codebooks, VQ/MCQ/RQ, k-means
fitting, EMA maintenance), a minimal reverse-mode autodiff tape, a switchable
patch tokenizer with a class-embedding contrastive tower, a deterministic
trainer with binary checkpoints, and evaluation/benchmark helpers. See the
demos/ directory for narrated walkthroughs of each capability.
"""

from .autodiff import Tape, Tensor, straight_through
from .quantize import (
    Codebook,
    CodebookStats,
    MultiCodebookQuantizer,
    QuantizedToken,
    ResidualQuantizer,
    ema_update,
    fit_kmeans,
    fit_mcq,
    fit_rq,
    lookup,
    quantize_mcq,
    quantize_rq,
    revive_dead_codes,
    stats,
    vocab_bits,
)
from .losses import LossReport, LossWeights, contrastive_loss, recon_loss, total_loss, vq_loss
from .model import (
    AttentionProjection,
    ModelConfig,
    QuantizerConfig,
    TokenizerModel,
    attention_project_down,
    attention_project_up,
    contrastive_logits,
    decode,
    encode,
)
from .train import TrainConfig, TrainState, fit, load_checkpoint, save_checkpoint, train_step
from .evaluate import EvalReport, compare_quantizers, psnr, roadmap_ablation, zero_shot_accuracy

__version__ = "0.1.0"

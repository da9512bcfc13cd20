"""Desk-scale captioning laboratory.

Synthetic Zipfian caption corpus, a small recurrent caption scorer with
hand-derived gradients, CE / self-critical reward / joint training,
classifier-only rebalancing fine-tunes with a bias-product loss, decoding
strategies, and a deterministic evaluation suite.
"""

from .cider import CiderCorpusStats, build_cider_stats, cider_d
from .corpus import (
    BOS,
    EOS,
    UNK,
    Dataset,
    FreqHistogram,
    ImageRecord,
    Vocabulary,
    build_vocab,
    freq_histogram,
    tokenize,
)
from .decode import DecodeConfig, Decoded, decode_beam, decode_bp, decode_greedy, decode_nucleus
from .finetune import FinetuneConfig, FinetuneResult, SweepResult, finetune, sweep
from .losses import (
    FrozenReference,
    LossOutput,
    anti_focal_loss,
    bp_loss,
    bp_prob,
    ce_loss,
    focal_loss,
    grad_check,
    joint_loss,
    loss_surface,
)
from .metrics import MetricsReport, evaluate, oor_analysis, repetition_rate, rk_retrieval, vocab_stats
from .model import (
    ModelDims,
    ModelParams,
    TrainScope,
    init_params,
    load_checkpoint,
    save_checkpoint,
    score_step,
    softmax_temp,
    tau_normalize,
)
from .rl import RLContext, SampledSeq, sample_sequence, scst_step, train_ce, train_joint, train_rl
from .synth import DataBundle, SynthConfig, generate_synthetic_dataset

__version__ = "0.1.0"

"""Single-epoch, classifier-only fine-tuning of a trained checkpoint, plus
the hyperparameter sweep harness.

Both headline methods update only the classifier weight and bias for one
epoch over the training references: "sft" minimizes the plain CE loss, and
"wft" minimizes the bias-product loss against a frozen copy of the same
checkpoint.  The reweighting baselines "fl" and "afl" run the same protocol
with the focal and anti-focal losses.  Sweeps select hyperparameters by
validation retrieval R@1, ties toward the smaller learning rate and then the
smaller reference temperature.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cider import CiderCorpusStats, cider_d
from .corpus import Dataset, build_vocab
from .decode import DecodeConfig, decode_dataset
from .losses import FrozenReference, anti_focal_batch, bp_batch, ce_batch, focal_batch
from .metrics import rk_retrieval, vocab_stats
from .model import ModelParams, TrainScope, apply_sgd, stage_rng
from .rl import reference_pairs
from .synth import DataBundle

FINETUNE_METHODS = ("sft", "wft", "fl", "afl")


@dataclass
class FinetuneConfig:
    method: str = "sft"
    lr: float = 1e-3
    beta: float = 1.0
    beta_prime: float = 1.0       # wft only
    decode_variant: str = "plain"  # wft evaluation decoding: plain | bp
    epochs: int = 1
    batch_size: int = 10
    gamma: float = 1.0            # fl / afl
    alpha: float = 1.0            # afl

    def validate(self) -> None:
        if self.method not in FINETUNE_METHODS:
            raise ValueError(f"unknown fine-tune method {self.method!r}")
        if self.decode_variant not in ("plain", "bp"):
            raise ValueError(f"unknown decode variant {self.decode_variant!r}")
        if self.epochs != 1:
            raise ValueError("fine-tuning is single-epoch by definition")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class FinetuneResult:
    params: ModelParams
    frozen: FrozenReference | None
    log: list[dict] = field(default_factory=list)


def check_vocab_hash(checkpoint: ModelParams, data: DataBundle) -> None:
    rebuilt = build_vocab(data.train.all_references(), checkpoint.vocab.min_count)
    if rebuilt.hash_hex() != checkpoint.vocab.hash_hex():
        raise ValueError("checkpoint vocabulary does not match the dataset")


def finetune(checkpoint: ModelParams, data: DataBundle, config: FinetuneConfig,
             seed: int) -> FinetuneResult:
    """One classifier-only epoch over the training references.

    The data order is a single seeded shuffle.  The returned parameters share
    the checkpoint's embedding and encoder bytes; for "wft" the frozen copy
    of the checkpoint is returned alongside.
    """
    config.validate()
    check_vocab_hash(checkpoint, data)
    params = checkpoint.copy()
    frozen = None
    if config.method == "wft":
        frozen = FrozenReference(checkpoint, config.beta_prime)
    scope = TrainScope.CLASSIFIER_ONLY
    rng = stage_rng(seed, f"finetune:{config.method}")
    pairs = reference_pairs(data.train)
    log = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(pairs))
        total_loss = 0.0
        for start in range(0, len(pairs), config.batch_size):
            batch = [pairs[i] for i in order[start : start + config.batch_size]]
            feats = np.stack([rec.features for rec, _ in batch])
            captions = [ref for _, ref in batch]
            if config.method == "sft":
                out = ce_batch(params, feats, captions, config.beta, scope)
            elif config.method == "wft":
                out = bp_batch(params, frozen, feats, captions, config.beta, scope)
            elif config.method == "fl":
                out = focal_batch(params, feats, captions, config.beta, config.gamma, scope)
            else:
                out = anti_focal_batch(params, feats, captions, config.beta,
                                       config.gamma, config.alpha, scope)
            apply_sgd(params, out.grads, config.lr, scope)
            total_loss += out.loss * len(batch)
        log.append({"epoch": epoch, "mean_loss": total_loss / len(pairs)})
    return FinetuneResult(params=params, frozen=frozen, log=log)


@dataclass
class SweepResult:
    best: dict
    best_result: FinetuneResult
    rows: list[dict]


def sweep(checkpoint: ModelParams, data: DataBundle, stats: CiderCorpusStats,
          method: str, lr_grid, beta_prime_grid=None, seed: int = 0,
          decode_config: DecodeConfig | None = None,
          decode_variant: str = "plain", base_config: FinetuneConfig | None = None) -> SweepResult:
    """Train one model per grid point and pick the best validation R@1.

    Ties go to the smaller learning rate, then the smaller reference
    temperature.  For methods without a reference temperature the grid is
    learning rates only.
    """
    lr_grid = list(lr_grid)
    if not lr_grid:
        raise ValueError("empty learning-rate grid")
    uses_beta_prime = method == "wft"
    bp_grid = list(beta_prime_grid) if (uses_beta_prime and beta_prime_grid) else [None]
    if uses_beta_prime and not bp_grid:
        raise ValueError("empty beta-prime grid")
    decode_config = decode_config or DecodeConfig()
    base = base_config or FinetuneConfig()

    rows = []
    results = {}
    for lr in lr_grid:
        for beta_prime in bp_grid:
            config = FinetuneConfig(
                method=method, lr=lr, beta=base.beta,
                beta_prime=beta_prime if beta_prime is not None else base.beta_prime,
                decode_variant=decode_variant, epochs=base.epochs,
                batch_size=base.batch_size, gamma=base.gamma, alpha=base.alpha,
            )
            result = finetune(checkpoint, data, config, seed)
            if decode_variant == "bp" and result.frozen is not None:
                val_config = DecodeConfig(
                    method="bp", beam_size=decode_config.beam_size,
                    max_len=decode_config.max_len, beta=decode_config.beta,
                    bp_base=decode_config.method if decode_config.method in ("greedy", "beam") else "beam",
                )
                decoded = decode_dataset(result.params, data.val, val_config, frozen=result.frozen)
            else:
                decoded = decode_dataset(result.params, data.val, decode_config)
            captions = [dec.tokens for dec in decoded]
            r_at = rk_retrieval(captions, data.val, ks=(1,))
            unique_1, _, _ = vocab_stats(captions, checkpoint.vocab)
            vocab = checkpoint.vocab
            cider_mean = float(np.mean([
                cider_d(cap, [vocab.words(vocab.encode(ref)) for ref in rec.references], stats)
                for cap, rec in zip(captions, data.val.records)
            ]))
            row = {
                "method": method,
                "lr": lr,
                "beta_prime": beta_prime if beta_prime is not None else "",
                "r_at_1": r_at[1],
                "unique_1": unique_1,
                "cider": cider_mean,
            }
            rows.append(row)
            results[(lr, beta_prime)] = result

    def sort_key(row):
        bp = row["beta_prime"] if row["beta_prime"] != "" else 0.0
        return (-row["r_at_1"], row["lr"], bp)

    best = min(rows, key=sort_key)
    best_key = (best["lr"], best["beta_prime"] if best["beta_prime"] != "" else None)
    return SweepResult(best=best, best_result=results[best_key], rows=rows)

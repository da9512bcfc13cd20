"""Sequence sampling, the self-critical policy-gradient step, and the
training loops (CE pretraining, reward training, and their convex joint).

The policy-gradient step samples sequences from the current policy, scores
them with the consensus reward against the image's references, subtracts the
greedy-decode reward of the same image as baseline, and accumulates
advantage-weighted log-likelihood gradients.  One greedy baseline per image
applies to all of its samples.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .cider import CiderCorpusStats, build_cider_stats, cider_d
from .corpus import Dataset, ImageRecord, Vocabulary
from .decode import greedy_rollout_batch
from .losses import LossOutput, ce_batch, joint_loss
from .model import (
    ModelParams,
    TrainScope,
    apply_sgd,
    backward_sequences,
    forward_sequences,
    initial_hidden,
    log_softmax_temp,
    logits_from_hidden,
    recurrent_step,
)


def mapped_references(vocab: Vocabulary, records: Sequence[ImageRecord]) -> dict[int, list[list[str]]]:
    """References with out-of-vocabulary words replaced by <unk>, keyed by
    image id, so rewards operate in the same token space as the model."""
    return {
        rec.id: [vocab.words(vocab.encode(ref)) for ref in rec.references]
        for rec in records
    }


def corpus_stats_for(vocab: Vocabulary, train: Dataset) -> CiderCorpusStats:
    refs = mapped_references(vocab, train.records)
    return build_cider_stats([refs[rec.id] for rec in train.records])


@dataclass
class SampledSeq:
    """A policy sample: emitted tokens (without <eos>) plus the log-prob of
    every step taken, including the terminal <eos> step when one occurred."""

    tokens: list[int]
    logps: np.ndarray
    ended: bool

    def target_ids(self, vocab: Vocabulary) -> list[int]:
        return self.tokens + [vocab.eos_id] if self.ended else list(self.tokens)


def sample_sequences(params: ModelParams, feats: np.ndarray, beta: float,
                     rng: np.random.Generator, max_len: int | None = None) -> list[SampledSeq]:
    """Multinomial rollout for a batch of feature rows; deterministic in rng."""
    feats = np.atleast_2d(feats)
    n = feats.shape[0]
    if max_len is None:
        max_len = params.dims.max_len
    eos = params.vocab.eos_id
    h = recurrent_step(params, initial_hidden(params, feats),
                       np.full(n, params.vocab.bos_id, dtype=np.int64))
    done = np.zeros(n, dtype=bool)
    tokens: list[list[int]] = [[] for _ in range(n)]
    logps: list[list[float]] = [[] for _ in range(n)]
    ended = np.zeros(n, dtype=bool)
    for _ in range(max_len):
        lp = log_softmax_temp(logits_from_hidden(params, h), beta)
        probs = np.exp(lp)
        u = rng.random(n)
        draws = (np.cumsum(probs, axis=1) < u[:, None]).sum(axis=1)
        draws = np.minimum(draws, probs.shape[1] - 1)
        for i in range(n):
            if done[i]:
                continue
            token = int(draws[i])
            logps[i].append(float(lp[i, token]))
            if token == eos:
                done[i] = True
                ended[i] = True
            else:
                tokens[i].append(token)
        if done.all():
            break
        h = recurrent_step(params, h, np.where(done, eos, draws))
    return [
        SampledSeq(tokens=tokens[i], logps=np.array(logps[i]), ended=bool(ended[i]))
        for i in range(n)
    ]


def sample_sequence(params: ModelParams, image: ImageRecord, beta: float,
                    rng: np.random.Generator, max_len: int | None = None) -> SampledSeq:
    return sample_sequences(params, image.features[None, :], beta, rng, max_len)[0]


@dataclass
class RLContext:
    """Everything the policy-gradient step needs besides the parameters."""

    stats: CiderCorpusStats
    rng: np.random.Generator
    samples_per_image: int = 5
    beta: float = 1.0
    scope: TrainScope = TrainScope.ALL
    reward_fn: Callable | None = None
    refs_by_id: dict[int, list[list[str]]] | None = None


def _default_reward(vocab: Vocabulary, stats: CiderCorpusStats,
                    refs_by_id: dict[int, list[list[str]]] | None):
    def reward(token_ids: Sequence[int], image: ImageRecord) -> float:
        if refs_by_id is not None and image.id in refs_by_id:
            refs = refs_by_id[image.id]
        else:
            refs = [vocab.words(vocab.encode(ref)) for ref in image.references]
        return cider_d(vocab.words(token_ids), refs, stats)

    return reward


def scst_step(params: ModelParams, images: Sequence[ImageRecord], stats: CiderCorpusStats,
              rng: np.random.Generator, samples_per_image: int = 5, beta: float = 1.0,
              scope: TrainScope = TrainScope.ALL, reward_fn: Callable | None = None,
              refs_by_id: dict[int, list[list[str]]] | None = None) -> LossOutput:
    """Gradient estimate for one image batch.

    A sample whose reward equals its image's greedy baseline contributes
    exactly zero.  The returned loss is the negative mean sampled reward.
    """
    if samples_per_image < 1:
        raise ValueError("samples_per_image must be >= 1")
    vocab = params.vocab
    reward = reward_fn or _default_reward(vocab, stats, refs_by_id)
    feats = np.stack([img.features for img in images])
    max_len = params.dims.max_len

    greedy_seqs, _ = greedy_rollout_batch(params, feats, beta, max_len)
    baselines = np.array([reward(seq, img) for seq, img in zip(greedy_seqs, images)])

    rep_feats = np.repeat(feats, samples_per_image, axis=0)
    samples = sample_sequences(params, rep_feats, beta, rng, max_len)
    rewards = np.array([
        reward(samples[k].tokens, images[k // samples_per_image])
        for k in range(len(samples))
    ])
    advantages = rewards - np.repeat(baselines, samples_per_image)

    total = len(samples)
    t_max = max(len(s.logps) for s in samples)
    inputs = np.full((total, t_max), vocab.eos_id, dtype=np.int64)
    targets = np.full((total, t_max), vocab.eos_id, dtype=np.int64)
    lengths = np.empty(total, dtype=np.int64)
    for k, sample in enumerate(samples):
        tgt = sample.target_ids(vocab)
        inputs[k, : len(tgt)] = [vocab.bos_id] + tgt[:-1]
        targets[k, : len(tgt)] = tgt
        lengths[k] = len(tgt)

    fwd = forward_sequences(params, rep_feats, inputs, lengths)
    logp = log_softmax_temp(logits_from_hidden(params, fwd.h), beta)
    p = np.exp(logp)
    # d L / d z_t = (advantage * beta / N) * (p - onehot(w_t)) per sampled step
    coef = (advantages / total)[:, None] * fwd.mask * beta
    d_logits = coef[..., None] * p
    np.put_along_axis(
        d_logits, targets[..., None],
        np.take_along_axis(d_logits, targets[..., None], axis=-1) - coef[..., None],
        axis=-1,
    )
    grads = backward_sequences(params, fwd, d_logits, scope)
    return LossOutput(
        loss=float(-rewards.mean()),
        grads=grads,
        details={
            "mean_reward": float(rewards.mean()),
            "mean_greedy_reward": float(baselines.mean()),
        },
    )


def sequence_logprob_loss(params: ModelParams, image: ImageRecord, sample: SampledSeq,
                          beta: float = 1.0, scope: TrainScope = TrainScope.ALL) -> LossOutput:
    """Negative log-likelihood of a fixed sampled sequence (the differentiable
    factor of the policy gradient), exposed for the gradient oracle."""
    vocab = params.vocab
    tgt = sample.target_ids(vocab)
    if not tgt:
        raise ValueError("cannot score an empty sample")
    inputs = np.array([[vocab.bos_id] + tgt[:-1]], dtype=np.int64)
    targets = np.array([tgt], dtype=np.int64)
    lengths = np.array([len(tgt)])
    fwd = forward_sequences(params, image.features[None, :], inputs, lengths)
    logp = log_softmax_temp(logits_from_hidden(params, fwd.h), beta)
    lp_gold = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = float(-(lp_gold * fwd.mask).sum())
    p = np.exp(logp)
    d_logits = beta * fwd.mask[..., None] * p
    np.put_along_axis(
        d_logits, targets[..., None],
        np.take_along_axis(d_logits, targets[..., None], axis=-1) - beta * fwd.mask[..., None],
        axis=-1,
    )
    grads = backward_sequences(params, fwd, d_logits, scope)
    return LossOutput(loss=loss, grads=grads)


def reference_pairs(train: Dataset) -> list[tuple[ImageRecord, list[str]]]:
    return [(rec, ref) for rec in train.records for ref in rec.references]


def train_ce(params: ModelParams, train: Dataset, epochs: int, lr: float,
             rng: np.random.Generator, batch_size: int = 10, beta: float = 1.0,
             scope: TrainScope = TrainScope.ALL) -> tuple[ModelParams, list[dict]]:
    """Teacher-forced pretraining; returns a trained copy and per-epoch log."""
    params = params.copy()
    pairs = reference_pairs(train)
    log = []
    for epoch in range(epochs):
        order = rng.permutation(len(pairs))
        total_loss = 0.0
        for start in range(0, len(pairs), batch_size):
            batch = [pairs[i] for i in order[start : start + batch_size]]
            feats = np.stack([rec.features for rec, _ in batch])
            out = ce_batch(params, feats, [ref for _, ref in batch], beta, scope)
            apply_sgd(params, out.grads, lr, scope)
            total_loss += out.loss * len(batch)
        log.append({"epoch": epoch, "mean_loss": total_loss / len(pairs)})
    return params, log


def train_rl(params: ModelParams, train: Dataset, stats: CiderCorpusStats, epochs: int,
             lr: float, rng: np.random.Generator, batch_size: int = 10,
             samples_per_image: int = 5, beta: float = 1.0,
             scope: TrainScope = TrainScope.ALL) -> tuple[ModelParams, list[dict]]:
    """Self-critical reward training starting from a pretrained policy."""
    params = params.copy()
    refs_by_id = mapped_references(params.vocab, train.records)
    log = []
    for epoch in range(epochs):
        order = rng.permutation(len(train.records))
        reward_sum = 0.0
        greedy_sum = 0.0
        n_batches = 0
        for start in range(0, len(order), batch_size):
            images = [train.records[i] for i in order[start : start + batch_size]]
            out = scst_step(params, images, stats, rng, samples_per_image, beta,
                            scope, refs_by_id=refs_by_id)
            apply_sgd(params, out.grads, lr, scope)
            reward_sum += out.details["mean_reward"]
            greedy_sum += out.details["mean_greedy_reward"]
            n_batches += 1
        log.append({
            "epoch": epoch,
            "mean_reward": reward_sum / n_batches,
            "mean_greedy_reward": greedy_sum / n_batches,
        })
    return params, log


def train_joint(params: ModelParams, train: Dataset, stats: CiderCorpusStats, epochs: int,
                lr: float, lam: float, rng: np.random.Generator, batch_size: int = 10,
                samples_per_image: int = 5, beta: float = 1.0,
                scope: TrainScope = TrainScope.ALL) -> tuple[ModelParams, list[dict]]:
    """Optimize lam * reward loss + (1 - lam) * CE over reference pairs."""
    params = params.copy()
    refs_by_id = mapped_references(params.vocab, train.records)
    pairs = reference_pairs(train)
    ctx = RLContext(stats=stats, rng=rng, samples_per_image=samples_per_image,
                    beta=beta, scope=scope, refs_by_id=refs_by_id)
    log = []
    for epoch in range(epochs):
        order = rng.permutation(len(pairs))
        total_loss = 0.0
        for start in range(0, len(pairs), batch_size):
            batch = [pairs[i] for i in order[start : start + batch_size]]
            out = joint_loss(params, batch, lam, ctx)
            apply_sgd(params, out.grads, lr, scope)
            total_loss += out.loss * len(batch)
        log.append({"epoch": epoch, "mean_loss": total_loss / len(pairs)})
    return params, log

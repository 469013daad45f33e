"""Behavior modality pretraining: skip-gram over item co-occurrence.

Item pairs are emitted when two items sit within a positional window of each
other in one user's sequence and their timestamps differ by at most
``max_gap_seconds``. Training is plain SGNS with a unigram^0.75 noise
distribution, run sequentially for determinism.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import EmbeddingTable, InteractionLog
from .errors import EmptyPairs, InvalidSpec, NonFiniteLoss


@dataclass(frozen=True)
class CooccurrencePair:
    center: str
    context: str


@dataclass(frozen=True)
class SkipGramConfig:
    dim: int = 64
    window: int = 2
    max_gap_seconds: int = 60
    negatives_per_pair: int = 5
    epochs: int = 3
    learning_rate: float = 0.025
    seed: int = 0

    def validate(self) -> None:
        if self.dim < 2:
            raise InvalidSpec("skip-gram dim must be >= 2")
        if self.window < 1:
            raise InvalidSpec("window must be >= 1")
        if self.max_gap_seconds <= 0:
            raise InvalidSpec("max_gap_seconds must be positive")


def build_cooccurrence_pairs(
    log: InteractionLog, config: SkipGramConfig
) -> list[CooccurrencePair]:
    """Emit (i, j) and (j, i) for in-window, in-gap positions of each user sequence."""
    config.validate()
    pairs: list[CooccurrencePair] = []
    for user in sorted(log.user_sequences):
        seq = log.user_sequences[user]
        for a in range(len(seq)):
            for b in range(a + 1, min(a + config.window + 1, len(seq))):
                if seq[b].timestamp - seq[a].timestamp > config.max_gap_seconds:
                    continue
                if seq[a].item_id == seq[b].item_id:
                    continue
                pairs.append(CooccurrencePair(seq[a].item_id, seq[b].item_id))
                pairs.append(CooccurrencePair(seq[b].item_id, seq[a].item_id))
    return pairs


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(x, -30.0, 30.0)))


def train_item2vec(
    pairs: list[CooccurrencePair],
    vocabulary: list[str],
    config: SkipGramConfig,
) -> EmbeddingTable:
    """SGNS over the pair stream; returns the center-vector table.

    Every vocabulary item gets a row; items absent from all pairs keep their
    random initialization.
    """
    config.validate()
    if not pairs:
        raise EmptyPairs("no co-occurrence pairs to train on")
    index = {item: i for i, item in enumerate(vocabulary)}
    for p in pairs:
        if p.center not in index or p.context not in index:
            raise InvalidSpec(f"pair item outside vocabulary: {p}")
    rng = np.random.default_rng(config.seed)
    vsize = len(vocabulary)
    in_vecs = (rng.random((vsize, config.dim)) - 0.5) / config.dim
    out_vecs = np.zeros((vsize, config.dim))

    counts = np.zeros(vsize)
    centers = np.empty(len(pairs), dtype=np.int64)
    contexts = np.empty(len(pairs), dtype=np.int64)
    for n, p in enumerate(pairs):
        centers[n] = index[p.center]
        contexts[n] = index[p.context]
        counts[centers[n]] += 1
    noise = counts**0.75
    if noise.sum() == 0:
        raise EmptyPairs("degenerate noise distribution")
    noise /= noise.sum()

    lr = config.learning_rate
    for _epoch in range(config.epochs):
        negatives = rng.choice(vsize, size=(len(pairs), config.negatives_per_pair), p=noise)
        epoch_loss = 0.0
        for n in range(len(pairs)):
            c, o = centers[n], contexts[n]
            v_c = in_vecs[c]
            targets = np.concatenate(([o], negatives[n]))
            labels = np.zeros(len(targets))
            labels[0] = 1.0
            outs = out_vecs[targets]
            scores = _sigmoid(outs @ v_c)
            epoch_loss -= float(
                np.log(np.clip(scores[0], 1e-10, 1.0))
                + np.log(np.clip(1.0 - scores[1:], 1e-10, 1.0)).sum()
            )
            err = scores - labels  # dL/d(logit)
            grad_c = err @ outs
            out_vecs[targets] -= lr * err[:, None] * v_c[None, :]
            in_vecs[c] -= lr * grad_c
        if not np.isfinite(epoch_loss):
            raise NonFiniteLoss("non-finite skip-gram epoch loss")
    return EmbeddingTable(list(vocabulary), in_vecs, "behavior")

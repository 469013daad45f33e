"""Two-tower retrieval model trained with InfoNCE over sampled negatives.

The user tower mean-pools the behavior sequence's id embeddings, concatenates
a profile embedding and applies a two-layer MLP; the item tower applies a
two-layer MLP to the item id embedding. Negatives per positive combine the
example's own draw (real + interpolated virtuals) with the batch-shared pool
of every example's real negatives.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import torch
from torch import nn

from .data import InteractionLog
from .edis import (
    InterpolationConfig,
    interpolate_hard,
    interpolate_simple_batched,
    virtual_count,
)
from .errors import DimMismatch, InvalidSpec, NonFiniteLoss, UnknownId
from .msac import SemanticIndex
from .sampler import (
    NegativeDraw,
    SamplerConfig,
    cluster_distribution,
    draw_negatives,
)


@dataclass(frozen=True)
class EbrConfig:
    tau: float = 0.05
    learning_rate: float = 2e-4
    epochs: int = 1
    batch_size: int = 64
    embed_dim: int = 32  # item/profile id embedding width
    hidden_dim: int = 64
    output_dim: int = 64  # d_k, shared by both towers
    max_seq_len: int = 10
    profile_buckets: int = 16
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    interpolation: InterpolationConfig = field(default_factory=InterpolationConfig)
    negative_mode: str = "esans"  # esans | uns | pns
    uniform_negatives: int = 10  # budget for uns/pns baselines
    use_simple_virtuals: bool = True
    use_hard_virtuals: bool = True
    use_hard_negatives: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.tau <= 0:
            raise InvalidSpec("tau must be positive")
        if self.negative_mode not in ("esans", "uns", "pns"):
            raise InvalidSpec(f"unknown negative_mode {self.negative_mode!r}")
        if min(self.embed_dim, self.hidden_dim, self.output_dim, self.batch_size) < 1:
            raise InvalidSpec("model dims and batch size must be positive")
        self.sampler.validate()
        self.interpolation.validate()


@dataclass(frozen=True)
class UserFeatures:
    sequence: list[str]
    profile_bucket: int


class TwoTowerModel(nn.Module):
    def __init__(self, vocab_size: int, profile_buckets: int, config: EbrConfig):
        super().__init__()
        d_e, hid, d_k = config.embed_dim, config.hidden_dim, config.output_dim
        kw = {"dtype": torch.float64}
        self.item_embedding = nn.Embedding(vocab_size, d_e, **kw)
        self.profile_embedding = nn.Embedding(profile_buckets, d_e, **kw)
        self.item_mlp = nn.Sequential(
            nn.Linear(d_e, hid, **kw), nn.ReLU(), nn.Linear(hid, d_k, **kw)
        )
        self.user_mlp = nn.Sequential(
            nn.Linear(2 * d_e, hid, **kw), nn.ReLU(), nn.Linear(hid, d_k, **kw)
        )

    def encode_items(self, idx: torch.Tensor) -> torch.Tensor:
        return self.item_mlp(self.item_embedding(idx))

    def encode_users(
        self, seq_idx: torch.Tensor, seq_mask: torch.Tensor, profile_idx: torch.Tensor
    ) -> torch.Tensor:
        # seq_idx (N, L) padded with 0, seq_mask (N, L) 1 where valid
        emb = self.item_embedding(seq_idx) * seq_mask.unsqueeze(-1)
        lengths = seq_mask.sum(dim=1, keepdim=True).clamp(min=1.0)
        pooled = emb.sum(dim=1) / lengths  # empty history pools to zeros
        prof = self.profile_embedding(profile_idx)
        return self.user_mlp(torch.cat((pooled, prof), dim=1))


@dataclass
class EbrCheckpoint:
    model: TwoTowerModel
    item_vocab: list[str]
    user_buckets: dict[str, int]
    config: EbrConfig
    epoch_losses: list[float] = field(default_factory=list)

    def __post_init__(self):
        self._item_index = {item: i for i, item in enumerate(self.item_vocab)}

    def item_index(self, item_id: str) -> int:
        if item_id not in self._item_index:
            raise UnknownId(f"unknown item {item_id!r}")
        return self._item_index[item_id]

    def encode_all_items(self) -> np.ndarray:
        with torch.no_grad():
            idx = torch.arange(len(self.item_vocab))
            return self.model.encode_items(idx).numpy()


def encode_item(item_id: str, checkpoint: EbrCheckpoint) -> np.ndarray:
    idx = torch.tensor([checkpoint.item_index(item_id)])
    with torch.no_grad():
        return checkpoint.model.encode_items(idx)[0].numpy()


def encode_user(features: UserFeatures, checkpoint: EbrCheckpoint) -> np.ndarray:
    cap = checkpoint.config.max_seq_len
    seq = [checkpoint.item_index(i) for i in features.sequence[-cap:]]
    if not 0 <= features.profile_bucket < checkpoint.config.profile_buckets:
        raise UnknownId(f"profile bucket {features.profile_bucket} out of range")
    length = max(len(seq), 1)
    seq_idx = torch.zeros((1, length), dtype=torch.int64)
    seq_mask = torch.zeros((1, length), dtype=torch.float64)
    for j, s in enumerate(seq):
        seq_idx[0, j] = s
        seq_mask[0, j] = 1.0
    with torch.no_grad():
        return checkpoint.model.encode_users(
            seq_idx, seq_mask, torch.tensor([features.profile_bucket])
        )[0].numpy()


def score(u, v) -> float:
    """Inner-product relevance of a user/item embedding pair."""
    ua, va = np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64)
    if ua.shape != va.shape:
        raise DimMismatch(f"shapes differ: {ua.shape} vs {va.shape}")
    return float(ua @ va)


def infonce_loss(
    user_embs: torch.Tensor,
    positive_embs: torch.Tensor,
    negatives: list[torch.Tensor],
    tau: float,
) -> torch.Tensor:
    """Softmax contrastive loss with per-example negative sets.

    ``negatives[i]`` holds the (N_s_i, d) negative embeddings for example i.
    Stabilized via logsumexp.
    """
    if tau <= 0:
        raise InvalidSpec("tau must be positive")
    if user_embs.shape != positive_embs.shape:
        raise DimMismatch("user and positive embedding shapes differ")
    losses = []
    for i in range(user_embs.shape[0]):
        u = user_embs[i]
        pos = (u @ positive_embs[i]) / tau
        neg = (negatives[i] @ u) / tau
        losses.append(torch.logsumexp(torch.cat((pos.reshape(1), neg)), dim=0) - pos)
    loss = torch.stack(losses).mean()
    if not torch.isfinite(loss):
        raise NonFiniteLoss("InfoNCE loss is non-finite")
    return loss


@dataclass(frozen=True)
class TrainExample:
    user_id: str
    history: tuple[str, ...]
    positive: str


def build_examples(log: InteractionLog, max_seq_len: int) -> list[TrainExample]:
    examples = []
    for user in sorted(log.user_sequences):
        seq = [it.item_id for it in log.user_sequences[user]]
        for t in range(len(seq)):
            examples.append(TrainExample(user, tuple(seq[max(0, t - max_seq_len) : t]), seq[t]))
    return examples


def assign_user_buckets(log: InteractionLog, buckets: int) -> dict[str, int]:
    return {u: i % buckets for i, u in enumerate(sorted(log.user_sequences))}


def popularity_counts(log: InteractionLog, vocab: list[str]) -> np.ndarray:
    pos = {item: i for i, item in enumerate(vocab)}
    counts = np.zeros(len(vocab))
    for it in log.interactions:
        counts[pos[it.item_id]] += 1
    return counts


class _Trainer:
    """Single training run; holds per-run state (rng, towers, optimizer)."""

    def __init__(
        self,
        log: InteractionLog,
        index: SemanticIndex | None,
        config: EbrConfig,
    ):
        config.validate()
        self.config = config
        self.log = log
        self.index = index
        if index is not None:
            self.vocab = list(index.item_order)
        else:
            self.vocab = sorted({it.item_id for it in log.interactions})
        self.item_pos = {item: i for i, item in enumerate(self.vocab)}
        missing = [i for i in log.items if i not in self.item_pos]
        if missing:
            raise InvalidSpec(f"index does not cover {len(missing)} log items")
        if config.negative_mode == "esans" and index is None:
            raise InvalidSpec("esans mode requires a semantic index")
        self.buckets = assign_user_buckets(log, config.profile_buckets)
        self.rng = np.random.default_rng(config.seed)
        torch.manual_seed(config.seed)
        self.model = TwoTowerModel(len(self.vocab), config.profile_buckets, config)
        self.opt = torch.optim.Adam(self.model.parameters(), lr=config.learning_rate)
        self.pns_probs: np.ndarray | None = None
        if config.negative_mode == "pns":
            counts = popularity_counts(log, self.vocab)
            weighted = counts**0.75
            if weighted.sum() == 0:
                raise InvalidSpec("all-zero popularity")
            self.pns_probs = weighted / weighted.sum()
        sampler = config.sampler
        if not config.use_hard_negatives:
            sampler = replace(sampler, hard_per_positive=0)
        self.sampler_config = sampler
        self._history_cache: dict[TrainExample, np.ndarray] = {}

    def _draw_batch(self, positives: list[str]) -> list[NegativeDraw]:
        """Per-batch negative draws; the cluster picks for the whole batch
        come from one vectorized Gumbel-top-k draw (same distribution as
        sequential weighted sampling without replacement)."""
        if self.config.negative_mode != "esans":
            return [self._draw(p) for p in positives]
        index = self.index
        cfg = self.sampler_config
        probs = np.stack([
            cluster_distribution(
                index, index.cluster_of(p)[0], cfg.gamma, cfg.epsilon_d
            )
            for p in positives
        ])
        gumbel = -np.log(-np.log(self.rng.random(probs.shape)))
        with np.errstate(divide="ignore"):
            keys = np.where(probs > 0, np.log(probs) + gumbel, -np.inf)
        order = np.argsort(-keys, axis=1)

        # member picks for every (example, cluster) row at once: one random
        # matrix per batch, padded columns pushed past the valid range so a
        # row-wise argsort yields a uniform distinct subset per pool
        rows: list[tuple[int, int]] = []  # (example, cluster)
        for b in range(len(positives)):
            n_clusters = min(cfg.clusters_per_positive, int(np.count_nonzero(probs[b])))
            rows.extend((b, int(c)) for c in order[b, :n_clusters])
        hard_pools: list[list[str]] = []
        for positive in positives:
            cp, cs = index.cluster_of(positive)
            hard_pools.append(index.hard_pool(cp, cs) if cfg.hard_per_positive else [])

        def subset_rows(sizes: np.ndarray, takes: np.ndarray) -> list[np.ndarray]:
            if sizes.size == 0 or sizes.max() == 0:
                return [np.empty(0, dtype=np.int64) for _ in sizes]
            noise = self.rng.random((sizes.size, int(sizes.max())))
            noise[np.arange(noise.shape[1])[None, :] >= sizes[:, None]] = 2.0
            ranked = np.argsort(noise, axis=1)
            return [ranked[i, : takes[i]] for i in range(sizes.size)]

        member_sizes = np.asarray([len(index.members[c]) for _, c in rows], dtype=np.int64)
        member_takes = np.minimum(cfg.samples_per_cluster, member_sizes)
        member_picks = subset_rows(member_sizes, member_takes)
        hard_sizes = np.asarray([len(p) for p in hard_pools], dtype=np.int64)
        hard_takes = np.minimum(cfg.hard_per_positive, hard_sizes)
        hard_picks = subset_rows(hard_sizes, hard_takes)

        groups_of: list[list[tuple[int, list[str]]]] = [[] for _ in positives]
        for (b, c), picks in zip(rows, member_picks):
            pool = index.members[c]
            groups_of[b].append((c, [pool[i] for i in picks]))
        return [
            NegativeDraw(
                positive=positive,
                simple=groups_of[b],
                hard=[hard_pools[b][i] for i in hard_picks[b]],
            )
            for b, positive in enumerate(positives)
        ]

    def _draw(self, positive: str) -> NegativeDraw:
        cfg = self.config
        if cfg.negative_mode == "esans":
            return draw_negatives(self.index, positive, self.sampler_config, self.rng)
        n = cfg.uniform_negatives
        pos_idx = self.item_pos[positive]
        if cfg.negative_mode == "uns":
            need = min(n, len(self.vocab) - 1)
            picks: list[int] = []
            seen: set[int] = set()
            while len(picks) < need:
                # oversample a little so one vectorized draw usually suffices
                for cand in self.rng.integers(0, len(self.vocab), size=need - len(picks) + 4):
                    ci = int(cand)
                    if ci != pos_idx and ci not in seen:
                        seen.add(ci)
                        picks.append(ci)
                        if len(picks) == need:
                            break
        else:  # pns
            probs = self.pns_probs.copy()
            probs[pos_idx] = 0.0
            nz = int(np.count_nonzero(probs))
            probs /= probs.sum()
            picks = list(self.rng.choice(len(self.vocab), size=min(n, nz), replace=False, p=probs))
        items = [self.vocab[i] for i in picks]
        return NegativeDraw(positive=positive, simple=[(-1, items)], hard=[])

    def _history_rows(self, ex: TrainExample) -> np.ndarray:
        rows = self._history_cache.get(ex)
        if rows is None:
            hist = ex.history[-self.config.max_seq_len:]
            rows = np.array([self.item_pos[item] for item in hist], dtype=np.int64)
            self._history_cache[ex] = rows
        return rows

    def _encode_batch_users(self, batch: list[TrainExample]) -> torch.Tensor:
        rows = [self._history_rows(ex) for ex in batch]
        length = max(max((r.size for r in rows), default=1), 1)
        seq_idx = np.zeros((len(batch), length), dtype=np.int64)
        seq_mask = np.zeros((len(batch), length), dtype=np.float64)
        prof = np.empty(len(batch), dtype=np.int64)
        for i, (ex, r) in enumerate(zip(batch, rows)):
            seq_idx[i, : r.size] = r
            seq_mask[i, : r.size] = 1.0
            prof[i] = self.buckets[ex.user_id]
        return self.model.encode_users(
            torch.from_numpy(seq_idx), torch.from_numpy(seq_mask), torch.from_numpy(prof)
        )

    def _expected_own_count(self, draw: NegativeDraw, virt_simple: int, virt_hard: int) -> int:
        real = sum(len(g) for _, g in draw.simple) + len(draw.hard)
        expect_virtual = 0
        if self.config.negative_mode == "esans":
            if self.config.use_simple_virtuals:
                expect_virtual += sum(
                    virtual_count(len(g)) for _, g in draw.simple if len(g) >= 2
                )
            if self.config.use_hard_virtuals:
                expect_virtual += len(draw.hard)
        assert virt_simple + virt_hard == expect_virtual, "virtual count mismatch"
        return real + expect_virtual

    def _batch_loss(self, batch: list[TrainExample]) -> torch.Tensor:
        cfg = self.config
        draws = self._draw_batch([ex.positive for ex in batch])
        unique: dict[str, int] = {}
        for ex, draw in zip(batch, draws):
            for item in [ex.positive, *draw.all_items()]:
                unique.setdefault(item, len(unique))
        item_rows = torch.tensor(
            [self.item_pos[item] for item in unique], dtype=torch.int64
        )
        item_embs = self.model.encode_items(item_rows)
        user_embs = self._encode_batch_users(batch)
        pos_embs = torch.stack([item_embs[unique[ex.positive]] for ex in batch])

        # batch-shared pool of real negatives
        pool_local: list[int] = []
        for draw in draws:
            for item in draw.all_items():
                pool_local.append(unique[item])
        pool_idx = np.asarray(pool_local, dtype=np.int64)
        pool_embs = item_embs[torch.from_numpy(pool_idx)]

        tau = cfg.tau
        pos_scores = (user_embs * pos_embs).sum(dim=1) / tau

        # virtual-negative scores gathered flat (score, owning example), then
        # scattered into one padded matrix; keeps the autograd graph to a
        # handful of ops per batch regardless of batch size
        flat_scores: list[torch.Tensor] = []
        flat_owner: list[np.ndarray] = []
        simple_counts = [0] * len(batch)
        if cfg.negative_mode == "esans" and cfg.use_simple_virtuals:
            # batch every same-size simple-negative group into one interpolation
            by_size: dict[int, list[tuple[int, list[str]]]] = {}
            for i, draw in enumerate(draws):
                for _, group in draw.simple:
                    if len(group) >= 2:
                        by_size.setdefault(len(group), []).append((i, group))
            for size in sorted(by_size):
                entries = by_size[size]
                owners = np.asarray([i for i, _ in entries], dtype=np.int64)
                rows = torch.tensor([[unique[g] for g in group] for _, group in entries])
                virtuals = interpolate_simple_batched(
                    item_embs[rows], cfg.interpolation.eta, self.rng
                )
                scores = torch.bmm(
                    virtuals, user_embs[torch.from_numpy(owners)].unsqueeze(2)
                ).squeeze(2)
                per_group = scores.shape[1]
                flat_scores.append(scores.reshape(-1))
                flat_owner.append(np.repeat(owners, per_group))
                for i in owners:
                    simple_counts[int(i)] += per_group
        hard_counts = [0] * len(batch)
        if cfg.negative_mode == "esans" and cfg.use_hard_virtuals:
            hard_owner: list[int] = []
            hard_rows: list[int] = []
            for i, draw in enumerate(draws):
                for item in draw.hard:
                    hard_owner.append(i)
                    hard_rows.append(unique[item])
                hard_counts[i] = len(draw.hard)
            if hard_rows:
                owners = np.asarray(hard_owner, dtype=np.int64)
                own_t = torch.from_numpy(owners)
                hard_embs = item_embs[torch.tensor(hard_rows, dtype=torch.int64)]
                lam = cfg.interpolation.lam
                virt = lam * pos_embs[own_t] + (1.0 - lam) * hard_embs
                flat_scores.append((virt * user_embs[own_t]).sum(dim=1))
                flat_owner.append(owners)
        for i, draw in enumerate(draws):
            self._expected_own_count(draw, simple_counts[i], hard_counts[i])

        # one softmax per example over [positive | shared pool | own virtuals],
        # with the example's own positive masked out of the pool
        pool_scores = (user_embs @ pool_embs.T) / tau
        pos_idx = np.asarray([unique[ex.positive] for ex in batch], dtype=np.int64)
        collide = torch.from_numpy(pool_idx[None, :] == pos_idx[:, None])
        pool_scores = pool_scores.masked_fill(collide, float("-inf"))
        score_blocks = [pos_scores.unsqueeze(1), pool_scores]
        if flat_scores:
            owner = np.concatenate(flat_owner)
            counts = np.bincount(owner, minlength=len(batch))
            # column of each flat entry = its running index within its owner
            order = np.argsort(owner, kind="stable")
            starts = np.r_[0, np.cumsum(counts)[:-1]]
            within = np.arange(owner.size) - np.repeat(starts[counts > 0], counts[counts > 0])
            cols = np.empty_like(within)
            cols[order] = within
            virt_matrix = torch.full(
                (len(batch), int(counts.max())), float("-inf"), dtype=user_embs.dtype
            )
            virt_matrix[torch.from_numpy(owner), torch.from_numpy(cols)] = (
                torch.cat(flat_scores) / tau
            )
            score_blocks.append(virt_matrix)
        all_scores = torch.cat(score_blocks, dim=1)
        loss = (torch.logsumexp(all_scores, dim=1) - pos_scores).mean()
        if not torch.isfinite(loss):
            raise NonFiniteLoss("InfoNCE loss is non-finite")
        return loss

    def run(self) -> EbrCheckpoint:
        checkpoint = EbrCheckpoint(
            self.model, self.vocab, self.buckets, self.config
        )
        examples = build_examples(self.log, self.config.max_seq_len)
        for _epoch in range(self.config.epochs):
            order = self.rng.permutation(len(examples))
            epoch_loss, batches = 0.0, 0
            for start in range(0, len(examples), self.config.batch_size):
                batch = [examples[i] for i in order[start : start + self.config.batch_size]]
                loss = self._batch_loss(batch)
                self.opt.zero_grad()
                loss.backward()
                self.opt.step()
                epoch_loss += float(loss.detach())
                batches += 1
            checkpoint.epoch_losses.append(epoch_loss / max(batches, 1))
        return checkpoint


def train_ebr(
    log: InteractionLog, index: SemanticIndex | None, config: EbrConfig
) -> EbrCheckpoint:
    """Train two towers on the interaction log with the configured negative
    strategy; deterministic in ``config.seed``."""
    return _Trainer(log, index, config).run()

"""Interaction logs, embedding tables, on-disk formats, synthetic data.

On-disk formats:
  * interactions: UTF-8 TSV ``user_id<TAB>item_id<TAB>timestamp``, no header
  * embeddings:   magic ``EMB1``, little-endian u32 count, u32 dim, then
    ``count*dim`` little-endian float32 row-major, with a sidecar manifest
    at ``<path>.ids`` holding one item_id per line in row order
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    EmptyDataset,
    InvalidSpec,
    MagicMismatch,
    ManifestMismatch,
    ParseError,
    TruncatedFile,
)

EMB_MAGIC = b"EMB1"

Modality = str  # "image" | "text" | "behavior" | "learned"


@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: str
    timestamp: int


@dataclass
class InteractionLog:
    interactions: list[Interaction]
    user_sequences: dict[str, list[Interaction]] = field(default_factory=dict)
    items: list[str] = field(default_factory=list)

    @staticmethod
    def from_interactions(interactions: list[Interaction]) -> "InteractionLog":
        seqs: dict[str, list[Interaction]] = {}
        vocab: dict[str, None] = {}
        for it in interactions:
            seqs.setdefault(it.user_id, []).append(it)
            vocab.setdefault(it.item_id)
        for u in seqs:
            seqs[u].sort(key=lambda x: (x.timestamp, x.item_id))
        return InteractionLog(interactions, seqs, sorted(vocab))

    def num_users(self) -> int:
        return len(self.user_sequences)


@dataclass
class EmbeddingTable:
    item_order: list[str]
    matrix: np.ndarray  # (num_items, dim), float64 in memory
    modality: Modality

    def __post_init__(self):
        if self.matrix.shape[0] != len(self.item_order):
            raise InvalidSpec("row count differs from item_order length")
        if len(set(self.item_order)) != len(self.item_order):
            raise InvalidSpec("duplicate item_id in embedding table")
        if not np.all(np.isfinite(self.matrix)):
            raise InvalidSpec("embedding table contains non-finite entries")
        self._index = {item: i for i, item in enumerate(self.item_order)}

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[1])

    def row(self, item_id: str) -> np.ndarray:
        return self.matrix[self._index[item_id]]

    def index_of(self, item_id: str) -> int:
        return self._index[item_id]


@dataclass(frozen=True)
class SyntheticSpec:
    num_users: int
    num_items: int
    num_groups: int
    modal_dims: tuple[int, int, int] = (24, 24, 24)
    intra_group_noise: float = 0.1
    interactions_per_user: int = 10
    subgroups_per_group: int = 1  # fine structure inside each group
    subgroup_scale: float = 0.35  # subgroup offset norm relative to unit anchors
    seed: int = 0

    def validate(self) -> None:
        if self.num_groups > self.num_items:
            raise InvalidSpec("num_groups exceeds num_items")
        if min(self.modal_dims) < 2:
            raise InvalidSpec("modal dims must be >= 2")
        if self.intra_group_noise < 0:
            raise InvalidSpec("intra_group_noise must be >= 0")
        if min(self.num_users, self.num_items, self.num_groups, self.interactions_per_user) < 1:
            raise InvalidSpec("counts must be positive")
        if self.subgroups_per_group < 1 or self.subgroup_scale < 0:
            raise InvalidSpec("subgroup structure must be non-negative")


@dataclass
class SyntheticDataset:
    log: InteractionLog
    image: EmbeddingTable
    text: EmbeddingTable
    behavior: EmbeddingTable
    groups: dict[str, int]  # item_id -> planted group
    subgroups: dict[str, int] = field(default_factory=dict)  # item_id -> subgroup


def load_interactions(path: str | Path) -> InteractionLog:
    path = Path(path)
    interactions: list[Interaction] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(lineno, f"expected 3 tab-separated fields, got {len(parts)}")
            user_id, item_id, ts_raw = parts
            if not user_id or not item_id:
                raise ParseError(lineno, "empty user_id or item_id")
            try:
                ts = int(ts_raw)
            except ValueError:
                raise ParseError(lineno, f"non-integer timestamp {ts_raw!r}") from None
            if ts < 0:
                raise ParseError(lineno, "negative timestamp")
            interactions.append(Interaction(user_id, item_id, ts))
    if not interactions:
        raise EmptyDataset(f"{path} contains no interactions")
    return InteractionLog.from_interactions(interactions)


def write_interactions(log: InteractionLog, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for it in log.interactions:
            fh.write(f"{it.user_id}\t{it.item_id}\t{it.timestamp}\n")


def _manifest_path(path: Path) -> Path:
    return path.with_name(path.name + ".ids")


def write_embedding_table(table: EmbeddingTable, path: str | Path) -> None:
    path = Path(path)
    count, dim = table.matrix.shape
    payload = np.ascontiguousarray(table.matrix, dtype="<f4").tobytes()
    with path.open("wb") as fh:
        fh.write(EMB_MAGIC)
        fh.write(struct.pack("<II", count, dim))
        fh.write(payload)
    with _manifest_path(path).open("w", encoding="utf-8") as fh:
        for item in table.item_order:
            fh.write(item + "\n")


def load_embedding_table(path: str | Path, modality: Modality = "learned") -> EmbeddingTable:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != EMB_MAGIC:
        raise MagicMismatch(f"{path} does not start with {EMB_MAGIC!r}")
    if len(blob) < 12:
        raise TruncatedFile(f"{path} shorter than its header")
    count, dim = struct.unpack("<II", blob[4:12])
    expected = 12 + count * dim * 4
    if len(blob) < expected:
        raise TruncatedFile(f"{path}: expected {expected} bytes, found {len(blob)}")
    matrix = np.frombuffer(blob[12:expected], dtype="<f4").reshape(count, dim)
    ids = _manifest_path(path).read_text(encoding="utf-8").splitlines()
    if len(ids) != count:
        raise ManifestMismatch(f"{path}: manifest has {len(ids)} ids, header says {count}")
    return EmbeddingTable(ids, matrix.astype(np.float64), modality)


def generate_synthetic(spec: SyntheticSpec) -> SyntheticDataset:
    """Plant latent item groups across three modalities and sample user behavior.

    Group anchors are independent unit vectors per modality, so every modality
    carries the group signal through its own geometry. With
    ``subgroups_per_group > 1``, each group is further split by smaller offset
    vectors shared across groups, planting a two-level hierarchy. Users favor
    1-3 (group, subgroup) cells and draw 90% of their interactions from them.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    items = [f"i{idx:06d}" for idx in range(spec.num_items)]
    n_sub = spec.subgroups_per_group
    groups = {item: idx % spec.num_groups for idx, item in enumerate(items)}
    subgroups = {item: (idx // spec.num_groups) % n_sub for idx, item in enumerate(items)}
    group_arr = np.array([groups[i] for i in items])
    sub_arr = np.array([subgroups[i] for i in items])

    tables = {}
    for modality, dim in zip(("image", "text", "behavior"), spec.modal_dims):
        anchors = rng.normal(size=(spec.num_groups, dim))
        if dim >= spec.num_groups:
            # mutually orthogonal unit anchors: guaranteed group separation
            anchors, _ = np.linalg.qr(anchors.T)
            anchors = anchors.T[: spec.num_groups]
        else:
            anchors /= np.linalg.norm(anchors, axis=1, keepdims=True)
        matrix = anchors[group_arr]
        if n_sub > 1:
            offsets = rng.normal(size=(n_sub, dim))
            offsets /= np.linalg.norm(offsets, axis=1, keepdims=True)
            matrix = matrix + spec.subgroup_scale * offsets[sub_arr]
        matrix = matrix + rng.normal(size=(spec.num_items, dim)) * spec.intra_group_noise
        tables[modality] = EmbeddingTable(items, matrix, modality)

    cell_arr = group_arr * n_sub + sub_arr
    n_cells = spec.num_groups * n_sub
    members_by_cell = [np.flatnonzero(cell_arr == c) for c in range(n_cells)]
    populated = [c for c in range(n_cells) if len(members_by_cell[c])]
    interactions: list[Interaction] = []
    for u in range(spec.num_users):
        user_id = f"u{u:06d}"
        n_pref = int(rng.integers(1, 4))
        preferred = rng.choice(populated, size=min(n_pref, len(populated)), replace=False)
        ts = int(rng.integers(0, 1000))
        used: set[int] = set()
        for _ in range(spec.interactions_per_user):
            # each user touches distinct items so held-out items stay retrievable
            item_idx = -1
            for _attempt in range(20):
                if rng.random() < 0.9:
                    cell = int(preferred[rng.integers(0, len(preferred))])
                    pool = members_by_cell[cell]
                    candidate = int(pool[rng.integers(0, len(pool))])
                else:
                    candidate = int(rng.integers(0, spec.num_items))
                if candidate not in used:
                    item_idx = candidate
                    break
            if item_idx < 0:
                remaining = [i for i in range(spec.num_items) if i not in used]
                if not remaining:
                    break
                item_idx = int(remaining[rng.integers(0, len(remaining))])
            used.add(item_idx)
            interactions.append(Interaction(user_id, items[item_idx], ts))
            ts += int(rng.integers(5, 50))
    log = InteractionLog.from_interactions(interactions)
    return SyntheticDataset(
        log, tables["image"], tables["text"], tables["behavior"], groups, subgroups
    )


def split_train_eval(
    log: InteractionLog, holdout_per_user: int
) -> tuple[InteractionLog, dict[str, list[str]]]:
    """Leave-last-out split: the final ``holdout_per_user`` interactions per
    user (by timestamp) become eval ground truth; users with too few
    interactions stay in train and are skipped for eval."""
    if holdout_per_user < 1:
        raise InvalidSpec("holdout_per_user must be >= 1")
    train: list[Interaction] = []
    eval_pairs: dict[str, list[str]] = {}
    for user in sorted(log.user_sequences):
        seq = log.user_sequences[user]
        if len(seq) <= holdout_per_user:
            train.extend(seq)
            continue
        train.extend(seq[:-holdout_per_user])
        eval_pairs[user] = [it.item_id for it in seq[-holdout_per_user:]]
    return InteractionLog.from_interactions(train), eval_pairs

"""Recall@K evaluation, baseline samplers, and method comparison runs."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .data import EmbeddingTable, InteractionLog
from .errors import AllZeroPopularity, EmptyEval, InvalidSpec
from .model import EbrCheckpoint, EbrConfig, UserFeatures, encode_user, train_ebr
from .msac import MsacConfig, SemanticIndex, build_semantic_index, make_semantic_index, train_msac


@dataclass
class RecallReport:
    k_values: list[int]
    recalls: dict[int, float]
    user_count: int
    metadata: dict = field(default_factory=dict)


def recall_at_k(
    checkpoint: EbrCheckpoint,
    eval_pairs: dict[str, list[str]],
    train_log: InteractionLog,
    k_values: list[int] | None = None,
) -> RecallReport:
    """Brute-force top-K retrieval per user (train items excluded), recall
    averaged over users."""
    if not eval_pairs:
        raise EmptyEval("no evaluation pairs")
    ks = sorted(k_values or [50, 200])
    item_embs = checkpoint.encode_all_items()
    item_pos = {item: i for i, item in enumerate(checkpoint.item_vocab)}
    sums = {k: 0.0 for k in ks}
    counted = 0
    users = sorted(eval_pairs)
    for user in users:
        seq = [it.item_id for it in train_log.user_sequences.get(user, [])]
        bucket = checkpoint.user_buckets.get(
            user, 0
        )  # unseen users fall back to bucket 0
        u = encode_user(UserFeatures(seq, bucket), checkpoint)
        scores = item_embs @ u
        for item in seq:
            scores[item_pos[item]] = -np.inf
        order = np.argsort(-scores, kind="stable")
        truth = {item_pos[i] for i in eval_pairs[user] if i in item_pos}
        if not truth:
            continue
        counted += 1
        for k in ks:
            hits = len(truth.intersection(order[:k]))
            sums[k] += hits / len(truth)
    if counted == 0:
        raise EmptyEval("no eval user has in-vocabulary ground truth")
    return RecallReport(ks, {k: sums[k] / counted for k in ks}, counted)


def uns_sampler(
    universe: list[str], n: int, rng: np.random.Generator, positive: str | None = None
) -> list[str]:
    """Uniform draw without replacement, excluding the positive."""
    pool = [i for i in universe if i != positive]
    if n > len(pool):
        raise InvalidSpec(f"cannot draw {n} from {len(pool)} items")
    picks = rng.choice(len(pool), size=n, replace=False)
    return [pool[i] for i in picks]


def pns_sampler(
    universe: list[str],
    counts,
    n: int,
    rng: np.random.Generator,
    positive: str | None = None,
    exponent: float = 0.75,
) -> list[str]:
    """Popularity-proportional draw without replacement (count^exponent),
    excluding the positive."""
    weights = np.asarray(counts, dtype=np.float64) ** exponent
    if len(weights) != len(universe):
        raise InvalidSpec("counts must align with the universe")
    if positive is not None and positive in universe:
        weights = weights.copy()
        weights[universe.index(positive)] = 0.0
    if weights.sum() == 0:
        raise AllZeroPopularity("no positive popularity mass")
    take = min(n, int(np.count_nonzero(weights)))
    picks = rng.choice(len(universe), size=take, replace=False, p=weights / weights.sum())
    return [universe[i] for i in picks]


@dataclass(frozen=True)
class MethodConfig:
    name: str
    ebr: EbrConfig
    index_mode: str = "msac"  # msac | random | behavior_only | none


def ablation_methods(base: EbrConfig) -> list[MethodConfig]:
    """ESANS, the two baselines, and the ablations from the study design."""
    return [
        MethodConfig("esans", base, "msac"),
        MethodConfig("uns", replace(base, negative_mode="uns"), "none"),
        MethodConfig("pns", replace(base, negative_mode="pns"), "none"),
        MethodConfig("esans-no-msac", base, "random"),
        MethodConfig(
            "esans-no-edis",
            replace(base, use_simple_virtuals=False, use_hard_virtuals=False),
            "msac",
        ),
        MethodConfig("esans-no-simple-interp", replace(base, use_simple_virtuals=False), "msac"),
        MethodConfig("esans-no-hard-interp", replace(base, use_hard_virtuals=False), "msac"),
        MethodConfig("esans-behavior-only", base, "behavior_only"),
        MethodConfig(
            "esans-no-secondary",
            replace(base, use_hard_negatives=False, use_hard_virtuals=False),
            "msac",
        ),
    ]


def random_index(items: list[str], k_primary: int, k_secondary: int, seed: int) -> SemanticIndex:
    """Random cluster structure: the no-MSAC control."""
    rng = np.random.default_rng(seed)
    primary = rng.integers(0, k_primary, size=len(items))
    secondary = rng.integers(0, k_secondary, size=len(items))
    codewords = rng.normal(size=(k_primary, 8))
    return make_semantic_index(items, primary, secondary, codewords, k_secondary)


@dataclass
class ComparisonRow:
    method: str
    k: int
    recall: float
    ri_vs_uns: float


def compare_runs(
    train_log: InteractionLog,
    eval_pairs: dict[str, list[str]],
    image: EmbeddingTable,
    text: EmbeddingTable,
    behavior: EmbeddingTable,
    methods: list[MethodConfig],
    msac_config: MsacConfig,
    k_values: list[int] | None = None,
) -> list[ComparisonRow]:
    """Train every method on the same split with its own stated config and
    report Recall@K plus relative improvement over UNS."""
    ks = sorted(k_values or [50, 200])
    indexes: dict[str, SemanticIndex | None] = {}

    def index_for(mode: str, seed: int) -> SemanticIndex | None:
        key = f"{mode}:{seed}"
        if key not in indexes:
            if mode == "none":
                indexes[key] = None
            elif mode == "random":
                indexes[key] = random_index(
                    image.item_order, msac_config.k_primary, msac_config.k_secondary, seed
                )
            elif mode == "behavior_only":
                model = train_msac(behavior, behavior, behavior, replace(msac_config, seed=seed))
                indexes[key] = build_semantic_index(model, behavior, behavior, behavior)
            elif mode == "msac":
                model = train_msac(image, text, behavior, replace(msac_config, seed=seed))
                indexes[key] = build_semantic_index(model, image, text, behavior)
            else:
                raise InvalidSpec(f"unknown index mode {mode!r}")
        return indexes[key]

    reports: dict[str, RecallReport] = {}
    for method in methods:
        index = index_for(method.index_mode, method.ebr.seed)
        checkpoint = train_ebr(train_log, index, method.ebr)
        reports[method.name] = recall_at_k(checkpoint, eval_pairs, train_log, ks)

    rows: list[ComparisonRow] = []
    uns = reports.get("uns")
    for method in methods:
        rep = reports[method.name]
        for k in ks:
            base = uns.recalls[k] if uns else float("nan")
            ri = (rep.recalls[k] - base) / base if uns and base > 0 else float("nan")
            rows.append(ComparisonRow(method.name, k, rep.recalls[k], ri))
    return rows


def format_comparison(rows: list[ComparisonRow]) -> str:
    """TSV: method, K, recall, relative improvement vs UNS."""
    lines = ["method\tK\trecall\tri_vs_uns"]
    for r in rows:
        lines.append(f"{r.method}\t{r.k}\t{r.recall:.6f}\t{r.ri_vs_uns:.6f}")
    return "\n".join(lines) + "\n"

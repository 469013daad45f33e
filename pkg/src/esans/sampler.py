"""Semantic-aware negative sampling against a SemanticIndex.

Simple negatives come from other primary clusters, picked with probability
inversely proportional to (a power of) the centroid distance to the
positive's cluster. Hard negatives share the positive's primary cluster but
never its secondary cluster, which removes likely false negatives.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidSpec, NoEligibleClusters
from .msac import SemanticIndex


@dataclass(frozen=True)
class SamplerConfig:
    clusters_per_positive: int = 2  # m_c
    samples_per_cluster: int = 5  # m_o
    hard_per_positive: int = 5  # m_h
    gamma: float = 1.0
    epsilon_d: float = 1e-6
    seed: int = 0

    def validate(self) -> None:
        if self.clusters_per_positive < 1:
            raise InvalidSpec("clusters_per_positive must be >= 1")
        if self.samples_per_cluster < 2:
            raise InvalidSpec("samples_per_cluster must be >= 2 (interpolation needs anchors)")
        if self.hard_per_positive < 0:
            raise InvalidSpec("hard_per_positive must be >= 0")
        if self.epsilon_d <= 0:
            raise InvalidSpec("epsilon_d must be positive")


@dataclass
class NegativeDraw:
    positive: str
    simple: list[tuple[int, list[str]]] = field(default_factory=list)
    hard: list[str] = field(default_factory=list)

    def all_items(self) -> list[str]:
        out: list[str] = []
        for _, group in self.simple:
            out.extend(group)
        out.extend(self.hard)
        return out


def cluster_distribution(
    index: SemanticIndex,
    positive_cp: int,
    gamma: float,
    epsilon_d: float = 1e-6,
) -> np.ndarray:
    """Probability over primary clusters: inverse-distance^gamma, zero for the
    positive's own cluster and for empty clusters."""
    key = (positive_cp, gamma, epsilon_d)
    cached = index._dist_cache.get(key)
    if cached is not None:
        return cached
    sizes = index.cluster_sizes()
    eligible = (sizes > 0) & (np.arange(index.k_primary) != positive_cp)
    if not eligible.any():
        raise NoEligibleClusters(f"no candidate cluster besides {positive_cp}")
    d = np.maximum(index.distances[:, positive_cp], epsilon_d)
    q = np.where(eligible, 1.0 / d**gamma, 0.0)
    q /= q.sum()
    index._dist_cache[key] = q
    return q


def _subset_without_replacement(n: int, take: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform ``take``-subset of range(n), cheap when take << n."""
    if take * 4 >= n:
        return rng.choice(n, size=take, replace=False)
    picks: list[int] = []
    seen: set[int] = set()
    while len(picks) < take:
        for cand in rng.integers(0, n, size=take - len(picks) + 2):
            ci = int(cand)
            if ci not in seen:
                seen.add(ci)
                picks.append(ci)
                if len(picks) == take:
                    break
    return np.asarray(picks)


def sample_simple(
    index: SemanticIndex,
    positive: str,
    config: SamplerConfig,
    rng: np.random.Generator,
) -> list[tuple[int, list[str]]]:
    """Pick m_c distinct foreign clusters by the inverse-distance law, then up
    to m_o members uniformly without replacement from each."""
    cp, _ = index.cluster_of(positive)
    probs = cluster_distribution(index, cp, config.gamma, config.epsilon_d)
    n_eligible = int(np.count_nonzero(probs))
    n_clusters = min(config.clusters_per_positive, n_eligible)
    # Gumbel top-k == sequential weighted sampling without replacement,
    # in one vectorized draw
    gumbel = -np.log(-np.log(rng.random(index.k_primary)))
    with np.errstate(divide="ignore"):
        keys = np.where(probs > 0, np.log(probs) + gumbel, -np.inf)
    chosen = np.argsort(keys)[::-1][:n_clusters]
    groups: list[tuple[int, list[str]]] = []
    for c in chosen:
        pool = index.members[int(c)]
        take = min(config.samples_per_cluster, len(pool))
        picks = _subset_without_replacement(len(pool), take, rng)
        groups.append((int(c), [pool[i] for i in picks]))
    return groups


def sample_hard(
    index: SemanticIndex,
    positive: str,
    config: SamplerConfig,
    rng: np.random.Generator,
) -> list[str]:
    """Uniform draw from the positive's primary cluster, excluding the positive
    itself and everything in its secondary cluster (treated as false negatives)."""
    if config.hard_per_positive == 0:
        return []
    cp, cs = index.cluster_of(positive)
    # the pool excludes the whole (cp, cs) cell, and the positive is always a
    # member of its own cell, so the positive can never be drawn
    pool = index.hard_pool(cp, cs)
    if not pool:
        return []
    take = min(config.hard_per_positive, len(pool))
    picks = _subset_without_replacement(len(pool), take, rng)
    return [pool[i] for i in picks]


def draw_negatives(
    index: SemanticIndex,
    positive: str,
    config: SamplerConfig,
    rng: np.random.Generator,
) -> NegativeDraw:
    config.validate()
    return NegativeDraw(
        positive=positive,
        simple=sample_simple(index, positive, config, rng),
        hard=sample_hard(index, positive, config, rng),
    )

"""Multimodal semantic-aware clustering.

Three frozen modality tables are projected into a shared space with linear
maps trained by pairwise contrastive alignment, fused by averaging, and
quantized by a two-level (primary + residual-concat secondary) codebook.
The trained artifacts yield a SemanticIndex used by the negative sampler.

All learnable state lives in float64 torch tensors; assignments are argmin
lookups held fixed within an optimization step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .data import EmbeddingTable
from .errors import DimMismatch, InvalidSpec, ZeroNormVector
from .tensor import NORM_FLOOR, kmeans


@dataclass(frozen=True)
class MsacConfig:
    d_m: int = 512
    k_primary: int = 300
    k_secondary: int = 15
    beta_it: float = 2.0
    beta_ig: float = 2.0
    beta_gt: float = 2.0
    align_temperature: float = 0.1
    learning_rate: float = 2e-4
    batch_size: int = 512
    epochs: int = 5
    kmeans_restarts: int = 10
    seed: int = 0

    def validate(self) -> None:
        if self.d_m < 1 or self.k_primary < 2 or self.k_secondary < 2:
            raise InvalidSpec("d_m must be >= 1 and codebook sizes >= 2")
        if min(self.beta_it, self.beta_ig, self.beta_gt) <= 0:
            raise InvalidSpec("loss weights must be positive")
        if self.align_temperature <= 0 or self.learning_rate <= 0:
            raise InvalidSpec("temperature and learning rate must be positive")
        if self.batch_size < 2:
            raise InvalidSpec("batch_size must be >= 2 (contrastive loss needs negatives)")


@dataclass
class AlignmentParams:
    w_image: torch.Tensor  # (d_I, d_m)
    w_text: torch.Tensor  # (d_T, d_m)
    w_behavior: torch.Tensor  # (d_G, d_m)
    b_image: torch.Tensor
    b_text: torch.Tensor
    b_behavior: torch.Tensor

    def tensors(self) -> list[torch.Tensor]:
        return [
            self.w_image,
            self.w_text,
            self.w_behavior,
            self.b_image,
            self.b_text,
            self.b_behavior,
        ]


@dataclass
class Codebook:
    codewords: torch.Tensor  # (K, code_dim)
    level: str  # "primary" | "secondary"


@dataclass
class CascadedCodebooks:
    primary: Codebook
    secondary: Codebook


@dataclass
class MsacModel:
    params: AlignmentParams
    codebooks: CascadedCodebooks
    config: MsacConfig
    epoch_losses: list[float] = field(default_factory=list)


@dataclass
class SemanticIndex:
    item_order: list[str]
    primary: np.ndarray  # (N,) cluster index per item
    secondary: np.ndarray  # (N,)
    members: dict[int, list[str]]
    secondary_members: dict[tuple[int, int], list[str]]
    distances: np.ndarray  # (K_p, K_p) in [0, 1], symmetric, zero diagonal
    k_primary: int
    k_secondary: int

    def __post_init__(self):
        self._pos = {item: i for i, item in enumerate(self.item_order)}
        # pure functions of the (immutable) index, memoized for hot loops
        self._dist_cache: dict[tuple[int, float, float], np.ndarray] = {}
        self._hard_pool_cache: dict[tuple[int, int], list[str]] = {}

    def hard_pool(self, cp: int, cs: int) -> list[str]:
        """Members of primary cluster ``cp`` outside secondary cell ``cs``:
        the eligible hard negatives for any positive assigned to (cp, cs)."""
        key = (cp, cs)
        pool = self._hard_pool_cache.get(key)
        if pool is None:
            same_secondary = set(self.secondary_members.get(key, ()))
            pool = [i for i in self.members[cp] if i not in same_secondary]
            self._hard_pool_cache[key] = pool
        return pool

    def cluster_of(self, item_id: str) -> tuple[int, int]:
        i = self._pos[item_id]
        return int(self.primary[i]), int(self.secondary[i])

    def cluster_sizes(self) -> np.ndarray:
        sizes = np.zeros(self.k_primary, dtype=np.int64)
        for c, items in self.members.items():
            sizes[c] = len(items)
        return sizes


def project(
    r_image: torch.Tensor,
    r_text: torch.Tensor,
    r_behavior: torch.Tensor,
    params: AlignmentParams,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Linear per-modality maps into the shared d_m space."""
    for r, w in ((r_image, params.w_image), (r_text, params.w_text), (r_behavior, params.w_behavior)):
        if r.shape[1] != w.shape[0]:
            raise DimMismatch(f"input dim {r.shape[1]} vs projection dim {w.shape[0]}")
    return (
        r_image @ params.w_image + params.b_image,
        r_text @ params.w_text + params.b_text,
        r_behavior @ params.w_behavior + params.b_behavior,
    )


def _row_normalize(x: torch.Tensor) -> torch.Tensor:
    norms = x.norm(dim=1, keepdim=True)
    if bool((norms < NORM_FLOOR).any()):
        raise ZeroNormVector("contrastive alignment needs nonzero rows")
    return x / norms


def pairwise_alignment_loss(a: torch.Tensor, b: torch.Tensor, temperature: float) -> torch.Tensor:
    """Symmetrized in-batch contrastive loss over exp(cosine / temperature).

    Row i of ``a`` pairs with row i of ``b``; the other N-1 rows act as
    negatives. Both softmax directions are averaged.
    """
    if a.shape != b.shape:
        raise DimMismatch(f"shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.shape[0] < 2:
        raise InvalidSpec("need at least 2 rows for in-batch negatives")
    logits = (_row_normalize(a) @ _row_normalize(b).T) / temperature
    targets = torch.arange(a.shape[0])
    forward = torch.nn.functional.cross_entropy(logits, targets)
    backward = torch.nn.functional.cross_entropy(logits.T, targets)
    return (forward + backward) / 2.0


def fuse_primary(
    m_image: torch.Tensor, m_text: torch.Tensor, m_behavior: torch.Tensor
) -> torch.Tensor:
    """Mean of the three aligned views."""
    if not (m_image.shape == m_text.shape == m_behavior.shape):
        raise DimMismatch("aligned views must share a shape")
    return (m_image + m_text + m_behavior) / 3.0


def assign(codebook: Codebook, points) -> np.ndarray:
    """Nearest-codeword index per point (Euclidean, lowest index on ties)."""
    pts = points.detach().numpy() if isinstance(points, torch.Tensor) else np.asarray(points)
    codes = codebook.codewords.detach().numpy()
    if pts.shape[1] != codes.shape[1]:
        raise DimMismatch(f"point dim {pts.shape[1]} vs codeword dim {codes.shape[1]}")
    diff = pts[:, None, :] - codes[None, :, :]
    d2 = np.einsum("nkd,nkd->nk", diff, diff)
    return np.argmin(d2, axis=1)


def residual_secondary(
    m_image: torch.Tensor,
    m_text: torch.Tensor,
    m_behavior: torch.Tensor,
    primary_codeword_rows: torch.Tensor,
) -> torch.Tensor:
    """Concatenate the per-view residuals against each item's primary codeword."""
    if primary_codeword_rows.shape != m_image.shape:
        raise DimMismatch("codeword rows must match the view shape")
    z = primary_codeword_rows
    return torch.cat((m_image - z, m_text - z, m_behavior - z), dim=1)


def sq_loss(
    fused: torch.Tensor,
    primary_rows: torch.Tensor,
    residuals: torch.Tensor,
    secondary_rows: torch.Tensor,
) -> torch.Tensor:
    """Two-level quantization loss: summed squared residuals at both levels."""
    return ((fused - primary_rows) ** 2).sum() + ((residuals - secondary_rows) ** 2).sum()


def _aligned_inputs(
    image: EmbeddingTable, text: EmbeddingTable, behavior: EmbeddingTable
) -> tuple[list[str], torch.Tensor, torch.Tensor, torch.Tensor]:
    items = image.item_order
    if set(items) != set(text.item_order) or set(items) != set(behavior.item_order):
        raise InvalidSpec("modal tables must cover the same item set")

    def rows(table: EmbeddingTable) -> torch.Tensor:
        idx = [table.index_of(i) for i in items]
        m = table.matrix[idx]
        norms = np.linalg.norm(m, axis=1, keepdims=True)
        norms[norms < NORM_FLOOR] = 1.0
        return torch.tensor(m / norms, dtype=torch.float64)

    return items, rows(image), rows(text), rows(behavior)


def _init_params(dims: tuple[int, int, int], d_m: int, rng: np.random.Generator) -> AlignmentParams:
    def w(d_in: int) -> torch.Tensor:
        t = torch.tensor(rng.normal(size=(d_in, d_m)) / np.sqrt(d_in), dtype=torch.float64)
        t.requires_grad_(True)
        return t

    def b() -> torch.Tensor:
        t = torch.zeros(d_m, dtype=torch.float64)
        t.requires_grad_(True)
        return t

    return AlignmentParams(w(dims[0]), w(dims[1]), w(dims[2]), b(), b(), b())


def _init_codebooks(
    r_i: torch.Tensor,
    r_t: torch.Tensor,
    r_g: torch.Tensor,
    params: AlignmentParams,
    config: MsacConfig,
    rng: np.random.Generator,
) -> CascadedCodebooks:
    with torch.no_grad():
        m_i, m_t, m_g = project(r_i, r_t, r_g, params)
        fused = fuse_primary(m_i, m_t, m_g)
        primary_fit = kmeans(
            fused.numpy(), config.k_primary, restarts=config.kmeans_restarts, rng=rng
        )
        primary = Codebook(
            torch.tensor(primary_fit.centroids, dtype=torch.float64), "primary"
        )
        cp = assign(primary, fused)
        residuals = residual_secondary(m_i, m_t, m_g, primary.codewords[cp])
        secondary_fit = kmeans(
            residuals.numpy(), config.k_secondary, restarts=config.kmeans_restarts, rng=rng
        )
        secondary = Codebook(
            torch.tensor(secondary_fit.centroids, dtype=torch.float64), "secondary"
        )
    primary.codewords.requires_grad_(True)
    secondary.codewords.requires_grad_(True)
    return CascadedCodebooks(primary, secondary)


def train_msac(
    image: EmbeddingTable,
    text: EmbeddingTable,
    behavior: EmbeddingTable,
    config: MsacConfig,
) -> MsacModel:
    """Joint alignment + quantization training.

    Codebooks are initialized by k-means on the initial fused projections
    (primary) and residuals (secondary); with epochs=0 that initialization is
    returned unchanged. Dead codewords are re-seeded after each epoch to the
    worst-quantized point of the last batch.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    torch.manual_seed(config.seed)
    items, r_i, r_t, r_g = _aligned_inputs(image, text, behavior)
    if len(items) < config.k_primary:
        raise InvalidSpec("fewer items than primary codewords")
    dims = (r_i.shape[1], r_t.shape[1], r_g.shape[1])
    params = _init_params(dims, config.d_m, rng)
    codebooks = _init_codebooks(r_i, r_t, r_g, params, config, rng)
    model = MsacModel(params, codebooks, config)
    if config.epochs == 0:
        return model

    zp, zs = codebooks.primary.codewords, codebooks.secondary.codewords
    opt = torch.optim.Adam(params.tensors() + [zp, zs], lr=config.learning_rate)
    n = len(items)
    for _epoch in range(config.epochs):
        order = rng.permutation(n)
        primary_used = np.zeros(config.k_primary, dtype=bool)
        secondary_used = np.zeros(config.k_secondary, dtype=bool)
        last_fused = last_residuals = None
        epoch_loss = 0.0
        batches = 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            if len(idx) < 2:
                continue
            m_i, m_t, m_g = project(r_i[idx], r_t[idx], r_g[idx], params)
            align = (
                config.beta_it * pairwise_alignment_loss(m_i, m_t, config.align_temperature)
                + config.beta_ig * pairwise_alignment_loss(m_i, m_g, config.align_temperature)
                + config.beta_gt * pairwise_alignment_loss(m_g, m_t, config.align_temperature)
            )
            fused = fuse_primary(m_i, m_t, m_g)
            cp = assign(codebooks.primary, fused)
            residuals = residual_secondary(m_i, m_t, m_g, zp[cp])
            cs = assign(codebooks.secondary, residuals)
            loss = align + sq_loss(fused, zp[cp], residuals, zs[cs])
            opt.zero_grad()
            loss.backward()
            opt.step()
            primary_used[np.unique(cp)] = True
            secondary_used[np.unique(cs)] = True
            last_fused, last_residuals = fused.detach(), residuals.detach()
            epoch_loss += float(loss.detach())
            batches += 1
        model.epoch_losses.append(epoch_loss / max(batches, 1))
        _reseed_dead(zp, primary_used, last_fused)
        _reseed_dead(zs, secondary_used, last_residuals)
    return model


def _reseed_dead(codewords: torch.Tensor, used: np.ndarray, batch_points: torch.Tensor | None) -> None:
    if batch_points is None or bool(used.all()):
        return
    with torch.no_grad():
        d2 = torch.cdist(batch_points, codewords) ** 2
        worst = torch.argsort(d2.min(dim=1).values, descending=True)
        dead = np.flatnonzero(~used)
        for rank, k in enumerate(dead):
            codewords[k] = batch_points[worst[rank % len(worst)]]


def build_semantic_index(
    model: MsacModel,
    image: EmbeddingTable,
    text: EmbeddingTable,
    behavior: EmbeddingTable,
) -> SemanticIndex:
    """Assign every item to (primary, secondary) clusters and precompute the
    primary-centroid distance matrix (1 - normalized cosine similarity)."""
    items, r_i, r_t, r_g = _aligned_inputs(image, text, behavior)
    with torch.no_grad():
        m_i, m_t, m_g = project(r_i, r_t, r_g, model.params)
        fused = fuse_primary(m_i, m_t, m_g)
        cp = assign(model.codebooks.primary, fused)
        residuals = residual_secondary(m_i, m_t, m_g, model.codebooks.primary.codewords[cp])
        cs = assign(model.codebooks.secondary, residuals)
    return make_semantic_index(
        items, cp, cs, model.codebooks.primary.codewords.detach().numpy(),
        model.config.k_secondary,
    )


def make_semantic_index(
    items: list[str],
    primary: np.ndarray,
    secondary: np.ndarray,
    primary_codewords: np.ndarray,
    k_secondary: int,
    distances: np.ndarray | None = None,
) -> SemanticIndex:
    k_primary = primary_codewords.shape[0]
    members: dict[int, list[str]] = {k: [] for k in range(k_primary)}
    secondary_members: dict[tuple[int, int], list[str]] = {}
    for item, a, b in zip(items, primary, secondary):
        members[int(a)].append(item)
        secondary_members.setdefault((int(a), int(b)), []).append(item)
    if distances is None:
        distances = codeword_distances(primary_codewords)
    return SemanticIndex(
        list(items),
        np.asarray(primary, dtype=np.int64),
        np.asarray(secondary, dtype=np.int64),
        members,
        secondary_members,
        distances,
        k_primary,
        k_secondary,
    )


def codeword_distances(codewords: np.ndarray) -> np.ndarray:
    """Pairwise 1 - normalized_sim over codewords; symmetric, zero diagonal."""
    norms = np.linalg.norm(codewords, axis=1, keepdims=True)
    norms = np.maximum(norms, NORM_FLOOR)
    unit = codewords / norms
    cos = np.clip(unit @ unit.T, -1.0, 1.0)
    d = (1.0 - cos) / 2.0
    d = (d + d.T) / 2.0
    np.fill_diagonal(d, 0.0)
    return np.clip(d, 0.0, 1.0)

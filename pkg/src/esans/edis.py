"""Dense interpolation of negatives in the output embedding space.

Simple negatives from one cluster are blended into virtual negatives by
similarity-weighted convex combinations over nested prefixes of a random
permutation; hard negatives are shifted along the positive<->hard segment.
Functions accept either numpy arrays or torch tensors, so the same code
runs standalone and inside the training graph.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch

from .errors import DimMismatch, InvalidArg, InvalidSpec, ZeroNormVector
from .tensor import NORM_FLOOR


@dataclass(frozen=True)
class InterpolationConfig:
    eta: float = 0.6
    lam: float = 0.1  # 0.1 hardens, -0.1 softens
    seed: int = 0

    def validate(self) -> None:
        if not np.isfinite(self.eta):
            raise InvalidSpec("eta must be finite")
        if self.lam >= 1.0:
            raise InvalidSpec("lam must be < 1 (lam=1 reproduces the positive)")


@dataclass
class Provenance:
    anchor: int  # position in the participant list
    participants: list[int]  # indices into the input embedding list
    weights: list[float]


def virtual_count(m_o: int) -> int:
    """Number of simple virtuals per cluster: 2 + 3 + ... + m_o."""
    if m_o < 2:
        raise InvalidArg(f"need at least 2 anchors, got {m_o}")
    return m_o * (m_o + 1) // 2 - 1


def _pairwise_nsim(vectors) -> "torch.Tensor | np.ndarray":
    """(cos+1)/2 between all rows; raises on (near-)zero rows."""
    if isinstance(vectors, torch.Tensor):
        norms = vectors.norm(dim=1, keepdim=True)
        if bool((norms < NORM_FLOOR).any()):
            raise ZeroNormVector("interpolation needs nonzero vectors")
        unit = vectors / norms
        cos = torch.clamp(unit @ unit.T, -1.0, 1.0)
    else:
        norms = np.linalg.norm(vectors, axis=1, keepdims=True)
        if (norms < NORM_FLOOR).any():
            raise ZeroNormVector("interpolation needs nonzero vectors")
        unit = vectors / norms
        cos = np.clip(unit @ unit.T, -1.0, 1.0)
    return (cos + 1.0) / 2.0


@lru_cache(maxsize=64)
def _prefix_layout(m_o: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-virtual (anchor row, prefix length) and the participant mask; one
    virtual per anchor position per prefix length in 2..m_o."""
    anchors = np.concatenate([np.arange(n_o) for n_o in range(2, m_o + 1)])
    lengths = np.concatenate([np.full(n_o, n_o) for n_o in range(2, m_o + 1)])
    mask = (np.arange(m_o)[None, :] < lengths[:, None]).astype(np.float64)
    return anchors, lengths, mask


def interpolate_simple_batched(
    stacks: torch.Tensor, eta: float, rng: np.random.Generator
) -> torch.Tensor:
    """interpolate_simple over G clusters of equal size at once.

    ``stacks`` is (G, m_o, d); returns (G, virtual_count(m_o), d). One
    permutation is drawn per cluster, in cluster order, so results match G
    standalone calls against the same generator state only in distribution,
    not bitwise.
    """
    g, m_o, _ = stacks.shape
    if m_o < 2:
        raise InvalidArg("interpolation needs at least 2 embeddings")
    perms = np.stack([rng.permutation(m_o) for _ in range(g)])
    permuted = stacks[np.arange(g)[:, None], perms]
    norms = permuted.norm(dim=2, keepdim=True)
    if bool((norms < NORM_FLOOR).any()):
        raise ZeroNormVector("interpolation needs nonzero vectors")
    unit = permuted / norms
    sim = (torch.clamp(unit @ unit.transpose(1, 2), -1.0, 1.0) + 1.0) / 2.0
    anchors, lengths, mask = _prefix_layout(m_o)
    mask_t = torch.tensor(mask, dtype=stacks.dtype)
    if eta == 0.0:
        weights = (mask_t / torch.tensor(lengths, dtype=stacks.dtype).unsqueeze(1)).expand(
            g, -1, -1
        )
    else:
        weights = sim[:, anchors, :] ** eta * mask_t
        weights = weights / weights.sum(dim=2, keepdim=True)
    return weights @ permuted


def interpolate_simple(embeddings, eta: float, rng: np.random.Generator,
                       with_provenance: bool = True):
    """Similarity-weighted convex blends of one cluster's negatives.

    One permutation is drawn; for every prefix of length n_o in 2..m_o and
    every anchor within that prefix, the virtual is the convex combination
    with weights proportional to nsim(anchor, participant)^eta. All blends
    are computed as one masked matrix product so the autograd graph stays
    small when the inputs require gradients.

    Returns (virtuals, provenance); virtuals is a stacked matrix of the same
    array type as the input. Pass ``with_provenance=False`` in hot paths to
    skip the per-virtual bookkeeping (provenance comes back empty).
    """
    is_torch = isinstance(embeddings, torch.Tensor)
    mat = embeddings if is_torch else np.asarray(embeddings, dtype=np.float64)
    m_o = mat.shape[0]
    if m_o < 2:
        raise InvalidArg("interpolation needs at least 2 embeddings")
    perm = rng.permutation(m_o)
    permuted = mat[perm] if is_torch else mat[perm, :]
    sim = _pairwise_nsim(permuted)
    anchors, lengths, mask = _prefix_layout(m_o)
    if is_torch:
        mask_t = torch.tensor(mask, dtype=permuted.dtype)
        if eta == 0.0:
            weights = mask_t / torch.tensor(lengths, dtype=permuted.dtype).unsqueeze(1)
        else:
            weights = sim[anchors] ** eta * mask_t
            weights = weights / weights.sum(dim=1, keepdim=True)
        stacked = weights @ permuted
    else:
        if eta == 0.0:
            weights = mask / lengths[:, None]
        else:
            weights = sim[anchors] ** eta * mask
            weights = weights / weights.sum(axis=1, keepdims=True)
        stacked = weights @ permuted
    provenance: list[Provenance] = []
    if with_provenance:
        w_np = weights.detach().numpy() if is_torch else weights
        for v in range(len(anchors)):
            n_o = int(lengths[v])
            provenance.append(
                Provenance(
                    anchor=int(anchors[v]),
                    participants=[int(perm[i]) for i in range(n_o)],
                    weights=[float(w) for w in w_np[v, :n_o]],
                )
            )
    return stacked, provenance


def interpolate_hard(v_pos, hard_embeddings, lam: float):
    """One virtual per hard negative: lam * positive + (1 - lam) * hard."""
    is_torch = isinstance(hard_embeddings, torch.Tensor)
    mat = hard_embeddings if is_torch else np.asarray(hard_embeddings, dtype=np.float64)
    pos = v_pos if is_torch else np.asarray(v_pos, dtype=np.float64)
    if mat.ndim != 2 or pos.shape[-1] != mat.shape[1]:
        raise DimMismatch("positive and hard embeddings must share a dimension")
    return lam * pos.reshape(1, -1) + (1.0 - lam) * mat

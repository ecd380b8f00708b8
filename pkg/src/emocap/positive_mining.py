"""Guided positive mining: weighted multi-positive contrastive objectives.

Plain contrastive losses treat every non-matched batch element as a negative,
which punishes semantically close pairs. Mining fixes that: for each anchor,
batch elements whose *guidance* similarity clears a threshold and ranks in the
top K become additional positives, weighted by that similarity. Guidance
always lives in the candidate modality of the loss term being weighted: the
direction whose denominator varies text rows mines on text-text similarity,
the direction varying (pooled) image rows mines on image-image similarity,
and the same crossing applies per slot for the local loss.

Degenerate settings reduce exactly to the plain losses: K = 1 keeps only the
anchor itself, and a threshold approaching 1 removes every non-self member.
Each positive set always contains its anchor (self-similarity is pinned to
exactly 1.0, above any valid threshold).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .contrastive_losses import (
    EmbeddingBatch,
    global_contrastive_loss,
    global_loss_graph,
    inter_local_loss_graph,
    inter_sample_local_loss,
    intra_sample_local_loss,
)


class InvalidThreshold(ValueError):
    """Similarity threshold outside (0, 1)."""


class InvalidTopK(ValueError):
    """Top-K bound below 1."""


def _unit_rows(rows: np.ndarray) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    return rows / np.maximum(norms, 1e-12)


@dataclass(frozen=True)
class PositiveSets:
    """Mined positives per anchor: member indices with similarity weights.

    Members are stored in mining order (similarity descending, anchor first
    on ties, then lower index). The anchor is always a member with weight
    exactly 1.0; every other weight lies in (threshold, 1].
    """

    indices: tuple[np.ndarray, ...]
    weights: tuple[np.ndarray, ...]
    threshold: float
    top_k: int

    @property
    def anchor_count(self) -> int:
        return len(self.indices)

    def mean_size(self) -> float:
        if not self.indices:
            return 0.0
        return float(np.mean([idx.size for idx in self.indices]))

    def weight_matrix(self, size: int | None = None, members: np.ndarray | None = None) -> np.ndarray:
        """Dense coefficient matrix; ``members`` maps local anchors to global
        row positions when the sets were mined over a subset."""
        if members is None:
            members = np.arange(self.anchor_count)
        members = np.asarray(members, dtype=np.int64)
        n = self.anchor_count if size is None else size
        out = np.zeros((n, n), dtype=np.float64)
        for local_anchor, (idx, w) in enumerate(zip(self.indices, self.weights)):
            out[members[local_anchor], members[idx]] = w
        return out


def mine_positive_sets(guidance: np.ndarray, threshold: float, top_k: int) -> PositiveSets:
    """Mine positives over guidance rows (one row per batch element).

    Candidates are ordered by cosine similarity (descending), anchor first on
    exact ties, then lower index; the top K survive, then those at or below
    the threshold are dropped. Self-similarity is set to exactly 1.0 and
    off-diagonal cosines are clipped into [-1, 1], so the anchor always
    survives and weights are bounded. K larger than the row count is clamped.
    """
    if not 0.0 < threshold < 1.0:
        raise InvalidThreshold(f"threshold must be in (0, 1), got {threshold}")
    if top_k < 1:
        raise InvalidTopK(f"top_k must be >= 1, got {top_k}")
    rows = _unit_rows(guidance)
    if rows.ndim != 2 or rows.shape[0] < 1:
        raise ValueError("guidance must be a non-empty 2-d array")
    count = rows.shape[0]
    sims = np.clip(rows @ rows.T, -1.0, 1.0)
    np.fill_diagonal(sims, 1.0)
    k = min(top_k, count)

    indices: list[np.ndarray] = []
    weights: list[np.ndarray] = []
    positions = np.arange(count)
    for i in range(count):
        row = sims[i]
        not_self = positions != i
        # lexsort: last key is primary
        order = np.lexsort((positions, not_self, -row))
        top = order[:k]
        keep = top[row[top] > threshold]
        indices.append(keep)
        weights.append(row[keep].copy())
    return PositiveSets(tuple(indices), tuple(weights), float(threshold), int(top_k))


def _normalize_rows_to_unit_sum(matrix: np.ndarray) -> np.ndarray:
    sums = matrix.sum(axis=1, keepdims=True)
    safe = np.where(sums > 0, sums, 1.0)
    return matrix / safe


def mined_global_loss_graph(
    image_rows: nx.Node,
    text_rows: nx.Node,
    inv_tau: nx.Node,
    batch_count: int,
    text_sets: PositiveSets,
    image_sets: PositiveSets,
    normalize_weights: bool = False,
) -> nx.Node:
    """Weighted global loss; candidate-modality sets supply the coefficients.

    The image-anchored direction contrasts against text candidates and uses
    ``text_sets``; the text-anchored direction uses ``image_sets``. Softmax
    denominators stay over the full batch. With ``normalize_weights`` each
    anchor's coefficients are divided by their sum (off by default).
    """
    lam_text = text_sets.weight_matrix(batch_count)
    lam_image = image_sets.weight_matrix(batch_count)
    if normalize_weights:
        lam_text = _normalize_rows_to_unit_sum(lam_text)
        lam_image = _normalize_rows_to_unit_sum(lam_image)
    return global_loss_graph(
        image_rows,
        text_rows,
        inv_tau,
        batch_count,
        weights_image_to_text=nx.const(lam_text),
        weights_text_to_image=nx.const(lam_image),
    )


def mined_inter_local_loss_graph(
    per_slot_text: Sequence[nx.Node],
    per_slot_pooled: Sequence[nx.Node],
    inv_tau: nx.Node,
    slot_mask: np.ndarray,
    text_sets_per_slot: Sequence[PositiveSets | None],
    pooled_sets_per_slot: Sequence[PositiveSets | None],
    normalize_weights: bool = False,
) -> nx.Node:
    """Weighted across-sample local loss.

    Per slot, the direction with pooled-image candidates uses that slot's
    pooled-image sets, the direction with text candidates uses the text sets.
    Sets are mined over the samples present at the slot; absent samples keep
    zero coefficient rows and columns.
    """
    mask = np.asarray(slot_mask, dtype=bool)
    n = mask.shape[0]
    w_text_cand: list[nx.Node] = []
    w_pooled_cand: list[nx.Node] = []
    for j in range(mask.shape[1]):
        members = np.flatnonzero(mask[:, j])
        t_sets = text_sets_per_slot[j]
        p_sets = pooled_sets_per_slot[j]
        if members.size == 0 or t_sets is None or p_sets is None:
            w_text_cand.append(nx.const(np.zeros((n, n))))
            w_pooled_cand.append(nx.const(np.zeros((n, n))))
            continue
        lam_text = t_sets.weight_matrix(n, members)
        lam_pooled = p_sets.weight_matrix(n, members)
        if normalize_weights:
            lam_text = _normalize_rows_to_unit_sum(lam_text)
            lam_pooled = _normalize_rows_to_unit_sum(lam_pooled)
        w_text_cand.append(nx.const(lam_text))
        w_pooled_cand.append(nx.const(lam_pooled))
    return inter_local_loss_graph(
        per_slot_text,
        per_slot_pooled,
        inv_tau,
        slot_mask,
        weights_text_to_pooled=w_pooled_cand,
        weights_pooled_to_text=w_text_cand,
    )


@dataclass(frozen=True)
class BatchPositiveSets:
    """Every positive-set family mined from one embedding batch."""

    text_global: PositiveSets
    image_global: PositiveSets
    text_per_slot: tuple[PositiveSets | None, ...]
    pooled_per_slot: tuple[PositiveSets | None, ...]

    def mean_global_size(self) -> float:
        return 0.5 * (self.text_global.mean_size() + self.image_global.mean_size())


def mine_batch_sets(batch: EmbeddingBatch, threshold: float, top_k: int) -> BatchPositiveSets:
    """Mine global and per-slot positive sets from batch embeddings."""
    text_slots: list[PositiveSets | None] = []
    pooled_slots: list[PositiveSets | None] = []
    for j in range(batch.slot_count):
        members = np.flatnonzero(batch.slot_mask[:, j])
        if members.size == 0:
            text_slots.append(None)
            pooled_slots.append(None)
            continue
        text_slots.append(mine_positive_sets(batch.text_local[members, j, :], threshold, top_k))
        pooled_slots.append(mine_positive_sets(batch.image_pooled[members, j, :], threshold, top_k))
    return BatchPositiveSets(
        text_global=mine_positive_sets(batch.text_global, threshold, top_k),
        image_global=mine_positive_sets(batch.image_global, threshold, top_k),
        text_per_slot=tuple(text_slots),
        pooled_per_slot=tuple(pooled_slots),
    )


# ------------------------------------------------------------- numpy facade


def _eval_scalar(node: nx.Node) -> float:
    return float(nx.Session({}).value(node))


def _inv_tau(batch: EmbeddingBatch) -> nx.Node:
    return nx.const(np.asarray(1.0 / batch.temperature))


def global_loss_with_mining(
    batch: EmbeddingBatch,
    threshold: float,
    top_k: int,
    normalize_weights: bool = False,
    sets: BatchPositiveSets | None = None,
) -> float:
    if sets is None:
        sets = mine_batch_sets(batch, threshold, top_k)
    node = mined_global_loss_graph(
        nx.const(batch.image_global),
        nx.const(batch.text_global),
        _inv_tau(batch),
        batch.batch_size,
        text_sets=sets.text_global,
        image_sets=sets.image_global,
        normalize_weights=normalize_weights,
    )
    return _eval_scalar(node)


def inter_local_loss_with_mining(
    batch: EmbeddingBatch,
    threshold: float,
    top_k: int,
    normalize_weights: bool = False,
    sets: BatchPositiveSets | None = None,
) -> float:
    if sets is None:
        sets = mine_batch_sets(batch, threshold, top_k)
    text = [nx.const(batch.text_local[:, j, :]) for j in range(batch.slot_count)]
    pooled = [nx.const(batch.image_pooled[:, j, :]) for j in range(batch.slot_count)]
    node = mined_inter_local_loss_graph(
        text,
        pooled,
        _inv_tau(batch),
        batch.slot_mask,
        sets.text_per_slot,
        sets.pooled_per_slot,
        normalize_weights=normalize_weights,
    )
    return _eval_scalar(node)


@dataclass(frozen=True)
class OverallLoss:
    """Scheduled training objective and its components."""

    total: float
    global_term: float
    intra_term: float
    inter_term: float
    mining_active: bool
    mean_positive_set_size: float


def overall_loss(
    batch: EmbeddingBatch,
    alpha: float,
    epoch: int,
    activation_epoch: int,
    threshold: float,
    top_k: int,
    normalize_weights: bool = False,
) -> OverallLoss:
    """Combined objective: plain losses before the activation epoch, the
    mined global and inter-sample variants from it onward. The intra-sample
    term is never mined (its candidates never cross samples). Mining
    statistics are computed either way, so schedules are observable.
    """
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    sets = mine_batch_sets(batch, threshold, top_k)
    active = epoch >= activation_epoch
    intra = intra_sample_local_loss(batch)
    if active:
        g = global_loss_with_mining(batch, threshold, top_k, normalize_weights, sets=sets)
        inter = inter_local_loss_with_mining(batch, threshold, top_k, normalize_weights, sets=sets)
    else:
        g = global_contrastive_loss(batch)
        inter = inter_sample_local_loss(batch)
    total = g + alpha * (intra + inter)
    return OverallLoss(
        total=total,
        global_term=g,
        intra_term=intra,
        inter_term=inter,
        mining_active=active,
        mean_positive_set_size=sets.mean_global_size(),
    )

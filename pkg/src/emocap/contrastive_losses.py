"""Symmetric contrastive objectives over global and local embedding pairs.

Three losses share one graph core, a weighted negative-log-softmax sum:

* global: matched image/text pairs contrast against the batch, both
  directions, divided by the batch size;
* intra-sample local: within one sample, each local sentence contrasts its
  pooled image row against the sample's other slots (and vice versa);
* inter-sample local: at a fixed slot, each pair contrasts against the same
  slot of the other samples in the batch.

Local losses divide by the number of realized (sample, slot) pairs; absent
slots are excluded from numerators and denominators via masks rather than by
reshaping, so batch shapes stay static. The weight-matrix hook is what the
positive-mining variants use: the plain losses are exactly the weighted core
with identity (or mask-diagonal) coefficients, which makes the degenerate
mining settings reduce to these losses bit for bit.

Similarity is the scaled cosine: rows are L2-normalized inside the graph and
logits are multiplied by the inverse temperature.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx

# Additive logit bias used to exclude absent candidates from softmax
# denominators. exp(-1e9 + x) underflows to exactly 0 for any realizable x.
MASK_BIAS = 1e9


@dataclass
class EmbeddingBatch:
    """One batch of paired embeddings.

    ``slot_mask[i, j]`` marks whether sample i realized local slot j; absent
    slots must hold zero rows. ``None`` means all slots are realized.
    Global rows are expected unit-norm from the encoders, but losses
    renormalize defensively, so scaling either modality leaves them unchanged.
    """

    image_global: np.ndarray  # N x D
    text_global: np.ndarray  # N x D
    text_local: np.ndarray  # N x M x D
    image_pooled: np.ndarray  # N x M x D
    temperature: float
    slot_mask: np.ndarray | None = None  # N x M, boolean
    image_patches: np.ndarray | None = None  # N x P x D, not consumed by losses

    def __post_init__(self):
        self.image_global = np.asarray(self.image_global, dtype=np.float64)
        self.text_global = np.asarray(self.text_global, dtype=np.float64)
        self.text_local = np.asarray(self.text_local, dtype=np.float64)
        self.image_pooled = np.asarray(self.image_pooled, dtype=np.float64)
        n, d = self.image_global.shape
        if self.text_global.shape != (n, d):
            raise ValueError("text_global must match image_global shape")
        if self.text_local.ndim != 3 or self.image_pooled.shape != self.text_local.shape:
            raise ValueError("text_local and image_pooled must share an N x M x D shape")
        if self.text_local.shape[0] != n or self.text_local.shape[2] != d:
            raise ValueError("local embeddings disagree with global batch dims")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.slot_mask is None:
            self.slot_mask = np.ones(self.text_local.shape[:2], dtype=bool)
        else:
            self.slot_mask = np.asarray(self.slot_mask, dtype=bool)
            if self.slot_mask.shape != self.text_local.shape[:2]:
                raise ValueError("slot_mask must be N x M")
        if not self.slot_mask.any(axis=1).all():
            raise ValueError("every sample needs at least one realized slot")

    @property
    def batch_size(self) -> int:
        return self.image_global.shape[0]

    @property
    def slot_count(self) -> int:
        return self.text_local.shape[1]


def weighted_pair_nll_graph(
    anchors: nx.Node,
    candidates: nx.Node,
    inv_tau: nx.Node,
    weights: nx.Node,
    candidate_valid: np.ndarray | None = None,
) -> nx.Node:
    """-sum_{i,p} weights[i,p] * log softmax_p(sim(anchor_i, candidate_p)/tau).

    Rows are normalized here. ``candidate_valid`` (length = candidate count)
    removes absent candidates from every softmax denominator; rows whose
    weights are all zero contribute exactly zero.
    """
    a = nx.l2norm_rows(anchors)
    c = nx.l2norm_rows(candidates)
    logits = nx.scalar_mul(nx.matmul(a, nx.transpose(c)), inv_tau)
    if candidate_valid is not None:
        valid = np.asarray(candidate_valid, dtype=np.float64)
        # anchor count equals candidate count in every objective built here
        bias = np.tile((valid - 1.0) * MASK_BIAS, (valid.size, 1))
        logits = nx.add(logits, nx.const(bias))
    # Excluded candidates underflow to probability exactly 0; flooring before
    # the log keeps those entries finite so their zero weights cancel them.
    # Valid probabilities are >= exp(-2/tau_floor)/N, far above the floor, and
    # stay strictly inside the clamp interval, so values and gradients of
    # every weighted entry are untouched.
    probs = nx.clamp(nx.row_softmax(logits), 1e-300, 2.0)
    log_probs = nx.log(probs)
    return nx.scale(nx.sum_all(nx.mul(log_probs, weights)), -1.0)


def global_loss_graph(
    image_rows: nx.Node,
    text_rows: nx.Node,
    inv_tau: nx.Node,
    batch_count: int,
    weights_image_to_text: nx.Node | None = None,
    weights_text_to_image: nx.Node | None = None,
) -> nx.Node:
    """Symmetric global loss; identity weights give the plain objective."""
    if batch_count < 1:
        raise ValueError("batch_count must be positive")
    eye = nx.const(np.eye(batch_count))
    w_i2t = weights_image_to_text if weights_image_to_text is not None else eye
    w_t2i = weights_text_to_image if weights_text_to_image is not None else eye
    i2t = weighted_pair_nll_graph(image_rows, text_rows, inv_tau, w_i2t)
    t2i = weighted_pair_nll_graph(text_rows, image_rows, inv_tau, w_t2i)
    return nx.scale(nx.add(i2t, t2i), 1.0 / batch_count)


def intra_local_loss_graph(
    per_sample_text: Sequence[nx.Node],
    per_sample_pooled: Sequence[nx.Node],
    inv_tau: nx.Node,
    slot_mask: np.ndarray,
) -> nx.Node:
    """Within-sample local loss over realized slots, both directions."""
    mask = np.asarray(slot_mask, dtype=np.float64)
    realized = float(mask.sum())
    if realized < 1:
        raise ValueError("no realized (sample, slot) pairs")
    terms: list[nx.Node] = []
    for i, (text_rows, pooled_rows) in enumerate(zip(per_sample_text, per_sample_pooled)):
        weights = nx.const(np.diag(mask[i]))
        t2p = weighted_pair_nll_graph(text_rows, pooled_rows, inv_tau, weights, mask[i])
        p2t = weighted_pair_nll_graph(pooled_rows, text_rows, inv_tau, weights, mask[i])
        terms.append(nx.add(t2p, p2t))
    total = terms[0]
    for t in terms[1:]:
        total = nx.add(total, t)
    return nx.scale(total, 1.0 / realized)


def inter_local_loss_graph(
    per_slot_text: Sequence[nx.Node],
    per_slot_pooled: Sequence[nx.Node],
    inv_tau: nx.Node,
    slot_mask: np.ndarray,
    weights_text_to_pooled: Sequence[nx.Node] | None = None,
    weights_pooled_to_text: Sequence[nx.Node] | None = None,
) -> nx.Node:
    """Across-sample local loss at each slot, both directions.

    Optional per-slot weight matrices replace the mask-diagonal coefficients;
    that is the hook the mined variant uses. Weight rows and columns for
    absent samples must be zero.
    """
    mask = np.asarray(slot_mask, dtype=np.float64)
    realized = float(mask.sum())
    if realized < 1:
        raise ValueError("no realized (sample, slot) pairs")
    terms: list[nx.Node] = []
    for j, (text_rows, pooled_rows) in enumerate(zip(per_slot_text, per_slot_pooled)):
        present = mask[:, j]
        if present.sum() == 0:
            continue
        if weights_text_to_pooled is None:
            w_t2p: nx.Node = nx.const(np.diag(present))
        else:
            w_t2p = weights_text_to_pooled[j]
        if weights_pooled_to_text is None:
            w_p2t: nx.Node = nx.const(np.diag(present))
        else:
            w_p2t = weights_pooled_to_text[j]
        t2p = weighted_pair_nll_graph(text_rows, pooled_rows, inv_tau, w_t2p, present)
        p2t = weighted_pair_nll_graph(pooled_rows, text_rows, inv_tau, w_p2t, present)
        terms.append(nx.add(t2p, p2t))
    total = terms[0]
    for t in terms[1:]:
        total = nx.add(total, t)
    return nx.scale(total, 1.0 / realized)


# ------------------------------------------------------------- numpy facade


def _inv_tau_const(temperature: float) -> nx.Node:
    return nx.const(np.asarray(1.0 / float(temperature)))


def _eval_scalar(node: nx.Node) -> float:
    return float(nx.Session({}).value(node))


def global_contrastive_loss(batch: EmbeddingBatch) -> float:
    node = global_loss_graph(
        nx.const(batch.image_global),
        nx.const(batch.text_global),
        _inv_tau_const(batch.temperature),
        batch.batch_size,
    )
    return _eval_scalar(node)


def intra_sample_local_loss(batch: EmbeddingBatch) -> float:
    text = [nx.const(batch.text_local[i]) for i in range(batch.batch_size)]
    pooled = [nx.const(batch.image_pooled[i]) for i in range(batch.batch_size)]
    node = intra_local_loss_graph(text, pooled, _inv_tau_const(batch.temperature), batch.slot_mask)
    return _eval_scalar(node)


def inter_sample_local_loss(batch: EmbeddingBatch) -> float:
    text = [nx.const(batch.text_local[:, j, :]) for j in range(batch.slot_count)]
    pooled = [nx.const(batch.image_pooled[:, j, :]) for j in range(batch.slot_count)]
    node = inter_local_loss_graph(text, pooled, _inv_tau_const(batch.temperature), batch.slot_mask)
    return _eval_scalar(node)

"""Deterministic mini-batch training loop.

One step builds a single computation graph from raw batch data to the scalar
objective, evaluates it, backpropagates, and applies an adaptive-moment
update. All randomness (parameter init, epoch shuffling, per-epoch local
sentence sampling) is drawn from seed sequences keyed by the run seed, so a
(dataset, config) pair reproduces checkpoints and history byte for byte.

Positive mining statistics are computed every step so schedules are
observable in the history; the mined loss variants are optimized only from
the activation epoch onward, and the within-sample local term is never mined.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .caption_schema import GLOBAL_TEXT_POLICIES, select_global_text, tokenize
from .contrastive_losses import (
    EmbeddingBatch,
    global_loss_graph,
    inter_local_loss_graph,
    intra_local_loss_graph,
)
from .encoders import (
    CrossAttentionParams,
    ImageEncoderParams,
    TextEncoderParams,
    cross_attention_graph,
    init_cross_attention,
    init_image_encoder,
    init_text_encoder,
)
from .numerics import ShapeMismatch
from .positive_mining import (
    BatchPositiveSets,
    mine_batch_sets,
    mined_global_loss_graph,
    mined_inter_local_loss_graph,
)
from .synth_data import DatasetRecord

TAU_CEIL = 1.0

PARAM_NAMES = (
    "image_patch_projection",
    "image_global_projection",
    "text_embedding",
    "text_projection",
    "attn_query",
    "attn_key",
    "attn_value",
    "temperature_logit",
)

_STREAM_IMAGE_INIT = 11
_STREAM_TEXT_INIT = 12
_STREAM_ATTN_INIT = 13
_STREAM_ORDER = 21
_STREAM_LOCALS = 22

_CHECKPOINT_MAGIC = b"EMCP1"
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class ConfigInvalid(ValueError):
    """A training configuration value violates its constraints."""


class EmptyDataset(ValueError):
    """Training requires at least one record."""


class NumericalFailure(RuntimeError):
    """A loss or gradient became non-finite during training."""

    def __init__(self, epoch: int, batch: int, what: str):
        super().__init__(f"{what} became non-finite at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


class CheckpointFormatError(ValueError):
    """Checkpoint bytes do not follow the container format."""


@dataclass(frozen=True)
class TrainConfig:
    """Every knob of one training run.

    ``mining_epoch`` is the epoch index from which the mined loss variants
    replace the plain ones; ``None`` resolves to ``epochs // 2`` so the run
    starts on the standard objective and switches halfway.
    """

    batch_size: int = 16
    local_count: int = 3
    embed_dim: int = 32
    patch_count: int = 4
    feature_dim: int = 16
    vocab_size: int = 4096
    word_dim: int = 32
    alpha: float = 0.5
    sigma: float = 0.8
    top_k: int = 5
    mining_epoch: int | None = None
    tau_init: float = 0.07
    tau_floor: float = 0.01
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 1
    seed: int = 0
    precision: str = "f64"
    global_text: str = "summary"

    def __post_init__(self):
        counts = {
            "batch_size": self.batch_size,
            "local_count": self.local_count,
            "embed_dim": self.embed_dim,
            "patch_count": self.patch_count,
            "feature_dim": self.feature_dim,
            "vocab_size": self.vocab_size,
            "word_dim": self.word_dim,
            "top_k": self.top_k,
            "epochs": self.epochs,
        }
        for name, value in counts.items():
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigInvalid(f"{name} must be an integer >= 1, got {value!r}")
        if not 0.0 < self.sigma < 1.0:
            raise ConfigInvalid(f"sigma must be in (0, 1), got {self.sigma}")
        if self.alpha < 0:
            raise ConfigInvalid(f"alpha must be nonnegative, got {self.alpha}")
        if not self.tau_floor > 0:
            raise ConfigInvalid(f"tau_floor must be positive, got {self.tau_floor}")
        if not self.tau_floor <= self.tau_init <= TAU_CEIL:
            raise ConfigInvalid(
                f"tau_init must lie in [{self.tau_floor}, {TAU_CEIL}], got {self.tau_init}"
            )
        if self.learning_rate < 0:
            raise ConfigInvalid(f"learning_rate must be nonnegative, got {self.learning_rate}")
        for name, beta in (("beta1", self.beta1), ("beta2", self.beta2)):
            if not 0.0 <= beta < 1.0:
                raise ConfigInvalid(f"{name} must be in [0, 1), got {beta}")
        if self.eps <= 0:
            raise ConfigInvalid(f"eps must be positive, got {self.eps}")
        if self.mining_epoch is None:
            object.__setattr__(self, "mining_epoch", self.epochs // 2)
        if not isinstance(self.mining_epoch, int) or self.mining_epoch < 0:
            raise ConfigInvalid(
                f"mining_epoch must be an integer >= 0, got {self.mining_epoch!r}"
            )
        if self.precision not in ("f32", "f64"):
            raise ConfigInvalid(f"precision must be 'f32' or 'f64', got {self.precision!r}")
        if self.global_text not in GLOBAL_TEXT_POLICIES:
            raise ConfigInvalid(
                f"global_text must be one of {GLOBAL_TEXT_POLICIES}, got {self.global_text!r}"
            )


def config_to_dict(config: TrainConfig) -> dict:
    return asdict(config)


def config_from_dict(data: dict) -> TrainConfig:
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigInvalid(f"unknown config keys: {sorted(unknown)}")
    return TrainConfig(**data)


def config_hash(config: TrainConfig) -> str:
    blob = json.dumps(config_to_dict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]


def clamp_temperature(tau_logit: float, floor: float = 0.01, ceil: float = TAU_CEIL) -> float:
    """Temperature value for a logit: exp, clipped into [floor, ceil]."""
    return float(min(max(math.exp(float(tau_logit)), floor), ceil))


def init_parameters(config: TrainConfig) -> dict[str, np.ndarray]:
    """Seeded parameter tensors, in the fixed PARAM_NAMES order."""
    image = init_image_encoder(
        config.feature_dim, config.embed_dim, np.random.default_rng([config.seed, _STREAM_IMAGE_INIT])
    )
    text = init_text_encoder(
        config.vocab_size,
        config.word_dim,
        config.embed_dim,
        np.random.default_rng([config.seed, _STREAM_TEXT_INIT]),
    )
    attn = init_cross_attention(
        config.embed_dim, np.random.default_rng([config.seed, _STREAM_ATTN_INIT])
    )
    dtype = np.float32 if config.precision == "f32" else np.float64
    params = {
        "image_patch_projection": image.patch_projection,
        "image_global_projection": image.global_projection,
        "text_embedding": text.embedding_table,
        "text_projection": text.output_projection,
        "attn_query": attn.query,
        "attn_key": attn.key,
        "attn_value": attn.value,
        "temperature_logit": np.asarray(math.log(config.tau_init)),
    }
    return {k: np.asarray(v, dtype=dtype) for k, v in params.items()}


def encoder_params(params: dict[str, np.ndarray]) -> tuple[
    ImageEncoderParams, TextEncoderParams, CrossAttentionParams
]:
    """View a parameter dict as the encoder parameter structures."""
    return (
        ImageEncoderParams(params["image_patch_projection"], params["image_global_projection"]),
        TextEncoderParams(params["text_embedding"], params["text_projection"]),
        CrossAttentionParams(params["attn_query"], params["attn_key"], params["attn_value"]),
    )


# ----------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    """First and second moment estimates plus the shared step counter."""

    step: int
    first: dict[str, np.ndarray]
    second: dict[str, np.ndarray]

    @staticmethod
    def zeros(params: dict[str, np.ndarray]) -> "AdamState":
        return AdamState(
            step=0,
            first={k: np.zeros_like(v) for k, v in params.items()},
            second={k: np.zeros_like(v) for k, v in params.items()},
        )


def optimizer_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    config: TrainConfig,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected adaptive-moment update; pure and deterministic."""
    t = state.step + 1
    new_params: dict[str, np.ndarray] = {}
    new_first: dict[str, np.ndarray] = {}
    new_second: dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatch(
                f"gradient for {name} has shape {g.shape}, parameter has {p.shape}"
            )
        m = config.beta1 * state.first[name] + (1.0 - config.beta1) * g
        v = config.beta2 * state.second[name] + (1.0 - config.beta2) * g * g
        m_hat = m / (1.0 - config.beta1**t)
        v_hat = v / (1.0 - config.beta2**t)
        new_params[name] = p - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.eps)
        new_first[name] = m
        new_second[name] = v
    return new_params, AdamState(t, new_first, new_second)


# ------------------------------------------------------------ batch assembly


@dataclass
class BatchData:
    """Raw per-batch inputs: patch grids and token id sequences."""

    patch_grids: np.ndarray  # N x P x F
    global_ids: list[list[int]]
    local_ids: list[list[list[int]]]  # per sample, per realized slot
    slot_mask: np.ndarray  # N x M boolean

    @property
    def batch_size(self) -> int:
        return self.patch_grids.shape[0]


@dataclass
class _PreparedRecord:
    patches: np.ndarray
    global_ids: list[int]
    local_ids: list[list[int]]  # one entry per caption local sentence


def _prepare_records(dataset: Sequence[DatasetRecord], config: TrainConfig) -> list[_PreparedRecord]:
    prepared = []
    for position, record in enumerate(dataset):
        if record.patches.shape != (config.patch_count, config.feature_dim):
            raise ConfigInvalid(
                f"record {position} patch grid {record.patches.shape} does not match "
                f"config ({config.patch_count}, {config.feature_dim})"
            )
        global_text = select_global_text(record.caption, config.global_text)
        global_ids = list(tokenize(global_text, config.vocab_size).ids)
        if not global_ids:
            raise ConfigInvalid(f"record {position} has an untokenizable global text")
        local_ids = [
            list(tokenize(sentence, config.vocab_size).ids)
            for sentence in record.caption.local_sentences
        ]
        if any(not ids for ids in local_ids):
            raise ConfigInvalid(f"record {position} has an untokenizable local sentence")
        prepared.append(_PreparedRecord(record.patches, global_ids, local_ids))
    return prepared


def _sample_local_indices(available: int, count: int, rng: np.random.Generator) -> np.ndarray:
    # same draw as caption sampling: uniform subset, original order kept
    take = min(count, available)
    return np.sort(rng.choice(available, size=take, replace=False))


def assemble_batch(
    prepared: Sequence[_PreparedRecord],
    positions: Sequence[int],
    config: TrainConfig,
    epoch: int,
) -> BatchData:
    """Gather one batch; local sentences are re-sampled per (epoch, record)."""
    grids = np.stack([prepared[p].patches for p in positions])
    global_ids = [prepared[p].global_ids for p in positions]
    local_ids: list[list[list[int]]] = []
    mask = np.zeros((len(positions), config.local_count), dtype=bool)
    for row, p in enumerate(positions):
        rng = np.random.default_rng([config.seed, _STREAM_LOCALS, epoch, int(p)])
        chosen = _sample_local_indices(len(prepared[p].local_ids), config.local_count, rng)
        local_ids.append([prepared[p].local_ids[i] for i in chosen])
        mask[row, : len(chosen)] = True
    return BatchData(grids, global_ids, local_ids, mask)


# ------------------------------------------------------------ step graph


@dataclass
class StepGraph:
    """Nodes of one training step, plus the leaves to differentiate."""

    leaves: dict[str, nx.Leaf]
    tau: nx.Node
    image_global: nx.Node
    text_global: nx.Node
    all_locals: nx.Node  # S x D, realized (sample, slot) rows in sample order
    all_pooled: nx.Node  # S x D, aligned with all_locals
    per_sample_rows: list[list[int]]  # padded to local_count per sample
    slot_mask: np.ndarray


def build_step_graph(data: BatchData, config: TrainConfig) -> StepGraph:
    leaves = {name: nx.leaf(name) for name in PARAM_NAMES}
    tau = nx.clamp(nx.exp(leaves["temperature_logit"]), config.tau_floor, TAU_CEIL)

    patch_means = data.patch_grids.mean(axis=1)  # pooling raw features commutes
    image_global = nx.l2norm_rows(
        nx.matmul(nx.const(patch_means), leaves["image_global_projection"])
    )

    def pooled_tokens(ids: list[int]) -> nx.Node:
        return nx.mean_rows(nx.gather_rows(leaves["text_embedding"], ids))

    text_global = nx.l2norm_rows(
        nx.matmul(
            nx.concat_rows([pooled_tokens(ids) for ids in data.global_ids]),
            leaves["text_projection"],
        )
    )

    # realized (sample, slot) rows, lexicographic in (sample, slot)
    local_means: list[nx.Node] = []
    per_sample_rows: list[list[int]] = []
    realized_rows: list[list[int]] = []
    row = 0
    for ids_per_slot in data.local_ids:
        rows = []
        for ids in ids_per_slot:
            local_means.append(pooled_tokens(ids))
            rows.append(row)
            row += 1
        realized_rows.append(rows)
        # absent slots reuse the first realized row; mask and candidate
        # validity null their influence, the duplicate only keeps shapes fixed
        per_sample_rows.append(rows + [rows[0]] * (config.local_count - len(rows)))

    all_locals = nx.l2norm_rows(
        nx.matmul(nx.concat_rows(local_means), leaves["text_projection"])
    )

    pooled_blocks: list[nx.Node] = []
    for i in range(data.batch_size):
        tokens = nx.matmul(nx.const(data.patch_grids[i]), leaves["image_patch_projection"])
        queries = nx.gather_rows(all_locals, realized_rows[i])
        pooled_blocks.append(
            cross_attention_graph(
                queries,
                tokens,
                leaves["attn_query"],
                leaves["attn_key"],
                leaves["attn_value"],
                config.embed_dim,
            )
        )
    all_pooled = nx.concat_rows(pooled_blocks)

    return StepGraph(
        leaves=leaves,
        tau=tau,
        image_global=image_global,
        text_global=text_global,
        all_locals=all_locals,
        all_pooled=all_pooled,
        per_sample_rows=per_sample_rows,
        slot_mask=data.slot_mask,
    )


@dataclass
class LossNodes:
    total: nx.Node
    global_term: nx.Node
    intra_term: nx.Node
    inter_term: nx.Node


def build_loss_nodes(
    graph: StepGraph, config: TrainConfig, sets: BatchPositiveSets | None
) -> LossNodes:
    """Objective on top of a step graph; mined variants iff sets are given."""
    inv_tau = nx.reciprocal(graph.tau)
    n = len(graph.per_sample_rows)
    m = config.local_count

    per_sample_text = [nx.gather_rows(graph.all_locals, rows) for rows in graph.per_sample_rows]
    per_sample_pooled = [nx.gather_rows(graph.all_pooled, rows) for rows in graph.per_sample_rows]
    per_slot_text = [
        nx.gather_rows(graph.all_locals, [graph.per_sample_rows[i][j] for i in range(n)])
        for j in range(m)
    ]
    per_slot_pooled = [
        nx.gather_rows(graph.all_pooled, [graph.per_sample_rows[i][j] for i in range(n)])
        for j in range(m)
    ]

    if sets is None:
        global_term = global_loss_graph(graph.image_global, graph.text_global, inv_tau, n)
        inter_term = inter_local_loss_graph(
            per_slot_text, per_slot_pooled, inv_tau, graph.slot_mask
        )
    else:
        global_term = mined_global_loss_graph(
            graph.image_global,
            graph.text_global,
            inv_tau,
            n,
            sets.text_global,
            sets.image_global,
        )
        inter_term = mined_inter_local_loss_graph(
            per_slot_text,
            per_slot_pooled,
            inv_tau,
            graph.slot_mask,
            sets.text_per_slot,
            sets.pooled_per_slot,
        )
    intra_term = intra_local_loss_graph(
        per_sample_text, per_sample_pooled, inv_tau, graph.slot_mask
    )
    local_sum = nx.add(intra_term, inter_term)
    total = nx.add(global_term, nx.scale(local_sum, config.alpha))
    return LossNodes(total, global_term, intra_term, inter_term)


def _embedding_batch(
    session: nx.Session, graph: StepGraph, config: TrainConfig
) -> EmbeddingBatch:
    """Evaluate the step embeddings into arrays for mining and statistics."""
    locals_value = np.asarray(session.value(graph.all_locals), dtype=np.float64)
    pooled_value = np.asarray(session.value(graph.all_pooled), dtype=np.float64)
    n = len(graph.per_sample_rows)
    m = config.local_count
    d = locals_value.shape[1]
    text_local = np.zeros((n, m, d))
    image_pooled = np.zeros((n, m, d))
    for i, rows in enumerate(graph.per_sample_rows):
        for j in range(m):
            if graph.slot_mask[i, j]:
                text_local[i, j] = locals_value[rows[j]]
                image_pooled[i, j] = pooled_value[rows[j]]
    return EmbeddingBatch(
        image_global=np.asarray(session.value(graph.image_global), dtype=np.float64),
        text_global=np.asarray(session.value(graph.text_global), dtype=np.float64),
        text_local=text_local,
        image_pooled=image_pooled,
        temperature=float(np.asarray(session.value(graph.tau)).reshape(())),
        slot_mask=graph.slot_mask,
    )


# ------------------------------------------------------------ training loop


@dataclass(frozen=True)
class EpochRecord:
    """Epoch means of the loss components plus schedule observables."""

    epoch: int
    total_loss: float
    global_loss: float
    intra_loss: float
    inter_loss: float
    temperature: float
    mean_positive_set_size: float
    cmgpm_active: bool
    config_hash: str


@dataclass(frozen=True)
class TrainHistory:
    records: tuple[EpochRecord, ...]


@dataclass
class Checkpoint:
    """Trained parameters, optimizer moments, and the run's configuration."""

    params: dict[str, np.ndarray]
    moments: AdamState
    epochs_completed: int
    config: TrainConfig

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)


@dataclass
class StepResult:
    total: float
    global_term: float
    intra_term: float
    inter_term: float
    temperature: float
    mean_positive_set_size: float
    grads: dict[str, np.ndarray]


def run_step(
    params: dict[str, np.ndarray],
    data: BatchData,
    config: TrainConfig,
    epoch: int,
    with_grads: bool = True,
) -> StepResult:
    """Forward (and optionally backward) pass for one batch."""
    graph = build_step_graph(data, config)
    session = nx.Session(params, config.precision)
    batch = _embedding_batch(session, graph, config)
    sets = mine_batch_sets(batch, config.sigma, config.top_k)
    active = epoch >= config.mining_epoch
    losses = build_loss_nodes(graph, config, sets if active else None)
    values = {
        "total": float(session.value(losses.total)),
        "global": float(session.value(losses.global_term)),
        "intra": float(session.value(losses.intra_term)),
        "inter": float(session.value(losses.inter_term)),
    }
    grads: dict[str, np.ndarray] = {}
    if with_grads:
        grads = session.gradients(losses.total, [graph.leaves[n] for n in PARAM_NAMES])
    return StepResult(
        total=values["total"],
        global_term=values["global"],
        intra_term=values["intra"],
        inter_term=values["inter"],
        temperature=batch.temperature,
        mean_positive_set_size=sets.mean_global_size(),
        grads=grads,
    )


def train(dataset: Sequence[DatasetRecord], config: TrainConfig) -> tuple[Checkpoint, TrainHistory]:
    """Run the full schedule; deterministic given (dataset, config)."""
    if len(dataset) == 0:
        raise EmptyDataset("training requires at least one record")
    if len(dataset) < config.batch_size:
        raise ConfigInvalid(
            f"batch_size {config.batch_size} exceeds dataset size {len(dataset)}; "
            "short batches are dropped, so no step would run"
        )
    prepared = _prepare_records(dataset, config)
    params = init_parameters(config)
    state = AdamState.zeros(params)
    chash = config_hash(config)

    records = []
    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, _STREAM_ORDER, epoch]).permutation(
            len(prepared)
        )
        step_count = len(prepared) // config.batch_size
        sums = np.zeros(5)
        temperature = clamp_temperature(
            float(params["temperature_logit"]), config.tau_floor, TAU_CEIL
        )
        for b in range(step_count):
            positions = order[b * config.batch_size : (b + 1) * config.batch_size]
            data = assemble_batch(prepared, positions, config, epoch)
            result = run_step(params, data, config, epoch)
            if not math.isfinite(result.total):
                raise NumericalFailure(epoch, b, "loss")
            if any(not np.isfinite(g).all() for g in result.grads.values()):
                raise NumericalFailure(epoch, b, "gradient")
            params, state = optimizer_step(params, result.grads, state, config)
            sums += (
                result.total,
                result.global_term,
                result.intra_term,
                result.inter_term,
                result.mean_positive_set_size,
            )
            temperature = clamp_temperature(
                float(params["temperature_logit"]), config.tau_floor, TAU_CEIL
            )
        means = sums / step_count
        records.append(
            EpochRecord(
                epoch=epoch,
                total_loss=float(means[0]),
                global_loss=float(means[1]),
                intra_loss=float(means[2]),
                inter_loss=float(means[3]),
                temperature=temperature,
                mean_positive_set_size=float(means[4]),
                cmgpm_active=epoch >= config.mining_epoch,
                config_hash=chash,
            )
        )
    checkpoint = Checkpoint(
        params=params, moments=state, epochs_completed=config.epochs, config=config
    )
    return checkpoint, TrainHistory(tuple(records))


def compute_batch_loss(
    params: dict[str, np.ndarray],
    dataset: Sequence[DatasetRecord],
    config: TrainConfig,
    epoch: int,
    positions: Sequence[int] | None = None,
) -> StepResult:
    """Loss components on one batch without updating anything."""
    prepared = _prepare_records(dataset, config)
    if positions is None:
        positions = list(range(min(config.batch_size, len(prepared))))
    data = assemble_batch(prepared, positions, config, epoch)
    return run_step(params, data, config, epoch, with_grads=False)


# ------------------------------------------------------------- persistence


def _write_array(out: list[bytes], name: str, array: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    out.append(struct.pack("<H", len(encoded)))
    out.append(encoded)
    array = np.ascontiguousarray(array)
    code = _DTYPE_CODES.get(array.dtype)
    if code is None:
        raise CheckpointFormatError(f"array {name!r} has unsupported dtype {array.dtype}")
    out.append(struct.pack("<BB", code, array.ndim))
    for dim in array.shape:
        out.append(struct.pack("<I", dim))
    out.append(array.astype(_CODE_DTYPES[code], copy=False).tobytes(order="C"))


def save_checkpoint(checkpoint: Checkpoint, path: str | Path) -> None:
    """Versioned little-endian container; identical inputs, identical bytes."""
    config_blob = json.dumps(
        config_to_dict(checkpoint.config), sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    chunks: list[bytes] = [_CHECKPOINT_MAGIC]
    chunks.append(struct.pack("<I", len(config_blob)))
    chunks.append(config_blob)
    chunks.append(struct.pack("<I", checkpoint.epochs_completed))
    chunks.append(struct.pack("<Q", checkpoint.moments.step))

    named: list[tuple[str, np.ndarray]] = []
    named.extend((f"param.{k}", v) for k, v in checkpoint.params.items())
    named.extend((f"m.{k}", v) for k, v in checkpoint.moments.first.items())
    named.extend((f"v.{k}", v) for k, v in checkpoint.moments.second.items())
    named.sort(key=lambda kv: kv[0])

    chunks.append(struct.pack("<I", len(named)))
    for name, array in named:
        _write_array(chunks, name, array)
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.blob):
            raise CheckpointFormatError("checkpoint truncated")
        piece = self.blob[self.pos : self.pos + count]
        self.pos += count
        return piece

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: str | Path) -> Checkpoint:
    reader = _Reader(Path(path).read_bytes())
    if reader.take(len(_CHECKPOINT_MAGIC)) != _CHECKPOINT_MAGIC:
        raise CheckpointFormatError("bad magic bytes")
    (config_len,) = reader.unpack("<I")
    try:
        config_data = json.loads(reader.take(config_len).decode("utf-8"))
        config = config_from_dict(config_data)
    except (UnicodeDecodeError, json.JSONDecodeError, ConfigInvalid, TypeError) as err:
        raise CheckpointFormatError(f"bad embedded config: {err}") from err
    (epochs_completed,) = reader.unpack("<I")
    (step,) = reader.unpack("<Q")
    (array_count,) = reader.unpack("<I")

    arrays: dict[str, np.ndarray] = {}
    for _ in range(array_count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        code, ndim = reader.unpack("<BB")
        if code not in _CODE_DTYPES:
            raise CheckpointFormatError(f"unknown dtype code {code}")
        shape = tuple(reader.unpack("<I")[0] for _ in range(ndim))
        dtype = _CODE_DTYPES[code]
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        data = np.frombuffer(reader.take(count * dtype.itemsize), dtype=dtype)
        arrays[name] = data.reshape(shape).astype(dtype.newbyteorder("="))
    if reader.pos != len(reader.blob):
        raise CheckpointFormatError("trailing bytes after last array")

    params = {k[len("param.") :]: v for k, v in arrays.items() if k.startswith("param.")}
    first = {k[len("m.") :]: v for k, v in arrays.items() if k.startswith("m.")}
    second = {k[len("v.") :]: v for k, v in arrays.items() if k.startswith("v.")}
    missing = set(PARAM_NAMES) - set(params)
    if missing or set(first) != set(params) or set(second) != set(params):
        raise CheckpointFormatError("checkpoint is missing named arrays")
    order = [n for n in PARAM_NAMES if n in params] + sorted(set(params) - set(PARAM_NAMES))
    return Checkpoint(
        params={n: params[n] for n in order},
        moments=AdamState(step, {n: first[n] for n in order}, {n: second[n] for n in order}),
        epochs_completed=epochs_completed,
        config=config,
    )


def save_history(history: TrainHistory, path: str | Path) -> None:
    """One JSON object per epoch, keys sorted, byte deterministic."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for record in history.records:
            fh.write(json.dumps(asdict(record), sort_keys=True, separators=(",", ":")))
            fh.write("\n")


def load_history(path: str | Path) -> TrainHistory:
    records = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                records.append(EpochRecord(**json.loads(line)))
    return TrainHistory(tuple(records))

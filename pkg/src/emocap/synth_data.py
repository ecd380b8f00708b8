"""Deterministic synthetic corpus: patch grids paired with structured captions.

Every record is built from a per-class feature prototype plus isotropic noise,
and a caption assembled from class-specific word pools over a shared glue
vocabulary. Class pools are disjoint by construction (every class-specific
word embeds the class name), so captions carry class identity through the
hashing tokenizer while sharing enough glue words to make the task
non-trivial. The class name itself appears in the global and summary
sentences, which is what lets prompt-based zero-shot classification transfer.

All randomness flows from ``(seed, stream, split, ...)`` seed sequences, so a
spec value determines the corpus byte for byte, and a different split shares
prototypes (same classes) while drawing fresh noise and captions.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .caption_schema import StructuredCaption, fnv1a64

DEFAULT_CLASS_NAMES = (
    "joyful",
    "sorrowful",
    "furious",
    "fearful",
    "disgusted",
    "astonished",
    "scornful",
    "serene",
    "anxious",
    "wistful",
    "elated",
    "gloomy",
    "irritated",
    "startled",
    "smug",
    "tender",
)

REGIONS = ("brow", "eyes", "cheek", "mouth", "jaw", "forehead", "nose", "chin")

ADJECTIVE_SUFFIXES = ("cast", "tone", "glow", "air")

_STREAM_PROTOTYPES = 101
_STREAM_RECORD = 102
_STREAM_SHUFFLE = 103

_SPLIT_RE = re.compile(r"^[a-z0-9][a-z0-9-]*$")


class DatasetParseError(ValueError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line


class InconsistentShape(DatasetParseError):
    def __init__(self, line: int, reason: str):
        super().__init__(line, reason)


def class_names(count: int) -> tuple[str, ...]:
    """Canonical class names; synthetic tokens beyond the named list."""
    if count < 1:
        raise ValueError("count must be positive")
    names = list(DEFAULT_CLASS_NAMES[:count])
    names.extend(f"mood{i}" for i in range(len(names), count))
    return tuple(names)


@dataclass(frozen=True)
class SynthSpec:
    """Full description of one synthetic corpus."""

    classes: int = 8
    per_class: int = 32
    patch_count: int = 4
    feature_dim: int = 16
    noise_sigma: float = 0.05
    locals_min: int = 3
    locals_max: int = 6
    seed: int = 1
    split: str = "train"
    shuffled_pairs: bool = False
    frame_group_size: int = 0

    def __post_init__(self):
        if self.classes < 1 or self.per_class < 1:
            raise ValueError("classes and per_class must be positive")
        if self.patch_count < 1 or self.feature_dim < 1:
            raise ValueError("patch_count and feature_dim must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        if not 1 <= self.locals_min <= self.locals_max <= len(REGIONS):
            raise ValueError(
                f"need 1 <= locals_min <= locals_max <= {len(REGIONS)}"
            )
        if not _SPLIT_RE.match(self.split):
            raise ValueError("split must be lowercase alphanumeric (dashes allowed)")
        if self.frame_group_size < 0:
            raise ValueError("frame_group_size must be nonnegative")


@dataclass
class DatasetRecord:
    """One image (patch grid) with its caption and class label."""

    record_id: str
    label: int
    patches: np.ndarray  # P x F
    caption: StructuredCaption
    frame_group: str | None = None

    def __post_init__(self):
        self.patches = np.asarray(self.patches, dtype=np.float64)
        if self.patches.ndim != 2:
            raise ValueError("patches must be 2-d")
        if not np.isfinite(self.patches).all():
            raise ValueError("patches must be finite")
        if self.label < 0:
            raise ValueError("label must be nonnegative")


@dataclass(frozen=True)
class VocabPartition:
    """Class-specific word pools plus the shared glue pool."""

    names: tuple[str, ...]
    adjectives: tuple[tuple[str, ...], ...]  # per class
    cues: tuple[tuple[str, ...], ...]  # per class, one word per region
    shared: tuple[str, ...]


def vocab_partition(spec: SynthSpec) -> VocabPartition:
    names = class_names(spec.classes)
    adjectives = tuple(
        tuple(f"{name}{suffix}" for suffix in ADJECTIVE_SUFFIXES) for name in names
    )
    cues = tuple(tuple(f"{name}{region}" for region in REGIONS) for name in names)
    shared = REGIONS + (
        "a", "an", "the", "face", "expression", "dominates", "shows",
        "movement", "overall", "reads", "as", "with", "undertone", "turns",
    )
    return VocabPartition(names, adjectives, cues, shared)


def _record_rng(spec: SynthSpec, label: int, index: int) -> np.random.Generator:
    return np.random.default_rng(
        [spec.seed, _STREAM_RECORD, fnv1a64(spec.split.encode()), label, index]
    )


def _compose_caption(
    name: str,
    adjectives: tuple[str, ...],
    cues: tuple[str, ...],
    rng: np.random.Generator,
    spec: SynthSpec,
) -> StructuredCaption:
    local_count = int(rng.integers(spec.locals_min, spec.locals_max + 1))
    region_idx = np.sort(rng.choice(len(REGIONS), size=local_count, replace=False))
    adj = [adjectives[i] for i in rng.integers(0, len(adjectives), size=local_count + 2)]
    global_sentence = f"A {adj[0]} {name} expression dominates the face."
    local_sentences = tuple(
        f"The {REGIONS[r]} turns {cues[r]} with a {adj[1 + pos]} movement."
        for pos, r in enumerate(region_idx)
    )
    summary = f"Overall the face reads as {name} with a {adj[-1]} undertone."
    return StructuredCaption(global_sentence, local_sentences, summary)


def generate_dataset(spec: SynthSpec) -> list[DatasetRecord]:
    """Generate the corpus for a spec; identical specs yield identical records."""
    part = vocab_partition(spec)
    proto_rng = np.random.default_rng([spec.seed, _STREAM_PROTOTYPES])
    prototypes = proto_rng.normal(0.0, 1.0, size=(spec.classes, spec.feature_dim))

    records: list[DatasetRecord] = []
    for label in range(spec.classes):
        for index in range(spec.per_class):
            rng = _record_rng(spec, label, index)
            noise = rng.normal(0.0, 1.0, size=(spec.patch_count, spec.feature_dim))
            patches = prototypes[label][None, :] + spec.noise_sigma * noise
            caption = _compose_caption(
                part.names[label], part.adjectives[label], part.cues[label], rng, spec
            )
            group = None
            if spec.frame_group_size > 0:
                group = f"{spec.split}-c{label}-v{index // spec.frame_group_size}"
            records.append(
                DatasetRecord(
                    record_id=f"{spec.split}-{label:02d}-{index:03d}",
                    label=label,
                    patches=patches,
                    caption=caption,
                    frame_group=group,
                )
            )

    if spec.shuffled_pairs:
        _decouple_captions(records, spec)
    return records


def _decouple_captions(records: list[DatasetRecord], spec: SynthSpec) -> None:
    """Reassign captions so caption class is independent of image class.

    A plain random permutation is not enough at this corpus size: per-class
    pairing counts fluctuate multinomially, and training can exploit the
    residual coupling well above chance. Instead each image class receives an
    equal share of captions from every class (remainders rotate off the
    diagonal), which leaves no count signal to learn from.
    """
    rng = np.random.default_rng(
        [spec.seed, _STREAM_SHUFFLE, fnv1a64(spec.split.encode())]
    )
    by_class: list[list[int]] = [[] for _ in range(spec.classes)]
    for position, record in enumerate(records):
        by_class[record.label].append(position)
    pools = []
    for label in range(spec.classes):
        order = rng.permutation(len(by_class[label]))
        pools.append([records[by_class[label][i]].caption for i in order])
    base, extra = divmod(spec.per_class, spec.classes)
    for label in range(spec.classes):
        sources = [s for s in range(spec.classes) for _ in range(base)]
        sources.extend((label + 1 + i) % spec.classes for i in range(extra))
        sources = [sources[i] for i in rng.permutation(len(sources))]
        for position, source in zip(by_class[label], sources):
            records[position].caption = pools[source].pop()


def save_dataset(records: list[DatasetRecord], path: str | Path) -> None:
    """Write one JSON object per line, keys sorted, byte deterministic."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for record in records:
            payload: dict = {
                "id": record.record_id,
                "label": int(record.label),
                "patches": record.patches.tolist(),
                "caption": {
                    "global": record.caption.global_sentence,
                    "local": list(record.caption.local_sentences),
                    "summary": record.caption.summary_sentence,
                },
            }
            if record.frame_group is not None:
                payload["frame_group"] = record.frame_group
            fh.write(json.dumps(payload, sort_keys=True, separators=(",", ":")))
            fh.write("\n")


def load_dataset(path: str | Path) -> list[DatasetRecord]:
    """Read and validate a JSON-lines corpus; errors carry the line number."""
    records: list[DatasetRecord] = []
    shape: tuple[int, int] | None = None
    with Path(path).open("r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as err:
                raise DatasetParseError(line_no, f"invalid JSON ({err.msg})") from err
            if not isinstance(obj, dict):
                raise DatasetParseError(line_no, "record must be a JSON object")
            try:
                rid = obj["id"]
                label = obj["label"]
                patches = obj["patches"]
                caption = obj["caption"]
            except KeyError as err:
                raise DatasetParseError(line_no, f"missing field {err.args[0]!r}") from err
            if not isinstance(rid, str) or not isinstance(label, int) or isinstance(label, bool):
                raise DatasetParseError(line_no, "id must be a string and label an integer")
            if not isinstance(caption, dict):
                raise DatasetParseError(line_no, "caption must be an object")
            try:
                parsed = StructuredCaption(
                    caption.get("global", ""),
                    tuple(caption.get("local", ())),
                    caption.get("summary", ""),
                )
            except (ValueError, TypeError) as err:
                raise DatasetParseError(line_no, f"bad caption: {err}") from err
            try:
                grid = np.asarray(patches, dtype=np.float64)
            except (ValueError, TypeError) as err:
                raise DatasetParseError(line_no, "patches must be a numeric matrix") from err
            if grid.ndim != 2 or grid.size == 0:
                raise InconsistentShape(line_no, f"patches must be 2-d, got shape {grid.shape}")
            if not np.isfinite(grid).all():
                raise DatasetParseError(line_no, "patches must be finite")
            if shape is None:
                shape = grid.shape
            elif grid.shape != shape:
                raise InconsistentShape(
                    line_no, f"patch grid {grid.shape} differs from first record {shape}"
                )
            group = obj.get("frame_group")
            if group is not None and not isinstance(group, str):
                raise DatasetParseError(line_no, "frame_group must be a string")
            try:
                records.append(
                    DatasetRecord(
                        record_id=rid,
                        label=label,
                        patches=grid,
                        caption=parsed,
                        frame_group=group,
                    )
                )
            except ValueError as err:
                raise DatasetParseError(line_no, str(err)) from err
    return records

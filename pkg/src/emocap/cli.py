"""Command-line entry point binding data synthesis, training, evaluation,
and gradient checking into scriptable workflows.

Exit codes: 0 success, 1 check failure, 2 invalid configuration or usage,
3 I/O failure, 4 numerical failure. Every command is deterministic given its
flags and input files. Precedence: config file < EMOCAP_PRECISION < flags.
"""

from __future__ import annotations

import argparse
import itertools
import json
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import numerics as nx
from .caption_schema import GLOBAL_TEXT_POLICIES, select_global_text, tokenize
from .contrastive_losses import (
    global_loss_graph,
    inter_local_loss_graph,
    intra_local_loss_graph,
)
from .encoders import encode_image, encode_text
from .eval_harness import (
    InsufficientShots,
    LengthMismatch,
    build_prompt_set,
    compute_uar_war,
    linear_probe,
    retrieval_eval,
    video_zero_shot,
    zero_shot_classify,
)
from .positive_mining import (
    mine_positive_sets,
    mined_global_loss_graph,
    mined_inter_local_loss_graph,
)
from .synth_data import (
    DatasetParseError,
    DatasetRecord,
    SynthSpec,
    class_names,
    generate_dataset,
    load_dataset,
    save_dataset,
)
from .trainer import (
    CheckpointFormatError,
    ConfigInvalid,
    EmptyDataset,
    NumericalFailure,
    TrainConfig,
    config_to_dict,
    encoder_params,
    load_checkpoint,
    save_checkpoint,
    save_history,
    train,
)

EXIT_OK = 0
EXIT_CHECK = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

GRADCHECK_TOLERANCE = 1e-5
# stencil step balancing truncation against rounding noise on summed losses
GRADCHECK_STEP = 1e-4

_TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig))
_SPEC_KEYS = tuple(f.name for f in fields(SynthSpec))
_PATH_KEYS = ("data", "output", "checkpoint", "history", "test_data")
_CONFIG_KEYS = tuple(dict.fromkeys(_TRAIN_KEYS + _SPEC_KEYS + _PATH_KEYS))


class CliError(Exception):
    """Failure with a designated process exit code."""

    def __init__(self, message: str, exit_code: int):
        super().__init__(message)
        self.exit_code = exit_code


# ------------------------------------------------------------ config merge


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as err:
        raise CliError(f"cannot read config file: {err}", EXIT_IO) from err
    try:
        data = json.loads(text)
    except json.JSONDecodeError as err:
        raise CliError(f"config file is not valid JSON: {err}", EXIT_CONFIG) from err
    if not isinstance(data, dict):
        raise CliError("config file must hold a JSON object", EXIT_CONFIG)
    unknown = set(data) - set(_CONFIG_KEYS)
    if unknown:
        raise CliError(f"unknown config keys: {sorted(unknown)}", EXIT_CONFIG)
    return data


def _effective(args: argparse.Namespace, keys: tuple[str, ...]) -> dict:
    """File values, then the precision env var, then explicit flags."""
    merged = {k: v for k, v in _load_config_file(args.config).items() if k in keys}
    env = os.environ.get("EMOCAP_PRECISION")
    if env is not None and "precision" in keys:
        if env not in ("f32", "f64"):
            raise CliError(
                f"EMOCAP_PRECISION must be 'f32' or 'f64', got {env!r}", EXIT_CONFIG
            )
        merged["precision"] = env
    for key in keys:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    return merged


def _build_spec(settings: dict) -> SynthSpec:
    try:
        return SynthSpec(**{k: v for k, v in settings.items() if k in _SPEC_KEYS})
    except (ValueError, TypeError) as err:
        raise CliError(f"invalid dataset spec: {err}", EXIT_CONFIG) from err


def _build_train_config(settings: dict) -> TrainConfig:
    try:
        return TrainConfig(**{k: v for k, v in settings.items() if k in _TRAIN_KEYS})
    except (ConfigInvalid, TypeError) as err:
        raise CliError(f"invalid training config: {err}", EXIT_CONFIG) from err


def _read_dataset(path: str) -> list[DatasetRecord]:
    try:
        return load_dataset(path)
    except OSError as err:
        raise CliError(f"cannot read dataset: {err}", EXIT_IO) from err
    except DatasetParseError as err:
        raise CliError(f"dataset {path}: {err}", EXIT_IO) from err


def _read_checkpoint(path: str):
    try:
        return load_checkpoint(path)
    except OSError as err:
        raise CliError(f"cannot read checkpoint: {err}", EXIT_IO) from err
    except (CheckpointFormatError, ConfigInvalid) as err:
        raise CliError(f"checkpoint {path}: {err}", EXIT_IO) from err


def _print_json(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True, indent=2))


# ---------------------------------------------------------------- gen-data


def cmd_gen_data(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    settings = _effective(args, _SPEC_KEYS + ("output",))
    output = settings.pop("output", None)
    if output is None:
        parser.error("an output path is required (--output or config key 'output')")
    spec = _build_spec(settings)
    records = generate_dataset(spec)
    try:
        save_dataset(records, output)
    except OSError as err:
        raise CliError(f"cannot write dataset: {err}", EXIT_IO) from err
    names = class_names(spec.classes)
    counts = [0] * spec.classes
    for record in records:
        counts[record.label] += 1
    print(f"wrote {len(records)} records to {output}")
    for label, (name, count) in enumerate(zip(names, counts)):
        print(f"  class {label} ({name}): {count}")
    print("config:", json.dumps({**spec.__dict__, "output": str(output)}, sort_keys=True))
    return EXIT_OK


# ------------------------------------------------------------------- train


def cmd_train(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    settings = _effective(args, _TRAIN_KEYS + ("data", "checkpoint", "history"))
    data_path = settings.pop("data", None)
    if data_path is None:
        parser.error("a dataset path is required (--data or config key 'data')")
    checkpoint_path = settings.pop("checkpoint", "model.ckpt")
    history_path = settings.pop("history", "history.jsonl")
    config = _build_train_config(settings)
    records = _read_dataset(data_path)
    try:
        checkpoint, history = train(records, config)
    except (ConfigInvalid, EmptyDataset) as err:
        raise CliError(str(err), EXIT_CONFIG) from err
    except NumericalFailure as err:
        raise CliError(str(err), EXIT_NUMERIC) from err
    try:
        save_checkpoint(checkpoint, checkpoint_path)
        save_history(history, history_path)
    except OSError as err:
        raise CliError(f"cannot write training outputs: {err}", EXIT_IO) from err
    last = history.records[-1]
    print("config:", json.dumps(config_to_dict(config), sort_keys=True))
    print(
        f"epoch {last.epoch}: total={last.total_loss:.6f} global={last.global_loss:.6f} "
        f"intra={last.intra_loss:.6f} inter={last.inter_loss:.6f} "
        f"tau={last.temperature:.4f} mined={'on' if last.cmgpm_active else 'off'}"
    )
    print(f"checkpoint: {checkpoint_path}")
    print(f"history: {history_path}")
    return EXIT_OK


# -------------------------------------------------------------------- eval


def _image_globals(records, image_p) -> np.ndarray:
    rows = []
    for record in records:
        try:
            g, _ = encode_image(record.patches, image_p)
        except ValueError as err:
            raise CliError(f"record {record.record_id}: {err}", EXIT_CONFIG) from err
        rows.append(g)
    return np.stack(rows)


def _text_globals(records, text_p, policy: str) -> np.ndarray:
    rows = []
    for record in records:
        text = select_global_text(record.caption, policy)
        rows.append(encode_text(tokenize(text, text_p.vocab_size), text_p))
    return np.stack(rows)


def _eval_base(args: argparse.Namespace):
    settings = _effective(args, ("data", "checkpoint"))
    data_path = settings.get("data")
    checkpoint_path = settings.get("checkpoint")
    if data_path is None or checkpoint_path is None:
        raise CliError("eval needs --data and --checkpoint", EXIT_CONFIG)
    records = _read_dataset(data_path)
    if not records:
        raise CliError("dataset holds no records", EXIT_CONFIG)
    checkpoint = _read_checkpoint(checkpoint_path)
    return records, checkpoint, {"data": str(data_path), "checkpoint": str(checkpoint_path)}


def cmd_eval_zero_shot(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    records, checkpoint, paths = _eval_base(args)
    image_p, text_p, _ = encoder_params(checkpoint.params)
    count = max(r.label for r in records) + 1
    prompts = build_prompt_set(class_names(count), text_p)

    if args.video:
        groups: dict[str, list[DatasetRecord]] = {}
        for record in records:
            key = record.frame_group if record.frame_group is not None else record.record_id
            groups.setdefault(key, []).append(record)
        predictions, labels = [], []
        for key in sorted(groups):
            members = groups[key]
            group_labels = {r.label for r in members}
            if len(group_labels) != 1:
                raise CliError(
                    f"frame group {key!r} mixes labels {sorted(group_labels)}", EXIT_IO
                )
            frames = _image_globals(members, image_p)
            predictions.append(video_zero_shot(frames, prompts))
            labels.append(members[0].label)
        evaluated = len(groups)
    else:
        image_rows = _image_globals(records, image_p)
        predictions = [zero_shot_classify(row, prompts) for row in image_rows]
        labels = [r.label for r in records]
        evaluated = len(records)

    report = compute_uar_war(predictions, labels, class_count=count)
    payload = json.loads(report.to_json())
    payload.update(
        task="zero-shot",
        video=bool(args.video),
        evaluated=evaluated,
        config=config_to_dict(checkpoint.config),
        **paths,
    )
    _print_json(payload)
    return EXIT_OK


def cmd_eval_retrieval(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    records, checkpoint, paths = _eval_base(args)
    image_p, text_p, _ = encoder_params(checkpoint.params)
    image_rows = _image_globals(records, image_p)
    text_rows = _text_globals(records, text_p, checkpoint.config.global_text)
    recall = retrieval_eval(image_rows, text_rows, ks=(1, 5, 10))
    payload = {
        "task": "retrieval",
        "recall_at": recall,
        "evaluated": len(records),
        "config": config_to_dict(checkpoint.config),
        **paths,
    }
    _print_json(payload)
    return EXIT_OK


def cmd_eval_probe(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    records, checkpoint, paths = _eval_base(args)
    image_p, _, _ = encoder_params(checkpoint.params)
    test_path = _effective(args, ("test_data",)).get("test_data")
    test_records = _read_dataset(test_path) if test_path is not None else records
    if not test_records:
        raise CliError("test dataset holds no records", EXIT_CONFIG)
    train_rows = _image_globals(records, image_p)
    test_rows = _image_globals(test_records, image_p)
    try:
        report = linear_probe(
            train_rows,
            [r.label for r in records],
            test_rows,
            [r.label for r in test_records],
            shots=args.shots,
            seed=args.seed,
        )
    except (InsufficientShots, LengthMismatch) as err:
        raise CliError(str(err), EXIT_CONFIG) from err
    payload = json.loads(report.to_json())
    payload.update(
        task="probe",
        shots=args.shots,
        seed=args.seed,
        config=config_to_dict(checkpoint.config),
        **paths,
    )
    if test_path is not None:
        payload["test_data"] = str(test_path)
    _print_json(payload)
    return EXIT_OK


# --------------------------------------------------------------- gradcheck

_GRADCHECK_DIM = 8
_GRADCHECK_TAU = 0.7
_GRADCHECK_THRESHOLD_SIGMA = 0.2


def _gradcheck_graphs(n: int, m: int, rng: np.random.Generator):
    """Random loss instances over embedding leaves at one (N, M) size."""
    bindings = {
        "image_global": rng.normal(size=(n, _GRADCHECK_DIM)),
        "text_global": rng.normal(size=(n, _GRADCHECK_DIM)),
        "text_local": rng.normal(size=(n * m, _GRADCHECK_DIM)),
        "image_pooled": rng.normal(size=(n * m, _GRADCHECK_DIM)),
        "tau_logit": np.array([[np.log(_GRADCHECK_TAU)]]),
    }
    ig = nx.leaf("image_global")
    tg = nx.leaf("text_global")
    tl = nx.leaf("text_local")
    pl = nx.leaf("image_pooled")
    inv_tau = nx.reciprocal(nx.exp(nx.leaf("tau_logit")))
    mask = np.ones((n, m), dtype=bool)

    per_sample_text = [nx.gather_rows(tl, [i * m + j for j in range(m)]) for i in range(n)]
    per_sample_pooled = [nx.gather_rows(pl, [i * m + j for j in range(m)]) for i in range(n)]
    per_slot_text = [nx.gather_rows(tl, [i * m + j for i in range(n)]) for j in range(m)]
    per_slot_pooled = [nx.gather_rows(pl, [i * m + j for i in range(n)]) for j in range(m)]

    top_k = min(3, n)
    sets_text = mine_positive_sets(bindings["text_global"], _GRADCHECK_THRESHOLD_SIGMA, top_k)
    sets_image = mine_positive_sets(bindings["image_global"], _GRADCHECK_THRESHOLD_SIGMA, top_k)
    slot_text_sets = [
        mine_positive_sets(
            bindings["text_local"][[i * m + j for i in range(n)]], _GRADCHECK_THRESHOLD_SIGMA, top_k
        )
        for j in range(m)
    ]
    slot_pooled_sets = [
        mine_positive_sets(
            bindings["image_pooled"][[i * m + j for i in range(n)]], _GRADCHECK_THRESHOLD_SIGMA, top_k
        )
        for j in range(m)
    ]

    plain_global = global_loss_graph(ig, tg, inv_tau, n)
    intra = intra_local_loss_graph(per_sample_text, per_sample_pooled, inv_tau, mask)
    inter = inter_local_loss_graph(per_slot_text, per_slot_pooled, inv_tau, mask)
    mined_global = mined_global_loss_graph(ig, tg, inv_tau, n, sets_text, sets_image)
    mined_inter = mined_inter_local_loss_graph(
        per_slot_text, per_slot_pooled, inv_tau, mask, slot_text_sets, slot_pooled_sets
    )
    total = nx.add(mined_global, nx.scale(nx.add(intra, mined_inter), 0.5))
    graphs = {
        "global": plain_global,
        "intra": intra,
        "inter": inter,
        "mined-global": mined_global,
        "mined-inter": mined_inter,
        "total": total,
    }
    return bindings, graphs


def cmd_gradcheck(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    wrt = ("image_global", "text_global", "text_local", "image_pooled", "tau_logit")
    worst: dict[str, float] = {}
    for n, m in itertools.product((2, 4, 6), (1, 3)):
        rng = np.random.default_rng([args.seed, 41, n, m])
        bindings, graphs = _gradcheck_graphs(n, m, rng)
        for name, node in graphs.items():
            graph = nx.ValueGraph(node)
            if args.inject_sign_fault:
                analytic = nx.gradients(graph, bindings, wrt)
                analytic["image_global"] = -analytic["image_global"]
                report = nx.compare_with_central_differences(
                    graph, bindings, analytic, GRADCHECK_STEP
                )
            else:
                report = nx.check_gradients(graph, bindings, wrt, step=GRADCHECK_STEP)
            worst[name] = max(worst.get(name, 0.0), report.max_rel_error)
    failed = False
    for name, error in worst.items():
        status = "ok" if error < GRADCHECK_TOLERANCE else "FAIL"
        failed = failed or error >= GRADCHECK_TOLERANCE
        print(f"{name:<13} max rel err {error:.3e}  {status}")
    if failed:
        print(f"gradient check failed (threshold {GRADCHECK_TOLERANCE:g})")
        return EXIT_CHECK
    print(f"gradient check passed (threshold {GRADCHECK_TOLERANCE:g})")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def _add_config_flag(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="PATH", help="JSON config file; flags override it")


def _int(parser, *names, **kwargs):
    parser.add_argument(*names, type=int, default=None, **kwargs)


def _float(parser, *names, **kwargs):
    parser.add_argument(*names, type=float, default=None, **kwargs)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="emocap",
        description="Joint global-local contrastive training with mined cross-modal positives.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="write a synthetic captioned dataset")
    _int(gen, "--classes")
    _int(gen, "--per-class", dest="per_class")
    _int(gen, "--patch-count", dest="patch_count")
    _int(gen, "--feature-dim", dest="feature_dim")
    _float(gen, "--noise-sigma", dest="noise_sigma")
    _int(gen, "--locals-min", dest="locals_min")
    _int(gen, "--locals-max", dest="locals_max")
    _int(gen, "--seed")
    gen.add_argument("--split", default=None)
    gen.add_argument(
        "--shuffled-pairs", dest="shuffled_pairs", action="store_const", const=True, default=None,
        help="permute captions across records (negative control)",
    )
    _int(gen, "--frame-group-size", dest="frame_group_size")
    gen.add_argument("--output", "-o", default=None, metavar="PATH")
    _add_config_flag(gen)
    gen.set_defaults(handler=cmd_gen_data, parser_ref=gen)

    tr = sub.add_parser("train", help="train on a dataset; writes checkpoint and history")
    tr.add_argument("--data", "-d", default=None, metavar="PATH")
    tr.add_argument("--checkpoint", default=None, metavar="PATH")
    tr.add_argument("--history", default=None, metavar="PATH")
    _int(tr, "--epochs")
    _int(tr, "--batch-size", dest="batch_size")
    _int(tr, "--local-count", dest="local_count")
    _int(tr, "--embed-dim", dest="embed_dim")
    _int(tr, "--patch-count", dest="patch_count")
    _int(tr, "--feature-dim", dest="feature_dim")
    _int(tr, "--vocab-size", dest="vocab_size")
    _int(tr, "--word-dim", dest="word_dim")
    _float(tr, "--alpha", help="weight of the local loss terms")
    _float(tr, "--sigma", help="mining similarity threshold")
    _int(tr, "--topk", dest="top_k", help="mined positive set size cap")
    _int(tr, "--cmgpm-epoch", dest="mining_epoch", help="epoch activating mined losses")
    _float(tr, "--tau-init", dest="tau_init")
    _float(tr, "--tau-floor", dest="tau_floor")
    _float(tr, "--learning-rate", dest="learning_rate")
    _int(tr, "--seed")
    tr.add_argument("--precision", choices=("f32", "f64"), default=None)
    tr.add_argument("--global-text", dest="global_text", choices=GLOBAL_TEXT_POLICIES, default=None)
    _add_config_flag(tr)
    tr.set_defaults(handler=cmd_train, parser_ref=tr)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    ev_sub = ev.add_subparsers(dest="mode", required=True)

    def eval_common(p):
        p.add_argument("--data", "-d", default=None, metavar="PATH")
        p.add_argument("--checkpoint", default=None, metavar="PATH")
        _add_config_flag(p)

    zs = ev_sub.add_parser("zero-shot", help="class-prompt classification")
    eval_common(zs)
    zs.add_argument("--video", action="store_true", help="pool frames by frame_group")
    zs.set_defaults(handler=cmd_eval_zero_shot, parser_ref=zs)

    rt = ev_sub.add_parser("retrieval", help="image/caption retrieval recall")
    eval_common(rt)
    rt.set_defaults(handler=cmd_eval_retrieval, parser_ref=rt)

    pr = ev_sub.add_parser("probe", help="few-shot linear probe on frozen embeddings")
    eval_common(pr)
    pr.add_argument("--test-data", dest="test_data", default=None, metavar="PATH")
    pr.add_argument("--shots", type=int, default=5)
    pr.add_argument("--seed", type=int, default=0)
    pr.set_defaults(handler=cmd_eval_probe, parser_ref=pr)

    gc = sub.add_parser("gradcheck", help="finite-difference check of every loss graph")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument(
        "--inject-sign-fault", dest="inject_sign_fault", action="store_true",
        help=argparse.SUPPRESS,
    )
    gc.set_defaults(handler=cmd_gradcheck, parser_ref=gc)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.handler(args, args.parser_ref)
    except SystemExit as err:
        return int(err.code or 0)
    except CliError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.exit_code


if __name__ == "__main__":
    sys.exit(main())

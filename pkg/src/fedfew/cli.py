"""Command-line interface: synth, partition, pretrain, run, sweep.

Exit codes: 0 success, 1 runtime failure, 2 invalid input or config.
Every command writes deterministic outputs, so re-running with the same
inputs reproduces files byte for byte.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import copy
import csv
import json
import sys
from pathlib import Path
from typing import Optional

from . import __version__
from .augment import AugmentConfig
from .corpus import (
    Dataset,
    SynthSpec,
    Vocab,
    build_vocab,
    load_jsonl,
    merge_for_vocab,
    split,
    synth_generate,
    synth_pretrain,
    write_jsonl,
)
from .errors import ValidationError
from .federation import RoundConfig, run_session
from .metrics import (
    SweepRow,
    aggregate_seeds,
    best_accuracy,
    relative_performance,
    write_history_csv,
    write_summary_csv,
)
from .model import (
    ModelConfig,
    ModelParams,
    init_params,
    load_checkpoint,
    pretrain_mlm,
    save_checkpoint,
)
from .partition import PartitionSpec, build_partition, emit_heatmap
from .prompt import SYNTH_PATTERN, Pvp
from .runconfig import (
    build_manifest,
    config_digest,
    load_config_file,
    out_root,
    parallel_degree,
    resolve_run,
    resolve_sweep,
    write_manifest,
)


def _dataset_manifest_path(dataset_path) -> Path:
    return Path(str(dataset_path) + ".manifest.json")


def _write_dataset_manifest(dataset: Dataset, path) -> None:
    counts: dict[str, int] = {name: 0 for name in dataset.label_names}
    unlabeled = 0
    for ex in dataset.examples:
        if ex.gold_label is None:
            unlabeled += 1
        else:
            counts[dataset.label_names[ex.gold_label]] += 1
    manifest = {
        "label_names": list(dataset.label_names),
        "counts": counts,
        "unlabeled": unlabeled,
        "examples": len(dataset.examples),
    }
    _dataset_manifest_path(path).write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )


def _load_dataset(path, label_names: Optional[list[str]]) -> Dataset:
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"dataset file not found: {p}")
    if label_names is None:
        manifest = _dataset_manifest_path(p)
        if not manifest.is_file():
            raise ValidationError(
                f"no label names given and no manifest at {manifest}")
        label_names = json.loads(manifest.read_text())["label_names"]
    return load_jsonl(p, label_names)


def cmd_synth(args) -> int:
    spec = SynthSpec(
        num_classes=args.classes,
        examples_per_class=args.examples_per_class,
        keywords_per_class=args.keywords_per_class,
        noise_word_count=args.noise_words,
        pair_mode=args.pair_mode,
        seed=args.seed,
    )
    spec.validate()
    task = synth_generate(spec)
    corpus = synth_pretrain(spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    pretrain_out = Path(args.pretrain_out) if args.pretrain_out else Path(
        str(out).removesuffix(".jsonl") + ".pretrain.jsonl")
    write_jsonl(task, out)
    _write_dataset_manifest(task, out)
    write_jsonl(corpus, pretrain_out)
    _write_dataset_manifest(corpus, pretrain_out)
    print(f"wrote {len(task.examples)} task examples to {out}")
    print(f"wrote {len(corpus.examples)} pretraining sentences to {pretrain_out}")
    return 0


def cmd_partition(args) -> int:
    labels = args.labels.split(",") if args.labels else None
    dataset = _load_dataset(args.dataset, labels)
    spec = PartitionSpec(
        num_clients=args.clients,
        n_labeled=args.n_labeled,
        gamma=args.gamma,
        xi=args.xi,
        alpha=args.alpha,
        seed=args.seed,
        select_random_xi=args.random_xi,
    )
    shards, matrix, shares = build_partition(dataset, spec)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    emit_heatmap(matrix, out_dir / "heatmap.csv")
    manifest = {
        "spec": {
            "num_clients": spec.num_clients,
            "n_labeled": spec.n_labeled,
            "gamma": spec.gamma,
            "xi": spec.xi,
            "alpha": spec.alpha,
            "seed": spec.seed,
            "select_random_xi": spec.select_random_xi,
        },
        "shares": [float(v) for v in shares.values],
        "clients": [
            {
                "client_id": s.client_id,
                "labeled_ids": list(s.labeled_ids),
                "unlabeled_ids": list(s.unlabeled_ids),
            }
            for s in shards
        ],
    }
    (out_dir / "partition.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote heatmap and partition manifest to {out_dir}")
    return 0


def cmd_pretrain(args) -> int:
    labels = args.labels.split(",") if args.labels else None
    if labels is None and not _dataset_manifest_path(args.dataset).is_file():
        # Unlabeled corpora carry no label vocabulary of their own.
        labels = ["unlabeled"]
    corpus = _load_dataset(args.dataset, labels)
    verbalizers = args.verbalizers.split(",") if args.verbalizers else []
    vocab = build_vocab(corpus, verbalizers)
    if args.num_labels is not None:
        num_labels = args.num_labels
    else:
        num_labels = max(2, len(corpus.label_names))
    config = ModelConfig(
        vocab_size=len(vocab),
        num_labels=num_labels,
        d_model=args.d_model,
        num_layers=args.num_layers,
        num_heads=args.num_heads,
        d_ffn=args.d_ffn,
        max_seq_len=args.max_seq_len,
    )
    params = init_params(config, seed=args.seed)
    params = pretrain_mlm(
        params, corpus, args.steps, config, seed=args.seed,
        batch_size=args.batch_size, lr=args.learning_rate, vocab=vocab,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(params, out, extra={
        "vocab": vocab.id_to_token,
        "seed": args.seed,
        "steps": args.steps,
    })
    print(f"wrote checkpoint to {out}")
    return 0


def _build_pvp(cfg: dict, label_names: list[str]) -> Pvp:
    pattern = cfg["pvp"]["pattern"] or SYNTH_PATTERN
    mapping = cfg["pvp"]["verbalizer"]
    if mapping:
        missing = [name for name in label_names if name not in mapping]
        if missing:
            raise ValidationError(f"pvp.verbalizer missing labels: {missing}")
        tokens = tuple(mapping[name] for name in label_names)
    else:
        tokens = tuple(label_names)
    return Pvp(pattern=pattern, verbalizer=tokens)


def _prepare_data(cfg: dict) -> tuple[Dataset, Dataset, Dataset, Dataset]:
    """Returns (train, test, validation, pretraining corpus)."""
    data = cfg["data"]
    if data["train_path"] is not None:
        train = _load_dataset(data["train_path"], data["label_names"])
        test = _load_dataset(data["test_path"], data["label_names"])
        validation = _load_dataset(data["validation_path"], data["label_names"])
        return train, test, validation, train
    spec = SynthSpec(**data["synthetic"])
    task = synth_generate(spec)
    corpus = synth_pretrain(spec)
    train, test, validation = split(
        task, data["test_fraction"], data["validation_fraction"], data["split_seed"])
    return train, test, validation, corpus


def _pretrained_params(
    cfg: dict, seed: int, vocab: Vocab, model_config: ModelConfig, corpus: Dataset
) -> tuple[ModelParams, Vocab]:
    checkpoint = cfg["pretrain"]["checkpoint"]
    if checkpoint:
        path = str(checkpoint).format(seed=seed)
        params, header = load_checkpoint(path)
        tokens = header.get("vocab")
        if tokens:
            vocab = Vocab(token_to_id={t: i for i, t in enumerate(tokens)})
        if params.config.vocab_size != len(vocab):
            raise ValidationError(
                f"{path}: checkpoint vocabulary size {params.config.vocab_size} "
                f"does not match the run vocabulary ({len(vocab)})")
        if params.config.num_labels != model_config.num_labels:
            raise ValidationError(
                f"{path}: checkpoint classifier head has "
                f"{params.config.num_labels} labels but the task has "
                f"{model_config.num_labels}; pretrain with --num-labels "
                f"{model_config.num_labels}")
        return params, vocab
    params = init_params(model_config, seed=seed)
    params = pretrain_mlm(
        params, corpus, cfg["pretrain"]["steps"], model_config, seed=seed,
        batch_size=cfg["pretrain"]["batch_size"],
        lr=cfg["pretrain"]["learning_rate"], vocab=vocab,
    )
    return params, vocab


def execute_run(cfg: dict, digest: Optional[str]) -> int:
    out = out_root(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    train, test, validation, corpus = _prepare_data(cfg)
    label_names = train.label_names
    pvp = _build_pvp(cfg, label_names)
    base_vocab = build_vocab(merge_for_vocab(corpus, train), list(pvp.verbalizer))
    mode = cfg["mode"]

    round_config = RoundConfig(
        mode=mode,
        learning_rate=cfg["rounds"]["learning_rate"],
        max_rounds=cfg["rounds"]["max_rounds"],
        participants_per_round=cfg["rounds"]["participants_per_round"],
        local_iterations=cfg["rounds"]["local_iterations"],
        batch_size=cfg["rounds"]["batch_size"],
        patience=cfg["rounds"]["patience"],
        augmentation_enabled=cfg["augmentation"]["enabled"],
        optimizer=cfg["rounds"]["optimizer"],
    )
    round_config.validate()
    aug = cfg["augmentation"]
    aug_config = AugmentConfig(
        confidence_threshold=aug["confidence_threshold"],
        per_client_budget=aug["per_client_budget"],
        cumulative=aug["cumulative"],
        capacity_check=aug["capacity_check"],
        full_scan=aug["full_scan"],
    )
    aug_config.validate()

    histories = []
    for seed in cfg["seeds"]:
        model_config = ModelConfig(
            vocab_size=len(base_vocab), num_labels=len(label_names), **cfg["model"])
        params, vocab = _pretrained_params(cfg, seed, base_vocab, model_config, corpus)
        shard_list, _, _ = build_partition(
            train, PartitionSpec(seed=seed, **cfg["partition"]))
        shards = {s.client_id: s for s in shard_list}
        records = []
        history_path = out / f"history_seed{seed}.csv"
        try:
            run_session(
                train, test, validation, shards, vocab, params,
                round_config, aug_config,
                pvp if mode == "fedprompt" else None,
                seed=seed,
                measure_time=cfg["measure_time"],
                on_record=records.append,
            )
        except Exception:
            # Persist whatever rounds completed before the failure.
            write_history_csv(records, history_path, seed,
                              cfg["partition"]["n_labeled"], cfg["partition"]["gamma"])
            raise
        write_history_csv(records, history_path, seed,
                          cfg["partition"]["n_labeled"], cfg["partition"]["gamma"])
        histories.append(records)

    mean, std = aggregate_seeds(histories)
    fullset = cfg["fullset_accuracy"]
    row = SweepRow(
        n_labeled=cfg["partition"]["n_labeled"],
        gamma=cfg["partition"]["gamma"],
        mode=mode,
        mean_accuracy=mean,
        std_accuracy=std,
        relative=relative_performance(mean, fullset) if fullset is not None else None,
    )
    write_summary_csv([row], out / "summary.csv")
    write_manifest(out / "manifest.json", build_manifest(cfg, digest))
    return 0


def _collect_overrides(args) -> dict:
    overrides: dict = {}
    for dotted in getattr(args, "set", None) or []:
        if "=" not in dotted:
            raise ValidationError(f"--set expects key=value, got {dotted!r}")
        key, raw = dotted.split("=", 1)
        try:
            value = json.loads(raw)
        except ValueError:
            value = raw
        overrides[key] = value
    if getattr(args, "mode", None):
        overrides["mode"] = args.mode
    if getattr(args, "seeds", None):
        try:
            overrides["seeds"] = [int(s) for s in args.seeds.split(",")]
        except ValueError:
            raise ValidationError(f"--seeds expects integers, got {args.seeds!r}")
    if getattr(args, "out_dir", None):
        overrides["out_dir"] = args.out_dir
    if getattr(args, "n_labeled", None) is not None:
        overrides["partition.n_labeled"] = args.n_labeled
    if getattr(args, "gamma", None) is not None:
        overrides["partition.gamma"] = args.gamma
    if getattr(args, "max_rounds", None) is not None:
        overrides["rounds.max_rounds"] = args.max_rounds
    if getattr(args, "learning_rate", None) is not None:
        overrides["rounds.learning_rate"] = args.learning_rate
    if getattr(args, "augmentation", None):
        overrides["augmentation.enabled"] = args.augmentation == "on"
    return overrides


def cmd_run(args) -> int:
    file_cfg = load_config_file(args.config)
    cfg = resolve_run(file_cfg, _collect_overrides(args))
    return execute_run(cfg, config_digest(args.config))


def _cell_name(n: int, gamma: float, mode: str) -> str:
    return f"n{n}_g{gamma:g}_{mode}"


def _run_cell(cfg: dict, digest: Optional[str]) -> tuple[str, int, str]:
    """Top-level so sweep cells can run in worker processes."""
    name = _cell_name(cfg["partition"]["n_labeled"], cfg["partition"]["gamma"], cfg["mode"])
    try:
        return name, execute_run(cfg, digest), ""
    except ValidationError as exc:
        return name, 2, str(exc)
    except Exception as exc:
        return name, 1, f"{type(exc).__name__}: {exc}"


def _sweep_checkpoints(cfg: dict, out: Path) -> str:
    """Pretrain once per seed and return a checkpoint path template."""
    train, _, _, corpus = _prepare_data(cfg)
    pvp = _build_pvp(cfg, train.label_names)
    vocab = build_vocab(merge_for_vocab(corpus, train), list(pvp.verbalizer))
    template = out / "pretrain_seed{seed}.ckpt"
    for seed in cfg["seeds"]:
        path = Path(str(template).format(seed=seed))
        if path.is_file():
            continue
        model_config = ModelConfig(
            vocab_size=len(vocab), num_labels=len(train.label_names), **cfg["model"])
        params = init_params(model_config, seed=seed)
        params = pretrain_mlm(
            params, corpus, cfg["pretrain"]["steps"], model_config, seed=seed,
            batch_size=cfg["pretrain"]["batch_size"],
            lr=cfg["pretrain"]["learning_rate"], vocab=vocab,
        )
        save_checkpoint(params, path, extra={"vocab": vocab.id_to_token, "seed": seed})
    return str(template)


def cmd_sweep(args) -> int:
    file_cfg = load_config_file(args.config)
    cfg = resolve_sweep(file_cfg, _collect_overrides(args))
    digest = config_digest(args.config)
    out = out_root(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    grid = cfg["grid"]

    base = copy.deepcopy(cfg)
    base.pop("grid")
    if not base["pretrain"]["checkpoint"] and base["pretrain"]["steps"] > 0:
        base["pretrain"]["checkpoint"] = _sweep_checkpoints(base, out)

    pending = []
    for n in grid["n_labeled"]:
        for gamma in grid["gamma"]:
            for mode in grid["mode"]:
                cell_dir = out / _cell_name(n, gamma, mode)
                if (cell_dir / "manifest.json").is_file():
                    continue
                cell = copy.deepcopy(base)
                cell["partition"]["n_labeled"] = n
                cell["partition"]["gamma"] = gamma
                cell["mode"] = mode
                cell["out_dir"] = str(cell_dir)
                pending.append(cell)

    failures = []
    degree = parallel_degree()
    if degree > 1 and len(pending) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=degree) as pool:
            for name, code, message in pool.map(_run_cell, pending, [digest] * len(pending)):
                if code != 0:
                    failures.append((name, code, message))
    else:
        for cell in pending:
            name, code, message = _run_cell(cell, digest)
            if code != 0:
                failures.append((name, code, message))
    for name, code, message in failures:
        print(f"cell {name} failed ({code}): {message}", file=sys.stderr)

    rows = _combine_summaries(out, grid)
    write_summary_csv(rows, out / "summary.csv")
    write_manifest(out / "manifest.json", build_manifest(cfg, digest))
    if failures:
        return max(code for _, code, _ in failures)
    return 0


def _combine_summaries(out: Path, grid: dict) -> list[SweepRow]:
    cells: dict[tuple[int, float, str], SweepRow] = {}
    for n in grid["n_labeled"]:
        for gamma in grid["gamma"]:
            for mode in grid["mode"]:
                path = out / _cell_name(n, gamma, mode) / "summary.csv"
                if not path.is_file():
                    continue
                with open(path, newline="") as fh:
                    for rec in csv.DictReader(fh):
                        cells[(n, gamma, mode)] = SweepRow(
                            n_labeled=n,
                            gamma=gamma,
                            mode=mode,
                            mean_accuracy=float(rec["mean_accuracy"]),
                            std_accuracy=float(rec["std_accuracy"]),
                            relative=float(rec["relative"]) if rec["relative"] else None,
                        )
    rows = []
    for (n, gamma, mode), row in cells.items():
        prompt = cells.get((n, gamma, "fedprompt"))
        cls = cells.get((n, gamma, "fedcls"))
        gain = prompt.mean_accuracy - cls.mean_accuracy if prompt and cls else None
        rows.append(SweepRow(
            n_labeled=row.n_labeled, gamma=row.gamma, mode=row.mode,
            mean_accuracy=row.mean_accuracy, std_accuracy=row.std_accuracy,
            relative=row.relative, gain=gain,
        ))
    return rows


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedfew",
        description="Deterministic federated few-shot text-classification simulator",
    )
    parser.add_argument("--version", action="version", version=f"fedfew {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic task and pretraining corpus")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--examples-per-class", type=int, default=500)
    p.add_argument("--keywords-per-class", type=int, default=6)
    p.add_argument("--noise-words", type=int, default=3)
    p.add_argument("--pair-mode", action="store_true")
    p.add_argument("--seed", type=int, default=11)
    p.add_argument("--out", required=True, help="task dataset JSONL path")
    p.add_argument("--pretrain-out", help="pretraining corpus path "
                   "(default: task path with .pretrain.jsonl)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("partition", help="split a dataset into client shards")
    p.add_argument("dataset", help="JSONL dataset path")
    p.add_argument("--labels", help="comma-separated label names "
                   "(default: read <dataset>.manifest.json)")
    p.add_argument("--clients", type=int, default=32)
    p.add_argument("--n-labeled", type=int, required=True)
    p.add_argument("--gamma", type=float, required=True)
    p.add_argument("--xi", type=int, default=32)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--random-xi", action="store_true",
                   help="draw label-holding clients at random instead of ids 0..xi-1")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("pretrain", help="pretrain the masked language model on a corpus")
    p.add_argument("dataset", help="JSONL corpus path")
    p.add_argument("--labels", help="comma-separated label names")
    p.add_argument("--verbalizers", help="comma-separated extra vocabulary tokens")
    p.add_argument("--num-labels", type=int, default=None,
                   help="classifier head width (default: number of label names)")
    p.add_argument("--d-model", type=int, default=32)
    p.add_argument("--num-layers", type=int, default=2)
    p.add_argument("--num-heads", type=int, default=4)
    p.add_argument("--d-ffn", type=int, default=64)
    p.add_argument("--max-seq-len", type=int, default=32)
    p.add_argument("--steps", type=int, default=6000)
    p.add_argument("--learning-rate", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.set_defaults(func=cmd_pretrain)

    for name, func, help_text in (
        ("run", cmd_run, "run one federated experiment from a config file"),
        ("sweep", cmd_sweep, "run a grid of experiments from a config file"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("config", help="JSON or TOML run configuration")
        p.add_argument("--mode", choices=["fedprompt", "fedcls"])
        p.add_argument("--seeds", help="comma-separated seed list")
        p.add_argument("--out-dir")
        p.add_argument("--n-labeled", type=int)
        p.add_argument("--gamma", type=float)
        p.add_argument("--max-rounds", type=int)
        p.add_argument("--learning-rate", type=float)
        p.add_argument("--augmentation", choices=["on", "off"])
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override any config key by dotted path")
        p.set_defaults(func=func)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())

"""Command-line entry point: ``litset <command> [flags]``.

Every command reads an optional JSON config (``--config``), applies
``--set key.path=value`` overrides and then explicit flags, and writes the
resolved config plus the invocation beside its outputs. Exit status is 0 on
success, 1 on invalid input or usage and 2 when the run itself fails.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from multiprocessing import get_context
from pathlib import Path
from typing import Any, Callable, Sequence

from .config import ConfigError, ExperimentConfig, lookup
from .corpus import CorpusFormatError, compute_stats, downsample_to_mention_count, load_corpus, \
    save_corpus

log = logging.getLogger("litset")

_DEFAULTS = ExperimentConfig()


class CliError(Exception):
    """Invalid usage or input; maps to exit status 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# flag helpers: most flags are named overrides of a config key


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _strs(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def _flag(parser, *names, key: str, help: str, type=str, **kw):
    default = lookup(_DEFAULTS, key)
    if isinstance(default, list):
        default = ",".join(map(str, default))
    if "choices" not in kw:
        kw.setdefault("metavar", names[-1].lstrip("-").upper().replace("-", "_"))
    parser.add_argument(*names, dest=f"cfg:{key}", default=None, type=type,
                        help=f"{help} (default: {default})", **kw)


def _switch(parser, name: str, key: str, help: str):
    parser.add_argument(name, dest=f"cfg:{key}", action="store_const", const=True, default=None,
                        help=f"{help} (default: {lookup(_DEFAULTS, key)})")


def _common(parser, stochastic: bool):
    parser.add_argument("--config", help="JSON experiment config")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. lit_train.learning_rate=2e-5")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    if stochastic:
        parser.add_argument("--seed", type=int, required=True, help="seed for this command")


def _output(parser):
    _flag(parser, "-o", "--output", key="paths.output_dir", help="output directory")


def _encoder_flags(parser):
    g = parser.add_argument_group("encoders")
    _flag(g, "--encoder", key="encoder.token_encoder_id",
          help="token encoder: Hugging Face model name or tiny:layers=..,hidden=..")
    _flag(g, "--label-encoder", key="encoder.label_encoder_id", help="label encoder")
    _flag(g, "--max-seq-len", key="encoder.max_sequence_length", type=int,
          help="maximum subword sequence length")
    _flag(g, "--o-verbalization", key="encoder.o_verbalization",
          help="text encoded for the O label (default: the inventory's)")


def _train_flags(parser, phase: str):
    key = "lit_train" if phase == "lit" else "fs_train"
    g = parser.add_argument_group(f"{phase} training")
    _flag(g, f"--{phase}-lr", key=f"{key}.learning_rate", type=float, help="peak learning rate")
    _flag(g, f"--{phase}-batch-size", key=f"{key}.batch_size", type=int, help="sentences per batch")
    _flag(g, f"--{phase}-warmup", key=f"{key}.warmup_fraction", type=float,
          help="fraction of steps used for linear warmup")
    _flag(g, f"--{phase}-weight-decay", key=f"{key}.weight_decay", type=float, help="AdamW weight decay")
    _flag(g, f"--{phase}-negatives", key=f"{key}.negatives_m", type=int,
          help="pad each batch label space with random negatives up to this many labels")
    if phase == "lit":
        _flag(g, "--lit-epochs", key="lit_train.epochs", type=int, help="training epochs")
    else:
        _flag(g, "--fs-max-epochs", key="fs_train.max_epochs", type=int, help="epoch cap")
        _flag(g, "--fs-patience", key="fs_train.patience", type=int,
              help="stop after this many epochs without a strictly lower training loss")
        _flag(g, "--fs-stop-unit", key="fs_train.early_stop_unit", choices=["epoch", "step"],
              help="early stopping granularity")


def _split_flags(parser):
    g = parser.add_argument_group("label split")
    _flag(g, "--split-mode", key="split.mode", choices=["frequency", "intra", "inter", "random_half"],
          help="how labels are divided between the two phases")
    _flag(g, "--n-lit", key="split.n_lit", type=int, help="most frequent labels kept for LIT (frequency)")
    _flag(g, "--n-fs", key="split.n_fs", type=int, help="least frequent labels used few-shot (frequency)")
    _flag(g, "--coarse-map", key="split.coarse_map", help="JSON file mapping fine type -> coarse class")


def _scheme_flags(parser):
    _flag(parser, "--scheme", key="scheme", choices=["cryptic", "short", "long", "identity"],
          help="relabel types with this verbalization scheme")
    _flag(parser, "--tables", key="paths.tables",
          help="JSON {scheme: {type_id: verbalization}} (default tables ship for FewNERD)")


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    parser = _Parser(prog="litset", description=__doc__, formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("build-litset", help="annotate linked sentences with sampled type verbalizations")
    _common(p, stochastic=True)
    _flag(p, "--kb", key="paths.kb", help="knowledge-base records (JSONL)")
    _flag(p, "--mentions", key="paths.mentions", help="linked mentions (JSONL)")
    _flag(p, "--sentences", key="paths.sentences", help="tokenized sentences (JSONL)")
    _flag(p, "--mode", key="sampling.mode", choices=["sampled", "labels_only", "description_only", "all"],
          help="verbalization source")
    _flag(p, "--p-geometric", key="sampling.p_geometric", type=float,
          help="success probability of the tag-count distribution")
    _flag(p, "--tag-separator", key="sampling.tag_separator", help="joins sampled tags")
    _switch(p, "--per-entity", "sampling.per_entity", "sample once per entity instead of per mention")
    _flag(p, "--denylist", key="denylist", type=_strs,
          help="comma-separated substrings marking meta labels (default: built-in list)")
    p.add_argument("--exclude", help="corpus whose verbalizations are removed from the result")
    p.add_argument("--downsample-to", type=int, help="keep whole sentences until this many mentions")
    _output(p)

    p = sub.add_parser("stats", help="print corpus statistics as JSON")
    _common(p, stochastic=False)
    p.add_argument("corpus", help="corpus directory, .jsonl or column file")
    p.add_argument("--tag-scheme", default="bio", choices=["bio", "io"],
                   help="tag scheme of column files (default: bio)")
    p.add_argument("-o", "--output", help="also write the statistics to this file")

    p = sub.add_parser("split", help="split labels and write the masked corpora")
    _common(p, stochastic=True)
    _flag(p, "--train", key="paths.train", help="training partition")
    _flag(p, "--test", key="paths.test", help="test partition")
    _split_flags(p)
    p.add_argument("--litset", help="LitSet corpus to filter against the few-shot labels")
    _output(p)

    p = sub.add_parser("train-lit", help="label interpretation training, writes a checkpoint")
    _common(p, stochastic=True)
    p.add_argument("--corpus", required=True, help="label interpretation corpus")
    _scheme_flags(p)
    _encoder_flags(p)
    _train_flags(p, "lit")
    _output(p)

    p = sub.add_parser("finetune", help="few-shot fine-tuning on a sampled k-shot support set")
    _common(p, stochastic=True)
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.add_argument("--fs", required=True, help="few-shot training corpus")
    p.add_argument("--labels-file", help="labels.json written by `split` (default: all corpus types)")
    p.add_argument("--k", type=int, required=True, help="shots per label")
    _scheme_flags(p)
    _train_flags(p, "fs")
    _output(p)

    p = sub.add_parser("evaluate", help="score a checkpoint, or run the full few-shot protocol")
    _common(p, stochastic=False)
    p.add_argument("--seed", type=int,
                   help="first split/support seed; required without --checkpoint")
    p.add_argument("--checkpoint", help="evaluate this checkpoint on --test and exit")
    p.add_argument("--k", type=int, default=0, help="shot count recorded with a checkpoint result")
    p.add_argument("--labels-file", help="labels.json written by `split` (default: all test types)")
    _flag(p, "--train", key="paths.train", help="training partition (protocol mode)")
    _flag(p, "--test", key="paths.test", help="test partition")
    _flag(p, "--litset", key="paths.litset",
          help="train LIT on this corpus, filtered and downsampled to the split's LIT size")
    _flag(p, "--k-list", key="k_list", type=_ints, help="shot counts")
    p.add_argument("--n-seeds", type=int, default=3, help="split and support seeds from --seed (default: 3)")
    _flag(p, "--workers", key="workers", type=int, help="worker processes, one job per split seed")
    _split_flags(p)
    _scheme_flags(p)
    _encoder_flags(p)
    _train_flags(p, "lit")
    _train_flags(p, "fs")
    _output(p)

    p = sub.add_parser("grid", help="label count x verbalization sweep")
    _common(p, stochastic=True)
    _flag(p, "--labels", key="grid.n_labels", type=_ints, help="label counts for LIT")
    _flag(p, "--schemes", key="grid.schemes", type=_strs, help="verbalization schemes")
    _flag(p, "--k", key="grid.k_list", type=_ints, help="shot counts")
    _flag(p, "--budget", key="grid.budget", type=int, help="LIT mentions per cell")
    p.add_argument("--n-seeds", type=int, default=3, help="seeds per cell, counted from --seed (default: 3)")
    _flag(p, "--train", key="paths.train", help="training partition")
    _flag(p, "--test", key="paths.test", help="test partition")
    _flag(p, "--tables", key="paths.tables", help="JSON {scheme: {type_id: verbalization}}")
    _switch(p, "--synthetic", "grid.synthetic", "use the templated synthetic corpus")
    _flag(p, "--synthetic-mentions", key="grid.synthetic_mentions", type=int,
          help="synthetic training mentions")
    _flag(p, "--workers", key="workers", type=int, help="worker processes, one job per cell")
    _split_flags(p)
    _encoder_flags(p)
    _train_flags(p, "lit")
    _train_flags(p, "fs")
    _output(p)

    p = sub.add_parser("report", help="render results JSONL/CSV or a grid file")
    _common(p, stochastic=False)
    p.add_argument("--results", required=True, nargs="+", help="results .jsonl/.csv or grid.json")
    p.add_argument("--format", default="markdown", choices=["csv", "json", "markdown", "svg"],
                   help="output format; svg needs a grid file (default: markdown)")
    p.add_argument("--name", default="run", help="row label in Markdown tables (default: run)")
    p.add_argument("-o", "--output", required=True, help="output file")
    return parser


# ---------------------------------------------------------------------------
# config resolution


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = ExperimentConfig.load(getattr(args, "config", None))
    for item in getattr(args, "set", []):
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        cfg.override(key.strip(), value)
    for dest, value in vars(args).items():
        if dest.startswith("cfg:") and value is not None:
            cfg.override(dest[4:], value, parse_json=False)
    cfg.validate()
    return cfg


def _seed_lists(cfg: ExperimentConfig, seed: int, n: int) -> None:
    if n < 1:
        raise ConfigError("--n-seeds must be >= 1")
    cfg.seeds.split = [seed + i for i in range(n)]
    cfg.seeds.support = [seed + i for i in range(n)]
    cfg.seeds.train = seed


def run_hash(cfg: ExperimentConfig) -> str:
    """Hash of the settings that influence results (output location and worker count excluded)."""
    from .evaluation import config_hash

    payload = cfg.to_dict()
    payload["paths"].pop("output_dir")
    payload.pop("workers")
    return config_hash(payload)


def write_snapshot(cfg: ExperimentConfig, out: Path, command: str, extra: dict | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.resolved.json")
    invocation = {"command": command, "argv": sys.argv[1:], "extra": extra or {}}
    (out / "invocation.json").write_text(json.dumps(invocation, indent=2), encoding="utf-8")


def _load(path: str | None, what: str):
    if path is None:
        raise ConfigError(f"{what} is required")
    if not Path(path).exists():
        raise ConfigError(f"{what}: {path} does not exist")
    return load_corpus(path)


def _load_tables(cfg: ExperimentConfig) -> dict[str, dict[str, str]]:
    if not cfg.paths.tables:
        return {}
    try:
        return json.loads(Path(cfg.paths.tables).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read tables {cfg.paths.tables}: {exc}") from exc


def resolve_scheme(cfg: ExperimentConfig, type_ids: Sequence[str]):
    """The verbalization scheme named by ``cfg.scheme``, or None for identity."""
    from .protocol import (SchemeKind, VerbalizationScheme, cryptic_scheme,
                           load_packaged_scheme)

    if cfg.scheme in (None, "identity"):
        return None
    kind = SchemeKind(cfg.scheme)
    tables = _load_tables(cfg)
    if kind.value in tables:
        return VerbalizationScheme(kind, tables[kind.value])
    if kind is SchemeKind.CRYPTIC:
        return cryptic_scheme(type_ids, cfg.grid.cryptic_seed)
    return load_packaged_scheme(kind)


def _verbalize(corpus, scheme):
    from .protocol import apply_verbalization

    if scheme is None:
        return corpus
    try:
        return apply_verbalization(corpus, scheme)
    except KeyError as exc:
        raise ConfigError(f"{scheme.kind.value} table: {exc.args[0]}") from exc


def _read_labels(path: str | None, fallback: Sequence[str]) -> list[str]:
    if path is None:
        return list(fallback)
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read labels {path}: {exc}") from exc
    return list(payload["l_fs"] if isinstance(payload, dict) else payload)


# ---------------------------------------------------------------------------
# commands


def cmd_build_litset(args, cfg: ExperimentConfig) -> int:
    from .builder import AnnotationReport, annotate_corpus, load_kb_records, load_mentions, \
        load_raw_sentences
    from .protocol import remove_overlap

    cfg.seeds.sampling = args.seed
    cfg.check_paths("kb", "mentions", "sentences")
    kb = load_kb_records(cfg.paths.kb)
    mentions = load_mentions(cfg.paths.mentions)
    sentences = load_raw_sentences(cfg.paths.sentences)
    exclude = _load(args.exclude, "--exclude") if args.exclude else None
    out = Path(cfg.paths.output_dir)
    write_snapshot(cfg, out, "build-litset", {"exclude": args.exclude,
                                              "downsample_to": args.downsample_to})

    report = AnnotationReport()
    corpus = annotate_corpus(sentences, mentions, kb, cfg.sampling_config(), report)
    if exclude is not None:
        corpus = remove_overlap(corpus, [exclude.inventory[t] for t in exclude.inventory.entity_types])
    if args.downsample_to is not None:
        if args.downsample_to > corpus.mention_count:
            raise ConfigError(f"--downsample-to {args.downsample_to} exceeds the "
                              f"{corpus.mention_count} annotated mentions")
        corpus = downsample_to_mention_count(corpus, args.downsample_to, args.seed)
    save_corpus(corpus, out / "corpus")
    stats = asdict(compute_stats(corpus))
    (out / "stats.json").write_text(json.dumps(stats, indent=2), encoding="utf-8")
    (out / "annotation_report.json").write_text(json.dumps(asdict(report), indent=2), encoding="utf-8")
    print(json.dumps(stats))
    return 0


def cmd_stats(args, cfg: ExperimentConfig) -> int:
    if not Path(args.corpus).exists():
        raise ConfigError(f"{args.corpus} does not exist")
    stats = asdict(compute_stats(load_corpus(args.corpus, args.tag_scheme)))
    text = json.dumps(stats, indent=2)
    if args.output:
        Path(args.output).write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


def cmd_split(args, cfg: ExperimentConfig) -> int:
    from .evaluation import FS_TEST, tag_origin
    from .protocol import cryptic_scheme, remove_overlap, split_labels

    cfg.seeds.split = [args.seed]
    train = _load(cfg.paths.train, "--train")
    test = _load(cfg.paths.test, "--test") if cfg.paths.test else None
    litset = _load(args.litset, "--litset") if args.litset else None
    spec = cfg.split_spec(args.seed)
    out = Path(cfg.paths.output_dir)
    write_snapshot(cfg, out, "split", {"litset": args.litset})

    split = split_labels(train, spec, test)
    save_corpus(split.d_lit, out / "lit")
    save_corpus(split.d_fs, out / "fs")
    if split.d_fs_test is not None:
        save_corpus(tag_origin(split.d_fs_test, FS_TEST), out / "fs_test")
    all_types = list(dict.fromkeys(split.l_lit + split.l_fs))
    labels = {"l_lit": list(split.l_lit), "l_fs": list(split.l_fs), "spec": spec.to_json()}
    (out / "labels.json").write_text(json.dumps(labels, indent=2), encoding="utf-8")
    # one cryptic table for both phases so codes never collide across them
    tables = {"cryptic": dict(cryptic_scheme(all_types, args.seed).table)}
    (out / "verbalizations.json").write_text(json.dumps(tables, indent=2), encoding="utf-8")
    summary = {"lit_mentions": split.d_lit.mention_count, "fs_mentions": split.d_fs.mention_count,
               "n_lit": len(split.l_lit), "n_fs": len(split.l_fs)}
    if litset is not None:
        fs_names = [split.d_fs.inventory[t] for t in split.l_fs]
        filtered = remove_overlap(litset, fs_names)
        target = min(split.d_lit.mention_count, filtered.mention_count)
        filtered = downsample_to_mention_count(filtered, target, args.seed)
        save_corpus(filtered, out / "litset")
        summary["litset_mentions"] = filtered.mention_count
    (out / "split_summary.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
    print(json.dumps(summary))
    return 0


def cmd_train_lit(args, cfg: ExperimentConfig) -> int:
    from .biencoder import BiEncoder
    from .evaluation import FS_TEST
    from .trainer import train_label_interpretation

    cfg.seeds.train = args.seed
    corpus = _load(args.corpus, "--corpus")
    corpus = _verbalize(corpus, resolve_scheme(cfg, corpus.inventory.entity_types))
    out = Path(cfg.paths.output_dir)
    write_snapshot(cfg, out, "train-lit", {"corpus": args.corpus})

    model = BiEncoder(cfg.encoder_config(args.seed))
    model, train_log = train_label_interpretation(model, corpus, cfg.lit_config(), {FS_TEST})
    train_log.write(out / "logs", "lit")
    model.save(out / "checkpoint", corpus.inventory,
               {"phase": "lit", "corpus": args.corpus, "seed": args.seed,
                "config_hash": run_hash(cfg)})
    print(json.dumps({"epoch_losses": train_log.epoch_losses, "checkpoint": str(out / "checkpoint")}))
    return 0


def cmd_finetune(args, cfg: ExperimentConfig) -> int:
    from .biencoder import BiEncoder
    from .corpus import write_jsonl_corpus
    from .evaluation import FS_TEST
    from .protocol import InfeasibleSupportError, sample_support_set
    from .trainer import finetune_fewshot, with_seed

    if args.k < 0:
        raise ConfigError("--k must be >= 0")
    cfg.seeds.support = [args.seed]
    d_fs = _load(args.fs, "--fs")
    labels = _read_labels(args.labels_file, d_fs.inventory.entity_types)
    d_fs = _verbalize(d_fs, resolve_scheme(cfg, d_fs.inventory.entity_types))
    ckpt = Path(args.checkpoint)
    if not (ckpt / "manifest.json").exists():
        raise ConfigError(f"{ckpt} is not a checkpoint directory")
    out = Path(cfg.paths.output_dir)
    write_snapshot(cfg, out, "finetune", {"checkpoint": args.checkpoint, "fs": args.fs, "k": args.k})

    model = BiEncoder.load(ckpt)
    try:
        support = sample_support_set(d_fs, args.k, args.seed, labels)
    except InfeasibleSupportError as exc:
        raise ConfigError(str(exc)) from exc
    write_jsonl_corpus(support.as_corpus(d_fs.inventory), out / "support.jsonl")
    model, train_log = finetune_fewshot(model, support, d_fs.inventory,
                                        with_seed(cfg.fs_config(), args.seed), labels, {FS_TEST})
    train_log.write(out / "logs", "fs")
    model.save(out / "checkpoint", d_fs.inventory,
               {"phase": "fs", "parent": str(ckpt), "k": args.k, "support_seed": args.seed,
                "label_counts": support.label_counts, "config_hash": run_hash(cfg)})
    print(json.dumps({"k": args.k, "label_counts": support.label_counts,
                      "epochs": len(train_log.epoch_losses),
                      "early_stop_epoch": train_log.early_stop_epoch}))
    return 0


def _evaluate_checkpoint(args, cfg: ExperimentConfig, out: Path) -> int:
    from .biencoder import BiEncoder
    from .evaluation import RunResult, emit_report, evaluate

    test = _load(cfg.paths.test, "--test")
    labels = _read_labels(args.labels_file, test.inventory.entity_types)
    unknown = [t for t in labels if t not in test.inventory]
    if unknown:
        raise ConfigError(f"labels missing from the test inventory: {unknown}")
    test = _verbalize(test, resolve_scheme(cfg, test.inventory.entity_types))
    ckpt = Path(args.checkpoint)
    if not (ckpt / "manifest.json").exists():
        raise ConfigError(f"{ckpt} is not a checkpoint directory")
    write_snapshot(cfg, out, "evaluate", {"checkpoint": args.checkpoint, "k": args.k})
    manifest = json.loads((ckpt / "manifest.json").read_text(encoding="utf-8"))
    model = BiEncoder.load(ckpt)
    counts = evaluate(model, test, labels)
    prov = manifest.get("provenance", {})
    result = RunResult.from_counts(args.seed or 0, prov.get("support_seed", 0), args.k, counts,
                                   config_hash=run_hash(cfg))
    emit_report([result], out / "results.jsonl", "json")
    print(json.dumps(result.to_record()))
    return 0


def _protocol_job(payload: dict) -> list[dict]:
    """One split seed of the protocol; runs in a worker process when workers > 1."""
    from .biencoder import BiEncoder
    from .evaluation import run_protocol

    cfg = ExperimentConfig.from_dict(payload["config"])
    make_split = _protocol_splitter(cfg)
    results = run_protocol(lambda seed: BiEncoder(cfg.encoder_config(seed)), make_split,
                           cfg.k_list, payload["split_seeds"], cfg.seeds.support, cfg.lit_config(),
                           cfg.fs_config(), payload["run_hash"])
    return [r.to_record() for r in results]


def _protocol_splitter(cfg: ExperimentConfig) -> Callable:
    from .protocol import LabelSplit, remove_overlap, split_labels

    train = load_corpus(cfg.paths.train)
    test = load_corpus(cfg.paths.test)
    litset = load_corpus(cfg.paths.litset) if cfg.paths.litset else None
    all_types = list(dict.fromkeys(train.inventory.entity_types + test.inventory.entity_types))
    scheme = resolve_scheme(cfg, all_types)

    def make_split(seed: int) -> LabelSplit:
        split = split_labels(train, cfg.split_spec(seed), test)
        d_lit = split.d_lit
        if litset is not None:
            fs_names = [split.d_fs.inventory[t] for t in split.l_fs]
            filtered = remove_overlap(litset, fs_names)
            target = min(split.d_lit.mention_count, filtered.mention_count)
            d_lit = downsample_to_mention_count(filtered, target, seed)
        return LabelSplit(_verbalize(d_lit, scheme) if litset is None else d_lit,
                          _verbalize(split.d_fs, scheme), tuple(d_lit.inventory.entity_types),
                          split.l_fs, _verbalize(split.d_fs_test, scheme))

    return make_split


def cmd_evaluate(args, cfg: ExperimentConfig) -> int:
    from .evaluation import RunResult, emit_report, markdown_summary

    out = Path(cfg.paths.output_dir)
    if args.checkpoint:
        return _evaluate_checkpoint(args, cfg, out)
    if args.seed is None:
        raise ConfigError("--seed is required to run the protocol")
    _seed_lists(cfg, args.seed, args.n_seeds)
    cfg.check_paths("train", "test")
    if cfg.paths.litset:
        cfg.check_paths("litset")
    _protocol_splitter(cfg)(cfg.seeds.split[0])  # fail fast on an invalid split or scheme
    write_snapshot(cfg, out, "evaluate")

    payloads = [{"config": cfg.to_dict(), "split_seeds": [s], "run_hash": run_hash(cfg)}
                for s in cfg.seeds.split]
    records = [rec for chunk in run_jobs(_protocol_job, payloads, cfg.workers) for rec in chunk]
    results = [RunResult.from_record(r) for r in records]
    emit_report(results, out / "results.jsonl", "json")
    emit_report(results, out / "results.csv", "csv")
    emit_report(results, out / "summary.md", "markdown", name=Path(cfg.paths.litset or "lit").name)
    print(markdown_summary(results))
    return 0


def _grid_inputs(cfg: ExperimentConfig):
    """(d_lit, d_fs, d_fs_test, l_fs, tables) shared by every grid cell."""
    from .protocol import split_labels

    if cfg.grid.synthetic:
        from .synthetic import generate

        data = generate(cfg.grid.synthetic_mentions, cfg.grid.synthetic_test_sentences,
                        cfg.grid.synthetic_seed)
        train, test = data.train, data.test
        tables = {"short": data.short, "long": data.long}
        split_cfg = dict(cfg.split)
        if split_cfg.get("mode") in ("intra", "inter") and not split_cfg.get("coarse_map"):
            split_cfg["coarse_map"] = data.coarse_map
        spec_cfg = ExperimentConfig(split=split_cfg)
        spec = spec_cfg.split_spec(cfg.seeds.train)
    else:
        train = load_corpus(cfg.paths.train)
        test = load_corpus(cfg.paths.test)
        tables = {}
        spec = cfg.split_spec(cfg.seeds.train)
    tables.update(_load_tables(cfg))
    split = split_labels(train, spec, test)
    return split.d_lit, split.d_fs, split.d_fs_test, split.l_fs, tables


def _grid_job(payload: dict) -> dict:
    from .biencoder import BiEncoder
    from .evaluation import validation_grid

    cfg = ExperimentConfig.from_dict(payload["config"])
    d_lit, d_fs, d_test, l_fs, tables = _grid_inputs(cfg)
    cells = validation_grid(lambda seed: BiEncoder(cfg.encoder_config(seed)), d_lit, d_fs, d_test,
                            l_fs, [payload["n_labels"]], [payload["scheme"]], cfg.grid.budget,
                            cfg.grid.k_list, cfg.seeds.split, cfg.seeds.support,
                            tables, cfg.lit_config(), cfg.fs_config(), cfg.grid.cryptic_seed,
                            payload["run_hash"])
    return cells[0].to_record()


def run_grid(cfg: ExperimentConfig, out: Path) -> list:
    """Validate, run and write a grid; returns the GridCells in sweep order."""
    from .evaluation import GridCell, grid_figure, grid_markdown
    from .protocol import SchemeKind, subset_lit_labels

    for name in cfg.grid.schemes:
        try:
            SchemeKind(name)
        except ValueError as exc:
            raise ConfigError(f"unknown scheme {name!r}") from exc
    if not cfg.grid.synthetic:
        cfg.check_paths("train", "test")
    d_lit, d_fs, d_test, l_fs, tables = _grid_inputs(cfg)
    for name in cfg.grid.schemes:
        if name in ("short", "long") and name not in tables:
            raise ConfigError(f"no {name} verbalization table; pass --tables")
    for n in cfg.grid.n_labels:
        for seed in cfg.seeds.split:
            try:
                subset_lit_labels(d_lit, n, cfg.grid.budget, seed)
            except ValueError as exc:
                raise ConfigError(f"{n} labels, seed {seed}: {exc}") from exc
    write_snapshot(cfg, out, "grid")

    payloads = [{"config": cfg.to_dict(), "n_labels": n, "scheme": s, "run_hash": run_hash(cfg)}
                for n in cfg.grid.n_labels for s in cfg.grid.schemes]
    cells = [GridCell.from_record(r) for r in run_jobs(_grid_job, payloads, cfg.workers)]
    (out / "grid.json").write_text(json.dumps({"cells": [c.to_record() for c in cells]}, indent=2),
                                   encoding="utf-8")
    (out / "grid.md").write_text(grid_markdown(cells), encoding="utf-8")
    grid_figure(cells, out / "grid.svg")
    return cells


def cmd_grid(args, cfg: ExperimentConfig) -> int:
    from .evaluation import grid_markdown

    _seed_lists(cfg, args.seed, args.n_seeds)
    cells = run_grid(cfg, Path(cfg.paths.output_dir))
    print(grid_markdown(cells), end="")
    return 0


def cmd_report(args, cfg: ExperimentConfig) -> int:
    from .evaluation import GridCell, emit_report, grid_figure, grid_markdown, read_results

    results, cells = [], []
    for path in args.results:
        if not Path(path).exists():
            raise ConfigError(f"{path} does not exist")
        if path.endswith(".json"):
            payload = json.loads(Path(path).read_text(encoding="utf-8"))
            cells += [GridCell.from_record(c) for c in payload["cells"]]
        else:
            results += read_results(path)
    results += [r for c in cells for r in c.results]
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.format == "svg":
        if not cells:
            raise ConfigError("svg output needs a grid.json input")
        grid_figure(cells, out)
    elif args.format == "markdown" and cells:
        out.write_text(grid_markdown(cells), encoding="utf-8")
    else:
        if not results:
            raise ConfigError("no results to report")
        emit_report(results, out, args.format, args.name)
    return 0


COMMANDS = {
    "build-litset": cmd_build_litset,
    "stats": cmd_stats,
    "split": cmd_split,
    "train-lit": cmd_train_lit,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "grid": cmd_grid,
    "report": cmd_report,
}


# ---------------------------------------------------------------------------
# job execution


def _init_worker():
    import torch

    torch.set_num_threads(1)


def run_jobs(fn: Callable[[Any], Any], payloads: Sequence[Any], workers: int = 1) -> list:
    """Run ``fn`` over ``payloads``; results keep payload order whatever the worker count."""
    if workers <= 1 or len(payloads) <= 1:
        return [fn(p) for p in payloads]
    with ProcessPoolExecutor(max_workers=workers, mp_context=get_context("spawn"),
                             initializer=_init_worker) as pool:
        return list(pool.map(fn, payloads))


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, CorpusFormatError, CliError, FileNotFoundError) as exc:
        print(f"litset {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        log.exception("run failed")
        print(f"litset {args.command}: failed: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

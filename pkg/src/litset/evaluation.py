"""Span-level micro-F1, the split x support-seed x k-shot protocol, the
label-count x verbalization grid, and report writers."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .biencoder import BiEncoder
from .corpus import Corpus, EntitySpan
from .protocol import (InfeasibleSupportError, LabelSplit, SchemeKind, VerbalizationScheme,
                       apply_verbalization, cryptic_scheme, sample_support_set, subset_lit_labels)
from .trainer import (FS_BASELINE, LIT_BASELINE, TrainConfig, finetune_fewshot,
                      train_label_interpretation, with_seed)

log = logging.getLogger(__name__)

FS_TEST = "fs-test"


@dataclass(frozen=True)
class SpanCounts:
    tp: int
    fp: int
    fn: int

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0


def micro_f1(gold: Sequence[Iterable[EntitySpan]], pred: Sequence[Iterable[EntitySpan]]) -> SpanCounts:
    """Exact-match (start, end, type) span counts pooled over all sentences."""
    if len(gold) != len(pred):
        raise ValueError(f"sentence count mismatch: {len(gold)} gold vs {len(pred)} predicted")
    tp = fp = fn = 0
    for g, p in zip(gold, pred):
        g, p = Counter(g), Counter(p)
        hit = sum((g & p).values())
        tp += hit
        fp += sum(p.values()) - hit
        fn += sum(g.values()) - hit
    return SpanCounts(tp, fp, fn)


@dataclass(frozen=True)
class RunResult:
    split_seed: int
    support_seed: int
    k: int
    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0
    tp: int = 0
    fp: int = 0
    fn: int = 0
    config_hash: str = ""
    skipped: bool = False
    note: str = ""

    @classmethod
    def from_counts(cls, split_seed, support_seed, k, counts: SpanCounts, **kw) -> RunResult:
        return cls(split_seed, support_seed, k, counts.precision, counts.recall, counts.f1,
                   counts.tp, counts.fp, counts.fn, **kw)

    def to_record(self) -> dict:
        return {"split_seed": self.split_seed, "support_seed": self.support_seed, "k": self.k,
                "p": self.precision, "r": self.recall, "f1": self.f1, "tp": self.tp,
                "fp": self.fp, "fn": self.fn, "config_hash": self.config_hash,
                "skipped": self.skipped, "note": self.note}

    @classmethod
    def from_record(cls, rec: Mapping) -> RunResult:
        return cls(int(rec["split_seed"]), int(rec["support_seed"]), int(rec["k"]),
                   float(rec["p"]), float(rec["r"]), float(rec["f1"]), int(rec["tp"]),
                   int(rec["fp"]), int(rec["fn"]), str(rec.get("config_hash", "")),
                   _as_bool(rec.get("skipped", False)), str(rec.get("note", "")))


def _as_bool(value) -> bool:
    if isinstance(value, str):
        return value.strip().lower() in ("1", "true", "yes")
    return bool(value)


def config_hash(payload) -> str:
    blob = json.dumps(payload, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:12]


def evaluate(model: BiEncoder, test: Corpus, labels: Sequence[str], batch_size: int = 16) -> SpanCounts:
    """Score ``test`` with the label space O + ``labels``."""
    pred = model.predict_spans(test.sentences, labels, test.inventory, batch_size)
    return micro_f1([s.spans for s in test.sentences], pred)


def tag_origin(corpus: Corpus, origin: str) -> Corpus:
    return corpus.replace(sentences=tuple(
        s if s.origin == origin else replace(s, origin=origin) for s in corpus.sentences))


def run_protocol(model_factory: Callable[[int], BiEncoder],
                 make_split: Callable[[int], LabelSplit] | LabelSplit,
                 k_list: Sequence[int] = (0, 1, 5, 10),
                 split_seeds: Sequence[int] = (0, 1, 2),
                 support_seeds: Sequence[int] = (0, 1, 2),
                 lit_config: TrainConfig = LIT_BASELINE,
                 fs_config: TrainConfig = FS_BASELINE,
                 run_hash: str = "",
                 logs: dict | None = None,
                 eval_batch_size: int = 16) -> list[RunResult]:
    """Train, fine-tune and evaluate over all (split seed, support seed, k) cells.

    Per split seed a fresh model is trained on the label interpretation corpus;
    every (support seed, k) fine-tunes a clone on a k-shot support set drawn
    from the few-shot training corpus and is evaluated on the few-shot test
    partition. k = 0 is evaluated once per split seed on the
    label-interpretation model and repeated for each support seed. Cells whose
    support set cannot be drawn are returned with ``skipped=True``.
    """
    results: list[RunResult] = []
    logs = logs if logs is not None else {}
    forbidden = {FS_TEST}
    for split_seed in split_seeds:
        split = make_split(split_seed) if callable(make_split) else make_split
        if split.d_fs_test is None:
            raise ValueError("the split has no few-shot test partition")
        test = tag_origin(split.d_fs_test, FS_TEST)
        model = model_factory(split_seed)
        model, lit_log = train_label_interpretation(model, split.d_lit,
                                                    with_seed(lit_config, split_seed), forbidden)
        logs[("lit", split_seed)] = lit_log
        zero_shot = None
        for support_seed in support_seeds:
            for k in k_list:
                if k == 0:
                    if zero_shot is None:
                        zero_shot = evaluate(model, test, split.l_fs, eval_batch_size)
                    results.append(RunResult.from_counts(split_seed, support_seed, 0, zero_shot,
                                                         config_hash=run_hash))
                    continue
                try:
                    support = sample_support_set(split.d_fs, k, support_seed, split.l_fs)
                except InfeasibleSupportError as exc:
                    log.warning("split %d support %d k=%d skipped: %s", split_seed, support_seed, k, exc)
                    results.append(RunResult(split_seed, support_seed, k, config_hash=run_hash,
                                             skipped=True, note=str(exc)))
                    continue
                tuned, fs_log = finetune_fewshot(model.clone(), support, split.d_fs.inventory,
                                                 with_seed(fs_config, support_seed), split.l_fs,
                                                 forbidden)
                logs[("fs", split_seed, support_seed, k)] = fs_log
                counts = evaluate(tuned, test, split.l_fs, eval_batch_size)
                note = f"overshoot={support.max_overshoot}" if support.max_overshoot else ""
                results.append(RunResult.from_counts(split_seed, support_seed, k, counts,
                                                     config_hash=run_hash, note=note))
                log.info("split %d support %d k=%d: F1 %.4f", split_seed, support_seed, k,
                         counts.f1)
    return sorted(results, key=lambda r: (r.split_seed, r.support_seed, r.k))


def aggregate(results: Iterable[RunResult]) -> dict[int, tuple[float, float, int]]:
    """k -> (mean F1, population stddev F1, number of runs), skipped runs excluded."""
    by_k: dict[int, list[float]] = defaultdict(list)
    for r in results:
        if not r.skipped:
            by_k[r.k].append(r.f1)
    return {k: (float(np.mean(v)), float(np.std(v)), len(v)) for k, v in sorted(by_k.items())}


# ---------------------------------------------------------------------------
# validation grid


@dataclass
class GridCell:
    n_labels: int
    scheme: str
    mean_f1: dict[int, float] = field(default_factory=dict)
    stddev: dict[int, float] = field(default_factory=dict)
    n_runs: dict[int, int] = field(default_factory=dict)
    results: list[RunResult] = field(default_factory=list)
    # epoch-mean label interpretation losses per split seed
    lit_epoch_losses: dict[int, list[float]] = field(default_factory=dict)

    def to_record(self) -> dict:
        return {"n_labels": self.n_labels, "scheme": self.scheme,
                "mean_f1": {str(k): v for k, v in self.mean_f1.items()},
                "stddev": {str(k): v for k, v in self.stddev.items()},
                "n_runs": {str(k): v for k, v in self.n_runs.items()},
                "lit_epoch_losses": {str(k): v for k, v in self.lit_epoch_losses.items()},
                "results": [r.to_record() for r in self.results]}

    @classmethod
    def from_record(cls, rec: Mapping) -> GridCell:
        return cls(int(rec["n_labels"]), str(rec["scheme"]),
                   {int(k): float(v) for k, v in rec["mean_f1"].items()},
                   {int(k): float(v) for k, v in rec["stddev"].items()},
                   {int(k): int(v) for k, v in rec["n_runs"].items()},
                   [RunResult.from_record(r) for r in rec["results"]],
                   {int(k): list(v) for k, v in rec.get("lit_epoch_losses", {}).items()})


def validation_grid(model_factory: Callable[[int], BiEncoder], d_lit: Corpus, d_fs: Corpus,
                    d_fs_test: Corpus, l_fs: Sequence[str], n_labels_list: Sequence[int],
                    schemes: Sequence[SchemeKind | str], budget: int,
                    k_list: Sequence[int] = (1, 5, 10), seeds: Sequence[int] = (0, 1, 2),
                    support_seeds: Sequence[int] | None = None,
                    tables: Mapping[str, Mapping[str, str]] | None = None,
                    lit_config: TrainConfig = LIT_BASELINE, fs_config: TrainConfig = FS_BASELINE,
                    cryptic_seed: int = 0, run_hash: str = "",
                    on_cell: Callable[[GridCell], None] | None = None) -> list[GridCell]:
    """Label-interpretation training for every (label count, verbalization) pair,
    each evaluated by :func:`run_protocol` on the same few-shot split.

    ``seeds`` pick the label subset, downsampling and LIT initialisation;
    ``support_seeds`` (default: ``seeds``) pick support sets. ``tables`` maps a
    scheme name to a verbalization table covering every type of ``d_lit`` and
    ``d_fs``; CRYPTIC tables are generated when absent.
    """
    tables = dict(tables or {})
    support_seeds = list(support_seeds if support_seeds is not None else seeds)
    all_types = list(dict.fromkeys(d_lit.inventory.entity_types + d_fs.inventory.entity_types
                                   + d_fs_test.inventory.entity_types))
    cells = []
    for n_labels in n_labels_list:
        for kind in schemes:
            kind = SchemeKind(kind)
            if kind is SchemeKind.CRYPTIC and kind.value not in tables:
                scheme = cryptic_scheme(all_types, cryptic_seed)
            elif kind is SchemeKind.IDENTITY:
                scheme = VerbalizationScheme(kind, {
                    **{t: d_lit.inventory[t] for t in d_lit.inventory.entity_types},
                    **{t: d_fs.inventory[t] for t in d_fs.inventory.entity_types},
                    **{t: d_fs_test.inventory[t] for t in d_fs_test.inventory.entity_types}})
            else:
                scheme = VerbalizationScheme(kind, tables[kind.value])
            fs_v = apply_verbalization(d_fs, scheme)
            test_v = apply_verbalization(d_fs_test, scheme)

            def make_split(seed, n_labels=n_labels, scheme=scheme, fs_v=fs_v, test_v=test_v):
                lit = apply_verbalization(subset_lit_labels(d_lit, n_labels, budget, seed), scheme)
                return LabelSplit(lit, fs_v, tuple(lit.inventory.entity_types), tuple(l_fs), test_v)

            logs: dict = {}
            results = run_protocol(model_factory, make_split, k_list, seeds, support_seeds,
                                   lit_config, fs_config, run_hash, logs)
            agg = aggregate(results)
            cell = GridCell(n_labels, kind.value,
                            mean_f1={k: agg[k][0] for k in agg}, stddev={k: agg[k][1] for k in agg},
                            n_runs={k: agg[k][2] for k in agg}, results=results,
                            lit_epoch_losses={key[1]: v.epoch_losses for key, v in logs.items()
                                              if key[0] == "lit"})
            log.info("grid cell L=%d %s: %s", n_labels, kind.value,
                     {k: round(v, 4) for k, v in cell.mean_f1.items()})
            cells.append(cell)
            if on_cell is not None:
                on_cell(cell)
    return cells


# ---------------------------------------------------------------------------
# reports

_CSV_FIELDS = ["split_seed", "support_seed", "k", "p", "r", "f1", "tp", "fp", "fn",
               "config_hash", "skipped", "note"]


def format_cell(mean: float, std: float) -> str:
    return f"{100 * mean:.1f} ± {100 * std:.1f}"


def markdown_summary(results: Sequence[RunResult], name: str = "run") -> str:
    agg = aggregate(results)
    ks = list(agg)
    header = "| LIT corpus | " + " | ".join(f"{k}-shot" for k in ks) + " | Avg. |"
    rule = "|---|" + "---|" * len(ks) + "---|"
    avg = float(np.mean([agg[k][0] for k in ks])) if ks else float("nan")
    row = f"| {name} | " + " | ".join(format_cell(agg[k][0], agg[k][1]) for k in ks) \
        + f" | {100 * avg:.1f} |"
    return "\n".join([header, rule, row])


def emit_report(results: Sequence[RunResult], path: str | Path, fmt: str = "json",
                name: str = "run") -> Path:
    """Write results as CSV, JSONL (``json``) or a Markdown table, sorted by
    (split_seed, support_seed, k)."""
    if not results:
        raise ValueError("no results to report")
    fmt = fmt.lower()
    path = Path(path)
    ordered = sorted(results, key=lambda r: (r.split_seed, r.support_seed, r.k))
    if fmt == "csv":
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=_CSV_FIELDS)
            writer.writeheader()
            for r in ordered:
                writer.writerow(r.to_record())
    elif fmt == "json":
        with open(path, "w", encoding="utf-8") as fh:
            for r in ordered:
                fh.write(json.dumps(r.to_record()) + "\n")
    elif fmt == "markdown":
        lines = [markdown_summary(ordered, name), "",
                 "| split seed | support seed | k | P | R | F1 |", "|---|---|---|---|---|---|"]
        for r in ordered:
            f1 = "skipped" if r.skipped else f"{100 * r.f1:.1f}"
            lines.append(f"| {r.split_seed} | {r.support_seed} | {r.k} | "
                         f"{100 * r.precision:.1f} | {100 * r.recall:.1f} | {f1} |")
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    return path


def read_results(path: str | Path) -> list[RunResult]:
    path = Path(path)
    if path.suffix == ".csv":
        with open(path, encoding="utf-8", newline="") as fh:
            return [RunResult.from_record(row) for row in csv.DictReader(fh)]
    with open(path, encoding="utf-8") as fh:
        return [RunResult.from_record(json.loads(line)) for line in fh if line.strip()]


def grid_markdown(cells: Sequence[GridCell]) -> str:
    ks = sorted({k for c in cells for k in c.mean_f1})
    lines = ["| labels | scheme | " + " | ".join(f"{k}-shot" for k in ks) + " |",
             "|---|---|" + "---|" * len(ks)]
    for c in cells:
        lines.append(f"| {c.n_labels} | {c.scheme} | " + " | ".join(
            format_cell(c.mean_f1[k], c.stddev[k]) if k in c.mean_f1 else "-" for k in ks) + " |")
    return "\n".join(lines) + "\n"


def grid_figure(cells: Sequence[GridCell], path: str | Path) -> Path:
    """Heatmap (scheme rows x label-count columns) of F1 averaged over k, as SVG."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    schemes = list(dict.fromkeys(c.scheme for c in cells))
    counts = sorted({c.n_labels for c in cells})
    grid = np.full((len(schemes), len(counts)), np.nan)
    for c in cells:
        if c.mean_f1:
            grid[schemes.index(c.scheme), counts.index(c.n_labels)] = \
                100 * float(np.mean(list(c.mean_f1.values())))
    fig, ax = plt.subplots(figsize=(1.2 * len(counts) + 2, 0.8 * len(schemes) + 1.5))
    im = ax.imshow(grid, cmap="viridis", aspect="auto")
    ax.set_xticks(range(len(counts)), [str(n) for n in counts])
    ax.set_yticks(range(len(schemes)), schemes)
    ax.set_xlabel("distinct labels in label interpretation training")
    for i in range(len(schemes)):
        for j in range(len(counts)):
            if not math.isnan(grid[i, j]):
                ax.text(j, i, f"{grid[i, j]:.1f}", ha="center", va="center", color="w")
    fig.colorbar(im, ax=ax, label="mean F1 over k")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return Path(path)

"""Two training phases for the bi-encoder: label interpretation learning on a
large annotated corpus, then few-shot fine-tuning on a support set."""
from __future__ import annotations

import json
import logging
import math
import random
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import torch

from .biencoder import (BatchLabelSpace, BiEncoder, build_batch_label_space, gold_local_ids,
                        in_batch_cross_entropy)
from .corpus import Corpus, Sentence, TypeInventory
from .protocol import SupportSet

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class LeakageError(RuntimeError):
    """A sentence from a held-out partition reached a training batch."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-5
    epochs: int = 3
    batch_size: int = 16
    warmup_fraction: float = 0.1
    weight_decay: float = 0.01
    max_grad_norm: float = 1.0
    # few-shot phase only
    max_epochs: int = 100
    patience: int = 5
    early_stop_unit: str = "epoch"
    fewshot_full_label_space: bool = True
    # negative labels sampled per batch on top of the in-batch labels (0 = none)
    negatives_m: int = 0
    ignore_o_loss: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.early_stop_unit not in ("epoch", "step"):
            raise ValueError("early_stop_unit must be 'epoch' or 'step'")


# learning rates used for label interpretation (lit) and few-shot (fs) training
LIT_BASELINE = TrainConfig(learning_rate=1e-5)
LIT_LITSET = TrainConfig(learning_rate=1e-6)
FS_BASELINE = TrainConfig(learning_rate=1e-5)
FS_LITSET = TrainConfig(learning_rate=5e-6)


@dataclass
class TrainLog:
    phase: str
    config: dict
    step_losses: list[float] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)
    learning_rates: list[float] = field(default_factory=list)
    wall_clock: float = 0.0
    early_stop_epoch: int | None = None
    skipped: bool = False

    def summary(self) -> dict:
        return {"phase": self.phase, "steps": len(self.step_losses),
                "epochs": len(self.epoch_losses), "epoch_losses": self.epoch_losses,
                "wall_clock": self.wall_clock, "early_stop_epoch": self.early_stop_epoch,
                "skipped": self.skipped, "config": self.config}

    def write(self, directory: str | Path, stem: str | None = None) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        stem = stem or self.phase
        with open(directory / f"{stem}_steps.jsonl", "w", encoding="utf-8") as fh:
            for i, (loss, lr) in enumerate(zip(self.step_losses, self.learning_rates)):
                fh.write(json.dumps({"step": i, "loss": loss, "lr": lr}) + "\n")
        (directory / f"{stem}_summary.json").write_text(json.dumps(self.summary(), indent=2),
                                                        encoding="utf-8")


def linear_warmup_decay(step: int, total_steps: int, warmup_fraction: float = 0.1) -> float:
    """LR multiplier: linear ramp to 1 over the first ceil(fraction * total) steps, then linear
    decay reaching 0 at ``total_steps``."""
    warmup = math.ceil(warmup_fraction * total_steps)
    if step < warmup:
        return step / warmup
    if total_steps <= warmup:
        return 1.0 if step < total_steps else 0.0
    return max(0.0, (total_steps - step) / (total_steps - warmup))


def steps_per_epoch(n_sentences: int, batch_size: int) -> int:
    return math.ceil(n_sentences / batch_size)


def should_stop(losses: Sequence[float], patience: int) -> bool:
    """True once the best loss is ``patience`` or more entries old (strict improvement)."""
    if not losses:
        return False
    best_at = min(range(len(losses)), key=lambda i: (losses[i], i))
    return len(losses) - 1 - best_at >= patience


def _batches(sentences: Sequence[Sentence], batch_size: int, rng: random.Random):
    order = list(range(len(sentences)))
    rng.shuffle(order)
    for i in range(0, len(order), batch_size):
        yield [sentences[j] for j in order[i:i + batch_size]]


def _check_origins(batch: Iterable[Sentence], forbidden: frozenset[str], batch_id: str):
    for sentence in batch:
        if sentence.origin in forbidden:
            raise LeakageError(f"batch {batch_id}: sentence from {sentence.origin!r} in training")


def _train(model: BiEncoder, sentences: Sequence[Sentence], inventory: TypeInventory,
           config: TrainConfig, phase: str, n_epochs: int,
           space_fn: Callable[[list[Sentence], random.Random], BatchLabelSpace],
           early_stopping: bool, forbidden_origins: frozenset[str]) -> TrainLog:
    log_ = TrainLog(phase, asdict(config))
    torch.manual_seed(config.seed)
    rng = random.Random(config.seed)
    total = steps_per_epoch(len(sentences), config.batch_size) * n_epochs
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.AdamW(params, lr=config.learning_rate,
                                  weight_decay=config.weight_decay)
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        optimizer, lambda s: linear_warmup_decay(s, total, config.warmup_fraction))
    start = time.perf_counter()
    model.train()
    for epoch in range(n_epochs):
        epoch_losses = []
        for b, batch in enumerate(_batches(sentences, config.batch_size, rng)):
            batch_id = f"{phase}:{epoch}:{b}"
            _check_origins(batch, forbidden_origins, batch_id)
            space = space_fn(batch, rng)
            logits, alignment = model(batch, space, inventory)
            gold = gold_local_ids(batch, alignment, space)
            if config.ignore_o_loss:
                gold[gold == 0] = -100
            if not (gold != -100).any():
                continue
            loss = in_batch_cross_entropy(logits, gold)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss.item()} in batch {batch_id}")
            optimizer.zero_grad()
            loss.backward()
            if config.max_grad_norm:
                torch.nn.utils.clip_grad_norm_(params, config.max_grad_norm)
            log_.learning_rates.append(optimizer.param_groups[0]["lr"])
            optimizer.step()
            scheduler.step()
            log_.step_losses.append(loss.item())
            epoch_losses.append(loss.item())
            if early_stopping and config.early_stop_unit == "step" \
                    and should_stop(log_.step_losses, config.patience):
                break
        log_.epoch_losses.append(sum(epoch_losses) / len(epoch_losses) if epoch_losses
                                 else float("nan"))
        log.info("%s epoch %d: mean loss %.4f", phase, epoch + 1, log_.epoch_losses[-1])
        if early_stopping:
            history = log_.epoch_losses if config.early_stop_unit == "epoch" else log_.step_losses
            if should_stop(history, config.patience):
                log_.early_stop_epoch = epoch + 1
                break
    model.eval()
    log_.wall_clock = time.perf_counter() - start
    return log_


def train_label_interpretation(model: BiEncoder, d_lit: Corpus, config: TrainConfig = LIT_BASELINE,
                               forbidden_origins: Iterable[str] = ()) -> tuple[BiEncoder, TrainLog]:
    """Train both encoders on ``d_lit`` with per-batch label spaces."""
    if not d_lit.sentences:
        raise ValueError("label interpretation corpus is empty")

    def space_fn(batch, rng):
        return build_batch_label_space(batch, d_lit.inventory, config.negatives_m, rng)

    log_ = _train(model, d_lit.sentences, d_lit.inventory, config, "lit", config.epochs,
                  space_fn, early_stopping=False, forbidden_origins=frozenset(forbidden_origins))
    return model, log_


def finetune_fewshot(model: BiEncoder, support: SupportSet, inventory: TypeInventory,
                     config: TrainConfig = FS_BASELINE, labels: Sequence[str] | None = None,
                     forbidden_origins: Iterable[str] = ()) -> tuple[BiEncoder, TrainLog]:
    """Fine-tune on the support set until the training loss stops improving.

    Only the support set is visible here; no validation data is consulted and
    the final state is kept. With k = 0 nothing happens.
    """
    if support.k == 0 or not support.sentences:
        return model, TrainLog("fs", asdict(config), skipped=True)
    labels = list(labels) if labels is not None else list(support.label_counts)
    full = BatchLabelSpace.from_types(labels)

    def space_fn(batch, rng):
        if config.fewshot_full_label_space:
            return BatchLabelSpace(full.local_labels)
        return build_batch_label_space(batch, inventory, config.negatives_m, rng)

    log_ = _train(model, support.sentences, inventory, config, "fs", config.max_epochs,
                  space_fn, early_stopping=True, forbidden_origins=frozenset(forbidden_origins))
    return model, log_


def with_seed(config: TrainConfig, seed: int) -> TrainConfig:
    return replace(config, seed=seed)

"""Two-phase model training: masked-token pretraining, then classification.

Phase one teaches the text encoder to reconstruct masked utterance tokens
(self-supervised, uses every recorded turn). Phase two fine-tunes the full
model to predict the next workflow action from labeled turns. Both phases
share one deterministic machinery: a linear warmup/decay schedule, seeded
batch ordering, per-batch RNG streams (so an interrupted run resumed from a
checkpoint replays bit-identically), and epoch checkpoints with optimizer
state.

``run_experiment`` ties the whole pipeline together from a manifest: simulate
(or load) calls, split, clean, build vocab + model, pretrain, fine-tune,
score the test split, and write every artifact plus a content digest to an
output directory. Two runs from the same manifest produce identical digests.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import (Callable, Dict, Iterable, List, Mapping, Optional,
                    Sequence, Tuple, Union)

import numpy as np

from nap.errors import (CheckpointError, ConfigError, DivergenceError,
                        UnknownActionError)
from nap.evaluation import EvalOutcome, F1Result, classification_eval
from nap.models import (Batch, Example, ModelConfig, NextActionModel,
                        VARIANTS, build_model, save_model)
from nap.preprocess import PipelineConfig, PipelineReport, run_pipeline
from nap.reference import load_reference_sop
from nap.simulator import (CallRecord, generate_dataset, load_dataset,
                           split_dataset)
from nap.sop import SOPGraph, load_sop
from nap.tensor.core import Tensor
from nap.tensor.io import assign_params, load_params, save_params
from nap.tensor.ops import cross_entropy, embedding_lookup, reshape
from nap.tensor.optim import AdamW, lr_at
from nap.tokenizer import (IGNORE_LABEL, Vocab, build_vocab, mask_for_mlm,
                           save_vocab)

PHASE_MLM = "mlm"
PHASE_FINETUNE = "finetune"
PHASES = (PHASE_MLM, PHASE_FINETUNE)

# (epochs, batch_size) a phase uses when the config leaves them unset.
PHASE_DEFAULTS: Dict[str, Tuple[int, int]] = {
    PHASE_MLM: (30, 512),
    PHASE_FINETUNE: (3, 256),
}

# Corpora below this many examples get their batch size scaled down so a
# single epoch still yields a meaningful number of optimizer steps.
SMALL_CORPUS_THRESHOLD = 50_000

# Only batches tagged with this partition may feed a gradient step.
TRAIN_PARTITION = "train"

CHECKPOINT_FORMAT = "nap-checkpoint"
CHECKPOINT_VERSION = 1

_PARAM_PREFIX = "param."
_ADAM_M_PREFIX = "adam_m."
_ADAM_V_PREFIX = "adam_v."

# Domain-separation constants for the per-batch RNG streams.
_STREAM_DROPOUT = 733
_STREAM_MASKING = 811


# ---- configuration -----------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for one training phase.

    ``epochs`` and ``batch_size`` default per phase (mlm: 30 epochs of 512,
    finetune: 3 epochs of 256); a defaulted batch size shrinks automatically
    on corpora under 50k examples so an epoch keeps a useful number of
    optimizer steps, while an explicit batch size is used verbatim. The
    learning rate ramps linearly from zero over ``warmup_steps`` optimizer
    steps, then decays linearly to zero at the end of training; the warmup
    is clamped below the total step count at schedule-resolution time, so
    short runs stay valid.
    """

    phase: str
    epochs: Optional[int] = None
    batch_size: Optional[int] = None
    max_lr: float = 5e-5
    warmup_steps: int = 250
    seed: int = 0
    max_seq_len: int = 128
    mask_prob: float = 0.15
    weight_decay: float = 0.01

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ConfigError(f"phase must be one of {PHASES}, got {self.phase!r}")
        if self.epochs is not None and self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not math.isfinite(self.max_lr) or self.max_lr < 0:
            raise ConfigError(f"max_lr must be finite and >= 0, got {self.max_lr}")
        if self.warmup_steps < 0:
            raise ConfigError(f"warmup_steps must be >= 0, got {self.warmup_steps}")
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")
        if self.max_seq_len < 1:
            raise ConfigError(f"max_seq_len must be >= 1, got {self.max_seq_len}")
        if not 0.0 < self.mask_prob < 1.0:
            raise ConfigError(f"mask_prob must be in (0, 1), got {self.mask_prob}")
        if not math.isfinite(self.weight_decay) or self.weight_decay < 0:
            raise ConfigError(
                f"weight_decay must be finite and >= 0, got {self.weight_decay}")

    @property
    def effective_epochs(self) -> int:
        return self.epochs if self.epochs is not None else PHASE_DEFAULTS[self.phase][0]

    @property
    def effective_batch_size(self) -> int:
        return (self.batch_size if self.batch_size is not None
                else PHASE_DEFAULTS[self.phase][1])

    def to_dict(self) -> Dict:
        return {
            "phase": self.phase,
            "epochs": self.effective_epochs,
            "batch_size": self.effective_batch_size,
            "max_lr": self.max_lr,
            "warmup_steps": self.warmup_steps,
            "seed": self.seed,
            "max_seq_len": self.max_seq_len,
            "mask_prob": self.mask_prob,
            "weight_decay": self.weight_decay,
        }

    @classmethod
    def from_dict(cls, phase: str, raw: Mapping) -> "TrainConfig":
        allowed = {"phase", "epochs", "batch_size", "max_lr", "warmup_steps",
                   "seed", "max_seq_len", "mask_prob", "weight_decay"}
        unknown = sorted(set(raw) - allowed)
        if unknown:
            raise ConfigError(f"unknown train config key(s): {unknown}")
        merged = dict(raw)
        merged["phase"] = merged.get("phase", phase)
        if merged["phase"] != phase:
            raise ConfigError(f"config declares phase {merged['phase']!r} "
                              f"but was supplied for phase {phase!r}")
        return cls(**merged)


@dataclass(frozen=True)
class Schedule:
    """Concrete step counts for one run, resolved against the corpus size."""
    batch_size: int
    steps_per_epoch: int
    epochs: int
    total_steps: int
    warmup_steps: int

    def to_dict(self) -> Dict[str, int]:
        return {"batch_size": self.batch_size,
                "steps_per_epoch": self.steps_per_epoch,
                "epochs": self.epochs,
                "total_steps": self.total_steps,
                "warmup_steps": self.warmup_steps}


def scaled_batch_size(batch_size: int, n_examples: int) -> int:
    """Shrink the batch on small corpora so an epoch has >= ~20 steps."""
    if n_examples < 1:
        raise ConfigError(f"need at least one example, got {n_examples}")
    if n_examples < SMALL_CORPUS_THRESHOLD:
        return max(1, min(batch_size, n_examples // 20))
    return batch_size


def resolve_schedule(config: TrainConfig, n_examples: int) -> Schedule:
    """Pin batch size, step counts, and a warmup that fits inside the run.

    The small-corpus batch scaling applies only when the config leaves
    ``batch_size`` unset; an explicit batch size is honored verbatim (that is
    how a deliberately single-batch run is expressed).
    """
    if config.batch_size is not None:
        if n_examples < 1:
            raise ConfigError(f"need at least one example, got {n_examples}")
        batch = config.batch_size
    else:
        batch = scaled_batch_size(config.effective_batch_size, n_examples)
    steps_per_epoch = math.ceil(n_examples / batch)
    epochs = config.effective_epochs
    total = steps_per_epoch * epochs
    warmup = min(config.warmup_steps, max(1, total // 5))
    if warmup >= total:
        warmup = total - 1
    return Schedule(batch_size=batch, steps_per_epoch=steps_per_epoch,
                    epochs=epochs, total_steps=total, warmup_steps=warmup)


def _epoch_batches(seed: int, epoch: int, n: int, batch_size: int) -> List[np.ndarray]:
    """Shuffled example indices for one epoch, chunked into batches.

    Keyed on (seed, epoch) only, so a resumed run sees the same batches.
    The final short batch is kept.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, epoch]))
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _dropout_rng(seed: int, epoch: int, batch_index: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence([seed, _STREAM_DROPOUT, epoch, batch_index]))


def _mask_seed(seed: int, epoch: int, batch_index: int) -> int:
    seq = np.random.SeedSequence([seed, _STREAM_MASKING, epoch, batch_index])
    return int(seq.generate_state(1)[0])


# ---- example construction ------------------------------------------------------------


def examples_from_calls(calls: Sequence[CallRecord],
                        action_names: Sequence[str]) -> List[Example]:
    """One labeled example per turn: utterance + context -> next action id."""
    index = {name: i for i, name in enumerate(action_names)}
    unknown: set = set()
    examples: List[Example] = []
    for call in calls:
        priors: List[str] = []
        for turn in call.turns:
            label = index.get(turn.gold_next_action)
            if label is None:
                unknown.add(turn.gold_next_action)
            examples.append(Example(
                utterance=turn.utterance,
                action_history=tuple(turn.prev_actions),
                filled_slots=tuple(sorted(turn.filled_slots_snapshot)),
                prior_utterances=tuple(priors),
                label=label,
            ))
            priors.append(turn.utterance)
    if unknown:
        raise UnknownActionError(sorted(unknown))
    return examples


def utterance_corpus(calls: Sequence[CallRecord]) -> List[str]:
    """Every utterance in call order (vocabulary / pretraining corpus)."""
    return [turn.utterance for call in calls for turn in call.turns]


# ---- checkpoints ---------------------------------------------------------------------


def config_fingerprint(train_config: TrainConfig, model_config: ModelConfig) -> str:
    """Stable hash binding a checkpoint to its training + model configs."""
    blob = json.dumps({"train": train_config.to_dict(),
                       "model": model_config.to_dict()},
                      sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def checkpoint_meta_path(path: Union[str, Path]) -> Path:
    return Path(str(path) + ".meta.json")


def save_checkpoint(path: Union[str, Path], model: NextActionModel,
                    optimizer: AdamW, *, epoch: int, step: int,
                    step_in_epoch: int, config_hash: str,
                    metrics: Optional[Mapping[str, float]] = None) -> Path:
    """Write parameters + optimizer state, with a JSON sidecar of counters.

    ``epoch``/``step_in_epoch`` describe where training resumes: the first
    ``step_in_epoch`` batches of ``epoch`` have already been consumed.
    ``step`` is the number of optimizer steps taken so far.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table: Dict[str, np.ndarray] = {}
    for p in model.parameters():
        table[_PARAM_PREFIX + p.name] = p.data
    for name, m in optimizer.m.items():
        table[_ADAM_M_PREFIX + name] = m
    for name, v in optimizer.v.items():
        table[_ADAM_V_PREFIX + name] = v
    save_params(path, table)
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "epoch": epoch,
        "step": step,
        "step_in_epoch": step_in_epoch,
        "adam_t": optimizer.t,
        "config_hash": config_hash,
        "metrics": dict(metrics or {}),
    }
    checkpoint_meta_path(path).write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_checkpoint(path: Union[str, Path], model: NextActionModel,
                    optimizer: AdamW,
                    expect_config_hash: Optional[str] = None) -> Dict:
    """Restore parameters + optimizer state in place; return the sidecar meta."""
    path = Path(path)
    meta_path = checkpoint_meta_path(path)
    if not meta_path.exists():
        raise CheckpointError(f"checkpoint sidecar not found: {meta_path}")
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt checkpoint sidecar {meta_path}: {exc}") from exc
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(
            f"{meta_path} is not a training checkpoint sidecar "
            f"(format={meta.get('format')!r})")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {meta.get('version')!r} in {meta_path}")
    if expect_config_hash is not None and meta.get("config_hash") != expect_config_hash:
        raise CheckpointError(
            "checkpoint was written under a different training/model "
            f"configuration (hash {meta.get('config_hash')!r})")

    table = load_params(path)
    params = {k[len(_PARAM_PREFIX):]: v for k, v in table.items()
              if k.startswith(_PARAM_PREFIX)}
    adam_m = {k[len(_ADAM_M_PREFIX):]: v for k, v in table.items()
              if k.startswith(_ADAM_M_PREFIX)}
    adam_v = {k[len(_ADAM_V_PREFIX):]: v for k, v in table.items()
              if k.startswith(_ADAM_V_PREFIX)}
    assign_params(model.parameters(), params)
    for label, blob in (("first-moment", adam_m), ("second-moment", adam_v)):
        missing = sorted(set(optimizer.m) - set(blob))
        extra = sorted(set(blob) - set(optimizer.m))
        if missing or extra:
            raise CheckpointError(
                f"optimizer {label} state mismatch: missing {missing}, "
                f"unexpected {extra}")
    for name in optimizer.m:
        if adam_m[name].shape != optimizer.m[name].shape:
            raise CheckpointError(f"optimizer state shape mismatch for {name!r}")
        optimizer.m[name][...] = adam_m[name]
        optimizer.v[name][...] = adam_v[name]
    optimizer.t = int(meta["adam_t"])
    return meta


# ---- shared training loop machinery --------------------------------------------------


@dataclass(frozen=True)
class EpochLog:
    """Validation metrics recorded at the end of one fine-tuning epoch."""
    epoch: int
    val_loss: float
    val_macro_f1: float
    val_weighted_f1: float

    def to_dict(self) -> Dict[str, float]:
        return {"epoch": self.epoch, "val_loss": self.val_loss,
                "val_macro_f1": self.val_macro_f1,
                "val_weighted_f1": self.val_weighted_f1}


@dataclass(frozen=True)
class PretrainResult:
    loss_curve: Tuple[float, ...]
    schedule: Schedule
    final_checkpoint: Optional[Path]


@dataclass(frozen=True)
class FinetuneResult:
    loss_curve: Tuple[float, ...]
    epoch_logs: Tuple[EpochLog, ...]
    best_epoch: int
    best_macro_f1: float
    schedule: Schedule
    best_checkpoint: Optional[Path]


def _require_trainable(batch: Batch) -> None:
    """Hard stop: gradient steps are only legal on train-partition batches."""
    if batch.partition != TRAIN_PARTITION:
        raise ConfigError(
            f"refusing a gradient step on partition {batch.partition!r}; "
            f"only {TRAIN_PARTITION!r} batches may train")


def _check_phase(config: TrainConfig, expected: str) -> None:
    if config.phase != expected:
        raise ConfigError(
            f"this entry point trains phase {expected!r}, got config phase "
            f"{config.phase!r}")


def _check_seq_len(config: TrainConfig, model: NextActionModel) -> None:
    enc = model.config.encoder
    if enc is not None and config.max_seq_len != enc.max_len:
        raise ConfigError(
            f"train config max_seq_len={config.max_seq_len} must match the "
            f"model's encoder max_len={enc.max_len}")


def _resume_counters(meta: Optional[Dict]) -> Tuple[int, int, int]:
    """(start_epoch, batches_to_skip_in_start_epoch, optimizer_steps_done)."""
    if meta is None:
        return 0, 0, 0
    return int(meta["epoch"]), int(meta["step_in_epoch"]), int(meta["step"])


def _raise_divergence(message: str, last_good: Optional[Path],
                      param_name: Optional[str] = None) -> None:
    raise DivergenceError(
        message + (f"; last good checkpoint: {last_good}" if last_good
                   else "; no checkpoint was written before the failure"),
        param_name=param_name,
        checkpoint_path=str(last_good) if last_good else None)


# ---- phase one: masked-token pretraining ---------------------------------------------


def pretrain_mlm(model: NextActionModel, examples: Sequence[Example],
                 config: TrainConfig,
                 checkpoint_dir: Optional[Union[str, Path]] = None,
                 resume_from: Optional[Union[str, Path]] = None,
                 save_every: Optional[int] = None) -> PretrainResult:
    """Train the text encoder to reconstruct masked utterance tokens.

    The loss is cross-entropy at masked positions only: hidden states are
    flattened to [batch*seq, hidden] and only the selected rows are projected
    through the vocabulary head. Batches where masking selected nothing are
    skipped without consuming an optimizer step. A non-finite loss aborts
    with a DivergenceError carrying the last good checkpoint path.
    """
    _check_phase(config, PHASE_MLM)
    if model.encoder is None:
        raise ConfigError(
            f"variant {model.config.variant!r} has no text encoder to pretrain")
    _check_seq_len(config, model)
    examples = list(examples)
    if not examples:
        raise ConfigError("cannot pretrain on zero examples")

    schedule = resolve_schedule(config, len(examples))
    optimizer = AdamW(model.parameters(), lr=config.max_lr,
                      weight_decay=config.weight_decay)
    cfg_hash = config_fingerprint(config, model.config)
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    last_good: Optional[Path] = None

    meta = None
    if resume_from is not None:
        meta = load_checkpoint(resume_from, model, optimizer,
                               expect_config_hash=cfg_hash)
        last_good = Path(resume_from)
    start_epoch, skip_batches, global_step = _resume_counters(meta)

    loss_curve: List[float] = []
    for epoch in range(start_epoch, schedule.epochs):
        batches = _epoch_batches(config.seed, epoch, len(examples),
                                 schedule.batch_size)
        first_batch = skip_batches if epoch == start_epoch else 0
        for bidx in range(first_batch, len(batches)):
            chunk = [examples[int(i)] for i in batches[bidx]]
            batch = model.featurizer.encode(chunk, partition=TRAIN_PARTITION)
            _require_trainable(batch)
            masked = mask_for_mlm(batch.token_ids, model.vocab,
                                  mask_prob=config.mask_prob,
                                  rng_seed=_mask_seed(config.seed, epoch, bidx))
            labels_flat = masked.mlm_labels.reshape(-1)
            positions = np.flatnonzero(labels_flat != IGNORE_LABEL)
            if positions.size == 0:
                continue  # nothing to predict; no optimizer step consumed
            optimizer.zero_grad()
            hidden = model.encode_utterance(
                masked.input_ids, batch.attn_mask, training=True,
                rng=_dropout_rng(config.seed, epoch, bidx))
            n_rows, seq_len, width = hidden.shape
            flat = reshape(hidden, (n_rows * seq_len, width))
            picked = embedding_lookup(flat, positions)
            logits = model.mlm_head.forward(picked)
            loss = cross_entropy(logits, labels_flat[positions])
            loss_value = loss.item()
            if not math.isfinite(loss_value):
                _raise_divergence(
                    f"masked-token loss became non-finite at step {global_step}",
                    last_good)
            loss.backward()
            lr = lr_at(global_step, config.max_lr, schedule.warmup_steps,
                       schedule.total_steps)
            try:
                optimizer.step(lr)
            except DivergenceError as exc:
                _raise_divergence(str(exc), last_good, param_name=exc.param_name)
            loss_curve.append(loss_value)
            global_step += 1
            if (ckpt_dir is not None and save_every is not None
                    and global_step % save_every == 0):
                last_good = save_checkpoint(
                    ckpt_dir / f"mlm_step{global_step}.ckpt", model, optimizer,
                    epoch=epoch, step=global_step, step_in_epoch=bidx + 1,
                    config_hash=cfg_hash,
                    metrics={"train_loss": loss_value})
        if ckpt_dir is not None:
            last_good = save_checkpoint(
                ckpt_dir / f"mlm_epoch{epoch}.ckpt", model, optimizer,
                epoch=epoch + 1, step=global_step, step_in_epoch=0,
                config_hash=cfg_hash,
                metrics={"train_loss": loss_curve[-1] if loss_curve else float("nan")})
    optimizer.zero_grad()
    return PretrainResult(loss_curve=tuple(loss_curve), schedule=schedule,
                          final_checkpoint=last_good)


# ---- phase two: next-action fine-tuning ----------------------------------------------


def finetune(model: NextActionModel, train_examples: Sequence[Example],
             valid_examples: Optional[Sequence[Example]],
             config: TrainConfig,
             checkpoint_dir: Optional[Union[str, Path]] = None,
             resume_from: Optional[Union[str, Path]] = None,
             save_every: Optional[int] = None) -> FinetuneResult:
    """Cross-entropy training on gold next actions, validating every epoch.

    Keeps the parameter snapshot with the best validation macro F1 (earliest
    epoch wins ties) and restores it into the model before returning. With
    ``valid_examples=None`` no validation runs and the final parameters are
    kept.
    """
    _check_phase(config, PHASE_FINETUNE)
    _check_seq_len(config, model)
    train_examples = list(train_examples)
    if not train_examples:
        raise ConfigError("cannot fine-tune on zero examples")
    if any(e.label is None for e in train_examples):
        raise ConfigError("every fine-tuning example needs a label")

    schedule = resolve_schedule(config, len(train_examples))
    optimizer = AdamW(model.parameters(), lr=config.max_lr,
                      weight_decay=config.weight_decay)
    cfg_hash = config_fingerprint(config, model.config)
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    last_good: Optional[Path] = None
    best_ckpt: Optional[Path] = None

    meta = None
    if resume_from is not None:
        meta = load_checkpoint(resume_from, model, optimizer,
                               expect_config_hash=cfg_hash)
        last_good = Path(resume_from)
    start_epoch, skip_batches, global_step = _resume_counters(meta)

    best_macro = -1.0
    best_epoch = -1
    best_params: Dict[str, np.ndarray] = {
        p.name: p.data.copy() for p in model.parameters()}
    if meta is not None and "best_macro_f1" in meta.get("metrics", {}):
        best_macro = float(meta["metrics"]["best_macro_f1"])
        best_epoch = int(meta["metrics"].get("best_epoch", -1))

    loss_curve: List[float] = []
    epoch_logs: List[EpochLog] = []
    for epoch in range(start_epoch, schedule.epochs):
        batches = _epoch_batches(config.seed, epoch, len(train_examples),
                                 schedule.batch_size)
        first_batch = skip_batches if epoch == start_epoch else 0
        for bidx in range(first_batch, len(batches)):
            chunk = [train_examples[int(i)] for i in batches[bidx]]
            batch = model.featurizer.encode(chunk, partition=TRAIN_PARTITION)
            _require_trainable(batch)
            optimizer.zero_grad()
            logits = model.forward(batch, training=True,
                                   rng=_dropout_rng(config.seed, epoch, bidx))
            loss = cross_entropy(logits, batch.labels)
            loss_value = loss.item()
            if not math.isfinite(loss_value):
                _raise_divergence(
                    f"training loss became non-finite at step {global_step}",
                    last_good)
            loss.backward()
            lr = lr_at(global_step, config.max_lr, schedule.warmup_steps,
                       schedule.total_steps)
            try:
                optimizer.step(lr)
            except DivergenceError as exc:
                _raise_divergence(str(exc), last_good, param_name=exc.param_name)
            loss_curve.append(loss_value)
            global_step += 1
            if (ckpt_dir is not None and save_every is not None
                    and global_step % save_every == 0):
                last_good = save_checkpoint(
                    ckpt_dir / f"finetune_step{global_step}.ckpt", model,
                    optimizer, epoch=epoch, step=global_step,
                    step_in_epoch=bidx + 1, config_hash=cfg_hash,
                    metrics={"train_loss": loss_value,
                             "best_macro_f1": best_macro,
                             "best_epoch": best_epoch})

        metrics: Dict[str, float] = {
            "train_loss": loss_curve[-1] if loss_curve else float("nan")}
        if valid_examples:
            outcome = classification_eval(model, valid_examples,
                                          batch_size=schedule.batch_size,
                                          partition="valid")
            epoch_logs.append(EpochLog(epoch=epoch, val_loss=outcome.loss,
                                       val_macro_f1=outcome.f1.macro,
                                       val_weighted_f1=outcome.f1.weighted))
            metrics.update(val_loss=outcome.loss,
                           val_macro_f1=outcome.f1.macro,
                           val_weighted_f1=outcome.f1.weighted)
            if outcome.f1.macro > best_macro:
                best_macro = outcome.f1.macro
                best_epoch = epoch
                best_params = {p.name: p.data.copy()
                               for p in model.parameters()}
                if ckpt_dir is not None:
                    best_ckpt = save_checkpoint(
                        ckpt_dir / "finetune_best.ckpt", model, optimizer,
                        epoch=epoch + 1, step=global_step, step_in_epoch=0,
                        config_hash=cfg_hash,
                        metrics={**metrics, "best_macro_f1": best_macro,
                                 "best_epoch": best_epoch})
        metrics.update(best_macro_f1=best_macro, best_epoch=best_epoch)
        if ckpt_dir is not None:
            last_good = save_checkpoint(
                ckpt_dir / f"finetune_epoch{epoch}.ckpt", model, optimizer,
                epoch=epoch + 1, step=global_step, step_in_epoch=0,
                config_hash=cfg_hash, metrics=metrics)
    optimizer.zero_grad()

    if valid_examples:
        for p in model.parameters():
            p.data[...] = best_params[p.name]
    else:
        best_epoch = schedule.epochs - 1
    return FinetuneResult(loss_curve=tuple(loss_curve),
                          epoch_logs=tuple(epoch_logs),
                          best_epoch=best_epoch, best_macro_f1=best_macro,
                          schedule=schedule, best_checkpoint=best_ckpt)


# ---- manifest-driven experiments -----------------------------------------------------

_MANIFEST_SECTIONS = {"seed", "sop", "dataset", "simulate", "split",
                      "preprocess", "vocab", "model", "pretrain", "train"}


def load_manifest(manifest: Union[str, Path, Mapping]) -> Dict:
    """Accept a mapping or a path to a JSON document; validate section names."""
    if isinstance(manifest, (str, Path)):
        path = Path(manifest)
        if not path.exists():
            raise ConfigError(f"manifest not found: {path}")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"manifest {path} is not valid JSON: {exc}") from exc
    else:
        raw = manifest
    if not isinstance(raw, Mapping):
        raise ConfigError(f"manifest must be a mapping, got {type(raw).__name__}")
    unknown = sorted(set(raw) - _MANIFEST_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown manifest section(s): {unknown}")
    if "model" not in raw or "variant" not in raw.get("model", {}):
        raise ConfigError("manifest needs a model section with a variant")
    if raw["model"]["variant"] not in VARIANTS:
        raise ConfigError(
            f"unknown model variant {raw['model']['variant']!r}; "
            f"expected one of {list(VARIANTS)}")
    if "dataset" in raw:
        if "path" not in raw["dataset"]:
            raise ConfigError("dataset section needs a path")
    elif "simulate" not in raw:
        raise ConfigError(
            "manifest needs either a dataset path or a simulate section")
    return json.loads(json.dumps(raw))  # deep copy with JSON-clean types


@dataclass(frozen=True)
class PreparedExperiment:
    """Everything a training run needs, derived deterministically from a manifest."""
    manifest: Dict
    graph: SOPGraph
    vocab: Vocab
    action_names: Tuple[str, ...]
    raw_calls: Tuple[CallRecord, ...]
    dataset_stats: Dict
    train_calls: Tuple[CallRecord, ...]   # preprocessed train split
    valid_calls: Tuple[CallRecord, ...]
    test_calls: Tuple[CallRecord, ...]
    pipeline_reports: Dict[str, PipelineReport]
    mlm_examples: Tuple[Example, ...]     # every raw train turn, unlabeled use
    train_examples: Tuple[Example, ...]
    valid_examples: Tuple[Example, ...]
    test_examples: Tuple[Example, ...]
    pretrain_config: Optional[TrainConfig]
    train_config: TrainConfig
    model_variant: str
    model_seed: int
    model_overrides: Dict

    def build_model(self) -> NextActionModel:
        return build_model(self.model_variant, self.graph, self.vocab,
                           seed=self.model_seed, **self.model_overrides)


def _load_graph(section: Optional[Mapping]) -> SOPGraph:
    section = section or {"reference": True}
    if section.get("reference"):
        return load_reference_sop()
    if "path" in section:
        return load_sop(section["path"])
    raise ConfigError("sop section needs either reference: true or a path")


def prepare_experiment(manifest: Union[str, Path, Mapping]) -> PreparedExperiment:
    """Resolve a manifest into data splits, vocab, configs, and a model builder.

    Order of operations (each step seeded by the manifest):
      1. simulate or load the raw calls
      2. split at call granularity
      3. pretraining corpus = every raw train-split turn (cleaning would
         discard exactly the noise the masked-token phase learns from)
      4. clean each split for the labeled phases
      5. vocabulary from raw train-split utterances only
    """
    m = load_manifest(manifest)
    seed = int(m.get("seed", 0))
    graph = _load_graph(m.get("sop"))
    action_names = tuple(graph.action_names)

    dataset_stats: Dict = {}
    if "dataset" in m:
        ds = m["dataset"]
        if "path" not in ds:
            raise ConfigError("dataset section needs a path")
        raw_calls = load_dataset(ds["path"])
    else:
        sim = m["simulate"]
        if "n_calls" not in sim:
            raise ConfigError("simulate section needs n_calls")
        raw_calls, dataset_stats = generate_dataset(
            graph, int(sim["n_calls"]),
            difficulty_mix=sim.get("difficulty_mix"),
            seed=int(sim.get("seed", seed)))

    split_cfg = m.get("split", {})
    ratios = tuple(split_cfg.get("ratios", (0.8, 0.1, 0.1)))
    train_raw, valid_raw, test_raw = split_dataset(
        raw_calls, ratios=ratios, seed=int(split_cfg.get("seed", seed)))
    if not train_raw or not valid_raw or not test_raw:
        raise ConfigError(
            f"split produced an empty partition (sizes {len(train_raw)}/"
            f"{len(valid_raw)}/{len(test_raw)}); need more calls")

    pre_cfg = m.get("preprocess", {})
    pipeline = PipelineConfig.for_graph(graph, min_count=pre_cfg.get("min_count"))
    train_calls, report_train = run_pipeline(train_raw, pipeline)
    valid_calls, report_valid = run_pipeline(valid_raw, pipeline)
    test_calls, report_test = run_pipeline(test_raw, pipeline)
    if not train_calls or not valid_calls or not test_calls:
        raise ConfigError("preprocessing emptied a partition; need more calls")

    vocab = build_vocab(utterance_corpus(train_raw),
                        min_freq=int(m.get("vocab", {}).get("min_freq", 1)),
                        action_names=action_names)

    model_section = dict(m["model"])
    variant = model_section.pop("variant")
    model_seed = int(model_section.pop("seed", seed))
    max_len = int(model_section.get("max_len", 128))

    def _phase_config(section: Optional[Mapping], phase: str) -> TrainConfig:
        raw = dict(section or {})
        raw.setdefault("seed", seed)
        raw.setdefault("max_seq_len", max_len)
        return TrainConfig.from_dict(phase, raw)

    pretrain_config = (_phase_config(m["pretrain"], PHASE_MLM)
                       if m.get("pretrain") else None)
    train_config = _phase_config(m.get("train"), PHASE_FINETUNE)

    # Unlabeled masked-token examples: utterances only, no context channels.
    mlm_examples = tuple(Example(utterance=u) for u in utterance_corpus(train_raw))

    return PreparedExperiment(
        manifest=m, graph=graph, vocab=vocab, action_names=action_names,
        raw_calls=tuple(raw_calls), dataset_stats=dataset_stats,
        train_calls=tuple(train_calls), valid_calls=tuple(valid_calls),
        test_calls=tuple(test_calls),
        pipeline_reports={"train": report_train, "valid": report_valid,
                          "test": report_test},
        mlm_examples=mlm_examples,
        train_examples=tuple(examples_from_calls(train_calls, action_names)),
        valid_examples=tuple(examples_from_calls(valid_calls, action_names)),
        test_examples=tuple(examples_from_calls(test_calls, action_names)),
        pretrain_config=pretrain_config, train_config=train_config,
        model_variant=variant, model_seed=model_seed,
        model_overrides=model_section)


@dataclass(frozen=True)
class ExperimentResult:
    out_dir: Path
    test_loss: float
    test_f1: F1Result
    finetune: FinetuneResult
    pretrain: Optional[PretrainResult]
    model_path: Path
    digest_path: Path


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_digest(out_dir: Path, names: Sequence[str]) -> Path:
    """Content hashes of the run's deterministic artifacts, one per line.

    Figures are excluded on purpose: raster output depends on the plotting
    stack's version, not on the experiment.
    """
    lines = [f"{_sha256_file(out_dir / name)}  {name}" for name in sorted(names)]
    digest_path = out_dir / "digest.txt"
    digest_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return digest_path


def _write_json(path: Path, payload) -> Path:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")
    return path


def run_experiment(manifest: Union[str, Path, Mapping],
                   out_dir: Union[str, Path]) -> ExperimentResult:
    """Full pipeline from manifest to artifacts directory.

    Writes: the normalized manifest, vocabulary, preprocessing reports,
    training curves, checkpoints, the final model, a test-split report
    (JSON + tab-separated tables + figures), and digest.txt hashing every
    deterministic artifact so reruns can be compared byte for byte.
    """
    from nap import reports  # figure rendering pulls in matplotlib; keep it lazy

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    prep = prepare_experiment(manifest)

    digest_names: List[str] = []
    _write_json(out / "manifest.json", prep.manifest)
    digest_names.append("manifest.json")
    save_vocab(out / "vocab.json", prep.vocab)
    digest_names.append("vocab.json")
    _write_json(out / "preprocess_report.json",
                {name: report.to_dict()
                 for name, report in prep.pipeline_reports.items()})
    digest_names.append("preprocess_report.json")

    model = prep.build_model()
    ckpt_dir = out / "checkpoints"

    pretrain_result: Optional[PretrainResult] = None
    if prep.pretrain_config is not None:
        pretrain_result = pretrain_mlm(model, prep.mlm_examples,
                                       prep.pretrain_config,
                                       checkpoint_dir=ckpt_dir)
        _write_json(out / "mlm_curve.json",
                    {"loss": list(pretrain_result.loss_curve),
                     "schedule": pretrain_result.schedule.to_dict()})
        digest_names.append("mlm_curve.json")

    finetune_result = finetune(model, prep.train_examples, prep.valid_examples,
                               prep.train_config, checkpoint_dir=ckpt_dir)
    _write_json(out / "curves.json",
                {"loss": list(finetune_result.loss_curve),
                 "epochs": [log.to_dict() for log in finetune_result.epoch_logs],
                 "best_epoch": finetune_result.best_epoch,
                 "best_val_macro_f1": finetune_result.best_macro_f1,
                 "schedule": finetune_result.schedule.to_dict()})
    digest_names.append("curves.json")

    outcome = classification_eval(model, prep.test_examples,
                                  batch_size=finetune_result.schedule.batch_size,
                                  partition="test")

    model_path = out / "model.napt"
    save_model(model, model_path)
    digest_names.extend(["model.napt", "model.napt.config.json"])

    report_files = reports.render_experiment_report(
        out, action_names=prep.action_names, outcome=outcome,
        finetune_result=finetune_result, pretrain_result=pretrain_result)
    digest_names.extend(report_files.digest_names)

    digest_path = write_digest(out, digest_names)
    return ExperimentResult(out_dir=out, test_loss=outcome.loss,
                            test_f1=outcome.f1, finetune=finetune_result,
                            pretrain=pretrain_result, model_path=model_path,
                            digest_path=digest_path)

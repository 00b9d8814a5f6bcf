"""Evaluation: classification metrics, product-level call metrics, significance
tests, data-size sweeps, and latency benchmarking.

Everything in this module is a pure computation over predictions, sessions, or
samples, except :func:`data_size_sweep` (which orchestrates training runs) and
:func:`latency_bench` (which measures wall-clock time).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import stdtr

from nap.errors import ConfigError, DegenerateInputError
from nap.models import (Example, NextActionModel, PredictionRequest,
                        predict_next_action)
from nap.simulator import CallRecord
from nap.sop import SOPGraph
from nap.tensor.core import no_grad
from nap.tensor.ops import cross_entropy

__all__ = [
    "ClassScore", "ConfusionStats", "F1Result", "confusion_stats", "f1_scores",
    "CompletedSession", "SessionOutcome", "GroupStats", "ProductMetrics",
    "session_from_call", "product_metrics",
    "WelchResult", "welch_t_test", "significance_band", "SIGNIFICANCE_LEVELS",
    "RatingRecord", "RatingStats", "rating_summary", "RATER_ROLES",
    "EvalOutcome", "classification_eval",
    "LatencyReport", "latency_bench",
    "SweepRow", "SweepResult", "nested_subsets", "data_size_sweep",
    "DEFAULT_SWEEP_FRACTIONS",
]


# -- confusion counts and F1 --------------------------------------------------------


@dataclass(frozen=True)
class ClassScore:
    """Precision/recall/F1 for one class."""

    class_id: int
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class ConfusionStats:
    """Per-class true-positive / false-positive / false-negative counts."""

    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    support: np.ndarray

    @property
    def n_evaluated(self) -> int:
        return int(self.support.sum())


@dataclass
class F1Result:
    weighted: float
    macro: float
    per_class: Tuple[ClassScore, ...]
    confusion: ConfusionStats


def _as_class_ids(values: Sequence[int], n_classes: int, what: str) -> np.ndarray:
    arr = np.asarray(list(values), dtype=np.int64)
    if arr.ndim != 1:
        raise ConfigError(f"{what} must be a flat sequence of class ids")
    if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
        raise ConfigError(
            f"{what} contain class ids outside [0, {n_classes})")
    return arr


def confusion_stats(predictions: Sequence[int], golds: Sequence[int],
                    n_classes: int) -> ConfusionStats:
    """Count per-class tp/fp/fn and supports over aligned prediction pairs."""
    if n_classes < 1:
        raise ConfigError(f"n_classes must be >= 1, got {n_classes}")
    preds = _as_class_ids(predictions, n_classes, "predictions")
    gold = _as_class_ids(golds, n_classes, "golds")
    if preds.shape != gold.shape:
        raise ConfigError(
            f"predictions and golds must have equal length, "
            f"got {preds.size} vs {gold.size}")
    tp = np.zeros(n_classes, dtype=np.int64)
    fp = np.zeros(n_classes, dtype=np.int64)
    fn = np.zeros(n_classes, dtype=np.int64)
    support = np.bincount(gold, minlength=n_classes).astype(np.int64)
    hit = preds == gold
    np.add.at(tp, preds[hit], 1)
    np.add.at(fp, preds[~hit], 1)
    np.add.at(fn, gold[~hit], 1)
    return ConfusionStats(tp=tp, fp=fp, fn=fn, support=support)


def f1_scores(predictions: Sequence[int], golds: Sequence[int],
              n_classes: int) -> F1Result:
    """Weighted and macro F1 plus the per-class table.

    Macro is the unweighted mean over *all* classes: a class with zero support
    contributes F1 = 0 (strictest convention — documented because it shifts
    macro scores on large imbalanced action sets). Weighted is the
    support-weighted mean, so zero-support classes do not affect it.
    """
    stats = confusion_stats(predictions, golds, n_classes)
    total = stats.n_evaluated
    if total == 0:
        raise DegenerateInputError("cannot score an empty prediction set")
    per_class: List[ClassScore] = []
    for c in range(n_classes):
        tp, fp, fn = int(stats.tp[c]), int(stats.fp[c]), int(stats.fn[c])
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = (2.0 * precision * recall / (precision + recall)
              if precision + recall else 0.0)
        per_class.append(ClassScore(class_id=c, precision=precision,
                                    recall=recall, f1=f1,
                                    support=int(stats.support[c])))
    macro = sum(s.f1 for s in per_class) / n_classes
    weighted = sum(s.f1 * s.support for s in per_class) / total
    return F1Result(weighted=weighted, macro=macro,
                    per_class=tuple(per_class), confusion=stats)


# -- product-level call metrics -----------------------------------------------------


@dataclass(frozen=True)
class CompletedSession:
    """A finished call, reduced to what product metrics need."""

    call_id: str
    difficulty: str
    action_history: Tuple[str, ...]
    filled_slots: Tuple[str, ...]
    successful: bool


@dataclass(frozen=True)
class SessionOutcome:
    call_id: str
    difficulty: str
    fields_collected: int
    final_panel: int
    reached_e2e: bool


@dataclass(frozen=True)
class GroupStats:
    n: int
    fields_mean: float
    fields_std: float
    panel_mean: float
    panel_std: float
    e2e_rate: float


@dataclass
class ProductMetrics:
    outcomes: Tuple[SessionOutcome, ...]
    by_difficulty: Dict[str, GroupStats]
    overall: GroupStats

    @property
    def e2e_rate(self) -> float:
        return self.overall.e2e_rate


def session_from_call(call: CallRecord) -> CompletedSession:
    """Reduce a simulated call record to a completed session."""
    filled = tuple(sorted(call.turns[-1].filled_slots_snapshot)) if call.turns else ()
    return CompletedSession(
        call_id=call.call_id,
        difficulty=call.difficulty,
        action_history=tuple(t.gold_next_action for t in call.turns),
        filled_slots=filled,
        successful=call.outcome == "successful",
    )


def _group_stats(outcomes: Sequence[SessionOutcome]) -> GroupStats:
    fields = np.array([o.fields_collected for o in outcomes], dtype=np.float64)
    panels = np.array([o.final_panel for o in outcomes], dtype=np.float64)
    e2e = np.array([o.reached_e2e for o in outcomes], dtype=np.float64)
    std = (lambda x: float(np.std(x, ddof=1)) if len(x) > 1 else 0.0)
    return GroupStats(n=len(outcomes),
                      fields_mean=float(fields.mean()), fields_std=std(fields),
                      panel_mean=float(panels.mean()), panel_std=std(panels),
                      e2e_rate=float(e2e.mean()))


def product_metrics(sessions: Sequence[CompletedSession],
                    graph: SOPGraph) -> ProductMetrics:
    """Per-call progress measures and their per-difficulty aggregates.

    fields = number of distinct slots filled; panel = panel of the last action
    taken (the start action's panel if no action was taken); a call reaches
    end-to-end completion when it was successful and ended on a terminal
    panel-4 action.
    """
    if not sessions:
        raise DegenerateInputError("cannot aggregate zero sessions")
    outcomes: List[SessionOutcome] = []
    for session in sessions:
        final_ref: Union[int, str] = (session.action_history[-1]
                                      if session.action_history else graph.start_id)
        node = graph.action(final_ref)
        reached = session.successful and node.terminal and node.panel == 4
        outcomes.append(SessionOutcome(
            call_id=session.call_id,
            difficulty=session.difficulty,
            fields_collected=len(set(session.filled_slots)),
            final_panel=node.panel,
            reached_e2e=reached,
        ))
    by_difficulty = {
        level: _group_stats([o for o in outcomes if o.difficulty == level])
        for level in sorted({o.difficulty for o in outcomes})
    }
    return ProductMetrics(outcomes=tuple(outcomes),
                          by_difficulty=by_difficulty,
                          overall=_group_stats(outcomes))


# -- Welch's t-test ------------------------------------------------------------------


SIGNIFICANCE_LEVELS: Tuple[Tuple[float, str], ...] = (
    (0.001, "***"), (0.01, "**"), (0.05, "*"), (0.1, "."))


def significance_band(p: float) -> str:
    """Symbol for the strictest significance threshold that ``p`` clears."""
    for threshold, symbol in SIGNIFICANCE_LEVELS:
        if p < threshold:
            return symbol
    return ""


@dataclass(frozen=True)
class WelchResult:
    t: float
    p: float
    df: float
    band: str


def welch_t_test(sample_a: Sequence[float],
                 sample_b: Sequence[float]) -> WelchResult:
    """Welch's unequal-variance t-test with a two-sided p-value.

    Degrees of freedom follow Welch–Satterthwaite; the p-value comes from the
    Student-t CDF. Requires n >= 2 per sample and nonzero variance in at
    least one sample.
    """
    a = np.asarray(list(sample_a), dtype=np.float64)
    b = np.asarray(list(sample_b), dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise DegenerateInputError(
            f"each sample needs n >= 2, got {a.size} and {b.size}")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise DegenerateInputError("samples must be finite")
    var_a = float(a.var(ddof=1))
    var_b = float(b.var(ddof=1))
    if var_a == 0.0 and var_b == 0.0:
        raise DegenerateInputError(
            "both samples have zero variance; the statistic is undefined")
    sa = var_a / a.size
    sb = var_b / b.size
    t = float((a.mean() - b.mean()) / math.sqrt(sa + sb))
    df = float((sa + sb) ** 2
               / (sa ** 2 / (a.size - 1) + sb ** 2 / (b.size - 1)))
    p = float(2.0 * stdtr(df, -abs(t)))
    return WelchResult(t=t, p=p, df=df, band=significance_band(p))


# -- human ratings -------------------------------------------------------------------


RATER_ROLES = ("agent", "reviewer")


@dataclass(frozen=True)
class RatingRecord:
    """One 1–5 satisfaction rating for a finished call."""

    call_id: str
    rater: str
    score: int
    comment: str = ""
    difficulty: str = ""

    def __post_init__(self):
        if self.rater not in RATER_ROLES:
            raise ConfigError(
                f"rater must be one of {RATER_ROLES}, got {self.rater!r}")
        if not isinstance(self.score, int) or isinstance(self.score, bool) \
                or not 1 <= self.score <= 5:
            raise ConfigError(f"score must be an integer in 1..5, got {self.score!r}")

    def to_dict(self) -> Dict:
        return {"call_id": self.call_id, "rater": self.rater,
                "score": self.score, "comment": self.comment,
                "difficulty": self.difficulty}

    @classmethod
    def from_dict(cls, row: Mapping) -> "RatingRecord":
        try:
            return cls(call_id=str(row["call_id"]), rater=str(row["rater"]),
                       score=int(row["score"]), comment=str(row.get("comment", "")),
                       difficulty=str(row.get("difficulty", "")))
        except KeyError as exc:
            raise ConfigError(f"rating record missing field {exc}") from None


@dataclass(frozen=True)
class RatingStats:
    n: int
    mean: float
    std: float
    histogram: Tuple[int, int, int, int, int]  # counts for scores 1..5


def _rating_stats(records: Sequence[RatingRecord]) -> RatingStats:
    scores = np.array([r.score for r in records], dtype=np.float64)
    hist = [0, 0, 0, 0, 0]
    for r in records:
        hist[r.score - 1] += 1
    std = float(np.std(scores, ddof=1)) if len(scores) > 1 else 0.0
    return RatingStats(n=len(records), mean=float(scores.mean()), std=std,
                       histogram=tuple(hist))


def rating_summary(records: Sequence[RatingRecord]) -> Dict[str, RatingStats]:
    """Mean/std/histogram of scores, overall (key "all") and per difficulty."""
    if not records:
        raise DegenerateInputError("cannot summarize zero ratings")
    summary = {"all": _rating_stats(records)}
    for level in sorted({r.difficulty for r in records if r.difficulty}):
        summary[level] = _rating_stats([r for r in records
                                        if r.difficulty == level])
    return summary


# -- batched classification evaluation ----------------------------------------------


@dataclass
class EvalOutcome:
    loss: float
    f1: F1Result
    predictions: np.ndarray
    golds: np.ndarray
    n: int


def classification_eval(model: NextActionModel, examples: Sequence[Example],
                        batch_size: int = 256,
                        partition: Optional[str] = None) -> EvalOutcome:
    """Forward the examples in order (no gradients) and score the argmaxes."""
    if not examples:
        raise DegenerateInputError("cannot evaluate zero examples")
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    if any(e.label is None for e in examples):
        raise ConfigError("classification_eval requires labeled examples")
    predictions: List[np.ndarray] = []
    golds: List[np.ndarray] = []
    total_loss = 0.0
    for lo in range(0, len(examples), batch_size):
        chunk = examples[lo:lo + batch_size]
        batch = model.featurizer.encode(chunk, partition=partition)
        with no_grad():
            logits = model.forward(batch)
            loss = cross_entropy(logits, batch.labels).item()
        total_loss += loss * len(chunk)
        predictions.append(np.argmax(logits.data, axis=-1))
        golds.append(batch.labels)
    preds = np.concatenate(predictions)
    gold = np.concatenate(golds)
    return EvalOutcome(loss=total_loss / len(examples),
                       f1=f1_scores(preds, gold, model.config.n_actions),
                       predictions=preds, golds=gold, n=len(examples))


# -- latency -------------------------------------------------------------------------


@dataclass(frozen=True)
class LatencyReport:
    p50_ms: float
    p95_ms: float
    p99_ms: float
    mean_ms: float
    n_iter: int
    samples: Tuple[float, ...] = field(repr=False, default=())


def _nearest_rank(sorted_values: Sequence[float], q: float) -> float:
    n = len(sorted_values)
    k = min(n, max(1, math.ceil(q / 100.0 * n)))
    return float(sorted_values[k - 1])


def latency_bench(model: NextActionModel,
                  requests: Sequence[PredictionRequest],
                  n_warmup: int = 10, n_iter: int = 100) -> LatencyReport:
    """Wall-clock time of single predictions (one request per call, no batching)."""
    if not requests:
        raise ConfigError("latency_bench needs at least one request")
    if n_iter < 1:
        raise ConfigError(f"n_iter must be >= 1, got {n_iter}")
    if n_warmup < 0:
        raise ConfigError(f"n_warmup must be >= 0, got {n_warmup}")
    for i in range(n_warmup):
        predict_next_action(model, requests[i % len(requests)])
    samples: List[float] = []
    for i in range(n_iter):
        request = requests[i % len(requests)]
        start = time.perf_counter()
        predict_next_action(model, request)
        samples.append((time.perf_counter() - start) * 1000.0)
    ordered = sorted(samples)
    return LatencyReport(p50_ms=_nearest_rank(ordered, 50),
                         p95_ms=_nearest_rank(ordered, 95),
                         p99_ms=_nearest_rank(ordered, 99),
                         mean_ms=float(np.mean(samples)),
                         n_iter=n_iter, samples=tuple(samples))


# -- data-size sweep -----------------------------------------------------------------


DEFAULT_SWEEP_FRACTIONS = (0.01, 0.02, 0.10, 0.50, 1.00)


@dataclass(frozen=True)
class SweepRow:
    fraction: float
    n_calls: int
    n_turns: int
    weighted_f1: float
    macro_f1: float


@dataclass
class SweepResult:
    rows: Tuple[SweepRow, ...]

    def as_table(self) -> List[Dict]:
        return [{"fraction": r.fraction, "n_calls": r.n_calls,
                 "n_turns": r.n_turns, "weighted_f1": r.weighted_f1,
                 "macro_f1": r.macro_f1} for r in self.rows]


def nested_subsets(calls: Sequence[CallRecord], fractions: Sequence[float],
                   seed: int) -> Dict[float, List[CallRecord]]:
    """Nested call subsets: every smaller fraction is a prefix of every larger.

    The call list is permuted once with ``seed``; fraction f takes the first
    max(1, round(f * n)) calls of that fixed order, so subsets are nested by
    construction. A fraction that selects every call returns the list in its
    original order (same set, so nesting holds), which makes a full-fraction
    sweep leg reproduce the plain training run exactly.
    """
    if not calls:
        raise ConfigError("cannot subset an empty call list")
    if not fractions:
        raise ConfigError("need at least one fraction")
    for f in fractions:
        if not 0.0 < f <= 1.0:
            raise ConfigError(f"fractions must lie in (0, 1], got {f}")
    order = np.random.default_rng(seed).permutation(len(calls))
    shuffled = [calls[int(i)] for i in order]
    out: Dict[float, List[CallRecord]] = {}
    for f in fractions:
        k = max(1, round(f * len(calls)))
        out[float(f)] = list(calls) if k == len(calls) else shuffled[:k]
    return out


def data_size_sweep(manifest: Union[str, Path, Mapping],
                    fractions: Sequence[float] = DEFAULT_SWEEP_FRACTIONS,
                    out_dir: Optional[Union[str, Path]] = None) -> SweepResult:
    """Train one model per training-set fraction and score each on one test set.

    Subsets are nested (smaller inside larger) at call granularity. Fraction
    1.0 is exactly the experiment's full training run: same call order, same
    seeds, same schedule.
    """
    from nap import training  # local import: training imports this module

    prepared = training.prepare_experiment(manifest)
    subsets = nested_subsets(prepared.train_calls, fractions,
                             seed=prepared.train_config.seed)
    rows: List[SweepRow] = []
    for fraction in sorted(subsets):
        calls = subsets[fraction]
        train_examples = training.examples_from_calls(calls,
                                                      prepared.action_names)
        model = prepared.build_model()
        training.finetune(model, train_examples, prepared.valid_examples,
                          prepared.train_config,
                          checkpoint_dir=(Path(out_dir) / f"fraction_{fraction:g}"
                                          if out_dir is not None else None))
        outcome = classification_eval(model, prepared.test_examples,
                                      partition="test")
        rows.append(SweepRow(fraction=float(fraction), n_calls=len(calls),
                             n_turns=len(train_examples),
                             weighted_f1=outcome.f1.weighted,
                             macro_f1=outcome.f1.macro))
    return SweepResult(rows=tuple(rows))

"""Report rendering: delimited tables plus figures, written side by side.

Every entry point takes an output directory and writes three kinds of file:
JSON (full precision, machine-readable), tab-separated tables (for quick
inspection and diffing), and PNG figures rendered with the Agg backend (no
display needed). The returned ``ReportFiles`` lists which outputs are
deterministic (safe to content-hash) and which are figures.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from nap.evaluation import (EvalOutcome, LatencyReport, ProductMetrics,
                            RatingStats, SweepResult)

# Fixed, theme-independent colors so figures look the same on any box.
_SERIES_COLOR = "#2867b2"
_ACCENT_COLOR = "#c2571a"
_GRID_KW = dict(alpha=0.3, linewidth=0.6)


@dataclass(frozen=True)
class ReportFiles:
    """What a renderer wrote: hashable artifacts vs. figures."""
    digest_names: Tuple[str, ...]   # deterministic files, relative names
    figure_names: Tuple[str, ...]   # PNG files, excluded from digests

    @property
    def all_names(self) -> Tuple[str, ...]:
        return self.digest_names + self.figure_names


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")


def _write_tsv(path: Path, header: Sequence[str],
               rows: Sequence[Sequence]) -> None:
    lines = ["\t".join(header)]
    for row in rows:
        lines.append("\t".join(_cell(v) for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _cell(value) -> str:
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def _new_axes(width: float = 7.0, height: float = 4.2):
    fig, ax = plt.subplots(figsize=(width, height), dpi=120)
    ax.grid(True, **_GRID_KW)
    return fig, ax


def _save_figure(fig, path: Path) -> None:
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


# ---- experiment (training run) -------------------------------------------------------


def render_experiment_report(out_dir: Union[str, Path], *,
                             action_names: Sequence[str],
                             outcome: EvalOutcome,
                             finetune_result,
                             pretrain_result=None) -> ReportFiles:
    """Test-split scores, per-class table, and training-curve figures."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    summary = {
        "test_loss": outcome.loss,
        "test_weighted_f1": outcome.f1.weighted,
        "test_macro_f1": outcome.f1.macro,
        "n_evaluated": outcome.n,
        "best_epoch": finetune_result.best_epoch,
        "best_val_macro_f1": finetune_result.best_macro_f1,
        "epochs": [log.to_dict() for log in finetune_result.epoch_logs],
    }
    _write_json(out / "report.json", summary)
    _write_tsv(out / "report.tsv", ("metric", "value"), [
        ("test_loss", outcome.loss),
        ("test_weighted_f1", outcome.f1.weighted),
        ("test_macro_f1", outcome.f1.macro),
        ("n_evaluated", outcome.n),
        ("best_epoch", finetune_result.best_epoch),
        ("best_val_macro_f1", finetune_result.best_macro_f1),
    ])
    _write_tsv(out / "per_class.tsv",
               ("class_id", "action", "precision", "recall", "f1", "support"),
               [(s.class_id, action_names[s.class_id], s.precision, s.recall,
                 s.f1, s.support) for s in outcome.f1.per_class])

    figures: List[str] = []

    fig, ax = _new_axes()
    curve = list(finetune_result.loss_curve)
    ax.plot(range(len(curve)), curve, color=_SERIES_COLOR, linewidth=1.0,
            label="fine-tune")
    if pretrain_result is not None and pretrain_result.loss_curve:
        ax2 = ax.twiny()
        mlm = list(pretrain_result.loss_curve)
        ax2.plot(range(len(mlm)), mlm, color=_ACCENT_COLOR, linewidth=0.8,
                 alpha=0.7, label="masked-token pretrain")
        ax2.set_xlabel("pretrain step")
        ax2.legend(loc="upper right")
    ax.set_xlabel("fine-tune step")
    ax.set_ylabel("cross-entropy loss")
    ax.set_title("Training loss")
    ax.legend(loc="upper left" if pretrain_result is not None else "best")
    _save_figure(fig, out / "loss_curve.png")
    figures.append("loss_curve.png")

    scored = [s for s in outcome.f1.per_class if s.support > 0]
    if scored:
        fig, ax = _new_axes(width=max(7.0, 0.28 * len(scored)))
        xs = np.arange(len(scored))
        ax.bar(xs, [s.f1 for s in scored], color=_SERIES_COLOR)
        ax.set_xticks(xs)
        ax.set_xticklabels([action_names[s.class_id] for s in scored],
                           rotation=90, fontsize=6)
        ax.set_ylabel("F1")
        ax.set_ylim(0, 1.05)
        ax.set_title("Per-action F1 on the test split (supported classes)")
        _save_figure(fig, out / "f1_per_class.png")
        figures.append("f1_per_class.png")

    return ReportFiles(digest_names=("report.json", "report.tsv",
                                     "per_class.tsv"),
                       figure_names=tuple(figures))


# ---- standalone evaluation -----------------------------------------------------------


def render_eval_report(out_dir: Union[str, Path], *,
                       action_names: Sequence[str],
                       outcome: Optional[EvalOutcome] = None,
                       product: Optional[ProductMetrics] = None) -> ReportFiles:
    """Classification scores and/or session-level product metrics."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    digest: List[str] = []
    figures: List[str] = []
    payload: Dict = {}

    if outcome is not None:
        payload["classification"] = {
            "loss": outcome.loss,
            "weighted_f1": outcome.f1.weighted,
            "macro_f1": outcome.f1.macro,
            "n_evaluated": outcome.n,
        }
        _write_tsv(out / "per_class.tsv",
                   ("class_id", "action", "precision", "recall", "f1",
                    "support"),
                   [(s.class_id, action_names[s.class_id], s.precision,
                     s.recall, s.f1, s.support) for s in outcome.f1.per_class])
        digest.append("per_class.tsv")

    if product is not None:
        groups = {"overall": product.overall, **product.by_difficulty}
        payload["product"] = {
            name: {"n": g.n, "fields_mean": g.fields_mean,
                   "fields_std": g.fields_std, "panel_mean": g.panel_mean,
                   "panel_std": g.panel_std, "e2e_rate": g.e2e_rate}
            for name, g in groups.items()}
        _write_tsv(out / "product_metrics.tsv",
                   ("group", "n", "fields_mean", "fields_std", "panel_mean",
                    "panel_std", "e2e_rate"),
                   [(name, g.n, g.fields_mean, g.fields_std, g.panel_mean,
                     g.panel_std, g.e2e_rate) for name, g in groups.items()])
        digest.append("product_metrics.tsv")

        fig, ax = _new_axes()
        names = list(groups)
        xs = np.arange(len(names))
        ax.bar(xs - 0.2, [groups[n].e2e_rate for n in names], width=0.4,
               color=_SERIES_COLOR, label="end-to-end rate")
        ax.bar(xs + 0.2, [groups[n].panel_mean / 4.0 for n in names],
               width=0.4, color=_ACCENT_COLOR, label="panel reached / 4")
        ax.set_xticks(xs)
        ax.set_xticklabels(names)
        ax.set_ylim(0, 1.05)
        ax.set_title("Session outcomes by difficulty")
        ax.legend()
        _save_figure(fig, out / "product_metrics.png")
        figures.append("product_metrics.png")

    _write_json(out / "eval.json", payload)
    digest.insert(0, "eval.json")
    return ReportFiles(digest_names=tuple(digest), figure_names=tuple(figures))


# ---- pretraining only ----------------------------------------------------------------


def render_pretrain_report(out_dir: Union[str, Path], *,
                           loss_curve: Sequence[float],
                           steps_per_epoch: Optional[int] = None) -> ReportFiles:
    """Masked-token pretraining loss, as a table and a per-step curve."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    curve = [float(v) for v in loss_curve]
    _write_json(out / "mlm_curve.json", {"loss_curve": curve,
                                         "steps_per_epoch": steps_per_epoch})
    _write_tsv(out / "mlm_curve.tsv", ["step", "loss"],
               [(i, v) for i, v in enumerate(curve)])
    fig, ax = _new_axes()
    ax.plot(range(len(curve)), curve, color=_SERIES_COLOR, linewidth=1.0)
    if steps_per_epoch:
        for boundary in range(steps_per_epoch, len(curve), steps_per_epoch):
            ax.axvline(boundary, color=_ACCENT_COLOR, alpha=0.25, linewidth=0.6)
    ax.set_xlabel("optimizer step")
    ax.set_ylabel("masked-token loss")
    ax.set_title("pretraining loss")
    _save_figure(fig, out / "mlm_loss.png")
    return ReportFiles(digest_names=("mlm_curve.json", "mlm_curve.tsv"),
                       figure_names=("mlm_loss.png",))


# ---- data-size sweep -----------------------------------------------------------------


def render_sweep_report(out_dir: Union[str, Path],
                        sweep: SweepResult) -> ReportFiles:
    """F1 versus training-set size, as a table and a log-x curve."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = list(sweep.rows)
    _write_json(out / "sweep.json", {"rows": [
        {"fraction": r.fraction, "n_calls": r.n_calls, "n_turns": r.n_turns,
         "weighted_f1": r.weighted_f1, "macro_f1": r.macro_f1}
        for r in rows]})
    _write_tsv(out / "sweep.tsv",
               ("fraction", "n_calls", "n_turns", "weighted_f1", "macro_f1"),
               [(r.fraction, r.n_calls, r.n_turns, r.weighted_f1, r.macro_f1)
                for r in rows])

    fig, ax = _new_axes()
    fracs = [r.fraction for r in rows]
    ax.plot(fracs, [r.weighted_f1 for r in rows], marker="o",
            color=_SERIES_COLOR, label="weighted F1")
    ax.plot(fracs, [r.macro_f1 for r in rows], marker="s",
            color=_ACCENT_COLOR, label="macro F1")
    ax.set_xscale("log")
    ax.set_xlabel("fraction of training calls")
    ax.set_ylabel("F1 on the fixed test split")
    ax.set_ylim(0, 1.05)
    ax.set_title("Scores versus training-set size")
    ax.legend()
    _save_figure(fig, out / "sweep.png")

    return ReportFiles(digest_names=("sweep.json", "sweep.tsv"),
                       figure_names=("sweep.png",))


# ---- latency -------------------------------------------------------------------------


def render_latency_report(out_dir: Union[str, Path],
                          report: LatencyReport) -> ReportFiles:
    """Single-request latency percentiles plus the sample histogram."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "latency.json", {
        "p50_ms": report.p50_ms, "p95_ms": report.p95_ms,
        "p99_ms": report.p99_ms, "mean_ms": report.mean_ms,
        "n_iter": report.n_iter})
    _write_tsv(out / "latency.tsv", ("metric", "value"), [
        ("p50_ms", report.p50_ms), ("p95_ms", report.p95_ms),
        ("p99_ms", report.p99_ms), ("mean_ms", report.mean_ms),
        ("n_iter", report.n_iter)])

    fig, ax = _new_axes()
    samples = np.asarray(report.samples, dtype=np.float64)
    ax.hist(samples, bins=min(40, max(10, report.n_iter // 10)),
            color=_SERIES_COLOR, alpha=0.8)
    for value, name in ((report.p50_ms, "p50"), (report.p95_ms, "p95"),
                        (report.p99_ms, "p99")):
        ax.axvline(value, color=_ACCENT_COLOR, linewidth=1.0, linestyle="--")
        ax.text(value, ax.get_ylim()[1] * 0.95, name, rotation=90,
                va="top", ha="right", fontsize=8, color=_ACCENT_COLOR)
    ax.set_xlabel("per-request latency (ms)")
    ax.set_ylabel("requests")
    ax.set_title("Prediction latency")
    _save_figure(fig, out / "latency.png")

    return ReportFiles(digest_names=("latency.json", "latency.tsv"),
                       figure_names=("latency.png",))


# ---- ratings -------------------------------------------------------------------------


def render_rating_report(out_dir: Union[str, Path],
                         stats: Dict[str, RatingStats]) -> ReportFiles:
    """Score distributions from collected session ratings."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "ratings.json", {
        name: {"n": s.n, "mean": s.mean, "std": s.std,
               "histogram": list(s.histogram)}
        for name, s in stats.items()})
    _write_tsv(out / "ratings.tsv",
               ("group", "n", "mean", "std", "n_1", "n_2", "n_3", "n_4", "n_5"),
               [(name, s.n, s.mean, s.std, *s.histogram)
                for name, s in stats.items()])

    fig, ax = _new_axes()
    overall = stats.get("all")
    if overall is not None:
        xs = np.arange(1, 6)
        ax.bar(xs, overall.histogram, color=_SERIES_COLOR)
        ax.set_xticks(xs)
    ax.set_xlabel("score")
    ax.set_ylabel("ratings")
    ax.set_title("Session rating distribution")
    _save_figure(fig, out / "ratings.png")

    return ReportFiles(digest_names=("ratings.json", "ratings.tsv"),
                       figure_names=("ratings.png",))

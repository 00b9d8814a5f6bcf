"""Command-line interface for the next-action prediction toolkit.

Subcommands cover the full workflow: simulate a call corpus, clean it,
pretrain and fine-tune models from a manifest, score checkpoints, sweep
training-set sizes, benchmark single-request latency, serve the HTTP API,
and chat with a checkpoint from the terminal.  Report-producing commands
write JSON + tab-separated tables and render their figures as PNG files in
the same output directory; key numbers are echoed as tab-separated lines.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, Optional

import click

from .errors import NapError


def _echo_kv(pairs) -> None:
    for key, value in pairs:
        if isinstance(value, float):
            value = f"{value:.6f}"
        click.echo(f"{key}\t{value}")


def _load_graph(sop: Optional[str]):
    from .reference import load_reference_sop
    from .sop import load_sop
    return load_sop(Path(sop)) if sop else load_reference_sop()


def _load_bundle(checkpoint: str, vocab: Optional[str], sop: Optional[str]):
    """Model + graph + vocab from a checkpoint and its sidecar files."""
    from .models import load_model
    from .tokenizer import load_vocab
    checkpoint_path = Path(checkpoint)
    vocab_path = Path(vocab) if vocab else checkpoint_path.parent / "vocab.json"
    if not vocab_path.exists():
        raise click.UsageError(
            f"vocabulary file not found at {vocab_path}; pass --vocab explicitly")
    loaded_vocab = load_vocab(vocab_path)
    graph = _load_graph(sop)
    model = load_model(checkpoint_path, loaded_vocab, graph)
    return model, graph, loaded_vocab


def _parse_mix(text: Optional[str]) -> Optional[Dict[str, float]]:
    if not text:
        return None
    mix: Dict[str, float] = {}
    for part in text.split(","):
        name, sep, weight = part.partition("=")
        if not sep:
            raise click.UsageError(
                f"difficulty mix entries look like name=weight, got {part!r}")
        mix[name.strip()] = float(weight)
    return mix


@click.group()
def main() -> None:
    """Next-action prediction: data, training, evaluation, and serving."""


# ---- data -----------------------------------------------------------------------------


@main.command()
@click.option("--sop", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Procedure document (defaults to the bundled reference).")
@click.option("--n-calls", type=int, default=1000, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--difficulty-mix", "mix", default=None,
              help='Weights like "easy=0.25,medium=0.5,hard=0.25".')
@click.option("--out", type=click.Path(dir_okay=False), required=True,
              help="Output dataset (one JSON turn per line).")
def simulate(sop, n_calls, seed, mix, out):
    """Generate a synthetic call corpus from a procedure document."""
    from .simulator import generate_dataset, save_dataset
    graph = _load_graph(sop)
    calls, stats = generate_dataset(graph, n_calls,
                                    difficulty_mix=_parse_mix(mix), seed=seed)
    save_dataset(calls, out, manifest={"sop_hash": graph.document_hash,
                                       "seed": seed, "stats": stats})
    _echo_kv([("out", out),
              ("n_calls", stats["n_calls"]),
              ("n_turns", stats["n_turns"]),
              ("avg_turns_per_call", stats["avg_turns_per_call"]),
              ("successful_calls", stats["successful_calls"]),
              ("unsuccessful_calls", stats["unsuccessful_calls"])])


@main.command()
@click.option("--sop", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--data", type=click.Path(exists=True, dir_okay=False), required=True,
              help="Input dataset to clean.")
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@click.option("--min-count", type=int, default=None,
              help="Rare-action cutoff (defaults to a corpus-scaled value).")
def preprocess(sop, data, out, min_count):
    """Clean a call corpus: dedupe, drop rare actions and filler turns."""
    from .preprocess import PipelineConfig, run_pipeline
    from .simulator import load_dataset, save_dataset
    graph = _load_graph(sop)
    calls = load_dataset(data)
    cleaned, report = run_pipeline(
        calls, PipelineConfig.for_graph(graph, min_count=min_count))
    save_dataset(cleaned, out, manifest={"sop_hash": graph.document_hash,
                                         "pipeline_report": report.to_dict()})
    report_path = Path(out).with_suffix(Path(out).suffix + ".report.json")
    report_path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True)
                           + "\n", encoding="utf-8")
    _echo_kv([("out", out), ("report", str(report_path))]
             + sorted(report.to_dict().items()))


# ---- training -------------------------------------------------------------------------


@main.command()
@click.option("--manifest", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
def pretrain(manifest, out):
    """Run only the masked-token pretraining phase of a manifest."""
    from .models import save_model
    from .reports import render_pretrain_report
    from .tokenizer import save_vocab
    from .training import prepare_experiment, pretrain_mlm
    prep = prepare_experiment(manifest)
    if prep.pretrain_config is None:
        raise click.UsageError("the manifest has no pretrain section")
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = prep.build_model()
    result = pretrain_mlm(model, prep.mlm_examples, prep.pretrain_config,
                          checkpoint_dir=out_dir)
    save_model(model, out_dir / "pretrained.napt")
    save_vocab(out_dir / "vocab.json", prep.vocab)
    render_pretrain_report(out_dir, loss_curve=result.loss_curve,
                           steps_per_epoch=result.schedule.steps_per_epoch)
    _echo_kv([("out", str(out_dir)),
              ("model", str(out_dir / "pretrained.napt")),
              ("steps", len(result.loss_curve)),
              ("final_loss", result.loss_curve[-1] if result.loss_curve else float("nan"))])


@main.command()
@click.option("--manifest", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
def train(manifest, out):
    """Run a full manifest experiment: data, pretraining, fine-tuning, report."""
    from .training import run_experiment
    result = run_experiment(manifest, out)
    _echo_kv([("out", str(result.out_dir)),
              ("model", str(result.model_path)),
              ("test_loss", result.test_loss),
              ("test_macro_f1", result.test_f1.macro),
              ("test_weighted_f1", result.test_f1.weighted),
              ("digest", str(result.digest_path))])


# ---- evaluation -----------------------------------------------------------------------


@main.command("eval")
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--vocab", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Vocabulary file (defaults to vocab.json beside the checkpoint).")
@click.option("--sop", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--data", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
def eval_cmd(checkpoint, vocab, sop, data, out):
    """Score a checkpoint on a dataset: classification and product metrics."""
    from .evaluation import classification_eval, product_metrics, session_from_call
    from .reports import render_eval_report
    from .simulator import load_dataset
    from .training import examples_from_calls
    model, graph, _ = _load_bundle(checkpoint, vocab, sop)
    calls = load_dataset(data)
    examples = examples_from_calls(calls, graph.action_names)
    outcome = classification_eval(model, examples, partition="test")
    product = product_metrics([session_from_call(c) for c in calls], graph)
    render_eval_report(out, action_names=graph.action_names,
                       outcome=outcome, product=product)
    _echo_kv([("out", out),
              ("n_examples", outcome.n),
              ("loss", outcome.loss),
              ("macro_f1", outcome.f1.macro),
              ("weighted_f1", outcome.f1.weighted),
              ("e2e_rate", product.e2e_rate),
              ("fields_mean", product.overall.fields_mean),
              ("panel_mean", product.overall.panel_mean)])


@main.command()
@click.option("--manifest", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--fractions", default="0.01,0.1,1.0", show_default=True,
              help="Comma-separated training-set fractions.")
@click.option("--out", type=click.Path(file_okay=False), required=True)
def sweep(manifest, fractions, out):
    """Train at several training-set sizes and chart score versus size."""
    from .evaluation import data_size_sweep
    from .reports import render_sweep_report
    fraction_values = [float(v) for v in fractions.split(",") if v.strip()]
    result = data_size_sweep(manifest, fraction_values, out_dir=out)
    render_sweep_report(out, result)
    click.echo("fraction\tn_calls\tn_turns\tmacro_f1\tweighted_f1")
    for row in result.rows:
        click.echo(f"{row.fraction:g}\t{row.n_calls}\t{row.n_turns}"
                   f"\t{row.macro_f1:.6f}\t{row.weighted_f1:.6f}")


@main.command()
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--vocab", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--sop", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--data", type=click.Path(exists=True, dir_okay=False), required=True,
              help="Dataset whose turns provide the benchmark requests.")
@click.option("--n-requests", type=int, default=1000, show_default=True,
              help="Timed predictions (after warmup).")
@click.option("--n-warmup", type=int, default=10, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
def bench(checkpoint, vocab, sop, data, n_requests, n_warmup, out):
    """Measure single-request prediction latency percentiles."""
    from .evaluation import latency_bench
    from .models import PredictionRequest
    from .reports import render_latency_report
    from .simulator import load_dataset
    model, _, _ = _load_bundle(checkpoint, vocab, sop)
    calls = load_dataset(data)
    requests = [PredictionRequest(utterance=t.utterance,
                                  action_history=tuple(t.prev_actions))
                for c in calls for t in c.turns]
    report = latency_bench(model, requests, n_warmup=n_warmup, n_iter=n_requests)
    render_latency_report(out, report)
    _echo_kv([("out", out), ("n_iter", report.n_iter),
              ("p50_ms", report.p50_ms), ("p95_ms", report.p95_ms),
              ("p99_ms", report.p99_ms), ("mean_ms", report.mean_ms)])


# ---- serving --------------------------------------------------------------------------


@main.command()
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--vocab", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--sop", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8000, show_default=True)
@click.option("--model-id", default=None,
              help="Served model identifier (defaults to the checkpoint stem).")
@click.option("--ratings", type=click.Path(dir_okay=False), default="ratings.jsonl",
              show_default=True, help="Append-only rating store.")
def serve(checkpoint, vocab, sop, host, port, model_id, ratings):
    """Serve prediction and live sessions over HTTP."""
    import uvicorn
    from .server import create_app
    model, graph, _ = _load_bundle(checkpoint, vocab, sop)
    app = create_app(model=model, graph=graph,
                     model_id=model_id or Path(checkpoint).stem,
                     rating_path=ratings)
    click.echo(f"serving {model_id or Path(checkpoint).stem} "
               f"on http://{host}:{port} (ratings -> {ratings})")
    uvicorn.run(app, host=host, port=port, log_level="info")


@main.command()
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--vocab", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--sop", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--difficulty", type=click.Choice(["easy", "medium", "hard"]),
              default="medium", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--ratings", type=click.Path(dir_okay=False), default=None,
              help="Optional append-only rating store.")
def chat(checkpoint, vocab, sop, difficulty, seed, ratings):
    """Role-play one call against a checkpoint from the terminal.

    Type the agent's lines; the model answers with its next action. Commands:
    /close ends the call and prints its metrics, /rate N [comment] rates a
    closed call, /quit leaves.
    """
    from .live import RatingStore, SessionStore
    model, graph, _ = _load_bundle(checkpoint, vocab, sop)
    store = SessionStore(model=model, graph=graph,
                         model_id=Path(checkpoint).stem,
                         rating_store=RatingStore(ratings) if ratings else None,
                         seed=seed)
    started = store.start(difficulty=difficulty)
    session_id = started["session_id"]
    click.echo(f"session {session_id} ({difficulty}); "
               f"suggested opening: {started['opening']!r}")
    click.echo("you are the desk agent; /close, /rate N [comment], /quit")
    while True:
        try:
            line = click.prompt("you", prompt_suffix="> ").strip()
        except (EOFError, KeyboardInterrupt, click.Abort):
            click.echo("bye")
            return
        if not line:
            continue
        try:
            if line == "/quit":
                click.echo("bye")
                return
            if line == "/close":
                outcome = store.close(session_id)
                _echo_kv(sorted(outcome.items()))
                continue
            if line.startswith("/rate"):
                parts = line.split(maxsplit=2)
                if len(parts) < 2 or not parts[1].isdigit():
                    click.echo("usage: /rate N [comment]")
                    continue
                row = store.rate(session_id, score=int(parts[1]), rater="agent",
                                 comment=parts[2] if len(parts) > 2 else "")
                _echo_kv(sorted(row.items()))
                continue
            reply = store.turn(session_id, line)
            click.echo(f"[{reply['action']} | panel {reply['panel']} | "
                       f"fields {reply['fields_collected']} | "
                       f"{reply['latency_ms']:.1f} ms] {reply['template']}")
        except NapError as err:
            click.echo(f"error: {err}")


if __name__ == "__main__":
    main()

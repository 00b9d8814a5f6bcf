"""Corpus cleaning for simulated call data.

Four pure passes, applied in a pinned order by :func:`run_pipeline`:

1. ``filter_successful`` — keep only calls that completed;
2. ``drop_rare_action_suffix`` — truncate each call at its first turn whose
   gold action is rare corpus-wide, iterated to a fixpoint so the output
   contains no rare labels at all;
3. ``drop_filler_turns`` — remove turns labeled with filler actions and
   re-stitch the surrounding action-history chains;
4. ``merge_fragments`` — collapse consecutive turns that share a gold action
   into one record.

Every pass preserves the action-history prefix invariant (each turn's
``prev_actions`` equals the previous turn's ``prev_actions`` plus its gold
action), and the whole pipeline is idempotent. Calls left with no turns are
dropped. ``turn_index`` values keep their original numbering, so gaps after
cleaning are expected.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

from nap.errors import ConfigError
from nap.simulator import CallRecord, TurnRecord
from nap.sop import SOPGraph

# the corpus scale at which a label needed 50 occurrences to be kept; smaller
# corpora scale the threshold down proportionally (floor of 2)
_RARE_BASE_COUNT = 50
_RARE_BASE_TURNS = 1_000_000


def default_min_count(corpus_turns: int) -> int:
    """Rarity threshold scaled to corpus size. Documented knob."""
    return max(2, round(_RARE_BASE_COUNT * corpus_turns / _RARE_BASE_TURNS))


@dataclass(frozen=True)
class PipelineConfig:
    """Cleaning knobs. ``min_count=None`` scales with the corpus size."""
    min_count: Optional[int] = None
    filler_actions: Tuple[str, ...] = ()

    @classmethod
    def for_graph(cls, graph: SOPGraph,
                  min_count: Optional[int] = None) -> "PipelineConfig":
        fillers = tuple(sorted(graph.action(i).name for i in graph.filler_ids()))
        return cls(min_count=min_count, filler_actions=fillers)


@dataclass(frozen=True)
class PipelineReport:
    input_calls: int
    input_turns: int
    calls_dropped_unsuccessful: int
    turns_dropped_unsuccessful: int
    turns_dropped_rare: int
    turns_dropped_filler: int
    turns_merged: int
    min_count_used: int
    output_calls: int
    output_turns: int

    def removed_total(self) -> int:
        return (self.turns_dropped_unsuccessful + self.turns_dropped_rare
                + self.turns_dropped_filler + self.turns_merged)

    def to_dict(self) -> Dict[str, int]:
        return {
            "input_calls": self.input_calls,
            "input_turns": self.input_turns,
            "calls_dropped_unsuccessful": self.calls_dropped_unsuccessful,
            "turns_dropped_unsuccessful": self.turns_dropped_unsuccessful,
            "turns_dropped_rare": self.turns_dropped_rare,
            "turns_dropped_filler": self.turns_dropped_filler,
            "turns_merged": self.turns_merged,
            "min_count_used": self.min_count_used,
            "output_calls": self.output_calls,
            "output_turns": self.output_turns,
        }

    def to_text(self) -> str:
        lines = [
            "cleaning report",
            f"  input:  {self.input_calls} calls, {self.input_turns} turns",
            f"  unsuccessful calls dropped: {self.calls_dropped_unsuccessful} "
            f"({self.turns_dropped_unsuccessful} turns)",
            f"  rare-label suffixes dropped: {self.turns_dropped_rare} turns "
            f"(min_count={self.min_count_used})",
            f"  filler turns dropped: {self.turns_dropped_filler}",
            f"  fragment turns merged away: {self.turns_merged}",
            f"  output: {self.output_calls} calls, {self.output_turns} turns",
        ]
        return "\n".join(lines)


def _n_turns(calls: Sequence[CallRecord]) -> int:
    return sum(len(c.turns) for c in calls)


def _with_turns(call: CallRecord,
                turns: Sequence[TurnRecord]) -> CallRecord:
    return replace(call, turns=tuple(turns))


def filter_successful(calls: Sequence[CallRecord]) -> List[CallRecord]:
    """Keep only calls that ran to completion."""
    return [c for c in calls if c.outcome == "successful"]


def drop_rare_action_suffix(calls: Sequence[CallRecord],
                            min_count: int) -> List[CallRecord]:
    """Truncate each call at its first rarely-labeled turn.

    Rarity is judged corpus-wide over gold actions. Because truncation lowers
    other labels' counts, the pass repeats until no retained turn's label is
    rare — a single sweep could leave labels below threshold, which would
    break pipeline idempotence. Calls truncated to nothing are dropped.
    """
    if min_count < 1:
        raise ConfigError(f"min_count must be >= 1, got {min_count}")
    current = list(calls)
    while True:
        counts = Counter(t.gold_next_action for c in current for t in c.turns)
        nxt: List[CallRecord] = []
        changed = False
        for call in current:
            cut = len(call.turns)
            for i, turn in enumerate(call.turns):
                if counts[turn.gold_next_action] < min_count:
                    cut = i
                    break
            if cut == len(call.turns):
                nxt.append(call)
                continue
            changed = True
            if cut > 0:
                nxt.append(_with_turns(call, call.turns[:cut]))
        current = nxt
        if not changed:
            return current


def drop_filler_turns(calls: Sequence[CallRecord],
                      filler_actions: Sequence[str]) -> List[CallRecord]:
    """Remove filler-labeled turns and re-stitch action histories."""
    fillers = set(filler_actions)
    if not fillers:
        return list(calls)
    out: List[CallRecord] = []
    for call in calls:
        kept = [t for t in call.turns if t.gold_next_action not in fillers]
        if not kept:
            continue
        stitched = [
            replace(t, prev_actions=tuple(
                a for a in t.prev_actions if a not in fillers))
            for t in kept
        ]
        out.append(_with_turns(call, stitched))
    return out


def merge_fragments(calls: Sequence[CallRecord]) -> List[CallRecord]:
    """Collapse consecutive same-label turns into single records.

    The merged record keeps the earliest turn index and the first turn's
    action history, joins the utterances with single spaces, and takes the
    final turn's slot snapshot (the state under which the label finally
    advanced). Histories downstream are rebuilt so the prefix invariant holds
    after the collapse.
    """
    out: List[CallRecord] = []
    for call in calls:
        merged: List[TurnRecord] = []
        i = 0
        while i < len(call.turns):
            j = i
            while (j + 1 < len(call.turns)
                   and call.turns[j + 1].gold_next_action
                   == call.turns[i].gold_next_action):
                j += 1
            run = call.turns[i:j + 1]
            turn = run[0]
            if len(run) > 1:
                turn = replace(
                    turn,
                    utterance=" ".join(t.utterance for t in run),
                    filled_slots_snapshot=dict(run[-1].filled_slots_snapshot))
            merged.append(turn)
            i = j + 1
        if merged:
            rebuilt = [merged[0]]
            for t in merged[1:]:
                prev = rebuilt[-1].prev_actions + (
                    rebuilt[-1].gold_next_action,)
                rebuilt.append(replace(t, prev_actions=prev))
            merged = rebuilt
        out.append(_with_turns(call, merged))
    return out


def run_pipeline(calls: Sequence[CallRecord],
                 config: Optional[PipelineConfig] = None
                 ) -> Tuple[List[CallRecord], PipelineReport]:
    """Run all four passes in order and account for every removed turn."""
    config = config or PipelineConfig()
    input_calls, input_turns = len(calls), _n_turns(calls)

    successful = filter_successful(calls)
    after_filter_turns = _n_turns(successful)

    min_count = (config.min_count if config.min_count is not None
                 else default_min_count(after_filter_turns))
    trimmed = drop_rare_action_suffix(successful, min_count)
    after_rare_turns = _n_turns(trimmed)

    no_fillers = drop_filler_turns(trimmed, config.filler_actions)
    after_filler_turns = _n_turns(no_fillers)

    merged = merge_fragments(no_fillers)
    output_turns = _n_turns(merged)

    report = PipelineReport(
        input_calls=input_calls,
        input_turns=input_turns,
        calls_dropped_unsuccessful=input_calls - len(successful),
        turns_dropped_unsuccessful=input_turns - after_filter_turns,
        turns_dropped_rare=after_filter_turns - after_rare_turns,
        turns_dropped_filler=after_rare_turns - after_filler_turns,
        turns_merged=after_filler_turns - output_turns,
        min_count_used=min_count,
        output_calls=len(merged),
        output_turns=output_turns,
    )
    return merged, report

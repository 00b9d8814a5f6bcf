"""Synthetic call generation by walking a procedure graph.

A simulated pharmacy-desk agent answers the system's questions while two
families of scenarios perturb the call:

* **agent scenarios** mangle utterance text only (mumbling, background noise,
  repeated expressions, hesitation, rambling) — slot values are unaffected;
* **flow scenarios** change the path: filler interludes (hold, repeat),
  withheld answers that force re-asks, rejected confirmations, revised
  earlier answers, and early hang-ups.

Difficulty levels draw scenario counts from fixed ranges (easy 0-1 agent /
0-1 flow, medium 2-3/2-3, hard 4-5/4-5) out of cumulative pools: a scenario
available at some level stays available at every harder level.

Every generated label is SOP-consistent: the gold next action is always a
member of ``next_candidates(graph, last_action, filled_slots)``. Calls are
generated independently with per-call seeds derived by hashing
``(master_seed, call_index)``, so parallel generation is deterministic.

Tuning constants near the top of the module control turn-count and
panel-share shape of the corpus; tests assert the resulting statistics.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from nap.errors import ConfigError
from nap.sop import SOPGraph
from nap.tokenizer import normalize_words

# ---- tuning knobs -------------------------------------------------------------

STEP_CAP = 200                  # hard per-call turn limit; hitting it fails the call
FILLER_TRIGGER_RATE = 0.12      # chance per turn to spend one filler-scenario budget
RX_EQUALS_POLICY_RATE = 0.30    # how often the rx group coincides with the policy no.
GOVERNMENT_PLAN_RATE = 0.50
ANYTHING_ELSE_WEIGHTS = (("none", 0.65), ("question", 0.15), ("callback", 0.20))
HANGUP_TURN_RANGE = (6, 30)     # early hang-ups strike inside this turn window

# ---- scenario registry ----------------------------------------------------------

@dataclass(frozen=True)
class ScenarioSpec:
    kind: str             # "agent" | "flow"
    name: str
    difficulty_pool: str  # lowest difficulty where the scenario appears


@dataclass(frozen=True)
class DifficultyLevel:
    level: str
    agent_count_range: Tuple[int, int]
    flow_count_range: Tuple[int, int]


SCENARIOS: Tuple[ScenarioSpec, ...] = (
    ScenarioSpec("agent", "mumbling", "easy"),
    ScenarioSpec("agent", "background_noise", "easy"),
    ScenarioSpec("agent", "repeated_expressions", "medium"),
    ScenarioSpec("agent", "hesitation", "medium"),
    ScenarioSpec("agent", "verbose_rambling", "hard"),
    ScenarioSpec("flow", "hold_on", "easy"),
    ScenarioSpec("flow", "ask_repeat", "easy"),
    ScenarioSpec("flow", "unclear_value", "medium"),
    ScenarioSpec("flow", "confirm_mismatch", "medium"),
    ScenarioSpec("flow", "revise_earlier_answer", "hard"),
    ScenarioSpec("flow", "early_hangup", "hard"),
)

DIFFICULTY_LEVELS: Dict[str, DifficultyLevel] = {
    "easy": DifficultyLevel("easy", (0, 1), (0, 1)),
    "medium": DifficultyLevel("medium", (2, 3), (2, 3)),
    "hard": DifficultyLevel("hard", (4, 5), (4, 5)),
}

_POOL_ORDER = ("easy", "medium", "hard")


def scenario_pool(kind: str, level: str) -> List[ScenarioSpec]:
    """Scenarios of ``kind`` available at ``level`` (cumulative across levels)."""
    cutoff = _POOL_ORDER.index(level)
    return [s for s in SCENARIOS
            if s.kind == kind and _POOL_ORDER.index(s.difficulty_pool) <= cutoff]


# ---- records --------------------------------------------------------------------

@dataclass(frozen=True)
class TurnRecord:
    """One agent utterance and the system action that must follow it.

    ``panel`` is the panel of ``gold_next_action``; ``filled_slots_snapshot``
    is the slot assignment after this utterance was understood — the state
    under which the gold action was selected.
    """
    call_id: str
    turn_index: int
    utterance: str
    prev_actions: Tuple[str, ...]
    gold_next_action: str
    panel: int
    filled_slots_snapshot: Dict[str, str]


@dataclass(frozen=True)
class CallRecord:
    call_id: str
    turns: Tuple[TurnRecord, ...]
    outcome: str                 # "successful" | "unsuccessful"
    difficulty: str
    scenarios: Tuple[str, ...]
    final_panel: int
    fields_collected: int


# ---- value banks ------------------------------------------------------------------

_DIGIT_WORDS = ("zero", "one", "two", "three", "four", "five",
                "six", "seven", "eight", "nine")
_FIRST_NAMES = ("maria", "daniel", "ruth", "victor", "alana", "peter",
                "joan", "hector", "simone", "walter", "ivy", "marcus")
_LAST_NAMES = ("santos", "reyes", "calloway", "nguyen", "okafor", "bell",
               "whitfield", "moreau", "barnes", "kaplan", "osei", "lund")
_MONTHS = ("january", "february", "march", "april", "may", "june", "july",
           "august", "september", "october", "november", "december")
_ORDINALS = ("first", "second", "third", "fourth", "fifth", "ninth",
             "twelfth", "fifteenth", "twentieth", "thirtieth")
_YEARS = ("nineteen seventy one", "nineteen seventy six", "nineteen eighty",
          "nineteen eighty four", "nineteen ninety", "nineteen ninety five")
_EMPLOYERS = ("harbor metals", "north plains grocery", "cedar valley schools",
              "bright line transit", "summit foundry", "lakeside textiles",
              "orchard software", "canyon freight")
_PHARMACIES = ("riverbend pharmacy", "oakwood pharmacy", "hillcrest pharmacy",
               "bayside pharmacy", "maple street pharmacy", "stonebridge pharmacy")
_DOLLARS = ("twenty five dollars", "forty dollars", "sixty dollars",
            "one hundred dollars", "two hundred fifty dollars",
            "five hundred dollars", "two thousand dollars",
            "three thousand dollars")

_DIGIT_LENGTHS = {
    "callback_number": 10, "member_id": 6, "medicare_id": 6, "policy_number": 6,
    "rx_group": 6, "rx_number": 5, "rx_bin": 6, "rx_pcn": 4,
    "prior_auth_number": 6, "pharmacy_phone": 10, "agent_extension": 3,
    "reference_number": 6, "claim_reference": 6,
}

# slots answered "yes"/"no" from the profile rather than a drawn value
_BOOLEAN_SLOTS = ("deductible_met", "prior_auth_required",
                  "mail_order_available", "specialty_coverage")
# confirmation slots controlled by mismatch/revision scenarios
_CONFIRM_SLOTS = ("identity_confirmed", "plan_recap_confirmed",
                  "benefits_confirmed", "claim_confirmed", "recap_confirmed")

# confirm-style action -> (confirm slot, slots a correction may revise)
_CONFIRM_NODES: Dict[str, Tuple[str, Tuple[str, ...]]] = {
    "verify identity summary": ("identity_confirmed",
                                ("member_id", "date_of_birth", "callback_number")),
    "recap plan details": ("plan_recap_confirmed",
                           ("policy_number", "rx_bin", "rx_number")),
    "confirm benefits summary": ("benefits_confirmed",
                                 ("benefit_year_max", "out_of_pocket_remaining")),
    "confirm claim details": ("claim_confirmed", ("claim_reference", "claim_date")),
    "verify recap carefully": ("recap_confirmed", ("policy_number", "rx_bin")),
    "verify recap quickly": ("recap_confirmed", ("policy_number", "rx_bin")),
}
_HANDLE_TO_CONFIRM = {
    "handle identity mismatch": "identity_confirmed",
    "handle plan correction": "plan_recap_confirmed",
    "handle benefits correction": "benefits_confirmed",
    "handle claim correction": "claim_confirmed",
    "handle recap correction": "recap_confirmed",
}

# slots whose first ask may be deliberately left unanswered (forcing a re-ask);
# weights bias the churn toward authentication so panel 0 dominates turn share
_REASKABLE_WEIGHTS: Tuple[Tuple[str, float], ...] = (
    ("client_name", 3.0), ("date_of_birth", 3.0), ("callback_number", 3.0),
    ("member_id", 3.0), ("insurance_provider", 1.0), ("government_program", 1.0),
    ("employer_name", 1.0), ("policy_number", 1.0), ("rx_group", 1.0),
    ("rx_number", 1.0), ("rx_bin", 1.0), ("plan_start_date", 1.0),
    ("copay_amount", 1.0), ("agent_name", 1.0), ("reference_number", 1.0),
)
_CONFIRM_NODE_WEIGHTS: Tuple[Tuple[str, float], ...] = (
    ("verify identity summary", 3.0), ("recap plan details", 1.0),
    ("confirm benefits summary", 1.0), ("confirm claim details", 1.0),
    ("verify recap quickly", 1.0), ("verify recap carefully", 1.0),
)

# ---- answer paraphrase banks -------------------------------------------------------

_GENERIC_ANSWERS = ("it is {value}", "that would be {value}",
                    "i have {value} here", "let me see, {value}",
                    "{value}, as far as i can tell")
_DIGIT_ANSWERS = ("it is {value}", "that one is {value}", "reading it off, {value}",
                  "i show {value}", "here it is, {value}", "{value}")
_DATE_ANSWERS = ("that is {value}", "it was {value}", "i have {value} on file",
                 "let me check, {value}", "the date is {value}")
_DOLLAR_ANSWERS = ("it is {value}", "that comes to {value}", "i show {value}",
                   "looks like {value}", "the amount is {value}")
_YES_ANSWERS = ("yes that is right", "yes that is correct", "yes all correct",
                "yes looks right to me", "yes that matches what i have")
_NO_ANSWERS = ("no that is not right", "no hold on that one is wrong",
               "no i do not think that is correct", "no that does not match",
               "no wait something is off")
_YESNO_VALUE_ANSWERS = {
    "yes": ("yes it is", "yes they have", "yes it does", "yes that is available",
            "yes on this plan"),
    "no": ("no it is not", "no they have not", "no it does not",
           "no not on this plan", "no that is not available"),
}

ANSWER_BANKS: Dict[str, Tuple[str, ...]] = {
    "client_name": ("the member's name is {value}", "it is for {value}",
                    "the patient is {value}", "we have {value} on file",
                    "that would be for {value}"),
    "date_of_birth": _DATE_ANSWERS,
    "callback_number": ("you can reach the desk at {value}",
                        "the callback is {value}", "best number is {value}",
                        "call us back at {value}", "it is {value}"),
    "member_id": _DIGIT_ANSWERS,
    "insurance_provider": ("the plan is with {value}", "it is {value}",
                           "carrier is {value}", "they are covered through {value}",
                           "{value} is the carrier"),
    "plan_type": ("it is a {value} plan", "this one is {value}",
                  "that is a {value} policy", "we have it as {value}",
                  "{value} coverage"),
    "government_program": ("it is {value}", "this is {value} coverage",
                           "the program is {value}", "they are on {value}",
                           "{value}"),
    "medicare_id": _DIGIT_ANSWERS,
    "medicaid_state": ("issued in {value}", "the state is {value}",
                       "it is {value}", "{value} medicaid", "through {value}"),
    "tricare_region": ("the {value} region", "it is {value}",
                       "region {value}", "they are in the {value} region",
                       "{value}"),
    "employer_name": ("the plan is with {value}", "she works at {value}",
                      "it is through {value}", "employer is {value}",
                      "they are at {value}"),
    "policy_number": _DIGIT_ANSWERS,
    "rx_group": _DIGIT_ANSWERS,
    "rx_number": _DIGIT_ANSWERS,
    "rx_bin": _DIGIT_ANSWERS,
    "rx_pcn": _DIGIT_ANSWERS,
    "plan_start_date": _DATE_ANSWERS,
    "renewal_month": ("it renews in {value}", "the renewal is {value}",
                      "that would be {value}", "every {value}", "{value}"),
    "copay_amount": _DOLLAR_ANSWERS,
    "prior_auth_number": _DIGIT_ANSWERS,
    "formulary_tier": ("it is tier {value}", "that sits on tier {value}",
                       "tier {value}", "we show tier {value}",
                       "the medication is tier {value}"),
    "pharmacy_name": ("it goes to {value}", "the pharmacy is {value}",
                      "routed to {value}", "that is {value}", "{value}"),
    "pharmacy_phone": ("their number is {value}", "you can call them at {value}",
                       "it is {value}", "the pharmacy line is {value}", "{value}"),
    "benefit_year_max": _DOLLAR_ANSWERS,
    "out_of_pocket_remaining": _DOLLAR_ANSWERS,
    "agent_name": ("this is {value}", "my name is {value}",
                   "you are speaking with {value}", "it is {value}",
                   "{value}, happy to help"),
    "agent_extension": ("my extension is {value}", "extension {value}",
                        "you can dial {value}", "it is {value}", "{value}"),
    "reference_number": _DIGIT_ANSWERS,
    "claim_reference": _DIGIT_ANSWERS,
    "claim_date": _DATE_ANSWERS,
}

_ANYTHING_ELSE_ANSWERS = {
    "none": ("none, we are all set", "none from my side thanks",
             "none, that covers it", "none at all", "none, nothing else"),
    "question": ("actually i do have a question about the timing",
                 "one question, when does this take effect",
                 "quick question about the copay",
                 "i have a question on the renewal",
                 "a question, who should we contact later"),
    "callback": ("a callback would be great", "please set up a callback",
                 "could we get a callback tomorrow", "a callback works best",
                 "schedule a callback with the supervisor please"),
}

_OPENING_LINES = ("hello pharmacy desk, how can i help",
                  "good morning, pharmacy benefits desk",
                  "you have reached the pharmacy desk",
                  "pharmacy office, go ahead",
                  "hi there, this is the pharmacy desk speaking")
_ACK_LINES = ("okay", "sure, go ahead", "sounds good", "alright", "mm yes go on",
              "right, understood")
_HOLD_LINES = ("can you hold on one second", "give me a moment please",
               "hang on, someone just walked in", "one second, let me grab the file",
               "please hold for a moment")
_REPEAT_LINES = ("sorry, could you repeat that", "what was that last part",
                 "could you say that again", "sorry the line cut out, once more",
                 "can you repeat the last sentence")
_NONANSWER_LINES = ("i will have to look that up, one moment",
                    "hmm i do not have that in front of me",
                    "let me find that, bear with me",
                    "not sure off the top of my head",
                    "i would need to check on that")
_CORRECTION_LINES = ("let me give you the right one",
                     "sorry about that, here is the correct value",
                     "apologies, i misread it earlier",
                     "right, the earlier one was wrong")
_REVISION_TEMPLATES = ("actually the {slot} is {value}",
                       "correction, the {slot} should be {value}",
                       "my mistake, {slot} is {value}")
_NOISE_WORDS = ("static", "crackle", "beeping")
_HESITATIONS = ("uh", "um", "hmm")
_RAMBLES = ("sorry it is a bit hectic over here today",
            "bear with me we are slammed this afternoon",
            "apologies for the wait the printer is acting up",
            "it has been nonstop calls all morning")


def _pick(rng: np.random.Generator, seq: Sequence[str]) -> str:
    return seq[int(rng.integers(len(seq)))]


def _digit_string(rng: np.random.Generator, length: int) -> str:
    return " ".join(_pick(rng, _DIGIT_WORDS) for _ in range(length))


def _spoken_date(rng: np.random.Generator, with_year: bool) -> str:
    date = f"{_pick(rng, _MONTHS)} {_pick(rng, _ORDINALS)}"
    if with_year:
        date += f" {_pick(rng, _YEARS)}"
    return date


def _weighted_pick(rng: np.random.Generator,
                   weighted: Sequence[Tuple[str, float]]) -> str:
    names = [n for n, _ in weighted]
    weights = np.array([w for _, w in weighted], dtype=np.float64)
    probs = weights / weights.sum()
    return names[int(rng.choice(len(names), p=probs))]


def _weighted_sample(rng: np.random.Generator,
                     weighted: Sequence[Tuple[str, float]], k: int) -> List[str]:
    pool = list(weighted)
    out: List[str] = []
    for _ in range(min(k, len(pool))):
        name = _weighted_pick(rng, pool)
        out.append(name)
        pool = [(n, w) for n, w in pool if n != name]
    return out


class _AgentProfile:
    """Pre-drawn true values for every slot the reference procedure elicits."""

    def __init__(self, graph: SOPGraph, rng: np.random.Generator):
        v: Dict[str, str] = {}
        v["client_name"] = f"{_pick(rng, _FIRST_NAMES)} {_pick(rng, _LAST_NAMES)}"
        v["date_of_birth"] = _spoken_date(rng, with_year=True)
        v["plan_start_date"] = _spoken_date(rng, with_year=False)
        v["claim_date"] = _spoken_date(rng, with_year=False)
        for slot, length in _DIGIT_LENGTHS.items():
            v[slot] = _digit_string(rng, length)
        if rng.random() < RX_EQUALS_POLICY_RATE:
            v["rx_group"] = v["policy_number"]
        v["insurance_provider"] = _pick(
            rng, graph.slots["insurance_provider"].values) \
            if "insurance_provider" in graph.slots else "blue harbor"
        v["plan_type"] = ("government" if rng.random() < GOVERNMENT_PLAN_RATE
                          else "commercial")
        v["government_program"] = _pick(rng, ("medicare", "medicaid", "tricare"))
        v["medicaid_state"] = _pick(rng, graph.slots["medicaid_state"].values) \
            if "medicaid_state" in graph.slots else "oregon"
        v["tricare_region"] = _pick(rng, ("east", "west", "overseas"))
        v["employer_name"] = _pick(rng, _EMPLOYERS)
        v["pharmacy_name"] = _pick(rng, _PHARMACIES)
        v["renewal_month"] = _pick(rng, _MONTHS)
        v["copay_amount"] = _pick(rng, _DOLLARS[:4])
        v["benefit_year_max"] = _pick(rng, _DOLLARS[4:])
        v["out_of_pocket_remaining"] = _pick(rng, _DOLLARS[:4])
        v["formulary_tier"] = _pick(rng, ("one", "two", "three", "specialty"))
        for slot in _BOOLEAN_SLOTS:
            v[slot] = "yes" if rng.random() < 0.5 else "no"
        v["agent_name"] = f"{_pick(rng, _FIRST_NAMES)} {_pick(rng, _LAST_NAMES)}"
        v["anything_else"] = _weighted_pick(rng, ANYTHING_ELSE_WEIGHTS)
        self.values = v
        self._rng = rng

    def value_for(self, graph: SOPGraph, slot: str) -> str:
        if slot in self.values:
            return self.values[slot]
        # generic fallback for non-reference procedures
        spec = graph.slots.get(slot)
        if spec is not None and spec.enumerable:
            value = _pick(self._rng, spec.values)
        else:
            value = _digit_string(self._rng, 4)
        self.values[slot] = value
        return value

    def redraw(self, graph: SOPGraph, slot: str, rng: np.random.Generator) -> str:
        spec = graph.slots.get(slot)
        if spec is not None and spec.enumerable:
            new = _pick(rng, spec.values)
        elif slot in _DIGIT_LENGTHS:
            new = _digit_string(rng, _DIGIT_LENGTHS[slot])
        elif slot in ("date_of_birth",):
            new = _spoken_date(rng, with_year=True)
        elif slot in ("plan_start_date", "claim_date"):
            new = _spoken_date(rng, with_year=False)
        elif slot in ("benefit_year_max", "out_of_pocket_remaining", "copay_amount"):
            new = _pick(rng, _DOLLARS)
        else:
            new = _digit_string(rng, 4)
        self.values[slot] = new
        return new


# ---- agent-noise injection ---------------------------------------------------------


def _mumble(words: List[str], rng: np.random.Generator) -> List[str]:
    idx = int(rng.integers(len(words)))
    w = words[idx]
    words[idx] = (w[: max(1, len(w) // 2)] + "mm") if len(w) > 2 else w + "mm"
    return words

def _background(words: List[str], rng: np.random.Generator) -> List[str]:
    for _ in range(int(rng.integers(1, 3))):
        pos = int(rng.integers(len(words) + 1))
        words.insert(pos, _pick(rng, _NOISE_WORDS))
    return words

def _repeat_words(words: List[str], rng: np.random.Generator) -> List[str]:
    for _ in range(int(rng.integers(1, 3))):
        pos = int(rng.integers(len(words)))
        words.insert(pos, words[pos])
    return words

def _hesitate(words: List[str], rng: np.random.Generator) -> List[str]:
    for _ in range(int(rng.integers(1, 3))):
        pos = int(rng.integers(len(words) + 1))
        words.insert(pos, _pick(rng, _HESITATIONS))
    return words

def _ramble(words: List[str], rng: np.random.Generator) -> List[str]:
    return words + _pick(rng, _RAMBLES).split()

_AGENT_EFFECTS = {
    "mumbling": _mumble,
    "background_noise": _background,
    "repeated_expressions": _repeat_words,
    "hesitation": _hesitate,
    "verbose_rambling": _ramble,
}


def inject_agent_noise(utterance: str,
                       scenarios: Sequence[Union[str, ScenarioSpec]],
                       rng: np.random.Generator) -> str:
    """Apply agent-kind scenario manglers to one utterance.

    Pure text perturbation: with no scenarios the text is returned unchanged;
    with at least one, the result always differs from the input and is never
    empty.
    """
    names = [s.name if isinstance(s, ScenarioSpec) else s for s in scenarios]
    unknown = [n for n in names if n not in _AGENT_EFFECTS]
    if unknown:
        raise ConfigError(f"unknown agent scenario(s): {unknown}")
    if not names:
        return utterance
    words = utterance.split() or ["mm"]
    for name in names:
        words = _AGENT_EFFECTS[name](words, rng)
    return " ".join(words)


# ---- call simulation ---------------------------------------------------------------


def derive_seed(master_seed: int, call_index: int) -> int:
    """Stable per-call seed: hash of (master seed, call index)."""
    blob = f"{master_seed}:{call_index}".encode("utf-8")
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little")


def _draw_scenarios(difficulty: str, rng: np.random.Generator) -> List[ScenarioSpec]:
    level = DIFFICULTY_LEVELS[difficulty]
    chosen: List[ScenarioSpec] = []
    for kind, (lo, hi) in (("agent", level.agent_count_range),
                           ("flow", level.flow_count_range)):
        pool = scenario_pool(kind, difficulty)
        count = min(int(rng.integers(lo, hi + 1)), len(pool))
        if count:
            idx = rng.choice(len(pool), size=count, replace=False)
            chosen.extend(pool[int(i)] for i in sorted(idx))
    return chosen


class _FlowState:
    """Per-call budgets and targets for the active flow scenarios."""

    def __init__(self, names: Sequence[str], rng: np.random.Generator):
        self.hold_budget = int(rng.integers(2, 4)) if "hold_on" in names else 0
        self.repeat_budget = int(rng.integers(2, 4)) if "ask_repeat" in names else 0
        self.unclear_targets = set(
            _weighted_sample(rng, _REASKABLE_WEIGHTS, int(rng.integers(1, 3)))
        ) if "unclear_value" in names else set()
        self.mismatch_nodes = set(
            _weighted_sample(rng, _CONFIRM_NODE_WEIGHTS, 1)
        ) if "confirm_mismatch" in names else set()
        self.revise_nodes = set(
            _weighted_sample(rng, _CONFIRM_NODE_WEIGHTS, int(rng.integers(1, 3)))
        ) if "revise_earlier_answer" in names else set()
        self.hangup_turn: Optional[int] = (
            int(rng.integers(HANGUP_TURN_RANGE[0], HANGUP_TURN_RANGE[1] + 1))
            if "early_hangup" in names else None)
        self.pending_revision: Optional[Tuple[str, str]] = None


def _answer_for_slot(slot: str, value: str, rng: np.random.Generator) -> str:
    if slot in _CONFIRM_SLOTS:
        bank = _YES_ANSWERS if value == "yes" else _NO_ANSWERS
        return _pick(rng, bank)
    if slot in _BOOLEAN_SLOTS:
        return _pick(rng, _YESNO_VALUE_ANSWERS[value])
    if slot == "anything_else":
        return _pick(rng, _ANYTHING_ELSE_ANSWERS[value])
    bank = ANSWER_BANKS.get(slot, _GENERIC_ANSWERS)
    return _pick(rng, bank).format(value=value)


def simulate_call(graph: SOPGraph, difficulty: str, rng_seed: int) -> CallRecord:
    """Walk the procedure once and return the labeled call."""
    if difficulty not in DIFFICULTY_LEVELS:
        raise ConfigError(f"unknown difficulty {difficulty!r}; "
                          f"expected one of {sorted(DIFFICULTY_LEVELS)}")
    rng = np.random.default_rng(rng_seed)
    profile = _AgentProfile(graph, rng)
    scenarios = _draw_scenarios(difficulty, rng)
    agent_names = [s.name for s in scenarios if s.kind == "agent"]
    flow = _FlowState([s.name for s in scenarios if s.kind == "flow"], rng)

    call_id = f"call-{rng_seed:016x}"
    slots: Dict[str, str] = {}
    prev: List[str] = []
    turns: List[TurnRecord] = []
    performed_required: set = set()
    filler_ids = set(graph.filler_ids())
    unclear_armed = set(flow.unclear_targets)
    mismatch_armed = set(flow.mismatch_nodes)
    revise_armed = set(flow.revise_nodes)

    start = graph.action(graph.start_id)

    def authored_next(node_id: int) -> Optional[int]:
        for to_id, e in graph.next_candidates(node_id, slots):
            if not e.synthetic:
                return to_id
        return None

    # turn 0: the agent answers the phone; the system must open the call
    utterance = inject_agent_noise(_pick(rng, _OPENING_LINES), agent_names, rng)
    turns.append(TurnRecord(call_id, 0, utterance, tuple(prev), start.name,
                            start.panel, dict(slots)))
    gold_id = start.action_id
    pending_id = start.action_id   # last non-filler action whose question is open
    hung_up = False

    while True:
        current = graph.action(gold_id)
        prev.append(current.name)
        if current.terminal:
            break
        if len(turns) >= STEP_CAP:
            break
        for k, v in current.sets.items():
            slots[k] = v
        performed_required.update(current.required_slots)
        if not current.filler:
            pending_id = current.action_id
        pending = graph.action(pending_id)

        turn_index = len(turns)
        if flow.hangup_turn is not None and turn_index >= flow.hangup_turn:
            hung_up = True
            break

        # filler interlude: the agent stalls instead of answering
        filler_override: Optional[int] = None
        if (flow.hold_budget or flow.repeat_budget) and filler_ids \
                and rng.random() < FILLER_TRIGGER_RATE:
            if flow.hold_budget:
                flow.hold_budget -= 1
                wanted = [i for i in filler_ids
                          if graph.action(i).name != "repeat last sentence"]
                utterance = _pick(rng, _HOLD_LINES)
            else:
                flow.repeat_budget -= 1
                wanted = [i for i in filler_ids
                          if graph.action(i).name == "repeat last sentence"]
                utterance = _pick(rng, _REPEAT_LINES)
            pool = sorted(wanted or filler_ids)
            filler_override = pool[int(rng.integers(len(pool)))]
        else:
            # the agent answers the open question (if any)
            name = current.name
            if name in _HANDLE_TO_CONFIRM:
                confirm_slot = _HANDLE_TO_CONFIRM[name]
                slots.pop(confirm_slot, None)
                if flow.pending_revision is not None:
                    slot, value = flow.pending_revision
                    slots[slot] = value
                    flow.pending_revision = None
                    phrase = _pick(rng, _REVISION_TEMPLATES).format(
                        slot=slot.replace("_", " "), value=value)
                    utterance = f"{_pick(rng, _CORRECTION_LINES)}, {phrase}"
                else:
                    utterance = _pick(rng, _CORRECTION_LINES)
            elif pending.required_slots:
                slot = pending.required_slots[0]
                if slot in unclear_armed and not current.filler:
                    unclear_armed.discard(slot)
                    utterance = _pick(rng, _NONANSWER_LINES)
                elif slot in _CONFIRM_SLOTS:
                    node_name = pending.name
                    saying_no = False
                    if node_name in mismatch_armed:
                        mismatch_armed.discard(node_name)
                        saying_no = True
                    elif node_name in revise_armed:
                        revise_armed.discard(node_name)
                        saying_no = True
                        revisable = _CONFIRM_NODES[node_name][1]
                        target = revisable[int(rng.integers(len(revisable)))]
                        new_value = profile.redraw(graph, target, rng)
                        flow.pending_revision = (target, new_value)
                    value = "no" if saying_no else "yes"
                    slots[slot] = value
                    utterance = _answer_for_slot(slot, value, rng)
                else:
                    value = profile.value_for(graph, slot)
                    if slot == "anything_else":
                        # one follow-up at most; afterwards the agent is done
                        profile.values[slot] = "none"
                    slots[slot] = value
                    utterance = _answer_for_slot(slot, value, rng)
            else:
                utterance = _pick(rng, _ACK_LINES)
        utterance = inject_agent_noise(utterance, agent_names, rng)

        if filler_override is not None:
            gold_id = filler_override
        else:
            nxt = authored_next(pending_id)
            if nxt is None:        # defensive: cannot happen on a valid graph
                break
            gold_id = nxt
        gold = graph.action(gold_id)
        turns.append(TurnRecord(call_id, turn_index, utterance, tuple(prev),
                                gold.name, gold.panel, dict(slots)))

    reached_terminal = bool(prev) and graph.action(prev[-1]).terminal
    required_ok = all(s in slots for s in performed_required)
    outcome = "successful" if (reached_terminal and required_ok
                               and not hung_up) else "unsuccessful"
    final_panel = graph.action(prev[-1]).panel if prev else start.panel
    return CallRecord(
        call_id=call_id, turns=tuple(turns), outcome=outcome,
        difficulty=difficulty, scenarios=tuple(s.name for s in scenarios),
        final_panel=final_panel, fields_collected=len(slots))


# ---- datasets ----------------------------------------------------------------------


def generate_dataset(graph: SOPGraph, n_calls: int,
                     difficulty_mix: Optional[Mapping[str, float]] = None,
                     seed: int = 0) -> Tuple[List[CallRecord], Dict]:
    """Generate ``n_calls`` independent calls plus a corpus statistics report."""
    if n_calls <= 0:
        raise ConfigError(f"n_calls must be positive, got {n_calls}")
    mix = dict(difficulty_mix) if difficulty_mix else {
        "easy": 1 / 3, "medium": 1 / 3, "hard": 1 / 3}
    unknown = [k for k in mix if k not in DIFFICULTY_LEVELS]
    if unknown:
        raise ConfigError(f"unknown difficulty level(s) in mix: {sorted(unknown)}")
    total = sum(mix.values())
    if total <= 0:
        raise ConfigError("difficulty mix weights must sum to a positive value")
    levels = sorted(mix)
    probs = np.array([mix[k] / total for k in levels], dtype=np.float64)

    calls: List[CallRecord] = []
    for i in range(n_calls):
        call_seed = derive_seed(seed, i)
        pick_rng = np.random.default_rng(call_seed ^ 0x5EED)
        difficulty = levels[int(pick_rng.choice(len(levels), p=probs))]
        record = simulate_call(graph, difficulty, call_seed)
        record = CallRecord(call_id=f"c{seed}-{i:05d}", turns=tuple(
            TurnRecord(f"c{seed}-{i:05d}", t.turn_index, t.utterance,
                       t.prev_actions, t.gold_next_action, t.panel,
                       t.filled_slots_snapshot) for t in record.turns),
            outcome=record.outcome, difficulty=record.difficulty,
            scenarios=record.scenarios, final_panel=record.final_panel,
            fields_collected=record.fields_collected)
        calls.append(record)
    return calls, dataset_stats(calls)


def dataset_stats(calls: Sequence[CallRecord]) -> Dict:
    """Corpus summary: calls, turns, averages, and per-panel turn shares."""
    n_turns = sum(len(c.turns) for c in calls)
    token_count = sum(len(normalize_words(t.utterance))
                      for c in calls for t in c.turns)
    panel_counts = {p: 0 for p in range(5)}
    for c in calls:
        for t in c.turns:
            panel_counts[t.panel] = panel_counts.get(t.panel, 0) + 1
    by_difficulty: Dict[str, int] = {}
    for c in calls:
        by_difficulty[c.difficulty] = by_difficulty.get(c.difficulty, 0) + 1
    successful = sum(1 for c in calls if c.outcome == "successful")
    return {
        "n_calls": len(calls),
        "n_turns": n_turns,
        "avg_turns_per_call": n_turns / len(calls) if calls else 0.0,
        "avg_tokens_per_turn": token_count / n_turns if n_turns else 0.0,
        "panel_turn_counts": panel_counts,
        "panel_turn_shares": {p: (c / n_turns if n_turns else 0.0)
                              for p, c in panel_counts.items()},
        "calls_by_difficulty": by_difficulty,
        "successful_calls": successful,
        "unsuccessful_calls": len(calls) - successful,
    }


def split_dataset(calls: Sequence[CallRecord],
                  ratios: Sequence[float] = (0.8, 0.1, 0.1),
                  seed: int = 0) -> Tuple[List[CallRecord], List[CallRecord],
                                          List[CallRecord]]:
    """Shuffle calls and split at call granularity into train/valid/test."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) \
            or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"ratios must be three non-negative numbers summing "
                          f"to 1, got {list(ratios)}")
    order = np.random.default_rng(seed).permutation(len(calls))
    shuffled = [calls[int(i)] for i in order]
    n = len(calls)
    n_train = int(n * ratios[0])
    n_valid = int(n * ratios[1])
    n_test = n - n_train - n_valid
    train = shuffled[:n_train]
    valid = shuffled[n_train:n_train + n_valid]
    test = shuffled[n_train + n_valid:n_train + n_valid + n_test]
    return train, valid, test


# ---- persistence -------------------------------------------------------------------


def save_dataset(calls: Sequence[CallRecord], path: Union[str, Path],
                 manifest: Optional[Mapping] = None) -> Path:
    """Write one turn per line (JSON), plus a sidecar generation manifest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for c in calls:
            for t in c.turns:
                row = {
                    "call_id": t.call_id,
                    "turn_index": t.turn_index,
                    "utterance": t.utterance,
                    "prev_actions": list(t.prev_actions),
                    "gold_next_action": t.gold_next_action,
                    "panel": t.panel,
                    "filled_slots_snapshot": t.filled_slots_snapshot,
                    "call_outcome": c.outcome,
                    "call_difficulty": c.difficulty,
                    "call_scenarios": list(c.scenarios),
                    "call_final_panel": c.final_panel,
                    "call_fields_collected": c.fields_collected,
                }
                fh.write(json.dumps(row, sort_keys=True))
                fh.write("\n")
    side = manifest_path(path)
    payload = {"n_calls": len(calls),
               "n_turns": sum(len(c.turns) for c in calls)}
    if manifest:
        payload.update(manifest)
    side.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")
    return path


def manifest_path(dataset_path: Union[str, Path]) -> Path:
    p = Path(dataset_path)
    return p.with_name(p.stem + ".manifest.json")


def load_dataset(path: Union[str, Path]) -> List[CallRecord]:
    """Read a turn-per-line dataset back into call records."""
    path = Path(path)
    calls: Dict[str, List[dict]] = {}
    order: List[str] = []
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}:{line_no}: bad dataset line: {exc}")
            cid = row["call_id"]
            if cid not in calls:
                calls[cid] = []
                order.append(cid)
            calls[cid].append(row)
    out: List[CallRecord] = []
    for cid in order:
        rows = sorted(calls[cid], key=lambda r: r["turn_index"])
        turns = tuple(
            TurnRecord(cid, r["turn_index"], r["utterance"],
                       tuple(r["prev_actions"]), r["gold_next_action"],
                       r["panel"], dict(r["filled_slots_snapshot"]))
            for r in rows)
        first = rows[0]
        out.append(CallRecord(
            call_id=cid, turns=turns, outcome=first["call_outcome"],
            difficulty=first["call_difficulty"],
            scenarios=tuple(first["call_scenarios"]),
            final_panel=first["call_final_panel"],
            fields_collected=first["call_fields_collected"]))
    return out

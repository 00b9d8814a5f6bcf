"""Live role-play sessions: per-conversation state on top of a trained model.

A session tracks one conversation between a human playing the desk agent and
the model driving the caller side.  Each turn submits the human's utterance;
the engine first *understands* it (captures slot values that answer the open
question), then predicts the next action under the updated state, commits that
action, and applies the fields the action itself sets.  Closing a session
freezes it and computes its product metrics; ratings attach only afterwards,
one per rater role, and persist to an append-only file that survives restarts.
"""

from __future__ import annotations

import json
import math
import re
import threading
import time
import uuid
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Deque, Dict, List, Optional, Union

from filelock import FileLock

from .errors import ConfigError, NapError
from .evaluation import CompletedSession, RatingRecord, product_metrics
from .models import NextActionModel, PredictionRequest, predict_next_action
from .simulator import DIFFICULTY_LEVELS, _OPENING_LINES
from .sop import ActionNode, SOPGraph

__all__ = [
    "SessionNotFoundError",
    "SessionStateError",
    "ModelNotLoadedError",
    "TurnEntry",
    "LiveSession",
    "LatencyWindow",
    "RatingStore",
    "capture_slots",
    "SessionStore",
]


class SessionNotFoundError(NapError):
    """No session with the requested id exists."""


class SessionStateError(NapError):
    """The request is valid but the session is in the wrong lifecycle stage."""


class ModelNotLoadedError(NapError):
    """The service has no model to predict with."""


# --------------------------------------------------------------------------
# slot capture

def capture_slots(graph: SOPGraph, pending: Optional[ActionNode],
                  utterance: str) -> Dict[str, str]:
    """Extract answers to ``pending``'s required slots from one utterance.

    Slots with a capture pattern take the pattern's first group; enumerable
    slots match any of their values on word boundaries.  Returns only the
    slots the utterance actually answered.
    """
    found: Dict[str, str] = {}
    if pending is None:
        return found
    text = utterance.lower()
    for slot_name in pending.required_slots:
        spec = graph.slots[slot_name]
        if spec.capture:
            match = re.search(spec.capture, text)
            if match:
                found[slot_name] = match.group(1)
        elif spec.enumerable:
            for value in spec.values:
                if re.search(rf"\b{re.escape(value.lower())}\b", text):
                    found[slot_name] = value
                    break
    return found


# --------------------------------------------------------------------------
# session state

@dataclass(frozen=True)
class TurnEntry:
    """One completed exchange: the human utterance and the committed action."""

    utterance: str
    action: str
    template: str
    panel: int
    probability: float
    fields_collected: int
    timestamp: float
    latency_ms: float

    def to_dict(self) -> Dict:
        return {
            "utterance": self.utterance,
            "action": self.action,
            "template": self.template,
            "panel": self.panel,
            "probability": self.probability,
            "fields_collected": self.fields_collected,
            "timestamp": self.timestamp,
            "latency_ms": self.latency_ms,
        }


@dataclass
class LiveSession:
    """Mutable record of one conversation; guarded by its own lock."""

    session_id: str
    model_id: str
    difficulty: str
    opening: str
    created_at: float
    transcript: List[TurnEntry] = field(default_factory=list)
    action_history: List[str] = field(default_factory=list)
    filled_slots: Dict[str, str] = field(default_factory=dict)
    performed_required: List[str] = field(default_factory=list)
    pending_action: Optional[ActionNode] = None
    closed: bool = False
    closed_at: Optional[float] = None
    outcome: Optional[Dict] = None
    ratings: Dict[str, Dict] = field(default_factory=dict)
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def summary(self) -> Dict:
        return {
            "session_id": self.session_id,
            "model_id": self.model_id,
            "difficulty": self.difficulty,
            "created_at": self.created_at,
            "closed": self.closed,
            "n_turns": len(self.transcript),
            "rated_by": sorted(self.ratings),
        }

    def view(self) -> Dict:
        """Full replay view: everything a reviewer needs to re-read the call."""
        view = self.summary()
        view.update({
            "opening": self.opening,
            "transcript": [entry.to_dict() for entry in self.transcript],
            "action_history": list(self.action_history),
            "filled_slots": dict(self.filled_slots),
            "fields_collected": len(self.filled_slots),
            "ratings": {rater: dict(row) for rater, row in self.ratings.items()},
            "closed_at": self.closed_at,
            "outcome": dict(self.outcome) if self.outcome is not None else None,
        })
        return view


# --------------------------------------------------------------------------
# latency window

class LatencyWindow:
    """Rolling window of recent request latencies with nearest-rank p95."""

    def __init__(self, maxlen: int = 512):
        self._samples: Deque[float] = deque(maxlen=maxlen)
        self._lock = threading.Lock()
        self._count = 0

    def record(self, latency_ms: float) -> None:
        with self._lock:
            self._samples.append(float(latency_ms))
            self._count += 1

    @property
    def count(self) -> int:
        with self._lock:
            return self._count

    def p95(self) -> Optional[float]:
        with self._lock:
            if not self._samples:
                return None
            ordered = sorted(self._samples)
        rank = min(len(ordered), max(1, math.ceil(0.95 * len(ordered))))
        return float(ordered[rank - 1])


# --------------------------------------------------------------------------
# rating persistence

class RatingStore:
    """Append-only line-delimited JSON store for ratings.

    Writes are serialized through a sibling ``.lock`` file so concurrent
    server workers never interleave partial lines; rows parse back through
    ``RatingRecord.from_dict`` and keep extra audit keys alongside.
    """

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self._lock = FileLock(str(self.path) + ".lock")

    def append(self, record: RatingRecord, **extra) -> Dict:
        row = {**record.to_dict(), **extra}
        line = json.dumps(row, sort_keys=True)
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")
        return row

    def load(self) -> List[Dict]:
        if not self.path.exists():
            return []
        with self._lock:
            text = self.path.read_text(encoding="utf-8")
        rows: List[Dict] = []
        for line in text.splitlines():
            line = line.strip()
            if line:
                rows.append(json.loads(line))
        return rows

    def records(self) -> List[RatingRecord]:
        return [RatingRecord.from_dict(row) for row in self.load()]


# --------------------------------------------------------------------------
# the store

class SessionStore:
    """All live sessions for one served model, plus their shared plumbing."""

    def __init__(self, *, model: Optional[NextActionModel], graph: SOPGraph,
                 model_id: str = "model", rating_store: Optional[RatingStore] = None,
                 latency_window: Optional[LatencyWindow] = None,
                 clock: Callable[[], float] = time.time, seed: int = 0):
        self.model = model
        self.graph = graph
        self.model_id = model_id
        self.rating_store = rating_store
        self.latency_window = latency_window if latency_window is not None else LatencyWindow()
        self.clock = clock
        self._sessions: Dict[str, LiveSession] = {}
        self._store_lock = threading.Lock()
        self._opening_state = seed & 0x7FFFFFFF

    # -- internals ---------------------------------------------------------

    def require_model(self) -> NextActionModel:
        if self.model is None:
            raise ModelNotLoadedError("no model is loaded")
        return self.model

    def _get(self, session_id: str) -> LiveSession:
        with self._store_lock:
            session = self._sessions.get(session_id)
        if session is None:
            raise SessionNotFoundError(f"unknown session {session_id!r}")
        return session

    def _next_opening(self) -> str:
        # deterministic rotation given the seed; no shared RNG object needed
        with self._store_lock:
            self._opening_state = (self._opening_state * 1103515245 + 12345) & 0x7FFFFFFF
            index = self._opening_state % len(_OPENING_LINES)
        return _OPENING_LINES[index]

    # -- lifecycle ---------------------------------------------------------

    def start(self, difficulty: str = "medium",
              model_id: Optional[str] = None) -> Dict:
        self.require_model()
        if difficulty not in DIFFICULTY_LEVELS:
            raise ConfigError(f"unknown difficulty {difficulty!r}, "
                              f"expected one of {sorted(DIFFICULTY_LEVELS)}")
        if model_id is not None and model_id != self.model_id:
            raise ConfigError(f"unknown model_id {model_id!r}; "
                              f"this service hosts {self.model_id!r}")
        session = LiveSession(
            session_id="s" + uuid.uuid4().hex[:12],
            model_id=self.model_id,
            difficulty=difficulty,
            opening=self._next_opening(),
            created_at=self.clock(),
        )
        with self._store_lock:
            self._sessions[session.session_id] = session
        return {"session_id": session.session_id, "opening": session.opening,
                "difficulty": session.difficulty, "model_id": session.model_id}

    def turn(self, session_id: str, utterance: str) -> Dict:
        model = self.require_model()
        session = self._get(session_id)
        with session.lock:
            if session.closed:
                raise SessionStateError(
                    f"session {session_id} is closed; no further turns accepted")
            # understand first: the utterance answers the open question
            session.filled_slots.update(
                capture_slots(self.graph, session.pending_action, utterance))
            request = PredictionRequest(
                utterance=utterance,
                action_history=tuple(session.action_history),
                k=len(session.transcript),
                prior_utterances=tuple(e.utterance for e in session.transcript),
                filled_slots=tuple(sorted(session.filled_slots)),
            )
            started = time.perf_counter()
            prediction = predict_next_action(model, request)
            latency_ms = (time.perf_counter() - started) * 1000.0
            node = self.graph.action(prediction.action_name)
            # commit: the action's own field updates land after it is chosen
            session.action_history.append(node.name)
            for slot_name, value in node.sets.items():
                session.filled_slots[slot_name] = value
            for slot_name in node.required_slots:
                if slot_name not in session.performed_required:
                    session.performed_required.append(slot_name)
            if not node.filler:
                session.pending_action = node
            entry = TurnEntry(
                utterance=utterance,
                action=node.name,
                template=node.template,
                panel=node.panel,
                probability=prediction.probability,
                fields_collected=len(session.filled_slots),
                timestamp=self.clock(),
                latency_ms=latency_ms,
            )
            session.transcript.append(entry)
        self.latency_window.record(latency_ms)
        return {
            "action": entry.action,
            "template": entry.template,
            "panel": entry.panel,
            "probability": entry.probability,
            "fields_collected": entry.fields_collected,
            "latency_ms": entry.latency_ms,
        }

    def close(self, session_id: str) -> Dict:
        session = self._get(session_id)
        with session.lock:
            if session.closed:
                raise SessionStateError(f"session {session_id} is already closed")
            history = tuple(session.action_history)
            reached_terminal = bool(history) and self.graph.action(history[-1]).terminal
            required_ok = all(name in session.filled_slots
                              for name in session.performed_required)
            successful = reached_terminal and required_ok
            completed = CompletedSession(
                call_id=session.session_id,
                difficulty=session.difficulty,
                action_history=history,
                filled_slots=tuple(sorted(session.filled_slots)),
                successful=successful,
            )
            outcome = product_metrics([completed], self.graph).outcomes[0]
            session.outcome = {
                "session_id": session.session_id,
                "difficulty": outcome.difficulty,
                "n_turns": len(session.transcript),
                "fields_collected": outcome.fields_collected,
                "final_panel": outcome.final_panel,
                "successful": successful,
                "reached_e2e": outcome.reached_e2e,
            }
            session.closed = True
            session.closed_at = self.clock()
            return dict(session.outcome)

    def rate(self, session_id: str, *, score: int, rater: str,
             comment: str = "") -> Dict:
        session = self._get(session_id)
        with session.lock:
            if not session.closed:
                raise SessionStateError(
                    f"session {session_id} is still open; close it before rating")
            if rater in session.ratings:
                raise SessionStateError(
                    f"session {session_id} already has a rating from {rater!r}")
            record = RatingRecord(call_id=session.session_id, rater=rater,
                                  score=score, comment=comment,
                                  difficulty=session.difficulty)
            row = record.to_dict()
            row["model_id"] = session.model_id
            row["timestamp"] = self.clock()
            if self.rating_store is not None:
                row = self.rating_store.append(
                    record, model_id=session.model_id, timestamp=row["timestamp"])
            session.ratings[rater] = row
            return dict(row)

    # -- read-only views ----------------------------------------------------

    def get(self, session_id: str) -> Dict:
        session = self._get(session_id)
        with session.lock:
            return session.view()

    def sessions(self) -> List[Dict]:
        with self._store_lock:
            items = sorted(self._sessions.values(), key=lambda s: s.created_at)
        return [session.summary() for session in items]

    def ratings(self) -> List[Dict]:
        if self.rating_store is not None:
            return self.rating_store.load()
        rows: List[Dict] = []
        with self._store_lock:
            items = sorted(self._sessions.values(), key=lambda s: s.created_at)
        for session in items:
            rows.extend(session.ratings[r] for r in sorted(session.ratings))
        return rows

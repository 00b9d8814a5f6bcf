"""Standard-operating-procedure graphs: actions, guarded transitions, panels.

An SOP document is JSON with top-level keys ``slots``, ``actions``,
``edges``, ``start``. Loading validates the whole document and reports
every problem found (not just the first), each tagged with its JSON path.

Filler actions ("please hold", "could you repeat that") are declared as
nodes flagged ``filler: true`` and carry no authored edges. The loader
synthesizes the loop structure for them: an entry edge from every
non-filler, non-terminal node to each filler, and return edges from each
filler to every action. All synthesized edges are always-on, carry
priorities above the authored range, and are exempt from the panel
monotonicity rule, so a filler interlude is legal anywhere and the walk
can resume wherever it left off.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

from nap.errors import SlotSchemaError, SOPValidationError, UnknownActionError

AUTHOR_PRIORITY_LIMIT = 10_000   # synthesized filler edges live above this
_ENUMERATION_CAP = 20_000        # assignments per node in the ambiguity check
_FREE_VALUE = "__unconstrained__"  # stand-in for "any other value" in enumeration

GUARD_OPS = ("eq", "present", "absent", "eq_slot")


@dataclass(frozen=True)
class GuardTest:
    """One conjunct of an edge guard."""
    slot: str
    op: str
    value: Optional[str] = None   # for eq
    other: Optional[str] = None   # for eq_slot

    def holds(self, slots: Mapping[str, str]) -> bool:
        if self.op == "eq":
            return slots.get(self.slot) == self.value
        if self.op == "present":
            return self.slot in slots
        if self.op == "absent":
            return self.slot not in slots
        # eq_slot: both present and equal
        return (self.slot in slots and self.other in slots
                and slots[self.slot] == slots[self.other])

    def describe(self) -> str:
        if self.op == "eq":
            return f"{self.slot} == {self.value!r}"
        if self.op == "eq_slot":
            return f"{self.slot} == {self.other}"
        return f"{self.slot} {self.op}"


@dataclass(frozen=True)
class TransitionEdge:
    from_id: int
    to_id: int
    guard: Tuple[GuardTest, ...]
    priority: int
    loop: bool = False        # exempt from panel monotonicity
    synthetic: bool = False   # loader-made filler plumbing

    def fires(self, slots: Mapping[str, str]) -> bool:
        return all(t.holds(slots) for t in self.guard)

    def describe_guard(self) -> str:
        return " and ".join(t.describe() for t in self.guard) or "always"


@dataclass(frozen=True)
class ActionNode:
    action_id: int
    name: str
    panel: int
    template: str
    terminal: bool = False
    required_slots: Tuple[str, ...] = ()
    filler: bool = False
    sets: Mapping[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class SlotSpec:
    name: str
    values: Optional[Tuple[str, ...]] = None  # None = free-form
    capture: Optional[str] = None             # regex with >= 1 group

    @property
    def enumerable(self) -> bool:
        return self.values is not None


class SOPGraph:
    """Validated, immutable procedure graph."""

    def __init__(self, nodes: List[ActionNode], edges: List[TransitionEdge],
                 start_id: int, slots: Dict[str, SlotSpec], document_hash: str):
        self.nodes = tuple(nodes)
        self.edges = tuple(edges)
        self.start_id = start_id
        self.slots = dict(slots)
        self.document_hash = document_hash
        self.name_to_id = {n.name: n.action_id for n in nodes}
        out: Dict[int, List[TransitionEdge]] = {n.action_id: [] for n in nodes}
        for e in edges:
            out[e.from_id].append(e)
        self._out = {k: tuple(sorted(v, key=lambda e: (e.priority, e.to_id)))
                     for k, v in out.items()}

    # -- lookups -------------------------------------------------------------

    @property
    def n_actions(self) -> int:
        return len(self.nodes)

    @property
    def action_names(self) -> List[str]:
        return [n.name for n in self.nodes]

    def action(self, ref: Union[int, str]) -> ActionNode:
        if isinstance(ref, str):
            if ref not in self.name_to_id:
                raise UnknownActionError([ref])
            return self.nodes[self.name_to_id[ref]]
        if not 0 <= ref < len(self.nodes):
            raise UnknownActionError([str(ref)])
        return self.nodes[ref]

    def panel_of(self, ref: Union[int, str]) -> int:
        return self.action(ref).panel

    def out_edges(self, ref: Union[int, str]) -> Tuple[TransitionEdge, ...]:
        return self._out[self.action(ref).action_id]

    def filler_ids(self) -> List[int]:
        return [n.action_id for n in self.nodes if n.filler]

    def required_slot_names(self) -> List[str]:
        seen: List[str] = []
        for n in self.nodes:
            for s in n.required_slots:
                if s not in seen:
                    seen.append(s)
        return seen

    # -- queries -------------------------------------------------------------

    def next_candidates(self, current: Union[int, str],
                        filled_slots: Mapping[str, str]) -> List[Tuple[int, TransitionEdge]]:
        """Fired out-edges of ``current`` under ``filled_slots``, priority order.

        Empty only at terminal nodes. Unknown slot names in the query raise
        SlotSchemaError rather than silently never matching.
        """
        unknown = [s for s in filled_slots if s not in self.slots]
        if unknown:
            raise SlotSchemaError(f"unknown slot name(s) in query: {sorted(unknown)}")
        node = self.action(current)
        return [(e.to_id, e) for e in self._out[node.action_id] if e.fires(filled_slots)]


# -- document loading ---------------------------------------------------------------


def _canonical_hash(document: dict) -> str:
    blob = json.dumps(document, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


class _Diagnostics:
    def __init__(self):
        self.items: List[str] = []

    def add(self, path: str, message: str) -> None:
        self.items.append(f"{path}: {message}")


def _parse_slots(raw, diag: _Diagnostics) -> Dict[str, SlotSpec]:
    slots: Dict[str, SlotSpec] = {}
    if not isinstance(raw, dict):
        diag.add("slots", "must be an object mapping slot name to spec")
        return slots
    for name, spec in raw.items():
        path = f"slots.{name}"
        values = None
        capture = None
        if isinstance(spec, list):
            values = spec
        elif isinstance(spec, dict):
            extra = set(spec) - {"values", "capture"}
            if extra:
                diag.add(path, f"unknown keys {sorted(extra)}")
            values = spec.get("values")
            capture = spec.get("capture")
        else:
            diag.add(path, "spec must be an object or a list of values")
            continue
        if values is not None:
            if (not isinstance(values, list) or not values
                    or not all(isinstance(v, str) for v in values)):
                diag.add(f"{path}.values", "must be a non-empty list of strings")
                values = None
            elif len(set(values)) != len(values):
                diag.add(f"{path}.values", "contains duplicates")
        if capture is not None:
            if not isinstance(capture, str):
                diag.add(f"{path}.capture", "must be a regex string")
                capture = None
            else:
                try:
                    if re.compile(capture).groups < 1:
                        diag.add(f"{path}.capture", "regex needs a capturing group")
                except re.error as exc:
                    diag.add(f"{path}.capture", f"invalid regex: {exc}")
                    capture = None
        slots[name] = SlotSpec(name=name,
                               values=tuple(values) if values is not None else None,
                               capture=capture)
    return slots


def _parse_actions(raw, slots: Dict[str, SlotSpec], diag: _Diagnostics) -> List[ActionNode]:
    nodes: List[ActionNode] = []
    if not isinstance(raw, list) or not raw:
        diag.add("actions", "must be a non-empty list")
        return nodes
    seen_names: Dict[str, int] = {}
    for i, a in enumerate(raw):
        path = f"actions[{i}]"
        if not isinstance(a, dict):
            diag.add(path, "must be an object")
            continue
        extra = set(a) - {"name", "panel", "template", "terminal",
                          "required_slots", "filler", "sets"}
        if extra:
            diag.add(path, f"unknown keys {sorted(extra)}")
        name = a.get("name")
        if not isinstance(name, str) or not name:
            diag.add(f"{path}.name", "must be a non-empty string")
            continue
        if name in seen_names:
            diag.add(f"{path}.name", f"duplicate action name {name!r} "
                                     f"(first at actions[{seen_names[name]}])")
            continue
        seen_names[name] = i
        panel = a.get("panel")
        if not isinstance(panel, int) or isinstance(panel, bool) or not 0 <= panel <= 4:
            diag.add(f"{path}.panel", "must be an integer in 0..4")
            panel = 0
        template = a.get("template")
        if not isinstance(template, str):
            diag.add(f"{path}.template", "must be a string")
            template = ""
        required = a.get("required_slots", [])
        if not isinstance(required, list) or not all(isinstance(s, str) for s in required):
            diag.add(f"{path}.required_slots", "must be a list of slot names")
            required = []
        for s in required:
            if s not in slots:
                diag.add(f"{path}.required_slots", f"unknown slot {s!r}")
        sets = a.get("sets", {})
        if not isinstance(sets, dict) or not all(
                isinstance(k, str) and isinstance(v, str) for k, v in sets.items()):
            diag.add(f"{path}.sets", "must map slot names to string values")
            sets = {}
        for k, v in sets.items():
            if k not in slots:
                diag.add(f"{path}.sets", f"unknown slot {k!r}")
            elif slots[k].enumerable and v not in slots[k].values:
                diag.add(f"{path}.sets", f"value {v!r} not in domain of slot {k!r}")
        terminal = bool(a.get("terminal", False))
        filler = bool(a.get("filler", False))
        if terminal and filler:
            diag.add(path, f"action {name!r} cannot be both terminal and filler")
        nodes.append(ActionNode(
            action_id=len(nodes), name=name, panel=panel, template=template,
            terminal=terminal, required_slots=tuple(required), filler=filler,
            sets=dict(sets)))
    return nodes


def _parse_guard(raw, path: str, slots: Dict[str, SlotSpec],
                 diag: _Diagnostics) -> Tuple[GuardTest, ...]:
    if not isinstance(raw, list):
        diag.add(path, "guard must be a list of tests")
        return ()
    tests: List[GuardTest] = []
    for j, t in enumerate(raw):
        tpath = f"{path}[{j}]"
        if not isinstance(t, dict):
            diag.add(tpath, "must be an object")
            continue
        op = t.get("op")
        slot = t.get("slot")
        if op not in GUARD_OPS:
            diag.add(tpath, f"op must be one of {list(GUARD_OPS)}")
            continue
        if not isinstance(slot, str) or slot not in slots:
            diag.add(f"{tpath}.slot", f"unknown slot {slot!r}")
            continue
        allowed = {"op", "slot"} | ({"value"} if op == "eq" else set()) \
            | ({"other"} if op == "eq_slot" else set())
        extra = set(t) - allowed
        if extra:
            diag.add(tpath, f"unexpected keys {sorted(extra)} for op {op!r}")
        if op == "eq":
            value = t.get("value")
            if not isinstance(value, str):
                diag.add(f"{tpath}.value", "eq test needs a string value")
                continue
            spec = slots[slot]
            if spec.enumerable and value not in spec.values:
                diag.add(f"{tpath}.value", f"value {value!r} not in domain of {slot!r}")
            tests.append(GuardTest(slot=slot, op="eq", value=value))
        elif op == "eq_slot":
            other = t.get("other")
            if not isinstance(other, str) or other not in slots:
                diag.add(f"{tpath}.other", f"unknown slot {other!r}")
                continue
            tests.append(GuardTest(slot=slot, op="eq_slot", other=other))
        else:
            tests.append(GuardTest(slot=slot, op=op))
    return tuple(tests)


def _parse_edges(raw, nodes: List[ActionNode], slots: Dict[str, SlotSpec],
                 diag: _Diagnostics) -> List[TransitionEdge]:
    edges: List[TransitionEdge] = []
    if not isinstance(raw, list):
        diag.add("edges", "must be a list")
        return edges
    by_name = {n.name: n for n in nodes}
    for i, e in enumerate(raw):
        path = f"edges[{i}]"
        if not isinstance(e, dict):
            diag.add(path, "must be an object")
            continue
        extra = set(e) - {"from", "to", "guard", "priority", "loop"}
        if extra:
            diag.add(path, f"unknown keys {sorted(extra)}")
        ok = True
        for key in ("from", "to"):
            ref = e.get(key)
            if not isinstance(ref, str) or ref not in by_name:
                diag.add(f"{path}.{key}", f"unknown action {ref!r}")
                ok = False
            elif by_name[ref].filler:
                diag.add(f"{path}.{key}",
                         f"{ref!r} is a filler action; its edges are synthesized, "
                         "not authored")
                ok = False
        if ok and by_name[e["from"]].terminal:
            diag.add(f"{path}.from", f"terminal action {e['from']!r} cannot have out-edges")
            ok = False
        priority = e.get("priority", 0)
        if not isinstance(priority, int) or isinstance(priority, bool) \
                or not 0 <= priority < AUTHOR_PRIORITY_LIMIT:
            diag.add(f"{path}.priority",
                     f"must be an integer in 0..{AUTHOR_PRIORITY_LIMIT - 1}")
            priority = 0
        guard = _parse_guard(e.get("guard", []), f"{path}.guard", slots, diag)
        if not ok:
            continue
        edges.append(TransitionEdge(
            from_id=by_name[e["from"]].action_id, to_id=by_name[e["to"]].action_id,
            guard=guard, priority=priority, loop=bool(e.get("loop", False))))
    return edges


def _synthesize_filler_edges(nodes: Sequence[ActionNode]) -> List[TransitionEdge]:
    fillers = [n for n in nodes if n.filler]
    if not fillers:
        return []
    out: List[TransitionEdge] = []
    for n in nodes:
        if n.filler or n.terminal:
            continue
        for k, f in enumerate(fillers):
            out.append(TransitionEdge(
                from_id=n.action_id, to_id=f.action_id, guard=(),
                priority=AUTHOR_PRIORITY_LIMIT + k, loop=True, synthetic=True))
    for f in fillers:
        for n in nodes:
            out.append(TransitionEdge(
                from_id=f.action_id, to_id=n.action_id, guard=(),
                priority=AUTHOR_PRIORITY_LIMIT + n.action_id, loop=True, synthetic=True))
    return out


def _candidate_values(node_edges: Sequence[TransitionEdge],
                      slots: Dict[str, SlotSpec]) -> Dict[str, List[Optional[str]]]:
    """Per-slot value sets that distinguish every guard outcome at one node."""
    referenced: Dict[str, set] = {}
    pairs: List[Tuple[str, str]] = []
    for e in node_edges:
        for t in e.guard:
            referenced.setdefault(t.slot, set())
            if t.op == "eq":
                referenced[t.slot].add(t.value)
            elif t.op == "eq_slot":
                referenced.setdefault(t.other, set())
                pairs.append((t.slot, t.other))
    candidates: Dict[str, set] = {}
    for name, constants in referenced.items():
        spec = slots[name]
        if spec.enumerable:
            candidates[name] = set(spec.values)
        else:
            candidates[name] = set(constants) | {_FREE_VALUE}
    # slots compared to each other must share value sets so the equal case
    # and the unequal case both occur in the enumeration
    for a, b in pairs:
        union = candidates[a] | candidates[b] | {_FREE_VALUE + ".a", _FREE_VALUE + ".b"}
        candidates[a] = union
        candidates[b] = union
    return {name: [None, *sorted(vals)] for name, vals in candidates.items()}


def _check_ambiguity(graph_nodes: Sequence[ActionNode],
                     out_edges: Dict[int, List[TransitionEdge]],
                     slots: Dict[str, SlotSpec], diag: _Diagnostics) -> None:
    for node in graph_nodes:
        edges = out_edges.get(node.action_id, [])
        if not edges:
            continue
        cands = _candidate_values(edges, slots)
        names = sorted(cands)
        n_assignments = 1
        for name in names:
            n_assignments *= len(cands[name])
        if n_assignments > _ENUMERATION_CAP:
            diag.add(f"actions[{node.action_id}]",
                     f"guard enumeration too large ({n_assignments} assignments)")
            continue
        for combo in itertools.product(*(cands[n] for n in names)):
            assignment = {n: v for n, v in zip(names, combo) if v is not None}
            fired = [e for e in edges if e.fires(assignment)]
            if not fired:
                continue
            best = min(e.priority for e in fired)
            tied = [e for e in fired if e.priority == best]
            if len(tied) > 1:
                targets = ", ".join(graph_nodes[e.to_id].name for e in tied)
                diag.add(
                    f"actions[{node.action_id}]",
                    f"ambiguous transitions from {node.name!r} under "
                    f"{assignment or '{}'}: priority {best} ties between [{targets}]")
                break


def load_sop(document: Union[str, Path, dict]) -> SOPGraph:
    """Parse and validate an SOP document (path, JSON text, or parsed dict).

    Raises SOPValidationError carrying every diagnostic found; each
    diagnostic is prefixed with the JSON path of the offending element.
    """
    if isinstance(document, Path) or (
            isinstance(document, str) and not document.lstrip().startswith("{")):
        try:
            text = Path(document).read_text(encoding="utf-8")
        except OSError as exc:
            raise SOPValidationError([f"$: cannot read document: {exc}"]) from None
    elif isinstance(document, str):
        text = document
    else:
        try:
            text = json.dumps(document)
        except (TypeError, ValueError) as exc:
            raise SOPValidationError([f"$: document not JSON-serializable: {exc}"]) from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SOPValidationError([f"$: invalid JSON: {exc}"]) from None
    if not isinstance(doc, dict):
        raise SOPValidationError(["$: document must be a JSON object"])

    diag = _Diagnostics()
    extra = set(doc) - {"slots", "actions", "edges", "start"}
    if extra:
        diag.add("$", f"unknown top-level keys {sorted(extra)}")
    for key in ("slots", "actions", "edges", "start"):
        if key not in doc:
            diag.add("$", f"missing top-level key {key!r}")
    if diag.items:
        raise SOPValidationError(diag.items)

    slots = _parse_slots(doc["slots"], diag)
    nodes = _parse_actions(doc["actions"], slots, diag)
    edges = _parse_edges(doc["edges"], nodes, slots, diag)
    if diag.items:
        raise SOPValidationError(diag.items)

    start = doc["start"]
    by_name = {n.name: n for n in nodes}
    if not isinstance(start, str) or start not in by_name:
        diag.add("start", f"unknown action {start!r}")
    elif by_name[start].filler:
        diag.add("start", "start action cannot be a filler")

    edges = edges + _synthesize_filler_edges(nodes)
    out: Dict[int, List[TransitionEdge]] = {n.action_id: [] for n in nodes}
    for e in edges:
        out[e.from_id].append(e)

    for n in nodes:
        if n.terminal and any(not e.synthetic for e in out[n.action_id]):
            diag.add(f"actions[{n.action_id}]",
                     f"terminal action {n.name!r} has outgoing edges")
        if not n.terminal and not out[n.action_id]:
            diag.add(f"actions[{n.action_id}]",
                     f"non-terminal action {n.name!r} has no outgoing edges")

    # Reachability is judged over authored edges: filler plumbing reaches
    # everything by construction, so it would mask genuinely dead actions.
    # A filler itself is reachable as long as some reachable node can enter it.
    if isinstance(start, str) and start in by_name and not by_name[start].filler:
        seen = {by_name[start].action_id}
        frontier = [by_name[start].action_id]
        while frontier:
            cur = frontier.pop()
            for e in out[cur]:
                if not e.synthetic and e.to_id not in seen:
                    seen.add(e.to_id)
                    frontier.append(e.to_id)
        filler_entry_exists = any(
            not nodes[i].filler and not nodes[i].terminal for i in seen)
        for n in nodes:
            reachable = (n.action_id in seen
                         or (n.filler and filler_entry_exists))
            if not reachable:
                diag.add(f"actions[{n.action_id}]",
                         f"action {n.name!r} unreachable from start")

    # panel monotonicity on non-loop edges
    for i, e in enumerate(edges):
        if e.loop or e.synthetic:
            continue
        if nodes[e.to_id].panel < nodes[e.from_id].panel:
            diag.add(f"edges[{i}]",
                     f"panel decreases {nodes[e.from_id].name!r} (panel "
                     f"{nodes[e.from_id].panel}) -> {nodes[e.to_id].name!r} "
                     f"(panel {nodes[e.to_id].panel}) on a non-loop edge")

    _check_ambiguity(nodes, out, slots, diag)

    if diag.items:
        raise SOPValidationError(diag.items)
    return SOPGraph(nodes, edges, by_name[start].action_id, slots,
                    document_hash=_canonical_hash(doc))

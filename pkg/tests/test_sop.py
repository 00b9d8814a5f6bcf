"""Procedure-graph loading, validation, and transition queries."""

import copy
import json

import pytest

from nap.errors import SlotSchemaError, SOPValidationError, UnknownActionError
from nap.sop import AUTHOR_PRIORITY_LIMIT, load_sop


def linear_doc():
    """Two-step procedure: greet, then finish."""
    return {
        "slots": {"ready": ["yes", "no"]},
        "actions": [
            {"name": "greet", "panel": 0, "template": "Hello, shall we begin?",
             "required_slots": ["ready"]},
            {"name": "goodbye", "panel": 4, "template": "All done, goodbye.",
             "terminal": True},
        ],
        "edges": [
            {"from": "greet", "to": "goodbye", "guard": [], "priority": 0},
        ],
        "start": "greet",
    }


def branching_doc():
    """Procedure exercising every guard operator, a filler, and a loop."""
    return {
        "slots": {
            "plan_type": ["commercial", "government"],
            "policy_number": {"capture": r"policy (\w+)"},
            "rx_group": {"capture": r"group (\w+)"},
            "pushback": ["yes"],
        },
        "actions": [
            {"name": "ask plan type", "panel": 0, "template": "What kind of plan is it?",
             "required_slots": ["plan_type"]},
            {"name": "ask policy number", "panel": 1, "template": "What is the policy number?",
             "required_slots": ["policy_number"]},
            {"name": "reask policy number", "panel": 1, "template": "Sorry, the policy number?",
             "required_slots": ["policy_number"], "sets": {"pushback": "yes"}},
            {"name": "ask rx group", "panel": 1, "template": "And the RX group?",
             "required_slots": ["rx_group"]},
            {"name": "confirm rx equals policy", "panel": 1,
             "template": "The RX group matches the policy number, correct?"},
            {"name": "wrap up", "panel": 4, "template": "That is everything."},
            {"name": "call complete", "panel": 4, "template": "Goodbye.", "terminal": True},
            {"name": "hold please", "panel": 0, "template": "Of course, take your time.",
             "filler": True},
        ],
        "edges": [
            {"from": "ask plan type", "to": "ask policy number",
             "guard": [{"op": "present", "slot": "plan_type"}], "priority": 0},
            {"from": "ask plan type", "to": "ask plan type",
             "guard": [{"op": "absent", "slot": "plan_type"}], "priority": 1},
            {"from": "ask policy number", "to": "ask rx group",
             "guard": [{"op": "present", "slot": "policy_number"}], "priority": 0},
            {"from": "ask policy number", "to": "reask policy number",
             "guard": [{"op": "absent", "slot": "policy_number"}], "priority": 1},
            {"from": "reask policy number", "to": "ask rx group",
             "guard": [{"op": "present", "slot": "policy_number"}], "priority": 0},
            {"from": "reask policy number", "to": "reask policy number",
             "guard": [{"op": "absent", "slot": "policy_number"}], "priority": 1},
            {"from": "ask rx group", "to": "confirm rx equals policy",
             "guard": [{"op": "eq_slot", "slot": "rx_group", "other": "policy_number"}],
             "priority": 0},
            {"from": "ask rx group", "to": "wrap up",
             "guard": [{"op": "present", "slot": "rx_group"}], "priority": 1},
            {"from": "ask rx group", "to": "ask rx group",
             "guard": [{"op": "absent", "slot": "rx_group"}], "priority": 2},
            {"from": "confirm rx equals policy", "to": "wrap up", "guard": [], "priority": 0},
            {"from": "wrap up", "to": "call complete",
             "guard": [{"op": "eq", "slot": "plan_type", "value": "commercial"}],
             "priority": 0},
            {"from": "wrap up", "to": "call complete",
             "guard": [{"op": "eq", "slot": "plan_type", "value": "government"}],
             "priority": 1},
            {"from": "wrap up", "to": "ask plan type",
             "guard": [{"op": "absent", "slot": "plan_type"}], "priority": 2, "loop": True},
        ],
        "start": "ask plan type",
    }


# -- loading ------------------------------------------------------------------


def test_linear_document_loads():
    g = load_sop(linear_doc())
    assert g.n_actions == 2
    assert g.action_names == ["greet", "goodbye"]
    assert g.start_id == g.action("greet").action_id
    assert g.action("goodbye").terminal
    assert g.panel_of("goodbye") == 4
    # one authored edge, no fillers to synthesize for
    assert len(g.edges) == 1


def test_load_accepts_dict_text_and_path(tmp_path):
    doc = linear_doc()
    text = json.dumps(doc)
    path = tmp_path / "procedure.json"
    path.write_text(text, encoding="utf-8")
    hashes = {load_sop(doc).document_hash,
              load_sop(text).document_hash,
              load_sop(path).document_hash,
              load_sop(str(path)).document_hash}
    assert len(hashes) == 1


def test_document_hash_tracks_content():
    a = load_sop(linear_doc())
    changed = linear_doc()
    changed["actions"][0]["template"] = "Hi there, ready to start?"
    b = load_sop(changed)
    assert a.document_hash != b.document_hash
    # key order is canonicalized away
    reordered = {k: linear_doc()[k] for k in ("start", "edges", "actions", "slots")}
    assert load_sop(reordered).document_hash == a.document_hash


def test_missing_file_and_bad_json_are_reported():
    with pytest.raises(SOPValidationError, match="cannot read"):
        load_sop("no/such/file.json")
    with pytest.raises(SOPValidationError, match="invalid JSON"):
        load_sop("{not json]")


def test_slot_shorthand_and_capture():
    g = load_sop(branching_doc())
    assert g.slots["plan_type"].values == ("commercial", "government")
    assert g.slots["plan_type"].enumerable
    assert not g.slots["policy_number"].enumerable
    assert g.slots["policy_number"].capture == r"policy (\w+)"


def test_required_slot_names_in_first_seen_order():
    g = load_sop(branching_doc())
    assert g.required_slot_names() == ["plan_type", "policy_number", "rx_group"]


# -- validation diagnostics ---------------------------------------------------


def diagnostics(doc):
    with pytest.raises(SOPValidationError) as info:
        load_sop(doc)
    return info.value.diagnostics


def test_duplicate_action_name():
    doc = linear_doc()
    doc["actions"].append({"name": "greet", "panel": 0, "template": "again"})
    out = diagnostics(doc)
    assert any("actions[2].name" in d and "duplicate" in d for d in out)


def test_dangling_edge_target():
    doc = linear_doc()
    doc["edges"][0]["to"] = "nonexistent"
    out = diagnostics(doc)
    assert any("edges[0].to" in d and "nonexistent" in d for d in out)


def test_unknown_slot_in_guard_and_required():
    doc = linear_doc()
    doc["actions"][0]["required_slots"] = ["mystery"]
    doc["edges"][0]["guard"] = [{"op": "present", "slot": "ghost"}]
    out = diagnostics(doc)
    assert any("required_slots" in d and "mystery" in d for d in out)
    assert any("edges[0].guard[0]" in d and "ghost" in d for d in out)


def test_eq_value_outside_domain():
    doc = linear_doc()
    doc["edges"][0]["guard"] = [{"op": "eq", "slot": "ready", "value": "maybe"}]
    out = diagnostics(doc)
    assert any("guard[0].value" in d and "maybe" in d for d in out)


def test_sets_value_outside_domain():
    doc = linear_doc()
    doc["actions"][0]["sets"] = {"ready": "perhaps"}
    out = diagnostics(doc)
    assert any("actions[0].sets" in d and "perhaps" in d for d in out)


def test_bad_panel_and_bad_priority():
    doc = linear_doc()
    doc["actions"][0]["panel"] = 7
    doc["edges"][0]["priority"] = AUTHOR_PRIORITY_LIMIT
    out = diagnostics(doc)
    assert any("actions[0].panel" in d for d in out)
    assert any("edges[0].priority" in d for d in out)


def test_terminal_with_out_edge():
    doc = linear_doc()
    doc["edges"].append({"from": "goodbye", "to": "greet", "guard": [], "priority": 0})
    out = diagnostics(doc)
    assert any("edges[1].from" in d and "goodbye" in d for d in out)


def test_non_terminal_without_out_edges():
    doc = linear_doc()
    doc["actions"][1]["terminal"] = False
    out = diagnostics(doc)
    assert any("goodbye" in d and "no outgoing edges" in d for d in out)


def test_unreachable_action():
    doc = branching_doc()
    doc["actions"].append({"name": "island", "panel": 2, "template": "never seen",
                           "terminal": True})
    out = diagnostics(doc)
    assert any("island" in d and "unreachable" in d for d in out)


def test_panel_decrease_rejected_unless_loop():
    doc = branching_doc()
    bad = {"from": "wrap up", "to": "ask policy number",
           "guard": [{"op": "eq", "slot": "pushback", "value": "yes"}], "priority": 3}
    doc["edges"].append(bad)
    out = diagnostics(doc)
    assert any("panel decreases" in d for d in out)
    # the same edge flagged as a loop is legal
    doc["edges"][-1] = dict(bad, loop=True)
    g = load_sop(doc)
    assert any(e.loop and not e.synthetic for e in g.edges)


def test_ambiguous_equal_priority_guards():
    doc = branching_doc()
    doc["edges"].append({"from": "ask plan type", "to": "wrap up",
                         "guard": [{"op": "eq", "slot": "plan_type", "value": "commercial"}],
                         "priority": 0})
    out = diagnostics(doc)
    assert any("ambiguous" in d and "ask plan type" in d for d in out)


def test_all_diagnostics_collected_at_once():
    doc = linear_doc()
    doc["actions"][0]["panel"] = 9                      # bad panel
    doc["actions"].append({"name": "greet", "panel": 0, "template": "x"})  # duplicate
    doc["edges"][0]["priority"] = -1                    # bad priority
    out = diagnostics(doc)
    assert len(out) >= 3


def test_unknown_top_level_key_and_missing_key():
    doc = linear_doc()
    doc["extras"] = []
    out = diagnostics(doc)
    assert any("unknown top-level keys" in d for d in out)
    doc2 = linear_doc()
    del doc2["start"]
    out2 = diagnostics(doc2)
    assert any("missing top-level key 'start'" in d for d in out2)


def test_unknown_start_and_filler_start():
    doc = linear_doc()
    doc["start"] = "nowhere"
    assert any("start" in d for d in diagnostics(doc))
    doc2 = branching_doc()
    doc2["start"] = "hold please"
    assert any("filler" in d for d in diagnostics(doc2))


def test_capture_regex_must_have_group():
    doc = linear_doc()
    doc["slots"]["note"] = {"capture": "no groups here"}
    out = diagnostics(doc)
    assert any("slots.note.capture" in d and "group" in d for d in out)


def test_invalid_capture_regex():
    doc = linear_doc()
    doc["slots"]["note"] = {"capture": "(unclosed"}
    out = diagnostics(doc)
    assert any("slots.note.capture" in d and "invalid regex" in d for d in out)


def test_terminal_filler_combination_rejected():
    doc = branching_doc()
    doc["actions"].append({"name": "odd", "panel": 4, "template": "?",
                           "terminal": True, "filler": True})
    out = diagnostics(doc)
    assert any("both terminal and filler" in d for d in out)


def test_authored_edge_touching_filler_rejected():
    doc = branching_doc()
    doc["edges"].append({"from": "hold please", "to": "wrap up", "guard": [], "priority": 5})
    out = diagnostics(doc)
    assert any("filler" in d and "synthesized" in d for d in out)
    doc2 = branching_doc()
    doc2["edges"].append({"from": "wrap up", "to": "hold please", "guard": [], "priority": 5})
    out2 = diagnostics(doc2)
    assert any("filler" in d and "synthesized" in d for d in out2)


@pytest.mark.parametrize("mutate", [
    lambda d: d["actions"][0].update(panel="zero"),
    lambda d: d["actions"][0].update(required_slots="plan_type"),
    lambda d: d["edges"][0].update(guard=[{"op": "equals", "slot": "plan_type"}]),
    lambda d: d["edges"][0].update(guard=[{"op": "eq", "slot": "plan_type"}]),
    lambda d: d["edges"][0].update(guard=[{"op": "eq_slot", "slot": "rx_group",
                                           "other": "missing"}]),
    lambda d: d["edges"][0].update(surprise=True),
    lambda d: d["actions"][0].update(color="blue"),
    lambda d: d["slots"].update(bad=[1, 2]),
    lambda d: d["slots"].update(bad=[]),
    lambda d: d["slots"].update(bad=["dup", "dup"]),
    lambda d: d.update(start=7),
])
def test_malformed_documents_always_rejected(mutate):
    doc = branching_doc()
    mutate(doc)
    with pytest.raises(SOPValidationError):
        load_sop(doc)


# -- filler synthesis ---------------------------------------------------------


def test_filler_edges_synthesized():
    g = load_sop(branching_doc())
    filler = g.action("hold please")
    terminal = g.action("call complete")
    non_fillers = [n for n in g.nodes if not n.filler and not n.terminal]
    into = [e for e in g.edges if e.to_id == filler.action_id and e.synthetic
            and e.from_id != filler.action_id]
    assert sorted(e.from_id for e in into) == sorted(n.action_id for n in non_fillers)
    outof = [e for e in g.edges if e.from_id == filler.action_id]
    assert all(e.synthetic for e in outof)
    assert sorted(e.to_id for e in outof) == list(range(g.n_actions))
    assert all(e.priority >= AUTHOR_PRIORITY_LIMIT for e in into + outof)
    assert all(e.loop for e in into + outof)
    # terminal nodes never gain an out-edge, even to fillers
    assert g.out_edges(terminal.action_id) == ()


def test_filler_reachable_and_listed():
    g = load_sop(branching_doc())
    assert g.filler_ids() == [g.action("hold please").action_id]


# -- transition queries ---------------------------------------------------------


def test_next_candidates_priority_order():
    g = load_sop(branching_doc())
    # nothing filled: the re-ask self-loop fires, then filler entries
    cands = g.next_candidates("ask plan type", {})
    names = [g.nodes[i].name for i, _ in cands]
    assert names[0] == "ask plan type"
    assert "hold please" in names
    authored = [e for _, e in cands if not e.synthetic]
    assert [e.priority for e in authored] == sorted(e.priority for e in authored)


def test_next_candidates_guard_selection():
    g = load_sop(branching_doc())
    first = lambda slots: g.nodes[g.next_candidates("ask rx group", slots)[0][0]].name
    assert first({"rx_group": "g1", "policy_number": "g1"}) == "confirm rx equals policy"
    assert first({"rx_group": "g1", "policy_number": "p9"}) == "wrap up"
    assert first({}) == "ask rx group"


def test_next_candidates_eq_branching():
    g = load_sop(branching_doc())
    cands = g.next_candidates("wrap up", {"plan_type": "commercial"})
    assert g.nodes[cands[0][0]].name == "call complete"
    assert cands[0][1].describe_guard() == "plan_type == 'commercial'"


def test_next_candidates_terminal_empty():
    g = load_sop(branching_doc())
    assert g.next_candidates("call complete", {"plan_type": "commercial"}) == []


def test_next_candidates_unknown_slot_raises():
    g = load_sop(branching_doc())
    with pytest.raises(SlotSchemaError, match="unknown slot"):
        g.next_candidates("ask plan type", {"plan_typo": "commercial"})


def test_unknown_action_lookup():
    g = load_sop(branching_doc())
    with pytest.raises(UnknownActionError):
        g.action("no such step")
    with pytest.raises(UnknownActionError):
        g.action(99)


def test_guard_describe_and_fires():
    g = load_sop(branching_doc())
    edge = next(e for e in g.edges
                if e.guard and e.guard[0].op == "eq_slot")
    assert edge.describe_guard() == "rx_group == policy_number"
    assert edge.fires({"rx_group": "a", "policy_number": "a"})
    assert not edge.fires({"rx_group": "a", "policy_number": "b"})
    assert not edge.fires({"rx_group": "a"})


def test_action_sets_preserved():
    g = load_sop(branching_doc())
    assert dict(g.action("reask policy number").sets) == {"pushback": "yes"}


# -- property: random single-field corruption is always caught -----------------


CORRUPTIONS = [
    ("dup name", lambda d: d["actions"].append(dict(d["actions"][0]))),
    ("bad edge from", lambda d: d["edges"][0].update({"from": "missing"})),
    ("bad edge to", lambda d: d["edges"][0].update({"to": "missing"})),
    ("panel range", lambda d: d["actions"][2].update(panel=-1)),
    ("priority range", lambda d: d["edges"][0].update(priority=10**6)),
    ("guard op", lambda d: d["edges"][0].update(guard=[{"op": "neq", "slot": "plan_type"}])),
    ("orphan", lambda d: d["actions"].append(
        {"name": "orphan", "panel": 3, "template": "", "terminal": True})),
    ("start", lambda d: d.update(start="nope")),
]


@pytest.mark.parametrize("label,corrupt", CORRUPTIONS, ids=[c[0] for c in CORRUPTIONS])
def test_every_corruption_rejected_and_original_loads(label, corrupt):
    doc = branching_doc()
    load_sop(copy.deepcopy(doc))  # sanity: pristine document is valid
    corrupt(doc)
    with pytest.raises(SOPValidationError) as info:
        load_sop(doc)
    assert all(":" in d for d in info.value.diagnostics)  # every item carries a path

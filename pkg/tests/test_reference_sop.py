"""The bundled reference procedure: structure, panels, and pinned branches."""

from collections import Counter

import pytest

from nap.reference import REFERENCE_PANEL_COUNTS, load_reference_sop


@pytest.fixture(scope="module")
def graph():
    return load_reference_sop()


def test_loads_with_expected_shape(graph):
    assert graph.n_actions == 84
    hist = Counter(n.panel for n in graph.nodes)
    assert dict(sorted(hist.items())) == REFERENCE_PANEL_COUNTS


def test_start_and_terminal_panels(graph):
    assert graph.panel_of(graph.start_id) == 0
    assert graph.action(graph.start_id).name == "greet"
    terminals = [n for n in graph.nodes if n.terminal]
    assert [n.name for n in terminals] == ["call complete"]
    assert terminals[0].panel == 4


def test_rx_number_lives_in_panel_one(graph):
    assert graph.panel_of("ask rx number") == 1


def test_government_plan_branches_to_program_question(graph):
    cands = graph.next_candidates("ask plan type", {"plan_type": "government"})
    first = graph.nodes[cands[0][0]]
    assert first.name == "ask government program"
    assert "medicare, medicaid, or tricare" in first.template


def test_rx_group_equality_branch(graph):
    slots = {"plan_type": "commercial", "rx_group": "four one",
             "policy_number": "four one"}
    cands = graph.next_candidates("ask rx group", slots)
    assert graph.nodes[cands[0][0]].name == "confirm rx equals policy"
    slots["rx_group"] = "nine nine"
    cands = graph.next_candidates("ask rx group", slots)
    assert graph.nodes[cands[0][0]].name == "ask rx number"


def test_pushback_selects_careful_recap(graph):
    base = {"claim_confirmed": "yes"}
    quick = graph.next_candidates("confirm claim details", base)
    assert graph.nodes[quick[0][0]].name == "verify recap quickly"
    careful = graph.next_candidates("confirm claim details",
                                    dict(base, had_pushback="yes"))
    assert graph.nodes[careful[0][0]].name == "verify recap carefully"


def test_plan_type_selects_wrapup_note(graph):
    for plan, note in (("government", "note government plan"),
                       ("commercial", "note commercial plan")):
        cands = graph.next_candidates("verify recap quickly",
                                      {"recap_confirmed": "yes", "plan_type": plan})
        assert graph.nodes[cands[0][0]].name == note


def test_every_reask_records_pushback(graph):
    reasks = [n for n in graph.nodes if n.name.startswith("reask ")]
    assert len(reasks) >= 10
    assert all(n.sets.get("had_pushback") == "yes" for n in reasks)


def test_fillers_are_panel_zero_and_edgeless_in_document(graph):
    fillers = [graph.nodes[i] for i in graph.filler_ids()]
    assert sorted(n.name for n in fillers) == [
        "checking my notes", "hold please", "repeat last sentence"]
    assert all(n.panel == 0 for n in fillers)
    for n in fillers:
        assert all(e.synthetic for e in graph.out_edges(n.action_id))


def test_every_nonterminal_offers_a_filler_interlude(graph):
    filler_ids = set(graph.filler_ids())
    for node in graph.nodes:
        if node.terminal or node.filler:
            continue
        targets = {i for i, _ in graph.next_candidates(node.action_id, {})}
        assert filler_ids <= targets, node.name


def test_walkable_end_to_end_commercial(graph):
    """A fully-answered commercial call walks greet -> call complete."""
    slots = {
        "client_name": "maria santos", "date_of_birth": "march fourth",
        "callback_number": "five five five", "member_id": "one two three",
        "identity_confirmed": "yes", "insurance_provider": "blue harbor",
        "plan_type": "commercial", "employer_name": "harbor metals",
        "policy_number": "seven seven one", "rx_group": "nine four",
        "rx_number": "three three", "rx_bin": "six one", "rx_pcn": "two two",
        "deductible_met": "no", "plan_start_date": "january first",
        "renewal_month": "january", "plan_recap_confirmed": "yes",
        "benefit_year_max": "two thousand dollars",
        "out_of_pocket_remaining": "forty dollars", "benefits_confirmed": "yes",
        "claim_reference": "eight eight", "claim_date": "june ninth",
        "claim_confirmed": "yes", "recap_confirmed": "yes",
        "agent_name": "kelly morgan", "agent_extension": "four four",
        "reference_number": "two six", "anything_else": "none",
    }
    current = graph.start_id
    visited = [graph.action(current).name]
    for _ in range(100):
        node = graph.action(current)
        if node.terminal:
            break
        cands = graph.next_candidates(current, slots)
        authored = [(i, e) for i, e in cands if not e.synthetic]
        assert authored, f"dead end at {node.name}"
        current = authored[0][0]
        visited.append(graph.action(current).name)
    assert visited[-1] == "call complete"
    assert "ask agent extension" in visited          # commercial-only step
    assert "note commercial plan" in visited
    assert "verify recap quickly" in visited         # no pushback happened
    assert "ask rx pcn" not in visited               # government-only step
    assert "confirm case notes" not in visited       # smooth-call short coda
    # panels never decrease along the walk
    panels = [graph.panel_of(n) for n in visited]
    assert panels == sorted(panels)


def test_walkable_end_to_end_government_with_pushback(graph):
    slots = {
        "client_name": "daniel reyes", "date_of_birth": "july second",
        "callback_number": "five five five", "member_id": "one two three",
        "identity_confirmed": "yes", "insurance_provider": "granite mutual",
        "plan_type": "government", "government_program": "medicare",
        "medicare_id": "one one one", "pharmacy_name": "riverbend pharmacy",
        "pharmacy_phone": "five five five", "policy_number": "seven one",
        "rx_group": "seven one",  # equality branch fires
        "rx_number": "three three", "rx_bin": "six one", "rx_pcn": "two two",
        "mail_order_available": "yes", "specialty_coverage": "yes",
        "plan_recap_confirmed": "yes",
        "benefit_year_max": "two thousand dollars",
        "out_of_pocket_remaining": "forty dollars", "benefits_confirmed": "yes",
        "claim_reference": "eight eight", "claim_date": "june ninth",
        "claim_confirmed": "yes", "had_pushback": "yes",
        "recap_confirmed": "yes", "agent_name": "kelly morgan",
        "reference_number": "two six", "anything_else": "callback",
    }
    current = graph.start_id
    visited = [graph.action(current).name]
    for _ in range(100):
        node = graph.action(current)
        if node.terminal:
            break
        authored = [(i, e) for i, e in graph.next_candidates(current, slots)
                    if not e.synthetic]
        assert authored, f"dead end at {node.name}"
        current = authored[0][0]
        visited.append(graph.action(current).name)
    assert visited[-1] == "call complete"
    assert "confirm rx equals policy" in visited
    assert "ask medicare id" in visited
    assert "ask rx pcn" in visited                   # government-only step
    assert "verify recap carefully" in visited       # pushback branch
    assert "note government plan" in visited
    assert "schedule followup" in visited
    assert "confirm case notes" in visited           # bumpy-call long coda
    assert "ask agent extension" not in visited      # commercial-only step


def test_elicited_slots_have_capture_patterns(graph):
    """Every slot an action elicits can be captured from live text."""
    for node in graph.nodes:
        for slot in node.required_slots:
            spec = graph.slots[slot]
            assert spec.capture, f"{node.name} elicits {slot} without capture"


def test_document_hash_is_stable(graph):
    again = load_reference_sop()
    assert again.document_hash == graph.document_hash
    assert len(graph.document_hash) == 64

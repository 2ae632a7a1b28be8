import json

import pytest

from confloop.agent import (
    AgentSettings,
    CandidateConfounder,
    SubQuery,
    ensemble,
    decompose,
    explain_partition,
    prompt_hashes,
    reason_confounders,
    run_agent_iteration,
)
from confloop.agent.backends import (
    MockAgentBackend,
    MockFixtureError,
    ReplayBackend,
    SchemaViolationError,
    validate_response,
)
from confloop.causal_tree import TreeParams, extract_rules, fit_tree
from confloop.tracing import TraceRecorder
from conftest import binary_meta


TABLE_SCHEDULE = {
    "iterations": [
        {"reason": {"*": {"confounders": [
            {"name": "HTN", "rationale": "raises both treatment odds and outcomes"},
            {"name": "CHF", "rationale": "competing indication"},
            {"name": "AF", "rationale": "anticoagulation driver"},
            {"name": "CAD", "rationale": "baseline risk"},
        ]}}},
        {"reason": {"*": {"confounders": [{"name": "DM", "rationale": "metabolic risk"}]}}},
        {"reason": {"*": {"confounders": [{"name": "CVAD", "rationale": "vascular history"}]}}},
    ]
}


class FailingBackend:
    name = "failing"

    def complete(self, prompt, response_schema, context):
        raise SchemaViolationError("never valid")


class RecordingBackend(MockAgentBackend):
    def __init__(self, fixture):
        super().__init__(fixture)
        self.calls = []

    def complete(self, prompt, response_schema, context):
        self.calls.append(dict(context))
        return super().complete(prompt, response_schema, context)


@pytest.fixture
def partition(two_group_ds):
    tree = fit_tree(two_group_ds, two_group_ds.ids(), ["G", "H"],
                    TreeParams(max_depth=2, min_leaf_per_arm=10, seed=1))
    return tree.partition()


@pytest.fixture
def comorbidity_meta():
    return binary_meta("HTN", "DM", "CHF", "AF", "CAD", "CVAD", "GOUT", "G", "H")


class TestMockBackend:
    def test_scripted_pass_through(self):
        backend = MockAgentBackend({"iterations": [
            {"explain": {"0": {"narrative": "leaf zero"}, "*": {"narrative": "other"}}}
        ]})
        ctx = {"iteration": 1, "stage": "explain", "leaf_id": 0}
        assert backend.complete("p", {"type": "object"}, ctx) == {"narrative": "leaf zero"}
        ctx["leaf_id"] = 3
        assert backend.complete("p", {"type": "object"}, ctx) == {"narrative": "other"}

    def test_missing_leaf_without_catchall(self):
        backend = MockAgentBackend({"iterations": [{"explain": {"0": {"narrative": "x"}}}]})
        with pytest.raises(MockFixtureError, match="leaf"):
            backend.complete("p", {}, {"iteration": 1, "stage": "explain", "leaf_id": 9})

    def test_builtin_defaults_past_schedule(self):
        backend = MockAgentBackend(TABLE_SCHEDULE)
        response = backend.complete("p", {}, {"iteration": 4, "stage": "reason", "leaf_id": 0})
        assert response == {"confounders": []}

    def test_schema_enforced_on_fixture(self):
        backend = MockAgentBackend({"iterations": [{"explain": {"*": {"wrong": 1}}}]})
        with pytest.raises(SchemaViolationError):
            backend.complete("p", {"type": "object", "required": ["narrative"]},
                             {"iteration": 1, "stage": "explain", "leaf_id": 0})

    def test_fixture_file_round_trip(self, tmp_path):
        path = tmp_path / "fixture.json"
        path.write_text(json.dumps(TABLE_SCHEDULE), encoding="utf-8")
        backend = MockAgentBackend(path)
        resp = backend.complete("p", {}, {"iteration": 2, "stage": "reason", "leaf_id": 1})
        assert resp["confounders"][0]["name"] == "DM"


class TestExplain:
    def test_canned_narratives_verbatim(self, partition, comorbidity_meta):
        backend = MockAgentBackend({"stages": {"explain": {"*": {"narrative": "hand-written story"}}}})
        rules = explain_partition(partition, backend, comorbidity_meta)
        assert all(r.narrative == "hand-written story" for r in rules)
        assert len(rules) == len(partition.leaves)

    def test_one_call_per_leaf(self, partition, comorbidity_meta):
        backend = RecordingBackend({"stages": {"explain": {"*": {"narrative": "n"}}}})
        explain_partition(partition, backend, comorbidity_meta, settings=AgentSettings(parallelism=1))
        assert len(backend.calls) == len(partition.leaves)
        assert sorted(c["leaf_id"] for c in backend.calls) == [l.id for l in partition.leaves]

    def test_backend_failure_degrades_to_empty(self, partition, comorbidity_meta, caplog):
        with caplog.at_level("WARNING"):
            rules = explain_partition(partition, FailingBackend(), comorbidity_meta)
        assert all(r.narrative == "" for r in rules)
        assert "degraded" in caplog.text


class TestDecompose:
    def test_scripted_two(self, partition, comorbidity_meta):
        backend = MockAgentBackend({"stages": {
            "explain": {"*": {"narrative": "n"}},
            "decompose": {"*": {"subqueries": [
                {"text": "How does hypertension alter outcomes?", "source": "rag"},
                {"text": "Does the treatment interact with diabetes?", "source": "tool"},
            ]}},
        }})
        [rule, *_] = explain_partition(partition, backend, comorbidity_meta)
        subqueries = decompose(rule, backend)
        assert [s.text for s in subqueries] == [
            "How does hypertension alter outcomes?",
            "Does the treatment interact with diabetes?",
        ]
        assert [s.source_pref for s in subqueries] == ["rag", "tool"]

    def test_fallback_one_per_conjunct(self, partition, comorbidity_meta):
        rules = extract_rules(partition, comorbidity_meta)
        multi = [r for r in rules if len(r.conjunction) == 2]
        rule = multi[0] if multi else rules[0]
        subqueries = decompose(rule, FailingBackend())
        assert len(subqueries) == len(rule.conjunction)
        for sq, cond in zip(subqueries, rule.conjunction):
            assert rule.covariate_descriptions[cond.covariate] in sq.text

    def test_max_subqueries_cap(self, partition, comorbidity_meta):
        many = [{"text": f"q{i}", "source": "rag"} for i in range(9)]
        backend = MockAgentBackend({"stages": {"decompose": {"*": {"subqueries": many}}}})
        rules = extract_rules(partition, comorbidity_meta)
        subqueries = decompose(rules[0], backend, settings=AgentSettings(max_subqueries=4))
        assert len(subqueries) == 4


class TestReason:
    def test_scripted_candidates(self, partition, comorbidity_meta):
        backend = MockAgentBackend(TABLE_SCHEDULE)
        rules = extract_rules(partition, comorbidity_meta)
        candidates = reason_confounders(rules[0], [], backend, comorbidity_meta, iteration=1)
        assert [c.covariate for c in candidates] == ["HTN", "CHF", "AF", "CAD"]

    def test_hallucination_filtered(self, partition, comorbidity_meta, caplog):
        backend = MockAgentBackend({"stages": {"reason": {"*": {"confounders": [
            {"name": "XYZQ", "rationale": "made up"},
            {"name": "DM", "rationale": "real"},
        ]}}}})
        rules = extract_rules(partition, comorbidity_meta)
        recorder = TraceRecorder()
        with caplog.at_level("WARNING"):
            candidates = reason_confounders(rules[0], [], backend, comorbidity_meta, recorder=recorder)
        assert [c.covariate for c in candidates] == ["DM"]
        assert "hallucinated" in caplog.text
        events = recorder.flush_iteration(1)
        assert any(e.get("event") == "hallucination_dropped" and e.get("name") == "XYZQ" for e in events)

    def test_validated_names_dropped(self, partition, comorbidity_meta):
        backend = MockAgentBackend({"stages": {"reason": {"*": {"confounders": [
            {"name": "HTN"}, {"name": "DM"},
        ]}}}})
        rules = extract_rules(partition, comorbidity_meta)
        candidates = reason_confounders(rules[0], [], backend, comorbidity_meta, validated=["HTN"])
        assert [c.covariate for c in candidates] == ["DM"]

    def test_empty_knowledge_marked_in_prompt(self, partition, comorbidity_meta):
        backend = RecordingBackend({"stages": {"reason": {"*": {"confounders": []}}}})
        rules = extract_rules(partition, comorbidity_meta)
        recorder = TraceRecorder()
        reason_confounders(rules[0], [], backend, comorbidity_meta, recorder=recorder)
        [event] = recorder.flush_iteration(1)
        assert "(none retrieved)" in event["prompt"]

    def test_feedback_appended_on_rework(self, partition, comorbidity_meta):
        backend = RecordingBackend({"stages": {"reason": {"*": {"confounders": []}}}})
        rules = extract_rules(partition, comorbidity_meta)
        recorder = TraceRecorder()
        reason_confounders(rules[0], [], backend, comorbidity_meta, recorder=recorder,
                           feedback="GOUT is not plausible here", rejected=["GOUT"])
        [event] = recorder.flush_iteration(1)
        assert "GOUT is not plausible here" in event["prompt"]
        assert "rejected these earlier proposals: GOUT" in event["prompt"]


def cand(name, leaf, rationale="r"):
    return CandidateConfounder(name, rationale, (), leaf)


class TestEnsemble:
    def test_vote_threshold(self):
        per_rule = {
            0: [cand("DM", 0), cand("GOUT", 0)],
            1: [cand("DM", 1)],
            2: [cand("DM", 2)],
        }
        result = ensemble(per_rule, min_votes=2)
        assert result.names() == ["DM"]
        assert result.confounders[0].vote_count == 3

    def test_empty_signals_termination(self):
        result = ensemble({0: [], 1: []})
        assert not result
        assert result.names() == []

    def test_single_rule_auto_min_votes(self):
        result = ensemble({0: [cand("CKD", 0)]})
        assert result.names() == ["CKD"]

    def test_multi_rule_auto_min_votes_is_two(self):
        result = ensemble({0: [cand("CKD", 0)], 1: [cand("AF", 1)]})
        assert result.names() == []

    def test_permutation_invariant(self):
        per_rule = {
            0: [cand("DM", 0), cand("AF", 0)],
            1: [cand("AF", 1), cand("DM", 1)],
        }
        a = ensemble(per_rule)
        b = ensemble({1: list(reversed(per_rule[1])), 0: list(reversed(per_rule[0]))})
        assert a.names() == b.names()
        assert [c.vote_count for c in a.confounders] == [c.vote_count for c in b.confounders]

    def test_ordering_by_votes_then_name(self):
        per_rule = {
            0: [cand("DM", 0), cand("AF", 0)],
            1: [cand("DM", 1), cand("AF", 1)],
            2: [cand("DM", 2)],
        }
        result = ensemble(per_rule, min_votes=1)
        assert result.names() == ["DM", "AF"]


class TestRunAgentIteration:
    def test_schedule_round(self, partition, comorbidity_meta):
        backend = MockAgentBackend(TABLE_SCHEDULE)
        recorder = TraceRecorder()
        cs1 = run_agent_iteration(partition, None, [], backend, comorbidity_meta,
                                  iteration=1, recorder=recorder)
        assert sorted(cs1.names()) == ["AF", "CAD", "CHF", "HTN"]
        cs2 = run_agent_iteration(partition, None, [], backend, comorbidity_meta,
                                  iteration=2, recorder=recorder)
        assert cs2.names() == ["DM"]
        cs4 = run_agent_iteration(partition, None, [], backend, comorbidity_meta,
                                  iteration=4, recorder=recorder)
        assert not cs4

    def test_deterministic_trace(self, partition, comorbidity_meta):
        def one_run():
            backend = MockAgentBackend(TABLE_SCHEDULE)
            recorder = TraceRecorder()
            run_agent_iteration(partition, None, [], backend, comorbidity_meta,
                                iteration=1, recorder=recorder,
                                settings=AgentSettings(parallelism=2))
            recorder.flush_iteration(1)
            return json.dumps(recorder.events, sort_keys=True)

        assert one_run() == one_run()

    def test_replay_reproduces_without_backend(self, partition, comorbidity_meta):
        backend = MockAgentBackend(TABLE_SCHEDULE)
        recorder = TraceRecorder()
        cs = run_agent_iteration(partition, None, [], backend, comorbidity_meta,
                                 iteration=1, recorder=recorder)
        events = recorder.flush_iteration(1)
        replayed = ReplayBackend.from_trace_events(events)
        cs2 = run_agent_iteration(partition, None, [], replayed, comorbidity_meta, iteration=1)
        assert cs2.to_dict() == cs.to_dict()

    def test_provenance_tracks_rules(self, partition, comorbidity_meta):
        backend = MockAgentBackend(TABLE_SCHEDULE)
        cs = run_agent_iteration(partition, None, [], backend, comorbidity_meta, iteration=2)
        assert set(cs.provenance) == {l.id for l in partition.leaves}
        assert all(names == ("DM",) for names in cs.provenance.values())


def test_prompt_hashes_stable():
    hashes = prompt_hashes()
    assert set(hashes) == {"explain", "decompose", "reason"}
    assert all(len(h) == 64 for h in hashes.values())
    assert prompt_hashes() == hashes


def test_validate_response_rejects_free_text():
    with pytest.raises(SchemaViolationError):
        validate_response("just text", {"type": "object"})

"""Reranking loop: plans, enrichment, verdict tiers, failure degradation."""
from __future__ import annotations

import json
import logging

import pytest

from conftest import make_instance, make_twin, tracks_twin
from rt2v.decompose import SubQuery, parse_prompt_input
from rt2v.errors import PlanError, ToolTimeoutError
from rt2v.index import CoarseCandidate
from rt2v.reasoner import (MAX_PLAN_CALLS, EnrichmentRecord, ExecutionPlan,
                           FinalRanking, PlanCall, RankedEntry, ReasonerVerdict,
                           StaticTool, TimeoutTool, ToolRegistry,
                           apply_enrichment, build_rerank_prompt, extract_masks,
                           rerank, run_plan)

SUBS = [SubQuery("a cat", "attribute")]


def verdict_json(relevance: float, object_ids=(), trace="judged") -> str:
    return json.dumps({"action": "verdict", "verdict": {
        "relevance": relevance, "trace": trace, "object_ids": list(object_ids)}})


def refine_json(tool="appearance_describer", instance_ids=(0,), frames=None) -> str:
    call = {"tool": tool, "instance_ids": list(instance_ids)}
    if frames is not None:
        call["frame_indices"] = list(frames)
    return json.dumps({"action": "refine", "plan": {"calls": [call]}})


class FnClient:
    """Routes responses off the parsed INPUT block; records prompts."""

    def __init__(self, fn):
        self._fn = fn
        self.prompts: list[dict] = []

    def complete(self, prompt: str, schema_id: str) -> str:
        block = parse_prompt_input(prompt)
        block["_reask"] = "PREVIOUS_RESPONSE_ERROR" in prompt
        self.prompts.append(block)
        return self._fn(block)


def three_twins() -> dict:
    return {vid: make_twin(vid, [[make_instance(0, "cat"), make_instance(1, "dog")],
                                 [make_instance(0, "cat"), make_instance(1, "dog")]])
            for vid in ("v1", "v2", "v3")}


def coarse(*pairs) -> list[CoarseCandidate]:
    return [CoarseCandidate(vid, score, ()) for vid, score in pairs]


class TestTiers:
    def test_documented_three_candidate_case(self):
        verdicts = {"v1": 0.9, "v2": 0.2, "v3": 0.7}
        client = FnClient(lambda b: verdict_json(verdicts[b["video_id"]]))
        ranking = coarse(("v1", 0.95), ("v2", 0.90), ("v3", 0.85))
        final = rerank("q", SUBS, ranking, 3, three_twins(), client, tau=0.5)
        assert final.video_ids() == ("v1", "v3", "v2")
        tiers = [e.tier for e in final.entries]
        assert tiers == ["verified", "verified", "sub_threshold"]
        assert final.entries[0].score == 0.9
        assert final.entries[2].score == 0.90  # coarse score kept below threshold

    def test_relevance_equal_to_tau_is_verified(self):
        client = FnClient(lambda b: verdict_json(0.5))
        final = rerank("q", SUBS, coarse(("v1", 0.9)), 1,
                       {"v1": three_twins()["v1"]}, client, tau=0.5)
        assert final.entries[0].tier == "verified"

    def test_uncandidated_tail_keeps_coarse_order(self):
        client = FnClient(lambda b: verdict_json(0.9))
        ranking = coarse(("v1", 0.9), ("v2", 0.8), ("v3", 0.7))
        final = rerank("q", SUBS, ranking, 1, three_twins(), client)
        assert final.video_ids() == ("v1", "v2", "v3")
        assert [e.tier for e in final.entries] == \
            ["verified", "uncandidated", "uncandidated"]

    def test_verified_ties_break_by_coarse_then_id(self):
        client = FnClient(lambda b: verdict_json(0.8))
        ranking = coarse(("v2", 0.7), ("v1", 0.7), ("v3", 0.9))
        final = rerank("q", SUBS, ranking, 3, three_twins(), client)
        # equal relevance: coarse 0.9 first, then id order for the 0.7 tie
        assert final.video_ids() == ("v3", "v1", "v2")

    def test_totality_is_permutation_of_database(self):
        client = FnClient(lambda b: verdict_json(0.4))
        ranking = coarse(("v1", 0.9), ("v2", 0.8), ("v3", 0.7))
        final = rerank("q", SUBS, ranking, 2, three_twins(), client)
        assert sorted(final.video_ids()) == ["v1", "v2", "v3"]
        assert final.rank_of("v3") == 3

    def test_rank_of_missing_video(self):
        client = FnClient(lambda b: verdict_json(0.9))
        final = rerank("q", SUBS, coarse(("v1", 0.9)), 1,
                       {"v1": three_twins()["v1"]}, client)
        with pytest.raises(KeyError):
            final.rank_of("nope")

    def test_argument_validation(self):
        client = FnClient(lambda b: verdict_json(0.9))
        twins = {"v1": three_twins()["v1"]}
        with pytest.raises(ValueError, match="tau"):
            rerank("q", SUBS, coarse(("v1", 1.0)), 1, twins, client, tau=1.5)
        with pytest.raises(ValueError, match="k="):
            rerank("q", SUBS, coarse(("v1", 1.0)), 0, twins, client)
        with pytest.raises(ValueError, match="max_refinements"):
            rerank("q", SUBS, coarse(("v1", 1.0)), 1, twins, client,
                   max_refinements=-1)


class TestRefinementLoop:
    def test_always_refine_hits_forced_verdict_then_degrades(self):
        client = FnClient(lambda b: refine_json())
        final = rerank("q", SUBS, coarse(("v1", 0.9)), 1,
                       {"v1": three_twins()["v1"]}, client, max_refinements=2)
        # turn counter walks 0,1 with refinements allowed, then 2 forced
        turns = [(b["turn"], b["forced_verdict"]) for b in client.prompts]
        assert turns[:3] == [(0, False), (1, False), (2, True)]
        # forced turn rejects refine; two re-asks then degradation
        assert len(client.prompts) == 5
        assert client.prompts[3]["_reask"] and client.prompts[4]["_reask"]
        assert final.entries[0].tier == "sub_threshold"
        assert any("degraded" in w for w in final.warnings)

    def test_refinements_remaining_decrements(self):
        seen = []

        def fn(block):
            seen.append(block["refinements_remaining"])
            if block["turn"] < 2:
                return refine_json()
            return verdict_json(0.9)

        client = FnClient(fn)
        final = rerank("q", SUBS, coarse(("v1", 0.9)), 1,
                       {"v1": three_twins()["v1"]}, client, max_refinements=2)
        assert seen == [2, 1, 0]
        assert final.entries[0].tier == "verified"

    def test_forced_verdict_is_accepted(self):
        client = FnClient(lambda b: verdict_json(0.7) if b["forced_verdict"]
                          else refine_json())
        final = rerank("q", SUBS, coarse(("v1", 0.9)), 1,
                       {"v1": three_twins()["v1"]}, client)
        assert final.entries[0].tier == "verified"
        assert final.entries[0].verdict.relevance == 0.7

    def test_refined_twin_is_visible_in_later_prompts(self):
        client = FnClient(lambda b: verdict_json(0.9) if b["turn"]
                          else refine_json(instance_ids=[0]))
        rerank("q", SUBS, coarse(("v1", 0.9)), 1,
               {"v1": three_twins()["v1"]}, client)
        final_twin = client.prompts[-1]["twin"]
        attrs = final_twin["frames"][0]["instances"][0]["attributes"]
        assert any("appearance_describer" in a for a in attrs)

    def test_zero_max_refinements_forces_immediately(self):
        client = FnClient(lambda b: verdict_json(0.9))
        rerank("q", SUBS, coarse(("v1", 0.9)), 1,
               {"v1": three_twins()["v1"]}, client, max_refinements=0)
        assert client.prompts[0]["forced_verdict"] is True

    def test_invalid_verdict_is_reasked_with_error(self):
        responses = iter([verdict_json(1.5), verdict_json(0.9)])
        client = FnClient(lambda b: next(responses))
        final = rerank("q", SUBS, coarse(("v1", 0.9)), 1,
                       {"v1": three_twins()["v1"]}, client)
        assert len(client.prompts) == 2
        assert client.prompts[1]["_reask"]
        assert final.entries[0].verdict.relevance == 0.9

    def test_unresolvable_object_ids_are_reasked(self):
        responses = iter([verdict_json(0.9, object_ids=[42]),
                          verdict_json(0.9, object_ids=[0])])
        client = FnClient(lambda b: next(responses))
        final = rerank("q", SUBS, coarse(("v1", 0.9)), 1,
                       {"v1": three_twins()["v1"]}, client)
        assert final.entries[0].verdict.object_ids == (0,)

    def test_single_candidate_failure_degrades_only_itself(self):
        def fn(block):
            if block["video_id"] == "v2":
                return "garbage that is not json"
            return verdict_json(0.9)

        client = FnClient(fn)
        ranking = coarse(("v1", 0.9), ("v2", 0.8), ("v3", 0.7))
        final = rerank("q", SUBS, ranking, 3, three_twins(), client)
        by_id = {e.video_id: e for e in final.entries}
        assert by_id["v1"].tier == "verified"
        assert by_id["v3"].tier == "verified"
        assert by_id["v2"].tier == "sub_threshold"
        assert by_id["v2"].verdict is None
        assert len([w for w in final.warnings if "v2" in w]) == 1

    def test_bad_plan_consumes_reask_not_refinement(self):
        responses = iter([refine_json(tool="pose"), verdict_json(0.8)])
        client = FnClient(lambda b: next(responses))
        final = rerank("q", SUBS, coarse(("v1", 0.9)), 1,
                       {"v1": three_twins()["v1"]}, client)
        assert final.entries[0].tier == "verified"
        assert client.prompts[1]["turn"] == 0  # no refinement happened
        assert client.prompts[1]["_reask"]

    def test_on_enriched_called_with_refined_twin(self):
        client = FnClient(lambda b: verdict_json(0.9) if b["turn"]
                          else refine_json())
        got = {}
        twins = three_twins()
        original = twins["v1"]
        rerank("q", SUBS, coarse(("v1", 0.9)), 1, twins, client,
               on_enriched=lambda vid, twin: got.__setitem__(vid, twin))
        assert "v1" in got
        assert got["v1"] != original
        assert twins["v1"] == original  # store never written by rerank

    def test_on_enriched_not_called_without_refinement(self):
        client = FnClient(lambda b: verdict_json(0.9))
        got = {}
        rerank("q", SUBS, coarse(("v1", 0.9)), 1, three_twins(), client,
               on_enriched=lambda vid, twin: got.__setitem__(vid, twin))
        assert got == {}


class TestRunPlan:
    def setup_method(self):
        self.twin = make_twin("v0", [[make_instance(0, "cat"),
                                      make_instance(2, "dog")],
                                     [make_instance(0, "cat"),
                                      make_instance(2, "dog")]])

    def test_single_call_single_instance(self):
        registry = ToolRegistry({"captioner": StaticTool("saw {category}")})
        plan = ExecutionPlan((PlanCall("captioner", (2,)),))
        records = run_plan(plan, self.twin, registry)
        assert len(records) == 1
        assert records[0].instance_id == 2
        assert records[0].text == "saw dog"
        assert records[0].error is None

    def test_unknown_tool_named_in_rejection(self):
        registry = ToolRegistry.default()
        plan = ExecutionPlan((PlanCall("pose", (0,)),))
        with pytest.raises(PlanError, match="pose"):
            run_plan(plan, self.twin, registry)

    def test_rejection_happens_before_any_call(self):
        calls = []

        class Recording:
            def describe(self, twin, instance_id, frame_indices, params):
                calls.append(instance_id)
                return "x"

        registry = ToolRegistry({"rec": Recording()})
        plan = ExecutionPlan((PlanCall("rec", (0,)), PlanCall("missing", (0,))))
        with pytest.raises(PlanError):
            run_plan(plan, self.twin, registry)
        assert calls == []

    def test_unknown_instance_rejected(self):
        registry = ToolRegistry.default()
        plan = ExecutionPlan((PlanCall("appearance_describer", (7,)),))
        with pytest.raises(PlanError, match="7"):
            run_plan(plan, self.twin, registry)

    def test_unknown_frame_rejected(self):
        registry = ToolRegistry.default()
        plan = ExecutionPlan((PlanCall("appearance_describer", (0,), (9,)),))
        with pytest.raises(PlanError, match="9"):
            run_plan(plan, self.twin, registry)

    def test_too_many_calls_rejected(self):
        registry = ToolRegistry.default()
        plan = ExecutionPlan(tuple(
            PlanCall("appearance_describer", (0,))
            for _ in range(MAX_PLAN_CALLS + 1)))
        with pytest.raises(PlanError, match="maximum"):
            run_plan(plan, self.twin, registry)

    def test_timeout_yields_error_record_and_continues(self):
        registry = ToolRegistry({"good": StaticTool("ok {instance_id}"),
                                 "slow": TimeoutTool()})
        plan = ExecutionPlan((PlanCall("slow", (0,)), PlanCall("good", (2,))))
        records = run_plan(plan, self.twin, registry)
        assert len(records) == 2
        assert records[0].error is not None and records[0].tool_name == "slow"
        assert records[1].error is None and records[1].text == "ok 2"

    def test_one_record_per_call_instance_pair(self):
        registry = ToolRegistry({"t": StaticTool("x")})
        plan = ExecutionPlan((PlanCall("t", (0, 2)),))
        records = run_plan(plan, self.twin, registry)
        assert [r.instance_id for r in records] == [0, 2]

    def test_registry_rejects_duplicate_names(self):
        registry = ToolRegistry({"t": StaticTool()})
        with pytest.raises(ValueError, match="already"):
            registry.register("t", StaticTool())


class TestApplyEnrichment:
    def setup_method(self):
        self.twin = make_twin("v0", [[make_instance(0, "cat", ("orange",)),
                                      make_instance(2, "dog")],
                                     [make_instance(0, "cat", ("orange",)),
                                      make_instance(2, "dog")]])

    def record(self, instance_id=2, frames=None, text="holding a red ball",
               tool="captioner", error=None):
        return EnrichmentRecord(instance_id, frames, text, tool, 0.0, error)

    def test_empty_records_is_identity(self):
        assert apply_enrichment(self.twin, []) is self.twin

    def test_append_only_single_instance(self):
        out = apply_enrichment(self.twin, [self.record()])
        for f_old, f_new in zip(self.twin.frames, out.frames):
            for i_old, i_new in zip(f_old.instances, f_new.instances):
                assert i_new.attributes[:len(i_old.attributes)] == i_old.attributes
                if i_old.instance_id == 2:
                    assert i_new.attributes == \
                        i_old.attributes + ("[captioner] holding a red ball",)
                else:
                    assert i_new.attributes == i_old.attributes
        assert self.twin.frames[0].instances[1].attributes == ()  # untouched

    def test_everything_else_is_structurally_equal(self):
        out = apply_enrichment(self.twin, [self.record()])
        assert out.video_id == self.twin.video_id
        assert out.fps == self.twin.fps
        for f_old, f_new in zip(self.twin.frames, out.frames):
            assert f_old.frame_index == f_new.frame_index
            assert f_old.timestamp_s == f_new.timestamp_s
            for i_old, i_new in zip(f_old.instances, f_new.instances):
                assert i_old.instance_id == i_new.instance_id
                assert i_old.category == i_new.category
                assert i_old.mask_ref == i_new.mask_ref
                assert i_old.spatial == i_new.spatial

    def test_frame_targeting(self):
        out = apply_enrichment(self.twin, [self.record(frames=(1,))])
        assert out.frames[0].instances[1].attributes == ()
        assert out.frames[1].instances[1].attributes == \
            ("[captioner] holding a red ball",)

    def test_double_application_appends_duplicates(self):
        once = apply_enrichment(self.twin, [self.record()])
        twice = apply_enrichment(once, [self.record()])
        attrs = twice.frames[0].instances[1].attributes
        assert attrs == ("[captioner] holding a red ball",) * 2

    def test_error_records_skipped_with_warning(self, caplog):
        with caplog.at_level(logging.WARNING, logger="rt2v.reasoner"):
            out = apply_enrichment(self.twin, [self.record(error="timed out")])
        assert out is self.twin
        assert any("skipping failed enrichment" in m for m in caplog.messages)

    def test_dangling_instance_skipped_with_warning(self, caplog):
        with caplog.at_level(logging.WARNING, logger="rt2v.reasoner"):
            out = apply_enrichment(self.twin, [self.record(instance_id=99)])
        assert out is self.twin
        assert any("dangling" in m for m in caplog.messages)


class TestExtractMasks:
    def test_empty_object_ids(self):
        twin = make_twin()
        verdict = ReasonerVerdict(0.9, "t", ())
        assert extract_masks(verdict, twin) == {}

    def test_pairs_follow_frame_order_with_gaps(self):
        twin = make_twin("v0", [[make_instance(0)], [], [make_instance(0)]])
        verdict = ReasonerVerdict(0.9, "t", (0,))
        masks = extract_masks(verdict, twin)
        assert [f for f, _ in masks[0]] == [0, 2]

    def test_multi_object_union_matches_scan_oracle(self):
        twin = make_twin("v0", [[make_instance(0), make_instance(1, "dog")],
                                [make_instance(1, "dog")]])
        verdict = ReasonerVerdict(0.9, "t", (0, 1))
        masks = extract_masks(verdict, twin)
        expected: dict[int, list] = {0: [], 1: []}
        for frame in twin.frames:
            for inst in frame.instances:
                if inst.instance_id in expected:
                    expected[inst.instance_id].append(
                        (frame.frame_index, inst.mask_ref))
        assert {k: list(v) for k, v in masks.items()} == expected

    def test_unknown_object_raises(self):
        verdict = ReasonerVerdict(0.9, "t", (5,))
        with pytest.raises(KeyError):
            extract_masks(verdict, make_twin())


class TestPromptShape:
    def test_input_block_is_recoverable(self):
        twin = make_twin()
        prompt = build_rerank_prompt("q", SUBS, twin, ("a", "b"), 2, 0, False)
        block = parse_prompt_input(prompt)
        assert block["video_id"] == "v0"
        assert block["tools"] == ["a", "b"]
        assert block["refinements_remaining"] == 2
        assert block["forced_verdict"] is False
        assert block["twin"]["video_id"] == "v0"

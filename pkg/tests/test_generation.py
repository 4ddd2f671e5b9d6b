import json

import pytest

from issuepatch.errors import UsageError
from issuepatch.gateway import BackendConfig, Gateway
from issuepatch.generation import (
    PATCH_UNKNOWN,
    CooccurrenceTable,
    PatchPair,
    PatchTypePrediction,
    freq,
    generate_pairs,
    graph_vul_type,
    predict_patch_type,
    select_developer_subgraph,
)
from issuepatch.ingest import IssueReport, Segment
from issuepatch.prompts import default_templates
from issuepatch.vtp import OpNode, OpType, VtpGraph, VulType

VT = VulType("CWE-78", "InjectionError")
PATCH_TYPES = ["InputValidation", "Sanitization", "BoundsCheck"]
TEMPLATES = default_templates(["InjectionError"])
IR = IssueReport(id="ir1", title="t", body_segments=[Segment("text", "body")])


def gw(entries):
    return Gateway(BackendConfig(kind="scripted", script=entries))


def graph():
    return VtpGraph.build(
        [
            OpNode("a", OpType.SRC_LOAD, "loads the third-party library dnslib", VT),
            OpNode("b", OpType.FUNC_CALL, "calls resolve with user input", VT),
            OpNode("c", OpType.VUL_TRIGGER, "shell command executes", VT),
        ],
        [("a", "b"), ("b", "c")],
    )


def pair_item(code="bad()", patch="good()", **kw):
    d = {
        "insecure_code": code,
        "patch": patch,
        "vul_type": VT.to_dict(),
        "patch_type": "InputValidation",
    }
    d.update(kw)
    return d


class TestFreq:
    def test_direct_substitution(self):
        table = CooccurrenceTable({(VT, "InputValidation"): 2}, predicted_ir_count=3)
        assert freq(table, VT, "InputValidation") == pytest.approx(2 / 3)

    def test_absent_key_zero(self):
        table = CooccurrenceTable(predicted_ir_count=3)
        assert freq(table, VT, "Sanitization") == 0.0

    def test_zero_denominator_zero(self):
        assert freq(CooccurrenceTable(), VT, "InputValidation") == 0.0

    def test_per_type_frequencies_sum_to_at_most_one(self):
        table = CooccurrenceTable()
        for pt in ("InputValidation", "InputValidation", "BoundsCheck"):
            table.record(VT, pt)
        total = sum(freq(table, VT, p) for p in PATCH_TYPES)
        assert total <= 1.0

    def test_serialization_round_trip(self):
        table = CooccurrenceTable()
        table.record(VT, "InputValidation")
        assert CooccurrenceTable.from_dict(table.to_dict()).to_dict() == table.to_dict()


class TestPredictPatchType:
    def test_scripted_reply_recorded_with_prior_freq(self):
        table = CooccurrenceTable({(VT, "InputValidation"): 1}, predicted_ir_count=2)
        gateway = gw([{"tag": "predict", "reply": '{"patch_type": "InputValidation"}'}])
        pred = predict_patch_type(
            graph(), table, gateway, TEMPLATES["typePredict"], IR, PATCH_TYPES
        )
        assert pred.patch_type == "InputValidation"
        assert pred.confidence_freq == pytest.approx(0.5)  # freq before the update
        assert table.predicted_ir_count == 3
        assert table.counts[(VT, "InputValidation")] == 2

    def test_undecodable_after_theta_is_unknown_but_counted(self):
        table = CooccurrenceTable()
        gateway = gw([{"tag": "predict", "reply": "???"} for _ in range(5)])
        pred = predict_patch_type(
            graph(), table, gateway, TEMPLATES["typePredict"], IR, PATCH_TYPES, theta=5
        )
        assert pred.patch_type == PATCH_UNKNOWN
        assert table.predicted_ir_count == 1
        assert len(gateway.calls) == 5

    def test_out_of_taxonomy_reply_retries(self):
        table = CooccurrenceTable()
        gateway = gw(
            [
                {"tag": "predict", "reply": '{"patch_type": "MadeUpType"}'},
                {"tag": "predict", "reply": '{"patch_type": "BoundsCheck"}'},
            ]
        )
        pred = predict_patch_type(
            graph(), table, gateway, TEMPLATES["typePredict"], IR, PATCH_TYPES
        )
        assert pred.patch_type == "BoundsCheck"

    def test_two_predictions_count_two_reports(self):
        table = CooccurrenceTable()
        gateway = gw([{"tag": "predict", "reply": "InputValidation"}] * 2)
        for _ in range(2):
            predict_patch_type(
                graph(), table, gateway, TEMPLATES["typePredict"], IR, PATCH_TYPES
            )
        assert table.predicted_ir_count == 2

    def test_prompt_embeds_taxonomy_and_frequencies(self):
        table = CooccurrenceTable()
        gateway = gw([{"tag": "predict", "reply": "InputValidation"}])
        predict_patch_type(graph(), table, gateway, TEMPLATES["typePredict"], IR, PATCH_TYPES)
        prompt = gateway.calls[0].prompt
        assert "InputValidation" in prompt and "freq(" in prompt


class TestSelectSubgraph:
    def test_scripted_selection_induces_subgraph(self):
        gateway = gw([{"tag": "select", "reply": '{"node_ids": ["b", "c"]}'}])
        sub = select_developer_subgraph(graph(), gateway, TEMPLATES["generate"], IR)
        assert sub.node_ids() == ["b", "c"]
        assert sub.edges == (("b", "c"),)

    def test_selection_omitting_trigger_readds_it(self):
        gateway = gw([{"tag": "select", "reply": '{"node_ids": ["b"]}'}])
        sub = select_developer_subgraph(graph(), gateway, TEMPLATES["generate"], IR)
        assert "c" in sub.node_ids()

    def test_decode_failure_falls_back_to_dropping_third_party(self):
        gateway = gw([{"tag": "select", "reply": "cannot"} for _ in range(10)])
        sub = select_developer_subgraph(graph(), gateway, TEMPLATES["generate"], IR)
        assert sub.node_ids() == ["b", "c"]  # "a" mentions third-party library loading

    def test_unknown_ids_dropped(self):
        gateway = gw([{"tag": "select", "reply": '{"node_ids": ["zz", "c"]}'}])
        sub = select_developer_subgraph(graph(), gateway, TEMPLATES["generate"], IR)
        assert sub.node_ids() == ["c"]


class TestGeneratePairs:
    def _pred(self):
        return PatchTypePrediction("InputValidation", 0.5)

    def test_k_pairs_collected_across_calls(self):
        # k=10 with 5 pairs per call takes two replies
        reply = json.dumps([pair_item(code=f"c{i}", patch=f"p{i}") for i in range(5)])
        gateway = gw([{"tag": "generate", "reply": reply}] * 2)
        result = generate_pairs(
            graph(), self._pred(), 10, gateway, TEMPLATES["generate"], IR, pairs_per_call=5
        )
        assert len(result.pairs) == 10
        assert [p.rank for p in result.pairs] == list(range(1, 11))
        assert result.shortfall is False

    def test_k_one_first_reply(self):
        gateway = gw([{"tag": "generate", "reply": json.dumps([pair_item()])}])
        result = generate_pairs(
            graph(), self._pred(), 1, gateway, TEMPLATES["generate"], IR
        )
        assert len(result.pairs) == 1 and result.pairs[0].rank == 1

    def test_budget_exhaustion_flags_shortfall(self):
        # theta=1, k=10, pairs_per_call=5 -> budget 2 calls of 1 pair each
        reply = json.dumps([pair_item()])
        gateway = gw([{"tag": "generate", "reply": reply}] * 2)
        result = generate_pairs(
            graph(), self._pred(), 10, gateway, TEMPLATES["generate"], IR,
            theta=1, pairs_per_call=5,
        )
        assert len(result.pairs) == 2
        assert result.shortfall is True

    def test_revision_replaces_in_place_same_rank(self):
        first = json.dumps([pair_item(code="v1", patch="q1"), pair_item(code="v2", patch="q2")])
        second = json.dumps(
            [pair_item(code="v1-fixed", patch="q1-fixed", revises_rank=1), pair_item(code="v3", patch="q3")]
        )
        gateway = gw(
            [{"tag": "generate", "reply": first}, {"tag": "generate", "reply": second}]
        )
        result = generate_pairs(
            graph(), self._pred(), 3, gateway, TEMPLATES["generate"], IR, pairs_per_call=2
        )
        codes = [(p.rank, p.insecure_code) for p in result.pairs]
        assert codes == [(1, "v1-fixed"), (2, "v2"), (3, "v3")]

    def test_no_joint_two_independent_calls_per_pair(self):
        gateway = gw(
            [
                {"tag": "gen_code", "reply": "```\nbad()\n```"},
                {"tag": "gen_patch", "reply": "```\ngood()\n```"},
            ]
        )
        result = generate_pairs(
            graph(), self._pred(), 1, gateway, TEMPLATES["generate"], IR, no_joint=True
        )
        assert result.pairs[0].insecure_code == "bad()"
        assert result.pairs[0].patch == "good()"
        assert [c.tag for c in gateway.calls] == ["gen_code", "gen_patch"]

    def test_never_emits_empty_members(self):
        reply = json.dumps([pair_item(), {"insecure_code": "", "patch": "p",
                                          "vul_type": VT.to_dict(), "patch_type": "X"}])
        gateway = gw([{"tag": "generate", "reply": reply}] * 2)
        result = generate_pairs(
            graph(), self._pred(), 2, gateway, TEMPLATES["generate"], IR, theta=1
        )
        # the malformed reply is rejected whole; no partial pair leaks through
        assert all(p.insecure_code.strip() and p.patch.strip() for p in result.pairs)

    def test_k_validated(self):
        with pytest.raises(UsageError):
            generate_pairs(graph(), self._pred(), 0, gw([]), TEMPLATES["generate"], IR)


def test_graph_vul_type_prefers_trigger_node():
    g = VtpGraph.build(
        [
            OpNode("a", OpType.SRC_LOAD, "x", VulType("CWE-1", "LogicError")),
            OpNode("b", OpType.VUL_TRIGGER, "y", VT),
        ],
        [("a", "b")],
    )
    assert graph_vul_type(g) == VT


def test_patch_pair_validation_and_diff():
    with pytest.raises(ValueError):
        PatchPair(rank=0, insecure_code="a", patch="b", vul_type=VT, patch_type="X")
    with pytest.raises(ValueError):
        PatchPair(rank=1, insecure_code=" ", patch="b", vul_type=VT, patch_type="X")
    p = PatchPair(rank=1, insecure_code="a\nb", patch="a\nc", vul_type=VT, patch_type="X")
    assert "-b" in p.patch_diff() and "+c" in p.patch_diff()

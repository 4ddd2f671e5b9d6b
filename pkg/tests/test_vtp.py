import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from issuepatch.errors import UsageError
from issuepatch.vtp import (
    CycleError,
    GraphStructureError,
    OpNode,
    OpType,
    VtpGraph,
    VulType,
    canonical_serialize,
    check_completeness,
    mask_nodes,
    serialize_for_prompt,
)

VT = VulType("CWE-78", "InjectionError")


def node(nid, op=OpType.FUNC_CALL, desc="does something useful", vt=VT):
    return OpNode(nid, op, desc, vt)


def chain():
    return VtpGraph.build(
        [
            node("a", OpType.SRC_LOAD, "loads the source data"),
            node("b", OpType.FUNC_CALL, "calls the resolver"),
            node("c", OpType.VUL_TRIGGER, "the command executes"),
        ],
        [("a", "b"), ("b", "c")],
    )


class TestVulType:
    def test_pattern_enforced(self):
        VulType("CWE-78", "x")
        VulType()  # sentinels
        with pytest.raises(ValueError):
            VulType("CWE78", "x")

    def test_wire_forms(self):
        assert VulType.from_dict("CWE-79").cwe_id == "CWE-79"
        assert VulType.from_dict({"cwe_id": "CWE-79"}).error_type == "ERR-UNKNOWN"


class TestStructure:
    def test_dangling_edge_is_structural_not_completeness(self):
        g = VtpGraph(nodes=(node("a"),), edges=(("a", "zz"),))
        with pytest.raises(GraphStructureError):
            check_completeness(g)

    def test_self_loop_rejected(self):
        with pytest.raises(GraphStructureError):
            VtpGraph.build([node("a")], [("a", "a")])

    def test_duplicate_node_id_rejected(self):
        with pytest.raises(GraphStructureError):
            VtpGraph.build([node("a"), node("a")], [])

    def test_json_round_trip(self):
        g = chain()
        assert VtpGraph.from_dict(g.to_dict()) == g


class TestCompleteness:
    def test_filled_chain_is_complete(self):
        assert check_completeness(chain()).complete is True

    def test_missing_trigger_flags_end_node_deficit(self):
        g = VtpGraph.build(
            [node("a", OpType.SRC_LOAD, "loads data"), node("b", OpType.FUNC_CALL, "calls f")],
            [("a", "b")],
        )
        report = check_completeness(g)
        assert not report.complete
        assert ("", "vul_trigger") in report.missing_op_info

    def test_disconnected_nodes_flag_missing_transitions(self):
        g = VtpGraph.build(
            [node("a", OpType.SRC_LOAD, "loads data"), node("b", OpType.VUL_TRIGGER, "fires")],
            [],
        )
        report = check_completeness(g)
        assert not report.complete
        assert report.missing_transitions

    def test_sentinel_fields_flagged_per_component(self):
        g = VtpGraph.build(
            [
                OpNode("a", OpType.SRC_LOAD, "", VulType()),
                node("b", OpType.VUL_TRIGGER, "fires"),
            ],
            [("a", "b")],
        )
        info = check_completeness(g).missing_op_info
        assert ("a", "op_desc") in info
        assert ("a", "cwe_id") in info
        assert ("a", "error_type") in info

    def test_complete_implies_path_through_trigger(self):
        # u is reachable from the root but cannot reach the trigger
        g = VtpGraph.build(
            [
                node("a", OpType.SRC_LOAD, "loads data"),
                node("t", OpType.VUL_TRIGGER, "fires"),
                node("u", OpType.FUNC_CALL, "side call"),
            ],
            [("a", "t"), ("a", "u")],
        )
        report = check_completeness(g)
        assert ("u", "t") in report.missing_transitions


class TestCanonicalSerialize:
    def test_empty_graph_serializes_empty(self):
        assert canonical_serialize(VtpGraph()) == ""

    def test_single_node_one_line_no_edges(self):
        text = canonical_serialize(VtpGraph.build([node("a", desc="only node")], []))
        assert text == "FuncCall|CWE-78|InjectionError|only node"

    def test_permuting_inputs_leaves_output_unchanged(self):
        g = chain()
        permuted = VtpGraph.build(list(reversed(g.nodes)), list(reversed(g.edges)))
        assert canonical_serialize(g) == canonical_serialize(permuted)

    def test_cycle_names_offending_nodes(self):
        g = VtpGraph.build([node("a"), node("b")], [("a", "b"), ("b", "a")])
        with pytest.raises(CycleError) as exc:
            canonical_serialize(g)
        assert set(exc.value.cycle) >= {"a", "b"}

    def test_newlines_and_pipes_escaped_to_one_line(self):
        g = VtpGraph.build([node("a", desc="two|part\ndesc")], [])
        lines = canonical_serialize(g).splitlines()
        assert len(lines) == 1
        assert "\\n" in lines[0]

    def test_prompt_serialization_can_blank_types(self):
        text = serialize_for_prompt(chain(), include_vul_types=False)
        assert "CWE-78" not in text
        assert "CWE-UNKNOWN" in text


class TestMaskNodes:
    def test_exact_containment_becomes_mask(self):
        g = VtpGraph.build([node("a", desc="loads the source data")], [])
        ir_text = "the program loads the source data from the url"
        masked, hidden = mask_nodes(g, ir_text, 1.0, seed=3)
        assert hidden == [("[MASK_0]", "loads the source data")]
        assert "[MASK_0]" in masked
        assert "loads the source data" not in masked

    def test_full_fraction_masks_all_embeddable_nodes(self):
        g = chain()
        ir_text = (
            "first it loads the source data then calls the resolver and "
            "finally the command executes"
        )
        masked, hidden = mask_nodes(g, ir_text, 1.0, seed=0)
        assert len(hidden) == 3
        for token, original in hidden:
            assert token in masked
            assert original not in masked

    def test_node_without_anchor_skipped_and_reported(self):
        g = VtpGraph.build([node("a", desc="zzzz qqqq xxxx")], [])
        warnings = []
        masked, hidden = mask_nodes(g, "totally unrelated text", 1.0, 0, warnings=warnings)
        assert masked == "totally unrelated text"
        assert hidden == []
        assert warnings and warnings[0]["reason"] == "no_anchor"

    def test_deterministic_under_seed(self):
        g = chain()
        text = "loads the source data; calls the resolver; the command executes"
        assert mask_nodes(g, text, 0.5, 42) == mask_nodes(g, text, 0.5, 42)

    def test_preconditions(self):
        with pytest.raises(UsageError):
            mask_nodes(VtpGraph(), "text", 0.5, 0)
        with pytest.raises(UsageError):
            mask_nodes(chain(), "text", 0.0, 0)


_DESC_ALPHABET = "abcdefghij0123456789 "


@st.composite
def graphs(draw):
    n = draw(st.integers(min_value=1, max_value=5))
    ids = [f"n{i}" for i in range(n)]
    nodes = [
        node(
            i,
            draw(st.sampled_from(list(OpType))),
            draw(st.text(alphabet=_DESC_ALPHABET, min_size=1, max_size=10)),
        )
        for i in ids
    ]
    edges = []
    for i in range(n):
        for j in range(i + 1, n):
            if draw(st.booleans()):
                edges.append((ids[i], ids[j]))  # forward edges only: acyclic
    return VtpGraph.build(nodes, edges)


@given(graphs(), st.randoms(use_true_random=False))
@settings(max_examples=100)
def test_serialization_invariant_under_permutation(g, rng):
    nodes = list(g.nodes)
    edges = list(g.edges)
    rng.shuffle(nodes)
    rng.shuffle(edges)
    assert canonical_serialize(VtpGraph.build(nodes, edges)) == canonical_serialize(g)


@given(graphs(), st.integers(min_value=0, max_value=99))
@settings(max_examples=60)
def test_mask_spans_never_overlap(g, seed):
    # disjoint spans mean replacing every token restores the exact input
    ir_text = " ".join(n.op_desc for n in g.nodes)
    masked, hidden = mask_nodes(g, ir_text, 1.0, seed, min_anchor=1)
    rebuilt = masked
    for token, original in hidden:
        assert token in masked
        rebuilt = rebuilt.replace(token, original, 1)
    assert rebuilt == ir_text

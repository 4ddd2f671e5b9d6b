import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from issuepatch.errors import IssuePatchError, UsageError
from issuepatch.ingest import (
    CorpusSplit,
    IssueReport,
    MarkupDocument,
    MarkupError,
    Segment,
    denoise_corpus,
    dump_corpus,
    issue_text,
    load_corpus,
    merge_similar_segments,
    preprocess_ir,
    split_dataset,
    to_markup,
)
from issuepatch.knowledge import GoldenKnowledgeItem, KnowledgeStore
from issuepatch.distance import edit_similarity


def doc(body, **kw):
    kw.setdefault("id", "ir1")
    kw.setdefault("title", "a title")
    return MarkupDocument(body=body, **kw)


class TestPreprocess:
    def test_direct_tag_mapping(self):
        ir = preprocess_ir(doc("<p>crash</p><code>exec(x)</code>"))
        assert [(s.kind, s.content) for s in ir.body_segments] == [
            ("text", "crash"),
            ("code", "exec(x)"),
        ]

    def test_duplicate_code_blocks_merge_after_merge_step(self):
        ir = preprocess_ir(doc("<code>exec(x)</code><code>exec(x)</code>"))
        merged = merge_similar_segments(ir.body_segments, 0.9)
        assert [(s.kind, s.content) for s in merged] == [("code", "exec(x)")]

    def test_empty_body_is_fine(self):
        ir = preprocess_ir(doc(""))
        assert ir.body_segments == []

    def test_screenshot_anchor_keeps_extracted_text(self):
        ir = preprocess_ir(doc('before <a href="err.png">stack trace text</a> after'))
        assert [(s.kind, s.content) for s in ir.body_segments] == [
            ("text", "before"),
            ("screenshot_text", "stack trace text"),
            ("text", "after"),
        ]

    def test_img_alt_text_used(self):
        ir = preprocess_ir(doc('<img src="x.png" alt="console output">'))
        assert ir.body_segments == [Segment("screenshot_text", "console output")]

    def test_image_without_text_dropped_with_warning(self):
        warnings = []
        ir = preprocess_ir(doc('<a href="shot.jpg"></a>ok'), warnings=warnings)
        assert ir.body_segments == [Segment("text", "ok")]
        assert warnings[0]["reason"] == "screenshot_without_text"

    def test_non_image_anchor_is_stripped_keeping_text(self):
        ir = preprocess_ir(doc('<a href="https://x.test/page">link text</a>'))
        assert ir.body_segments == [Segment("text", "link text")]

    def test_other_tags_stripped_plain_text_retained(self):
        ir = preprocess_ir(doc("<div><b>bold</b> and <i>italic</i><br/></div>"))
        assert ir.body_segments == [Segment("text", "bold and italic")]

    def test_entities_unescaped(self):
        ir = preprocess_ir(doc("<p>a &lt; b</p><code>x &amp;&amp; y</code>"))
        assert ir.body_segments == [Segment("text", "a < b"), Segment("code", "x && y")]

    def test_unclosed_code_names_byte_offset(self):
        body = "text <code>exec("
        with pytest.raises(MarkupError) as exc:
            preprocess_ir(doc(body))
        assert exc.value.offset == 5

    def test_unterminated_tag_names_byte_offset(self):
        with pytest.raises(MarkupError) as exc:
            preprocess_ir(doc("ok <p attr='x"))
        assert exc.value.offset == 3

    def test_offset_is_bytes_not_chars(self):
        body = "héé <code>x"  # two 2-byte chars before the tag
        with pytest.raises(MarkupError) as exc:
            preprocess_ir(doc(body))
        assert exc.value.offset == len("héé ".encode("utf-8"))

    def test_bare_lt_in_prose_is_literal(self):
        ir = preprocess_ir(doc("if a < b then crash"))
        assert ir.body_segments == [Segment("text", "if a < b then crash")]

    def test_idempotent_on_own_output(self):
        ir = preprocess_ir(
            doc('<p>crash on open</p><code>open(f)</code><a href="s.png">trace</a>')
        )
        again = preprocess_ir(to_markup(ir))
        assert again.body_segments == ir.body_segments

    def test_labels_carried_through(self):
        ir = preprocess_ir(doc("<p>x</p>", gt_insecure_code="bad()", gt_patch="good()"))
        assert ir.has_labels

    def test_gt_patch_without_code_rejected(self):
        with pytest.raises(ValueError):
            IssueReport(id="x", title="t", gt_patch="p")


class TestMergeSimilar:
    def test_identical_strings_merge(self):
        segs = [Segment("code", "exec(x)"), Segment("code", "exec(x)")]
        assert merge_similar_segments(segs, 0.9) == [Segment("code", "exec(x)")]

    def test_dissimilar_below_threshold_kept(self):
        # oracle: 1 - levenshtein/max_len = 1 - 4/4 = 0.0 < 0.9
        segs = [Segment("code", "abcd"), Segment("code", "wxyz")]
        assert merge_similar_segments(segs, 0.9) == segs

    def test_similarity_at_threshold_merges(self):
        # oracle: 1 - 1/5 = 0.8 >= 0.8
        segs = [Segment("code", "abcde"), Segment("code", "abcdf")]
        assert merge_similar_segments(segs, 0.8) == [Segment("code", "abcde")]

    def test_longer_representative_wins_earlier_position(self):
        segs = [
            Segment("code", "exec(x)"),
            Segment("text", "between"),
            Segment("code", "exec(x);"),
        ]
        merged = merge_similar_segments(segs, 0.8)
        assert merged == [Segment("code", "exec(x);"), Segment("text", "between")]

    def test_kind_boundary_respected(self):
        segs = [Segment("code", "same words"), Segment("text", "same words")]
        assert merge_similar_segments(segs, 0.5) == segs

    def test_threshold_validated(self):
        with pytest.raises(UsageError):
            merge_similar_segments([], 1.5)

    @given(
        st.lists(
            st.text(alphabet="abc", min_size=1, max_size=6).map(
                lambda t: Segment("text", t)
            ),
            max_size=6,
        ),
        st.floats(min_value=0.1, max_value=1.0),
    )
    @settings(max_examples=100)
    def test_output_is_a_fixpoint(self, segments, threshold):
        merged = merge_similar_segments(segments, threshold)
        for i, a in enumerate(merged):
            for b in merged[i + 1 :]:
                if a.kind == b.kind:
                    assert edit_similarity(a.content, b.content) < threshold


def ir(i, body="a vulnerability", labeled=False, cve=None):
    return IssueReport(
        id=f"ir{i}",
        title="t",
        body_segments=[Segment("text", body)],
        cve_id=cve,
        gt_insecure_code="bad()" if labeled else None,
        gt_patch="good()" if labeled else None,
    )


class TestDenoise:
    def test_negation_rule_removes_with_reason(self):
        kept, removed = denoise_corpus([ir(1, "this is not a vulnerability, closing")])
        assert kept == []
        assert removed == [("ir1", "negation_rule")]

    def test_deprecated_cve_removed(self):
        store = KnowledgeStore()
        store.add(
            GoldenKnowledgeItem(
                kb_id="CVE-2020-1", source_db="s", cwe_id="CWE-79",
                title="t", description="d", insecure_code="c", deprecated=True,
            )
        )
        kept, removed = denoise_corpus([ir(1, cve="CVE-2020-1")], store)
        assert removed == [("ir1", "deprecated_cve")]

    def test_clean_report_kept(self):
        kept, removed = denoise_corpus([ir(1)])
        assert [r.id for r in kept] == ["ir1"] and removed == []

    def test_empty_rules_identity(self):
        kept, removed = denoise_corpus(
            [ir(1, "not a vulnerability")], negation_rules=[]
        )
        assert len(kept) == 1 and not removed

    def test_partition_is_total(self):
        corpus = [ir(1, "not a vulnerability"), ir(2), ir(3, "false positive here")]
        kept, removed = denoise_corpus(corpus)
        assert {r.id for r in kept} | {i for i, _ in removed} == {"ir1", "ir2", "ir3"}
        assert len(kept) + len(removed) == 3


class TestSplit:
    def test_floor_arithmetic_and_determinism(self):
        corpus = [ir(i, labeled=True) for i in range(10)]
        s1 = split_dataset(corpus, 0.8, seed=7)
        s2 = split_dataset(corpus, 0.8, seed=7)
        assert len(s1.prompt_set) == 8 and len(s1.eval_set) == 2
        assert s1.to_dict() == s2.to_dict()

    def test_unlabeled_reports_always_evaluate(self):
        corpus = [ir(i, labeled=True) for i in range(10)]
        corpus += [ir(100 + i, labeled=False) for i in range(5)]
        s = split_dataset(corpus, 0.8, seed=1)
        assert len(s.prompt_set) == 8 and len(s.eval_set) == 7
        unlabeled = {f"ir{100 + i}" for i in range(5)}
        assert unlabeled <= set(s.eval_set)

    def test_pure_function_of_ids_ratio_seed(self):
        corpus = [ir(i, labeled=True) for i in range(12)]
        reordered = list(reversed(corpus))
        assert (
            split_dataset(corpus, 0.5, 3).to_dict()
            == split_dataset(reordered, 0.5, 3).to_dict()
        )

    def test_sets_disjoint_and_total(self):
        corpus = [ir(i, labeled=(i % 2 == 0)) for i in range(9)]
        s = split_dataset(corpus, 0.6, 5)
        assert not set(s.prompt_set) & set(s.eval_set)
        assert set(s.prompt_set) | set(s.eval_set) == {r.id for r in corpus}

    def test_zero_eligible_warns_not_errors(self):
        s = split_dataset([ir(1), ir(2)], 0.8, 0)
        assert s.prompt_set == [] and len(s.eval_set) == 2

    def test_ratio_validated(self):
        with pytest.raises(UsageError):
            split_dataset([ir(1)], 1.0, 0)

    def test_corpus_scale_split_metadata(self):
        # 2,490 labeled + 2,975 unlabeled = 5,465 total;
        # floor(0.8 * 2490) = 1,992 prompting, leaving 3,473 evaluating
        corpus = [ir(i, labeled=True) for i in range(2490)]
        corpus += [ir(10000 + i, labeled=False) for i in range(2975)]
        s = split_dataset(corpus, 0.8, seed=11)
        assert len(corpus) == 5465
        assert len(s.prompt_set) == 1992
        assert len(s.eval_set) == 3473


class TestCorpusIO:
    def test_round_trip(self, tmp_path):
        corpus = [ir(1, labeled=True), ir(2)]
        path = tmp_path / "corpus.jsonl"
        dump_corpus(corpus, path)
        assert load_corpus(path) == corpus

    def test_duplicate_id_rejected_with_line(self, tmp_path):
        path = tmp_path / "c.jsonl"
        line = json.dumps(ir(1).to_dict())
        path.write_text(line + "\n" + line + "\n")
        with pytest.raises(IssuePatchError, match=":2"):
            load_corpus(path)

    def test_verdict_field_round_trip(self, tmp_path):
        report = ir(1)
        report.verdicts = []
        path = tmp_path / "c.jsonl"
        dump_corpus([report], path)
        assert load_corpus(path)[0].verdicts == []


def test_issue_text_tags_segments():
    report = IssueReport(
        id="x",
        title="crash",
        body_segments=[
            Segment("text", "plain"),
            Segment("code", "exec(x)"),
            Segment("screenshot_text", "trace"),
        ],
    )
    assert issue_text(report) == "Title: crash\nplain\n[CODE] exec(x)\n[SCR] trace"

"""Generate insecure-code and patch examples from vulnerability issue reports.

The pipeline reads a report that has no tracked insecure code, builds a
completed description of the path that triggers the vulnerability, corrects
hallucinated nodes against a golden knowledge base, and jointly generates
ranked pairs of insecure code and the patch fixing it.  A scripted
chat-completion backend makes every run reproducible offline; prompt
templates are tuned by an auto-prompting optimizer.
"""

__version__ = "0.1.0"

from .autoprompt import (
    ScoreReport,
    TrainingSample,
    levenshtein,
    normalized_levenshtein,
    optimize_prompt,
    score_extract_complete,
    score_generate,
    score_generate_topk,
    score_vulcok,
)
from .config import PipelineConfig, load_config
from .correction import CorrectionRecord, bfs_order, run_correction
from .errors import IssuePatchError, UsageError
from .evaluation import (
    CandidateVerdict,
    EvalReport,
    GroundTruthDiff,
    acc_patch_type,
    acc_type,
    bucket_by_iterations,
    match_metrics,
    match_rate,
    parse_unified_diff,
    trig_fix_at_k,
)
from .gateway import BackendConfig, CompletionRequest, Gateway, run_bounded_loop
from .generation import (
    CooccurrenceTable,
    PatchPair,
    PatchTypePrediction,
    freq,
    generate_pairs,
    predict_patch_type,
    select_developer_subgraph,
)
from .ingest import (
    CorpusSplit,
    IssueReport,
    MarkupDocument,
    Segment,
    denoise_corpus,
    merge_similar_segments,
    preprocess_ir,
    split_dataset,
)
from .knowledge import GoldenKnowledgeItem, KnowledgeStore, ingest_kb
from .pipeline import RunRecord, generate_vtp, optimize_all, run_corpus, run_ir
from .prompts import (
    FocusEntry,
    PromptTemplate,
    mutate_focus,
    parse_pair_reply,
    parse_vtp_reply,
    render_prompt,
)
from .vtp import (
    CompletenessReport,
    OpNode,
    OpType,
    VtpGraph,
    VulType,
    canonical_serialize,
    check_completeness,
    mask_nodes,
)

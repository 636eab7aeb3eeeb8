"""Sentence-level vulnerability-fix comprehension.

Extract VT/AF/CP sentences from CVE artifacts with discourse patterns or a
linear classifier, trace them to fix-diff code lines with a lexical or
plugin scorer, and evaluate with project-wise cross-validation.
"""

from .corpus import (
    Artifact,
    CodeDiff,
    CodeLine,
    Corpus,
    CveRecord,
    GoldAnnotations,
    GoldMapping,
    Sentence,
    candidate_pool,
    load_corpus,
    parse_unified_diff,
    segment_sentences,
    segment_text,
    serialize_corpus,
)
from .errors import (
    CorpusError,
    DegenerateTraining,
    DiffParseError,
    DuplicateIdError,
    EmptyPool,
    GoldOutsidePool,
    ModelMismatch,
    PatternDslError,
    RecordError,
    ScorerUnavailable,
    VulnTraceError,
)
from .extract import (
    ExtractionMetrics,
    FeatureVector,
    LinearModel,
    Vocabulary,
    build_vocab,
    c_grid,
    evaluate_extraction,
    extract_features,
    heuristic_classify,
    predict,
    train_linear,
)
from .harness import (
    FoldSpec,
    RunConfig,
    make_folds,
    run_end_to_end,
    run_eval,
    run_extraction_eval,
    run_trace_gold,
)
from .patterns import (
    DiscoursePattern,
    Lexicon,
    PatternCatalog,
    PatternMatch,
    Slot,
    Token,
    builtin_catalog,
    load_pattern_catalog,
    match_all,
    match_pattern,
    tokenize,
)
from .plugins import PluginScorer, check_conformance
from .scorers import LexicalScorer, code_tokens, score
from .trace import (
    GroupOutcome,
    PairAccumulator,
    ScoredCandidate,
    TraceQuery,
    TraceRanking,
    build_pair_accumulator,
    hit_at_k,
    pair_topk_end_to_end,
    pair_topk_gold,
    rank_candidates,
    topk_single,
)

__version__ = "0.1.0"

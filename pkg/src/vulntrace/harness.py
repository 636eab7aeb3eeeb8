"""Project-wise LOOCV evaluation and report emission.

Three run modes, each writing into its own subdirectory of the output dir:

* ``extraction``  — classifier comparison over the experiment sets
  (heuristic, linear n-gram / patterns / both, optional plugin), per fold
  and macro-averaged.
* ``trace_gold``  — tracing with gold sentences as queries; single-entity
  TopK plus the gold-input pair metric.
* ``end_to_end``  — extraction feeds tracing; false positives are traced
  too and inflate the pair denominator.

Raw per-prediction and per-ranking CSVs are always dumped; every table cell
can be recomputed from them (see ``rebuild_tables``).  All outputs are
byte-stable for fixed inputs; nothing here reads a clock.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

from . import extract as ex
from .corpus import CodeLine, Corpus, CveRecord, candidate_pool, load_corpus
from .errors import (
    DegenerateTraining,
    EmptyPool,
    GoldOutsidePool,
    VulnTraceError,
)
from .patterns import PatternCatalog, load_pattern_catalog
from .plugins import PluginScorer, resolve_plugin_command
from .scorers import LexicalScorer, Scorer
from .trace import (
    GroupOutcome,
    PairAccumulator,
    TraceQuery,
    TraceRanking,
    build_pair_accumulator,
    hit_at_k,
    pair_topk_end_to_end,
    pair_topk_gold,
    rank_candidates,
    topk_single,
    topk_single_tp,
)

log = logging.getLogger(__name__)

ENTITIES = ("VT", "AF", "CP")

EXTRACTION_APPROACHES = ("heuristic", "svm_ngram", "svm_patterns", "svm_both")
_APPROACH_FEATURES = {
    "svm_ngram": (True, False),
    "svm_patterns": (False, True),
    "svm_both": (True, True),
}

CLASSIFIER_CHOICES = ("heuristic", "linear_ngram", "linear_patterns", "linear_both", "plugin")
_CHOICE_FEATURES = {
    "linear_ngram": (True, False),
    "linear_patterns": (False, True),
    "linear_both": (True, True),
}

DEFAULT_CLASSIFIERS = {"VT": "heuristic", "AF": "linear_patterns", "CP": "linear_patterns"}

MODES = ("extraction", "trace_gold", "end_to_end")


@dataclass(frozen=True)
class Fold:
    test_project: str
    train_projects: tuple[str, ...]


@dataclass(frozen=True)
class FoldSpec:
    folds: tuple[Fold, ...]


def make_folds(corpus: Corpus) -> FoldSpec:
    """One fold per project, each serving as the test set exactly once."""
    projects = corpus.projects
    if len(projects) < 2:
        raise VulnTraceError(
            f"project-wise cross-validation needs >= 2 projects, got {list(projects)}"
        )
    folds = tuple(
        Fold(test_project=p, train_projects=tuple(q for q in projects if q != p))
        for p in projects
    )
    return FoldSpec(folds=folds)


@dataclass
class RunConfig:
    corpus_path: str
    pattern_path: str | None = None
    output_dir: str = "out"
    classifiers: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_CLASSIFIERS))
    classifier_plugin: str | None = None
    scorer: str = "lexical"  # "lexical" | "plugin"
    scorer_plugin: str | None = None
    k_values: tuple[int, ...] = (1, 2, 3, 4, 5)
    seed: int = 0
    jobs: int = 1

    def __post_init__(self):
        self.k_values = tuple(self.k_values)
        if not self.k_values or list(self.k_values) != sorted(self.k_values):
            raise VulnTraceError("k_values must be non-empty and ascending")
        if self.k_values[0] < 1:
            raise VulnTraceError("k_values must start at 1 or above")
        if self.scorer not in ("lexical", "plugin"):
            raise VulnTraceError(f"unknown scorer {self.scorer!r}")
        for entity, choice in self.classifiers.items():
            if entity not in ENTITIES or choice not in CLASSIFIER_CHOICES:
                raise VulnTraceError(f"bad classifier choice {entity}={choice}")
        if self.jobs < 1:
            raise VulnTraceError("jobs must be >= 1")

    @classmethod
    def from_json(cls, doc: Mapping) -> "RunConfig":
        known = {
            "corpus_path", "pattern_path", "output_dir", "classifiers",
            "classifier_plugin", "scorer", "scorer_plugin", "k_values",
            "seed", "jobs",
        }
        unknown = set(doc) - known
        if unknown:
            raise VulnTraceError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(doc)
        if "classifiers" in kwargs:
            merged = dict(DEFAULT_CLASSIFIERS)
            merged.update(kwargs["classifiers"])
            kwargs["classifiers"] = merged
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_json(self) -> dict:
        return {
            "corpus_path": self.corpus_path,
            "pattern_path": self.pattern_path,
            "output_dir": self.output_dir,
            "classifiers": dict(sorted(self.classifiers.items())),
            "classifier_plugin": self.classifier_plugin,
            "scorer": self.scorer,
            "scorer_plugin": self.scorer_plugin,
            "k_values": list(self.k_values),
            "seed": self.seed,
            "jobs": self.jobs,
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()

    def make_scorer(self) -> Scorer:
        if self.scorer == "lexical":
            return LexicalScorer()
        command = resolve_plugin_command(self.scorer_plugin)
        if not command:
            raise VulnTraceError("scorer=plugin requires a plugin command")
        return PluginScorer(command)


# ---------------------------------------------------------------------------
# Extraction evaluation (classifier comparison)


@dataclass
class PredictionRow:
    mode: str
    fold: str
    approach: str
    cve_id: str
    project: str
    sentence_key: str
    entity: str
    predicted: bool
    gold: bool
    patterns: str  # '|'-joined matched pattern codes


@dataclass
class ExtractionCell:
    approach: str
    entity: str
    fold: str
    metrics: ex.ExtractionMetrics
    annotation: str = ""
    # set on "avg" rows: fold-macro (precision, recall, f1)
    avg_override: tuple[float, float, float] | None = None


@dataclass
class ExtractionReport:
    cells: list[ExtractionCell]
    predictions: list[PredictionRow]

    def avg_rows(self) -> list[dict]:
        rows = []
        for cell in self.cells:
            rows.append(
                {
                    "approach": cell.approach,
                    "entity": cell.entity,
                    "fold": cell.fold,
                    "precision": cell.metrics.precision,
                    "recall": cell.metrics.recall,
                    "f1": cell.metrics.f1,
                    "annotation": cell.annotation,
                }
            )
        return rows


def _gold_label(record: CveRecord, key: str, entity: str) -> bool:
    if record.gold is None:
        return False
    return entity in record.gold.labels_for(key)


def _require_gold_labels(corpus: Corpus) -> None:
    missing = [r.id for r in corpus if r.gold is None]
    if missing:
        raise VulnTraceError(
            f"extraction evaluation needs gold labels; missing on: {missing[:5]}"
        )


def _train_examples(
    records: Iterable[CveRecord], entity: str
) -> list[tuple[ex.Sentence, bool]]:
    out = []
    for record in records:
        for sentence in record.sentences:
            out.append((sentence, _gold_label(record, sentence.key, entity)))
    return out


def run_extraction_eval(
    corpus: Corpus, catalog: PatternCatalog, config: RunConfig
) -> ExtractionReport:
    """LOOCV comparison of the extraction approaches (Table-2 shape)."""
    _require_gold_labels(corpus)
    folds = make_folds(corpus)
    approaches = list(EXTRACTION_APPROACHES)
    if config.classifier_plugin:
        approaches.append("plugin")

    cells: list[ExtractionCell] = []
    predictions: list[PredictionRow] = []
    per_fold_values: dict[tuple[str, str], list[ex.ExtractionMetrics | None]] = {}
    annotations: dict[tuple[str, str], list[str]] = {}

    plugin = PluginScorer(config.classifier_plugin) if config.classifier_plugin else None
    try:
        for fold in folds.folds:
            train_records = [r for r in corpus if r.project != fold.test_project]
            test_records = [r for r in corpus if r.project == fold.test_project]
            train_sentences = [s for r in train_records for s in r.sentences]
            vocab = ex.build_vocab(train_sentences)
            pattern_codes = {
                (r.id, s.key): "|".join(ex.matched_pattern_codes(catalog, s))
                for r in test_records
                for s in r.sentences
            }

            for approach in approaches:
                for entity in ENTITIES:
                    annotation = ""
                    preds: dict[str, bool] = {}
                    gold: dict[str, bool] = {}
                    keyed: list[tuple[CveRecord, ex.Sentence]] = [
                        (r, s) for r in test_records for s in r.sentences
                    ]
                    if approach == "heuristic":
                        decide: Callable[[ex.Sentence], bool] = (
                            lambda s, e=entity: ex.heuristic_classify(catalog, s, e)
                        )
                    elif approach == "plugin":
                        assert plugin is not None
                        texts = [s.text for _, s in keyed]
                        scores = plugin.score_pool(entity, texts) if texts else []
                        verdict = {
                            (s.cve_id, s.key): scores[i] > 0
                            for i, (_, s) in enumerate(keyed)
                        }
                        decide = lambda s, v=verdict: v.get((s.cve_id, s.key), False)
                    else:
                        ngrams, patterns = _APPROACH_FEATURES[approach]
                        try:
                            model = ex.train_linear(
                                _train_examples(train_records, entity),
                                entity,
                                catalog=catalog,
                                vocab=vocab,
                                ngrams=ngrams,
                                patterns=patterns,
                            )
                        except DegenerateTraining as exc:
                            log.warning("%s fold=%s: %s", approach, fold.test_project, exc)
                            annotation = "degenerate-training"
                            model = None
                        decide = (
                            (lambda s, m=model: ex.predict(m, s, catalog, vocab))
                            if model is not None
                            else (lambda s: False)
                        )

                    for record, sentence in keyed:
                        predicted = decide(sentence)
                        actual = _gold_label(record, sentence.key, entity)
                        uid = f"{record.id}/{sentence.key}"
                        preds[uid] = predicted
                        gold[uid] = actual
                        predictions.append(
                            PredictionRow(
                                mode="extraction",
                                fold=fold.test_project,
                                approach=approach,
                                cve_id=record.id,
                                project=record.project,
                                sentence_key=sentence.key,
                                entity=entity,
                                predicted=predicted,
                                gold=actual,
                                patterns=pattern_codes[(record.id, sentence.key)],
                            )
                        )
                    metrics = ex.evaluate_extraction(preds, gold, entity)
                    cells.append(
                        ExtractionCell(
                            approach=approach,
                            entity=entity,
                            fold=fold.test_project,
                            metrics=metrics,
                            annotation=annotation,
                        )
                    )
                    per_fold_values.setdefault((approach, entity), []).append(metrics)
                    annotations.setdefault((approach, entity), []).append(annotation)
    finally:
        if plugin is not None:
            plugin.close()

    # Macro-average across folds; degenerate folds contribute their 0.00 cells.
    for (approach, entity), fold_metrics in sorted(per_fold_values.items()):
        n = len(fold_metrics)
        avg = ex.ExtractionMetrics(tp=0, fp=0, fn=0, tn=0)
        precision = sum(m.precision for m in fold_metrics) / n
        recall = sum(m.recall for m in fold_metrics) / n
        f1 = sum(m.f1 for m in fold_metrics) / n
        note = ";".join(sorted({a for a in annotations[(approach, entity)] if a}))
        cells.append(
            ExtractionCell(
                approach=approach, entity=entity, fold="avg", metrics=avg,
                annotation=note, avg_override=(precision, recall, f1),
            )
        )
    return ExtractionReport(cells=cells, predictions=predictions)


# ---------------------------------------------------------------------------
# Tracing evaluation


@dataclass
class RankingRow:
    cve_id: str
    entity: str
    sentence_key: str
    rank: int
    file: str
    side: str
    line_no: int
    score: float


@dataclass
class Diagnostic:
    mode: str
    cve_id: str
    entity: str
    issue: str
    detail: str


@dataclass
class TraceReport:
    mode: str
    outcomes: list[GroupOutcome]
    accumulators: dict[str, list[PairAccumulator]]  # a_side -> per-CVE accumulators
    rankings: list[RankingRow]
    diagnostics: list[Diagnostic]
    k_values: tuple[int, ...]
    projects: tuple[str, ...]
    cve_projects: dict[str, str]

    def single_rows(self) -> list[dict]:
        if not self.projects:  # empty corpus: tables are header-only
            return []
        value_of = topk_single if self.mode == "trace_gold" else topk_single_tp
        rows = []
        for entity in ENTITIES:
            per_project: dict[int, list[float]] = {k: [] for k in self.k_values}
            for project in self.projects:
                scoped = [o for o in self.outcomes if o.project == project]
                for k in self.k_values:
                    value = value_of(scoped, entity, k)
                    rows.append(
                        {
                            "table": "single",
                            "target": entity,
                            "project": project,
                            "k": k,
                            "value": value,
                        }
                    )
                    if value is not None:
                        per_project[k].append(value)
            for k in self.k_values:
                values = per_project[k]
                rows.append(
                    {
                        "table": "single",
                        "target": entity,
                        "project": "avg",
                        "k": k,
                        "value": sum(values) / len(values) if values else None,
                    }
                )
        return rows

    def pair_rows(self) -> list[dict]:
        if not self.projects:
            return []
        value_of = pair_topk_gold if self.mode == "trace_gold" else pair_topk_end_to_end
        rows = []
        for a_side in ("VT", "AF"):
            target = f"{a_side}/CP_Code"
            accs = self.accumulators.get(a_side, [])
            per_project: dict[int, list[float]] = {k: [] for k in self.k_values}
            for project in self.projects:
                scoped = [a for a in accs if self.cve_projects.get(a.cve_id) == project]
                for k in self.k_values:
                    value = value_of(scoped, k)
                    rows.append(
                        {
                            "table": "pair",
                            "target": target,
                            "project": project,
                            "k": k,
                            "value": value,
                        }
                    )
                    if value is not None:
                        per_project[k].append(value)
            for k in self.k_values:
                values = per_project[k]
                rows.append(
                    {
                        "table": "pair",
                        "target": target,
                        "project": "avg",
                        "k": k,
                        "value": sum(values) / len(values) if values else None,
                    }
                )
        return rows


def _gold_groups(record: CveRecord, entity: str):
    if record.gold is None:
        return []
    return [m for m in record.gold.mappings if m.entity == entity]


def _build_query(record: CveRecord, entity: str, sentence_keys: Iterable[str]) -> TraceQuery:
    keys = tuple(sorted(sentence_keys))
    texts = tuple(record.sentences_by_key[k].text for k in keys)
    return TraceQuery(cve_id=record.id, entity=entity, sentence_group=keys, query_texts=texts)


def _ranking_rows(rankings: Sequence[TraceRanking], cap: int) -> list[RankingRow]:
    rows = []
    for ranking in rankings:
        for rank, cand in enumerate(ranking.ranked[:cap], start=1):
            file, side, line_no = cand.line.rsplit("|", 2)
            rows.append(
                RankingRow(
                    cve_id=ranking.query.cve_id,
                    entity=ranking.query.entity,
                    sentence_key=ranking.sentence_key,
                    rank=rank,
                    file=file,
                    side=side,
                    line_no=int(line_no),
                    score=cand.score,
                )
            )
    return rows


def _pools_for(record: CveRecord, entities: Iterable[str], mode: str,
               diagnostics: list[Diagnostic]) -> dict[str, list[CodeLine]]:
    pools: dict[str, list[CodeLine]] = {}
    for entity in entities:
        try:
            pools[entity] = candidate_pool(record.diff, entity, cve_id=record.id)
        except EmptyPool as exc:
            diagnostics.append(
                Diagnostic(mode=mode, cve_id=record.id, entity=entity,
                           issue="empty-pool", detail=str(exc))
            )
    return pools


def run_trace_gold(
    corpus: Corpus, catalog: PatternCatalog, config: RunConfig, scorer: Scorer | None = None
) -> TraceReport:
    """Trace gold sentence groups; metrics assume a perfect extractor."""
    own_scorer = scorer is None
    scorer = scorer or config.make_scorer()
    mode = "trace_gold"
    outcomes: list[GroupOutcome] = []
    ranking_rows: list[RankingRow] = []
    diagnostics: list[Diagnostic] = []
    accumulators: dict[str, list[PairAccumulator]] = {"VT": [], "AF": []}
    cap = max(config.k_values)
    cve_projects = {r.id: r.project for r in corpus}

    try:
        for record in corpus:
            if record.gold is None or not record.gold.mappings:
                continue
            entities = sorted({m.entity for m in record.gold.mappings})
            pools = _pools_for(record, entities, mode, diagnostics)

            per_entity_outcomes: dict[str, list[GroupOutcome]] = {}
            try:
                for entity in entities:
                    if entity not in pools:
                        continue
                    pool = pools[entity]
                    jobs: list[tuple[TraceQuery, frozenset[str]]] = [
                        (_build_query(record, entity, m.sentence_keys), m.gold_lines)
                        for m in _gold_groups(record, entity)
                    ]
                    ranked = _rank_all(scorer, [(q, pool) for q, _ in jobs], config.jobs)
                    for (query, gold_lines), rankings in zip(jobs, ranked):
                        hits = {
                            k: hit_at_k(query, gold_lines, rankings, k)
                            for k in config.k_values
                        }
                        outcome = GroupOutcome(
                            cve_id=record.id,
                            project=record.project,
                            entity=entity,
                            sentence_keys=frozenset(query.sentence_group),
                            hits=hits,
                        )
                        per_entity_outcomes.setdefault(entity, []).append(outcome)
                        ranking_rows.extend(_ranking_rows(rankings, cap))
            except GoldOutsidePool as exc:
                diagnostics.append(
                    Diagnostic(mode=mode, cve_id=record.id, entity=exc.entity,
                               issue="gold-outside-pool", detail=str(exc))
                )
                ranking_rows = [r for r in ranking_rows if r.cve_id != record.id]
                continue

            for entity, got in per_entity_outcomes.items():
                outcomes.extend(got)
            # CVEs with an empty pool on one side simply contribute zero groups
            # there, which zeroes both sums for that pair -- the exclusion the
            # diagnostics row documents.
            for a_side in ("VT", "AF"):
                a_groups = per_entity_outcomes.get(a_side, [])
                cp_groups = per_entity_outcomes.get("CP", [])
                if not a_groups and not cp_groups:
                    continue
                accumulators[a_side].append(
                    build_pair_accumulator(
                        record.id, a_side, a_groups, cp_groups, config.k_values
                    )
                )
    finally:
        if own_scorer:
            scorer.close()

    return TraceReport(
        mode=mode,
        outcomes=outcomes,
        accumulators=accumulators,
        rankings=ranking_rows,
        diagnostics=diagnostics,
        k_values=config.k_values,
        projects=corpus.projects,
        cve_projects=cve_projects,
    )


def _rank_all(
    scorer: Scorer,
    jobs: Sequence[tuple[TraceQuery, Sequence[CodeLine]]],
    n_workers: int,
) -> list[list[TraceRanking]]:
    """Rank every (query, pool) job, optionally on a thread pool.

    Plugin scorers share one pipe, so they always run serially.
    """
    if n_workers > 1 and isinstance(scorer, LexicalScorer) and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            return list(pool.map(lambda jp: rank_candidates(scorer, jp[0], jp[1]), jobs))
    return [rank_candidates(scorer, query, pool) for query, pool in jobs]


@dataclass
class _FoldModels:
    """Per-entity classifier decisions for one LOOCV fold."""

    decide: dict[str, Callable[[ex.Sentence], bool]]
    annotations: dict[str, str]


def _fit_fold_classifiers(
    train_records: Sequence[CveRecord],
    catalog: PatternCatalog,
    config: RunConfig,
    plugin: PluginScorer | None,
    test_sentences: Sequence[tuple[CveRecord, ex.Sentence]],
) -> _FoldModels:
    train_sentences = [s for r in train_records for s in r.sentences]
    vocab = ex.build_vocab(train_sentences) if train_sentences else None
    decide: dict[str, Callable[[ex.Sentence], bool]] = {}
    annotations: dict[str, str] = {}
    for entity in ENTITIES:
        choice = config.classifiers.get(entity, DEFAULT_CLASSIFIERS[entity])
        if choice == "heuristic":
            decide[entity] = lambda s, e=entity: ex.heuristic_classify(catalog, s, e)
        elif choice == "plugin":
            if plugin is None:
                raise VulnTraceError("classifier choice 'plugin' needs classifier_plugin")
            texts = [s.text for _, s in test_sentences]
            scores = plugin.score_pool(entity, texts) if texts else []
            verdict = {
                (s.cve_id, s.key): scores[i] > 0
                for i, (_, s) in enumerate(test_sentences)
            }
            decide[entity] = lambda s, v=verdict: v.get((s.cve_id, s.key), False)
        else:
            ngrams, patterns = _CHOICE_FEATURES[choice]
            assert vocab is not None
            try:
                model = ex.train_linear(
                    _train_examples(train_records, entity),
                    entity,
                    catalog=catalog,
                    vocab=vocab,
                    ngrams=ngrams,
                    patterns=patterns,
                )
                decide[entity] = lambda s, m=model, v=vocab: ex.predict(m, s, catalog, v)
            except DegenerateTraining as exc:
                log.warning("end_to_end %s: %s; falling back to heuristic", entity, exc)
                annotations[entity] = "degenerate-training-heuristic-fallback"
                decide[entity] = lambda s, e=entity: ex.heuristic_classify(catalog, s, e)
    return _FoldModels(decide=decide, annotations=annotations)


def run_end_to_end(
    corpus: Corpus, catalog: PatternCatalog, config: RunConfig, scorer: Scorer | None = None
) -> tuple[TraceReport, list[PredictionRow]]:
    """Extraction output feeds tracing; pair metric uses the end-to-end formula."""
    _require_gold_labels(corpus)
    folds = make_folds(corpus)
    own_scorer = scorer is None
    scorer = scorer or config.make_scorer()
    mode = "end_to_end"
    outcomes: list[GroupOutcome] = []
    ranking_rows: list[RankingRow] = []
    diagnostics: list[Diagnostic] = []
    predictions: list[PredictionRow] = []
    accumulators: dict[str, list[PairAccumulator]] = {"VT": [], "AF": []}
    cap = max(config.k_values)
    cve_projects = {r.id: r.project for r in corpus}
    plugin = PluginScorer(config.classifier_plugin) if (
        "plugin" in config.classifiers.values() and config.classifier_plugin
    ) else None

    try:
        for fold in folds.folds:
            train_records = [r for r in corpus if r.project != fold.test_project]
            test_records = [r for r in corpus if r.project == fold.test_project]
            test_sentences = [(r, s) for r in test_records for s in r.sentences]
            models = _fit_fold_classifiers(train_records, catalog, config, plugin, test_sentences)

            for record in test_records:
                pattern_codes = {
                    s.key: "|".join(ex.matched_pattern_codes(catalog, s))
                    for s in record.sentences
                }
                predicted: dict[str, set[str]] = {}
                for entity in ENTITIES:
                    predicted[entity] = set()
                    for sentence in record.sentences:
                        verdict = models.decide[entity](sentence)
                        actual = _gold_label(record, sentence.key, entity)
                        if verdict:
                            predicted[entity].add(sentence.key)
                        predictions.append(
                            PredictionRow(
                                mode=mode,
                                fold=fold.test_project,
                                approach=config.classifiers.get(entity, ""),
                                cve_id=record.id,
                                project=record.project,
                                sentence_key=sentence.key,
                                entity=entity,
                                predicted=verdict,
                                gold=actual,
                                patterns=pattern_codes[sentence.key],
                            )
                        )

                if record.gold is None:
                    continue
                entities = sorted(
                    {m.entity for m in record.gold.mappings}
                    | {e for e in ENTITIES if predicted[e]}
                )
                if not entities:
                    continue
                pools = _pools_for(record, entities, mode, diagnostics)

                per_entity_outcomes: dict[str, list[GroupOutcome]] = {}
                fp_counts: dict[str, int] = {}
                record_rows: list[RankingRow] = []
                try:
                    for entity in entities:
                        gold_keys: set[str] = set()
                        for mapping in _gold_groups(record, entity):
                            gold_keys |= mapping.sentence_keys
                        labeled = {
                            key
                            for key in record.sentences_by_key
                            if _gold_label(record, key, entity)
                        }
                        fp_keys = predicted[entity] - labeled
                        fp_counts[entity] = len(fp_keys)
                        if entity not in pools:
                            continue
                        pool = pools[entity]

                        for mapping in _gold_groups(record, entity):
                            tp_keys = sorted(mapping.sentence_keys & predicted[entity])
                            if tp_keys:
                                query = _build_query(record, entity, tp_keys)
                                rankings = rank_candidates(scorer, query, pool)
                                tp_hits = {
                                    k: hit_at_k(query, mapping.gold_lines, rankings, k)
                                    for k in config.k_values
                                }
                                record_rows.extend(_ranking_rows(rankings, cap))
                            else:
                                # verify annotation sanity even when nothing was extracted
                                pool_keys = {l.key for l in pool}
                                for line in sorted(mapping.gold_lines):
                                    if line not in pool_keys:
                                        raise GoldOutsidePool(record.id, entity, line)
                                tp_hits = {k: False for k in config.k_values}
                            per_entity_outcomes.setdefault(entity, []).append(
                                GroupOutcome(
                                    cve_id=record.id,
                                    project=record.project,
                                    entity=entity,
                                    sentence_keys=frozenset(mapping.sentence_keys),
                                    hits={},
                                    tp_hits=tp_hits,
                                )
                            )

                        # false positives are traced so reports can show them
                        for key in sorted(fp_keys):
                            query = _build_query(record, entity, [key])
                            rankings = rank_candidates(scorer, query, pool)
                            record_rows.extend(_ranking_rows(rankings, cap))
                except GoldOutsidePool as exc:
                    diagnostics.append(
                        Diagnostic(mode=mode, cve_id=record.id, entity=exc.entity,
                                   issue="gold-outside-pool", detail=str(exc))
                    )
                    continue

                ranking_rows.extend(record_rows)
                for entity, got in per_entity_outcomes.items():
                    outcomes.extend(got)
                for a_side in ("VT", "AF"):
                    a_groups = per_entity_outcomes.get(a_side, [])
                    cp_groups = per_entity_outcomes.get("CP", [])
                    a_fp = fp_counts.get(a_side, 0)
                    cp_fp = fp_counts.get("CP", 0)
                    if not a_groups and not cp_groups and not a_fp and not cp_fp:
                        continue
                    accumulators[a_side].append(
                        build_pair_accumulator(
                            record.id, a_side, a_groups, cp_groups,
                            config.k_values, a_fp, cp_fp,
                        )
                    )
    finally:
        if plugin is not None:
            plugin.close()
        if own_scorer:
            scorer.close()

    report = TraceReport(
        mode=mode,
        outcomes=outcomes,
        accumulators=accumulators,
        rankings=ranking_rows,
        diagnostics=diagnostics,
        k_values=config.k_values,
        projects=corpus.projects,
        cve_projects=cve_projects,
    )
    return report, predictions


# ---------------------------------------------------------------------------
# Report files


def _fmt_pct(value: float | None) -> str:
    return "" if value is None else f"{100.0 * value:.2f}"


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)


def _write_md(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    lines = ["| " + " | ".join(str(h) for h in header) + " |"]
    lines.append("|" + "|".join([" --- "] * len(header)) + "|")
    for row in rows:
        lines.append("| " + " | ".join(str(c) for c in row) + " |")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_predictions_csv(path: Path, predictions: Sequence[PredictionRow]) -> None:
    header = ["mode", "fold", "approach", "cve_id", "project", "sentence_key",
              "entity", "predicted", "gold", "patterns"]
    _write_csv(
        path,
        header,
        (
            [p.mode, p.fold, p.approach, p.cve_id, p.project, p.sentence_key,
             p.entity, int(p.predicted), int(p.gold), p.patterns]
            for p in predictions
        ),
    )


def write_rankings_csv(path: Path, rankings: Sequence[RankingRow]) -> None:
    header = ["cve_id", "entity", "sentence_key", "rank", "file", "side", "line_no", "score"]
    _write_csv(
        path,
        header,
        (
            [r.cve_id, r.entity, r.sentence_key, r.rank, r.file, r.side, r.line_no, repr(r.score)]
            for r in rankings
        ),
    )


def write_extraction_tables(out_dir: Path, report: ExtractionReport) -> list[Path]:
    header = ["approach", "entity", "fold", "precision", "recall", "f1", "annotation"]
    rows = []
    counts = []
    for cell in report.cells:
        override = getattr(cell, "avg_override", None)
        if override is not None:
            p, r, f1 = override
        else:
            p, r, f1 = cell.metrics.precision, cell.metrics.recall, cell.metrics.f1
        rows.append(
            [cell.approach, cell.entity, cell.fold, _fmt_pct(p), _fmt_pct(r), _fmt_pct(f1), cell.annotation]
        )
        counts.append(
            [cell.approach, cell.entity, cell.fold,
             cell.metrics.tp, cell.metrics.fp, cell.metrics.fn, cell.metrics.tn]
        )
    csv_path = out_dir / "extraction_table.csv"
    md_path = out_dir / "extraction_table.md"
    counts_path = out_dir / "extraction_counts.csv"
    _write_csv(csv_path, header, rows)
    _write_md(md_path, header, rows)
    _write_csv(counts_path, ["approach", "entity", "fold", "tp", "fp", "fn", "tn"], counts)
    return [csv_path, md_path, counts_path]


def write_trace_tables(out_dir: Path, report: TraceReport, scorer_name: str) -> list[Path]:
    header = ["table", "scorer", "target", "project", "k", "value"]
    rows = [
        [row["table"], scorer_name, row["target"], row["project"], row["k"], _fmt_pct(row["value"])]
        for row in report.single_rows() + report.pair_rows()
    ]
    csv_path = out_dir / "trace_tables.csv"
    md_path = out_dir / "trace_tables.md"
    _write_csv(csv_path, header, rows)
    _write_md(md_path, header, rows)

    counts_rows = []
    for entity in ENTITIES:
        for k in report.k_values:
            groups = [o for o in report.outcomes if o.entity == entity]
            hit_map = (
                (lambda o: o.hits) if report.mode == "trace_gold" else (lambda o: o.tp_hits)
            )
            counts_rows.append(
                ["single", entity, "all", k,
                 sum(1 for o in groups if hit_map(o).get(k, False)), len(groups)]
            )
    for a_side in ("VT", "AF"):
        accs = report.accumulators.get(a_side, [])
        for k in report.k_values:
            if report.mode == "trace_gold":
                num = sum(a.pair_hits_T.get(k, 0) for a in accs)
                den = sum(a.pairs_T for a in accs)
            else:
                num = sum(a.pair_hits_tp.get(k, 0) for a in accs)
                den = sum(
                    a.pairs_T + a.A_T * a.CP_F + a.A_F * a.CP_T + a.A_F * a.CP_F
                    for a in accs
                )
            counts_rows.append(["pair", f"{a_side}/CP_Code", "all", k, num, den])
    counts_path = out_dir / "trace_counts.csv"
    _write_csv(counts_path, ["table", "target", "project", "k", "numerator", "denominator"], counts_rows)
    return [csv_path, md_path, counts_path]


def write_diagnostics_csv(path: Path, diagnostics: Sequence[Diagnostic]) -> None:
    _write_csv(
        path,
        ["mode", "cve_id", "entity", "issue", "detail"],
        ([d.mode, d.cve_id, d.entity, d.issue, d.detail] for d in diagnostics),
    )


def write_manifest(
    out_dir: Path, config: RunConfig, corpus: Corpus, catalog: PatternCatalog,
    modes: Sequence[str],
) -> Path:
    body = {
        "config": config.to_json(),
        "config_hash": config.config_hash(),
        "corpus_fingerprint": corpus.fingerprint(),
        "catalog_fingerprint": catalog.fingerprint(),
        "modes": list(modes),
    }
    body["manifest_hash"] = hashlib.sha256(
        json.dumps(body, sort_keys=True).encode("utf-8")
    ).hexdigest()
    path = out_dir / "run_manifest.json"
    path.write_text(json.dumps(body, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


def run_eval(config: RunConfig, modes: Sequence[str] | None = None) -> dict[str, list[Path]]:
    """Execute the requested modes and write all report files."""
    modes = list(modes or MODES)
    for mode in modes:
        if mode not in MODES:
            raise VulnTraceError(f"unknown mode {mode!r}")
    corpus = load_corpus(config.corpus_path)
    catalog = load_pattern_catalog(config.pattern_path)
    out_root = Path(config.output_dir)
    out_root.mkdir(parents=True, exist_ok=True)
    written: dict[str, list[Path]] = {}
    scorer_name = config.scorer

    if "extraction" in modes:
        sub = out_root / "extraction"
        sub.mkdir(exist_ok=True)
        report = run_extraction_eval(corpus, catalog, config)
        paths = write_extraction_tables(sub, report)
        pred_path = sub / "predictions.csv"
        write_predictions_csv(pred_path, report.predictions)
        written["extraction"] = paths + [pred_path]

    if "trace_gold" in modes:
        sub = out_root / "trace_gold"
        sub.mkdir(exist_ok=True)
        report = run_trace_gold(corpus, catalog, config)
        paths = write_trace_tables(sub, report, scorer_name)
        rank_path = sub / "rankings.csv"
        write_rankings_csv(rank_path, report.rankings)
        diag_path = sub / "diagnostics.csv"
        write_diagnostics_csv(diag_path, report.diagnostics)
        written["trace_gold"] = paths + [rank_path, diag_path]

    if "end_to_end" in modes:
        sub = out_root / "end_to_end"
        sub.mkdir(exist_ok=True)
        report, predictions = run_end_to_end(corpus, catalog, config)
        paths = write_trace_tables(sub, report, scorer_name)
        rank_path = sub / "rankings.csv"
        write_rankings_csv(rank_path, report.rankings)
        pred_path = sub / "predictions.csv"
        write_predictions_csv(pred_path, predictions)
        diag_path = sub / "diagnostics.csv"
        write_diagnostics_csv(diag_path, report.diagnostics)
        written["end_to_end"] = paths + [rank_path, pred_path, diag_path]

    manifest = write_manifest(out_root, config, corpus, catalog, modes)
    written["manifest"] = [manifest]
    return written


# ---------------------------------------------------------------------------
# Recomputation from dumped CSVs (the audit path behind `vulntrace report`)


def _read_csv(path: Path) -> list[dict[str, str]]:
    with path.open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def rebuild_extraction_table(run_dir: Path, out_dir: Path) -> Path:
    """Recompute the extraction table purely from predictions.csv."""
    rows = _read_csv(run_dir / "predictions.csv")
    grouped: dict[tuple[str, str, str], list[dict[str, str]]] = {}
    for row in rows:
        grouped.setdefault((row["approach"], row["entity"], row["fold"]), []).append(row)

    cells: list[ExtractionCell] = []
    per_avg: dict[tuple[str, str], list[ex.ExtractionMetrics]] = {}
    for (approach, entity, fold), bucket in sorted(grouped.items()):
        preds = {f"{r['cve_id']}/{r['sentence_key']}": r["predicted"] == "1" for r in bucket}
        gold = {f"{r['cve_id']}/{r['sentence_key']}": r["gold"] == "1" for r in bucket}
        metrics = ex.evaluate_extraction(preds, gold, entity)
        cells.append(ExtractionCell(approach=approach, entity=entity, fold=fold, metrics=metrics))
        per_avg.setdefault((approach, entity), []).append(metrics)
    # Restore the fold-major emission order of the original run.
    fold_order = sorted({row["fold"] for row in rows})
    approach_order = list(dict.fromkeys(row["approach"] for row in rows))
    cells.sort(
        key=lambda c: (
            fold_order.index(c.fold),
            approach_order.index(c.approach),
            ENTITIES.index(c.entity),
        )
    )
    for (approach, entity), fold_metrics in sorted(per_avg.items()):
        n = len(fold_metrics)
        cells.append(
            ExtractionCell(
                approach=approach, entity=entity, fold="avg",
                metrics=ex.ExtractionMetrics(0, 0, 0, 0),
                avg_override=(
                    sum(m.precision for m in fold_metrics) / n,
                    sum(m.recall for m in fold_metrics) / n,
                    sum(m.f1 for m in fold_metrics) / n,
                ),
            )
        )
    out_dir.mkdir(parents=True, exist_ok=True)
    return write_extraction_tables(out_dir, ExtractionReport(cells=cells, predictions=[]))[0]


def _rankings_by_sentence(
    rows: Sequence[dict[str, str]]
) -> dict[tuple[str, str, str], list[str]]:
    """(cve, entity, sentence) -> line keys in rank order."""
    buckets: dict[tuple[str, str, str], list[tuple[int, str]]] = {}
    for row in rows:
        key = (row["cve_id"], row["entity"], row["sentence_key"])
        line_key = f"{row['file']}|{row['side']}|{row['line_no']}"
        buckets.setdefault(key, []).append((int(row["rank"]), line_key))
    return {
        key: [line for _, line in sorted(pairs)] for key, pairs in buckets.items()
    }


def rebuild_trace_tables(
    run_dir: Path, out_dir: Path, corpus: Corpus, mode: str,
    k_values: Sequence[int], scorer_name: str,
) -> Path:
    """Recompute single and pair trace tables from rankings.csv (+ gold).

    End-to-end mode additionally reads predictions.csv for the extractor's
    true/false positives, and diagnostics.csv tells which CVEs the original
    run excluded.
    """
    rank_rows = _read_csv(run_dir / "rankings.csv")
    ranked = _rankings_by_sentence(rank_rows)
    diags = _read_csv(run_dir / "diagnostics.csv") if (run_dir / "diagnostics.csv").exists() else []
    aborted = {d["cve_id"] for d in diags if d["issue"] == "gold-outside-pool"}
    empty_pools = {(d["cve_id"], d["entity"]) for d in diags if d["issue"] == "empty-pool"}

    predicted: dict[tuple[str, str], set[str]] = {}
    fp_counts: dict[tuple[str, str], int] = {}
    if mode == "end_to_end":
        for row in _read_csv(run_dir / "predictions.csv"):
            key = (row["cve_id"], row["entity"])
            if row["predicted"] == "1":
                predicted.setdefault(key, set()).add(row["sentence_key"])
                if row["gold"] == "0":
                    fp_counts[key] = fp_counts.get(key, 0) + 1

    outcomes: list[GroupOutcome] = []
    accumulators: dict[str, list[PairAccumulator]] = {"VT": [], "AF": []}
    kv = tuple(k_values)
    for record in corpus:
        if record.gold is None or record.id in aborted:
            continue
        per_entity: dict[str, list[GroupOutcome]] = {}
        touched = False
        for mapping in record.gold.mappings:
            entity = mapping.entity
            if (record.id, entity) in empty_pools:
                continue
            if mode == "trace_gold":
                group_keys = sorted(mapping.sentence_keys)
            else:
                group_keys = sorted(
                    mapping.sentence_keys & predicted.get((record.id, entity), set())
                )
            hit_lists = [
                ranked.get((record.id, entity, key), []) for key in group_keys
            ]
            if mode == "trace_gold" and not any(hit_lists):
                # No dumped rankings at all: the CVE never entered this metric.
                continue
            hits = {
                k: any(set(lst[:k]) & mapping.gold_lines for lst in hit_lists)
                for k in kv
            }
            outcome = GroupOutcome(
                cve_id=record.id,
                project=record.project,
                entity=entity,
                sentence_keys=frozenset(mapping.sentence_keys),
                hits=hits if mode == "trace_gold" else {},
                tp_hits=hits if mode == "end_to_end" else {},
            )
            per_entity.setdefault(entity, []).append(outcome)
            outcomes.append(outcome)
            touched = True
        if not touched and mode == "trace_gold":
            continue
        for a_side in ("VT", "AF"):
            a_groups = per_entity.get(a_side, [])
            cp_groups = per_entity.get("CP", [])
            a_fp = fp_counts.get((record.id, a_side), 0) if mode == "end_to_end" else 0
            cp_fp = fp_counts.get((record.id, "CP"), 0) if mode == "end_to_end" else 0
            if not a_groups and not cp_groups and not a_fp and not cp_fp:
                continue
            accumulators[a_side].append(
                build_pair_accumulator(record.id, a_side, a_groups, cp_groups, kv, a_fp, cp_fp)
            )

    report = TraceReport(
        mode=mode,
        outcomes=outcomes,
        accumulators=accumulators,
        rankings=[],
        diagnostics=[],
        k_values=kv,
        projects=corpus.projects,
        cve_projects={r.id: r.project for r in corpus},
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    return write_trace_tables(out_dir, report, scorer_name)[0]


def rebuild_tables(output_dir: str | Path, rebuilt_dir: str | Path | None = None) -> list[Path]:
    """Recompute every table in ``output_dir`` from its own dumps."""
    out_root = Path(output_dir)
    manifest = json.loads((out_root / "run_manifest.json").read_text(encoding="utf-8"))
    config = RunConfig.from_json(manifest["config"])
    corpus = load_corpus(config.corpus_path)
    target_root = Path(rebuilt_dir) if rebuilt_dir is not None else out_root / "rebuilt"
    written: list[Path] = []
    for mode in manifest["modes"]:
        run_dir = out_root / mode
        target = target_root / mode
        if mode == "extraction":
            written.append(rebuild_extraction_table(run_dir, target))
        else:
            written.append(
                rebuild_trace_tables(
                    run_dir, target, corpus, mode, config.k_values, config.scorer
                )
            )
    return written

"""Command-line surface.

Subcommands: validate, extract, trace, eval, report.  Exit codes: 0 success,
1 validation error, 2 runtime error, 3 plugin failure.  Identical invocations
write byte-identical outputs.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import extract as ex
from . import harness
from .corpus import candidate_pool, load_corpus, load_corpus_collecting
from .errors import (
    CorpusError,
    DegenerateTraining,
    EmptyPool,
    RecordError,
    ScorerUnavailable,
    VulnTraceError,
)
from .harness import (
    Diagnostic,
    PredictionRow,
    RunConfig,
    write_diagnostics_csv,
    write_predictions_csv,
    write_rankings_csv,
)
from .patterns import load_pattern_catalog
from .plugins import PluginScorer, resolve_plugin_command
from .scorers import LexicalScorer
from .trace import rank_candidates

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2
EXIT_PLUGIN = 3

ENTITIES = ("VT", "AF", "CP")


def _error_json(errors) -> str:
    payload = []
    for err in errors:
        entry = {"error": type(err).__name__, "message": str(err)}
        if isinstance(err, RecordError):
            entry["cve_id"] = err.cve_id
            entry["field_path"] = err.field_path
        payload.append(entry)
    return json.dumps(payload, sort_keys=True)


def cmd_validate(args: argparse.Namespace) -> int:
    corpus, errors = load_corpus_collecting(args.corpus)
    for project, count in corpus.project_counts().items():
        print(f"{project}: {count} CVEs")
    print(f"{len(corpus)} CVEs")
    labeled = sum(1 for r in corpus if r.gold is not None)
    mappings = sum(len(r.gold.mappings) for r in corpus if r.gold is not None)
    print(f"annotated: {labeled} CVEs, {mappings} gold mappings")
    if errors:
        print(_error_json(errors), file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


def cmd_extract(args: argparse.Namespace) -> int:
    corpus = load_corpus(args.corpus)
    catalog = load_pattern_catalog(args.patterns)
    entities = [args.entity] if args.entity else list(ENTITIES)
    rows: list[PredictionRow] = []

    models: dict[str, ex.LinearModel] = {}
    vocab = None
    if args.classifier.startswith("linear_"):
        ngrams, patterns = harness._CHOICE_FEATURES[args.classifier]
        if args.model_in:
            for entity in entities:
                models[entity] = ex.LinearModel.load(
                    Path(args.model_in) / f"{entity}.json"
                )
            vocab = ex.build_vocab([s for r in corpus for s in r.sentences])
        else:
            # No separate training corpus: fit on this corpus's gold labels.
            harness._require_gold_labels(corpus)
            vocab = ex.build_vocab([s for r in corpus for s in r.sentences])
            for entity in entities:
                models[entity] = ex.train_linear(
                    harness._train_examples(corpus.records, entity),
                    entity,
                    catalog=catalog,
                    vocab=vocab,
                    ngrams=ngrams,
                    patterns=patterns,
                )
            if args.model_out:
                out = Path(args.model_out)
                out.mkdir(parents=True, exist_ok=True)
                for entity, model in models.items():
                    model.save(out / f"{entity}.json")

    for record in corpus:
        for sentence in record.sentences:
            codes = ex.matched_pattern_codes(catalog, sentence)
            for entity in entities:
                if args.classifier == "heuristic":
                    predicted = ex.heuristic_classify(catalog, sentence, entity)
                else:
                    predicted = ex.predict(models[entity], sentence, catalog, vocab)
                gold = (
                    record.gold is not None
                    and entity in record.gold.labels_for(sentence.key)
                )
                rows.append(
                    PredictionRow(
                        mode="extract",
                        fold="-",
                        approach=args.classifier,
                        cve_id=record.id,
                        project=record.project,
                        sentence_key=sentence.key,
                        entity=entity,
                        predicted=predicted,
                        gold=gold,
                        patterns="|".join(codes),
                    )
                )

    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_predictions_csv(out_path, rows)
    print(out_path)
    return EXIT_OK


def _queries_from_predictions(corpus, path: Path):
    """Predicted-positive (cve, entity, sentence) triples as singleton queries."""
    import csv as _csv

    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = [r for r in _csv.DictReader(fh) if r["predicted"] == "1"]
    for row in rows:
        record = corpus.by_id.get(row["cve_id"])
        if record is None or row["sentence_key"] not in record.sentences_by_key:
            continue
        yield record, row["entity"], (row["sentence_key"],)


def _queries_from_gold(corpus):
    for record in corpus:
        if record.gold is None:
            continue
        for mapping in record.gold.mappings:
            yield record, mapping.entity, tuple(sorted(mapping.sentence_keys))


def cmd_trace(args: argparse.Namespace) -> int:
    corpus = load_corpus(args.corpus)
    if args.scorer == "plugin":
        command = resolve_plugin_command(args.plugin)
        if not command:
            raise ScorerUnavailable("--scorer plugin requires --plugin or $VULNTRACE_PLUGIN")
        scorer = PluginScorer(command)
    else:
        scorer = LexicalScorer()

    queries = (
        _queries_from_gold(corpus)
        if args.queries == "gold"
        else _queries_from_predictions(corpus, Path(args.queries))
    )
    ranking_rows = []
    diagnostics: list[Diagnostic] = []
    try:
        for record, entity, keys in queries:
            try:
                pool = candidate_pool(record.diff, entity, cve_id=record.id)
            except EmptyPool as exc:
                diagnostics.append(
                    Diagnostic("trace", record.id, entity, "empty-pool", str(exc))
                )
                continue
            query = harness._build_query(record, entity, keys)
            rankings = rank_candidates(scorer, query, pool)
            ranking_rows.extend(harness._ranking_rows(rankings, args.k))
    finally:
        scorer.close()

    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_rankings_csv(out_path, ranking_rows)
    if diagnostics:
        write_diagnostics_csv(out_path.with_name("diagnostics.csv"), diagnostics)
    print(out_path)
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    config = RunConfig.from_file(args.config)
    if args.out:
        config.output_dir = args.out
    if args.seed is not None:
        config.seed = args.seed
    if args.jobs is not None:
        config.jobs = args.jobs
    modes = args.mode or list(harness.MODES)
    written = harness.run_eval(config, modes)
    for mode in sorted(written):
        for path in written[mode]:
            print(path)
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    written = harness.rebuild_tables(args.run_dir, args.out)
    for path in written:
        print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vulntrace",
        description="Vulnerability-fix comprehension: extract VT/AF/CP sentences and trace them to diff lines.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="load a corpus and print per-project counts")
    p.add_argument("--corpus", required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("extract", help="classify sentences, write predictions.csv")
    p.add_argument("--corpus", required=True)
    p.add_argument("--patterns", default=None)
    p.add_argument(
        "--classifier",
        default="heuristic",
        choices=["heuristic", "linear_ngram", "linear_patterns", "linear_both"],
    )
    p.add_argument("--entity", choices=list(ENTITIES), default=None)
    p.add_argument("--model-in", dest="model_in", default=None)
    p.add_argument("--model-out", dest="model_out", default=None)
    p.add_argument("--out", default="predictions.csv")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("trace", help="rank candidate code lines, write rankings.csv")
    p.add_argument("--corpus", required=True)
    p.add_argument("--queries", default="gold", help="'gold' or a predictions.csv path")
    p.add_argument("--scorer", default="lexical", choices=["lexical", "plugin"])
    p.add_argument("--plugin", default=None, help="scorer plugin executable")
    p.add_argument("--k", type=int, default=5, help="ranks to dump per sentence")
    p.add_argument("--out", default="rankings.csv")
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("eval", help="run LOOCV evaluation from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument(
        "--mode",
        action="append",
        choices=list(harness.MODES),
        help="repeatable; default runs every mode",
    )
    p.add_argument("--out", default=None, help="override config output_dir")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--jobs", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="recompute tables from a run's dumped CSVs")
    p.add_argument("--run-dir", dest="run_dir", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ScorerUnavailable as exc:
        print(f"plugin failure: {exc}", file=sys.stderr)
        return EXIT_PLUGIN
    except (CorpusError,) as exc:
        print(_error_json([exc]), file=sys.stderr)
        return EXIT_VALIDATION
    except DegenerateTraining as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except VulnTraceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())

from __future__ import annotations

import csv
import json
from pathlib import Path

import pytest

from conftest import build_corpus, record_doc, write_corpus_dir
from vulntrace.errors import VulnTraceError
from vulntrace.harness import (
    RunConfig,
    make_folds,
    rebuild_tables,
    run_end_to_end,
    run_eval,
    run_extraction_eval,
    run_trace_gold,
)
from vulntrace.patterns import builtin_catalog

CAT = builtin_catalog()

AF_POS = "Reject bad frames in the demuxer."
AF_POS2 = "Avoid stale handles in the pool."
CP_POS = "This causes a buffer overflow in the parser."
CP_POS2 = "Fixes: null pointer dereference."
VT_POS = "X did not check bounds before the copy."
NEG = "The documentation was updated."
NEG2 = "Parsing continues with the next frame."
AF_BAIT = "Set the retry count to 3."  # heuristic AF; left unlabeled in noisy corpora


def _diff(file: str) -> str:
    return (
        f"--- a/{file}\n+++ b/{file}\n"
        "@@ -1,3 +1,4 @@\n"
        " int frame_count = 0;\n"
        "-copy_without_bounds(s);\n"
        "+reject_bad_frames(demuxer);\n"
        "+guard_buffer_overflow(parser);\n"
        " return frame_count;\n"
    )


def _doc(cve: str, project: str, sentences: list[str], labels: dict[int, list[str]],
         mappings: list[dict] | None = None) -> dict:
    file = f"{cve.lower()}.c"
    return record_doc(
        cve,
        project,
        commit_message=" ".join(sentences),
        diff=_diff(file),
        gold={
            "sentence_labels": {
                f"commit_message:{i}": kinds for i, kinds in labels.items()
            },
            "mappings": [
                {
                    "entity": m["entity"],
                    "sentences": [f"commit_message:{i}" for i in m["sentences"]],
                    "lines": [f"{file}|{line}" for line in m["lines"]],
                }
                for m in (mappings or [])
            ],
        },
    )


def eval_docs(perfect: bool = True) -> list[dict]:
    """Two projects; projB carries no VT positives anywhere.

    With ``perfect`` every heuristic-positive sentence is gold-labeled, so an
    all-heuristic extractor has zero false positives and full recall.
    """
    bait_labels = {0: ["AF"]} if perfect else {}
    docs = [
        _doc(
            "CVE-A1", "projA",
            [AF_POS, VT_POS, CP_POS, NEG],
            {0: ["AF"], 1: ["VT"], 2: ["CP"]},
            [
                {"entity": "AF", "sentences": [0], "lines": ["new|2"]},
                {"entity": "VT", "sentences": [1], "lines": ["old|2"]},
                {"entity": "CP", "sentences": [2], "lines": ["new|3"]},
            ],
        ),
        _doc(
            "CVE-A2", "projA",
            [AF_POS2, CP_POS2, NEG2],
            {0: ["AF"], 1: ["CP"]},
            [
                {"entity": "AF", "sentences": [0], "lines": ["new|2"]},
                {"entity": "CP", "sentences": [1], "lines": ["new|3"]},
            ],
        ),
        _doc(
            "CVE-B1", "projB",
            [AF_POS, CP_POS, NEG],
            {0: ["AF"], 1: ["CP"]},
            [
                {"entity": "AF", "sentences": [0], "lines": ["new|2"]},
                {"entity": "CP", "sentences": [1], "lines": ["new|3"]},
            ],
        ),
        _doc(
            "CVE-B2", "projB",
            [AF_BAIT, AF_POS2, CP_POS2, NEG2],
            {**({0: ["AF"]} if perfect else {}), 1: ["AF"], 2: ["CP"]},
            [
                {"entity": "AF", "sentences": [1], "lines": ["new|2"]},
                {"entity": "CP", "sentences": [2], "lines": ["new|3"]},
            ],
        ),
    ]
    return docs


def heuristic_config(tmp_path: Path, docs, **overrides) -> RunConfig:
    corpus_dir = write_corpus_dir(tmp_path, docs)
    kwargs = dict(
        corpus_path=str(corpus_dir),
        output_dir=str(tmp_path / "out"),
        classifiers={"VT": "heuristic", "AF": "heuristic", "CP": "heuristic"},
    )
    kwargs.update(overrides)
    return RunConfig(**kwargs)


class TestFolds:
    def test_one_fold_per_project(self):
        corpus = build_corpus(eval_docs())
        spec = make_folds(corpus)
        assert [f.test_project for f in spec.folds] == ["projA", "projB"]

    def test_six_projects_six_folds(self):
        docs = []
        for i in range(6):
            docs.append(
                _doc(f"CVE-P{i}", f"proj{i}", [AF_POS, CP_POS],
                     {0: ["AF"], 1: ["CP"]}, [])
            )
        spec = make_folds(build_corpus(docs))
        assert len(spec.folds) == 6

    def test_folds_partition_the_corpus(self):
        corpus = build_corpus(eval_docs())
        spec = make_folds(corpus)
        all_projects = set(corpus.projects)
        seen = set()
        for fold in spec.folds:
            assert fold.test_project not in fold.train_projects
            assert set(fold.train_projects) | {fold.test_project} == all_projects
            seen.add(fold.test_project)
        assert seen == all_projects

    def test_single_project_rejected(self):
        corpus = build_corpus([_doc("CVE-1", "only", [AF_POS], {0: ["AF"]}, [])])
        with pytest.raises(VulnTraceError):
            make_folds(corpus)


class TestExtractionEval:
    def test_heuristic_recall_is_total_on_pattern_built_gold(self, tmp_path):
        config = heuristic_config(tmp_path, eval_docs(perfect=True))
        corpus = build_corpus(eval_docs(perfect=True))
        report = run_extraction_eval(corpus, CAT, config)
        for cell in report.cells:
            if cell.approach == "heuristic" and cell.fold != "avg":
                # every gold positive matches a pattern, so nothing is missed
                assert cell.metrics.fn == 0, (cell.entity, cell.fold)
                if cell.metrics.tp:
                    assert cell.metrics.recall == 1.0, (cell.entity, cell.fold)

    def test_degenerate_vt_fold_recorded_as_zero(self, tmp_path):
        config = heuristic_config(tmp_path, eval_docs())
        corpus = build_corpus(eval_docs())
        report = run_extraction_eval(corpus, CAT, config)
        # testing projA means training on projB, which has no VT positives
        cell = next(
            c for c in report.cells
            if c.approach == "svm_ngram" and c.entity == "VT" and c.fold == "projA"
        )
        assert cell.annotation == "degenerate-training"
        assert cell.metrics.precision == 0.0
        assert cell.metrics.recall == 0.0
        assert cell.metrics.f1 == 0.0

    def test_macro_average_matches_fold_mean(self, tmp_path):
        config = heuristic_config(tmp_path, eval_docs())
        corpus = build_corpus(eval_docs())
        report = run_extraction_eval(corpus, CAT, config)
        for approach in ("heuristic", "svm_patterns"):
            for entity in ("VT", "AF", "CP"):
                folds = [
                    c.metrics for c in report.cells
                    if c.approach == approach and c.entity == entity and c.fold != "avg"
                ]
                avg = next(
                    c for c in report.cells
                    if c.approach == approach and c.entity == entity and c.fold == "avg"
                )
                assert avg.avg_override is not None
                p, r, f1 = avg.avg_override
                assert abs(p - sum(m.precision for m in folds) / len(folds)) < 1e-12
                assert abs(r - sum(m.recall for m in folds) / len(folds)) < 1e-12
                assert abs(f1 - sum(m.f1 for m in folds) / len(folds)) < 1e-12

    def test_table_recomputable_from_predictions(self, tmp_path):
        config = heuristic_config(tmp_path, eval_docs())
        corpus = build_corpus(eval_docs())
        report = run_extraction_eval(corpus, CAT, config)
        # independent recount per (approach, entity, fold) from the dump rows
        by_cell: dict[tuple, list] = {}
        for row in report.predictions:
            by_cell.setdefault((row.approach, row.entity, row.fold), []).append(row)
        for cell in report.cells:
            if cell.fold == "avg":
                continue
            rows = by_cell[(cell.approach, cell.entity, cell.fold)]
            tp = sum(1 for r in rows if r.predicted and r.gold)
            fp = sum(1 for r in rows if r.predicted and not r.gold)
            fn = sum(1 for r in rows if not r.predicted and r.gold)
            assert (cell.metrics.tp, cell.metrics.fp, cell.metrics.fn) == (tp, fp, fn)


class TestTraceGold:
    def test_engineered_fixture_scores_everything_top1(self, tmp_path, trace_fixture_corpus):
        config = heuristic_config(tmp_path, eval_docs())
        report = run_trace_gold(trace_fixture_corpus, CAT, config)
        for row in report.single_rows():
            if row["project"] == "tcpdump" and row["value"] is not None:
                assert row["value"] == 1.0, row
        for row in report.pair_rows():
            if row["project"] == "tcpdump" and row["value"] is not None:
                assert row["value"] == 1.0, row

    def test_k_columns_non_decreasing(self, tmp_path):
        docs = eval_docs()
        config = heuristic_config(tmp_path, docs)
        report = run_trace_gold(build_corpus(docs), CAT, config)
        rows = report.single_rows() + report.pair_rows()
        by_series: dict[tuple, dict[int, float]] = {}
        for row in rows:
            if row["value"] is not None:
                by_series.setdefault((row["table"], row["target"], row["project"]), {})[
                    row["k"]
                ] = row["value"]
        for series in by_series.values():
            ks = sorted(series)
            assert all(series[a] <= series[b] + 1e-15 for a, b in zip(ks, ks[1:]))

    def test_jobs_do_not_change_results(self, tmp_path):
        docs = eval_docs()
        corpus = build_corpus(docs)
        serial = run_trace_gold(corpus, CAT, heuristic_config(tmp_path, docs, jobs=1))
        threaded = run_trace_gold(corpus, CAT, heuristic_config(tmp_path, docs, jobs=4))
        assert serial.single_rows() == threaded.single_rows()
        assert serial.rankings == threaded.rankings

    def test_gold_outside_pool_excludes_cve_and_reports_it(self, tmp_path):
        docs = eval_docs()
        bad = _doc(
            "CVE-BAD", "projA", [AF_POS, CP_POS], {0: ["AF"], 1: ["CP"]},
            [{"entity": "AF", "sentences": [0], "lines": ["new|999"]},
             {"entity": "CP", "sentences": [1], "lines": ["new|3"]}],
        )
        corpus = build_corpus(docs + [bad])
        report = run_trace_gold(corpus, CAT, heuristic_config(tmp_path, docs))
        assert any(d.cve_id == "CVE-BAD" and d.issue == "gold-outside-pool"
                   for d in report.diagnostics)
        assert not any(o.cve_id == "CVE-BAD" for o in report.outcomes)
        assert not any(r.cve_id == "CVE-BAD" for r in report.rankings)


class TestEndToEnd:
    def test_perfect_extractor_reduces_to_gold(self, tmp_path):
        docs = eval_docs(perfect=True)
        corpus = build_corpus(docs)
        config = heuristic_config(tmp_path, docs)
        gold_report = run_trace_gold(corpus, CAT, config)
        e2e_report, _ = run_end_to_end(corpus, CAT, config)
        gold_single = {
            (r["target"], r["project"], r["k"]): r["value"]
            for r in gold_report.single_rows()
        }
        e2e_single = {
            (r["target"], r["project"], r["k"]): r["value"]
            for r in e2e_report.single_rows()
        }
        assert gold_single == e2e_single
        gold_pair = {(r["target"], r["project"], r["k"]): r["value"]
                     for r in gold_report.pair_rows()}
        e2e_pair = {(r["target"], r["project"], r["k"]): r["value"]
                    for r in e2e_report.pair_rows()}
        assert gold_pair == e2e_pair

    def test_false_positives_never_raise_pair_cells(self, tmp_path):
        docs = eval_docs(perfect=False)
        corpus = build_corpus(docs)
        config = heuristic_config(tmp_path, docs)
        gold_report = run_trace_gold(corpus, CAT, config)
        e2e_report, predictions = run_end_to_end(corpus, CAT, config)
        assert any(p.predicted and not p.gold for p in predictions)  # bait fired
        gold_pair = {(r["target"], r["project"], r["k"]): r["value"]
                     for r in gold_report.pair_rows()}
        for row in e2e_report.pair_rows():
            gold_value = gold_pair[(row["target"], row["project"], row["k"])]
            if row["value"] is not None and gold_value is not None:
                assert row["value"] <= gold_value + 1e-15

    def test_false_positive_rankings_are_dumped(self, tmp_path):
        docs = eval_docs(perfect=False)
        corpus = build_corpus(docs)
        config = heuristic_config(tmp_path, docs)
        report, _ = run_end_to_end(corpus, CAT, config)
        bait_rows = [r for r in report.rankings
                     if r.cve_id == "CVE-B2" and r.sentence_key == "commit_message:0"]
        assert bait_rows  # the unlabeled bait sentence was still traced


class TestRunEvalFiles:
    def _config_file(self, tmp_path, docs, **overrides) -> Path:
        corpus_dir = write_corpus_dir(tmp_path, docs)
        doc = {
            "corpus_path": str(corpus_dir),
            "output_dir": str(tmp_path / "out"),
            "classifiers": {"VT": "heuristic", "AF": "heuristic", "CP": "heuristic"},
        }
        doc.update(overrides)
        path = tmp_path / "config.json"
        path.write_text(json.dumps(doc, indent=2))
        return path

    def test_all_report_files_exist(self, tmp_path):
        config = RunConfig.from_file(self._config_file(tmp_path, eval_docs()))
        written = run_eval(config)
        for paths in written.values():
            for path in paths:
                assert path.exists(), path
        out = Path(config.output_dir)
        assert (out / "extraction" / "extraction_table.csv").exists()
        assert (out / "trace_gold" / "rankings.csv").exists()
        assert (out / "end_to_end" / "trace_tables.md").exists()
        assert (out / "run_manifest.json").exists()

    def test_rerun_is_byte_identical(self, tmp_path):
        config = RunConfig.from_file(self._config_file(tmp_path, eval_docs()))
        run_eval(config)
        out = Path(config.output_dir)
        snapshot = {
            p.relative_to(out): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()
        }
        run_eval(config)
        again = {
            p.relative_to(out): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()
        }
        assert snapshot == again

    def test_k_prefix_consistency(self, tmp_path):
        docs = eval_docs()
        config_a = RunConfig.from_file(
            self._config_file(tmp_path, docs, k_values=[1, 2, 3, 4, 5])
        )
        config_a.output_dir = str(tmp_path / "out5")
        run_eval(config_a, modes=["trace_gold"])
        config_b = RunConfig.from_file(
            self._config_file(tmp_path, docs, k_values=[1, 2, 3])
        )
        config_b.output_dir = str(tmp_path / "out3")
        run_eval(config_b, modes=["trace_gold"])

        def cells(out_dir):
            with (Path(out_dir) / "trace_gold" / "trace_tables.csv").open() as fh:
                return {
                    (r["table"], r["target"], r["project"], r["k"]): r["value"]
                    for r in csv.DictReader(fh)
                }

        five = cells(config_a.output_dir)
        three = cells(config_b.output_dir)
        for key, value in three.items():
            assert five[key] == value

    def test_rebuilt_tables_match_original_values(self, tmp_path):
        config = RunConfig.from_file(self._config_file(tmp_path, eval_docs(perfect=False)))
        run_eval(config)
        out = Path(config.output_dir)
        rebuild_tables(out)

        def rows(path, drop=()):
            with path.open() as fh:
                return [
                    {k: v for k, v in row.items() if k not in drop}
                    for row in csv.DictReader(fh)
                ]

        for mode in ("trace_gold", "end_to_end"):
            original = rows(out / mode / "trace_tables.csv")
            rebuilt = rows(out / "rebuilt" / mode / "trace_tables.csv")
            assert original == rebuilt, mode
        original = rows(out / "extraction" / "extraction_table.csv", drop=("annotation",))
        rebuilt = rows(out / "rebuilt" / "extraction" / "extraction_table.csv",
                       drop=("annotation",))
        assert original == rebuilt

    def test_manifest_hash_stable_for_same_seed(self, tmp_path):
        config = RunConfig.from_file(self._config_file(tmp_path, eval_docs(), seed=42))
        run_eval(config, modes=["trace_gold"])
        first = json.loads((Path(config.output_dir) / "run_manifest.json").read_text())
        run_eval(config, modes=["trace_gold"])
        second = json.loads((Path(config.output_dir) / "run_manifest.json").read_text())
        assert first["manifest_hash"] == second["manifest_hash"]

    def test_unknown_config_key_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"corpus_path": "x", "bogus": 1}))
        with pytest.raises(VulnTraceError):
            RunConfig.from_file(path)


class TestPluginIntegration:
    ECHO = None  # command string set lazily (needs sys import at call time)

    @staticmethod
    def echo_command() -> str:
        import sys

        from conftest import FIXTURES

        return f"{sys.executable} {FIXTURES / 'echo_plugin.py'}"

    def test_trace_gold_through_plugin_scorer(self, tmp_path):
        docs = eval_docs()
        corpus = build_corpus(docs)
        config = heuristic_config(
            tmp_path, docs, scorer="plugin", scorer_plugin=self.echo_command()
        )
        report = run_trace_gold(corpus, CAT, config)
        assert report.outcomes
        lexical = run_trace_gold(corpus, CAT, heuristic_config(tmp_path, docs))
        assert {(o.cve_id, o.entity) for o in report.outcomes} == {
            (o.cve_id, o.entity) for o in lexical.outcomes
        }

    def test_extraction_plugin_approach_row(self, tmp_path):
        docs = eval_docs()
        corpus = build_corpus(docs)
        config = heuristic_config(tmp_path, docs, classifier_plugin=self.echo_command())
        report = run_extraction_eval(corpus, CAT, config)
        plugin_cells = [c for c in report.cells if c.approach == "plugin"]
        assert plugin_cells
        assert any(p.approach == "plugin" for p in report.predictions)

    def test_e2e_degenerate_linear_falls_back_to_heuristic(self, tmp_path):
        docs = eval_docs()  # projB has no VT positives
        corpus = build_corpus(docs)
        config = heuristic_config(tmp_path, docs)
        config.classifiers = {"VT": "linear_patterns", "AF": "heuristic", "CP": "heuristic"}
        report, predictions = run_end_to_end(corpus, CAT, config)
        # fold projA trains VT on projB only -> degenerate -> heuristic fallback
        vt_rows = [p for p in predictions if p.entity == "VT" and p.fold == "projA"]
        assert vt_rows
        positives = [p for p in vt_rows if p.predicted]
        assert positives  # the heuristic fallback still extracts the VT sentence


class TestExclusionsSurviveRebuild:
    def test_rebuild_with_aborted_and_empty_pool_cves(self, tmp_path):
        docs = eval_docs(perfect=False)
        # gold line outside every pool -> whole CVE aborted in tracing
        docs.append(
            _doc(
                "CVE-ABORT", "projA", [AF_POS, CP_POS], {0: ["AF"], 1: ["CP"]},
                [{"entity": "AF", "sentences": [0], "lines": ["new|999"]},
                 {"entity": "CP", "sentences": [1], "lines": ["new|3"]}],
            )
        )
        # braces-only diff -> every pool empty -> excluded per entity
        empty_doc = record_doc(
            "CVE-EMPTY", "projB",
            commit_message=f"{AF_POS} {CP_POS}",
            diff="--- a/e.c\n+++ b/e.c\n@@ -1,1 +1,2 @@\n {\n+}\n",
            gold={
                "sentence_labels": {"commit_message:0": ["AF"], "commit_message:1": ["CP"]},
                "mappings": [
                    {"entity": "AF", "sentences": ["commit_message:0"], "lines": ["e.c|new|2"]},
                    {"entity": "CP", "sentences": ["commit_message:1"], "lines": ["e.c|new|2"]},
                ],
            },
        )
        docs.append(empty_doc)
        corpus_dir = write_corpus_dir(tmp_path, docs)
        config = RunConfig(
            corpus_path=str(corpus_dir),
            output_dir=str(tmp_path / "out"),
            classifiers={"VT": "heuristic", "AF": "heuristic", "CP": "heuristic"},
        )
        run_eval(config)
        out = Path(config.output_dir)
        diag = (out / "trace_gold" / "diagnostics.csv").read_text()
        assert "CVE-ABORT" in diag and "gold-outside-pool" in diag
        assert "CVE-EMPTY" in diag and "empty-pool" in diag
        rebuild_tables(out)
        for mode in ("trace_gold", "end_to_end"):
            original = (out / mode / "trace_tables.csv").read_bytes()
            rebuilt = (out / "rebuilt" / mode / "trace_tables.csv").read_bytes()
            assert original == rebuilt, mode


class TestReportEmission:
    def test_empty_corpus_tables_are_header_only(self, tmp_path):
        from vulntrace.harness import TraceReport, write_trace_tables

        empty = TraceReport(
            mode="trace_gold", outcomes=[], accumulators={"VT": [], "AF": []},
            rankings=[], diagnostics=[], k_values=(1, 2, 3, 4, 5),
            projects=(), cve_projects={},
        )
        paths = write_trace_tables(tmp_path, empty, "lexical")
        lines = paths[0].read_text().splitlines()
        assert lines == ["table,scorer,target,project,k,value"]

    def test_golden_trace_tables_bytes(self, tmp_path, trace_fixture_corpus):
        # Recorded once from the motivating fixture, then frozen; any change
        # to emission format or scoring shows up as a byte diff here.
        from vulntrace.harness import run_trace_gold, write_trace_tables

        config = RunConfig(
            corpus_path="tests/fixtures/motivating_trace", output_dir=str(tmp_path)
        )
        report = run_trace_gold(trace_fixture_corpus, CAT, config)
        paths = write_trace_tables(tmp_path, report, "lexical")
        golden_dir = Path(__file__).parent / "fixtures" / "golden"
        assert paths[0].read_bytes() == (golden_dir / "trace_tables.csv").read_bytes()
        assert paths[1].read_bytes() == (golden_dir / "trace_tables.md").read_bytes()

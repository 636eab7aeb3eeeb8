from __future__ import annotations

import json
import random
from pathlib import Path

import pytest

from vulntrace.corpus import Corpus, load_corpus, record_from_json

FIXTURES = Path(__file__).parent / "fixtures"


def record_doc(
    cve_id: str,
    project: str,
    *,
    commit_message: str | None = None,
    cve_summary: str | None = None,
    bug_report: str | None = None,
    diff: str = "",
    gold: dict | None = None,
) -> dict:
    artifacts = []
    if cve_summary:
        artifacts.append({"kind": "cve_summary", "text": cve_summary})
    if bug_report:
        artifacts.append({"kind": "bug_report", "text": bug_report})
    if commit_message:
        artifacts.append({"kind": "commit_message", "text": commit_message})
    doc = {"id": cve_id, "project": project, "artifacts": artifacts, "diff": diff}
    if gold is not None:
        doc["gold"] = gold
    return doc


def build_corpus(docs) -> Corpus:
    records = sorted(
        (record_from_json(d) for d in docs), key=lambda r: (r.project, r.id)
    )
    return Corpus(records=tuple(records))


def write_corpus_dir(tmp_path: Path, docs) -> Path:
    corpus_dir = tmp_path / "corpus"
    corpus_dir.mkdir(exist_ok=True)
    for doc in docs:
        (corpus_dir / f"{doc['id']}.json").write_text(
            json.dumps(doc, indent=2) + "\n", encoding="utf-8"
        )
    return corpus_dir


def simple_diff(
    file: str = "demo.c",
    context: tuple[str, ...] = ("int x = 1;",),
    removed: tuple[str, ...] = (),
    added: tuple[str, ...] = (),
    old_start: int = 1,
    new_start: int = 1,
) -> str:
    """One-hunk unified diff: context, then removals, then additions."""
    old_count = len(context) + len(removed)
    new_count = len(context) + len(added)
    lines = [f"--- a/{file}", f"+++ b/{file}",
             f"@@ -{old_start},{old_count} +{new_start},{new_count} @@"]
    lines += [f" {c}" for c in context]
    lines += [f"-{r}" for r in removed]
    lines += [f"+{a}" for a in added]
    return "\n".join(lines) + "\n"


def random_diff_text(rng: random.Random) -> str:
    """Synthetic multi-file multi-hunk diff with self-consistent headers."""
    chunks = []
    for f in range(rng.randint(1, 3)):
        name = f"src/file{f}.c"
        chunks.append(f"--- a/{name}")
        chunks.append(f"+++ b/{name}")
        old_no = 1
        new_no = 1
        for _ in range(rng.randint(1, 3)):
            old_no += rng.randint(0, 9)
            new_no += rng.randint(0, 9)
            body = []
            old_count = 0
            new_count = 0
            for _ in range(rng.randint(1, 8)):
                kind = rng.choice(("ctx", "add", "rem"))
                token = f"tok{rng.randint(0, 99)}"
                if kind == "ctx":
                    body.append(f" call_{token}(arg);")
                    old_count += 1
                    new_count += 1
                elif kind == "add":
                    body.append(f"+new_{token}();")
                    new_count += 1
                else:
                    body.append(f"-old_{token}();")
                    old_count += 1
            if old_count == 0 and new_count == 0:
                continue
            chunks.append(f"@@ -{old_no},{old_count} +{new_no},{new_count} @@")
            chunks.extend(body)
            old_no += old_count
            new_no += new_count
    return "\n".join(chunks) + "\n"


@pytest.fixture(scope="session")
def fig2_corpus() -> Corpus:
    return load_corpus(FIXTURES / "motivating")


@pytest.fixture(scope="session")
def trace_fixture_corpus() -> Corpus:
    return load_corpus(FIXTURES / "motivating_trace")

"""CVE corpus: records, sentence segmentation, diff parsing, candidate pools.

A corpus is a set of per-CVE JSON documents.  Each document carries the
natural-language artifacts (CVE summary, bug report, commit message), the
unified diff of the fix, and optional gold annotations:

    {
      "id": "CVE-...", "project": "...",
      "artifacts": [{"kind": "commit_message", "text": "..."}],
      "diff": "--- a/... (unified diff text)",
      "gold": {
        "sentence_labels": {"commit_message:0": ["AF"]},
        "mappings": [{"entity": "AF",
                      "sentences": ["commit_message:0"],
                      "lines": ["file.c|new|19"]}]
      }
    }

All loaded objects are immutable and safe to share across workers.
"""

from __future__ import annotations

import hashlib
import json
import re
import zipfile
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping

from .errors import (
    CorpusError,
    DiffParseError,
    DuplicateIdError,
    EmptyPool,
    RecordError,
)
from .patterns import Token, tokenize

ARTIFACT_KINDS = ("cve_summary", "bug_report", "commit_message")
ENTITIES = ("VT", "AF", "CP")

SIDE_OLD = "old"
SIDE_NEW = "new"
_SIDE_ORDER = {SIDE_OLD: 0, SIDE_NEW: 1}

CHANGE_ADDED = "added"
CHANGE_REMOVED = "removed"
CHANGE_CONTEXT = "context"


def normalize_whitespace(text: str) -> str:
    return " ".join(text.split())


# Spans a sentence terminator must not split inside: a few abbreviations,
# identifier calls, qualified names/paths, and dotted version numbers.
# Abbreviations come first: alternation picks the first branch, and the
# qualified-name branch would otherwise claim "e.g" without its final dot.
_PROTECTED_RE = re.compile(
    r"""
      \b(?:e\.g\.|i\.e\.|etc\.|vs\.)
    | [A-Za-z_][\w.:/-]*\([^()\s]*\)
    | [A-Za-z_]\w*(?:(?:::|[.:])[A-Za-z_]\w*)+
    | \d+(?:\.\d+)+
    """,
    re.VERBOSE | re.IGNORECASE,
)

_TERMINATORS = ".!?"


def segment_text(text: str) -> list[str]:
    """Split normalized text into sentences.

    A '.', '!' or '?' followed by whitespace ends a sentence unless it sits
    inside a protected span.  Text without a terminator is one sentence.
    """
    norm = normalize_whitespace(text)
    if not norm:
        return []
    protected: list[tuple[int, int]] = [
        (m.start(), m.end()) for m in _PROTECTED_RE.finditer(norm)
    ]

    def is_protected(pos: int) -> bool:
        return any(start <= pos < end for start, end in protected)

    sentences: list[str] = []
    start = 0
    for i, ch in enumerate(norm):
        if ch not in _TERMINATORS:
            continue
        if i + 1 >= len(norm) or norm[i + 1] != " ":
            continue
        if is_protected(i):
            continue
        sentences.append(norm[start : i + 1])
        start = i + 2  # skip the single collapsed space
    if start < len(norm):
        sentences.append(norm[start:])
    return sentences


@dataclass(frozen=True)
class Artifact:
    kind: str
    raw_text: str

    def __post_init__(self):
        if self.kind not in ARTIFACT_KINDS:
            raise CorpusError(f"unknown artifact kind {self.kind!r}")


@dataclass(frozen=True)
class Sentence:
    cve_id: str
    artifact_kind: str
    index: int
    text: str

    @property
    def key(self) -> str:
        return f"{self.artifact_kind}:{self.index}"

    @cached_property
    def tokens(self) -> tuple[Token, ...]:
        return tuple(tokenize(self.text))


def segment_sentences(artifact: Artifact, cve_id: str = "") -> list[Sentence]:
    return [
        Sentence(cve_id=cve_id, artifact_kind=artifact.kind, index=i, text=t)
        for i, t in enumerate(segment_text(artifact.raw_text))
    ]


@dataclass(frozen=True)
class HunkLine:
    change: str  # added | removed | context
    content: str
    old_no: int | None
    new_no: int | None


@dataclass(frozen=True)
class Hunk:
    old_start: int
    old_count: int
    new_start: int
    new_count: int
    lines: tuple[HunkLine, ...]


@dataclass(frozen=True)
class FileDiff:
    old_path: str | None
    new_path: str | None
    hunks: tuple[Hunk, ...]


@dataclass(frozen=True)
class CodeDiff:
    files: tuple[FileDiff, ...]


@dataclass(frozen=True)
class CodeLine:
    file: str
    side: str  # old | new
    line_no: int
    content: str
    change: str

    @property
    def key(self) -> str:
        return f"{self.file}|{self.side}|{self.line_no}"

    def sort_key(self) -> tuple:
        return (self.file, _SIDE_ORDER[self.side], self.line_no)


def parse_line_key(key: str) -> tuple[str, str, int]:
    parts = key.rsplit("|", 2)
    if len(parts) != 3 or parts[1] not in (SIDE_OLD, SIDE_NEW):
        raise CorpusError(f"bad code line key {key!r}")
    try:
        line_no = int(parts[2])
    except ValueError:
        raise CorpusError(f"bad code line key {key!r}") from None
    if line_no < 1:
        raise CorpusError(f"bad code line key {key!r}")
    return parts[0], parts[1], line_no


_HUNK_RE = re.compile(r"^@@ -(\d+)(?:,(\d+))? \+(\d+)(?:,(\d+))? @@")

_FILE_HEADER_PREFIXES = (
    "diff ",
    "index ",
    "new file",
    "deleted file",
    "old mode",
    "new mode",
    "similarity index",
    "dissimilarity index",
    "rename ",
    "copy ",
    "Binary files",
)


def _strip_diff_path(raw: str, prefix: str) -> str | None:
    path = raw.split("\t")[0].strip()
    if path == "/dev/null":
        return None
    if path.startswith(prefix):
        path = path[len(prefix) :]
    return path


def parse_unified_diff(text: str) -> CodeDiff:
    """Parse unified-diff text, reconciling every hunk against its header.

    A line count that disagrees with the ``@@`` header raises DiffParseError
    with the 1-based offending line number.
    """
    files: list[FileDiff] = []
    cur_old: str | None = None
    cur_new: str | None = None
    cur_hunks: list[Hunk] = []
    have_file = False

    def flush_file():
        nonlocal cur_old, cur_new, cur_hunks, have_file
        if have_file:
            files.append(
                FileDiff(old_path=cur_old, new_path=cur_new, hunks=tuple(cur_hunks))
            )
        cur_old = None
        cur_new = None
        cur_hunks = []
        have_file = False

    lines = text.splitlines()
    i = 0
    n = len(lines)
    while i < n:
        line = lines[i]
        if line.startswith("--- "):
            flush_file()
            cur_old = _strip_diff_path(line[4:], "a/")
            have_file = True
            i += 1
            continue
        if line.startswith("+++ "):
            cur_new = _strip_diff_path(line[4:], "b/")
            have_file = True
            i += 1
            continue
        if line.startswith("@@"):
            m = _HUNK_RE.match(line)
            if not m:
                raise DiffParseError(i + 1, f"malformed hunk header: {line!r}")
            if not have_file:
                raise DiffParseError(i + 1, "hunk header before file header")
            old_start = int(m.group(1))
            old_count = int(m.group(2)) if m.group(2) is not None else 1
            new_start = int(m.group(3))
            new_count = int(m.group(4)) if m.group(4) is not None else 1
            i += 1
            hunk_lines: list[HunkLine] = []
            old_no = old_start
            new_no = new_start
            old_left = old_count
            new_left = new_count
            while old_left > 0 or new_left > 0:
                if i >= n:
                    raise DiffParseError(
                        i, "diff truncated inside hunk (count mismatch)"
                    )
                raw = lines[i]
                if raw.startswith("\\"):  # "\ No newline at end of file"
                    i += 1
                    continue
                marker = raw[0] if raw else " "
                content = raw[1:] if raw else ""
                if marker == "-":
                    if old_left <= 0:
                        raise DiffParseError(i + 1, "more removed lines than header allows")
                    hunk_lines.append(
                        HunkLine(CHANGE_REMOVED, content, old_no, None)
                    )
                    old_no += 1
                    old_left -= 1
                elif marker == "+":
                    if new_left <= 0:
                        raise DiffParseError(i + 1, "more added lines than header allows")
                    hunk_lines.append(HunkLine(CHANGE_ADDED, content, None, new_no))
                    new_no += 1
                    new_left -= 1
                elif marker == " ":
                    if old_left <= 0 or new_left <= 0:
                        raise DiffParseError(i + 1, "more context lines than header allows")
                    hunk_lines.append(
                        HunkLine(CHANGE_CONTEXT, content, old_no, new_no)
                    )
                    old_no += 1
                    new_no += 1
                    old_left -= 1
                    new_left -= 1
                else:
                    raise DiffParseError(i + 1, f"unexpected line in hunk: {raw!r}")
                i += 1
            cur_hunks.append(
                Hunk(old_start, old_count, new_start, new_count, tuple(hunk_lines))
            )
            continue
        if line.startswith(_FILE_HEADER_PREFIXES) or line.startswith("\\") or not line.strip():
            i += 1
            continue
        raise DiffParseError(i + 1, f"unexpected line outside hunk: {line!r}")

    flush_file()
    return CodeDiff(files=tuple(files))


def _is_noise_line(content: str) -> bool:
    stripped = content.strip()
    return not stripped or set(stripped) <= {"{", "}", ";"}


def candidate_pool(diff: CodeDiff, entity: str, cve_id: str = "") -> list[CodeLine]:
    """Code lines eligible as tracing targets for ``entity``.

    VT looks at the pre-fix version (removed plus old-side context), AF at
    the post-fix version (added plus new-side context), CP at both sides
    with each context line kept once on the new side.  Blank and brace-only
    lines never enter a pool.
    """
    if entity not in ENTITIES:
        raise CorpusError(f"unknown entity {entity!r}")
    out: list[CodeLine] = []
    for fd in diff.files:
        old_file = fd.old_path or fd.new_path
        new_file = fd.new_path or fd.old_path
        for hunk in fd.hunks:
            for hl in hunk.lines:
                if _is_noise_line(hl.content):
                    continue
                if hl.change == CHANGE_REMOVED and entity in ("VT", "CP"):
                    if old_file is not None and hl.old_no is not None:
                        out.append(
                            CodeLine(old_file, SIDE_OLD, hl.old_no, hl.content, hl.change)
                        )
                elif hl.change == CHANGE_ADDED and entity in ("AF", "CP"):
                    if new_file is not None and hl.new_no is not None:
                        out.append(
                            CodeLine(new_file, SIDE_NEW, hl.new_no, hl.content, hl.change)
                        )
                elif hl.change == CHANGE_CONTEXT:
                    if entity == "VT":
                        if old_file is not None and hl.old_no is not None:
                            out.append(
                                CodeLine(old_file, SIDE_OLD, hl.old_no, hl.content, hl.change)
                            )
                    else:  # AF and CP both key context on the new side
                        if new_file is not None and hl.new_no is not None:
                            out.append(
                                CodeLine(new_file, SIDE_NEW, hl.new_no, hl.content, hl.change)
                            )
    out.sort(key=CodeLine.sort_key)
    if not out:
        raise EmptyPool(cve_id, entity)
    return out


@dataclass(frozen=True)
class GoldMapping:
    entity: str
    sentence_keys: frozenset[str]
    gold_lines: frozenset[str]


@dataclass(frozen=True)
class GoldAnnotations:
    sentence_labels: Mapping[str, frozenset[str]]
    mappings: tuple[GoldMapping, ...]

    def labels_for(self, key: str) -> frozenset[str]:
        return self.sentence_labels.get(key, frozenset())


@dataclass(frozen=True)
class CveRecord:
    id: str
    project: str
    artifacts: tuple[Artifact, ...]
    diff_text: str
    diff: CodeDiff
    gold: GoldAnnotations | None

    @cached_property
    def sentences(self) -> tuple[Sentence, ...]:
        out: list[Sentence] = []
        for artifact in self.artifacts:
            out.extend(segment_sentences(artifact, cve_id=self.id))
        return tuple(out)

    @cached_property
    def sentences_by_key(self) -> Mapping[str, Sentence]:
        return {s.key: s for s in self.sentences}


@dataclass(frozen=True)
class Corpus:
    records: tuple[CveRecord, ...]

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)

    @cached_property
    def by_id(self) -> Mapping[str, CveRecord]:
        return {r.id: r for r in self.records}

    @cached_property
    def projects(self) -> tuple[str, ...]:
        return tuple(sorted({r.project for r in self.records}))

    def project_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for r in self.records:
            counts[r.project] = counts.get(r.project, 0) + 1
        return dict(sorted(counts.items()))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for record in self.records:
            h.update(serialize_record(record).encode("utf-8"))
        return h.hexdigest()


def _require(cond: bool, cve_id: str, field_path: str, message: str) -> None:
    if not cond:
        raise RecordError(cve_id, field_path, message)


def record_from_json(doc: Mapping) -> CveRecord:
    """Build and validate one CveRecord from its JSON document."""
    if not isinstance(doc, Mapping):
        raise CorpusError(f"record document must be a JSON object, got {type(doc).__name__}")
    cve_id = doc.get("id") or ""
    _require(isinstance(cve_id, str) and bool(cve_id), str(cve_id), "id", "non-empty id required")
    project = doc.get("project") or ""
    _require(isinstance(project, str) and bool(project), cve_id, "project", "non-empty project required")

    raw_artifacts = doc.get("artifacts")
    _require(isinstance(raw_artifacts, list) and len(raw_artifacts) > 0, cve_id, "artifacts", "at least one artifact required")
    artifacts: list[Artifact] = []
    seen_kinds: set[str] = set()
    for idx, raw in enumerate(raw_artifacts):
        path = f"artifacts[{idx}]"
        kind = raw.get("kind") if isinstance(raw, Mapping) else None
        _require(kind in ARTIFACT_KINDS, cve_id, f"{path}.kind", f"kind must be one of {ARTIFACT_KINDS}")
        # One artifact per kind keeps "<kind>:<index>" sentence keys unique.
        _require(kind not in seen_kinds, cve_id, f"{path}.kind", f"duplicate artifact kind {kind!r}")
        seen_kinds.add(kind)
        text = raw.get("text", "")
        _require(isinstance(text, str) and bool(normalize_whitespace(text)), cve_id, f"{path}.text", "text empty after whitespace normalization")
        artifacts.append(Artifact(kind=kind, raw_text=text))

    diff_text = doc.get("diff", "")
    _require(isinstance(diff_text, str), cve_id, "diff", "diff must be a string")
    try:
        diff = parse_unified_diff(diff_text)
    except DiffParseError as exc:
        raise RecordError(cve_id, "diff", str(exc)) from exc

    gold = None
    raw_gold = doc.get("gold")
    if raw_gold is not None:
        _require(isinstance(raw_gold, Mapping), cve_id, "gold", "gold must be an object")

    record = CveRecord(
        id=cve_id,
        project=project,
        artifacts=tuple(artifacts),
        diff_text=diff_text,
        diff=diff,
        gold=None,
    )

    if raw_gold is not None:
        gold = _gold_from_json(record, raw_gold)
        record = CveRecord(
            id=cve_id,
            project=project,
            artifacts=tuple(artifacts),
            diff_text=diff_text,
            diff=diff,
            gold=gold,
        )
    return record


def _gold_from_json(record: CveRecord, raw: Mapping) -> GoldAnnotations:
    cve_id = record.id
    keys = record.sentences_by_key

    labels: dict[str, frozenset[str]] = {}
    raw_labels = raw.get("sentence_labels", {})
    _require(isinstance(raw_labels, Mapping), cve_id, "gold.sentence_labels", "must be an object")
    for key, entities in raw_labels.items():
        path = f"gold.sentence_labels[{key!r}]"
        _require(key in keys, cve_id, path, "references a missing sentence")
        _require(isinstance(entities, list) and len(entities) > 0, cve_id, path, "label list must be non-empty")
        for e in entities:
            _require(e in ENTITIES, cve_id, path, f"unknown entity {e!r}")
        labels[key] = frozenset(entities)

    mappings: list[GoldMapping] = []
    raw_mappings = raw.get("mappings", [])
    _require(isinstance(raw_mappings, list), cve_id, "gold.mappings", "must be a list")
    claimed: dict[str, set[str]] = {e: set() for e in ENTITIES}
    for idx, m in enumerate(raw_mappings):
        path = f"gold.mappings[{idx}]"
        entity = m.get("entity") if isinstance(m, Mapping) else None
        _require(entity in ENTITIES, cve_id, f"{path}.entity", f"entity must be one of {ENTITIES}")
        sentence_keys = m.get("sentences", [])
        _require(isinstance(sentence_keys, list) and len(sentence_keys) > 0, cve_id, f"{path}.sentences", "non-empty sentence list required")
        for key in sentence_keys:
            _require(key in keys, cve_id, f"{path}.sentences", f"references missing sentence {key!r}")
            _require(entity in labels.get(key, frozenset()), cve_id, f"{path}.sentences",
                     f"sentence {key!r} lacks the {entity} label")
            _require(key not in claimed[entity], cve_id, f"{path}.sentences",
                     f"sentence {key!r} appears in two {entity} groups")
            claimed[entity].add(key)
        lines = m.get("lines", [])
        _require(isinstance(lines, list) and len(lines) > 0, cve_id, f"{path}.lines", "non-empty line list required")
        for line in lines:
            try:
                parse_line_key(line)
            except CorpusError as exc:
                raise RecordError(cve_id, f"{path}.lines", str(exc)) from exc
        mappings.append(
            GoldMapping(
                entity=entity,
                sentence_keys=frozenset(sentence_keys),
                gold_lines=frozenset(lines),
            )
        )
    return GoldAnnotations(sentence_labels=labels, mappings=tuple(mappings))


def record_to_json(record: CveRecord) -> dict:
    doc: dict = {
        "id": record.id,
        "project": record.project,
        "artifacts": [
            {"kind": a.kind, "text": a.raw_text} for a in record.artifacts
        ],
        "diff": record.diff_text,
    }
    if record.gold is not None:
        doc["gold"] = {
            "sentence_labels": {
                key: sorted(labels)
                for key, labels in sorted(record.gold.sentence_labels.items())
            },
            "mappings": [
                {
                    "entity": m.entity,
                    "sentences": sorted(m.sentence_keys),
                    "lines": sorted(m.gold_lines),
                }
                for m in sorted(
                    record.gold.mappings,
                    key=lambda m: (m.entity, sorted(m.sentence_keys)),
                )
            ],
        }
    return doc


def serialize_record(record: CveRecord) -> str:
    """Canonical JSON for one record; byte-stable for fixed content."""
    return json.dumps(record_to_json(record), sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def serialize_corpus(corpus: Corpus, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for record in corpus.records:
        path = out / f"{record.id}.json"
        path.write_text(serialize_record(record), encoding="utf-8")
        written.append(path)
    return written


def _iter_corpus_documents(path: Path) -> Iterable[tuple[str, Mapping]]:
    if path.is_dir():
        for file in sorted(path.glob("*.json")):
            yield str(file), json.loads(file.read_text(encoding="utf-8"))
    elif path.suffix == ".zip":
        with zipfile.ZipFile(path) as zf:
            for name in sorted(zf.namelist()):
                if name.endswith(".json"):
                    yield f"{path}!{name}", json.loads(zf.read(name).decode("utf-8"))
    else:
        payload = json.loads(path.read_text(encoding="utf-8"))
        if isinstance(payload, list):
            for idx, doc in enumerate(payload):
                yield f"{path}#{idx}", doc
        else:
            yield str(path), payload


def load_corpus(path: str | Path) -> Corpus:
    """Load records from a directory of JSON files, a zip archive, or one file.

    Records are validated and returned in stable (project, id) order.
    """
    root = Path(path)
    if not root.exists():
        raise CorpusError(f"corpus path does not exist: {root}")
    records: list[CveRecord] = []
    seen: set[str] = set()
    for _, doc in _iter_corpus_documents(root):
        record = record_from_json(doc)
        if record.id in seen:
            raise DuplicateIdError(record.id)
        seen.add(record.id)
        records.append(record)
    records.sort(key=lambda r: (r.project, r.id))
    return Corpus(records=tuple(records))


def load_corpus_collecting(path: str | Path) -> tuple[Corpus, list[CorpusError]]:
    """Like load_corpus but gathers every record error instead of failing fast."""
    root = Path(path)
    if not root.exists():
        return Corpus(records=()), [CorpusError(f"corpus path does not exist: {root}")]
    records: list[CveRecord] = []
    errors: list[CorpusError] = []
    seen: set[str] = set()
    for source, doc in _iter_corpus_documents(root):
        try:
            record = record_from_json(doc)
        except CorpusError as exc:
            errors.append(exc)
            continue
        if record.id in seen:
            errors.append(DuplicateIdError(record.id))
            continue
        seen.add(record.id)
        records.append(record)
    records.sort(key=lambda r: (r.project, r.id))
    return Corpus(records=tuple(records)), errors

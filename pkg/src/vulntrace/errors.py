"""Exception types shared across the pipeline."""

from __future__ import annotations


class VulnTraceError(Exception):
    """Base class for all library errors."""


class CorpusError(VulnTraceError):
    """Corpus-level problem (malformed input, duplicate ids, ...)."""


class RecordError(CorpusError):
    """A single CVE record failed validation.

    Carries the CVE id and a dotted path to the offending field so callers
    can emit machine-readable diagnostics.
    """

    def __init__(self, cve_id: str, field_path: str, message: str):
        super().__init__(f"{cve_id}: {field_path}: {message}")
        self.cve_id = cve_id
        self.field_path = field_path
        self.reason = message


class DuplicateIdError(CorpusError):
    def __init__(self, cve_id: str):
        super().__init__(f"duplicate CVE id in corpus: {cve_id}")
        self.cve_id = cve_id


class DiffParseError(CorpusError):
    """Unified diff text could not be parsed; ``line_no`` is 1-based."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"diff line {line_no}: {message}")
        self.line_no = line_no


class PatternDslError(VulnTraceError):
    """Pattern catalog file is malformed (unknown lexicon, duplicate code, ...)."""


class DegenerateTraining(VulnTraceError):
    """Training data contains only one class for the requested entity."""


class ModelMismatch(VulnTraceError):
    """A trained model was applied with a vocabulary or catalog it was not built on."""


class EmptyPool(VulnTraceError):
    """A diff yields no candidate code lines for the requested entity."""

    def __init__(self, cve_id: str, entity: str):
        super().__init__(f"{cve_id}: empty candidate pool for entity {entity}")
        self.cve_id = cve_id
        self.entity = entity


class GoldOutsidePool(VulnTraceError):
    """A gold code line is not part of the entity's candidate pool."""

    def __init__(self, cve_id: str, entity: str, line_key: str):
        super().__init__(
            f"{cve_id}: gold line {line_key!r} not in {entity} candidate pool"
        )
        self.cve_id = cve_id
        self.entity = entity
        self.line_key = line_key


class ScorerUnavailable(VulnTraceError):
    """A scorer plugin failed its handshake or broke protocol mid-run."""

"""Discourse-pattern engine: tokenizer, lexicons, and the slot-sequence matcher.

A discourse pattern is an ordered sequence of slots (lexicon term, literal
phrase, code-entity mention, or bounded gap) that signals whether a sentence
describes a vulnerability trigger (VT), a fix action (AF), or a crash
phenomenon (CP).  Nine frequent patterns are built in; larger catalogs load
from a JSON pattern file and may add to or override the built-ins.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import PatternDslError

ENTITIES = ("VT", "AF", "CP")

WORD = "word"
CODE_IDENT = "code_ident"
NUMBER = "number"
PUNCT = "punct"

# Words frozen against suffix stripping.
_NORM_EXCEPTIONS = frozenset(
    {"during", "string", "nothing", "anything", "something", "everything"}
)

# Endings that block plain plural stripping ("this", "was", "bus", "address").
_PLURAL_GUARD = ("ss", "us", "is", "as")


def normalize_word(word: str) -> str:
    """Lemma-lite normal form: lowercase plus rule-based suffix stripping.

    The same function normalizes lexicon terms and sentence tokens, so the
    two sides always agree even where stripping is linguistically crude
    ("remove" and "removed" both map to "remov").
    """
    w = word.lower()
    if w in _NORM_EXCEPTIONS:
        return w
    if w.endswith("ies") and len(w) >= 5:
        w = w[:-3] + "y"
    elif w.endswith("s") and len(w) >= 4 and not w.endswith(_PLURAL_GUARD):
        w = w[:-1]
    if w.endswith("ing") and len(w) >= 6 and w not in _NORM_EXCEPTIONS:
        w = w[:-3]
    elif w.endswith("ied") and len(w) >= 5:
        w = w[:-3] + "y"
    elif w.endswith("ed") and len(w) >= 4:
        w = w[:-1]
    if w.endswith("e") and len(w) >= 4:
        w = w[:-1]
    return w


@dataclass(frozen=True)
class Token:
    surface: str
    norm: str
    kind: str  # word | code_ident | number | punct


# Ordered alternation; the first branch that matches wins.  Code-ish shapes
# (calls, qualified names, snake_case, camelCase, dotted versions) must be
# captured whole before the plain-word branch can nibble at them.
_TOKEN_RE = re.compile(
    r"""
      (?P<call>[A-Za-z_][\w.:]*\([^()\s]*\))
    | (?P<qual>[A-Za-z_]\w*(?:(?:::|[.:])[A-Za-z_]\w*)+)
    | (?P<snake>[A-Za-z_]\w*_\w*|_\w+)
    | (?P<camel>[A-Za-z]*[a-z][A-Z]\w*)
    | (?P<version>\d+(?:\.\d+)+)
    | (?P<hyph>[A-Za-z]+(?:-[A-Za-z]+)+)
    | (?P<alnum>[A-Za-z]+\d\w*)
    | (?P<word>[A-Za-z]+)
    | (?P<number>\d+)
    | (?P<punct>\S)
    """,
    re.VERBOSE,
)

_CODE_GROUPS = ("call", "qual", "snake", "camel", "version")
_WORD_GROUPS = ("hyph", "alnum", "word")


def tokenize(text: str) -> list[Token]:
    """Split sentence text into tokens, keeping code identifiers intact.

    Single capital letters other than "A"/"I" count as identifier mentions;
    vulnerability texts routinely name variables that way ("when X is ...").
    """
    tokens: list[Token] = []
    for m in _TOKEN_RE.finditer(text):
        group = m.lastgroup or "punct"
        surface = m.group()
        if group in _CODE_GROUPS:
            kind = CODE_IDENT
        elif group in _WORD_GROUPS:
            if len(surface) == 1 and surface.isupper() and surface not in ("A", "I"):
                kind = CODE_IDENT
            else:
                kind = WORD
        elif group == "number":
            kind = NUMBER
        else:
            kind = PUNCT
        norm = normalize_word(surface) if kind == WORD else surface
        tokens.append(Token(surface=surface, norm=norm, kind=kind))
    return tokens


def _normalize_phrase(phrase: str) -> tuple[str, ...]:
    return tuple(normalize_word(w) for w in phrase.split())


@dataclass(frozen=True)
class Lexicon:
    """Named set of normalized terms; multi-word phrases kept as tuples."""

    name: str
    phrases: frozenset[tuple[str, ...]]

    @classmethod
    def build(cls, name: str, terms: Iterable[str]) -> "Lexicon":
        phrases = frozenset(_normalize_phrase(t) for t in terms)
        if not phrases:
            raise PatternDslError(f"lexicon {name!r} has no terms")
        return cls(name=name, phrases=phrases)

    def match_at(self, tokens: Sequence[Token], pos: int) -> int | None:
        """Longest phrase length matching at ``pos``, or None."""
        best: int | None = None
        for phrase in self.phrases:
            n = len(phrase)
            if pos + n > len(tokens):
                continue
            if all(tokens[pos + j].norm == phrase[j] for j in range(n)):
                if best is None or n > best:
                    best = n
        return best


# Built-in lexicons.  Contents follow the term classes the frequent patterns
# are described with; members beyond the quoted exemplars (inflections the
# suffix stripper cannot fold, e.g. "dropped") are deliberate and may be
# overridden from a pattern file.
_BUILTIN_LEXICON_TERMS: dict[str, tuple[str, ...]] = {
    "bound_terms": ("bound", "bounds", "boundary"),
    "check_terms": ("check", "test", "validate", "verify", "ttest"),
    "negation": (
        "not",
        "never",
        "fail",
        "fails",
        "failed",
        "missing",
        "lack",
        "lacks",
        "without",
    ),
    "modal_future": ("will", "would"),
    "removal_verbs": ("remove", "clean", "drop", "delete", "dropped", "dropping"),
    "avoid_verbs": ("avoid", "reject", "prevent", "disallow", "skip"),
    "adjust_verbs": ("adjust", "set", "reset", "clamp", "limit", "setting", "resetting"),
    "overflow_terms": ("overflow", "over-read", "overread", "over-write", "overwrite"),
    "nullptr_phrase": (
        "null pointer dereference",
        "null-pointer dereference",
        "NULL pointer dereference",
    ),
    "oob_terms": ("out-of-bounds", "oob"),
    "action_verbs": ("add", "use", "apply", "insert", "introduce", "make", "fix", "ensure"),
}

# Generic nouns a [method/variable] slot accepts besides real identifiers.
_ENTITY_WORDS = frozenset(
    normalize_word(w) for w in ("method", "variable", "pointer", "buffer", "function")
)

SLOT_LEXICON = "lexicon"
SLOT_LITERAL = "literal"
SLOT_ENTITY = "entity_mention"
SLOT_GAP = "gap"

# Tokens allowed between adjacent non-gap slots unless an explicit gap says otherwise.
IMPLICIT_GAP = 4


@dataclass(frozen=True)
class Slot:
    kind: str
    value: str | None = None  # lexicon name or literal phrase
    max_tokens: int | None = None  # gap slots only

    def __post_init__(self):
        if self.kind not in (SLOT_LEXICON, SLOT_LITERAL, SLOT_ENTITY, SLOT_GAP):
            raise PatternDslError(f"unknown slot kind {self.kind!r}")
        if self.kind == SLOT_GAP and (self.max_tokens is None or self.max_tokens < 0):
            raise PatternDslError("gap slot requires max_tokens >= 0")
        if self.kind in (SLOT_LEXICON, SLOT_LITERAL) and not self.value:
            raise PatternDslError(f"{self.kind} slot requires a value")


def lexicon_slot(name: str) -> Slot:
    return Slot(kind=SLOT_LEXICON, value=name)


def literal_slot(phrase: str) -> Slot:
    return Slot(kind=SLOT_LITERAL, value=phrase)


def entity_slot() -> Slot:
    return Slot(kind=SLOT_ENTITY)


def gap_slot(max_tokens: int) -> Slot:
    return Slot(kind=SLOT_GAP, max_tokens=max_tokens)


@dataclass(frozen=True)
class DiscoursePattern:
    code: str
    entity: str
    slots: tuple[Slot, ...]
    description: str = ""
    example: str = ""

    def __post_init__(self):
        if self.entity not in ENTITIES:
            raise PatternDslError(f"{self.code}: unknown entity {self.entity!r}")
        if not self.slots:
            raise PatternDslError(f"{self.code}: empty slot list")
        if self.slots[0].kind == SLOT_GAP or self.slots[-1].kind == SLOT_GAP:
            raise PatternDslError(f"{self.code}: first/last slot must not be a gap")


@dataclass(frozen=True)
class PatternMatch:
    pattern_code: str
    sentence_key: str
    # (slot_index, token_start, token_end) for every non-gap slot, in order.
    spans: tuple[tuple[int, int, int], ...]


def _looks_code(word: str) -> bool:
    return bool(re.search(r"[_(:.]|::", word)) or bool(re.search(r"[a-z][A-Z]", word))


def _slot_match_lengths(
    slot: Slot, tokens: Sequence[Token], pos: int, lexicons: Mapping[str, Lexicon]
) -> list[int]:
    """Span lengths ``slot`` can consume at ``pos``, longest first."""
    if pos >= len(tokens):
        return []
    if slot.kind == SLOT_LEXICON:
        lex = lexicons.get(slot.value or "")
        if lex is None:
            raise PatternDslError(f"unknown lexicon {slot.value!r}")
        n = lex.match_at(tokens, pos)
        return [n] if n else []
    if slot.kind == SLOT_LITERAL:
        words = (slot.value or "").split()
        if pos + len(words) > len(tokens):
            return []
        for j, w in enumerate(words):
            tok = tokens[pos + j]
            if _looks_code(w):
                if tok.surface != w:
                    return []
            elif tok.norm != normalize_word(w):
                return []
        return [len(words)]
    if slot.kind == SLOT_ENTITY:
        tok = tokens[pos]
        if tok.kind == CODE_IDENT or tok.norm in _ENTITY_WORDS:
            return [1]
        return []
    raise PatternDslError("gap slot cannot match tokens directly")


def match_pattern(
    pattern: DiscoursePattern,
    tokens: Sequence[Token],
    lexicons: Mapping[str, Lexicon],
    sentence_key: str = "",
) -> PatternMatch | None:
    """Leftmost in-order alignment of the pattern's slots, or None.

    Between adjacent non-gap slots up to IMPLICIT_GAP tokens may intervene;
    an explicit gap slot overrides that budget for its junction.  The match
    may start and end anywhere in the sentence.
    """
    # Fold gap slots into the allowance before each concrete slot.
    concrete: list[tuple[int, Slot, int | None]] = []  # (slot_index, slot, gap_before)
    pending_gap: int | None = None
    for idx, slot in enumerate(pattern.slots):
        if slot.kind == SLOT_GAP:
            pending_gap = slot.max_tokens
            continue
        gap_before = None if not concrete else (
            pending_gap if pending_gap is not None else IMPLICIT_GAP
        )
        concrete.append((idx, slot, gap_before))
        pending_gap = None

    def search(ci: int, pos: int) -> list[tuple[int, int, int]] | None:
        if ci == len(concrete):
            return []
        slot_index, slot, gap_before = concrete[ci]
        if gap_before is None:
            starts: Iterable[int] = range(pos, len(tokens))
        else:
            starts = range(pos, min(pos + gap_before, len(tokens) - 1) + 1)
        for start in starts:
            for length in _slot_match_lengths(slot, tokens, start, lexicons):
                rest = search(ci + 1, start + length)
                if rest is not None:
                    return [(slot_index, start, start + length)] + rest
        return None

    spans = search(0, 0)
    if spans is None:
        return None
    return PatternMatch(
        pattern_code=pattern.code, sentence_key=sentence_key, spans=tuple(spans)
    )


@dataclass(frozen=True)
class PatternCatalog:
    patterns: tuple[DiscoursePattern, ...]  # sorted by code
    lexicons: Mapping[str, Lexicon]

    def pattern(self, code: str) -> DiscoursePattern:
        for p in self.patterns:
            if p.code == code:
                return p
        raise KeyError(code)

    def by_entity(self, entity: str) -> tuple[DiscoursePattern, ...]:
        return tuple(p for p in self.patterns if p.entity == entity)

    def entity_counts(self) -> dict[str, int]:
        counts = {e: 0 for e in ENTITIES}
        for p in self.patterns:
            counts[p.entity] += 1
        return counts

    def fingerprint(self) -> str:
        payload = [
            {
                "code": p.code,
                "entity": p.entity,
                "slots": [
                    {"kind": s.kind, "value": s.value, "max_tokens": s.max_tokens}
                    for s in p.slots
                ],
            }
            for p in self.patterns
        ]
        blob = json.dumps(payload, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


def match_all(
    catalog: PatternCatalog, tokens: Sequence[Token], sentence_key: str = ""
) -> list[PatternMatch]:
    """All pattern matches for one tokenized sentence, ordered by pattern code."""
    out: list[PatternMatch] = []
    for pattern in catalog.patterns:
        m = match_pattern(pattern, tokens, catalog.lexicons, sentence_key)
        if m is not None:
            out.append(m)
    return out


def _builtin_patterns() -> list[DiscoursePattern]:
    return [
        DiscoursePattern(
            code="AFBC",
            entity="AF",
            slots=(
                lexicon_slot("action_verbs"),
                lexicon_slot("bound_terms"),
                lexicon_slot("check_terms"),
                entity_slot(),
            ),
            description="A bounds check is applied to existing code.",
            example="CVE-2017-12897/ISO CLNS: Use ND_TTEST() for the bounds checks in isoclns_print().",
        ),
        DiscoursePattern(
            code="AFa",
            entity="AF",
            slots=(lexicon_slot("avoid_verbs"),),
            description="Bad values or inputs are rejected/avoided to fix the bug.",
            example="Reject vp8 video files that have alpha and image planes of different sizes.",
        ),
        DiscoursePattern(
            code="AFr",
            entity="AF",
            slots=(lexicon_slot("adjust_verbs"),),
            description="A variable assignment is adjusted to fix the bug.",
            example="Set the default EXTINF duration to 1ms if the duration is smaller than 1ms.",
        ),
        DiscoursePattern(
            code="BFDN",
            entity="VT",
            slots=(entity_slot(), gap_slot(30), lexicon_slot("negation")),
            description="Code did not perform a required action, causing the bug.",
            example=(
                "In lldp_private_8023_print() the case block for subtype 4 "
                "(Maximum Frame Size TLV, IEEE 802.3bc-2009 Section 79.3.4) "
                "did not include the length check."
            ),
        ),
        DiscoursePattern(
            code="BFWD",
            entity="VT",
            slots=(lexicon_slot("modal_future"), lexicon_slot("overflow_terms")),
            description="Under some condition the code will/would misbehave.",
            example="When 'uvalue' is a specific value, 'block_start + value' will cause integer overflow.",
        ),
        DiscoursePattern(
            code="BFCU",
            entity="VT",
            slots=(lexicon_slot("removal_verbs"), entity_slot()),
            description="Removing a variable/statement prevents the bug.",
            example="Remove use of FF_PROFILE_MPEG4_SIMPLE_STUDIO as an indicator of studio profile.",
        ),
        DiscoursePattern(
            code="CLBO",
            entity="CP",
            slots=(literal_slot("buffer"), lexicon_slot("overflow_terms")),
            description="A buffer overflow/over-read happens in existing code.",
            example="The BGP parser in tcpdump before 4.9.2 has a buffer over-read in print_bgp.c:bgp_attr_print().",
        ),
        DiscoursePattern(
            code="CLNP",
            entity="CP",
            slots=(lexicon_slot("nullptr_phrase"),),
            description="A null pointer dereference crash is described.",
            example="Fixes: null pointer dereference.",
        ),
        DiscoursePattern(
            code="CLOOA",
            entity="CP",
            slots=(lexicon_slot("oob_terms"),),
            description="An out-of-bounds access/read/write is described.",
            example="Check for size_t and vector resize() overflow to avoid OOB writes during vector allocation.",
        ),
    ]


def builtin_catalog() -> PatternCatalog:
    lexicons = {
        name: Lexicon.build(name, terms)
        for name, terms in _BUILTIN_LEXICON_TERMS.items()
    }
    patterns = tuple(sorted(_builtin_patterns(), key=lambda p: p.code))
    return PatternCatalog(patterns=patterns, lexicons=lexicons)


def _slot_from_json(code: str, raw: Mapping) -> Slot:
    kind = raw.get("kind")
    if kind == SLOT_GAP:
        return gap_slot(int(raw.get("max_tokens", -1)))
    if kind == SLOT_LEXICON:
        return lexicon_slot(str(raw.get("value", "")))
    if kind == SLOT_LITERAL:
        return literal_slot(str(raw.get("value", "")))
    if kind == SLOT_ENTITY:
        return entity_slot()
    raise PatternDslError(f"pattern {code}: unknown slot kind {kind!r}")


def load_pattern_catalog(path: str | Path | None) -> PatternCatalog:
    """Catalog with the built-ins plus the entries of a pattern DSL file.

    File entries add new patterns/lexicons or override built-ins by code or
    name.  ``path=None`` yields exactly the built-in catalog.
    """
    catalog = builtin_catalog()
    if path is None:
        return catalog

    text = Path(path).read_text(encoding="utf-8")
    if not text.strip():
        return catalog
    raw = json.loads(text)
    if not isinstance(raw, dict):
        raise PatternDslError("pattern file must contain a JSON object")

    lexicons = dict(catalog.lexicons)
    for entry in raw.get("lexicons", []):
        name = entry.get("name")
        if not name:
            raise PatternDslError("lexicon entry without a name")
        lexicons[name] = Lexicon.build(name, entry.get("terms", []))

    by_code = {p.code: p for p in catalog.patterns}
    seen_in_file: set[str] = set()
    for entry in raw.get("patterns", []):
        code = entry.get("code")
        if not code:
            raise PatternDslError("pattern entry without a code")
        if code in seen_in_file:
            raise PatternDslError(f"duplicate pattern code in file: {code}")
        seen_in_file.add(code)
        slots = tuple(_slot_from_json(code, s) for s in entry.get("slots", []))
        pattern = DiscoursePattern(
            code=code,
            entity=entry.get("entity", ""),
            slots=slots,
            description=entry.get("description", ""),
            example=entry.get("example", ""),
        )
        for slot in slots:
            if slot.kind == SLOT_LEXICON and slot.value not in lexicons:
                raise PatternDslError(
                    f"pattern {code}: unknown lexicon {slot.value!r}"
                )
        by_code[code] = pattern

    patterns = tuple(sorted(by_code.values(), key=lambda p: p.code))
    return PatternCatalog(patterns=patterns, lexicons=lexicons)

"""Relevance scorers for sentence-to-code-line tracing.

The built-in scorer is BM25 over a tokenization shared by queries and code
lines: identifiers are indexed whole and split into sub-tokens at
underscores, '::', '.', digit joints and camelCase boundaries, so natural
language like "bounds check in name_len()" can reach code like
"bounds_check_name_len(...)".  External scorers attach through the plugin
protocol (see plugins.py).
"""

from __future__ import annotations

import math
import re
from collections import Counter
from typing import Protocol, Sequence

from .patterns import normalize_word

_RAW_TOKEN_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*|\d+(?:\.\d+)*")

_CAMEL_RE = re.compile(r"[A-Z]+(?=[A-Z][a-z0-9])|[A-Z]?[a-z]+|[A-Z]+|\d+")


def code_tokens(text: str) -> list[str]:
    """Tokens for BM25: whole identifiers plus their normalized sub-tokens.

    '::' and '.' never survive the raw scan, so qualified names split for
    free; underscores and camel humps are split explicitly.
    """
    out: list[str] = []
    for raw in _RAW_TOKEN_RE.findall(text):
        if raw[0].isdigit():
            out.append(raw)
            continue
        whole = raw.lower()
        out.append(whole)
        subs: list[str] = []
        for piece in raw.split("_"):
            subs.extend(_CAMEL_RE.findall(piece))
        if len(subs) > 1:
            out.extend(normalize_word(s) for s in subs)
        elif subs:
            norm = normalize_word(subs[0])
            if norm != whole:
                out.append(norm)
    return out


class Scorer(Protocol):
    def score_pool(self, query: str, pool_contents: Sequence[str]) -> list[float]:
        """Relevance of each pool entry to the query; higher is better."""
        ...

    def close(self) -> None: ...


class LexicalScorer:
    """BM25 (k1=1.2, b=0.75) where the document collection is the candidate pool."""

    k1 = 1.2
    b = 0.75

    def score_pool(self, query: str, pool_contents: Sequence[str]) -> list[float]:
        docs = [code_tokens(c) for c in pool_contents]
        n_docs = len(docs)
        if n_docs == 0:
            return []
        avgdl = sum(len(d) for d in docs) / n_docs
        df: Counter[str] = Counter()
        for doc in docs:
            df.update(set(doc))
        query_terms = sorted(set(code_tokens(query)))
        scores: list[float] = []
        for doc in docs:
            tf = Counter(doc)
            dl = len(doc)
            score = 0.0
            for term in query_terms:
                f = tf.get(term, 0)
                if not f:
                    continue
                idf = math.log(1.0 + (n_docs - df[term] + 0.5) / (df[term] + 0.5))
                denom = f + self.k1 * (1.0 - self.b + self.b * dl / avgdl) if avgdl else f + self.k1
                score += idf * f * (self.k1 + 1.0) / denom
            scores.append(score)
        return scores

    def close(self) -> None:
        pass


def score(scorer: Scorer, query_text: str, candidate_content: str) -> float:
    """Single-candidate convenience wrapper over the pool interface."""
    return scorer.score_pool(query_text, [candidate_content])[0]

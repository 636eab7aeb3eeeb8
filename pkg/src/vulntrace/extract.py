"""Sentence classification into VT/AF/CP.

Two classifier families share one feature view of a sentence:

* the heuristic rule: positive iff any catalog pattern of the entity matches;
* a linear max-margin classifier trained from scratch on sparse binary
  features (word 1/2/3-grams plus one boolean per pattern of the entity),
  with the penalty parameter chosen on a deterministic tuning split from a
  20-value evenly spaced grid over [0.001, 100].

Training is fully deterministic: instances are visited in a canonical order
regardless of how the caller shuffled them.
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .corpus import Sentence
from .errors import DegenerateTraining, ModelMismatch, VulnTraceError
from .patterns import PUNCT, PatternCatalog, match_pattern

ENTITIES = ("VT", "AF", "CP")

C_GRID_SIZE = 20
C_GRID_LOW = 0.001
C_GRID_HIGH = 100.0


def c_grid() -> list[float]:
    """The 20 evenly spaced penalty values over [0.001, 100].

    Endpoints are pinned exactly; float accumulation must not drift them.
    """
    step = (C_GRID_HIGH - C_GRID_LOW) / (C_GRID_SIZE - 1)
    grid = [C_GRID_LOW + i * step for i in range(C_GRID_SIZE)]
    grid[0] = C_GRID_LOW
    grid[-1] = C_GRID_HIGH
    return grid


def heuristic_classify(catalog: PatternCatalog, sentence: Sentence, entity: str) -> bool:
    """True iff at least one pattern of ``entity`` applies to the sentence."""
    for pattern in catalog.by_entity(entity):
        if match_pattern(pattern, sentence.tokens, catalog.lexicons) is not None:
            return True
    return False


def matched_pattern_codes(catalog: PatternCatalog, sentence: Sentence) -> list[str]:
    return [
        p.code
        for p in catalog.patterns
        if match_pattern(p, sentence.tokens, catalog.lexicons) is not None
    ]


def sentence_grams(sentence: Sentence) -> set[str]:
    """All 1/2/3-grams over the norms of the sentence's non-punct tokens."""
    norms = [t.norm for t in sentence.tokens if t.kind != PUNCT]
    grams: set[str] = set()
    for n in (1, 2, 3):
        for i in range(len(norms) - n + 1):
            grams.add(" ".join(norms[i : i + n]))
    return grams


@dataclass(frozen=True)
class Vocabulary:
    grams: Mapping[str, int]  # gram -> id, ids dense in [0, len)
    fingerprint: str

    def __len__(self) -> int:
        return len(self.grams)


def build_vocab(train_sentences: Sequence[Sentence]) -> Vocabulary:
    """N-gram vocabulary over the training sentences, ids in lexicographic order."""
    if not train_sentences:
        raise VulnTraceError("cannot build a vocabulary from an empty training set")
    grams: set[str] = set()
    for sentence in train_sentences:
        grams |= sentence_grams(sentence)
    ordered = sorted(grams)
    mapping = {g: i for i, g in enumerate(ordered)}
    digest = hashlib.sha256("\x1f".join(ordered).encode("utf-8")).hexdigest()
    return Vocabulary(grams=mapping, fingerprint=digest)


@dataclass(frozen=True)
class FeatureVector:
    """Sparse binary vector: sorted feature ids whose value is 1."""

    indices: tuple[int, ...]


def feature_space_size(vocab: Vocabulary, catalog: PatternCatalog, entity: str) -> int:
    return len(vocab) + len(catalog.by_entity(entity))


def extract_features(
    sentence: Sentence,
    catalog: PatternCatalog,
    vocab: Vocabulary,
    entity: str,
    *,
    ngrams: bool = True,
    patterns: bool = True,
) -> FeatureVector:
    """Binary n-gram presence block followed by one bit per entity pattern.

    Feature ids are stable for a fixed (vocab, catalog) regardless of the
    enabled blocks; disabling a block just leaves its bits unset.
    """
    ids: list[int] = []
    if ngrams:
        grams = sentence_grams(sentence)
        ids.extend(vocab.grams[g] for g in grams if g in vocab.grams)
    if patterns:
        base = len(vocab)
        for offset, pattern in enumerate(catalog.by_entity(entity)):
            if match_pattern(pattern, sentence.tokens, catalog.lexicons) is not None:
                ids.append(base + offset)
    return FeatureVector(indices=tuple(sorted(ids)))


@dataclass
class ExtractionMetrics:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if (self.tp + self.fp) else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if (self.tp + self.fn) else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if (p + r) else 0.0


def evaluate_extraction(
    predictions: Mapping[str, bool], gold: Mapping[str, bool], entity: str = ""
) -> ExtractionMetrics:
    if set(predictions) != set(gold):
        missing = set(gold) ^ set(predictions)
        raise VulnTraceError(
            f"prediction/gold key mismatch for {entity or 'entity'}: {sorted(missing)[:5]}"
        )
    tp = fp = fn = tn = 0
    for key, predicted in predictions.items():
        actual = gold[key]
        if predicted and actual:
            tp += 1
        elif predicted and not actual:
            fp += 1
        elif not predicted and actual:
            fn += 1
        else:
            tn += 1
    return ExtractionMetrics(tp=tp, fp=fp, fn=fn, tn=tn)


@dataclass
class LinearModel:
    entity: str
    weights: np.ndarray  # dense over the feature space
    bias: float
    c: float
    vocab_fingerprint: str
    catalog_fingerprint: str
    ngrams: bool
    patterns: bool

    def margin(self, features: FeatureVector) -> float:
        ids = list(features.indices)
        return float(self.weights[ids].sum()) + self.bias if ids else self.bias

    def to_json(self) -> dict:
        sparse = {
            str(i): float(w) for i, w in enumerate(self.weights) if w != 0.0
        }
        return {
            "entity": self.entity,
            "c": self.c,
            "bias": self.bias,
            "weights": sparse,
            "dim": int(self.weights.shape[0]),
            "vocab_fingerprint": self.vocab_fingerprint,
            "catalog_fingerprint": self.catalog_fingerprint,
            "features": {"ngrams": self.ngrams, "patterns": self.patterns},
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "LinearModel":
        weights = np.zeros(int(doc["dim"]), dtype=np.float64)
        for key, value in doc["weights"].items():
            weights[int(key)] = float(value)
        return cls(
            entity=doc["entity"],
            weights=weights,
            bias=float(doc["bias"]),
            c=float(doc["c"]),
            vocab_fingerprint=doc["vocab_fingerprint"],
            catalog_fingerprint=doc["catalog_fingerprint"],
            ngrams=bool(doc["features"]["ngrams"]),
            patterns=bool(doc["features"]["patterns"]),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.to_json(), sort_keys=True, indent=2) + "\n",
            encoding="utf-8",
        )

    @classmethod
    def load(cls, path: str | Path) -> "LinearModel":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def _canonical_order(examples: Sequence[tuple[Sentence, bool]]) -> list[tuple[Sentence, bool]]:
    return sorted(examples, key=lambda e: (e[0].cve_id, e[0].artifact_kind, e[0].index))


def _dual_cd(
    xs: Sequence[tuple[int, ...]],
    ys: Sequence[int],
    c: float,
    dim: int,
    max_passes: int = 1000,
    tol: float = 1e-8,
    alpha0: Sequence[float] | None = None,
) -> tuple[np.ndarray, float, list[float]]:
    """L2-regularized hinge loss via dual coordinate descent.

    The bias enters as a constant augmented feature (index ``dim``); instances
    are visited in their given order every pass.  Iteration stops after the
    pass budget or once a full pass improves the dual objective by less than
    ``tol`` — the objective is monotone under coordinate ascent, so a stalled
    pass means coordinates are pinned at their box bounds.  ``alpha0`` warm
    starts the solver (clipped into the new box), which keeps a C-grid sweep
    cheap.  Everything here is deterministic.
    """
    w = [0.0] * (dim + 1)
    if alpha0 is None:
        alpha = [0.0] * len(xs)
    else:
        alpha = [min(max(a, 0.0), c) for a in alpha0]
        for i, x in enumerate(xs):
            if alpha[i]:
                step = alpha[i] * ys[i]
                for j in x:
                    w[j] += step
                w[dim] += step
    q_diag = [len(x) + 1.0 for x in xs]

    # Active-set shrinking: coordinates pinned at a bound with a strongly
    # unfavorable projected gradient sit out until a final verification pass
    # over everything confirms convergence.
    active = list(range(len(xs)))
    inf = float("inf")
    pg_max_prev, pg_min_prev = inf, -inf
    for _ in range(max_passes):
        gain = 0.0
        pg_max, pg_min = -inf, inf
        kept: list[int] = []
        for i in active:
            x = xs[i]
            wx = w[dim]
            for j in x:
                wx += w[j]
            g = ys[i] * wx - 1.0
            a = alpha[i]
            if a == 0.0:
                if g > pg_max_prev:
                    continue  # shrink: stays feasible and unattractive
                pg = g if g < 0.0 else 0.0
            elif a == c:
                if g < pg_min_prev:
                    continue
                pg = g if g > 0.0 else 0.0
            else:
                pg = g
            kept.append(i)
            if pg > pg_max:
                pg_max = pg
            if pg < pg_min:
                pg_min = pg
            if pg == 0.0:
                continue
            new_alpha = a - g / q_diag[i]
            if new_alpha < 0.0:
                new_alpha = 0.0
            elif new_alpha > c:
                new_alpha = c
            delta = new_alpha - a
            if delta != 0.0:
                step = delta * ys[i]
                for j in x:
                    w[j] += step
                w[dim] += step
                alpha[i] = new_alpha
                # exact dual-objective increase of this coordinate move
                gain += -g * delta - 0.5 * q_diag[i] * delta * delta
        active = kept
        if gain < tol:
            if len(active) == len(xs):
                break
            # unshrink and verify against the full instance set
            active = list(range(len(xs)))
            pg_max_prev, pg_min_prev = inf, -inf
            continue
        pg_max_prev = pg_max if pg_max > 0.0 else inf
        pg_min_prev = pg_min if pg_min < 0.0 else -inf
    return np.asarray(w[:dim], dtype=np.float64), float(w[dim]), alpha


def _tuning_split(
    examples: Sequence[tuple[Sentence, bool]], entity: str
) -> tuple[list[tuple[Sentence, bool]], list[tuple[Sentence, bool]]]:
    """Deterministic stratified 80/20 split, seeded by the entity name."""
    seed = int.from_bytes(hashlib.sha256(entity.encode("utf-8")).digest()[:8], "big")
    rng = random.Random(seed)
    train: list[tuple[Sentence, bool]] = []
    tune: list[tuple[Sentence, bool]] = []
    for label in (True, False):
        bucket = [e for e in examples if e[1] is label]
        order = list(range(len(bucket)))
        rng.shuffle(order)
        n_tune = len(bucket) // 5
        if len(bucket) - n_tune < 1:
            n_tune = 0  # keep at least one instance of the class in training
        tune_ids = set(order[:n_tune])
        for idx, example in enumerate(bucket):
            (tune if idx in tune_ids else train).append(example)
    return _canonical_order(train), _canonical_order(tune)


def train_linear(
    train_set: Sequence[tuple[Sentence, bool]],
    entity: str,
    *,
    catalog: PatternCatalog,
    vocab: Vocabulary,
    ngrams: bool = True,
    patterns: bool = True,
) -> LinearModel:
    """Fit the linear classifier, selecting C by F1 on the tuning split.

    Raises DegenerateTraining when the training data holds only one class --
    callers typically record the fold as 0.00 or fall back to the heuristic.
    """
    examples = _canonical_order(train_set)
    n_pos = sum(1 for _, label in examples if label)
    if n_pos == 0 or n_pos == len(examples):
        raise DegenerateTraining(
            f"{entity}: training data has "
            f"{'no positive' if n_pos == 0 else 'no negative'} instances"
        )

    dim = feature_space_size(vocab, catalog, entity)
    feats: dict[Sentence, tuple[int, ...]] = {}
    for sentence, _ in examples:
        if sentence not in feats:
            feats[sentence] = extract_features(
                sentence, catalog, vocab, entity, ngrams=ngrams, patterns=patterns
            ).indices

    fit_part, tune_part = _tuning_split(examples, entity)
    grid_xs = [feats[s] for s, _ in fit_part]
    grid_ys = [1 if label else -1 for _, label in fit_part]
    best_c = None
    best_f1 = -1.0
    alpha: list[float] | None = None  # warm start along the ascending grid
    for c in c_grid():
        if tune_part and fit_part:
            w, b, alpha = _dual_cd(grid_xs, grid_ys, c, dim, alpha0=alpha)
            preds = {}
            gold = {}
            for j, (sentence, label) in enumerate(tune_part):
                ids = list(feats[sentence])
                margin = (float(w[ids].sum()) if ids else 0.0) + b
                preds[str(j)] = margin > 0
                gold[str(j)] = label
            f1 = evaluate_extraction(preds, gold, entity).f1
        else:
            f1 = 0.0
        if f1 > best_f1:  # ties keep the earlier (smaller) C
            best_f1 = f1
            best_c = c
    assert best_c is not None

    weights, bias, _ = _dual_cd(
        [feats[s] for s, _ in examples],
        [1 if label else -1 for _, label in examples],
        best_c,
        dim,
    )
    return LinearModel(
        entity=entity,
        weights=weights,
        bias=bias,
        c=best_c,
        vocab_fingerprint=vocab.fingerprint,
        catalog_fingerprint=catalog.fingerprint(),
        ngrams=ngrams,
        patterns=patterns,
    )


def predict(
    model: LinearModel,
    sentence: Sentence,
    catalog: PatternCatalog,
    vocab: Vocabulary,
) -> bool:
    """Decision of the trained classifier; a margin of exactly 0 is negative."""
    if model.vocab_fingerprint != vocab.fingerprint:
        raise ModelMismatch("model was trained on a different vocabulary")
    if model.catalog_fingerprint != catalog.fingerprint():
        raise ModelMismatch("model was trained on a different pattern catalog")
    features = extract_features(
        sentence, catalog, vocab, model.entity, ngrams=model.ngrams, patterns=model.patterns
    )
    return model.margin(features) > 0

"""Quality (P@M, R@M, F1@M) and diversity metrics for keyphrase lists.

Diversity metrics are computed on raw predictions per record; quality uses
stemmed, deduplicated keyphrases. Corpus values are unweighted means over
records.
"""

from __future__ import annotations

import hashlib
import math
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from itertools import combinations
from typing import Callable, Protocol, Sequence

import numpy as np
from nltk.stem.porter import PorterStemmer

from .errors import DataError

Keyphrase = Sequence[str]

METRIC_NAMES = ("precision_at_m", "recall_at_m", "f1_at_m", "num_kps", "dup_kp_pct",
                "dup_token_pct", "self_bleu", "edit_dist", "emb_sim")

_porter = PorterStemmer(mode=PorterStemmer.ORIGINAL_ALGORITHM)


@lru_cache(maxsize=65536)
def stem(token: str) -> str:
    """Porter stem of a lowercase token; non-ASCII tokens pass through."""
    if not token or not token.isascii():
        return token
    return _porter.stem(token, to_lowercase=False)


def _stemmed_set(kps: Sequence[Keyphrase], stemmer: Callable[[str], str]) -> list[tuple[str, ...]]:
    seen, out = set(), []
    for kp in kps:
        key = tuple(stemmer(t) for t in kp)
        if key and key not in seen:
            seen.add(key)
            out.append(key)
    return out


def quality(pred: Sequence[Keyphrase], gold: Sequence[Keyphrase],
            stemmer: Callable[[str], str] = stem) -> tuple[float, float, float]:
    """(P@M, R@M, F1@M) for one record, M being the number of predictions."""
    p = _stemmed_set(pred, stemmer)
    g = _stemmed_set(gold, stemmer)
    if not p or not g:
        return 0.0, 0.0, 0.0
    gold_set = set(g)
    matches = sum(1 for kp in p if kp in gold_set)
    precision = matches / len(p)
    recall = matches / len(g)
    if precision + recall == 0:
        return precision, recall, 0.0
    return precision, recall, 2 * precision * recall / (precision + recall)


def dup_kp_pct(kps: Sequence[Keyphrase]) -> float:
    if not kps:
        return 0.0
    unique = len({tuple(k) for k in kps})
    return (1 - unique / len(kps)) * 100


def dup_token_pct(kps: Sequence[Keyphrase]) -> float:
    tokens = [t for kp in kps for t in kp]
    if not tokens:
        return 0.0
    return (1 - len(set(tokens)) / len(tokens)) * 100


# Self-BLEU -------------------------------------------------------------------

BLEU_MAX_ORDER = 4
BLEU_SMOOTH = 1e-9


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidate: Keyphrase, references: Sequence[Keyphrase]) -> float:
    """Sentence BLEU in [0, 1] with orders up to min(4, len(candidate)),
    uniform weights, 1e-9 floor on zero precisions and a brevity penalty
    against the closest reference length (shorter wins ties)."""
    c = len(candidate)
    if c == 0 or not references:
        return 0.0
    max_order = min(BLEU_MAX_ORDER, c)
    logs = []
    for n in range(1, max_order + 1):
        cand = _ngrams(candidate, n)
        best: Counter = Counter()
        for ref in references:
            best |= _ngrams(ref, n)
        clipped = sum(min(cnt, best[g]) for g, cnt in cand.items())
        p = float(Fraction(clipped, sum(cand.values())))
        logs.append(math.log(p if p > 0 else BLEU_SMOOTH))
    r = min((len(ref) for ref in references), key=lambda n: (abs(n - c), n))
    bp = 1.0 if c > r else math.exp(1 - r / c)
    return bp * math.exp(math.fsum(logs) / max_order)


def self_bleu(kps: Sequence[Keyphrase]) -> float:
    """Mean BLEU of each keyphrase against all others, times 100."""
    if len(kps) < 2:
        return 0.0
    scores = [bleu(kp, [o for j, o in enumerate(kps) if j != i]) for i, kp in enumerate(kps)]
    return math.fsum(scores) / len(scores) * 100


# edit distance -------------------------------------------------------------

def levenshtein(a: str, b: str) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def string_similarity(a: str, b: str) -> float:
    """100 * (1 - lev(a, b) / max(|a|, |b|)); two empty strings score 100."""
    longest = max(len(a), len(b))
    if longest == 0:
        return 100.0
    return 100.0 * (1 - levenshtein(a, b) / longest)


def edit_dist(kps: Sequence[Keyphrase]) -> float:
    if len(kps) < 2:
        return 0.0
    strings = [" ".join(k) for k in kps]
    sims = [string_similarity(a, b) for a, b in combinations(strings, 2)]
    return math.fsum(sims) / len(sims)


# embedding similarity --------------------------------------------------------

class Embedder(Protocol):
    def __call__(self, keyphrase: Keyphrase) -> np.ndarray: ...


class TokenMeanEmbedder:
    """Mean of per-token vectors; tokens without a vector are skipped and a
    keyphrase with no known token maps to the zero vector."""

    def __init__(self, vectors: dict[str, np.ndarray], dim: int | None = None):
        if dim is None:
            if not vectors:
                raise DataError("cannot infer width of an empty vector table")
            dim = len(next(iter(vectors.values())))
        for tok, vec in vectors.items():
            if len(vec) != dim:
                raise DataError(f"vector for {tok!r} has width {len(vec)}, expected {dim}")
        self.vectors = {t: np.asarray(v, dtype=np.float64) for t, v in vectors.items()}
        self.dim = dim

    def __call__(self, keyphrase: Keyphrase) -> np.ndarray:
        found = [self.vectors[t] for t in keyphrase if t in self.vectors]
        if not found:
            return np.zeros(self.dim)
        return np.mean(found, axis=0)

    @classmethod
    def from_file(cls, path) -> "TokenMeanEmbedder":
        """Read ``token v1 ... vd`` lines (UTF-8)."""
        vectors: dict[str, np.ndarray] = {}
        dim = None
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                parts = line.rstrip("\n").split(" ")
                if len(parts) < 2:
                    continue
                try:
                    vec = np.array([float(x) for x in parts[1:]])
                except ValueError as exc:
                    raise DataError(f"{path}:{lineno}: bad number") from exc
                if dim is None:
                    dim = len(vec)
                elif len(vec) != dim:
                    raise DataError(f"{path}:{lineno}: width {len(vec)} != {dim}")
                vectors[parts[0]] = vec
        return cls(vectors, dim)


class HashingEmbedder:
    """Deterministic pseudo-random unit vector per token, averaged.

    Used when neither a trained model nor a vector file is available: two
    keyphrases are similar exactly to the extent they share tokens.
    """

    def __init__(self, dim: int = 64):
        self.dim = dim

    @lru_cache(maxsize=65536)
    def token_vector(self, token: str) -> np.ndarray:
        seed = int.from_bytes(hashlib.sha256(token.encode("utf-8")).digest()[:8], "little")
        v = np.random.default_rng(seed).standard_normal(self.dim)
        return v / np.linalg.norm(v)

    def __call__(self, keyphrase: Keyphrase) -> np.ndarray:
        if not keyphrase:
            return np.zeros(self.dim)
        return np.mean([self.token_vector(t) for t in keyphrase], axis=0)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


def emb_sim(kps: Sequence[Keyphrase], embedder: Embedder) -> float:
    """Mean pairwise cosine over keyphrases with nonzero embeddings."""
    vecs = [v for v in (np.asarray(embedder(k), dtype=np.float64) for k in kps) if np.any(v)]
    if len(vecs) < 2:
        return 0.0
    sims = [cosine(a, b) for a, b in combinations(vecs, 2)]
    return math.fsum(sims) / len(sims)


# reports -------------------------------------------------------------------

@dataclass
class MetricsReport:
    per_record: dict[str, list[float]] = field(default_factory=dict)
    means: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"n_records": len(next(iter(self.per_record.values()), [])),
                "means": self.means, "per_record": self.per_record}


def record_metrics(pred: Sequence[Keyphrase], gold: Sequence[Keyphrase],
                   embedder: Embedder, stemmer: Callable[[str], str] = stem) -> dict[str, float]:
    p, r, f = quality(pred, gold, stemmer)
    return {
        "precision_at_m": p,
        "recall_at_m": r,
        "f1_at_m": f,
        "num_kps": float(len(pred)),
        "dup_kp_pct": dup_kp_pct(pred),
        "dup_token_pct": dup_token_pct(pred),
        "self_bleu": self_bleu(pred),
        "edit_dist": edit_dist(pred),
        "emb_sim": emb_sim(pred, embedder),
    }


def evaluate(preds: Sequence[Sequence[Keyphrase]], golds: Sequence[Sequence[Keyphrase]],
             embedder: Embedder | None = None, stemmer: Callable[[str], str] = stem) -> MetricsReport:
    if len(preds) != len(golds):
        raise DataError(f"{len(preds)} predictions but {len(golds)} gold records")
    embedder = embedder or HashingEmbedder()
    report = MetricsReport({name: [] for name in METRIC_NAMES})
    for pred, gold in zip(preds, golds):
        for name, value in record_metrics(pred, gold, embedder, stemmer).items():
            report.per_record[name].append(value)
    report.means = {name: (math.fsum(vals) / len(vals) if vals else 0.0)
                    for name, vals in report.per_record.items()}
    return report


def mean_f1(preds: Sequence[Sequence[Keyphrase]], golds: Sequence[Sequence[Keyphrase]]) -> float:
    """Corpus F1@M alone (no diversity metrics), for validation."""
    if len(preds) != len(golds):
        raise DataError("misaligned predictions and gold")
    if not preds:
        return 0.0
    return math.fsum(quality(p, g)[2] for p, g in zip(preds, golds)) / len(preds)

"""Examples, tokenization, vocabularies, target linearization and JSONL I/O.

Also contains a seeded generator of synthetic title/abstract/keyphrase
documents used for desk-scale experiments.
"""

from __future__ import annotations

import json
import logging
import os
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

PAD, UNK, BOS, EOS, SEP = "<pad>", "<unk>", "<bos>", "<eos>", "<sep>"
RESERVED = (PAD, UNK, BOS, EOS, SEP)
PAD_ID, UNK_ID, BOS_ID, EOS_ID, SEP_ID = range(5)
SPECIAL_IDS = frozenset(range(5))
DIGIT = "<digit>"

_TOKEN_RE = re.compile(r"<digit>|\d+|[^\W\d_]+")


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace and punctuation, and map every digit
    run to ``<digit>``.

    >>> tokenize("top-200 beams")
    ['top', '<digit>', 'beams']
    """
    return [DIGIT if tok[0].isdigit() else tok for tok in _TOKEN_RE.findall(text.lower())]


@dataclass(frozen=True)
class Example:
    title: tuple[str, ...]
    abstract: tuple[str, ...]
    keyphrases: tuple[tuple[str, ...], ...]

    @property
    def source(self) -> tuple[str, ...]:
        return self.title + self.abstract

    @classmethod
    def from_json(cls, obj: dict) -> "Example":
        try:
            title, abstract = obj["title"], obj["abstract"]
            kps = obj.get("keyphrases", [])
        except (KeyError, TypeError, AttributeError) as exc:
            raise DataError(f"record is missing field {exc}") from exc
        if not isinstance(title, str) or not isinstance(abstract, str):
            raise DataError("title and abstract must be strings")
        if not isinstance(kps, list) or not all(isinstance(k, str) for k in kps):
            raise DataError("keyphrases must be a list of strings")
        phrases = tuple(t for t in (tuple(tokenize(k)) for k in kps) if t)
        return cls(tuple(tokenize(title)), tuple(tokenize(abstract)), phrases)

    @classmethod
    def from_tokens(cls, title: Sequence[str], abstract: Sequence[str],
                    keyphrases: Iterable[Sequence[str]]) -> "Example":
        return cls(tuple(title), tuple(abstract), tuple(tuple(k) for k in keyphrases if len(k)))

    def to_json(self) -> dict:
        return {
            "title": " ".join(self.title),
            "abstract": " ".join(self.abstract),
            "keyphrases": [" ".join(k) for k in self.keyphrases],
        }


def read_jsonl(path: str | os.PathLike) -> list[Example]:
    examples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            try:
                examples.append(Example.from_json(obj))
            except DataError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    return examples


def write_jsonl(path: str | os.PathLike, examples: Iterable[Example]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_json(), ensure_ascii=False) + "\n")


class Vocabulary:
    """Frozen token <-> id map with the reserved ids 0..4 always present."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:5]) != RESERVED:
            raise DataError("vocabulary must start with the reserved tokens")
        self._itos = tokens
        self._stoi = {t: i for i, t in enumerate(tokens)}
        if len(self._stoi) != len(tokens):
            raise DataError("duplicate token in vocabulary")

    def __len__(self) -> int:
        return len(self._itos)

    def __contains__(self, token: str) -> bool:
        return token in self._stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self._itos == other._itos

    def id(self, token: str) -> int:
        return self._stoi.get(token, UNK_ID)

    def ids(self, tokens: Iterable[str]) -> list[int]:
        return [self.id(t) for t in tokens]

    def token(self, idx: int) -> str:
        return self._itos[idx]

    @property
    def tokens(self) -> list[str]:
        return list(self._itos)


def build_vocab(sequences: Iterable[Sequence[str]], cap: int) -> Vocabulary:
    """Keep the ``cap - 5`` most frequent tokens; ties go to the lexicographically
    smaller token."""
    if cap <= len(RESERVED):
        raise ConfigError(f"vocabulary cap must exceed {len(RESERVED)}")
    counts = Counter(t for seq in sequences for t in seq if t not in RESERVED)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary(list(RESERVED) + [t for t, _ in ranked[:cap - len(RESERVED)]])


def source_sequences(examples: Iterable[Example]) -> Iterator[tuple[str, ...]]:
    for ex in examples:
        yield ex.source


def keyphrase_sequences(examples: Iterable[Example]) -> Iterator[tuple[str, ...]]:
    for ex in examples:
        yield from ex.keyphrases


def find_span(haystack: Sequence[str], needle: Sequence[str]) -> int:
    """Start of the first contiguous occurrence of ``needle``, or -1."""
    n = len(needle)
    for i in range(len(haystack) - n + 1):
        if tuple(haystack[i:i + n]) == tuple(needle):
            return i
    return -1


def order_keyphrases(source: Sequence[str], keyphrases: Sequence[Sequence[str]]) -> list[tuple[str, ...]]:
    """Present keyphrases by first occurrence, then absent ones in given order."""
    present, absent = [], []
    for idx, kp in enumerate(keyphrases):
        pos = find_span(source, kp)
        if pos >= 0:
            present.append((pos, idx, tuple(kp)))
        else:
            absent.append(tuple(kp))
    present.sort()
    return [kp for _, _, kp in present] + absent


@dataclass
class LinearizedExample:
    source_tokens: list[str]
    source_ids: list[int]
    copy_ids: list[int]
    ext_tokens: list[str]
    target_ids: list[int]
    keyphrases: list[tuple[str, ...]]
    tgt_vocab_size: int

    @property
    def gold(self) -> list[int]:
        """Target positions y_1..y_L (everything after BOS)."""
        return self.target_ids[1:]

    @property
    def copyable(self) -> frozenset[int]:
        return frozenset(self.copy_ids)

    def token_of(self, idx: int, tgt_vocab: Vocabulary) -> str:
        if idx < self.tgt_vocab_size:
            return tgt_vocab.token(idx)
        return self.ext_tokens[idx - self.tgt_vocab_size]


def linearize(example: Example, src_vocab: Vocabulary, tgt_vocab: Vocabulary,
              max_src_len: int | None = None, require_keyphrases: bool = True) -> LinearizedExample:
    """Map an example to ids: source, copy map, extended vocabulary and the
    SEP-joined target framed by BOS/EOS.

    With ``require_keyphrases=False`` an example without keyphrases gets the
    target ``[BOS, EOS]`` (used when only the source matters, e.g. generation).
    """
    if require_keyphrases and not example.keyphrases:
        raise DataError("example has no keyphrases")
    source = list(example.source[:max_src_len] if max_src_len else example.source)
    if not source:
        raise DataError("example has an empty source")
    n_tgt = len(tgt_vocab)
    ext: dict[str, int] = {}
    copy_ids = []
    for tok in source:
        if tok in tgt_vocab:
            copy_ids.append(tgt_vocab.id(tok))
        else:
            if tok not in ext:
                ext[tok] = n_tgt + len(ext)
            copy_ids.append(ext[tok])

    def target_id(tok: str) -> int:
        if tok in tgt_vocab:
            return tgt_vocab.id(tok)
        return ext.get(tok, UNK_ID)

    ordered = order_keyphrases(source, example.keyphrases)
    target = [BOS_ID]
    for j, kp in enumerate(ordered):
        if j:
            target.append(SEP_ID)
        target.extend(target_id(t) for t in kp)
    target.append(EOS_ID)
    return LinearizedExample(
        source_tokens=source,
        source_ids=src_vocab.ids(source),
        copy_ids=copy_ids,
        ext_tokens=list(ext),
        target_ids=target,
        keyphrases=ordered,
        tgt_vocab_size=n_tgt,
    )


def split_on_sep(ids: Sequence[int]) -> list[list[int]]:
    """Split an id sequence on SEP, dropping BOS/PAD, stopping at EOS and
    discarding empty segments."""
    out, cur = [], []
    for i in ids:
        if i == EOS_ID:
            break
        if i in (BOS_ID, PAD_ID):
            continue
        if i == SEP_ID:
            if cur:
                out.append(cur)
            cur = []
        else:
            cur.append(i)
    if cur:
        out.append(cur)
    return out


def delinearize(lin: LinearizedExample, tgt_vocab: Vocabulary) -> list[tuple[str, ...]]:
    return [tuple(lin.token_of(i, tgt_vocab) for i in seg) for seg in split_on_sep(lin.target_ids)]


# synthetic corpus ----------------------------------------------------------

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"

_TITLE_TEMPLATES = (
    "{0} for {1}",
    "on {0} and {1}",
    "towards {0} with {1}",
    "{0} meets {1}",
)
_SENTENCE_TEMPLATES = (
    "we study {} in this paper .",
    "a novel {} approach is proposed .",
    "the {} problem is important .",
    "results show that {} improves performance .",
    "experiments on {} confirm the analysis .",
    "we also discuss {} .",
    "our method relies on {} .",
)
_FILLER_SENTENCES = (
    "the proposed method is efficient .",
    "we evaluate on {n} datasets .",
    "this work extends prior results .",
    "code and data are released .",
)


@dataclass
class CorpusConfig:
    src_vocab_cap: int = 5000
    tgt_vocab_cap: int = 2000
    max_src_len: int = 200
    max_tgt_len: int = 60
    n_topics: int = 8
    words_per_topic: int = 12
    phrases_per_topic: int = 10
    min_phrases: int = 2
    max_phrases: int = 6
    absent_prob: float = 0.3
    max_absent: int = 2
    filler_prob: float = 0.3
    n_train: int = 200
    n_valid: int = 50
    n_test: int = 50
    seed: int = 7

    def validate(self) -> None:
        positive = ("src_vocab_cap", "tgt_vocab_cap", "max_src_len", "max_tgt_len", "n_topics",
                    "words_per_topic", "phrases_per_topic", "min_phrases", "max_phrases")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"corpus.{name} must be positive")
        for name in ("n_train", "n_valid", "n_test", "max_absent"):
            if getattr(self, name) < 0:
                raise ConfigError(f"corpus.{name} must be non-negative")
        if self.n_train + self.n_valid + self.n_test == 0:
            raise ConfigError("corpus needs at least one example")
        if self.min_phrases > self.max_phrases:
            raise ConfigError("corpus.min_phrases exceeds corpus.max_phrases")
        if self.max_phrases > self.phrases_per_topic:
            raise ConfigError("corpus.max_phrases exceeds corpus.phrases_per_topic")
        if not (0.0 <= self.absent_prob <= 1.0 and 0.0 <= self.filler_prob <= 1.0):
            raise ConfigError("corpus probabilities must lie in [0, 1]")
        max_distinct = sum(self.words_per_topic ** n for n in (1, 2, 3))
        if self.phrases_per_topic > max_distinct:
            raise ConfigError("corpus.phrases_per_topic too large for corpus.words_per_topic")

    def expected_num_keyphrases(self) -> float:
        return (self.min_phrases + self.max_phrases) / 2 + self.max_absent * self.absent_prob


def _make_words(rng: np.random.Generator, n: int, taken: set[str]) -> list[str]:
    words = []
    while len(words) < n:
        syl = rng.integers(2, 4)
        w = "".join(_CONSONANTS[rng.integers(len(_CONSONANTS))] + _VOWELS[rng.integers(len(_VOWELS))]
                    for _ in range(syl))
        if w not in taken:
            taken.add(w)
            words.append(w)
    return words


@dataclass
class _Lexicon:
    topics: list[list[tuple[str, ...]]] = field(default_factory=list)
    synonyms: dict[tuple[str, ...], tuple[str, ...]] = field(default_factory=dict)


def _make_lexicon(cfg: CorpusConfig, rng: np.random.Generator) -> _Lexicon:
    taken = {w for t in _TITLE_TEMPLATES + _SENTENCE_TEMPLATES + _FILLER_SENTENCES for w in t.split()}
    lex = _Lexicon()
    for _ in range(cfg.n_topics):
        words = _make_words(rng, cfg.words_per_topic, taken)
        phrases: list[tuple[str, ...]] = []
        seen = set()
        while len(phrases) < cfg.phrases_per_topic:
            n = int(rng.integers(1, 4))
            picks = rng.choice(len(words), size=n, replace=n > len(words))
            phrase = tuple(words[i] for i in picks)
            if phrase in seen or len(set(phrase)) < len(phrase):
                continue
            seen.add(phrase)
            phrases.append(phrase)
        lex.topics.append(phrases)
    # synonyms use words that never occur in any source text
    syn_words = _make_words(rng, max(4, cfg.n_topics * cfg.phrases_per_topic // 2), taken)
    used = set()
    for phrases in lex.topics:
        for phrase in phrases:
            while True:
                n = int(rng.integers(1, 3))
                syn = tuple(syn_words[i] for i in rng.choice(len(syn_words), size=n, replace=False))
                if syn not in used:
                    break
            used.add(syn)
            lex.synonyms[phrase] = syn
    return lex


def _make_document(cfg: CorpusConfig, lex: _Lexicon, rng: np.random.Generator) -> Example:
    topic = lex.topics[int(rng.integers(len(lex.topics)))]
    n = int(rng.integers(cfg.min_phrases, cfg.max_phrases + 1))
    chosen = [topic[i] for i in rng.choice(len(topic), size=n, replace=False)]
    text = [" ".join(p) for p in chosen]
    if n >= 2:
        title = _TITLE_TEMPLATES[int(rng.integers(len(_TITLE_TEMPLATES)))].format(text[0], text[1])
    else:
        title = text[0]
    sentences = []
    for phrase in text:
        sentences.append(_SENTENCE_TEMPLATES[int(rng.integers(len(_SENTENCE_TEMPLATES)))].format(phrase))
        if rng.random() < cfg.filler_prob:
            filler = _FILLER_SENTENCES[int(rng.integers(len(_FILLER_SENTENCES)))]
            sentences.append(filler.format(n=int(rng.integers(2, 40))))
    absent = []
    for _ in range(cfg.max_absent):
        if rng.random() < cfg.absent_prob:
            options = [lex.synonyms[p] for p in chosen if lex.synonyms[p] not in absent]
            if options:
                absent.append(options[int(rng.integers(len(options)))])
    keyphrases = text + [" ".join(a) for a in absent]
    return Example.from_json({"title": title, "abstract": " ".join(sentences), "keyphrases": keyphrases})


def synth_corpus(cfg: CorpusConfig, out_dir: str | os.PathLike | None = None) -> dict[str, list[Example]]:
    """Generate train/valid/test splits; writes ``<split>.jsonl`` when
    ``out_dir`` is given. Same config and seed give byte-identical files."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    lex = _make_lexicon(cfg, rng)
    splits = {
        name: [_make_document(cfg, lex, rng) for _ in range(count)]
        for name, count in (("train", cfg.n_train), ("valid", cfg.n_valid), ("test", cfg.n_test))
    }
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        for name, examples in splits.items():
            write_jsonl(os.path.join(out_dir, f"{name}.jsonl"), examples)
        with open(os.path.join(out_dir, "corpus_config.json"), "w", encoding="utf-8") as fh:
            json.dump(asdict(cfg), fh, indent=2, sort_keys=True)
            fh.write("\n")
    return splits

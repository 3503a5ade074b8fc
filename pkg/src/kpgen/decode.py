"""Greedy decoding with the k=0 head and parsing of SEP-delimited output."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import model as M
from . import numerics as nx
from .corpus import (BOS_ID, EOS_ID, PAD_ID, SEP_ID, UNK_ID, LinearizedExample, Vocabulary,
                     split_on_sep)
from .numerics import Tensor

_NEVER_EMIT = (PAD_ID, BOS_ID)


@dataclass
class Prediction:
    keyphrases: list[tuple[str, ...]]
    raw_ids: list[int]
    step_probs: list[float] = field(default_factory=list)
    raw: str = ""


def parse_keyphrases(raw_ids: Sequence[int], tgt_vocab: Vocabulary,
                     ext_tokens: Sequence[str] = ()) -> list[tuple[str, ...]]:
    """Split on SEP, drop empty segments, map extended ids to source tokens."""
    V = len(tgt_vocab)

    def tok(i: int) -> str:
        return tgt_vocab.token(i) if i < V else ext_tokens[i - V]

    return [tuple(tok(i) for i in seg) for seg in split_on_sep(raw_ids)]


def serialize_keyphrases(keyphrases: Sequence[Sequence[str]], tgt_vocab: Vocabulary) -> list[int]:
    """Inverse of :func:`parse_keyphrases` for in-vocabulary keyphrases."""
    ids = [BOS_ID]
    for j, kp in enumerate(keyphrases):
        if j:
            ids.append(SEP_ID)
        ids.extend(tgt_vocab.id(t) for t in kp)
    ids.append(EOS_ID)
    return ids


def greedy_decode(params: M.Params, examples: list[LinearizedExample], tgt_vocab: Vocabulary,
                  max_len: int) -> list[Prediction]:
    """Decode a list of examples in one batch. Ties in the argmax go to the
    lowest id; PAD and BOS are never emitted."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    if not examples:
        return []
    P = M.as_tensors(params)
    dtype = P["tgt_emb"].dtype
    batch = M.make_batch(examples, dtype=dtype)
    V = batch.tgt_vocab_size
    B = batch.size
    H = M.encode(P, batch.src, batch.src_mask)
    w = M.LSTMWeights(P["dec.w_x"], P["dec.w_h"], P["dec.b"])
    d = P["dec.w_h"].shape[0]
    h = c = Tensor(np.zeros((B, d), dtype=dtype))
    prev = M.start_tokens(B)
    done = np.zeros(B, dtype=bool)
    raw = [[] for _ in range(B)]
    probs = [[] for _ in range(B)]
    banned = np.zeros(batch.ext_size, dtype=bool)
    banned[list(_NEVER_EMIT)] = True
    for _ in range(max_len):
        feed = np.where(prev >= V, UNK_ID, prev)
        e = nx.embedding(P["tgt_emb"], feed)
        h, c = nx.lstm_cell(e, h, c, w)
        s3, e3 = nx.reshape(h, (B, 1, d)), nx.reshape(e, (B, 1, -1))
        dist = M.heads(P, s3, e3, H, batch.src_mask, batch.copy_onehot, ks=[0]).mix[0].data[:, 0, :]
        choice = np.argmax(np.where(banned, -np.inf, dist), axis=-1)
        for b in range(B):
            if done[b]:
                continue
            raw[b].append(int(choice[b]))
            probs[b].append(float(dist[b, choice[b]]))
            if choice[b] == EOS_ID:
                done[b] = True
        if done.all():
            break
        prev = choice
    preds = []
    for b, ex in enumerate(examples):
        assert not any(i in _NEVER_EMIT for i in raw[b])
        kps = parse_keyphrases(raw[b], tgt_vocab, ex.ext_tokens)
        tokens = [ex.token_of(i, tgt_vocab) for i in raw[b]]
        preds.append(Prediction(kps, raw[b], probs[b], " ".join(tokens)))
    return preds


def decode_all(params: M.Params, examples: list[LinearizedExample], tgt_vocab: Vocabulary,
               max_len: int, batch_size: int = 64) -> list[Prediction]:
    out: list[Prediction] = []
    for i in range(0, len(examples), batch_size):
        out.extend(greedy_decode(params, examples[i:i + batch_size], tgt_vocab, max_len))
    return out

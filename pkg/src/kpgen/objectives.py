"""Likelihood and unlikelihood training losses.

Every loss is a sum over target positions for one sequence. Batched losses are
reduced either per sequence (sum over positions, mean over the batch) or per
token (sum over everything divided by the number of target tokens).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import numerics as nx
from .corpus import SPECIAL_IDS
from .errors import ConfigError, DataError
from .model import Batch, StepDistributions
from .numerics import PROB_EPS, Tensor

NORMALIZATIONS = ("sequence", "token")
GAMMA_RULES = ("inverse",)


def gamma(k: int) -> float:
    """Weight of the k-step-ahead terms: 1 / (k + 1)."""
    if k < 0:
        raise ValueError("k must be >= 0")
    return 1.0 / (k + 1)


@dataclass
class LossConfig:
    lambda_t: float = 15.0
    lambda_c: float = 18.0
    K: int = 2
    gamma_rule: str = "inverse"
    normalization: str = "sequence"

    def validate(self) -> None:
        if self.lambda_t < 0 or self.lambda_c < 0:
            raise ConfigError("unlikelihood weights must be >= 0")
        if self.K < 0:
            raise ConfigError("K must be >= 0")
        if self.gamma_rule not in GAMMA_RULES:
            raise ConfigError(f"unknown gamma rule {self.gamma_rule!r}")
        if gamma(0) != 1.0:
            raise ConfigError("gamma_0 must be 1.0")
        if self.normalization not in NORMALIZATIONS:
            raise ConfigError(f"normalization must be one of {NORMALIZATIONS}")


# candidates ----------------------------------------------------------------

@dataclass
class CandidateSets:
    """``target[t][k]`` / ``copy[t][k]`` are the negative candidates for
    predicting ``y[t + k]`` from position ``t`` (0-based). Offsets running past
    the end of the sequence are absent from the inner lists."""
    target: list[list[frozenset[int]]]
    copy: list[list[frozenset[int]]]


def build_candidates(gold: Sequence[int], copyable: Iterable[int], K: int) -> CandidateSets:
    """Prior gold tokens minus the token being predicted, specials removed.

    ``gold`` is y_1..y_L without BOS. Copy candidates are the target
    candidates that occur in the source (``copyable``).
    """
    gold = list(gold)
    copyable = frozenset(copyable)
    L = len(gold)
    prefix_sets = []
    seen: set[int] = set()
    for tok in gold:
        prefix_sets.append(frozenset(seen))
        if tok not in SPECIAL_IDS:
            seen.add(tok)
    target, copy = [], []
    for t in range(L):
        trow, crow = [], []
        for k in range(K + 1):
            j = t + k
            if j >= L:
                break
            cand = prefix_sets[j] - {gold[j]}
            trow.append(cand)
            crow.append(cand & copyable)
        target.append(trow)
        copy.append(crow)
    return CandidateSets(target, copy)


def candidate_masks(batch: Batch, K: int, dtype=np.float32) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Dense 0/1 candidate masks per head: target (B, L, V) and copy (B, L, X)."""
    B, L = batch.gold.shape
    V, X = batch.tgt_vocab_size, batch.ext_size
    tmasks = [np.zeros((B, L, V), dtype=dtype) for _ in range(K + 1)]
    cmasks = [np.zeros((B, L, X), dtype=dtype) for _ in range(K + 1)]
    for b in range(B):
        n = int(batch.lengths[b])
        src_len = int(batch.src_mask[b].sum())
        cands = build_candidates(batch.gold[b, :n], batch.copy_ids[b, :src_len], K)
        for t in range(n):
            for k, (tc, cc) in enumerate(zip(cands.target[t], cands.copy[t])):
                ids = [c for c in tc if c < V]
                if ids:
                    tmasks[k][b, t, ids] = 1
                if cc:
                    cmasks[k][b, t, list(cc)] = 1
    return tmasks, cmasks


def shifted_targets(batch: Batch, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Gold ids y_{t+k} for every position t, and the mask of valid (t, k)."""
    B, L = batch.gold.shape
    gold = np.zeros_like(batch.gold)
    mask = np.zeros_like(batch.tgt_mask)
    if k < L:
        gold[:, :L - k] = batch.gold[:, k:]
        mask[:, :L - k] = batch.tgt_mask[:, k:]
    return gold, mask


# single losses -------------------------------------------------------------

def mle_loss(mix: Tensor, gold, mask=None) -> Tensor:
    """-sum log P(y_t) over positions; ``mix`` is (..., L, X), ``gold`` (..., L)."""
    gold = np.asarray(gold)
    if mix.shape[:-1] != gold.shape:
        raise DataError(f"distributions {mix.shape} do not match targets {gold.shape}")
    p = nx.clamp(nx.gather_last(mix, gold[..., None]), PROB_EPS, 1 - PROB_EPS)
    logp = nx.log(p)
    if mask is not None:
        logp = logp * np.asarray(mask, dtype=mix.dtype)[..., None]
    return -nx.tsum(logp)


def ul_loss(probs: Tensor, cand_mask) -> Tensor:
    """-sum over candidates of log(1 - p(c)); ``cand_mask`` matches ``probs``."""
    p = nx.clamp(probs, PROB_EPS, 1 - PROB_EPS)
    return -nx.tsum(nx.log(1.0 - p) * np.asarray(cand_mask, dtype=probs.dtype))


def _mask_from_ids(size: int, candidates: Iterable[int], dtype) -> np.ndarray:
    mask = np.zeros(size, dtype=dtype)
    ids = [c for c in candidates if 0 <= c < size]
    mask[ids] = 1
    return mask


def target_ul_loss_at(p_target: Tensor, candidates: Iterable[int]) -> Tensor:
    """Target-token unlikelihood at one position; ``p_target`` is (V,).
    Candidates outside the target vocabulary have probability 0 there."""
    return ul_loss(p_target, _mask_from_ids(p_target.shape[-1], candidates, p_target.dtype))


def copy_ul_loss_at(p_copy: Tensor, candidates: Iterable[int]) -> Tensor:
    """Copy-token unlikelihood at one position; ``p_copy`` is (X,)."""
    return ul_loss(p_copy, _mask_from_ids(p_copy.shape[-1], candidates, p_copy.dtype))


# composite -----------------------------------------------------------------

@dataclass
class LossBreakdown:
    total: Tensor
    kstep_mle: Tensor
    kstep_target_ul: Tensor
    kstep_copy_ul: Tensor
    per_k: dict[str, list[float]] = field(default_factory=dict)
    n_tokens: int = 0
    n_sequences: int = 0

    def values(self) -> dict[str, float]:
        return {
            "total": self.total.item(),
            "kstep_mle": self.kstep_mle.item(),
            "kstep_target_ul": self.kstep_target_ul.item(),
            "kstep_copy_ul": self.kstep_copy_ul.item(),
        }


def kstep_losses(dists: StepDistributions, batch: Batch, config: LossConfig,
                 masks: tuple[list[np.ndarray], list[np.ndarray]] | None = None) -> LossBreakdown:
    """K-step MLE plus weighted K-step target and copy unlikelihood terms."""
    config.validate()
    if dists.K != config.K:
        raise ConfigError(f"loss K={config.K} but the model has {dists.K + 1} heads")
    dtype = dists.mix[0].dtype
    tmasks, cmasks = masks if masks is not None else candidate_masks(batch, config.K, dtype)
    n_tokens = int(batch.lengths.sum())
    denom = batch.size if config.normalization == "sequence" else max(n_tokens, 1)
    mle_terms, tul_terms, cul_terms = [], [], []
    per_k: dict[str, list[float]] = {"mle": [], "target_ul": [], "copy_ul": []}
    for k in range(config.K + 1):
        g = gamma(k)
        gold, valid = shifted_targets(batch, k)
        m = mle_loss(dists.mix[k], gold, valid)
        t = ul_loss(dists.p_target[k], tmasks[k])
        c = ul_loss(dists.p_copy[k], cmasks[k])
        mle_terms.append(m * g if k else m)
        tul_terms.append(t * g if k else t)
        cul_terms.append(c * g if k else c)
        per_k["mle"].append(m.item() / denom)
        per_k["target_ul"].append(t.item() / denom)
        per_k["copy_ul"].append(c.item() / denom)
    kmle = _sum(mle_terms) / float(denom)
    ktul = _sum(tul_terms) / float(denom)
    kcul = _sum(cul_terms) / float(denom)
    total = kmle + ktul * config.lambda_t + kcul * config.lambda_c
    return LossBreakdown(total, kmle, ktul, kcul, per_k, n_tokens, batch.size)


def _sum(terms: list[Tensor]) -> Tensor:
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out

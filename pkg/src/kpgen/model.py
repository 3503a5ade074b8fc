"""Bi-LSTM encoder, LSTM decoder with bilinear attention, copy gate, and
K+1 attention heads that share the decoder state and the output layer.

Parameters live in a plain ``dict[str, np.ndarray]``. Forward functions take a
``dict[str, Tensor]`` view of them so gradients can be taken on a tape.
All shapes carry leading batch/time axes; ``B`` is batch size, ``S`` source
length, ``L`` target length, ``V`` target vocabulary size and ``X`` the
extended (target + copy) vocabulary size of a batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .corpus import BOS_ID, PAD_ID, UNK_ID, LinearizedExample
from .errors import ConfigError, DataError, DimensionError
from .numerics import LSTMWeights, Tensor

Params = dict[str, np.ndarray]
TensorParams = dict[str, Tensor]


@dataclass
class ModelConfig:
    d_emb: int = 32
    d_h: int = 32
    d_s: int = 32
    K: int = 2
    src_vocab_size: int = 0
    tgt_vocab_size: int = 0

    def validate(self) -> None:
        for name in ("d_emb", "d_h", "d_s", "src_vocab_size", "tgt_vocab_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"model.{name} must be positive")
        if self.K < 0:
            raise ConfigError("model.K must be >= 0")

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        e, h, s, V = self.d_emb, self.d_h, self.d_s, self.tgt_vocab_size
        shapes = {
            "src_emb": (self.src_vocab_size, e),
            "tgt_emb": (V, e),
        }
        for prefix, n_in, d in (("enc_fwd", e, h), ("enc_bwd", e, h), ("dec", e, s)):
            shapes[f"{prefix}.w_x"] = (n_in, 4 * d)
            shapes[f"{prefix}.w_h"] = (d, 4 * d)
            shapes[f"{prefix}.b"] = (4 * d,)
        for k in range(self.K + 1):
            shapes[f"attn.{k}"] = (s, 2 * h)
        shapes["out.w_u"] = (s + 2 * h, s)
        shapes["out.b_u"] = (s,)
        shapes["out.w_v"] = (s, V)
        shapes["out.b_v"] = (V,)
        shapes["copy.w_c"] = (s + 2 * h + e, 1)
        shapes["copy.b_c"] = (1,)
        return shapes


def init_params(config: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> Params:
    """Uniform(-0.1, 0.1) weights, zero biases."""
    config.validate()
    params = {}
    for name, shape in config.param_shapes().items():
        if name.endswith((".b", ".b_u", ".b_v", ".b_c")):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            params[name] = rng.uniform(-0.1, 0.1, size=shape).astype(dtype)
    return params


def count_params(params: Params) -> int:
    return sum(int(p.size) for p in params.values())


def as_tensors(params: Params, requires_grad: bool = False) -> TensorParams:
    return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in params.items()}


def num_heads(P: TensorParams) -> int:
    return sum(1 for k in P if k.startswith("attn."))


def _lstm(P: TensorParams, prefix: str) -> LSTMWeights:
    return LSTMWeights(P[f"{prefix}.w_x"], P[f"{prefix}.w_h"], P[f"{prefix}.b"])


# batching ------------------------------------------------------------------

@dataclass
class Batch:
    src: np.ndarray          # (B, S) source-vocab ids
    src_mask: np.ndarray     # (B, S) 1 for real tokens
    copy_ids: np.ndarray     # (B, S) ids in the extended space
    copy_onehot: np.ndarray  # (B, S, X)
    dec_in: np.ndarray       # (B, L) decoder inputs: BOS, y_1..y_{L-1}
    gold: np.ndarray         # (B, L) y_1..y_L, extended ids allowed
    tgt_mask: np.ndarray     # (B, L)
    lengths: np.ndarray      # (B,)
    tgt_vocab_size: int

    @property
    def size(self) -> int:
        return self.src.shape[0]

    @property
    def ext_size(self) -> int:
        return self.copy_onehot.shape[-1]


def make_batch(examples: list[LinearizedExample], dtype=np.float32) -> Batch:
    if not examples:
        raise DataError("empty batch")
    V = examples[0].tgt_vocab_size
    if any(ex.tgt_vocab_size != V for ex in examples):
        raise DataError("examples linearized with different target vocabularies")
    B = len(examples)
    S = max(len(ex.source_ids) for ex in examples)
    L = max(len(ex.target_ids) - 1 for ex in examples)
    X = V + max(len(ex.ext_tokens) for ex in examples)
    if S == 0:
        raise DataError("empty source")
    src = np.full((B, S), PAD_ID, dtype=np.int64)
    copy_ids = np.zeros((B, S), dtype=np.int64)
    src_mask = np.zeros((B, S), dtype=dtype)
    onehot = np.zeros((B, S, X), dtype=dtype)
    dec_in = np.full((B, L), PAD_ID, dtype=np.int64)
    gold = np.full((B, L), PAD_ID, dtype=np.int64)
    tgt_mask = np.zeros((B, L), dtype=dtype)
    lengths = np.zeros(B, dtype=np.int64)
    for b, ex in enumerate(examples):
        n = len(ex.source_ids)
        src[b, :n] = ex.source_ids
        copy_ids[b, :n] = ex.copy_ids
        src_mask[b, :n] = 1
        onehot[b, np.arange(n), ex.copy_ids] = 1
        tgt = np.asarray(ex.target_ids)
        m = len(tgt) - 1
        inp = tgt[:-1].copy()
        inp[inp >= V] = UNK_ID
        dec_in[b, :m] = inp
        gold[b, :m] = tgt[1:]
        tgt_mask[b, :m] = 1
        lengths[b] = m
    return Batch(src, src_mask, copy_ids, onehot, dec_in, gold, tgt_mask, lengths, V)


# model pieces --------------------------------------------------------------

def encode(P: TensorParams, src: np.ndarray, src_mask: np.ndarray | None = None) -> Tensor:
    """Bi-LSTM over ``src`` (B, S); returns states (B, S, 2*d_h), forward half first."""
    src = np.asarray(src)
    if src.ndim != 2 or src.shape[1] == 0:
        raise DataError("encode needs a non-empty (B, S) id array")
    dtype = P["src_emb"].dtype
    if src_mask is None:
        src_mask = np.ones(src.shape, dtype=dtype)
    B, S = src.shape
    d = P["enc_fwd.w_h"].shape[0]
    xs = nx.unstack(nx.embedding(P["src_emb"], src), axis=1)
    masks = [src_mask[:, i:i + 1].astype(dtype) for i in range(S)]
    full = all(m.all() for m in masks)
    zero = Tensor(np.zeros((B, d), dtype=dtype))

    fwd, h, c = [], zero, zero
    w = _lstm(P, "enc_fwd")
    for i in range(S):
        h, c = nx.lstm_cell(xs[i], h, c, w, None if full else masks[i])
        fwd.append(h)
    bwd, h, c = [None] * S, zero, zero
    w = _lstm(P, "enc_bwd")
    for i in reversed(range(S)):
        h, c = nx.lstm_cell(xs[i], h, c, w, None if full else masks[i])
        bwd[i] = h
    return nx.concat([nx.stack(fwd, axis=1), nx.stack(bwd, axis=1)], axis=-1)


def attend(P: TensorParams, s: Tensor, H: Tensor, k: int, src_mask: np.ndarray | None = None):
    """Bilinear attention of head ``k``: returns (alpha (B, L, S), context (B, L, 2*d_h))."""
    if not 0 <= k < num_heads(P):
        raise IndexError(f"attention head {k} out of range (K={num_heads(P) - 1})")
    scores = nx.matmul(nx.matmul(s, P[f"attn.{k}"]), nx.swap_last(H))
    mask = None if src_mask is None else np.asarray(src_mask)[:, None, :]
    alpha = nx.softmax(scores, axis=-1, mask=mask)
    return alpha, nx.matmul(alpha, H)


def output_distribution(P: TensorParams, s: Tensor, ctx: Tensor) -> Tensor:
    hidden = nx.tanh(nx.matmul(nx.concat([s, ctx], axis=-1), P["out.w_u"]) + P["out.b_u"])
    return nx.softmax(nx.matmul(hidden, P["out.w_v"]) + P["out.b_v"], axis=-1)


def copy_gate(P: TensorParams, s: Tensor, ctx: Tensor, e_prev: Tensor) -> Tensor:
    """Probability of generating from the target vocabulary, shape (..., 1)."""
    return nx.sigmoid(nx.matmul(nx.concat([s, ctx, e_prev], axis=-1), P["copy.w_c"]) + P["copy.b_c"])


def copy_distribution(alpha: Tensor, copy_onehot) -> Tensor:
    """Sum of attention over all occurrences of each source token.

    ``copy_onehot`` (B, S, X) maps source positions to extended ids; the
    result (B, L, X) is zero outside the source's own tokens.
    """
    return nx.matmul(alpha, copy_onehot if isinstance(copy_onehot, Tensor) else Tensor(copy_onehot, dtype=alpha.dtype))


def mixture(p_target: Tensor, p_gen: Tensor, p_copy: Tensor) -> Tensor:
    """p_gen * P_target (zero-padded to X) + (1 - p_gen) * P_copy."""
    pad = p_copy.shape[-1] - p_target.shape[-1]
    if pad < 0:
        raise DimensionError("copy distribution narrower than target distribution")
    if pad:
        zeros = Tensor(np.zeros(p_target.shape[:-1] + (pad,), dtype=p_target.dtype))
        p_target = nx.concat([p_target, zeros], axis=-1)
    return p_gen * p_target + (1.0 - p_gen) * p_copy


@dataclass
class StepDistributions:
    """Per-head teacher-forced distributions; every list is indexed by k."""
    alpha: list[Tensor]     # (B, L, S)
    context: list[Tensor]   # (B, L, 2*d_h)
    p_target: list[Tensor]  # (B, L, V)
    p_gen: list[Tensor]     # (B, L, 1)
    p_copy: list[Tensor]    # (B, L, X)
    mix: list[Tensor]       # (B, L, X)

    @property
    def K(self) -> int:
        return len(self.mix) - 1


def decoder_states(P: TensorParams, dec_in: np.ndarray) -> tuple[Tensor, Tensor]:
    """Run the decoder LSTM over teacher-forced inputs; returns (states, input embeddings)."""
    dtype = P["tgt_emb"].dtype
    B = dec_in.shape[0]
    d = P["dec.w_h"].shape[0]
    e = nx.embedding(P["tgt_emb"], dec_in)
    h = c = Tensor(np.zeros((B, d), dtype=dtype))
    w = _lstm(P, "dec")
    states = []
    for x in nx.unstack(e, axis=1):
        h, c = nx.lstm_cell(x, h, c, w)
        states.append(h)
    return nx.stack(states, axis=1), e


def heads(P: TensorParams, s: Tensor, e_prev: Tensor, H: Tensor, src_mask, copy_onehot,
          ks=None) -> StepDistributions:
    onehot = Tensor(copy_onehot, dtype=s.dtype)
    out = StepDistributions([], [], [], [], [], [])
    for k in (range(num_heads(P)) if ks is None else ks):
        alpha, ctx = attend(P, s, H, k, src_mask)
        pt = output_distribution(P, s, ctx)
        pg = copy_gate(P, s, ctx, e_prev)
        pc = copy_distribution(alpha, onehot)
        out.alpha.append(alpha)
        out.context.append(ctx)
        out.p_target.append(pt)
        out.p_gen.append(pg)
        out.p_copy.append(pc)
        out.mix.append(mixture(pt, pg, pc))
    return out


def forward_teacher_forced(P: TensorParams, batch: Batch) -> StepDistributions:
    """All heads' distributions at every target position of ``batch``."""
    if batch.gold.shape[1] < 1:
        raise DataError("target length must be >= 1")
    if P["tgt_emb"].shape[0] != batch.tgt_vocab_size:
        raise DimensionError("batch target vocabulary does not match the model")
    H = encode(P, batch.src, batch.src_mask)
    s, e = decoder_states(P, batch.dec_in)
    return heads(P, s, e, H, batch.src_mask, batch.copy_onehot)


def start_tokens(B: int) -> np.ndarray:
    return np.full(B, BOS_ID, dtype=np.int64)

"""Teacher-forced training with Adam, early stopping on validation F1@M, and
the single-file checkpoint format."""

from __future__ import annotations

import json
import logging
import math
import os
import struct
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import model as M
from . import numerics as nx
from .config import RunConfig
from .corpus import (Example, LinearizedExample, Vocabulary, build_vocab, keyphrase_sequences,
                     linearize, read_jsonl, source_sequences)
from .decode import decode_all
from .errors import CheckpointError, ConfigError, DataError, NumericError
from .metrics import mean_f1
from .numerics import AdamState, Tape
from .objectives import candidate_masks, kstep_losses

log = logging.getLogger(__name__)

MAGIC = b"KPGENCKP"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIQ")


# checkpoints ---------------------------------------------------------------

@dataclass
class Checkpoint:
    config: dict
    src_vocab: list[str]
    tgt_vocab: list[str]
    params: dict[str, np.ndarray]
    adam: AdamState | None = None
    rng_state: dict | None = None
    best_f1: float = 0.0
    epoch: int = 0
    version: int = FORMAT_VERSION

    @property
    def run_config(self) -> RunConfig:
        return RunConfig.from_dict(self.config)

    def model_config(self) -> M.ModelConfig:
        cfg = self.run_config.model
        cfg.src_vocab_size, cfg.tgt_vocab_size = len(self.src_vocab), len(self.tgt_vocab)
        return cfg

    def vocabs(self) -> tuple[Vocabulary, Vocabulary]:
        return Vocabulary(self.src_vocab), Vocabulary(self.tgt_vocab)

    def equals(self, other: "Checkpoint") -> bool:
        """Bit-level equality of every stored field."""
        def same_arrays(a, b):
            return a.keys() == b.keys() and all(
                a[k].dtype == b[k].dtype and a[k].shape == b[k].shape and a[k].tobytes() == b[k].tobytes()
                for k in a)
        if (self.config, self.src_vocab, self.tgt_vocab, self.rng_state, self.epoch, self.version) != (
                other.config, other.src_vocab, other.tgt_vocab, other.rng_state, other.epoch, other.version):
            return False
        if struct.pack("<d", self.best_f1) != struct.pack("<d", other.best_f1):
            return False
        if not same_arrays(self.params, other.params):
            return False
        if (self.adam is None) != (other.adam is None):
            return False
        if self.adam is not None:
            a, b = self.adam, other.adam
            if (a.lr, a.beta1, a.beta2, a.eps, a.t) != (b.lr, b.beta1, b.beta2, b.eps, b.t):
                return False
            return same_arrays(a.m, b.m) and same_arrays(a.v, b.v)
        return True


def _tensor_items(ckpt: Checkpoint):
    for name in sorted(ckpt.params):
        yield f"param/{name}", ckpt.params[name]
    if ckpt.adam is not None:
        for name in sorted(ckpt.adam.m):
            yield f"adam_m/{name}", ckpt.adam.m[name]
        for name in sorted(ckpt.adam.v):
            yield f"adam_v/{name}", ckpt.adam.v[name]


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    """JSON manifest followed by little-endian float32 tensor blocks."""
    blobs, index, offset = [], [], 0
    for name, arr in _tensor_items(ckpt):
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    adam = None
    if ckpt.adam is not None:
        a = ckpt.adam
        adam = {"lr": a.lr, "beta1": a.beta1, "beta2": a.beta2, "eps": a.eps, "t": a.t}
    manifest = {
        "format": "kpgen-checkpoint",
        "version": ckpt.version,
        "config": ckpt.config,
        "src_vocab": ckpt.src_vocab,
        "tgt_vocab": ckpt.tgt_vocab,
        "best_f1": ckpt.best_f1,
        "epoch": ckpt.epoch,
        "rng_state": ckpt.rng_state,
        "adam": adam,
        "tensors": index,
    }
    head = json.dumps(manifest, sort_keys=True, ensure_ascii=False, separators=(",", ":")).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, ckpt.version, len(head)))
        fh.write(head)
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike, expect: M.ModelConfig | None = None) -> Checkpoint:
    """Read a checkpoint; with ``expect`` the tensor shapes must match that model."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < _HEADER.size:
        raise CheckpointError("checkpoint truncated: header incomplete")
    magic, version, mlen = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = _HEADER.size
    if len(raw) < start + mlen:
        raise CheckpointError("checkpoint truncated: manifest incomplete")
    try:
        manifest = json.loads(raw[start:start + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt manifest: {exc}") from exc
    if manifest.get("format") != "kpgen-checkpoint" or manifest.get("version") != version:
        raise CheckpointError("manifest format/version mismatch")
    body = raw[start + mlen:]
    tensors: dict[str, np.ndarray] = {}
    expected_end = 0
    try:
        for entry in manifest["tensors"]:
            shape = tuple(int(s) for s in entry["shape"])
            nbytes, offset = int(entry["nbytes"]), int(entry["offset"])
            if nbytes != 4 * int(np.prod(shape, dtype=np.int64)):
                raise CheckpointError(f"byte count mismatch for {entry['name']}")
            if offset != expected_end or offset + nbytes > len(body):
                raise CheckpointError(f"checkpoint truncated or misaligned at {entry['name']}")
            tensors[entry["name"]] = np.frombuffer(body, dtype="<f4", count=nbytes // 4,
                                                   offset=offset).reshape(shape).astype(np.float32)
            expected_end = offset + nbytes
        if expected_end != len(body):
            raise CheckpointError("trailing bytes after tensor data")
        params = {k.split("/", 1)[1]: v for k, v in tensors.items() if k.startswith("param/")}
        adam = None
        if manifest["adam"] is not None:
            a = manifest["adam"]
            adam = AdamState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], t=a["t"],
                             m={k.split("/", 1)[1]: v for k, v in tensors.items() if k.startswith("adam_m/")},
                             v={k.split("/", 1)[1]: v for k, v in tensors.items() if k.startswith("adam_v/")})
        ckpt = Checkpoint(config=manifest["config"], src_vocab=manifest["src_vocab"],
                          tgt_vocab=manifest["tgt_vocab"], params=params, adam=adam,
                          rng_state=manifest["rng_state"], best_f1=manifest["best_f1"],
                          epoch=manifest["epoch"], version=version)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"corrupt manifest: {exc!r}") from exc
    if expect is not None:
        shapes = expect.param_shapes()
        if set(shapes) != set(ckpt.params):
            raise CheckpointError("checkpoint parameters do not match the model configuration")
        for name, shape in shapes.items():
            if tuple(ckpt.params[name].shape) != tuple(shape):
                raise CheckpointError(f"shape mismatch for {name}: {ckpt.params[name].shape} vs {shape}")
    return ckpt


# training ------------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[dict] = field(default_factory=list)
    initial_params: dict[str, np.ndarray] | None = None


@dataclass
class PreparedData:
    src_vocab: Vocabulary
    tgt_vocab: Vocabulary
    train: list[LinearizedExample]
    valid: list[LinearizedExample]
    dropped: int = 0


def prepare_data(config: RunConfig, train: list[Example], valid: list[Example],
                 vocabs: tuple[Vocabulary, Vocabulary] | None = None) -> PreparedData:
    if not train:
        raise DataError("training set is empty")
    cc = config.corpus
    if vocabs is None:
        src_vocab = build_vocab(source_sequences(train), cc.src_vocab_cap)
        tgt_vocab = build_vocab(keyphrase_sequences(train), cc.tgt_vocab_cap)
    else:
        src_vocab, tgt_vocab = vocabs
    lin_train, dropped = [], 0
    for ex in train:
        if not ex.keyphrases:
            dropped += 1
            continue
        lin = linearize(ex, src_vocab, tgt_vocab, cc.max_src_len)
        if len(lin.target_ids) - 1 > cc.max_tgt_len:
            dropped += 1
            continue
        lin_train.append(lin)
    if dropped:
        log.info("dropped %d training examples (no keyphrases or target longer than %d)",
                 dropped, cc.max_tgt_len)
    if not lin_train:
        raise DataError("no usable training examples")
    lin_valid = [linearize(ex, src_vocab, tgt_vocab, cc.max_src_len) for ex in valid if ex.keyphrases]
    return PreparedData(src_vocab, tgt_vocab, lin_train, lin_valid, dropped)


def make_batches(examples: list[LinearizedExample], batch_size: int,
                 rng: np.random.Generator) -> list[list[int]]:
    """Shuffle, bucket by target length within windows, shuffle batch order."""
    order = rng.permutation(len(examples))
    window = batch_size * 8
    batches = []
    for i in range(0, len(order), window):
        chunk = sorted(order[i:i + window].tolist(), key=lambda j: len(examples[j].target_ids))
        batches.extend(chunk[k:k + batch_size] for k in range(0, len(chunk), batch_size))
    perm = rng.permutation(len(batches))
    return [batches[i] for i in perm]


def train_step(params: M.Params, batch: M.Batch, config: RunConfig, masks=None):
    """Loss breakdown and gradients for one batch."""
    P = M.as_tensors(params, requires_grad=True)
    with Tape() as tape:
        dists = M.forward_teacher_forced(P, batch)
        losses = kstep_losses(dists, batch, config.loss, masks)
    names = list(P)
    grads = tape.gradient(losses.total, [P[n] for n in names])
    return losses, dict(zip(names, grads))


def exact_match_rate(preds, examples: list[LinearizedExample]) -> float:
    if not examples:
        return 0.0
    hits = sum(1 for p, ex in zip(preds, examples) if p.raw_ids == ex.gold)
    return hits / len(examples)


def train(config: RunConfig, train_examples: list[Example] | None = None,
          valid_examples: list[Example] | None = None, resume: Checkpoint | None = None,
          log_fn: Callable[[dict], None] | None = None) -> TrainResult:
    """Train a model; data comes from the arguments or ``config.train.data_dir``.

    Returns the best checkpoint by validation F1@M (ties keep the earlier one)
    and the list of log events. When ``config.train.out_dir`` is set the
    checkpoint and a JSONL log are written there.
    """
    config.validate()
    tc = config.train
    if train_examples is None:
        if not tc.data_dir:
            raise ConfigError("no training data given (train.data_dir is unset)")
        train_path = os.path.join(tc.data_dir, "train.jsonl")
        valid_path = os.path.join(tc.data_dir, "valid.jsonl")
        for p in (train_path, valid_path):
            if not os.path.exists(p):
                raise DataError(f"missing data file {p}")
        train_examples, valid_examples = read_jsonl(train_path), read_jsonl(valid_path)
    if valid_examples is None:
        valid_examples = []
    if resume is not None and resume.run_config.hash() != config.hash():
        raise ConfigError("resume checkpoint was trained with a different configuration")

    vocabs = resume.vocabs() if resume is not None else None
    data = prepare_data(config, train_examples, valid_examples, vocabs)
    eval_set = data.train if tc.validate_on_train else data.valid
    if not eval_set:
        raise DataError("validation set is empty")
    dtype = np.dtype(tc.dtype)
    mcfg = M.ModelConfig(d_emb=config.model.d_emb, d_h=config.model.d_h, d_s=config.model.d_s,
                         K=config.model.K, src_vocab_size=len(data.src_vocab),
                         tgt_vocab_size=len(data.tgt_vocab))
    rng = np.random.default_rng(tc.seed)
    params = M.init_params(mcfg, rng, dtype)
    adam = AdamState(lr=tc.lr, beta1=tc.beta1, beta2=tc.beta2, eps=tc.eps)
    best_f1, start_epoch = -1.0, 0
    if resume is not None:
        params = {k: v.astype(dtype) for k, v in resume.params.items()}
        if resume.adam is not None:
            adam = resume.adam
        if resume.rng_state is not None:
            rng.bit_generator.state = resume.rng_state
        best_f1, start_epoch = resume.best_f1, resume.epoch
    initial = {k: v.copy() for k, v in params.items()}
    best_params = {k: v.copy() for k, v in params.items()}

    events: list[dict] = []
    log_fh = None
    if tc.out_dir:
        os.makedirs(tc.out_dir, exist_ok=True)
        log_fh = open(os.path.join(tc.out_dir, "train_log.jsonl"), "w", encoding="utf-8")

    def emit(event: dict) -> None:
        events.append(event)
        if log_fh is not None:
            log_fh.write(json.dumps(event, sort_keys=True) + "\n")
        if log_fn is not None:
            log_fn(event)

    emit({"event": "start", "n_train": len(data.train), "n_valid": len(data.valid),
          "dropped": data.dropped, "n_params": M.count_params(params),
          "src_vocab": len(data.src_vocab), "tgt_vocab": len(data.tgt_vocab)})

    def evaluate_now() -> tuple[float, float]:
        preds = decode_all(params, eval_set, data.tgt_vocab, tc.max_decode_len, batch_size=tc.batch_size)
        gold = [ex.keyphrases for ex in eval_set]
        return mean_f1([p.keyphrases for p in preds], gold), exact_match_rate(preds, eval_set)

    step = 0
    bad_evals = 0
    epoch = start_epoch
    try:
        for epoch in range(start_epoch + 1, tc.max_epochs + 1):
            epoch_losses = []
            for idx in make_batches(data.train, tc.batch_size, rng):
                batch = M.make_batch([data.train[i] for i in idx], dtype=dtype)
                losses, grads = train_step(params, batch, config)
                values = losses.values()
                if not all(math.isfinite(v) for v in values.values()):
                    raise NumericError(f"non-finite loss at epoch {epoch} step {step + 1}: {values}")
                grads, norm = nx.clip_by_global_norm(grads, tc.clip_norm)
                params, adam = nx.adam_step(params, grads, adam)
                step += 1
                epoch_losses.append(values["total"])
                emit({"event": "step", "epoch": epoch, "step": step, "grad_norm": norm, **values})
            if epoch % tc.eval_every_epochs and epoch != tc.max_epochs:
                continue
            f1, em = evaluate_now()
            improved = f1 > best_f1
            if improved:
                best_f1, bad_evals = f1, 0
                best_params = {k: v.copy() for k, v in params.items()}
            else:
                bad_evals += 1
            emit({"event": "eval", "epoch": epoch, "step": step, "valid_f1_at_m": f1,
                  "valid_exact_match": em, "mean_train_loss": float(np.mean(epoch_losses)),
                  "best_f1": best_f1, "improved": improved})
            if bad_evals >= tc.patience:
                emit({"event": "early_stop", "epoch": epoch, "best_f1": best_f1})
                break
        if best_f1 < 0:
            best_f1 = 0.0
        ckpt = Checkpoint(config=config.to_dict(), src_vocab=data.src_vocab.tokens,
                          tgt_vocab=data.tgt_vocab.tokens,
                          params={k: v.astype(np.float32) for k, v in best_params.items()},
                          adam=AdamState(adam.lr, adam.beta1, adam.beta2, adam.eps, adam.t,
                                         {k: v.astype(np.float32) for k, v in adam.m.items()},
                                         {k: v.astype(np.float32) for k, v in adam.v.items()}),
                          rng_state=rng.bit_generator.state, best_f1=float(best_f1), epoch=epoch)
        emit({"event": "end", "epoch": epoch, "step": step, "best_f1": best_f1})
    finally:
        if log_fh is not None:
            log_fh.close()
    if tc.out_dir:
        save_checkpoint(ckpt, os.path.join(tc.out_dir, "model.ckpt"))
    return TrainResult(ckpt, events, initial)

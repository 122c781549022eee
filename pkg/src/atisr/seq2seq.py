"""Full-utterance attention encoder-decoder: model, training, greedy search,
attention capture and checkpoints.

Checkpoint layout (a directory):

* ``model.json``: format version, architecture, vocabulary tokens and any
  provenance metadata;
* ``model.bin``: concatenated entries ``u64 name_len | name (utf-8) | u64 rank
  | u64 dims[rank] | float32 data`` (all little-endian, row-major), in
  parameter order.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .corpus import EOS_ID, FIRST_CHAR_ID, PAD_ID, SOS_ID, Dataset, Utterance, Vocabulary
from .errors import DataError, IntegrityError, TrainingError, UsageError
from .network import (BLOCK_FRAMES, ArchConfig, AttentionScorer, DecoderCell, EncoderStack,
                      Module, cross_entropy_loss, encode, pad_frames)
from .numerics import Tensor

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
_U64 = struct.Struct("<Q")


class Seq2SeqModel(Module):
    _children = ("encoder", "decoder", "scorer")

    def __init__(self, arch: ArchConfig, vocab: Vocabulary, seed: int = 0):
        if arch.vocab_size != len(vocab):
            raise DataError(f"arch vocab_size {arch.vocab_size} != vocabulary size {len(vocab)}")
        self.arch, self.vocab, self.seed = arch, vocab, seed
        rng = nx.make_rng(seed)
        self.encoder = EncoderStack(arch.feat_dim, arch.proj_dim, arch.enc_hidden, rng)
        self.decoder = DecoderCell(arch.vocab_size, arch.emb_dim, arch.dec_hidden, arch.enc_dim, rng)
        self.scorer = AttentionScorer(arch.scorer, arch.enc_dim, arch.dec_hidden, arch.att_dim, rng)
        self.meta: dict = {}

    def param_bytes(self) -> bytes:
        return serialize_params(self.named_parameters())

    def hash(self) -> str:
        return hashlib.sha256(self.param_bytes()).hexdigest()

    def quantize(self):
        """Round parameters to float32 precision (checkpoint precision)."""
        for p in self.parameters():
            p.data = p.data.astype(np.float32).astype(np.float64)


# ----------------------------------------------------------------------------
# checkpoints


def serialize_params(named: dict[str, Tensor]) -> bytes:
    chunks = []
    for name, t in named.items():
        raw = name.encode("utf-8")
        chunks.append(_U64.pack(len(raw)))
        chunks.append(raw)
        chunks.append(_U64.pack(t.data.ndim))
        chunks.extend(_U64.pack(d) for d in t.data.shape)
        chunks.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return b"".join(chunks)


def deserialize_params(blob: bytes) -> dict[str, np.ndarray]:
    out = {}
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise IntegrityError("truncated parameter blob")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    while pos < len(blob):
        (n,) = _U64.unpack(take(8))
        name = take(n).decode("utf-8")
        (rank,) = _U64.unpack(take(8))
        dims = [_U64.unpack(take(8))[0] for _ in range(rank)]
        size = int(np.prod(dims)) if dims else 1
        out[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims).astype(np.float64)
    return out


def save_checkpoint(model: Seq2SeqModel, path, meta: dict | None = None) -> str:
    """Write ``model.json`` + ``model.bin`` into directory ``path``; returns the blob hash."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blob = model.param_bytes()
    digest = hashlib.sha256(blob).hexdigest()
    manifest = {"version": CHECKPOINT_VERSION, "arch": model.arch.to_dict(),
                "vocab": model.vocab.tokens, "seed": model.seed, "params_sha256": digest,
                "meta": meta if meta is not None else model.meta}
    (path / "model.bin").write_bytes(blob)
    (path / "model.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                     encoding="utf-8")
    return digest


def load_checkpoint(path) -> Seq2SeqModel:
    path = Path(path)
    mpath, bpath = path / "model.json", path / "model.bin"
    for p in (mpath, bpath):
        if not p.exists():
            raise IntegrityError(f"checkpoint file missing: {p}")
    manifest = json.loads(mpath.read_text(encoding="utf-8"))
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise IntegrityError(f"{mpath}: unsupported checkpoint version {manifest.get('version')}")
    blob = bpath.read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest["params_sha256"]:
        raise IntegrityError(f"{bpath}: hash mismatch")
    vocab = Vocabulary(manifest["vocab"][FIRST_CHAR_ID:])
    if vocab.tokens != manifest["vocab"]:
        raise IntegrityError(f"{mpath}: malformed vocabulary")
    model = Seq2SeqModel(ArchConfig.from_dict(manifest["arch"]), vocab, manifest.get("seed", 0))
    model.meta = manifest.get("meta", {})
    arrays = deserialize_params(blob)
    named = model.named_parameters()
    if set(arrays) != set(named):
        raise IntegrityError(f"{bpath}: parameter names do not match the architecture")
    for name, t in named.items():
        if arrays[name].shape != t.shape:
            raise IntegrityError(f"{bpath}: {name} has shape {arrays[name].shape}, expected {t.shape}")
        t.data = arrays[name].copy()
    return model


# ----------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 10
    lr: float = 2e-3
    clip: float = 5.0
    seed: int = 0
    lr_decay: float = 1.0  # multiplicative per epoch
    feature_noise: float = 0.0  # std of Gaussian noise added to training frames

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainingLog:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int | None = None

    def to_dict(self) -> dict:
        return {"epochs": self.epochs, "best_epoch": self.best_epoch}


def _targets(vocab: Vocabulary, text: str) -> list[int]:
    ids = vocab.encode(text)
    return ids


def teacher_forced_loss(model: Seq2SeqModel, batch: Sequence[Utterance]) -> Tensor:
    """Teacher-forced cross-entropy averaged per utterance, then over the batch."""
    B = len(batch)
    feats = [pad_frames(u.features) for u in batch]
    lengths = np.array([f.shape[0] for f in feats])
    S = int(lengths.max())
    x = np.zeros((S, B, model.arch.feat_dim))
    for b, f in enumerate(feats):
        x[:f.shape[0], b] = f
    enc = nx.transpose(model.encoder.encode_batch(x, lengths), (1, 0, 2))
    keys = model.scorer.keys(enc)
    S_enc = enc.shape[1]
    valid = np.arange(S_enc)[None, :] < (lengths // BLOCK_FRAMES)[:, None]
    mask_add = np.where(valid, 0.0, -np.inf)

    seqs = [_targets(model.vocab, u.transcript) for u in batch]
    T = max(len(s) for s in seqs) + 1
    inputs = np.full((T, B), PAD_ID)
    targets = np.full((T, B), PAD_ID)
    weights = np.zeros((T, B))
    for b, s in enumerate(seqs):
        inputs[:len(s) + 1, b] = [SOS_ID] + s
        targets[:len(s) + 1, b] = s + [EOS_ID]
        weights[:len(s) + 1, b] = 1.0 / ((len(s) + 1) * B)
    state = model.decoder.zero_state(B)
    dists = []
    for t in range(T):
        dist, state, _ = model.decoder.step(model.scorer, inputs[t], state, enc, keys, mask_add)
        dists.append(dist)
    return cross_entropy_loss(nx.stack(dists, axis=0), targets, weights)


def length_batches(lengths: Sequence[int], batch_size: int, rng: np.random.Generator) -> list[list[int]]:
    """Bucket indices by length, then shuffle the bucket order."""
    order = np.argsort(np.asarray(lengths), kind="stable")
    batches = [order[i:i + batch_size].tolist() for i in range(0, len(order), batch_size)]
    return [batches[i] for i in rng.permutation(len(batches))]


def fit(model: Module, train_items: Sequence, dev_items: Sequence, loss_fn: Callable,
        length_fn: Callable, hyper: TrainConfig, what: str = "model",
        augment: Callable | None = None) -> TrainingLog:
    """Shared Adam training loop with global-norm clipping and best-dev retention.

    ``augment(item, sigma, rng)`` returns a noisy copy of a training item; it is
    only called when ``hyper.feature_noise`` is positive.
    """
    if len(train_items) == 0:
        raise UsageError(f"cannot train {what} on an empty dataset")
    log_ = TrainingLog()
    if hyper.epochs <= 0:
        return log_
    params = model.parameters()
    opt = nx.Adam(params, lr=hyper.lr)
    rng = nx.make_rng(hyper.seed)
    noise_rng = nx.make_rng(hyper.seed + 1)
    noisy = augment is not None and hyper.feature_noise > 0
    lengths = [length_fn(it) for it in train_items]
    best = (np.inf, None)
    for epoch in range(hyper.epochs):
        t0 = time.perf_counter()
        total, count = 0.0, 0
        for bi, idx in enumerate(length_batches(lengths, hyper.batch_size, rng)):
            with nx.Tape() as tape:
                batch = [train_items[i] for i in idx]
                if noisy:
                    batch = [augment(it, hyper.feature_noise, noise_rng) for it in batch]
                loss = loss_fn(model, batch)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss in {what} training at epoch {epoch}, batch {bi}")
            tape.backward(loss)
            nx.clip_global_norm(params, hyper.clip)
            opt.step()
            opt.zero_grad()
            total += value * len(idx)
            count += len(idx)
        train_loss = total / count
        dev_loss = evaluate_loss(model, dev_items, loss_fn, hyper.batch_size) if len(dev_items) else train_loss
        rec = {"epoch": epoch, "train_loss": train_loss, "dev_loss": dev_loss}
        log_.epochs.append(rec)
        log.info("%s epoch %d train %.4f dev %.4f (%.1fs)", what, epoch, train_loss, dev_loss,
                 time.perf_counter() - t0)
        if dev_loss < best[0]:
            best = (dev_loss, [p.data.copy() for p in params])
            log_.best_epoch = epoch
        opt.lr *= hyper.lr_decay
    for p, d in zip(params, best[1]):
        p.data = d
    return log_


def evaluate_loss(model, items: Sequence, loss_fn: Callable, batch_size: int) -> float:
    total = 0.0
    with nx.no_grad():
        for i in range(0, len(items), batch_size):
            chunk = items[i:i + batch_size]
            total += loss_fn(model, chunk).item() * len(chunk)
    return total / len(items)


def noisy_utterance(u: Utterance, sigma: float, rng: np.random.Generator) -> Utterance:
    return Utterance(u.id, u.features + sigma * rng.standard_normal(u.features.shape), u.transcript)


def train_teacher(train_set: Dataset, dev_set: Dataset, vocab: Vocabulary, arch: ArchConfig,
                  hyper: TrainConfig | None = None, init_seed: int | None = None
                  ) -> tuple[Seq2SeqModel, TrainingLog]:
    """Teacher-forced training on whole utterances; returns the best-dev model."""
    hyper = hyper or TrainConfig()
    if len(train_set) == 0:
        raise UsageError("cannot train the teacher on an empty dataset")
    for u in list(train_set) + list(dev_set):
        if u.frames < 1 or not u.transcript:
            raise DataError(f"utterance {u.id} is empty")
    model = Seq2SeqModel(arch, vocab, hyper.seed if init_seed is None else init_seed)
    if hyper.epochs <= 0:
        return model, TrainingLog()
    tlog = fit(model, list(train_set), list(dev_set), teacher_forced_loss,
               lambda u: u.frames, hyper, what="teacher", augment=noisy_utterance)
    model.quantize()
    model.meta = {"role": "teacher", "train": hyper.to_dict(), "log": tlog.to_dict()}
    return model, tlog


# ----------------------------------------------------------------------------
# inference


def greedy_decode(model: Seq2SeqModel, x: np.ndarray, max_len: int = 200
                  ) -> tuple[list[int], np.ndarray]:
    """Argmax decoding from ``<s>`` until ``</s>`` or ``max_len`` tokens.

    Returns the emitted ids (including a terminal ``</s>``) and the
    attention matrix with one row per emitted token.
    """
    if max_len < 1:
        raise UsageError("max_len must be >= 1")
    with nx.no_grad():
        enc, _ = encode(model.encoder, x)
        enc = nx.reshape(enc, (1,) + enc.shape)
        keys = model.scorer.keys(enc)
        state = model.decoder.zero_state(1)
        prev, hyp, rows = SOS_ID, [], []
        for _ in range(max_len):
            dist, state, a = model.decoder.step(model.scorer, np.array([prev]), state, enc, keys)
            prev = int(np.argmax(dist.data[0]))
            hyp.append(prev)
            rows.append(a.data[0])
            if prev == EOS_ID:
                break
    return hyp, np.array(rows)


def capture_alignment(model: Seq2SeqModel, x: np.ndarray, y_true) -> np.ndarray:
    """Teacher-forced attention matrix over ``y_true </s>``: (|y|+1, ceil(S/8))."""
    ids = model.vocab.encode(y_true) if isinstance(y_true, str) else [int(i) for i in y_true]
    if not ids:
        raise DataError("capture_alignment needs a non-empty transcript")
    bad = [i for i in ids if not 0 <= i < len(model.vocab)]
    if bad:
        raise DataError(f"transcript token {bad[0]} outside the vocabulary")
    with nx.no_grad():
        enc, _ = encode(model.encoder, x)
        enc = nx.reshape(enc, (1,) + enc.shape)
        keys = model.scorer.keys(enc)
        state = model.decoder.zero_state(1)
        rows = []
        for prev in [SOS_ID] + ids:
            _, state, a = model.decoder.step(model.scorer, np.array([prev]), state, enc, keys)
            rows.append(a.data[0])
    return np.array(rows)


def copy_model(model: Seq2SeqModel) -> Seq2SeqModel:
    return copy.deepcopy(model)

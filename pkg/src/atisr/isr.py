"""The incremental student: training on segmented examples and step-wise
greedy decoding, plus the no-transfer baseline decoder.

During training the student sees exactly what ``isr_decode`` computes: the
forward encoder directions run through consecutive windows (threading their
state under the keep policy), the decoder consumes the concatenation of all
step targets, and each token attends only to its own step's encoder states.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .config import IsrConfig
from .corpus import (BLANK_ID, BOB_ID, EOB_ID, EOS_ID, FIRST_CHAR_ID, PAD_ID, SOS_ID, Utterance,
                     Vocabulary)
from .distill import SegmentedExample, StudentDataset, check_compatible
from .errors import ConfigurationError, UsageError
from .network import ArchConfig, DecoderState, cross_entropy_loss, encode
from .numerics import Tensor
from .seq2seq import Seq2SeqModel, TrainConfig, TrainingLog, fit, noisy_utterance

log = logging.getLogger(__name__)

STOP_IDS = (EOB_ID, EOS_ID)


@dataclass
class IncrementalHypothesis:
    steps: list[list[int]] = field(default_factory=list)
    offsets: list[int] = field(default_factory=list)  # frames that must have arrived per step

    def flat_ids(self) -> list[int]:
        return [t for st in self.steps for t in st if t >= FIRST_CHAR_ID]

    def transcript(self, vocab: Vocabulary) -> str:
        return vocab.to_text(self.flat_ids())

    def to_record(self, utt_id: str, vocab: Vocabulary) -> dict:
        return {"id": utt_id, "steps": [vocab.decode(s) for s in self.steps],
                "transcript": self.transcript(vocab), "offsets": self.offsets}


# ----------------------------------------------------------------------------
# training


def step_init_token(cfg: IsrConfig, step: int, prev_chars: Sequence[int]) -> int:
    """Decoder input at the start of a step."""
    if step == 0:
        return SOS_ID
    if cfg.init_policy == "last_prev_char" and len(prev_chars):
        return int(prev_chars[-1])
    return BOB_ID


def token_plan(ex: SegmentedExample, cfg: IsrConfig):
    """Flattened teacher-forcing plan: (inputs, targets, step index, step-start flags)."""
    inputs, targets, steps, starts = [], [], [], []
    prev_chars: list[int] = []
    for n, st in enumerate(ex.steps):
        chars = [t for t in st.targets if t not in STOP_IDS]
        ins = [step_init_token(cfg, n, prev_chars)] + st.targets[:-1]
        inputs += ins
        targets += st.targets
        steps += [n] * len(st.targets)
        starts += [True] + [False] * (len(st.targets) - 1)
        prev_chars = chars
    return inputs, targets, steps, starts


def window_batch(batch: Sequence[tuple[SegmentedExample, Utterance]], cfg: IsrConfig,
                 feat_dim: int) -> np.ndarray:
    """Stack every step's input window: (N, W, B, D), zero outside the utterance."""
    N = max(len(ex.steps) for ex, _ in batch)
    W = cfg.window_frames
    xw = np.zeros((N, W, len(batch), feat_dim))
    for b, (ex, u) in enumerate(batch):
        S = u.frames
        for n, st in enumerate(ex.steps):
            if st.end - st.start != W:
                raise ConfigurationError(f"{ex.utt_id}: step {n} window is {st.end - st.start} frames, expected {W}")
            lo, hi = max(st.start, 0), min(st.end, S)
            if hi > lo:
                xw[n, lo - st.start:hi - st.start, b] = u.features[lo:hi]
    return xw


def student_loss(model: Seq2SeqModel, batch: Sequence[tuple[SegmentedExample, Utterance]],
                 cfg: IsrConfig) -> Tensor:
    B = len(batch)
    xw = window_batch(batch, cfg, model.arch.feat_dim)
    enc, _ = model.encoder.encode_windows(xw, keep=cfg.state_policy == "keep")
    enc = nx.transpose(enc, (2, 0, 1, 3))  # (B, N, Wb, M)
    keys = model.scorer.keys(enc)

    plans = [token_plan(ex, cfg) for ex, _ in batch]
    T = max(len(p[0]) for p in plans)
    inputs = np.full((T, B), PAD_ID)
    targets = np.full((T, B), PAD_ID)
    step_idx = np.zeros((T, B), dtype=np.int64)
    starts = np.zeros((T, B), dtype=bool)
    weights = np.zeros((T, B))
    for b, (ins, tgs, sts, sfl) in enumerate(plans):
        L = len(ins)
        inputs[:L, b], targets[:L, b], step_idx[:L, b], starts[:L, b] = ins, tgs, sts, sfl
        step_idx[L:, b] = sts[-1]
        weights[:L, b] = 1.0 / (L * B)
    enc_t = nx.unstack(nx.gather_steps(enc, step_idx))
    keys_t = nx.unstack(nx.gather_steps(keys, step_idx))

    reset = cfg.state_policy == "reset"
    state = model.decoder.zero_state(B)
    dists = []
    for t in range(T):
        if reset and t > 0 and starts[t].any():
            keep = Tensor((~starts[t]).astype(np.float64)[:, None])
            state = DecoderState(state.h * keep, state.c * keep, state.ctx * keep)
        dist, state, _ = model.decoder.step(model.scorer, inputs[t], state, enc_t[t], keys_t[t])
        dists.append(dist)
    return cross_entropy_loss(nx.stack(dists, axis=0), targets, weights)


def train_student(train_ds: StudentDataset, dev_ds: StudentDataset | None, arch: ArchConfig,
                  cfg: IsrConfig, hyper: TrainConfig | None, vocab: Vocabulary,
                  init_seed: int | None = None) -> tuple[Seq2SeqModel, TrainingLog]:
    """Train a freshly initialized student with the teacher's architecture."""
    hyper = hyper or TrainConfig()
    check_compatible(train_ds, cfg)
    if dev_ds is not None:
        check_compatible(dev_ds, cfg)
    for tok in ("<m>", "</m>"):
        if tok not in vocab.index:
            raise ConfigurationError(f"vocabulary lacks {tok}")
    if len(train_ds) == 0:
        raise UsageError("cannot train the student on an empty dataset")
    model = Seq2SeqModel(arch, vocab, hyper.seed if init_seed is None else init_seed)
    items = train_ds.items()
    dev_items = dev_ds.items() if dev_ds is not None else []
    slog = fit(model, items, dev_items, partial(student_loss, cfg=cfg),
               lambda it: it[1].frames, hyper, what=f"student[{cfg.label()}]",
               augment=lambda it, sigma, rng: (it[0], noisy_utterance(it[1], sigma, rng)))
    model.quantize()
    model.meta = {"role": "student", "isr": cfg.to_dict(), "train": hyper.to_dict(),
                  "teacher_hash": train_ds.teacher_hash, "log": slog.to_dict()}
    return model, slog


# ----------------------------------------------------------------------------
# decoding


def _padded(x: np.ndarray, multiple: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    S = x.shape[0]
    total = -(-S // multiple) * multiple
    out = np.zeros((total, x.shape[1]))
    out[:S] = x
    return out


def isr_decode(model: Seq2SeqModel, x: np.ndarray, cfg: IsrConfig) -> IncrementalHypothesis:
    """Greedy incremental decoding, one window per step.

    Each step emits tokens until ``</m>``, ``</s>`` or ``cfg.max_step_outputs``
    tokens; ``</s>`` ends the utterance.
    """
    K = cfg.max_step_outputs
    xp = _padded(x, cfg.step_frames)
    n_steps = xp.shape[0] // cfg.step_frames
    lb, la = cfg.look_back * 8, cfg.look_ahead * 8
    xp = np.concatenate([np.zeros((lb, xp.shape[1])), xp, np.zeros((la, xp.shape[1]))])
    keep = cfg.state_policy == "keep"
    hyp = IncrementalHypothesis()
    with nx.no_grad():
        carry = None
        state = model.decoder.zero_state(1)
        prev_chars: list[int] = []
        for n in range(n_steps):
            lo = n * cfg.step_frames
            window = xp[lo:lo + cfg.window_frames]
            if window.shape[0] != cfg.window_frames:
                raise AssertionError("window width changed between steps")
            enc, new_carry = encode(model.encoder, window, carry if keep else None)
            if keep:
                carry = new_carry
            elif n > 0:
                state = model.decoder.zero_state(1)
            enc = nx.reshape(enc, (1,) + enc.shape)
            keys = model.scorer.keys(enc)
            prev = step_init_token(cfg, n, prev_chars)
            emitted: list[int] = []
            for _ in range(K):
                dist, state, _ = model.decoder.step(model.scorer, np.array([prev]), state, enc, keys)
                prev = int(np.argmax(dist.data[0]))
                emitted.append(prev)
                if prev in STOP_IDS:
                    break
            hyp.steps.append(emitted)
            hyp.offsets.append(lo + cfg.window_frames - lb)
            prev_chars = [t for t in emitted if t >= FIRST_CHAR_ID]
            if EOS_ID in emitted:
                break
    return hyp


def baseline_isr_decode(model: Seq2SeqModel, x: np.ndarray, cfg: IsrConfig) -> IncrementalHypothesis:
    """Decode a full-utterance model on non-overlapping segments.

    Each segment of ``main_blocks`` blocks gets one zero frame appended and is
    decoded from ``<s>`` with fresh state until ``</s>``, ``<blank>`` or the
    per-step cap.
    """
    K = cfg.max_step_outputs
    xp = _padded(x, cfg.step_frames)
    n_steps = xp.shape[0] // cfg.step_frames
    zero = np.zeros((1, xp.shape[1]))
    hyp = IncrementalHypothesis()
    with nx.no_grad():
        for n in range(n_steps):
            lo = n * cfg.step_frames
            seg = np.concatenate([xp[lo:lo + cfg.step_frames], zero])
            enc, _ = encode(model.encoder, seg)
            enc = nx.reshape(enc, (1,) + enc.shape)
            keys = model.scorer.keys(enc)
            state = model.decoder.zero_state(1)
            prev, emitted = SOS_ID, []
            for _ in range(K):
                dist, state, _ = model.decoder.step(model.scorer, np.array([prev]), state, enc, keys)
                prev = int(np.argmax(dist.data[0]))
                emitted.append(prev)
                if prev in (EOS_ID, BLANK_ID):
                    break
            hyp.steps.append(emitted)
            hyp.offsets.append(lo + cfg.step_frames)
    return hyp


def save_hypotheses(records: Sequence[tuple[str, IncrementalHypothesis]], vocab: Vocabulary, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps(h.to_record(uid, vocab), ensure_ascii=False) for uid, h in records]
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")

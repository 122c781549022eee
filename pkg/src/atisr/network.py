"""Layers of the attention encoder-decoder.

The encoder is an affine+tanh input projection followed by three
bidirectional LSTM layers; after each layer every second timestep is kept,
so one encoder state covers ``BLOCK_FRAMES`` = 8 input frames.  The decoder
embeds the previous token, runs an LSTM cell fed with the previous attention
context, attends over the encoder states and projects ``[h; context]`` to a
softmax over the vocabulary.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from . import numerics as nx
from .errors import ConfigurationError, DataError, DimensionError
from .numerics import Tensor

N_LAYERS = 3
BLOCK_FRAMES = 2 ** N_LAYERS
LOG_FLOOR = 1e-12
SCORER_KINDS = ("dot", "bilinear", "mlp")


@dataclass
class ArchConfig:
    """Architecture hyperparameters.  Defaults are the full-size model."""

    feat_dim: int
    vocab_size: int
    proj_dim: int = 512
    enc_hidden: int = 256  # per direction
    dec_hidden: int = 256
    emb_dim: int = 256
    att_dim: int = 128
    scorer: str = "mlp"

    @property
    def enc_dim(self) -> int:
        return 2 * self.enc_hidden

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        return cls(**d)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


def param(data, name: str) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


class Module:
    """Minimal parameter container; subclasses list their children in ``_children``."""

    _children: tuple[str, ...] = ()
    _params: tuple[str, ...] = ()

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for p in self._params:
            out[prefix + p] = getattr(self, p)
        for c in self._children:
            child = getattr(self, c)
            if isinstance(child, list):
                for i, m in enumerate(child):
                    out.update(m.named_parameters(f"{prefix}{c}.{i}."))
            else:
                out.update(child.named_parameters(f"{prefix}{c}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())


class Affine(Module):
    _params = ("W", "b")

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        self.W = param(glorot(rng, n_in, n_out), "W")
        self.b = param(np.zeros(n_out), "b")

    def __call__(self, x: Tensor) -> Tensor:
        return nx.matmul(x, self.W) + self.b


class Embedding(Module):
    _params = ("table",)

    def __init__(self, n_tokens: int, dim: int, rng: np.random.Generator):
        self.table = param(glorot(rng, n_tokens, dim), "table")

    def __call__(self, ids) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.table.shape[0]):
            raise DataError(f"token id outside vocabulary of size {self.table.shape[0]}: {ids.tolist()}")
        return nx.embed(self.table, ids)


class LSTM(Module):
    """LSTM weights; ``W`` stacks input and recurrent weights as (I + H, 4H)."""

    _params = ("W", "b")

    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator):
        self.n_in, self.hidden = n_in, hidden
        self.W = param(glorot(rng, n_in + hidden, 4 * hidden), "W")
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = 1.0  # forget gate
        self.b = param(b, "b")

    def scan(self, xs: Tensor, h0: Tensor, c0: Tensor) -> Tensor:
        return nx.lstm_scan(xs, h0, c0, self.W, self.b)

    def cell(self, x: Tensor, h: Tensor, c: Tensor) -> Tensor:
        return nx.lstm_cell(x, h, c, self.W, self.b)


# ----------------------------------------------------------------------------
# encoder


class EncoderStack(Module):
    _children = ("proj", "fwd", "bwd")

    def __init__(self, feat_dim: int, proj_dim: int, hidden: int, rng: np.random.Generator):
        self.feat_dim, self.hidden = feat_dim, hidden
        self.proj = Affine(feat_dim, proj_dim, rng)
        self.fwd, self.bwd = [], []
        n_in = proj_dim
        for _ in range(N_LAYERS):
            self.fwd.append(LSTM(n_in, hidden, rng))
            self.bwd.append(LSTM(n_in, hidden, rng))
            n_in = 2 * hidden

    @property
    def out_dim(self) -> int:
        return 2 * self.hidden

    def _check_dim(self, d: int):
        if d != self.feat_dim:
            raise ConfigurationError(f"feature dim {d} does not match encoder input {self.feat_dim}")

    def zero_carry(self, batch: int) -> list[Tensor]:
        return [Tensor(np.zeros((batch, 2 * self.hidden))) for _ in range(N_LAYERS)]

    def encode_windows(self, xw: np.ndarray, carry: list[Tensor] | None = None,
                       keep: bool = True) -> tuple[Tensor, list[Tensor]]:
        """Encode fixed-width windows.

        ``xw`` is (N, W, B, D): N consecutive windows of W frames for B
        streams, W a multiple of 8.  The forward direction of every layer
        runs through the windows in order, threading its state from window
        to window when ``keep`` (starting from ``carry``), or restarting at
        zeros in each window otherwise.  The backward direction always
        restarts at zeros inside each window.

        Returns encoder states (N, W/8, B, 2H) and the per-layer forward
        carry ``[h; c]`` (B, 2H) after the last window.
        """
        N, W, B, D = xw.shape
        self._check_dim(D)
        if W % BLOCK_FRAMES:
            raise DimensionError(f"window width {W} is not a multiple of {BLOCK_FRAMES}")
        H = self.hidden
        u = nx.tanh(self.proj(Tensor(xw)))
        carry = carry if carry is not None else self.zero_carry(B)
        new_carry = []
        for layer in range(N_LAYERS):
            w = u.shape[1]
            F = u.shape[3]
            per_window = nx.reshape(nx.transpose(u, (1, 0, 2, 3)), (w, N * B, F))
            if keep:
                c0 = carry[layer]
                out = self.fwd[layer].scan(nx.reshape(u, (N * w, B, F)), c0[:, :H], c0[:, H:])
                new_carry.append(out[-1])
                hf = nx.reshape(out[:, :, :H], (N, w, B, H))
            else:
                zeros = Tensor(np.zeros((N * B, H)))
                out = self.fwd[layer].scan(per_window, zeros, zeros)
                last = nx.reshape(out[-1], (N, B, 2 * H))
                new_carry.append(last[N - 1])
                hf = nx.transpose(nx.reshape(out[:, :, :H], (w, N, B, H)), (1, 0, 2, 3))
            zeros = Tensor(np.zeros((N * B, H)))
            rev = self.bwd[layer].scan(per_window[::-1], zeros, zeros)
            hb = nx.transpose(nx.reshape(rev[::-1, :, :H], (w, N, B, H)), (1, 0, 2, 3))
            u = nx.concat([hf, hb], axis=-1)[:, 0::2]
        return u, new_carry

    def encode_batch(self, x: np.ndarray, lengths: np.ndarray) -> Tensor:
        """Encode a zero-padded batch (S, B, D) of whole utterances.

        ``lengths`` are multiples of 8; the backward direction of each
        sequence starts at its own last valid frame, so outputs inside the
        valid region do not depend on the padding.  Returns (S/8, B, 2H).
        """
        S, B, D = x.shape
        self._check_dim(D)
        lengths = np.asarray(lengths, dtype=np.int64)
        if S % BLOCK_FRAMES or np.any(lengths % BLOCK_FRAMES) or np.any(lengths > S):
            raise DimensionError("padded batch lengths must be multiples of 8 within the batch length")
        H = self.hidden
        u = nx.tanh(self.proj(Tensor(x)))
        for layer in range(N_LAYERS):
            T = u.shape[0]
            zeros = Tensor(np.zeros((B, H)))
            hf = self.fwd[layer].scan(u, zeros, zeros)[:, :, :H]
            t = np.arange(T)[:, None]
            idx = np.where(t < lengths[None, :], lengths[None, :] - 1 - t, t)
            rev = self.bwd[layer].scan(nx.take_time(u, idx), zeros, zeros)[:, :, :H]
            hb = nx.take_time(rev, idx)
            u = nx.concat([hf, hb], axis=-1)[0::2]
            lengths = lengths // 2
        return u


def pad_frames(x: np.ndarray, multiple: int = BLOCK_FRAMES) -> np.ndarray:
    """Right-pad (S, D) features with zero frames to a multiple of ``multiple``."""
    S = x.shape[0]
    target = -(-S // multiple) * multiple
    if target == S:
        return x
    return np.concatenate([x, np.zeros((target - S, x.shape[1]))], axis=0)


def encode(stack: EncoderStack, x: np.ndarray, carry: list[Tensor] | None = None
           ) -> tuple[Tensor, list[Tensor]]:
    """Encode one utterance (S, D) into ceil(S/8) states of size 2H.

    With ``carry`` (keep-state mode) the forward directions start from it;
    otherwise from zeros.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise DimensionError(f"expected (S, D) features with S >= 1, got {x.shape}")
    stack._check_dim(x.shape[1])
    xp = pad_frames(x)
    enc, carry = stack.encode_windows(xp[None, :, None, :], carry, keep=True)
    return enc[0, :, 0], carry


# ----------------------------------------------------------------------------
# attention


class AttentionScorer(Module):
    """Score(h_e, h_d) as a dot product, bilinear form or one-hidden-layer MLP."""

    def __init__(self, kind: str, enc_dim: int, dec_dim: int, att_dim: int,
                 rng: np.random.Generator):
        if kind not in SCORER_KINDS:
            raise ConfigurationError(f"unknown scorer {kind!r}; expected one of {SCORER_KINDS}")
        if kind == "dot" and enc_dim != dec_dim:
            raise ConfigurationError(f"dot scoring needs equal sizes, got M={enc_dim}, N={dec_dim}")
        self.kind, self.enc_dim, self.dec_dim, self.att_dim = kind, enc_dim, dec_dim, att_dim
        if kind == "bilinear":
            self.W = param(glorot(rng, enc_dim, dec_dim), "W")
            self._params = ("W",)
        elif kind == "mlp":
            self.W = param(glorot(rng, enc_dim + dec_dim, att_dim), "W")
            self.v = param(glorot(rng, att_dim, 1)[:, 0], "v")
            self._params = ("W", "v")

    def score(self, h_e: Tensor, h_d: Tensor) -> Tensor:
        """Score for a single encoder/decoder state pair."""
        h_e, h_d = nx.as_tensor(h_e), nx.as_tensor(h_d)
        if h_e.shape != (self.enc_dim,) or h_d.shape != (self.dec_dim,):
            raise DimensionError(f"score expects ({self.enc_dim},), ({self.dec_dim},); "
                                 f"got {h_e.shape}, {h_d.shape}")
        if self.kind == "dot":
            return nx.dot(h_e, h_d)
        if self.kind == "bilinear":
            return nx.dot(h_e, nx.matmul(nx.reshape(h_d, (1, -1)), nx.transpose(self.W, (1, 0)))[0])
        hidden = nx.tanh(nx.matmul(nx.reshape(nx.concat([h_e, h_d]), (1, -1)), self.W))
        return nx.dot(hidden[0], self.v)

    def keys(self, enc: Tensor) -> Tensor:
        """Per-utterance precomputation over encoder states (B, S, M)."""
        if self.kind == "dot":
            return enc
        if self.kind == "bilinear":
            return nx.matmul(enc, self.W)
        return nx.matmul(enc, self.W[:self.enc_dim])

    def scores(self, keys: Tensor, h_d: Tensor) -> Tensor:
        """Scores (B, S) of decoder states (B, N) against precomputed keys."""
        B, S = keys.shape[0], keys.shape[1]
        if self.kind in ("dot", "bilinear"):
            return nx.reshape(nx.matmul(keys, nx.reshape(h_d, (B, -1, 1))), (B, S))
        q = nx.matmul(h_d, self.W[self.enc_dim:])
        e = nx.tanh(keys + nx.reshape(q, (B, 1, -1)))
        return nx.reshape(nx.matmul(e, nx.reshape(self.v, (-1, 1))), (B, S))


def attend(scorer: AttentionScorer, enc: Tensor, keys: Tensor, h_d: Tensor,
           mask_add: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Batched context vectors (B, M) and weights (B, S)."""
    if enc.shape[1] == 0:
        raise DimensionError("attention over an empty encoder sequence")
    B, S, M = enc.shape
    a = nx.softmax(scorer.scores(keys, h_d), axis=-1, mask_add=mask_add)
    ctx = nx.reshape(nx.matmul(nx.reshape(a, (B, 1, S)), enc), (B, M))
    return ctx, a


def attention_score(scorer: AttentionScorer, h_e, h_d) -> Tensor:
    return scorer.score(h_e, h_d)


def attention_context(scorer: AttentionScorer, enc_states, h_d) -> tuple[Tensor, Tensor]:
    """Context c_t (M,) and weights a_t (S',) for one decoder state."""
    enc_states, h_d = nx.as_tensor(enc_states), nx.as_tensor(h_d)
    if enc_states.ndim != 2 or enc_states.shape[0] == 0:
        raise DimensionError("attention over an empty encoder sequence")
    S, M = enc_states.shape
    enc = nx.reshape(enc_states, (1, S, M))
    ctx, a = attend(scorer, enc, scorer.keys(enc), nx.reshape(h_d, (1, -1)))
    return ctx[0], a[0]


# ----------------------------------------------------------------------------
# decoder


class DecoderState(NamedTuple):
    h: Tensor
    c: Tensor
    ctx: Tensor  # previous attention context, fed back as input


class DecoderCell(Module):
    _children = ("embedding", "rnn", "out")

    def __init__(self, vocab_size: int, emb_dim: int, hidden: int, enc_dim: int,
                 rng: np.random.Generator):
        self.vocab_size, self.hidden, self.enc_dim = vocab_size, hidden, enc_dim
        self.embedding = Embedding(vocab_size, emb_dim, rng)
        self.rnn = LSTM(emb_dim + enc_dim, hidden, rng)
        self.out = Affine(hidden + enc_dim, vocab_size, rng)

    def zero_state(self, batch: int) -> DecoderState:
        z = np.zeros((batch, self.hidden))
        return DecoderState(Tensor(z), Tensor(z), Tensor(np.zeros((batch, self.enc_dim))))

    def step(self, scorer: AttentionScorer, prev_ids, state: DecoderState, enc: Tensor,
             keys: Tensor, mask_add: np.ndarray | None = None
             ) -> tuple[Tensor, DecoderState, Tensor]:
        """One batched decoder step.  Returns (dist (B, C), new state, weights (B, S))."""
        H = self.hidden
        x = nx.concat([self.embedding(prev_ids), state.ctx], axis=-1)
        hc = self.rnn.cell(x, state.h, state.c)
        h, c = hc[:, :H], hc[:, H:]
        ctx, a = attend(scorer, enc, keys, h, mask_add)
        dist = nx.softmax(self.out(nx.concat([h, ctx], axis=-1)), axis=-1)
        return dist, DecoderState(h, c, ctx), a


def decode_step(cell: DecoderCell, scorer: AttentionScorer, prev_token: int,
                dec_state: DecoderState, enc_states: Tensor
                ) -> tuple[Tensor, DecoderState, Tensor]:
    """Unbatched convenience wrapper: ``enc_states`` is (S', M)."""
    if not 0 <= int(prev_token) < cell.vocab_size:
        raise DataError(f"unknown token id {prev_token}")
    enc_states = nx.as_tensor(enc_states)
    enc = nx.reshape(enc_states, (1,) + enc_states.shape)
    dist, state, a = cell.step(scorer, np.array([prev_token]), dec_state, enc, scorer.keys(enc))
    return dist[0], state, a[0]


def cross_entropy_loss(pred: Tensor, targets, weights: np.ndarray | None = None) -> Tensor:
    """Mean negative log-probability of the targets.

    ``pred`` holds probability rows (..., C); ``targets`` has the leading
    shape.  ``weights`` (same shape as targets) replaces the uniform 1/T
    average, e.g. to exclude padding.
    """
    targets = np.asarray(targets, dtype=np.int64)
    C = pred.shape[-1]
    bad = np.argwhere((targets < 0) | (targets >= C))
    if len(bad):
        pos = tuple(int(i) for i in bad[0])
        raise DataError(f"target {int(targets[pos])} at position {pos} outside vocabulary of size {C}")
    nll = -nx.log(nx.pick(pred, targets), floor=LOG_FLOOR)
    if weights is None:
        return nx.mean(nll)
    return nx.tensor_sum(nll * Tensor(weights))

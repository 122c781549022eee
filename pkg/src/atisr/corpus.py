"""Vocabulary, datasets, the synthetic speech-like task, and log-mel features.

On-disk formats:

* feature file: ``b"ATFX"``, then version, frame count and dim as uint32
  little-endian, then row-major float32 little-endian data;
* dataset manifest: JSON lines ``{id, feature_path, frames, dim, transcript}``
  (plus an optional ``sha256`` of the feature file), paths relative to the
  manifest;
* vocabulary file: one token per line in id order.
"""
from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, GenerationError, IntegrityError
from .numerics import make_rng

log = logging.getLogger(__name__)

PAD, SOS, EOS, BOB, EOB, BLANK, UNK = "<pad>", "<s>", "</s>", "<m>", "</m>", "<blank>", "<unk>"
SPECIALS = (PAD, SOS, EOS, BOB, EOB, BLANK, UNK)
PAD_ID, SOS_ID, EOS_ID, BOB_ID, EOB_ID, BLANK_ID, UNK_ID = range(len(SPECIALS))
FIRST_CHAR_ID = len(SPECIALS)

FEATURE_MAGIC = b"ATFX"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIII")


class Vocabulary:
    """Reserved special tokens at ids 0..6, then characters."""

    def __init__(self, chars: Iterable[str]):
        chars = [c for c in chars if c not in SPECIALS]
        if len(set(chars)) != len(chars):
            raise DataError("duplicate characters in vocabulary")
        self.tokens: list[str] = list(SPECIALS) + chars
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    @property
    def chars(self) -> list[str]:
        return self.tokens[len(SPECIALS):]

    def encode(self, text: str | Sequence[str]) -> list[int]:
        """Characters (or token strings) to ids; unknown characters map to ``<unk>``."""
        ids = []
        for ch in text:
            i = self.index.get(ch)
            if i is None:
                log.warning("character %r not in vocabulary; using <unk>", ch)
                i = UNK_ID
            ids.append(i)
        return ids

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[int(i)] for i in ids]

    def to_text(self, ids: Iterable[int]) -> str:
        """Join character tokens, dropping special symbols."""
        return "".join(self.tokens[int(i)] for i in ids if int(i) >= len(SPECIALS))

    def is_special(self, i: int) -> bool:
        return int(i) < len(SPECIALS)

    def save(self, path):
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines = lines[:-1]
        if tuple(lines[:len(SPECIALS)]) != SPECIALS:
            raise IntegrityError(f"{path}: vocabulary does not start with the reserved tokens")
        return cls(lines[len(SPECIALS):])


@dataclass
class Utterance:
    id: str
    features: np.ndarray  # (S, D)
    transcript: str

    @property
    def frames(self) -> int:
        return self.features.shape[0]


@dataclass
class Dataset:
    utterances: list[Utterance] = field(default_factory=list)

    def __len__(self):
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    def __getitem__(self, i):
        return self.utterances[i]

    @property
    def ids(self) -> list[str]:
        return [u.id for u in self.utterances]


# ----------------------------------------------------------------------------
# synthetic task


@dataclass
class SyntheticSpec:
    alphabet_size: int = 10
    min_chars: int = 30
    max_chars: int = 60
    min_frames_per_char: int = 8
    max_frames_per_char: int = 24
    feat_dim: int = 16
    noise: float = 0.5
    template_scale: float = 1.0
    n_train: int = 200
    n_dev: int = 50
    n_test: int = 50
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def make_templates(spec: SyntheticSpec) -> np.ndarray:
    """Per-character mean frames; raises if any pair is closer than 4 sigma."""
    if spec.alphabet_size < 2:
        raise GenerationError("alphabet needs at least two characters")
    rng = make_rng(spec.seed)
    T = rng.normal(0.0, spec.template_scale, size=(spec.alphabet_size, spec.feat_dim))
    d = np.linalg.norm(T[:, None] - T[None], axis=-1)
    closest = d[np.triu_indices(spec.alphabet_size, 1)].min()
    if not closest > 4 * spec.noise:
        raise GenerationError(f"templates too close: min distance {closest:.3f} <= 4*sigma={4 * spec.noise:.3f}")
    return T


def alphabet(n: int) -> list[str]:
    return [chr(ord("a") + i) for i in range(n)]


def generate_synthetic(spec: SyntheticSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Sample train/dev/test splits deterministically from ``spec.seed``.

    Each character is a run of frames equal to its template plus Gaussian
    noise.  Adjacent characters always differ so that run boundaries are
    recoverable from the frames.
    """
    if not (1 <= spec.min_chars <= spec.max_chars):
        raise GenerationError("invalid character-count range")
    if not (1 <= spec.min_frames_per_char <= spec.max_frames_per_char):
        raise GenerationError("invalid frames-per-character range")
    templates = make_templates(spec)
    letters = alphabet(spec.alphabet_size)
    total = spec.n_train + spec.n_dev + spec.n_test
    rng = make_rng(spec.seed + 1)
    utts = []
    for k in range(total):
        n = int(rng.integers(spec.min_chars, spec.max_chars + 1))
        chars = [int(rng.integers(spec.alphabet_size))]
        for _ in range(n - 1):
            c = int(rng.integers(spec.alphabet_size - 1))
            chars.append(c + (c >= chars[-1]))
        runs = rng.integers(spec.min_frames_per_char, spec.max_frames_per_char + 1, size=n)
        means = np.repeat(templates[chars], runs, axis=0)
        feats = means + spec.noise * rng.normal(size=means.shape)
        utts.append(("".join(letters[c] for c in chars), feats))
    order = make_rng(spec.seed + 2).permutation(total)
    splits = []
    bounds = [0, spec.n_train, spec.n_train + spec.n_dev, total]
    for name, lo, hi in zip(("train", "dev", "test"), bounds[:-1], bounds[1:]):
        ds = Dataset([Utterance(f"{name}-{j:04d}", utts[i][1], utts[i][0])
                      for j, i in enumerate(sorted(order[lo:hi]))])
        splits.append(ds)
    return tuple(splits)


def synthetic_vocabulary(spec: SyntheticSpec) -> Vocabulary:
    return Vocabulary(alphabet(spec.alphabet_size))


# ----------------------------------------------------------------------------
# log-mel features


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int, fmin=0.0, fmax=None) -> np.ndarray:
    """Triangular filters (n_mels, n_fft//2 + 1) with unit peak, equally spaced in mel."""
    fmax = fmax or sample_rate / 2
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs - lo) / (mid - lo)
    down = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def mel_centers(n_mels: int, sample_rate: int, fmin=0.0, fmax=None) -> np.ndarray:
    fmax = fmax or sample_rate / 2
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))[1:-1]


def mel_features(waveform, sample_rate: int = 16000, n_mels: int = 80, window_ms: float = 50.0,
                 shift_ms: float = 12.5, floor: float = 1e-10) -> np.ndarray:
    """Log-mel spectrogram, one row per frame.

    Frames are ``window_ms`` long (Hann-windowed) every ``shift_ms``; the
    frame count is ``floor((len - window) / shift) + 1``.
    """
    x = np.asarray(waveform, dtype=np.float64)
    win = int(round(sample_rate * window_ms / 1000.0))
    hop = int(round(sample_rate * shift_ms / 1000.0))
    if x.ndim != 1 or len(x) < win:
        raise DataError(f"waveform of {len(x)} samples is shorter than one {win}-sample window")
    n_frames = (len(x) - win) // hop + 1
    n_fft = 1 << (win - 1).bit_length()
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = x[idx] * np.hanning(win)
    mag = np.abs(np.fft.rfft(frames, n=n_fft, axis=-1))
    mel = mag @ mel_filterbank(n_mels, n_fft, sample_rate).T
    return np.log(np.maximum(mel, floor))


# ----------------------------------------------------------------------------
# file formats


def write_features(path, feats: np.ndarray):
    feats = np.asarray(feats)
    S, D = feats.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, S, D))
        f.write(np.ascontiguousarray(feats, dtype="<f4").tobytes())


def read_features(path, frames: int | None = None, dim: int | None = None) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise IntegrityError(f"feature file missing: {path}")
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise IntegrityError(f"{path}: truncated header")
    magic, version, S, D = _HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC or version != FEATURE_VERSION:
        raise IntegrityError(f"{path}: not an ATFX v{FEATURE_VERSION} feature file")
    if (frames is not None and S != frames) or (dim is not None and D != dim):
        raise IntegrityError(f"{path}: shape ({S}, {D}) does not match manifest ({frames}, {dim})")
    body = raw[_HEADER.size:]
    if len(body) != 4 * S * D:
        raise IntegrityError(f"{path}: expected {4 * S * D} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(S, D).astype(np.float64)


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_dataset(dataset: Dataset, path, feature_dir: str | None = None):
    """Write features (float32) and a JSON-lines manifest at ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fdir = path.parent / (feature_dir or (path.stem + "_feats"))
    fdir.mkdir(parents=True, exist_ok=True)
    lines = []
    for u in dataset:
        fp = fdir / f"{u.id}.atfx"
        write_features(fp, u.features)
        rec = {"id": u.id, "feature_path": str(fp.relative_to(path.parent)),
               "frames": int(u.frames), "dim": int(u.features.shape[1]),
               "transcript": u.transcript, "sha256": file_sha256(fp)}
        lines.append(json.dumps(rec, ensure_ascii=False))
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def load_dataset(path) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise IntegrityError(f"manifest missing: {path}")
    utts = []
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            fp = path.parent / rec["feature_path"]
            frames, dim = int(rec["frames"]), int(rec["dim"])
        except (ValueError, KeyError) as e:
            raise IntegrityError(f"{path}:{n}: malformed manifest record ({e})") from e
        feats = read_features(fp, frames, dim)
        if "sha256" in rec and file_sha256(fp) != rec["sha256"]:
            raise IntegrityError(f"{fp}: hash mismatch")
        utts.append(Utterance(rec["id"], feats, rec["transcript"]))
    return Dataset(utts)


def quantize(ds: Dataset) -> Dataset:
    """Round features to float32 precision, as they would be after a save/load."""
    return Dataset([Utterance(u.id, u.features.astype(np.float32).astype(np.float64), u.transcript)
                    for u in ds])

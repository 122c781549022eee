"""From a teacher attention matrix to per-step student targets.

The alignment step picks, among all non-decreasing row-to-block assignments,
the one with the largest summed attention weight.  Segmentation then gives
each incremental step the characters aligned to its main blocks followed by
``</m>``; the final step ends with ``</s>`` instead.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import IsrConfig
from .corpus import EOB_ID, EOS_ID, Dataset, Utterance, Vocabulary, read_features
from .errors import ConfigurationError, DataError, IntegrityError
from .network import BLOCK_FRAMES

log = logging.getLogger(__name__)

MAX_FAILURE_RATE = 0.10


@dataclass
class MonotonicAlignment:
    assignment: list[int]
    score: float

    def __len__(self):
        return len(self.assignment)


def extract_monotonic_alignment(A: np.ndarray) -> MonotonicAlignment:
    """Max-sum non-decreasing path through ``A`` (rows: outputs, cols: blocks).

    ``M[t, s] = A[t, s] + max_{s' <= s} M[t-1, s']``; backtracking always
    takes the smallest block index among equal scores.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.size == 0:
        raise DataError(f"attention matrix must be non-empty 2-D, got shape {A.shape}")
    T, S = A.shape
    M = np.empty((T, S))
    M[0] = A[0]
    for t in range(1, T):
        M[t] = A[t] + np.maximum.accumulate(M[t - 1])
    path = [0] * T
    s = int(np.argmax(M[T - 1]))
    path[T - 1] = s
    for t in range(T - 1, 0, -1):
        s = int(np.argmax(M[t - 1, :s + 1]))
        path[t - 1] = s
    return MonotonicAlignment(path, float(M[T - 1, path[T - 1]]))


def alignment_score(A: np.ndarray, assignment: Sequence[int]) -> float:
    total = 0.0
    for t, s in enumerate(assignment):
        total += A[t, s]
    return float(total)


@dataclass
class Step:
    start: int  # frame range of the input window, relative to the utterance
    end: int
    targets: list[int]


@dataclass
class SegmentedExample:
    utt_id: str
    steps: list[Step]
    cfg: IsrConfig

    def flat_targets(self) -> list[int]:
        return [t for st in self.steps for t in st.targets]

    def chars(self) -> list[int]:
        return [t for t in self.flat_targets() if t not in (EOB_ID, EOS_ID)]


def segment_targets(align: MonotonicAlignment | Sequence[int], transcript: Sequence[int],
                    cfg: IsrConfig, total_blocks: int, utt_id: str = "") -> SegmentedExample:
    """Split a transcript (token ids, without ``</s>``) into per-step targets.

    ``align`` has one block per transcript token plus one for ``</s>``; the
    ``</s>`` entry is moved to the last block regardless of where it landed.
    """
    assignment = list(align.assignment if isinstance(align, MonotonicAlignment) else align)
    transcript = list(transcript)
    if len(assignment) != len(transcript) + 1:
        raise DataError(f"alignment has {len(assignment)} entries for {len(transcript)} "
                        "characters (expected one extra for </s>)")
    if total_blocks < 1:
        raise DataError("total_blocks must be >= 1")
    if any(b < 0 or b >= total_blocks for b in assignment):
        raise DataError("alignment block index outside the utterance")
    n_steps = cfg.n_steps(total_blocks)
    per_step: list[list[int]] = [[] for _ in range(n_steps)]
    for tok, block in zip(transcript, assignment):
        per_step[block // cfg.main_blocks].append(tok)
    steps = []
    for n, chars in enumerate(per_step):
        start, end = cfg.window(n)
        end_tok = EOS_ID if n == n_steps - 1 else EOB_ID
        steps.append(Step(start, end, chars + [end_tok]))
    return SegmentedExample(utt_id, steps, cfg)


def total_blocks(frames: int) -> int:
    return -(-frames // BLOCK_FRAMES)


@dataclass
class StudentDataset:
    """Segmented examples with their features and a provenance header."""

    cfg: IsrConfig
    teacher_hash: str
    examples: list[SegmentedExample] = field(default_factory=list)
    utterances: list[Utterance] = field(default_factory=list)
    failures: list[tuple[str, str]] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.examples)

    def items(self) -> list[tuple[SegmentedExample, Utterance]]:
        return list(zip(self.examples, self.utterances))

    def header(self) -> dict:
        return {"cfg": self.cfg.to_dict(), "teacher_hash": self.teacher_hash,
                "failures": [list(f) for f in self.failures], **self.extra}


def build_student_dataset(teacher, corpus: Dataset, cfg: IsrConfig) -> StudentDataset:
    """capture_alignment -> extract_monotonic_alignment -> segment_targets, per utterance."""
    from .seq2seq import capture_alignment

    out = StudentDataset(cfg, teacher.hash())
    for u in corpus:
        try:
            ids = teacher.vocab.encode(u.transcript)
            A = capture_alignment(teacher, u.features, ids)
            align = extract_monotonic_alignment(A)
            ex = segment_targets(align, ids, cfg, total_blocks(u.frames), u.id)
        except (DataError, ValueError) as e:
            log.warning("distillation failed for %s: %s", u.id, e)
            out.failures.append((u.id, str(e)))
            continue
        out.examples.append(ex)
        out.utterances.append(u)
    if len(corpus) and len(out.failures) > MAX_FAILURE_RATE * len(corpus):
        raise DataError(f"distillation failed for {len(out.failures)} of {len(corpus)} utterances")
    if out.failures:
        log.warning("distillation skipped %d utterances", len(out.failures))
    return out


def save_student_dataset(ds: StudentDataset, path, feature_paths: dict[str, str]):
    """Line-delimited JSON: a header record, then one record per utterance.

    ``feature_paths`` maps utterance id to a feature file path (stored
    relative to the output file).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps({"header": ds.header()}, sort_keys=True)]
    for ex, u in ds.items():
        ref = os.path.relpath(Path(feature_paths[ex.utt_id]).resolve(), path.parent.resolve())
        rec = {"id": ex.utt_id, "feature_path": ref, "frames": int(u.frames),
               "dim": int(u.features.shape[1]), "transcript": u.transcript,
               "steps": [{"start": s.start, "end": s.end, "targets": s.targets} for s in ex.steps]}
        lines.append(json.dumps(rec, ensure_ascii=False, sort_keys=True))
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def load_student_dataset(path) -> StudentDataset:
    path = Path(path)
    if not path.exists():
        raise IntegrityError(f"segmented dataset missing: {path}")
    lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines or "header" not in json.loads(lines[0]):
        raise IntegrityError(f"{path}: missing header record")
    header = json.loads(lines[0])["header"]
    cfg = IsrConfig.from_dict(header["cfg"])
    extra = {k: v for k, v in header.items() if k not in ("cfg", "teacher_hash", "failures")}
    ds = StudentDataset(cfg, header["teacher_hash"], failures=[tuple(f) for f in header["failures"]],
                        extra=extra)
    for ln in lines[1:]:
        rec = json.loads(ln)
        feats = read_features(path.parent / rec["feature_path"], rec["frames"], rec["dim"])
        steps = [Step(s["start"], s["end"], list(s["targets"])) for s in rec["steps"]]
        ds.examples.append(SegmentedExample(rec["id"], steps, cfg))
        ds.utterances.append(Utterance(rec["id"], feats, rec["transcript"]))
    return ds


def check_compatible(ds: StudentDataset, cfg: IsrConfig):
    if ds.cfg.segmentation_key() != cfg.segmentation_key():
        raise ConfigurationError(f"dataset was segmented with {ds.cfg.label()}, not {cfg.label()}")

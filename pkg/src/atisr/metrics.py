"""Character error rate, step delay and corpus-level evaluation reports."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from .config import IsrConfig
from .corpus import Dataset
from .errors import MetricError
from .network import BLOCK_FRAMES

log = logging.getLogger(__name__)

FRAME_SHIFT_MS = 12.5
FRAME_WINDOW_MS = 50.0
MODES = ("full", "isr", "baseline")


def edit_distance(ref, hyp) -> int:
    """Levenshtein distance with unit costs (two-row dynamic programme)."""
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def cer(reference: str, hypothesis: str) -> float:
    if not reference:
        if hypothesis:
            raise MetricError("CER is undefined for an empty reference and a non-empty hypothesis")
        return 0.0
    return edit_distance(reference, hypothesis) / len(reference)


def delay(cfg: IsrConfig) -> float:
    """Seconds of audio a step waits for: the span of its input window."""
    return utterance_span(BLOCK_FRAMES * cfg.window_blocks)


def utterance_span(frames: int) -> float:
    # milliseconds are exact in binary here, so one division rounds correctly
    return ((frames - 1) * FRAME_SHIFT_MS + FRAME_WINDOW_MS) / 1000.0


def round2(x: float) -> float:
    """Half-up rounding at two decimals, as printed in result tables."""
    return float(Decimal(repr(x)).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


@dataclass
class EvalReport:
    mode: str
    corpus_cer: float
    total_edits: int
    total_ref_chars: int
    delay_s: float
    per_utterance: dict[str, float] = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    model_hash: str = ""
    warnings: list[str] = field(default_factory=list)
    hypotheses: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"mode": self.mode, "corpus_cer": self.corpus_cer, "total_edits": self.total_edits,
                "total_ref_chars": self.total_ref_chars, "delay_s": self.delay_s,
                "per_utterance": dict(sorted(self.per_utterance.items())), "config": self.config,
                "model_hash": self.model_hash, "warnings": self.warnings,
                "hypotheses": dict(sorted(self.hypotheses.items()))}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def evaluate(model, dataset: Dataset, mode: str = "full", cfg: IsrConfig | None = None,
             max_len: int = 300) -> EvalReport:
    """Decode every utterance and aggregate micro-averaged CER."""
    from .isr import baseline_isr_decode, isr_decode
    from .seq2seq import greedy_decode

    if mode not in MODES:
        raise MetricError(f"unknown mode {mode!r}; expected one of {MODES}")
    cfg = cfg or IsrConfig()
    warnings = []
    role = model.meta.get("role") if hasattr(model, "meta") else None
    if mode == "baseline" and role == "student":
        warnings.append("baseline decoding of a model trained with </m> targets")
    if mode == "isr" and role == "teacher":
        warnings.append("incremental decoding of a full-utterance model")
    edits = chars = 0
    per_utt, hyps = {}, {}
    for u in dataset:
        if mode == "full":
            ids, _ = greedy_decode(model, u.features, max_len)
            text = model.vocab.to_text(ids)
        elif mode == "isr":
            text = isr_decode(model, u.features, cfg).transcript(model.vocab)
        else:
            text = baseline_isr_decode(model, u.features, cfg).transcript(model.vocab)
        e = edit_distance(u.transcript, text)
        edits += e
        chars += len(u.transcript)
        per_utt[u.id] = e / len(u.transcript) if u.transcript else 0.0
        hyps[u.id] = text
    if mode == "full":
        d = float(np.mean([utterance_span(u.frames) for u in dataset])) if len(dataset) else 0.0
    elif mode == "baseline":
        d = delay(IsrConfig(main_blocks=cfg.main_blocks, look_back=0, look_ahead=0))
    else:
        d = delay(cfg)
    config = {"mode": mode, "isr": cfg.to_dict() if mode != "full" else None}
    return EvalReport(mode, edits / chars if chars else 0.0, edits, chars, d, per_utt, config,
                      model.hash() if hasattr(model, "hash") else "", warnings, hyps)


def format_table(rows: list[tuple[str, EvalReport]]) -> str:
    """Plain-text table: label, delay, CER (%)."""
    width = max([len("System")] + [len(r[0]) for r in rows])
    lines = [f"{'System':<{width}}  {'Delay (sec)':>11}  {'CER (%)':>8}",
             "-" * (width + 23)]
    for label, rep in rows:
        lines.append(f"{label:<{width}}  {round2(rep.delay_s):>11.2f}  {100 * rep.corpus_cer:>8.2f}")
    return "\n".join(lines) + "\n"

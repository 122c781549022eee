#!/usr/bin/env python3
# From teacher attention to per-step targets.
#
# We fit a tiny full-utterance model on short synthetic utterances, read its
# teacher-forced attention matrix on one of them, pick the best monotonic
# path through it, and cut the transcript into per-block targets.

from dataclasses import replace

import numpy as np

from atisr.config import IsrConfig
from atisr.corpus import SyntheticSpec, generate_synthetic, synthetic_vocabulary
from atisr.distill import extract_monotonic_alignment, segment_targets, total_blocks
from atisr.network import ArchConfig
from atisr.seq2seq import TrainConfig, capture_alignment, train_teacher

spec = replace(SyntheticSpec(), min_chars=3, max_chars=6, n_train=120, n_dev=10, n_test=1,
               min_frames_per_char=8, max_frames_per_char=16)
train, dev, test = generate_synthetic(spec)
vocab = synthetic_vocabulary(spec)
arch = ArchConfig(feat_dim=spec.feat_dim, vocab_size=len(vocab), proj_dim=24, enc_hidden=24,
                  dec_hidden=32, emb_dim=12, att_dim=16)
print("training a tiny teacher (about a minute)...")
teacher, log = train_teacher(train, dev, vocab, arch, TrainConfig(epochs=20, batch_size=10, lr=5e-3))
print(f"best dev loss {log.epochs[log.best_epoch]['dev_loss']:.3f}")

u = test[0]
A = capture_alignment(teacher, u.features, u.transcript)
np.set_printoptions(precision=2, suppress=True, linewidth=120)
print(f"\nutterance {u.transcript!r}: {u.frames} frames -> {A.shape[1]} blocks")
print("attention rows (one per output, last is </s>):")
print(A)

align = extract_monotonic_alignment(A)
print("\nmonotonic block per output:", align.assignment, f"score {align.score:.2f}")

cfg = IsrConfig(main_blocks=1, look_back=0, look_ahead=1)
ex = segment_targets(align, vocab.encode(u.transcript), cfg, total_blocks(u.frames))
for n, st in enumerate(ex.steps):
    print(f"step {n}: frames [{st.start:4d}, {st.end:4d})  targets {' '.join(vocab.decode(st.targets))}")

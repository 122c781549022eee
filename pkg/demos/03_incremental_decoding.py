#!/usr/bin/env python3
# Teacher -> distillation -> student -> incremental decoding, end to end.
#
# Everything is tiny so it runs in a few minutes on one core; the numbers are
# not meant to be good, only to show the moving parts.

from dataclasses import replace

from atisr.config import IsrConfig
from atisr.corpus import SyntheticSpec, generate_synthetic, synthetic_vocabulary
from atisr.distill import build_student_dataset
from atisr.isr import baseline_isr_decode, isr_decode, train_student
from atisr.metrics import evaluate, format_table
from atisr.network import ArchConfig
from atisr.seq2seq import TrainConfig, train_teacher

spec = replace(SyntheticSpec(), min_chars=4, max_chars=8, n_train=120, n_dev=10, n_test=10,
               min_frames_per_char=8, max_frames_per_char=16)
train, dev, test = generate_synthetic(spec)
vocab = synthetic_vocabulary(spec)
arch = ArchConfig(feat_dim=spec.feat_dim, vocab_size=len(vocab), proj_dim=24, enc_hidden=24,
                  dec_hidden=32, emb_dim=12, att_dim=16)
hyper = TrainConfig(epochs=20, batch_size=10, lr=5e-3)

print("teacher...")
teacher, _ = train_teacher(train, dev, vocab, arch, hyper)

# one block per step, one block of look-ahead, recurrent state kept across steps
cfg = IsrConfig(main_blocks=1, look_back=0, look_ahead=1, state_policy="keep")
print("distilling alignments and training the student...")
student, _ = train_student(build_student_dataset(teacher, train, cfg),
                           build_student_dataset(teacher, dev, cfg), arch, cfg, hyper, vocab)

u = test[0]
print(f"\nreference: {u.transcript}")
hyp = isr_decode(student, u.features, cfg)
for n, (toks, frames) in enumerate(zip(hyp.steps, hyp.offsets)):
    print(f"  step {n:2d} (after frame {frames:3d}): {' '.join(vocab.decode(toks))}")
print(f"AT-ISR   : {hyp.transcript(vocab)}")
print(f"baseline : {baseline_isr_decode(teacher, u.features, IsrConfig(1, 0, 0)).transcript(vocab)}")

print()
print(format_table([("Topline", evaluate(teacher, test, "full")),
                    ("Baseline ISR", evaluate(teacher, test, "baseline", IsrConfig(1, 0, 0))),
                    ("AT-ISR", evaluate(student, test, "isr", cfg))]), end="")

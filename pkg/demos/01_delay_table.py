#!/usr/bin/env python3
# How long does an incremental step wait before it can decode?
#
# A block is 8 feature frames.  Frames are 50 ms long and shifted by 12.5 ms,
# so a window of n frames spans (n - 1) * 12.5 ms + 50 ms of audio.

from atisr.config import IsrConfig
from atisr.metrics import delay, round2

print(f"{'look-back':>9} {'main':>4} {'look-ahead':>10} {'frames':>6} {'delay (s)':>9}")
for lb, la in [(0, 0), (0, 1), (0, 2), (1, 1), (2, 1), (0, 4), (4, 1)]:
    cfg = IsrConfig(main_blocks=1, look_back=lb, look_ahead=la)
    print(f"{lb:>9} {1:>4} {la:>10} {cfg.window_frames:>6} {round2(delay(cfg)):>9.2f}")

# Only the window width matters: one block of look-back costs exactly as much
# waiting as one block of look-ahead.

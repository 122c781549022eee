"""Incremental-recognition settings shared by distillation, the student and metrics."""
from __future__ import annotations

from dataclasses import asdict, dataclass

from .errors import ConfigurationError
from .network import BLOCK_FRAMES

STATE_POLICIES = ("keep", "reset")
INIT_POLICIES = ("begin_block_token", "last_prev_char")


@dataclass(frozen=True)
class IsrConfig:
    """One incremental step reads ``look_back + main_blocks + look_ahead``
    blocks of 8 frames and transcribes only the main blocks."""

    main_blocks: int = 1
    look_back: int = 0
    look_ahead: int = 1
    state_policy: str = "keep"
    init_policy: str = "last_prev_char"
    max_step_outputs: int = 30

    def __post_init__(self):
        if self.main_blocks < 1:
            raise ConfigurationError("main_blocks must be >= 1")
        if self.look_back < 0 or self.look_ahead < 0:
            raise ConfigurationError("look_back and look_ahead must be >= 0")
        if self.state_policy not in STATE_POLICIES:
            raise ConfigurationError(f"state_policy must be one of {STATE_POLICIES}")
        if self.init_policy not in INIT_POLICIES:
            raise ConfigurationError(f"init_policy must be one of {INIT_POLICIES}")
        if self.max_step_outputs < 1:
            raise ConfigurationError("max_step_outputs must be >= 1")

    @property
    def window_blocks(self) -> int:
        return self.look_back + self.main_blocks + self.look_ahead

    @property
    def window_frames(self) -> int:
        return BLOCK_FRAMES * self.window_blocks

    @property
    def step_frames(self) -> int:
        return BLOCK_FRAMES * self.main_blocks

    def n_steps(self, total_blocks: int) -> int:
        return -(-total_blocks // self.main_blocks)

    def window(self, step: int) -> tuple[int, int]:
        """Frame range [start, end) of a step's input; may extend past the utterance."""
        start = (step * self.main_blocks - self.look_back) * BLOCK_FRAMES
        return start, start + self.window_frames

    def segmentation_key(self) -> tuple[int, int, int]:
        return (self.main_blocks, self.look_back, self.look_ahead)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "IsrConfig":
        return cls(**d)

    def label(self) -> str:
        return (f"mb{self.main_blocks}-lb{self.look_back}-la{self.look_ahead}-"
                f"{self.state_policy}-{'last' if self.init_policy == 'last_prev_char' else 'm'}")

"""Attention-transfer incremental speech recognition on a numpy autodiff core."""

__version__ = "0.1.0"

"""Multiply-accumulate accounting for the encoder stack.

Counts, per layer and sequence length n: the QKV projections (3nH^2),
the attention output projection (nH^2), the score and context products
(2n^2H), and the feed-forward block (2nHI). Embedding lookups, layer
norm, softmax, and activations are excluded; those are not matmuls and
do not move the totals at the reported precision.
"""

from __future__ import annotations

from .encoder import EncoderConfig


def estimate_macs(config: EncoderConfig, seq_len: int) -> int:
    if seq_len < 1:
        raise ValueError(f"seq_len must be >= 1, got {seq_len}")
    n = seq_len
    H = config.hidden_size
    I = config.intermediate_size
    per_layer = 3 * n * H * H + n * H * H + 2 * n * n * H + 2 * n * H * I
    return config.num_layers * per_layer


def speedup(config: EncoderConfig, baseline: EncoderConfig, seq_len: int) -> float:
    """MAC ratio of baseline over config (>1 means config is cheaper)."""
    return estimate_macs(baseline, seq_len) / estimate_macs(config, seq_len)


def format_macs(macs: int) -> str:
    return f"{macs / 1e9:.2f}G"

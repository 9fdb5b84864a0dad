"""Dual-stream staircase attention for block-diffusion likelihood evaluation.

The combined input is ``[clean ; corrupted]`` (length ``2n``) and the mask is

    [[causal, 0    ],
     [stair,  intra]]

where ``stair`` lets target block k read clean blocks l < k and ``intra`` is
block diagonal.  One forward pass then yields every block's conditional
log-probabilities, matching K separate block-by-block passes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape
from .model import DenoiserParams, TokenSequence, bind_params, forward_hidden, embed_tokens


@dataclass(frozen=True)
class AttentionMask:
    matrix: np.ndarray
    block_size: int

    @property
    def n(self) -> int:
        return self.matrix.shape[0] // 2

    @property
    def num_blocks(self) -> int:
        return self.n // self.block_size

    @property
    def causal(self):
        return self.matrix[: self.n, : self.n]

    @property
    def upper_right(self):
        return self.matrix[: self.n, self.n:]

    @property
    def stair(self):
        return self.matrix[self.n:, : self.n]

    @property
    def intra(self):
        return self.matrix[self.n:, self.n:]

    def to_text(self) -> str:
        return "\n".join("".join(str(int(x)) for x in row) for row in self.matrix)


def build_staircase_mask(n: int, block_size: int) -> AttentionMask:
    if n <= 0 or block_size <= 0 or n % block_size:
        raise ValueError(f"block_size {block_size} must divide sequence length {n}")
    blk = np.arange(n) // block_size
    m = np.zeros((2 * n, 2 * n), dtype=np.int8)
    m[:n, :n] = np.tril(np.ones((n, n), dtype=np.int8))
    m[n:, :n] = blk[None, :] < blk[:, None]
    m[n:, n:] = blk[None, :] == blk[:, None]
    return AttentionMask(m, block_size)


def _check_layout(params: DenoiserParams, clean, corrupted):
    clean_tokens = np.asarray(getattr(clean, "tokens", clean), dtype=np.int64)
    target_tokens = np.asarray(getattr(corrupted, "tokens", corrupted), dtype=np.int64)
    n = len(clean_tokens)
    if len(target_tokens) != n:
        raise ValueError(f"clean length {n} != corrupted length {len(target_tokens)}")
    if n % params.block_size:
        raise ValueError(f"block_size {params.block_size} must divide sequence length {n}")
    if n > params.max_seq_len:
        raise ValueError("sequence exceeds max_seq_len")
    if (clean_tokens == params.mask_id).any():
        raise ValueError("clean stream contains mask tokens")
    return clean_tokens, target_tokens


def dual_stream_positions(n: int, convention: str = "shared") -> np.ndarray:
    if convention == "shared":
        return np.concatenate([np.arange(n), np.arange(n)])
    if convention == "offset":
        return np.arange(2 * n)
    raise ValueError(f"unknown position convention {convention!r}")


def staircase_forward(tape: Tape, params: DenoiserParams, clean, corrupted, convention="shared", bound=None):
    """Record the single dual-stream pass; returns (param tensors, hidden, log-probs of all 2n rows)."""
    clean_tokens, target_tokens = _check_layout(params, clean, corrupted)
    n = len(clean_tokens)
    p = bound if bound is not None else bind_params(tape, params)
    hidden = embed_tokens(tape, p, np.concatenate([clean_tokens, target_tokens]),
                          dual_stream_positions(n, convention))
    mask = build_staircase_mask(n, params.block_size).matrix
    return p, hidden, forward_hidden(tape, p, hidden, mask)


def staircase_block_logprobs(params: DenoiserParams, clean, corrupted_target, convention="shared") -> np.ndarray:
    tape = Tape(record=False)
    _, _, logp = staircase_forward(tape, params, clean, corrupted_target, convention)
    n = logp.shape[0] // 2
    return logp.value[n:]


def iterative_reference(params: DenoiserParams, clean, corrupted_target) -> np.ndarray:
    """K separate passes: block k sees clean blocks < k (causally) plus its own corrupted block."""
    clean_tokens, target_tokens = _check_layout(params, clean, corrupted_target)
    n, bs = len(clean_tokens), params.block_size
    out = np.empty((n, params.num_symbols))
    for start in range(0, n, bs):
        stop = start + bs
        tokens = np.concatenate([clean_tokens[:start], target_tokens[start:stop]])
        mask = np.zeros((stop, stop), dtype=np.int8)
        mask[:start, :start] = np.tril(np.ones((start, start), dtype=np.int8))
        mask[start:, :] = 1
        tape = Tape(record=False)
        p = bind_params(tape, params)
        hidden = embed_tokens(tape, p, tokens, np.arange(stop))
        out[start:stop] = forward_hidden(tape, p, hidden, mask).value[start:]
    return out

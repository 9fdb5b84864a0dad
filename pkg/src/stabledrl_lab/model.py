"""Toy masked denoiser: token + position embedding, one attention layer, output head.

The last vocabulary id is the mask token.  The output head only scores the
``vocab_size - 1`` real symbols, so the mask token can never be predicted.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import Tape, Tensor, log_softmax_rows

PARAM_ORDER = ("embed", "pos", "wq", "wk", "wv", "wo", "head", "head_bias")
CHECKPOINT_MAGIC = b"STABLEDRL-CKPT"
CHECKPOINT_VERSION = 1


@dataclass
class DenoiserParams:
    vocab_size: int
    embed_dim: int
    max_seq_len: int
    block_size: int
    seed: int = 0
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def mask_id(self) -> int:
        return self.vocab_size - 1

    @property
    def num_symbols(self) -> int:
        return self.vocab_size - 1

    def num_parameters(self) -> int:
        return sum(a.size for a in self.tensors.values())

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.tensors[k].ravel() for k in PARAM_ORDER])

    def from_vector(self, vec) -> "DenoiserParams":
        vec = np.asarray(vec, dtype=np.float64)
        out, offset = {}, 0
        for k in PARAM_ORDER:
            a = self.tensors[k]
            out[k] = vec[offset:offset + a.size].reshape(a.shape).copy()
            offset += a.size
        if offset != vec.size:
            raise ValueError(f"vector of size {vec.size} does not match {offset} parameters")
        return replace(self, tensors=out)

    def copy(self) -> "DenoiserParams":
        return replace(self, tensors={k: v.copy() for k, v in self.tensors.items()})


@dataclass
class TokenSequence:
    tokens: np.ndarray
    prompt_len: int = 0

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)

    def __len__(self):
        return len(self.tokens)

    @property
    def prompt(self):
        return self.tokens[:self.prompt_len]

    @property
    def response(self):
        return self.tokens[self.prompt_len:]

    def validate(self, params: DenoiserParams, clean: bool = True):
        if self.tokens.min(initial=0) < 0 or self.tokens.max(initial=0) >= params.vocab_size:
            raise ValueError("token id outside vocabulary")
        if len(self.tokens) > params.max_seq_len:
            raise ValueError(f"sequence length {len(self.tokens)} exceeds max_seq_len {params.max_seq_len}")
        if clean and (self.tokens == params.mask_id).any():
            raise ValueError("clean sequence contains the mask token")
        if (self.prompt == params.mask_id).any():
            raise ValueError("prompt contains the mask token")


def init_params(vocab_size=33, embed_dim=16, max_seq_len=64, block_size=4, seed=0,
                init_scale=1.0, zero_head=False) -> DenoiserParams:
    rng = np.random.default_rng(seed)
    d, v = embed_dim, vocab_size
    shapes = {
        "embed": (v, d),
        "pos": (max_seq_len, d),
        "wq": (d, d),
        "wk": (d, d),
        "wv": (d, d),
        "wo": (d, d),
        "head": (d, v - 1),
        "head_bias": (v - 1,),
    }
    tensors = {}
    for name in PARAM_ORDER:
        shape = shapes[name]
        if name == "head_bias":
            tensors[name] = np.zeros(shape)
        elif name == "head":
            tensors[name] = rng.normal(0.0, init_scale / math.sqrt(d), shape)
        elif name in ("wq", "wk", "wv", "wo"):
            tensors[name] = rng.normal(0.0, 1.0 / math.sqrt(d), shape)
        else:
            tensors[name] = rng.normal(0.0, 1.0, shape)
    if zero_head:
        tensors["head"][:] = 0.0
    params = DenoiserParams(vocab_size, embed_dim, max_seq_len, block_size, seed, tensors)
    if params.num_parameters() >= 100_000:
        raise ValueError("parameter budget exceeded (desk-scale models stay below 1e5)")
    return params


def bind_params(tape: Tape, params: DenoiserParams) -> dict[str, Tensor]:
    return {k: tape.param(k, params.tensors[k]) for k in PARAM_ORDER}


def forward_hidden(tape: Tape, p: dict[str, Tensor], hidden: Tensor, mask) -> Tensor:
    """Attention block + output head on an already-embedded input."""
    q = tape.matmul(hidden, p["wq"])
    k = tape.matmul(hidden, p["wk"])
    v = tape.matmul(hidden, p["wv"])
    attended = tape.attention(q, k, v, mask)
    mixed = tape.add(hidden, tape.matmul(attended, p["wo"]))
    logits = tape.add_row(tape.matmul(mixed, p["head"]), p["head_bias"])
    return tape.log_softmax(logits)


def embed_tokens(tape: Tape, p: dict[str, Tensor], tokens, positions) -> Tensor:
    return tape.add(tape.embed(p["embed"], tokens), tape.embed(p["pos"], positions))


def forward_logprobs(tape: Tape, p: dict[str, Tensor], tokens, positions, mask) -> Tensor:
    return forward_hidden(tape, p, embed_tokens(tape, p, tokens, positions), mask)


def full_mask(n: int) -> np.ndarray:
    return np.ones((n, n), dtype=np.int8)


def block_causal_mask(n: int, block_size: int, prompt_len: int = 0) -> np.ndarray:
    """Position i may attend to j iff block(j) <= block(i); blocks start after the prompt.

    Prompt positions form block 0-and-before, so every response block sees the
    whole prompt.
    """
    idx = np.arange(n)
    blk = np.where(idx < prompt_len, -1, (idx - prompt_len) // block_size)
    return (blk[None, :] <= blk[:, None]).astype(np.int8)


def token_log_probs(params: DenoiserParams, corrupted, mask_mode: str = "full",
                    clean: TokenSequence | None = None) -> np.ndarray:
    """Per-position log-distribution over the real symbols, shape (n, vocab_size - 1)."""
    tokens = np.asarray(getattr(corrupted, "tokens", corrupted), dtype=np.int64)
    n = len(tokens)
    if n > params.max_seq_len:
        raise ValueError(f"sequence length {n} exceeds max_seq_len {params.max_seq_len}")
    if mask_mode == "staircase":
        if clean is None:
            raise ValueError("staircase mode needs the clean stream")
        from .staircase import staircase_block_logprobs
        return staircase_block_logprobs(params, clean, corrupted)
    if mask_mode == "full":
        mask = full_mask(n)
    elif mask_mode == "block_causal":
        mask = block_causal_mask(n, params.block_size, getattr(corrupted, "prompt_len", 0))
    else:
        raise ValueError(f"unknown mask_mode {mask_mode!r}")
    tape = Tape(record=False)
    p = bind_params(tape, params)
    return forward_logprobs(tape, p, tokens, np.arange(n), mask).value


def sample_rollout(params: DenoiserParams, prompt: TokenSequence, gen_len: int, block_size: int,
                   steps_per_block: int, temperature: float, seed, mask_mode: str = "full") -> TokenSequence:
    """Confidence-ranked semi-autoregressive decoding, one block at a time.

    At each step every still-masked position in the current block draws a token
    from the tempered distribution; the ``ceil(block_size / steps_per_block)``
    positions whose tempered distribution has the largest max-probability are
    committed.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if gen_len % block_size:
        raise ValueError("gen_len must be divisible by block_size")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    prompt_tokens = np.asarray(prompt.tokens, dtype=np.int64)
    plen = len(prompt_tokens)
    seq = np.concatenate([prompt_tokens, np.full(gen_len, params.mask_id, dtype=np.int64)])
    if len(seq) > params.max_seq_len:
        raise ValueError("prompt + generation exceeds max_seq_len")
    per_step = math.ceil(block_size / steps_per_block)
    for start in range(plen, plen + gen_len, block_size):
        stop = start + block_size
        while (seq[start:stop] == params.mask_id).any():
            if mask_mode == "full":
                logp = token_log_probs(params, seq, "full")
            else:
                view = TokenSequence(seq[:stop], plen)
                logp = token_log_probs(params, view, "block_causal")
            masked = start + np.flatnonzero(seq[start:stop] == params.mask_id)
            tempered = log_softmax_rows(logp[masked] / temperature)
            probs = np.exp(tempered)
            probs /= probs.sum(axis=1, keepdims=True)
            u = rng.random(len(masked))[:, None]
            draws = np.minimum((np.cumsum(probs, axis=1) < u).sum(axis=1), probs.shape[1] - 1)
            confidence = probs.max(axis=1)
            order = np.argsort(-confidence, kind="stable")[:per_step]
            seq[masked[order]] = draws[order]
    return TokenSequence(seq, plen)


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(params: DenoiserParams, path) -> None:
    header = (
        f"version={CHECKPOINT_VERSION}\n"
        f"vocab_size={params.vocab_size}\n"
        f"embed_dim={params.embed_dim}\n"
        f"max_seq_len={params.max_seq_len}\n"
        f"block_size={params.block_size}\n"
        f"seed={params.seed}\n"
        f"arrays={len(PARAM_ORDER)}\n\n"
    ).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + b"\n")
        fh.write(header)
        for name in PARAM_ORDER:
            a = np.ascontiguousarray(params.tensors[name], dtype="<f8")
            raw = name.encode()
            fh.write(struct.pack("<I", len(raw)) + raw)
            fh.write(struct.pack("<I", a.ndim))
            fh.write(struct.pack(f"<{a.ndim}Q", *a.shape))
            fh.write(a.tobytes())


def load_checkpoint(path) -> DenoiserParams:
    data = Path(path).read_bytes()
    magic, _, rest = data.partition(b"\n")
    if magic != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file")
    head, _, body = rest.partition(b"\n\n")
    meta = dict(line.split("=", 1) for line in head.decode().splitlines())
    if int(meta["version"]) != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta['version']}")
    tensors, off = {}, 0
    for _ in range(int(meta["arrays"])):
        (nlen,) = struct.unpack_from("<I", body, off)
        off += 4
        name = body[off:off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<I", body, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}Q", body, off)
        off += 8 * ndim
        count = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(body, dtype="<f8", count=count, offset=off).reshape(shape).copy()
        off += 8 * count
    return DenoiserParams(int(meta["vocab_size"]), int(meta["embed_dim"]), int(meta["max_seq_len"]),
                          int(meta["block_size"]), int(meta["seed"]), tensors)

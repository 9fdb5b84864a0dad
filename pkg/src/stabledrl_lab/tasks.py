"""Toy tasks with rewards computed exactly from the token sequence."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .model import TokenSequence


@dataclass(frozen=True)
class ToyTask:
    name: str
    prompt_len: int
    response_len: int
    num_symbols: int
    make_prompt: Callable
    reward_fn: Callable

    def prompt(self, rng) -> TokenSequence:
        return TokenSequence(np.asarray(self.make_prompt(rng), dtype=np.int64), self.prompt_len)

    def reward(self, seq: TokenSequence) -> float:
        return float(self.reward_fn(np.asarray(seq.tokens[:seq.prompt_len]), np.asarray(seq.response)))


def copy_reward(prompt, response) -> float:
    """Fraction of response positions matching the prompt prefix; 1.0 iff the prefix is copied exactly."""
    target = prompt[: len(response)]
    return float(np.mean(response == target))


def parity_reward(prompt, response) -> float:
    return float(response[0] == int(prompt.sum()) % 2)


def sorted_reward(prompt, response) -> float:
    if len(response) < 2:
        return 1.0
    return float(np.mean(response[1:] >= response[:-1]))


def make_task(name: str, prompt_len: int = 4, response_len: int = 4, num_symbols: int = 8) -> ToyTask:
    if name == "copy":
        if response_len > prompt_len:
            raise ValueError("copy-task needs response_len <= prompt_len")
        return ToyTask(name, prompt_len, response_len, num_symbols,
                       lambda rng: rng.integers(0, num_symbols, prompt_len), copy_reward)
    if name == "parity":
        if num_symbols < 2:
            raise ValueError("parity-task needs at least two symbols")
        return ToyTask(name, prompt_len, response_len, num_symbols,
                       lambda rng: rng.integers(0, 2, prompt_len), parity_reward)
    if name == "sorted":
        return ToyTask(name, prompt_len, response_len, num_symbols,
                       lambda rng: rng.integers(0, num_symbols, prompt_len), sorted_reward)
    raise ValueError(f"unknown task {name!r}")


def builtin_tasks(prompt_len: int = 4, response_len: int = 4, num_symbols: int = 8) -> list[ToyTask]:
    return [make_task(n, prompt_len, response_len, num_symbols) for n in ("copy", "parity", "sorted")]

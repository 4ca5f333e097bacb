"""Synthetic Markov-chain token streams for the toy task.

Each state has a fixed set of distinct successor tokens with Zipf-shaped
transition probabilities, so the per-token conditional entropy is known in
closed form and well below the uniform log(vocab) ceiling: a model that
learns the transition table drives the loss toward that entropy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class MarkovDataConfig:
    vocab_size: int = 256
    n_successors: int = 8
    zipf_exponent: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_successors < 1 or self.n_successors > self.vocab_size:
            raise ValueError("n_successors must be in [1, vocab_size]")


class MarkovChain:
    def __init__(self, config: MarkovDataConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        v, s = config.vocab_size, config.n_successors
        # distinct successors per state
        self.successors = np.empty((v, s), dtype=np.int64)
        for state in range(v):
            self.successors[state] = rng.permutation(v)[:s]
        weights = 1.0 / np.arange(1, s + 1, dtype=np.float64) ** config.zipf_exponent
        self.probs = weights / weights.sum()

    def conditional_entropy(self) -> float:
        """Per-token entropy in nats (identical for every state)."""
        return float(-np.sum(self.probs * np.log(self.probs)))

    def sample(self, rng: np.random.Generator, batch_size: int, length: int) -> np.ndarray:
        tokens = np.empty((batch_size, length), dtype=np.int64)
        state = rng.integers(0, self.config.vocab_size, size=batch_size)
        tokens[:, 0] = state
        for t in range(1, length):
            choice = rng.choice(self.config.n_successors, size=batch_size, p=self.probs)
            state = self.successors[state, choice]
            tokens[:, t] = state
        return tokens


def batch_stream(chain: MarkovChain, batch_size: int, seq_len: int, seed: int):
    """Endless (inputs, targets) pairs; targets are inputs shifted by one."""
    rng = np.random.default_rng(seed)
    while True:
        tokens = chain.sample(rng, batch_size, seq_len + 1)
        yield tokens[:, :-1], tokens[:, 1:]

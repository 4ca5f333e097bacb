"""Synthetic Markov stream: known conditional entropy, valid transitions,
reproducibility."""

import math

import numpy as np
import pytest

from ternact.data import MarkovChain, MarkovDataConfig, batch_stream


@pytest.fixture(scope="module")
def chain():
    return MarkovChain(MarkovDataConfig())


class TestChainStructure:
    def test_successors_are_distinct_per_state(self, chain):
        for row in chain.successors:
            assert len(set(row.tolist())) == chain.config.n_successors

    def test_successors_are_valid_tokens(self, chain):
        assert chain.successors.min() >= 0
        assert chain.successors.max() < chain.config.vocab_size

    def test_probs_are_zipf_normalized(self, chain):
        h8 = sum(1.0 / k for k in range(1, 9))
        assert chain.probs[0] == pytest.approx(1.0 / h8, rel=1e-12)
        assert chain.probs.sum() == pytest.approx(1.0, rel=1e-12)
        assert np.all(np.diff(chain.probs) < 0)

    def test_conditional_entropy_closed_form(self, chain):
        # H = log(Z) + (1/Z) * sum(log k / k) for zipf weights 1/k, Z = H_8
        z = sum(1.0 / k for k in range(1, 9))
        expected = math.log(z) + sum(math.log(k) / k for k in range(1, 9)) / z
        assert chain.conditional_entropy() == pytest.approx(expected, rel=1e-12)
        assert chain.conditional_entropy() == pytest.approx(1.815848, abs=5e-6)

    def test_entropy_well_below_uniform(self, chain):
        assert chain.conditional_entropy() < 0.5 * math.log(256)

    def test_n_successors_validated(self):
        with pytest.raises(ValueError):
            MarkovDataConfig(vocab_size=4, n_successors=5)


class TestSampling:
    def test_every_transition_is_in_the_table(self, chain):
        tokens = chain.sample(np.random.default_rng(0), batch_size=8, length=64)
        for row in tokens:
            for t in range(len(row) - 1):
                assert row[t + 1] in chain.successors[row[t]]

    def test_sampling_is_seed_deterministic(self, chain):
        a = chain.sample(np.random.default_rng(11), 4, 32)
        b = chain.sample(np.random.default_rng(11), 4, 32)
        np.testing.assert_array_equal(a, b)

    def test_top_successor_dominates(self, chain):
        # the rank-1 successor carries ~37% of transitions
        rng = np.random.default_rng(1)
        tokens = chain.sample(rng, 16, 256)
        hits = 0
        total = 0
        for row in tokens:
            for t in range(len(row) - 1):
                total += 1
                if row[t + 1] == chain.successors[row[t], 0]:
                    hits += 1
        assert 0.25 < hits / total < 0.5


class TestBatchStream:
    def test_shapes_and_shift(self, chain):
        stream = batch_stream(chain, batch_size=4, seq_len=16, seed=5)
        inputs, targets = next(stream)
        assert inputs.shape == (4, 16)
        assert targets.shape == (4, 16)
        np.testing.assert_array_equal(inputs[:, 1:], targets[:, :-1])

    def test_stream_is_seed_deterministic(self, chain):
        s1 = batch_stream(chain, 2, 8, seed=9)
        s2 = batch_stream(chain, 2, 8, seed=9)
        for _ in range(3):
            a_in, a_tg = next(s1)
            b_in, b_tg = next(s2)
            np.testing.assert_array_equal(a_in, b_in)
            np.testing.assert_array_equal(a_tg, b_tg)

    def test_stream_advances(self, chain):
        stream = batch_stream(chain, 2, 8, seed=9)
        first = next(stream)[0]
        second = next(stream)[0]
        assert not np.array_equal(first, second)

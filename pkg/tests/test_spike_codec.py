import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neuroicl.channel import QuantizerSpec, qpsk
from neuroicl.spike_codec import (
    ContractViolation,
    SpikeTensor,
    and_count,
    bernoulli_encode,
    denormalize_received,
    normalize_received,
    normalize_symbols,
    pack_stream,
    stochastic_and_multiply,
    stream_mean,
    unpack_stream,
    zero_pad,
)


def binomial_band(p: float, n: int, k: float = 3.0) -> float:
    return k * math.sqrt(p * (1 - p) / n)


class TestNormalize:
    def test_lower_corner(self):
        np.testing.assert_array_equal(normalize_received(np.array([-4 - 4j]), -4, 4), [0, 0])

    def test_upper_corner(self):
        np.testing.assert_array_equal(normalize_received(np.array([4 + 4j]), -4, 4), [1, 1])

    def test_midpoint(self):
        np.testing.assert_array_equal(normalize_received(np.array([0j]), -4, 4), [0.5, 0.5])

    def test_real_parts_before_imag(self):
        out = normalize_received(np.array([4 + 0j, -4 + 4j]), -4, 4)
        np.testing.assert_array_equal(out, [1, 0, 0.5, 1])

    def test_out_of_range(self):
        with pytest.raises(ContractViolation):
            normalize_received(np.array([5 + 0j]), -4, 4)

    def test_roundtrip_on_grid(self):
        spec = QuantizerSpec()
        lv = spec.levels()
        grid = (lv[:, None] + 1j * lv[None, :]).reshape(-1, 1)
        back = denormalize_received(normalize_received(grid, spec.l_min, spec.l_max), spec.l_min, spec.l_max)
        np.testing.assert_allclose(back, grid, atol=1e-12)

    @pytest.mark.parametrize(
        "s, expected",
        [((1 + 1j) / math.sqrt(2), [1, 1]), ((-1 - 1j) / math.sqrt(2), [0, 0]), ((1 - 1j) / math.sqrt(2), [1, 0])],
    )
    def test_qpsk_symbols(self, s, expected):
        np.testing.assert_allclose(normalize_symbols(np.array([s]), qpsk()), expected, atol=1e-12)


class TestZeroPad:
    def test_pad(self):
        np.testing.assert_array_equal(zero_pad(np.array([0.5]), 3), [0.5, 0, 0])

    def test_identity(self):
        v = np.array([0.1, 0.2])
        np.testing.assert_array_equal(zero_pad(v, 2), v)

    def test_empty(self):
        np.testing.assert_array_equal(zero_pad(np.array([]), 2), [0, 0])

    def test_too_long(self):
        with pytest.raises(ValueError):
            zero_pad(np.ones(3), 2)


class TestBernoulli:
    def test_extremes(self):
        st_ = bernoulli_encode(np.array([1.0, 0.0]), 50, np.random.default_rng(0))
        assert st_.data[:, 0, 0].all() and not st_.data[:, 1, 0].any()

    def test_rate(self):
        n = 10_000
        bits = bernoulli_encode(np.array([0.3]), n, np.random.default_rng(1)).data[:, 0, 0]
        assert abs(bits.mean() - 0.3) <= binomial_band(0.3, n)

    def test_deterministic(self):
        v = np.linspace(0, 1, 7)
        a = bernoulli_encode(v, 32, np.random.default_rng(5)).data
        b = bernoulli_encode(v, 32, np.random.default_rng(5)).data
        np.testing.assert_array_equal(a, b)

    def test_unbiased_matrix(self):
        rng = np.random.default_rng(2)
        v = rng.random((4, 3))
        n = 20_000
        rate = bernoulli_encode(v, n, rng).rate()
        assert np.all(np.abs(rate - v) <= binomial_band(0.25, n) + 1e-12)

    def test_rejects_out_of_range(self):
        with pytest.raises(ContractViolation):
            bernoulli_encode(np.array([1.5]), 4, np.random.default_rng(0))


class TestStochasticMultiply:
    def test_ones(self):
        z = stochastic_and_multiply(np.ones(100, bool), np.ones(100, bool))
        assert z.all()

    def test_zero_input(self):
        y = np.random.default_rng(0).random(100) < 0.7
        assert not stochastic_and_multiply(np.zeros(100, bool), y).any()

    def test_product_rate(self):
        rng = np.random.default_rng(3)
        n = 10_000
        x = rng.random(n) < 0.5
        y = rng.random(n) < 0.4
        z = stochastic_and_multiply(x, y)
        assert abs(z.mean() - 0.2) <= binomial_band(0.2, n)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            stochastic_and_multiply(np.ones(3, bool), np.ones(4, bool))

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.booleans(), min_size=1, max_size=300), st.integers(0, 2**32 - 1))
    def test_packed_and_matches_elementwise(self, bits, seed):
        x = np.array(bits)
        y = np.random.default_rng(seed).random(x.size) < 0.5
        np.testing.assert_array_equal(stochastic_and_multiply(x, y), x & y)
        assert and_count(x, y) == int((x & y).sum())

    def test_pack_roundtrip(self):
        bits = np.random.default_rng(4).random(129) < 0.5
        np.testing.assert_array_equal(unpack_stream(pack_stream(bits), bits.size), bits)


class TestStreamMean:
    def test_all_ones(self):
        assert stream_mean(np.ones(8)) == 1.0

    def test_alternating(self):
        assert stream_mean(np.array([0, 1, 0, 1])) == 0.5

    def test_zeros(self):
        assert stream_mean(np.zeros(5)) == 0.0

    def test_empty(self):
        with pytest.raises(ValueError):
            stream_mean(np.array([]))


class TestSpikeTensor:
    def test_rejects_non_binary(self):
        with pytest.raises(ValueError):
            SpikeTensor(np.full((1, 2, 2), 2))

    def test_text_dump(self):
        t = SpikeTensor(np.array([[[1, 0], [0, 1]]]))
        assert t.to_text() == "t=1\n10\n01"
        assert t.shape == (2, 2) and t.T == 1

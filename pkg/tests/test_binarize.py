import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bwnkit.binarize import (
    BinarizedFilter,
    binarize_filter,
    binarize_layer,
    brute_force_binarize,
    pack_bits,
    quantization_error,
    ste_backward,
    ste_backward_layer,
    unpack_bits,
)


class TestBinarizeFilter:
    def test_equal_magnitudes_reconstruct_exactly(self):
        w = np.array([0.5, -0.5, 0.5, -0.5])
        f = binarize_filter(w)
        assert f.alpha == 0.5
        np.testing.assert_array_equal(f.signs(), [1, -1, 1, -1])
        np.testing.assert_array_equal(f.effective(np.float64), w)

    def test_mean_abs_scale(self):
        f = binarize_filter(np.array([1.0, -2.0, 3.0]))
        assert f.alpha == 2.0
        np.testing.assert_array_equal(f.signs(), [1, -1, 1])

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            binarize_filter(np.zeros((0,)))

    def test_sign_zero_is_plus(self):
        f = binarize_filter(np.array([0.0, -1.0]))
        np.testing.assert_array_equal(f.signs(), [1, -1])

    def test_attains_enumeration_minimum(self):
        rng = np.random.default_rng(17)
        for _ in range(200):
            n = int(rng.integers(1, 13))
            w = rng.normal(size=n)
            closed = quantization_error(w, binarize_filter(w))
            _, _, best = brute_force_binarize(w)
            assert closed <= best + 1e-9

    def test_positive_scale_invariance(self):
        rng = np.random.default_rng(3)
        w = rng.normal(size=(2, 3, 3))
        f1 = binarize_filter(w)
        f2 = binarize_filter(4.0 * w)
        assert f1.bits == f2.bits
        assert f2.alpha == pytest.approx(4.0 * f1.alpha, rel=1e-12)

    def test_sign_antisymmetry(self):
        rng = np.random.default_rng(5)
        w = rng.normal(size=10)
        assert not np.any(w == 0)
        f = binarize_filter(w)
        g = binarize_filter(-w)
        np.testing.assert_array_equal(g.signs(), -f.signs())
        assert g.alpha == f.alpha

    def test_layer_vectorization_matches_per_filter(self):
        rng = np.random.default_rng(11)
        w = rng.normal(size=(4, 2, 3, 3)).astype(np.float32)
        alphas, signs = binarize_layer(w)
        for i in range(4):
            f = binarize_filter(w[i])
            assert alphas[i] == np.float32(f.alpha)
            np.testing.assert_array_equal(signs[i], f.signs())


class TestQuantizationError:
    def test_exactly_representable(self):
        w = np.array([0.25, -0.25, 0.25])
        assert quantization_error(w, binarize_filter(w)) == 0.0

    def test_hand_arithmetic(self):
        f = BinarizedFilter(alpha=2.0, bits=pack_bits(np.array([1, -1, 1])),
                            n=3, shape=(3,))
        assert quantization_error(np.array([1.0, -2.0, 3.0]), f) == pytest.approx(2.0)

    def test_shape_mismatch(self):
        f = binarize_filter(np.ones(3))
        with pytest.raises(ValueError):
            quantization_error(np.ones(4), f)

    def test_beats_random_candidates(self):
        rng = np.random.default_rng(23)
        w = rng.normal(size=8)
        best = quantization_error(w, binarize_filter(w))
        for _ in range(100):
            alpha = abs(rng.normal())
            signs = rng.choice([-1.0, 1.0], size=8)
            cand = BinarizedFilter(alpha=float(alpha), bits=pack_bits(signs),
                                   n=8, shape=(8,))
            assert best <= quantization_error(w, cand) + 1e-12

    def test_closed_form_residual(self):
        rng = np.random.default_rng(29)
        for _ in range(300):
            n = int(rng.integers(1, 40))
            w = rng.normal(size=n)
            f = binarize_filter(w)
            got = quantization_error(w, f)
            want = float(w @ w) - n * f.alpha ** 2
            assert got == pytest.approx(want, rel=1e-9, abs=1e-12)


class TestSteBackward:
    def test_hand_example(self):
        w = np.array([0.5, 2.0])
        f = binarize_filter(w)
        assert f.alpha == 1.25
        g = ste_backward(np.array([1.0, 1.0]), w, f)
        np.testing.assert_allclose(g, [1.75, 0.5])

    def test_zero_grad(self):
        w = np.array([0.3, -0.7])
        g = ste_backward(np.zeros(2), w, binarize_filter(w))
        np.testing.assert_array_equal(g, 0.0)

    def test_elementwise_oracle(self):
        rng = np.random.default_rng(31)
        w = rng.normal(size=(3, 4)) * 1.5
        f = binarize_filter(w)
        g = rng.normal(size=(3, 4))
        got = ste_backward(g, w, f)
        for i in range(3):
            for j in range(4):
                gate = 1.0 if abs(w[i, j]) <= 1.0 else 0.0
                assert got[i, j] == g[i, j] * (1.0 / 12 + gate * f.alpha)

    def test_shape_mismatch(self):
        f = binarize_filter(np.ones(3))
        with pytest.raises(ValueError):
            ste_backward(np.ones(4), np.ones(3), f)

    def test_layer_variant_matches(self):
        rng = np.random.default_rng(37)
        w = rng.normal(size=(4, 2, 3, 3)).astype(np.float32)
        g = rng.normal(size=(4, 2, 3, 3)).astype(np.float32)
        alphas, _ = binarize_layer(w)
        got = ste_backward_layer(g, w, alphas)
        for i in range(4):
            f = binarize_filter(w[i])
            np.testing.assert_allclose(got[i], ste_backward(g[i], w[i], f), rtol=1e-6)


class TestPacking:
    def test_alternating_byte(self):
        packed = pack_bits(np.array([1, -1, 1, -1, 1, -1, 1, -1]))
        assert packed == b"\xaa"

    def test_padding_rule(self):
        assert pack_bits(np.array([1, 1, 1])) == b"\xe0"

    def test_length(self):
        assert len(pack_bits(np.ones(17))) == 3

    @given(st.lists(st.sampled_from([-1.0, 1.0]), min_size=1, max_size=64))
    @settings(max_examples=200, deadline=None)
    def test_roundtrip(self, signs):
        arr = np.array(signs)
        np.testing.assert_array_equal(unpack_bits(pack_bits(arr), len(signs)), arr)


class TestBruteForce:
    def test_single_element(self):
        alpha, signs, err = brute_force_binarize(np.array([3.0]))
        assert alpha == 3.0
        np.testing.assert_array_equal(signs, [1.0])
        assert err == 0.0

    def test_two_equal(self):
        alpha, signs, err = brute_force_binarize(np.array([1.0, 1.0]))
        assert alpha == 1.0
        np.testing.assert_array_equal(signs, [1.0, 1.0])
        assert err == pytest.approx(0.0, abs=1e-12)

    def test_n_bound(self):
        with pytest.raises(ValueError):
            brute_force_binarize(np.ones(21))

    def test_agrees_with_closed_form(self):
        rng = np.random.default_rng(41)
        for _ in range(1000):
            n = int(rng.integers(1, 11))
            w = rng.normal(size=n)
            f = binarize_filter(w)
            alpha, signs, err = brute_force_binarize(w)
            assert alpha == pytest.approx(f.alpha, rel=1e-12)
            np.testing.assert_array_equal(signs, f.signs())

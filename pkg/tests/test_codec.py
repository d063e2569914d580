import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spectract.codec import (Codec, Decoder, Encoder, decode, encode_condition,
                             encode_pair, load_codec, loss_res, loss_res_grad,
                             pixel_shuffle, pixel_unshuffle, save_codec)


def small_codec(seed=0):
    return Codec.create(C=4, r=4, rng=np.random.default_rng(seed),
                        in_channels_lq=1, out_channels=1,
                        enc_width=8, dec_widths=(4, 6, 8, 10))


class TestPixelShuffle:
    def test_r1_identity(self):
        x = np.random.default_rng(0).random((6, 6))
        np.testing.assert_array_equal(pixel_unshuffle(x, 1)[0], x)

    def test_2x2_permutation(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]])
        u = pixel_unshuffle(x, 2)
        assert u.shape == (4, 1, 1)
        assert sorted(u.ravel().tolist()) == [1.0, 2.0, 3.0, 4.0]

    def test_inverse_pair_bitwise(self):
        x = np.random.default_rng(1).random((1, 8, 8))
        assert np.array_equal(pixel_shuffle(pixel_unshuffle(x[0], 2), 2), x[0])

    def test_non_divisible_rejected(self):
        with pytest.raises(ValueError):
            pixel_unshuffle(np.zeros((6, 6)), 4)

    @settings(max_examples=20, deadline=None)
    @given(st.sampled_from([1, 2, 4]), st.integers(0, 100))
    def test_volume_preserved(self, r, seed):
        x = np.random.default_rng(seed).random((8, 8))
        u = pixel_unshuffle(x, r)
        assert u.size == x.size
        assert sorted(u.ravel()) == sorted(x.ravel())


class TestEncode:
    def test_latent_length_4c(self):
        codec = small_codec()
        gt = np.random.default_rng(2).random((16, 16))
        lq = np.random.default_rng(3).random((16, 16))
        z = encode_pair(gt, lq, 1.0, codec)
        assert z.shape == (16,)  # 4 * C with C=4

    def test_determinism(self):
        codec = small_codec()
        gt = np.random.default_rng(2).random((16, 16))
        lq = np.random.default_rng(3).random((16, 16))
        a = encode_pair(gt, lq, 0.5, codec)
        b = encode_pair(gt, lq, 0.5, codec)
        assert np.array_equal(a, b)

    def test_condition_lq_only(self):
        codec = small_codec()
        enc = Encoder(1, 4, 4, np.random.default_rng(9), width=8)
        lq = np.random.default_rng(3).random((64, 64))
        b = encode_condition(lq, 1.0, enc)
        assert b.shape == (16,)

    def test_shape_mismatch(self):
        codec = small_codec()
        with pytest.raises(ValueError):
            encode_pair(np.zeros((16, 16)), np.zeros((8, 8)), 1.0, codec)

    def test_zero_input_finite_latent(self):
        codec = small_codec()
        z = encode_pair(np.zeros((16, 16)), np.zeros((16, 16)), 1.0, codec)
        assert np.isfinite(z).all()
        z2 = encode_pair(np.zeros((16, 16)), np.zeros((16, 16)), 1.0, codec)
        assert np.array_equal(z, z2)


class TestDecode:
    def test_output_shape(self):
        codec = small_codec()
        lq = np.random.default_rng(4).random((16, 16))
        z = np.random.default_rng(5).standard_normal(16)
        assert decode(z, lq, codec).shape == (16, 16)

    def test_latent_length_validated(self):
        codec = small_codec()
        with pytest.raises(ValueError):
            decode(np.zeros(7), np.zeros((16, 16)), codec)

    def test_distinct_latents_distinct_outputs(self):
        codec = small_codec()
        rng = np.random.default_rng(6)
        lq = rng.random((16, 16))
        y1 = decode(rng.standard_normal(16), lq, codec)
        y2 = decode(rng.standard_normal(16), lq, codec)
        assert np.abs(y1 - y2).max() >= 1e-6


class TestLossRes:
    def test_identical_zero(self):
        x = np.random.default_rng(7).random((16, 16))
        assert loss_res(x, x) == pytest.approx(0.0, abs=1e-15)

    def test_lambda_zero_is_l1(self):
        rng = np.random.default_rng(8)
        a, b = rng.random((12, 12)), rng.random((12, 12))
        assert loss_res(a, b, lam=0.0) == pytest.approx(np.mean(np.abs(a - b)))

    def test_constant_offset_l1(self):
        gt = np.random.default_rng(9).random((16, 16))
        hq = gt + 0.1
        assert loss_res(gt, hq, lam=0.0) == pytest.approx(0.1)

    def test_grad_consistent_with_value(self):
        rng = np.random.default_rng(10)
        gt = rng.random((1, 1, 16, 16))
        hq = gt + 0.2 * rng.standard_normal(gt.shape)
        loss, grad = loss_res_grad(gt, hq)
        assert loss == pytest.approx(loss_res(gt, hq))
        assert grad.shape == hq.shape


class TestPersistence:
    def test_roundtrip(self, tmp_path):
        codec = small_codec(3)
        path = os.path.join(tmp_path, "codec.f32")
        save_codec(path, codec)
        loaded = load_codec(path)
        assert loaded.C == codec.C and loaded.r == codec.r
        assert loaded.weight == pytest.approx(codec.weight)
        lq = np.random.default_rng(11).random((16, 16))
        z = np.random.default_rng(12).standard_normal(16)
        # float32 storage: decode agrees to storage precision
        np.testing.assert_allclose(decode(z, lq, loaded),
                                   decode(z, lq, codec), atol=1e-4)

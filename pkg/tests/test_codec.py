import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from gensemcom.codec import (CHECK_BITS, P_FLOOR, SIDE_HEADER_BITS, FeatureBitstream, Payload,
                             PayloadError, PayloadHeader, SideInfoBitstream, conditional_pmf,
                             decode_features, decode_latent, decode_side_info, encode_features,
                             encode_latent, encode_side_info, ideal_codelength, ideal_latent_bits,
                             measure_rate, pack_payload, quantize, support, unpack_payload)
from gensemcom.gsm import grid_quantize, hyper_latent, sample_gsm_features
from gensemcom.rangecoder import CorruptStreamError
from gensemcom.semantic import FilterSet, encode_mask


def _phi(x):
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def _gsm_case(seed, shape=(6, 5, 8)):
    rng = np.random.default_rng(seed)
    theta = grid_quantize(np.exp(rng.uniform(np.log(0.05), np.log(30.0), shape)))
    q = quantize(sample_gsm_features(theta, seed))
    selection = FilterSet(rng.random(shape[:2]) < 0.6, shape[2])
    return q, theta, selection


class TestQuantize:
    def test_examples(self):
        out = quantize(np.array([0.4, -0.4, 0.5, -0.5, 3.7, -2.5, 1.49999]))
        assert out.tolist() == [0, 0, 1, -1, 4, -3, 1]
        assert out.dtype == np.int32

    @settings(max_examples=100, deadline=None)
    @given(hnp.arrays(np.float64, st.integers(1, 50), elements=st.floats(-1e6, 1e6)))
    def test_within_half(self, y):
        assert np.all(np.abs(y - quantize(y)) <= 0.5)

    def test_rejects(self):
        with pytest.raises(ValueError):
            quantize(np.array([np.inf]))
        with pytest.raises(OverflowError):
            quantize(np.array([3e9]))


class TestPmf:
    def test_reference_values(self):
        assert conditional_pmf(0, 1.0) == pytest.approx(0.38292, abs=1e-5)
        assert conditional_pmf(0, 0.5) == pytest.approx(0.68269, abs=1e-5)

    @pytest.mark.parametrize("theta", [0.01, 0.3, 1.0, 2.7, 40.0])
    def test_matches_erf_oracle(self, theta):
        for k in range(-5, 6):
            expected = max(_phi((k + 0.5) / theta) - _phi((k - 0.5) / theta), P_FLOOR)
            assert conditional_pmf(k, theta) == pytest.approx(expected, rel=1e-9, abs=1e-15)

    def test_symmetry_and_floor(self):
        k = np.arange(1, 40)
        np.testing.assert_array_equal(conditional_pmf(k, 1.3), conditional_pmf(-k, 1.3))
        assert conditional_pmf(1000, 1.0) == P_FLOOR

    @pytest.mark.parametrize("theta", [1e-3, 0.1, 0.5, 1.0, 3.3, 17.0, 250.0])
    def test_normalization_over_support(self, theta):
        kmax = int(support(theta))
        assert kmax == math.ceil(8 * theta)
        total = conditional_pmf(np.arange(-kmax, kmax + 1), theta).sum()
        assert total >= 1 - 1e-6

    def test_escape_cost(self):
        bits = ideal_codelength(np.array([0, 100]), np.array([1.0, 1.0]))
        tail = 2 * (1 - _phi(9.5))
        assert bits[0] == pytest.approx(-math.log2(0.38292492254802624))
        assert bits[1] == pytest.approx(-math.log2(max(tail, P_FLOOR)) + 32)


class TestFeatureCoding:
    def test_zeros_at_unit_scale(self):
        q = np.zeros((10, 10, 10), np.int32)
        theta = np.ones(q.shape)
        stream = encode_features(q, theta, FilterSet.full(q.shape))
        ideal = -1000 * math.log2(conditional_pmf(0, 1.0))
        assert ideal == pytest.approx(1384.87, abs=0.01)
        assert ideal <= stream.bit_count <= ideal + 32

    def test_empty_selection(self):
        q, theta, _ = _gsm_case(0)
        stream = encode_features(q, theta, FilterSet.empty(q.shape))
        assert stream.bit_count == 0
        np.testing.assert_array_equal(decode_features(stream, theta, FilterSet.empty(q.shape)), 0)

    @pytest.mark.parametrize("seed", range(100))
    def test_roundtrip_and_bound(self, seed):
        q, theta, sel = _gsm_case(seed)
        stream = encode_features(q, theta, sel)
        out = decode_features(stream, theta, sel)
        mask = sel.element_mask()
        np.testing.assert_array_equal(out[mask], q[mask])
        np.testing.assert_array_equal(out[~mask], 0)
        ideal = ideal_codelength(q[mask], theta[mask]).sum()
        assert stream.bit_count <= ideal + 32

    def test_escapes(self):
        q = np.array([[[0, 5000, -2 ** 31 + 1, 2 ** 31 - 1]]], np.int32)
        theta = np.full(q.shape, 0.5)
        sel = np.ones(q.shape, bool)
        out = decode_features(encode_features(q, theta, sel), theta, sel)
        np.testing.assert_array_equal(out, q)

    def test_deterministic(self):
        q, theta, sel = _gsm_case(3)
        assert encode_features(q, theta, sel) == encode_features(q, theta, sel)

    def test_every_single_bit_flip_is_detected(self):
        q, theta, sel = _gsm_case(4, shape=(3, 3, 4))
        data = encode_features(q, theta, sel).data
        for pos in range(8 * len(data)):
            bad = bytearray(data)
            bad[pos // 8] ^= 0x80 >> (pos % 8)
            with pytest.raises(CorruptStreamError):
                decode_features(FeatureBitstream(bytes(bad), 8 * len(bad)), theta, sel)

    def test_truncation_and_extension_detected(self):
        q, theta, sel = _gsm_case(5)
        data = encode_features(q, theta, sel).data
        for bad in (data[:-1], data + b"\x01", data[:len(data) // 2]):
            with pytest.raises(CorruptStreamError):
                decode_features(FeatureBitstream(bad, 8 * len(bad)), theta, sel)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            encode_features(np.zeros((2, 2, 2), np.int32), np.ones((2, 2, 3)), np.ones((2, 2, 2), bool))


def _adaptive_oracle_bits(symbols, size):
    """Sequential -log2 of Laplace-smoothed adaptive probabilities."""
    counts = [1] * size
    bits = 0.0
    for s in symbols:
        bits -= math.log2(counts[s] / sum(counts))
        counts[s] += 1
    return bits


class TestSideInfo:
    def test_grid_example_roundtrip(self):
        theta = np.full((2, 2, 1), 1.19)
        out = decode_side_info(encode_side_info(theta), theta.shape)
        np.testing.assert_allclose(out, 2 ** 0.25, rtol=0, atol=1e-15)

    @pytest.mark.parametrize("seed", range(20))
    def test_random_roundtrip_exact(self, seed):
        rng = np.random.default_rng(seed)
        theta = np.exp(rng.uniform(-6, 6, (5, 7, 3)))
        out = decode_side_info(encode_side_info(theta), theta.shape)
        np.testing.assert_array_equal(out, grid_quantize(theta))

    def test_tiled_roundtrip(self):
        theta = np.exp(np.random.default_rng(1).uniform(-2, 2, (7, 5, 4)))
        stream = encode_side_info(theta, tile=3)
        assert decode_latent(stream).shape == (3, 2, 4)
        assert decode_side_info(stream, theta.shape, tile=3).shape == theta.shape

    def test_constant_field_costs_only_header(self):
        stream = encode_side_info(np.full((16, 16, 192), 2.0))
        assert stream.bit_count <= SIDE_HEADER_BITS + CHECK_BITS + 32

    def test_ideal_bits_matches_sequential_oracle(self):
        latent = np.random.default_rng(2).integers(-3, 4, (4, 5, 3))
        size = int(latent.max() - latent.min()) + 1
        oracle = _adaptive_oracle_bits((latent.ravel() - latent.min()).tolist(), size)
        assert ideal_latent_bits(latent) == pytest.approx(oracle, rel=1e-10)

    @pytest.mark.parametrize("seed", range(10))
    def test_actual_within_ideal_plus_32(self, seed):
        latent = hyper_latent(np.exp(np.random.default_rng(seed).normal(0, 2, (9, 9, 12))), 1)
        actual = encode_latent(latent).bit_count
        assert actual <= ideal_latent_bits(latent) + SIDE_HEADER_BITS + CHECK_BITS + 32

    def test_corruption_detected(self):
        stream = encode_side_info(np.exp(np.random.default_rng(3).normal(0, 1, (4, 4, 4))))
        data = stream.data
        for pos in range(8 * SIDE_HEADER_BITS // 8, 8 * len(data)):
            bad = bytearray(data)
            bad[pos // 8] ^= 0x80 >> (pos % 8)
            with pytest.raises(CorruptStreamError):
                decode_latent(SideInfoBitstream(bytes(bad), 8 * len(bad)))
        with pytest.raises(CorruptStreamError):
            decode_latent(SideInfoBitstream(data[:5], 40))


class TestMeasureRate:
    def test_totals_and_mask_flag(self):
        q, theta, sel = _gsm_case(6)
        without = measure_rate(q, theta, sel)
        with_mask = measure_rate(q, theta, sel, include_mask=True)
        assert without.total_bits == without.feature_bits + without.side_bits
        assert with_mask.total_bits == without.total_bits + encode_mask(sel).bit_count
        assert without.feature_bits == encode_features(q, theta, sel).bit_count
        assert without.feature_bits - without.ideal_feature_bits <= 32
        assert without.side_bits - without.ideal_side_bits <= 32

    def test_empty_selection(self):
        q, theta, _ = _gsm_case(7)
        assert measure_rate(q, theta, FilterSet.empty(q.shape)).feature_bits == 0

    def test_shrinking_scale_lowers_rate_on_zero_data(self):
        q = np.zeros((8, 8, 8), np.int32)
        sel = FilterSet.full(q.shape)
        bits = [measure_rate(q, np.full(q.shape, t), sel).feature_bits for t in (4.0, 1.0, 0.25)]
        assert bits[0] > bits[1] > bits[2]

    def test_growing_selection_never_lowers_rate(self):
        q, theta, _ = _gsm_case(8)
        imp = np.random.default_rng(8).uniform(size=q.shape[:2])
        bits = [measure_rate(q, theta, FilterSet(imp >= a, q.shape[2])).ideal_feature_bits
                for a in (0.9, 0.6, 0.3, 0.0)]
        assert bits == sorted(bits)


def _payload(prompt="a red car", mask_counted=False):
    q, theta, sel = _gsm_case(9)
    header = PayloadHeader((48, 40), q.shape, 8, 3, "haar", 4, 0.5, 0.11, 0.25, 0.25,
                           mask_counted, prompt)
    return pack_payload(header, encode_side_info(theta), encode_mask(sel),
                        encode_features(q, theta, sel))


class TestPayload:
    def test_roundtrip(self):
        p = _payload("ünïcode prompt")
        back = unpack_payload(p.data)
        assert back.header == p.header
        assert back.side_info == p.side_info
        assert back.mask == p.mask
        assert back.features == p.features

    def test_rate_and_accounting(self):
        p = _payload(mask_counted=False)
        assert p.rate_bits == p.features.bit_count + p.side_info.bit_count
        pm = _payload(mask_counted=True)
        assert pm.rate_bits == p.rate_bits + p.mask.bit_count
        acc = p.accounting()
        assert acc["total_bits"] == 8 * len(p.data)
        assert (acc["header_bits"] + acc["section_overhead_bits"] + acc["feature_bits"]
                + acc["side_bits"] + acc["mask_bits"] + acc["mask_padding_bits"]
                == acc["total_bits"])

    def test_crc_catches_any_section_flip(self):
        p = _payload()
        data = p.data
        sections = 3 * 8 + 4 + len(p.side_info.data) + len(p.mask.data) + len(p.features.data)
        start = len(data) - sections
        for pos in range(start, len(data)):
            bad = bytearray(data)
            bad[pos] ^= 0x01
            with pytest.raises(PayloadError):
                unpack_payload(bytes(bad))

    @pytest.mark.parametrize("mutate", [
        lambda d: b"GVSX" + d[4:],
        lambda d: d[:4] + b"\x09" + d[5:],
        lambda d: d[:-1],
        lambda d: d + b"\x00",
        lambda d: d[:20],
    ])
    def test_malformed(self, mutate):
        with pytest.raises(PayloadError):
            unpack_payload(mutate(_payload().data))

    def test_alpha_stored_as_float32(self):
        p = unpack_payload(_payload().data)
        assert p.header.alpha == 0.25
        assert isinstance(p, Payload)

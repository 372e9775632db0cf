import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from liclab import codec as C
from liclab import coder
from liclab.adapters import init_adapter_set
from liclab.datagen import DomainKind, DomainSpec, generate
from liclab.serialization import CompatibilityError, FormatError
from liclab.tensor import make_rng

GOLDEN = Path(__file__).parent / "data" / "golden_init0_pixel.licb"
GOLDEN_MODEL_ID = 0x2D114C393207FEB8


def golden_image():
    return generate(DomainSpec("p", DomainKind.PIXEL_ART, seed=5, size=32), 1)[0][:, :30, :20]


# range coder -----------------------------------------------------------------


def test_empty_symbol_list_round_trips():
    model = coder.SymbolModel.from_pmf([0.5, 0.5])
    data = coder.range_encode([], model)
    assert coder.range_decode(data, model, 0) == []
    assert len(data) <= 4


def test_uniform_256_symbols_near_entropy():
    model = coder.SymbolModel.from_pmf(np.full(256, 1 / 256))
    symbols = make_rng(0).integers(0, 256, 1000).tolist()
    data = coder.range_encode(symbols, model)
    bits = 8 * len(data)
    assert 8000 - 64 <= bits <= 8000 + 64
    assert coder.range_decode(data, model, 1000) == symbols


@given(st.lists(st.floats(0.0, 1.0), min_size=2, max_size=40), st.integers(0, 2**32 - 1))
def test_quantized_cdf_invariants(weights, seed):
    pmf = np.array(weights) + 1e-12
    m = coder.SymbolModel.from_pmf(pmf / pmf.sum())
    assert m.cdf[0] == 0 and m.cdf[-1] == coder.TOTAL
    assert np.all(np.diff(m.cdf) >= 1)
    symbols = make_rng(seed).integers(0, m.size, 200).tolist()
    assert coder.range_decode(coder.range_encode(symbols, m), m, len(symbols)) == symbols


def test_lossless_on_random_models():
    rng = make_rng(1)
    models = []
    for _ in range(5):
        pmf = rng.dirichlet(np.full(int(rng.integers(2, 300)), 0.3))
        models.append(coder.SymbolModel.from_pmf(pmf))
    per_symbol = [models[i % 5] for i in range(20_000)]
    symbols = [int(rng.integers(0, m.size)) for m in per_symbol]
    assert coder.range_decode(coder.range_encode(symbols, per_symbol), per_symbol) == symbols


def test_symbol_outside_alphabet_rejected():
    with pytest.raises(ValueError):
        coder.range_encode([3], coder.SymbolModel.from_pmf([0.5, 0.5]))


def test_gaussian_latents_close_to_cross_entropy():
    rng = make_rng(2)
    mu = rng.normal(0, 3, 5000)
    sigma = rng.uniform(0.3, 8.0, 5000)
    values = C.round_half_away(rng.normal(mu, sigma)).astype(np.int64)
    offsets = C.round_half_away(mu).astype(np.int64)
    enc = coder.RangeEncoder()
    coder.encode_values(enc, values, offsets, lambda sl: coder.gaussian_tables(mu[sl], sigma[sl], offsets[sl]))
    nbytes = len(enc.finish())
    model_bytes = C.gaussian_bin_bits(values, mu, sigma).sum() / 8
    assert abs(nbytes - model_bytes) <= 0.02 * model_bytes + 8


def test_escape_codes_outliers():
    mu = np.zeros(4)
    sigma = np.full(4, 0.5)
    values = np.array([0, 900, -2000, 3], dtype=np.int64)
    offsets = np.zeros(4, dtype=np.int64)

    def tables(sl):
        return coder.gaussian_tables(mu[sl], sigma[sl], offsets[sl])

    enc = coder.RangeEncoder()
    coder.encode_values(enc, values, offsets, tables)
    decoded = coder.decode_values(coder.RangeDecoder(enc.finish()), offsets, tables)
    assert decoded.tolist() == values.tolist()


# image codec -------------------------------------------------------------------


@pytest.mark.parametrize("shape", [(3, 16, 16), (3, 60, 100), (3, 33, 47), (3, 64, 48)])
def test_decode_matches_encoder_reconstruction(init_model, shape):
    img = make_rng(shape[1]).random(shape, dtype=np.float32)
    bs = coder.Bitstream.from_bytes(coder.encode_image(init_model, None, img).to_bytes())
    assert np.array_equal(coder.decode_image(init_model, None, bs), coder.reconstruct(init_model, None, img))


def test_decode_with_adapters(small_model, target_images):
    aset = init_adapter_set(small_model, seed=3)
    rng = make_rng(4)
    for p in aset.params():
        p.data = p.data + rng.normal(0, 0.01, p.shape).astype(np.float32)
    img = target_images[0][:, :40, :56]
    bs = coder.encode_image(small_model, aset, img)
    assert bs.adapter_id == aset.adapter_id
    assert np.array_equal(coder.decode_image(small_model, aset, bs), coder.reconstruct(small_model, aset, img))


def test_header_records_true_size(init_model):
    img = make_rng(5).random((3, 60, 100), dtype=np.float32)
    bs = coder.encode_image(init_model, None, img)
    assert (bs.width, bs.height) == (100, 60)
    assert (coder.padded_size(100), coder.padded_size(60)) == (112, 64)
    assert coder.pad_image(img).shape == (3, 64, 112)
    assert coder.decode_image(init_model, None, bs).shape == (3, 60, 100)
    assert bs.bpp() == pytest.approx(bs.num_bytes * 8 / 6000)


def test_bpp_tracks_rate_model(small_model, target_images):
    for img in target_images[:4]:
        bs = coder.encode_image(small_model, None, img)
        estimate = coder.model_bits(small_model, None, img) / 8
        payload = len(bs.z_payload) + len(bs.y_payload)
        assert abs(payload - estimate) <= 0.02 * estimate + 64


def test_model_mismatch_is_compatibility_error(init_model):
    bs = coder.encode_image(init_model, None, make_rng(6).random((3, 16, 16), dtype=np.float32))
    with pytest.raises(CompatibilityError):
        coder.decode_image(C.CodecModel.initialize(7), None, bs)
    with pytest.raises(CompatibilityError):
        coder.decode_image(init_model, init_adapter_set(init_model), bs)


def test_truncated_or_corrupt_stream(init_model):
    data = coder.encode_image(init_model, None, make_rng(7).random((3, 32, 32), dtype=np.float32)).to_bytes()
    with pytest.raises(FormatError):
        coder.Bitstream.from_bytes(data[:-3])
    corrupt = bytearray(data)
    corrupt[-12] ^= 0xFF
    with pytest.raises(FormatError):
        coder.Bitstream.from_bytes(bytes(corrupt))


def test_corrupt_payload_detected_by_symbol_checksum(init_model):
    bs = coder.encode_image(init_model, None, make_rng(8).random((3, 32, 32), dtype=np.float32))
    y = bytearray(bs.y_payload)
    y[0] ^= 0x5A
    bad = coder.Bitstream(bs.model_id, bs.adapter_id, bs.width, bs.height, bs.lambda_index, bs.z_payload, bytes(y))
    with pytest.raises(coder.DecodeError):
        coder.decode_image(init_model, None, bad)


def test_golden_bitstream_is_stable(init_model):
    assert init_model.model_id == GOLDEN_MODEL_ID
    golden = GOLDEN.read_bytes()
    assert coder.encode_image(init_model, None, golden_image()).to_bytes() == golden
    bs = coder.Bitstream.from_bytes(golden)
    assert np.array_equal(coder.decode_image(init_model, None, bs), coder.reconstruct(init_model, None, golden_image()))


def test_uniform_entropy_helper():
    assert coder.uniform_entropy_bits(1000, 256) == pytest.approx(8000.0)
    assert math.isclose(coder.uniform_entropy_bits(3, 2), 3.0)

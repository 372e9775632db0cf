"""Range coder and the image bitstream container.

The coder is a 32-bit carry-propagating range coder with byte-wise
renormalization and 16-bit probability precision.  Latent values are coded
relative to a per-element integer offset over the alphabet [-L, L] plus an
escape symbol followed by raw bits.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np
from scipy.special import expit, ndtr

from . import codec as C
from .serialization import CompatibilityError, FormatError, Reader, fnv1a64, split_checksum
from .tensor import Tensor

PRECISION = 16
TOTAL = 1 << PRECISION
ALPHABET_BOUND = 255
NUM_SYMBOLS = 2 * ALPHABET_BOUND + 2  # values -L..L then the escape symbol
ESCAPE = NUM_SYMBOLS - 1
_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF
_CHUNK = 4096

BITSTREAM_MAGIC = b"LICB"
BITSTREAM_VERSION = 1


class DecodeError(ValueError):
    """Raised when a payload cannot be decoded consistently."""


class RangeEncoder:
    def __init__(self) -> None:
        self.low = 0
        self.range = _MASK32
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()
        self.count = 0

    def encode(self, start: int, size: int) -> None:
        r = self.range >> PRECISION
        self.low += r * start
        self.range = r * size
        self.count += 1
        while self.range < _TOP:
            self.range <<= 8
            self._shift_low()

    def encode_raw16(self, value: int) -> None:
        self.encode(value & 0xFFFF, 1)

    def _shift_low(self) -> None:
        if self.low < 0xFF000000 or self.low > _MASK32:
            carry = self.low >> 32
            temp = self.cache
            while True:
                self.out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self.cache_size -= 1
                if self.cache_size == 0:
                    break
            self.cache = (self.low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (self.low << 8) & _MASK32

    def finish(self) -> bytes:
        if self.count == 0:
            return b""
        for _ in range(5):
            self._shift_low()
        # the first emitted byte is always zero
        return bytes(self.out[1:])


class RangeDecoder:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0
        self.overrun = 0
        self.range = _MASK32
        self.code = 0
        self._r = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._byte()

    def _byte(self) -> int:
        if self.pos < len(self.data):
            b = self.data[self.pos]
            self.pos += 1
            return b
        self.overrun += 1
        if self.overrun > 4:
            raise DecodeError("payload exhausted before all symbols were decoded")
        return 0

    def target(self) -> int:
        self._r = self.range >> PRECISION
        t = self.code // self._r
        if t >= TOTAL:
            raise DecodeError("corrupted payload: code value outside the current range")
        return t

    def update(self, start: int, size: int) -> None:
        self.code -= start * self._r
        self.range = self._r * size
        while self.range < _TOP:
            self.code = ((self.code << 8) | self._byte()) & _MASK32
            self.range <<= 8

    def decode_raw16(self) -> int:
        t = self.target()
        self.update(t, 1)
        return t


# ---------------------------------------------------------------------------
# symbol models


@dataclass
class SymbolModel:
    """Quantized CDF over alphabet indices: ``cdf[0] == 0``, ``cdf[-1] == 2**16``."""

    cdf: np.ndarray

    @classmethod
    def from_pmf(cls, pmf: Sequence[float]) -> "SymbolModel":
        return cls(quantize_pmf(np.asarray(pmf, dtype=np.float64)[None])[0])

    @property
    def size(self) -> int:
        return len(self.cdf) - 1


def quantize_pmf(pmf: np.ndarray) -> np.ndarray:
    """Rows of probabilities -> rows of cumulative counts totalling 2**16.

    Every symbol gets at least one count; the rounding slack goes to the most
    probable symbol of each row.
    """
    n, k = pmf.shape
    if k > TOTAL:
        raise ValueError("alphabet larger than the probability precision")
    pmf = np.clip(pmf, 0.0, None)
    pmf = pmf / pmf.sum(axis=1, keepdims=True)
    freq = np.floor(pmf * (TOTAL - k)).astype(np.int64) + 1
    deficit = TOTAL - freq.sum(axis=1)
    freq[np.arange(n), np.argmax(pmf, axis=1)] += deficit
    cdf = np.zeros((n, k + 1), dtype=np.int64)
    np.cumsum(freq, axis=1, out=cdf[:, 1:])
    return cdf


def range_encode(symbols: Sequence[int], models: Sequence[SymbolModel] | SymbolModel) -> bytes:
    """Encode alphabet indices, one model per symbol (or one shared model)."""
    enc = RangeEncoder()
    shared = models if isinstance(models, SymbolModel) else None
    for i, s in enumerate(symbols):
        cdf = (shared or models[i]).cdf
        s = int(s)
        if not 0 <= s < len(cdf) - 1:
            raise ValueError(f"symbol {s} outside alphabet of size {len(cdf) - 1}")
        lo, hi = int(cdf[s]), int(cdf[s + 1])
        enc.encode(lo, hi - lo)
    return enc.finish()


def range_decode(data: bytes, models: Sequence[SymbolModel] | SymbolModel, count: int | None = None) -> list[int]:
    shared = models if isinstance(models, SymbolModel) else None
    if count is None:
        if shared is not None:
            raise ValueError("count is required with a shared model")
        count = len(models)
    if count == 0:
        return []
    dec = RangeDecoder(data)
    out = []
    for i in range(count):
        cdf = (shared or models[i]).cdf
        t = dec.target()
        s = int(np.searchsorted(cdf, t, side="right")) - 1
        dec.update(int(cdf[s]), int(cdf[s + 1] - cdf[s]))
        out.append(s)
    return out


# ---------------------------------------------------------------------------
# distribution tables for latents

_DELTAS = np.arange(-ALPHABET_BOUND, ALPHABET_BOUND + 1, dtype=np.float64)
_EDGES = np.concatenate([_DELTAS - 0.5, [ALPHABET_BOUND + 0.5]])


def _tables_from_cdf(cdf_values: np.ndarray) -> np.ndarray:
    """Continuous CDF at bin edges -> quantized tables with an escape column."""
    inner = np.diff(cdf_values, axis=1)
    escape = np.clip(1.0 - (cdf_values[:, -1] - cdf_values[:, 0]), 0.0, None)
    pmf = np.concatenate([inner, escape[:, None]], axis=1)
    return quantize_pmf(pmf)


def gaussian_tables(mu: np.ndarray, sigma: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    s = np.clip(np.asarray(sigma, dtype=np.float64), C.SIGMA_MIN, C.SIGMA_MAX)[:, None]
    shift = (np.asarray(offsets, dtype=np.float64) - np.asarray(mu, dtype=np.float64))[:, None]
    return _tables_from_cdf(ndtr((shift + _EDGES[None]) / s))


def logistic_tables(loc: np.ndarray, scale: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    s = np.asarray(scale, dtype=np.float64)[:, None]
    shift = (np.asarray(offsets, dtype=np.float64) - np.asarray(loc, dtype=np.float64))[:, None]
    return _tables_from_cdf(expit((shift + _EDGES[None]) / s))


def _chunks(n: int) -> Iterator[slice]:
    for start in range(0, n, _CHUNK):
        yield slice(start, min(n, start + _CHUNK))


def encode_values(enc: RangeEncoder, values: np.ndarray, offsets: np.ndarray, table_fn) -> None:
    """Code integer ``values`` relative to ``offsets``; ``table_fn(slice)`` yields CDF rows."""
    deltas = values.astype(np.int64) - offsets.astype(np.int64)
    for sl in _chunks(len(deltas)):
        cdf = table_fn(sl)
        d = deltas[sl]
        idx = np.where(np.abs(d) <= ALPHABET_BOUND, d + ALPHABET_BOUND, ESCAPE)
        rows = np.arange(len(d))
        starts = cdf[rows, idx].tolist()
        sizes = (cdf[rows, idx + 1] - cdf[rows, idx]).tolist()
        for j, (lo, size) in enumerate(zip(starts, sizes)):
            enc.encode(lo, size)
            if idx[j] == ESCAPE:
                _encode_escape(enc, int(d[j]))


def _encode_escape(enc: RangeEncoder, delta: int) -> None:
    mag = abs(delta) - (ALPHABET_BOUND + 1)
    if mag >= 1 << 32:
        raise ValueError(f"latent value {delta} too large to code")
    enc.encode(0 if delta > 0 else TOTAL // 2, TOTAL // 2)
    enc.encode_raw16(mag >> 16)
    enc.encode_raw16(mag & 0xFFFF)


def decode_values(dec: RangeDecoder, offsets: np.ndarray, table_fn) -> np.ndarray:
    out = np.empty(len(offsets), dtype=np.int64)
    for sl in _chunks(len(offsets)):
        cdf = table_fn(sl)
        for j in range(sl.stop - sl.start):
            row = cdf[j]
            t = dec.target()
            s = int(np.searchsorted(row, t, side="right")) - 1
            dec.update(int(row[s]), int(row[s + 1] - row[s]))
            if s == ESCAPE:
                sign = dec.target()
                negative = sign >= TOTAL // 2
                dec.update(TOTAL // 2 if negative else 0, TOTAL // 2)
                mag = (dec.decode_raw16() << 16) | dec.decode_raw16()
                delta = mag + ALPHABET_BOUND + 1
                delta = -delta if negative else delta
            else:
                delta = s - ALPHABET_BOUND
            out[sl.start + j] = delta
    return out + offsets.astype(np.int64)


# ---------------------------------------------------------------------------
# bitstream


@dataclass
class Bitstream:
    model_id: int
    adapter_id: int
    width: int
    height: int
    lambda_index: int
    z_payload: bytes
    y_payload: bytes

    HEADER_BYTES = 4 + 2 + 8 + 8 + 4 + 4 + 1 + 4 + 4 + 8

    def to_bytes(self) -> bytes:
        buf = bytearray(BITSTREAM_MAGIC)
        buf += struct.pack(
            "<HQQIIB", BITSTREAM_VERSION, self.model_id, self.adapter_id, self.width, self.height, self.lambda_index
        )
        buf += struct.pack("<I", len(self.z_payload)) + self.z_payload
        buf += struct.pack("<I", len(self.y_payload)) + self.y_payload
        buf += struct.pack("<Q", fnv1a64(bytes(buf)))
        return bytes(buf)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        body, _ = split_checksum(data)
        r = Reader(body)
        if r.take(4) != BITSTREAM_MAGIC:
            raise FormatError("not a bitstream (bad magic)")
        version, model_id, adapter_id, width, height, lam = r.unpack("<HQQIIB")
        if version != BITSTREAM_VERSION:
            raise FormatError(f"unsupported bitstream version {version}")
        z = r.take(r.unpack("<I"))
        y = r.take(r.unpack("<I"))
        if not r.at_end():
            raise FormatError("trailing bytes in bitstream")
        return cls(model_id, adapter_id, width, height, lam, z, y)

    @property
    def num_bytes(self) -> int:
        return self.HEADER_BYTES + len(self.z_payload) + len(self.y_payload)

    def bpp(self) -> float:
        return self.num_bytes * 8.0 / (self.width * self.height)


def padded_size(n: int) -> int:
    m = C.SPATIAL_MULTIPLE
    return -(-n // m) * m


def pad_image(x: np.ndarray) -> np.ndarray:
    """Edge-replicate a (3, H, W) image up to multiples of 16."""
    _, h, w = x.shape
    ph, pw = padded_size(h) - h, padded_size(w) - w
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, ph), (0, pw)), mode="edge")


def _hyper_hw(latent_hw: tuple[int, int]) -> tuple[int, int]:
    def down(n: int) -> int:
        return (n + 2 * C.ANALYSIS_PAD - C.ANALYSIS_KERNEL) // 2 + 1

    return down(down(latent_hw[0])), down(down(latent_hw[1]))


def _adapter_id(adapters) -> int:
    return 0 if adapters is None else adapters.adapter_id


def _check_binding(model: C.CodecModel, adapters, bs: Bitstream) -> None:
    if bs.model_id != model.model_id:
        raise CompatibilityError(f"bitstream needs model {bs.model_id:016x}, loaded model is {model.model_id:016x}")
    if bs.adapter_id != _adapter_id(adapters):
        raise CompatibilityError(
            f"bitstream needs adapter set {bs.adapter_id:016x}, loaded set is {_adapter_id(adapters):016x}"
        )


def _z_coding(model: C.CodecModel, z_shape: tuple[int, ...]):
    """Offsets and a table function for the factorized prior of z (C, h, w)."""
    c, h, w = z_shape
    loc = model["prior.loc"].data.astype(np.float64)
    scale = np.exp(model["prior.log_scale"].data.astype(np.float64))
    off_c = C.round_half_away(loc).astype(np.int64)
    ch_tables = logistic_tables(loc, scale, off_c)
    channel = np.repeat(np.arange(c), h * w)
    offsets = off_c[channel]
    return offsets, lambda sl: ch_tables[channel[sl]]


def _y_coding(mu: np.ndarray, sigma: np.ndarray):
    mu = mu.reshape(-1).astype(np.float64)
    sigma = sigma.reshape(-1).astype(np.float64)
    offsets = C.round_half_away(mu).astype(np.int64)
    return offsets, lambda sl: gaussian_tables(mu[sl], sigma[sl], offsets[sl])


def _symbol_check(z_vals: np.ndarray, y_vals: np.ndarray) -> int:
    data = np.concatenate([z_vals, y_vals]).astype("<i4").tobytes()
    return fnv1a64(data) & 0xFFFFFFFF


def _latents(model, adapters, xp: np.ndarray):
    y = C.analysis(model, adapters, Tensor(xp[None]))
    y_hat = C.round_half_away(y.data)
    z = C.hyper_analysis(model, y)
    z_hat = C.round_half_away(z.data)
    mu, sigma = C.entropy_parameters(model, adapters, Tensor(z_hat), y.shape[2:], merged=True)
    return y_hat, z_hat, mu.data, sigma.data


def encode_image(model: C.CodecModel, adapters, x: np.ndarray) -> Bitstream:
    """Code a (3, H, W) image in [0, 1]; any size, padded internally to multiples of 16."""
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 3 or x.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got shape {x.shape}")
    _, h, w = x.shape
    y_hat, z_hat, mu, sigma = _latents(model, adapters, pad_image(x))

    z_vals = z_hat[0].reshape(-1).astype(np.int64)
    z_off, z_tab = _z_coding(model, z_hat.shape[1:])
    enc = RangeEncoder()
    encode_values(enc, z_vals, z_off, z_tab)
    z_payload = enc.finish()

    y_vals = y_hat[0].reshape(-1).astype(np.int64)
    y_off, y_tab = _y_coding(mu, sigma)
    enc = RangeEncoder()
    encode_values(enc, y_vals, y_off, y_tab)
    check = _symbol_check(z_vals, y_vals)
    enc.encode_raw16(check >> 16)
    enc.encode_raw16(check & 0xFFFF)
    y_payload = enc.finish()
    return Bitstream(model.model_id, _adapter_id(adapters), w, h, model.lambda_index, z_payload, y_payload)


def decode_image(model: C.CodecModel, adapters, bs: Bitstream) -> np.ndarray:
    """Reconstruct the (3, H, W) image; unclipped synthesis output, cropped to the true size."""
    _check_binding(model, adapters, bs)
    hp, wp = padded_size(bs.height), padded_size(bs.width)
    m = C.SPATIAL_MULTIPLE
    latent_hw = (hp // m, wp // m)
    zh, zw = _hyper_hw(latent_hw)
    z_shape = (C.HYPER_CHANNELS, zh, zw)

    z_off, z_tab = _z_coding(model, z_shape)
    z_vals = decode_values(RangeDecoder(bs.z_payload), z_off, z_tab)
    z_hat = z_vals.reshape((1,) + z_shape).astype(np.float32) + np.float32(0.0)
    mu, sigma = C.entropy_parameters(model, adapters, Tensor(z_hat), latent_hw, merged=True)

    y_off, y_tab = _y_coding(mu.data, sigma.data)
    dec = RangeDecoder(bs.y_payload)
    y_vals = decode_values(dec, y_off, y_tab)
    check = (dec.decode_raw16() << 16) | dec.decode_raw16()
    if check != _symbol_check(z_vals, y_vals):
        raise DecodeError("decoded latents fail the symbol checksum (encoder/decoder divergence)")
    y_hat = y_vals.reshape((1, C.LATENT_CHANNELS) + latent_hw).astype(np.float32) + np.float32(0.0)
    x_hat = C.synthesis(model, adapters, Tensor(y_hat))
    return x_hat.data[0, :, : bs.height, : bs.width]


def reconstruct(model: C.CodecModel, adapters, x: np.ndarray) -> np.ndarray:
    """Encoder-side Round-mode forward reconstruction of a (3, H, W) image."""
    x = np.asarray(x, dtype=np.float32)
    _, h, w = x.shape
    x_hat, _ = C.forward(model, adapters, pad_image(x)[None], C.QuantMode.ROUND)
    return x_hat.data[0, :, :h, :w]


def model_bits(model: C.CodecModel, adapters, x: np.ndarray) -> float:
    """Round-mode rate estimate (rate_y + rate_z) in bits for one image."""
    x = np.asarray(x, dtype=np.float32)
    _, bundle = C.forward(model, adapters, pad_image(x)[None], C.QuantMode.ROUND)
    return float(bundle.rate_y.data) + float(bundle.rate_z.data)


def uniform_entropy_bits(count: int, alphabet: int) -> float:
    return count * math.log2(alphabet)

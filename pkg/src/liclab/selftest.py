"""Fast built-in invariant checks, runnable without pytest (``liclab selftest``)."""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import analysis as A
from . import codec as C
from . import coder
from .adapters import Structure, init_adapter_set
from .tensor import make_rng


def _identity_at_init() -> bool:
    model = C.CodecModel.initialize(0)
    x = make_rng(1).random((2, 3, 32, 32), dtype=np.float32)
    ref, rb = C.forward(model, None, x, C.QuantMode.ROUND)
    for s in Structure:
        aset = init_adapter_set(model, s, seed=3)
        out, ab = C.forward(model, aset, x, C.QuantMode.ROUND)
        if not (np.array_equal(out.data, ref.data) and np.array_equal(ab.bits_y.data, rb.bits_y.data)):
            return False
    return True


def _lora_merge() -> bool:
    model = C.CodecModel.initialize(0)
    aset = init_adapter_set(model, seed=4)
    rng = make_rng(5)
    for lora in aset.lora.values():
        lora.B.data = rng.normal(0, 0.05, lora.B.shape).astype(np.float32)
    z = make_rng(6).normal(0, 2, (1, 32, 2, 2)).astype(np.float32)
    from .tensor import Tensor

    mu_p, s_p = C.entropy_parameters(model, aset, Tensor(z), (8, 8), merged=False)
    mu_m, s_m = C.entropy_parameters(model, aset, Tensor(z), (8, 8), merged=True)
    rel = np.abs(mu_p.data - mu_m.data).max() / max(np.abs(mu_p.data).max(), 1e-12)
    return bool(rel <= 1e-5)


def _codec_round_trip() -> bool:
    model = C.CodecModel.initialize(0)
    img = make_rng(7).random((3, 40, 56), dtype=np.float32)
    bs = coder.encode_image(model, None, img)
    restored = coder.Bitstream.from_bytes(bs.to_bytes())
    return bool(np.array_equal(coder.decode_image(model, None, restored), coder.reconstruct(model, None, img)))


def _range_coder() -> bool:
    rng = make_rng(8)
    pmf = rng.random(17) + 0.01
    model = coder.SymbolModel.from_pmf(pmf / pmf.sum())
    symbols = rng.integers(0, 17, size=5000).tolist()
    return coder.range_decode(coder.range_encode(symbols, model), model, len(symbols)) == symbols


def _bd_rate() -> bool:
    bpp = np.array([0.1, 0.2, 0.4, 0.8])
    psnr = np.array([28.0, 31.0, 34.0, 37.0])
    anchor = A.RdCurve.from_arrays(bpp, psnr)
    test = A.RdCurve.from_arrays(0.9 * bpp, psnr)
    return A.bd_rate(anchor, anchor) == 0.0 and abs(A.bd_rate(anchor, test) + 10.0) < 1e-9


CHECKS: dict[str, Callable[[], bool]] = {
    "identity-at-init": _identity_at_init,
    "lora-merge": _lora_merge,
    "codec-round-trip": _codec_round_trip,
    "range-coder-lossless": _range_coder,
    "bd-rate-oracle": _bd_rate,
}


def run_selftest(verbose: bool = True) -> bool:
    ok = True
    for name, check in CHECKS.items():
        start = time.perf_counter()
        try:
            passed = bool(check())
        except Exception as exc:  # report, keep going
            passed = False
            if verbose:
                print(f"  {name}: {type(exc).__name__}: {exc}")
        ok &= passed
        if verbose:
            print(f"{'PASS' if passed else 'FAIL'} {name} ({time.perf_counter() - start:.2f}s)")
    return ok

"""The desk-scale baseline codec: analysis/synthesis transforms, a mean-scale
hyperprior with an entropy-parameters network, quantization, differentiable
rate estimates and the checkpoint format.

Layout (channels):

* ``g_a``  4 x [conv5x5/2 -> GDN]        3 -> 32 -> 32 -> 32 -> 64
* ``g_s``  4 x [IGDN -> tconv6x6/2]      64 -> 32 -> 32 -> 32 -> 3
* ``h_a``  conv5x5/2 -> ReLU -> conv5x5/2             64 -> 32 -> 32
* ``h_s``  tconv6x6/2 -> ReLU -> tconv6x6/2 -> ReLU   32 -> 32 -> 48
* ``g_ep`` conv1x1 -> ReLU -> conv1x1                 48 -> 96 -> 128 (mu | sigma)
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass
from enum import Enum
from typing import Protocol

import numpy as np
from scipy.special import expit, ndtr

from . import tensor as T
from .serialization import CompatibilityError, FormatError, Reader, fnv1a64, write_tensor
from .tensor import Param, Tensor, make_rng

log = logging.getLogger(__name__)

GA_CHANNELS = (3, 32, 32, 32, 64)
GS_CHANNELS = (64, 32, 32, 32, 3)
HA_CHANNELS = (64, 32, 32)
HS_CHANNELS = (32, 32, 48)
EP_CHANNELS = (48, 96, 128)
LATENT_CHANNELS = 64
HYPER_CHANNELS = 32
ANALYSIS_KERNEL, ANALYSIS_PAD = 5, 2
SYNTHESIS_KERNEL, SYNTHESIS_PAD = 6, 2
SPATIAL_MULTIPLE = 16

SIGMA_MIN, SIGMA_MAX = 0.04, 64.0
PROB_FLOOR = 1e-9
GDN_BETA_MIN = 1e-6
# distortion enters the loss as MSE on the 8-bit scale
DISTORTION_SCALE = 255.0**2
PIXEL_OFFSET = 0.5  # transforms operate on pixels centred around mid-gray
LAMBDA_PRESETS = (0.0018, 0.0035, 0.0067, 0.0130, 0.0250, 0.0483)

CHECKPOINT_MAGIC = b"LICM"
CHECKPOINT_VERSION = 1
_LN2 = math.log(2.0)


class NumericalError(RuntimeError):
    """Raised when training produces a non-finite loss."""


class QuantMode(Enum):
    NOISE = "noise"
    ROUND = "round"


class AdapterHooks(Protocol):
    def apply(self, site: str, h: Tensor) -> Tensor: ...

    def ep_conv(self, site: str, h: Tensor, weight: Tensor, bias: Tensor, merged: bool) -> Tensor: ...


# ---------------------------------------------------------------------------
# quantization and likelihoods


def round_half_away(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v)
    t = np.trunc(v)
    out = np.where(np.abs(v - t) == 0.5, t + np.sign(v), np.round(v)).astype(v.dtype)
    return out + out.dtype.type(0.0)  # no negative zeros


def quantize(v: Tensor, qmode: QuantMode, rng: np.random.Generator | None = None) -> Tensor:
    """Additive uniform noise (differentiable) or hard rounding (no gradient)."""
    if qmode is QuantMode.ROUND:
        return Tensor(round_half_away(v.data))
    if rng is None:
        raise ValueError("noise quantization needs a seeded generator")
    noise = rng.random(v.shape, dtype=np.float32) - np.float32(0.5)
    return v + Tensor(noise.astype(v.dtype))


def _gauss_pdf(t: np.ndarray) -> np.ndarray:
    return np.exp(-0.5 * t * t) / math.sqrt(2.0 * math.pi)


def gaussian_bin_bits(y_hat, mu, sigma) -> np.ndarray:
    """-log2 of the unit-bin Gaussian mass around ``y_hat`` (numpy, float64)."""
    y_hat, mu, sigma = (np.asarray(a, dtype=np.float64) for a in (y_hat, mu, sigma))
    s = np.clip(sigma, SIGMA_MIN, SIGMA_MAX)
    v = np.abs(y_hat - mu)
    p = ndtr((0.5 - v) / s) - ndtr((-0.5 - v) / s)
    return -np.log2(np.maximum(p, PROB_FLOOR))


def gaussian_bits(y_hat: Tensor, mu: Tensor, sigma: Tensor) -> Tensor:
    """Elementwise bits of ``y_hat`` under N(mu, sigma) integrated over unit bins."""
    d = y_hat.data.astype(np.float64) - mu.data
    sraw = sigma.data.astype(np.float64)
    s = np.clip(sraw, SIGMA_MIN, SIGMA_MAX)
    v = np.abs(d)
    upper = (0.5 - v) / s
    lower = (-0.5 - v) / s
    p = np.maximum(ndtr(upper) - ndtr(lower), PROB_FLOOR)
    bits = -np.log2(p)

    def backward(g):
        gp = -g / (p * _LN2)
        pu, pl = _gauss_pdf(upper), _gauss_pdf(lower)
        gv = gp * (pl - pu) / s
        gd = gv * np.sign(d)
        gs = gp * (lower * pl - upper * pu) / s
        inside = (sraw >= SIGMA_MIN) & (sraw <= SIGMA_MAX)
        gs = gs * (inside | ((sraw < SIGMA_MIN) & (gs < 0)) | ((sraw > SIGMA_MAX) & (gs > 0)))
        return (
            gd if y_hat.requires_grad else None,
            -gd if mu.requires_grad else None,
            gs if sigma.requires_grad else None,
        )

    return T._result(bits, (y_hat, mu, sigma), backward)


def _logistic_pdf(t: np.ndarray) -> np.ndarray:
    e = expit(t)
    return e * (1.0 - e)


def factorized_bin_bits(z_hat, loc, scale) -> np.ndarray:
    """-log2 of the unit-bin logistic mass around ``z_hat`` (numpy, float64)."""
    z_hat, loc, scale = (np.asarray(a, dtype=np.float64) for a in (z_hat, loc, scale))
    v = np.abs(z_hat - loc)
    p = expit((0.5 - v) / scale) - expit((-0.5 - v) / scale)
    return -np.log2(np.maximum(p, PROB_FLOOR))


def factorized_bits(z_hat: Tensor, loc: Tensor, log_scale: Tensor) -> Tensor:
    """Per-channel logistic prior; ``loc``/``log_scale`` have shape (C,)."""
    c = z_hat.shape[1]
    lo = loc.data.astype(np.float64)[None, :, None, None]
    s = np.exp(log_scale.data.astype(np.float64))[None, :, None, None]
    d = z_hat.data.astype(np.float64) - lo
    v = np.abs(d)
    upper = (0.5 - v) / s
    lower = (-0.5 - v) / s
    p = np.maximum(expit(upper) - expit(lower), PROB_FLOOR)
    bits = -np.log2(p)

    def backward(g):
        gp = -g / (p * _LN2)
        pu, pl = _logistic_pdf(upper), _logistic_pdf(lower)
        gd = gp * (pl - pu) / s * np.sign(d)
        gs = gp * (lower * pl - upper * pu) / s
        return (
            gd if z_hat.requires_grad else None,
            (-gd).sum(axis=(0, 2, 3)).reshape(c) if loc.requires_grad else None,
            (gs * s).sum(axis=(0, 2, 3)).reshape(c) if log_scale.requires_grad else None,
        )

    return T._result(bits, (z_hat, loc, log_scale), backward)


# ---------------------------------------------------------------------------
# model


def _conv_init(rng, c_out, c_in, k):
    bound = math.sqrt(3.0 / (c_in * k * k))
    return rng.uniform(-bound, bound, size=(c_out, c_in, k, k))


def _tconv_init(rng, c_in, c_out, k, stride):
    bound = math.sqrt(3.0 * stride * stride / (c_in * k * k))
    return rng.uniform(-bound, bound, size=(c_in, c_out, k, k))


def _snap_lambda(lmbda: float) -> float:
    """Map a lambda read back from float32 storage onto the preset it came from."""
    for lam in LAMBDA_PRESETS:
        if abs(lam - lmbda) <= 1e-6 * lam:
            return lam
    return lmbda


class CodecModel:
    """Named parameters plus the lambda the model was trained for."""

    def __init__(self, params: dict[str, Param], lmbda: float | None = None):
        self.params = params
        self.lmbda = lmbda
        self._model_id: int | None = None

    @classmethod
    def initialize(cls, seed: int, dtype=np.float32) -> "CodecModel":
        rng = make_rng(seed, 0)
        arrays: dict[str, np.ndarray] = {}
        for i in range(4):
            ci, co = GA_CHANNELS[i], GA_CHANNELS[i + 1]
            arrays[f"g_a.stack{i + 1}.conv.weight"] = _conv_init(rng, co, ci, ANALYSIS_KERNEL)
            arrays[f"g_a.stack{i + 1}.conv.bias"] = np.zeros(co)
            arrays[f"g_a.stack{i + 1}.gdn.beta"] = T.nonneg_init(np.ones(co), np.float64)
            arrays[f"g_a.stack{i + 1}.gdn.gamma"] = T.nonneg_init(0.1 * np.eye(co), np.float64)
        for i in range(4):
            ci, co = GS_CHANNELS[i], GS_CHANNELS[i + 1]
            arrays[f"g_s.stack{i + 1}.igdn.beta"] = T.nonneg_init(np.ones(ci), np.float64)
            arrays[f"g_s.stack{i + 1}.igdn.gamma"] = T.nonneg_init(0.1 * np.eye(ci), np.float64)
            arrays[f"g_s.stack{i + 1}.tconv.weight"] = _tconv_init(rng, ci, co, SYNTHESIS_KERNEL, 2)
            arrays[f"g_s.stack{i + 1}.tconv.bias"] = np.zeros(co)
        for i in range(2):
            ci, co = HA_CHANNELS[i], HA_CHANNELS[i + 1]
            arrays[f"h_a.stack{i + 1}.conv.weight"] = _conv_init(rng, co, ci, ANALYSIS_KERNEL)
            arrays[f"h_a.stack{i + 1}.conv.bias"] = np.zeros(co)
        for i in range(2):
            ci, co = HS_CHANNELS[i], HS_CHANNELS[i + 1]
            arrays[f"h_s.stack{i + 1}.tconv.weight"] = _tconv_init(rng, ci, co, SYNTHESIS_KERNEL, 2)
            arrays[f"h_s.stack{i + 1}.tconv.bias"] = np.zeros(co)
        for i in range(2):
            ci, co = EP_CHANNELS[i], EP_CHANNELS[i + 1]
            arrays[f"g_ep.conv{i + 1}.weight"] = _conv_init(rng, co, ci, 1)
            arrays[f"g_ep.conv{i + 1}.bias"] = np.zeros(co)
        arrays["prior.loc"] = np.zeros(HYPER_CHANNELS)
        arrays["prior.log_scale"] = np.zeros(HYPER_CHANNELS)
        params = {name: Param(name, a.astype(dtype)) for name, a in arrays.items()}
        return cls(params)

    # bookkeeping -----------------------------------------------------------
    def __getitem__(self, name: str) -> Param:
        return self.params[name]

    def param_list(self) -> list[Param]:
        return list(self.params.values())

    def num_params(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def set_trainable(self, flag: bool) -> None:
        for p in self.params.values():
            p.trainable = flag
        self._model_id = None

    def freeze(self) -> "CodecModel":
        self.set_trainable(False)
        self._model_id = None
        return self

    def copy(self, dtype=None) -> "CodecModel":
        params = {
            n: Param(n, p.data.astype(dtype or p.dtype, copy=True), p.trainable) for n, p in self.params.items()
        }
        return CodecModel(params, self.lmbda)

    def astype(self, dtype) -> "CodecModel":
        return self.copy(dtype)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    @property
    def model_id(self) -> int:
        """FNV-1a hash of the serialized checkpoint (trailing 8 bytes)."""
        if self._model_id is None:
            self._model_id = struct.unpack("<Q", self.to_bytes()[-8:])[0]
        return self._model_id

    def invalidate_id(self) -> None:
        self._model_id = None

    @property
    def lambda_index(self) -> int:
        if self.lmbda is None:
            return 255
        lmbda = _snap_lambda(self.lmbda)
        return LAMBDA_PRESETS.index(lmbda) if lmbda in LAMBDA_PRESETS else 255

    # checkpoint -----------------------------------------------------------
    def to_bytes(self) -> bytes:
        records = [(n, p.data) for n, p in self.params.items()]
        if self.lmbda is not None:
            records.append(("meta.lambda", np.array([self.lmbda], dtype=np.float32)))
        buf = bytearray(CHECKPOINT_MAGIC)
        buf += struct.pack("<HI", CHECKPOINT_VERSION, len(records))
        for name, arr in records:
            write_tensor(buf, name, arr)
        buf += struct.pack("<Q", fnv1a64(bytes(buf)))
        return bytes(buf)

    @classmethod
    def from_bytes(cls, data: bytes) -> "CodecModel":
        from .serialization import split_checksum

        body, model_id = split_checksum(data)
        r = Reader(body)
        if r.take(4) != CHECKPOINT_MAGIC:
            raise FormatError("not a model checkpoint (bad magic)")
        version, count = r.unpack("<HI")
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        params: dict[str, Param] = {}
        lmbda = None
        for _ in range(count):
            name, arr = r.read_tensor()
            if name == "meta.lambda":
                lmbda = _snap_lambda(float(arr[0]))
                continue
            if name in params:
                raise FormatError(f"duplicate param {name!r}")
            params[name] = Param(name, arr.copy(), trainable=False)
        if not r.at_end():
            raise FormatError("trailing bytes after last record")
        reference = CodecModel.initialize(0)
        if set(params) != set(reference.params):
            raise FormatError("checkpoint param names do not match the codec layout")
        for name, p in params.items():
            if p.shape != reference[name].shape:
                raise FormatError(f"param {name!r} has shape {p.shape}, expected {reference[name].shape}")
        model = cls(params, lmbda)
        model._model_id = model_id
        return model

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "CodecModel":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


# ---------------------------------------------------------------------------
# forward pipeline


@dataclass
class LatentBundle:
    y: Tensor
    z: Tensor
    y_hat: Tensor
    z_hat: Tensor
    mu: Tensor
    sigma: Tensor
    bits_y: Tensor
    bits_z: Tensor
    rate_y: Tensor
    rate_z: Tensor


def _gdn_params(model: CodecModel, prefix: str) -> tuple[Tensor, Tensor]:
    beta = T.nonneg_value(model[f"{prefix}.beta"], GDN_BETA_MIN)
    gamma = T.nonneg_value(model[f"{prefix}.gamma"])
    return beta, gamma


def check_input(x: np.ndarray) -> None:
    if x.ndim != 4 or x.shape[1] != 3:
        raise T.DimensionError(f"expected a (batch, 3, height, width) image tensor, got shape {x.shape}")
    h, w = x.shape[2:]
    if h % SPATIAL_MULTIPLE or w % SPATIAL_MULTIPLE:
        raise T.DimensionError(
            f"height and width must be multiples of {SPATIAL_MULTIPLE}, got ({h}, {w}); pad the image first"
        )


def analysis(model: CodecModel, adapters: AdapterHooks | None, x: Tensor) -> Tensor:
    h = T.add(x, -PIXEL_OFFSET)
    for i in range(1, 5):
        h = T.conv2d(h, model[f"g_a.stack{i}.conv.weight"], model[f"g_a.stack{i}.conv.bias"], 2, ANALYSIS_PAD)
        h = T.gdn(h, *_gdn_params(model, f"g_a.stack{i}.gdn"))
        if adapters is not None:
            h = adapters.apply(f"g_a.stack{i}", h)
    return h


def synthesis(model: CodecModel, adapters: AdapterHooks | None, y_hat: Tensor) -> Tensor:
    h = y_hat
    for i in range(1, 5):
        h = T.gdn(h, *_gdn_params(model, f"g_s.stack{i}.igdn"), inverse=True)
        h = T.conv_transpose2d(
            h, model[f"g_s.stack{i}.tconv.weight"], model[f"g_s.stack{i}.tconv.bias"], 2, SYNTHESIS_PAD
        )
        if adapters is not None:
            h = adapters.apply(f"g_s.stack{i}", h)
    return T.add(h, PIXEL_OFFSET)


def hyper_analysis(model: CodecModel, y: Tensor) -> Tensor:
    h = T.conv2d(y, model["h_a.stack1.conv.weight"], model["h_a.stack1.conv.bias"], 2, ANALYSIS_PAD)
    h = T.relu(h)
    return T.conv2d(h, model["h_a.stack2.conv.weight"], model["h_a.stack2.conv.bias"], 2, ANALYSIS_PAD)


def entropy_parameters(
    model: CodecModel,
    adapters: AdapterHooks | None,
    z_hat: Tensor,
    latent_hw: tuple[int, int],
    merged: bool = False,
) -> tuple[Tensor, Tensor]:
    """h_s followed by g_ep; returns (mu, sigma) cropped to the latent grid."""
    h = z_hat
    for i in (1, 2):
        h = T.conv_transpose2d(
            h, model[f"h_s.stack{i}.tconv.weight"], model[f"h_s.stack{i}.tconv.bias"], 2, SYNTHESIS_PAD
        )
        h = T.relu(h)
    h = T.crop(h, *latent_hw)
    for i in (1, 2):
        w, b = model[f"g_ep.conv{i}.weight"], model[f"g_ep.conv{i}.bias"]
        if adapters is not None:
            h = adapters.ep_conv(f"g_ep.conv{i}", h, w, b, merged)
        else:
            h = T.conv2d(h, w, b)
        if i == 1:
            h = T.relu(h)
    mu = h[:, :LATENT_CHANNELS]
    sigma = T.softplus(h[:, LATENT_CHANNELS:])
    return mu, sigma


def forward(
    model: CodecModel,
    adapters: AdapterHooks | None,
    x,
    qmode: QuantMode,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, LatentBundle]:
    """Full codec pass.  Noise for y is drawn before noise for z."""
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
    check_input(x.data)
    y = analysis(model, adapters, x)
    y_hat = quantize(y, qmode, rng)
    z = hyper_analysis(model, y)
    z_hat = quantize(z, qmode, rng)
    mu, sigma = entropy_parameters(model, adapters, z_hat, y.shape[2:])
    bits_y = gaussian_bits(y_hat, mu, sigma)
    bits_z = factorized_bits(z_hat, model["prior.loc"], model["prior.log_scale"])
    x_hat = synthesis(model, adapters, y_hat)
    bundle = LatentBundle(
        y=y,
        z=z,
        y_hat=y_hat,
        z_hat=z_hat,
        mu=mu,
        sigma=sigma,
        bits_y=bits_y,
        bits_z=bits_z,
        rate_y=T.sum_all(bits_y),
        rate_z=T.sum_all(bits_z),
    )
    return x_hat, bundle


@dataclass
class RdTerms:
    loss: Tensor
    bpp_y: float
    bpp_z: float
    mse: float

    @property
    def bpp(self) -> float:
        return self.bpp_y + self.bpp_z


def rd_loss(x, x_hat: Tensor, bundle: LatentBundle, lmbda: float, with_rate: bool = True) -> RdTerms:
    """Rate in bits per pixel plus ``lmbda`` times the 8-bit-scale MSE."""
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
    b, _, h, w = x.shape
    pixels = float(b * h * w)
    dist = T.mse(x_hat, x)
    loss = T.mul(dist, lmbda * DISTORTION_SCALE)
    if with_rate:
        rate = T.add(bundle.rate_y, bundle.rate_z)
        loss = T.add(T.mul(rate, 1.0 / pixels), loss)
    return RdTerms(
        loss=loss,
        bpp_y=float(bundle.rate_y.data) / pixels,
        bpp_z=float(bundle.rate_z.data) / pixels,
        mse=float(dist.data),
    )


def psnr(mse_value: float) -> float:
    """PSNR in dB for [0, 1] pixels (identical to the 8-bit 255-peak definition)."""
    return 10.0 * math.log10(1.0 / max(mse_value, 1e-12))


# ---------------------------------------------------------------------------
# pretraining


def random_crops(images: np.ndarray, count: int, patch: int, rng: np.random.Generator) -> np.ndarray:
    n, _, h, w = images.shape
    idx = rng.integers(0, n, size=count)
    out = np.empty((count, images.shape[1], patch, patch), dtype=images.dtype)
    for k, i in enumerate(idx):
        top = int(rng.integers(0, h - patch + 1))
        left = int(rng.integers(0, w - patch + 1))
        out[k] = images[i, :, top : top + patch, left : left + patch]
    return out


def lr_at(step: int, steps: int, base_lr: float) -> float:
    """Step-down schedule: x1 until 60% of training, then 0.3, 0.1, 0.01."""
    frac = step / max(steps, 1)
    if frac < 0.6:
        return base_lr
    if frac < 0.75:
        return base_lr * 0.3
    if frac < 0.9:
        return base_lr * 0.1
    return base_lr * 0.01


def pretrain_baseline(
    images: np.ndarray,
    lmbda: float,
    steps: int,
    seed: int,
    batch: int = 4,
    patch: int = 64,
    lr: float = 1e-3,
    model: CodecModel | None = None,
    history: list | None = None,
    clip_norm: float | None = None,
) -> CodecModel:
    """Train every codec parameter end-to-end on source-domain images."""
    model = model.copy() if model is not None else CodecModel.initialize(seed)
    model.lmbda = lmbda
    params = model.param_list()
    if steps > 0:
        model.set_trainable(True)
    state = T.OptimState(lr=lr)
    data_rng = make_rng(seed, 1)
    noise_rng = make_rng(seed, 2)
    for step in range(steps):
        x = random_crops(images, batch, patch, data_rng)
        T.zero_grad(params)
        x_hat, bundle = forward(model, None, x, QuantMode.NOISE, noise_rng)
        terms = rd_loss(x, x_hat, bundle, lmbda)
        value = float(terms.loss.data)
        if not math.isfinite(value):
            raise NumericalError(f"non-finite loss at pretraining step {step}")
        terms.loss.backward()
        if clip_norm is not None:
            T.clip_grad_norm(params, clip_norm)
        state.lr = lr_at(step, steps, lr)
        T.adam_step(params, state)
        if history is not None:
            history.append({"step": step, "loss": value, "bpp": terms.bpp, "mse": terms.mse})
        if step % 250 == 0:
            log.info("pretrain step %d loss %.4f bpp %.4f psnr %.2f", step, value, terms.bpp, psnr(terms.mse))
    return model.freeze()


def require_model(model_id: int, expected: int, what: str) -> None:
    if model_id != expected:
        raise CompatibilityError(f"{what} was produced for model {model_id:016x}, loaded model is {expected:016x}")

"""Channel statistics, channel-subset reconstructions, spectra, RD curves and BD-rate."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.interpolate import PchipInterpolator

from . import codec as C
from . import tensor as T
from .coder import decode_image, encode_image, pad_image
from .datagen import write_pgm, write_ppm

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])
LOW_FREQUENCY_CUTOFF = 0.125  # cycles per pixel, a quarter of Nyquist
_ENERGY_FLOOR = 1e-12


class AnalysisError(ValueError):
    pass


# ---------------------------------------------------------------------------
# channel statistics


@dataclass
class ChannelStats:
    energy: np.ndarray  # mean squared rounded latent per channel
    bits: np.ndarray  # mean model bits per element per channel
    order: np.ndarray  # channel indices by descending reference energy
    num_images: int

    @property
    def log_energy(self) -> np.ndarray:
        return np.log(np.maximum(self.energy, _ENERGY_FLOOR))

    def bottom_half(self) -> np.ndarray:
        """Indices of the lower-energy half of channels under ``order``."""
        return self.order[len(self.order) // 2 :]

    def bottom_half_energy(self) -> float:
        return float(self.energy[self.bottom_half()].sum())


def energy_order(energy: np.ndarray) -> np.ndarray:
    return np.argsort(-np.asarray(energy), kind="stable")


def _round_latents(model, adapters, img: np.ndarray):
    img = np.asarray(img, dtype=np.float32)
    _, bundle = C.forward(model, adapters, pad_image(img)[None], C.QuantMode.ROUND)
    return bundle


def channel_stats(model, adapters, images, reference: ChannelStats | None = None) -> ChannelStats:
    """Per-channel energy and rate of the rounded latent, averaged over ``images``.

    With ``reference`` the sort order is taken from the reference statistics
    (e.g. the frozen model) so pre/post adaptation channels line up.
    """
    images = list(images)
    if not images:
        raise AnalysisError("channel_stats needs at least one image")
    sq = None
    bits = None
    count = 0
    for img in images:
        bundle = _round_latents(model, adapters, img)
        y = bundle.y_hat.data[0].astype(np.float64)
        b = bundle.bits_y.data[0].astype(np.float64)
        c = y.shape[0]
        if sq is None:
            sq, bits = np.zeros(c), np.zeros(c)
        sq += (y**2).reshape(c, -1).sum(axis=1)
        bits += b.reshape(c, -1).sum(axis=1)
        count += y[0].size
    energy = sq / count
    order = reference.order.copy() if reference is not None else energy_order(energy)
    return ChannelStats(energy=energy, bits=bits / count, order=order, num_images=len(images))


def reconstruct_from_channels(model, adapters, x: np.ndarray, keep: Iterable[int]) -> np.ndarray:
    """g_s of the rounded latent with all channels outside ``keep`` zeroed, minus g_s(0)."""
    x = np.asarray(x, dtype=np.float32)
    h, w = x.shape[1:]
    bundle = _round_latents(model, adapters, x)
    y_hat = bundle.y_hat.data
    channels = y_hat.shape[1]
    keep = sorted(set(int(k) for k in keep))
    for k in keep:
        if not 0 <= k < channels:
            raise IndexError(f"channel {k} outside [0, {channels})")
    masked = np.zeros_like(y_hat)
    masked[:, keep] = y_hat[:, keep]
    rec = C.synthesis(model, adapters, T.Tensor(masked)).data
    base = C.synthesis(model, adapters, T.Tensor(np.zeros_like(y_hat))).data
    return (rec - base)[0, :, :h, :w]


# ---------------------------------------------------------------------------
# spectra


def to_luma(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x
    if x.ndim == 3 and x.shape[0] == 3:
        return np.tensordot(LUMA_WEIGHTS, x, axes=1)
    if x.ndim == 3 and x.shape[0] == 1:
        return x[0]
    raise T.DimensionError(f"expected (H, W), (1, H, W) or (3, H, W), got {x.shape}")


def fft_spectrum(x: np.ndarray) -> np.ndarray:
    """DC-centred 2-D DFT magnitude of the luma of ``x``."""
    return np.abs(np.fft.fftshift(np.fft.fft2(to_luma(x))))


def log_spectrum(x: np.ndarray) -> np.ndarray:
    """``log1p`` of the magnitude spectrum, scaled to [0, 1] for image export."""
    s = np.log1p(fft_spectrum(x))
    peak = s.max()
    return s / peak if peak > 0 else s


def _radial_frequency(h: int, w: int) -> np.ndarray:
    fy = np.fft.fftshift(np.fft.fftfreq(h))
    fx = np.fft.fftshift(np.fft.fftfreq(w))
    return np.sqrt(fy[:, None] ** 2 + fx[None, :] ** 2)


def low_frequency_share(x: np.ndarray, cutoff: float = LOW_FREQUENCY_CUTOFF) -> float:
    """Fraction of non-DC spectral energy strictly below ``cutoff`` cycles/pixel."""
    power = fft_spectrum(x) ** 2
    h, w = power.shape
    r = _radial_frequency(h, w)
    power[h // 2, w // 2] = 0.0
    total = power.sum()
    if total == 0:
        return 1.0
    return float(power[r < cutoff].sum() / total)


def high_frequency_energy(x: np.ndarray, cutoff: float = LOW_FREQUENCY_CUTOFF) -> float:
    """Spectral energy at or above ``cutoff`` cycles/pixel, per pixel."""
    power = fft_spectrum(x) ** 2
    r = _radial_frequency(*power.shape)
    return float(power[r >= cutoff].sum() / power.size)


# ---------------------------------------------------------------------------
# RD curves and BD-rate


@dataclass
class RdPoint:
    bpp: float
    psnr: float
    lmbda: float = float("nan")


@dataclass
class RdCurve:
    points: list[RdPoint]
    label: str = ""
    per_image: list[list[tuple[float, float]]] = field(default_factory=list, repr=False)

    def __post_init__(self) -> None:
        self.points = sorted(self.points, key=lambda p: p.bpp)
        bpps = [p.bpp for p in self.points]
        if any(b <= 0 or not math.isfinite(b) for b in bpps):
            raise AnalysisError("rates must be positive and finite")
        if any(b1 <= b0 for b0, b1 in zip(bpps, bpps[1:])):
            raise AnalysisError("curve bpp values must be strictly increasing")

    @classmethod
    def from_arrays(cls, bpp, psnr, label: str = "", lambdas=None) -> "RdCurve":
        lambdas = lambdas if lambdas is not None else [float("nan")] * len(bpp)
        return cls([RdPoint(float(b), float(p), float(l)) for b, p, l in zip(bpp, psnr, lambdas)], label)

    @property
    def bpp(self) -> np.ndarray:
        return np.array([p.bpp for p in self.points])

    @property
    def psnr(self) -> np.ndarray:
        return np.array([p.psnr for p in self.points])


def _log_rate_interpolant(curve: RdCurve, min_points: int) -> PchipInterpolator:
    if len(curve.points) < min_points:
        raise AnalysisError(f"BD-rate needs at least {min_points} points, curve {curve.label!r} has {len(curve.points)}")
    order = np.argsort(curve.psnr)
    q = curve.psnr[order]
    if np.any(np.diff(q) <= 0):
        raise AnalysisError(f"curve {curve.label!r} PSNR values must be distinct and increase with rate")
    return PchipInterpolator(q, np.log(curve.bpp[order]))


def bd_rate(anchor: RdCurve, test: RdCurve, min_points: int = 4) -> float:
    """Average rate difference (percent) of ``test`` against ``anchor`` at equal PSNR.

    Log-rate is interpolated as a monotone piecewise cubic of PSNR and integrated
    exactly over the common PSNR interval.
    """
    fa = _log_rate_interpolant(anchor, min_points)
    ft = _log_rate_interpolant(test, min_points)
    lo = max(anchor.psnr.min(), test.psnr.min())
    hi = min(anchor.psnr.max(), test.psnr.max())
    if not hi > lo:
        raise AnalysisError("curves have no overlapping PSNR interval")
    mean_diff = (ft.integrate(lo, hi) - fa.integrate(lo, hi)) / (hi - lo)
    return float(100.0 * math.expm1(mean_diff))


def rd_curve(
    pairs: Sequence[tuple[C.CodecModel, object]],
    images,
    label: str = "",
) -> RdCurve:
    """Encode every image with each (model, adapters) pair; average bpp and PSNR per pair.

    PSNR is computed on the decoded reconstruction clipped to [0, 1].
    """
    images = [np.asarray(img, dtype=np.float32) for img in images]
    points = []
    per_image = []
    for model, adapters in pairs:
        rows = []
        for img in images:
            bs = encode_image(model, adapters, img)
            x_hat = np.clip(decode_image(model, adapters, bs), 0.0, 1.0)
            mse = float(np.mean((x_hat.astype(np.float64) - img) ** 2))
            rows.append((bs.bpp(), C.psnr(mse)))
        arr = np.array(rows)
        per_image.append(rows)
        points.append(RdPoint(float(arr[:, 0].mean()), float(arr[:, 1].mean()), float(model.lmbda or float("nan"))))
    curve = RdCurve(points, label)
    curve.per_image = [per_image[i] for i in np.argsort([p.bpp for p in points], kind="stable")]
    return curve


# ---------------------------------------------------------------------------
# exports


def write_channel_stats_csv(path, stats: ChannelStats) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rank", "channel", "log_energy", "bits"])
        for rank, ch in enumerate(stats.order):
            writer.writerow([rank, int(ch), f"{stats.log_energy[ch]:.9g}", f"{stats.bits[ch]:.9g}"])


def write_rd_csv(path, curve: RdCurve) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["lambda", "bpp", "psnr"])
        for p in curve.points:
            writer.writerow([f"{p.lmbda:.9g}", f"{p.bpp:.12g}", f"{p.psnr:.12g}"])


def read_rd_csv(path, label: str | None = None) -> RdCurve:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or not {"bpp", "psnr"} <= set(rows[0]):
        raise AnalysisError(f"{path} is not an RD curve CSV (needs bpp and psnr columns)")
    lambdas = [float(r.get("lambda") or "nan") for r in rows]
    return RdCurve.from_arrays(
        [float(r["bpp"]) for r in rows],
        [float(r["psnr"]) for r in rows],
        label if label is not None else Path(path).stem,
        lambdas,
    )


def write_bd_report(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def export_spectrum_pgm(path, x: np.ndarray) -> None:
    write_pgm(path, log_spectrum(x))


def export_signed_ppm(path, residual: np.ndarray) -> None:
    """Map a signed reconstruction (3, H, W) to [0, 1] around mid-gray for viewing."""
    peak = float(np.abs(residual).max())
    scaled = 0.5 + 0.5 * residual / peak if peak > 0 else np.full_like(residual, 0.5)
    write_ppm(path, np.clip(scaled, 0.0, 1.0))

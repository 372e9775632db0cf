"""Synthetic source/target image domains and PPM/PGM I/O.

All images are float32 arrays of shape (3, H, W) with values in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .tensor import make_rng


class DomainKind(Enum):
    SMOOTH_NATURAL = "smooth_natural"
    PIXEL_ART = "pixel_art"
    SCREEN_TEXT = "screen_text"

    @classmethod
    def parse(cls, text: "str | DomainKind") -> "DomainKind":
        if isinstance(text, DomainKind):
            return text
        key = str(text).strip().lower().replace("-", "_")
        aliases = {"smoothnatural": "smooth_natural", "pixelart": "pixel_art", "screentext": "screen_text"}
        return cls(aliases.get(key, key))


@dataclass(frozen=True)
class DomainSpec:
    name: str
    kind: DomainKind
    seed: int = 0
    size: int = 64
    cell: int = 8


# ---------------------------------------------------------------------------
# generators


def _smooth_natural(rng: np.random.Generator, size: int) -> np.ndarray:
    f = np.fft.fftfreq(size)
    radius = np.sqrt(f[:, None] ** 2 + f[None, :] ** 2)
    f0 = rng.uniform(0.02, 0.045)
    envelope = np.exp(-((radius / f0) ** 2))
    envelope[radius > 0.1] = 0.0
    fields = []
    for _ in range(3):
        spec = np.fft.fft2(rng.standard_normal((size, size))) * envelope
        field = np.fft.ifft2(spec).real
        fields.append(field / (field.std() + 1e-12))
    luma, c1, c2 = fields
    yy, xx = np.mgrid[0:size, 0:size] / size
    angle = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(angle) * xx + np.sin(angle) * yy
    ramp -= ramp.mean()
    luma = luma + rng.uniform(0.0, 1.0) * ramp / (ramp.std() + 1e-12)
    tint = rng.uniform(0.08, 0.25, size=3)
    mix = rng.uniform(-0.5, 0.5, size=(3, 2))
    img = np.stack([luma + mix[c, 0] * c1 + mix[c, 1] * c2 for c in range(3)]) * tint[:, None, None]
    img += rng.uniform(0.35, 0.65, size=3)[:, None, None]
    # a few soft-edged blobs so the source domain is not entirely edge-free
    for _ in range(int(rng.integers(3, 9))):
        cy, cx = rng.uniform(0, size, size=2)
        ry, rx = rng.uniform(size / 10, size / 3, size=2)
        dist = np.sqrt(((yy * size - cy) / ry) ** 2 + ((xx * size - cx) / rx) ** 2)
        alpha = _soft_step((1.0 - dist) * min(ry, rx) / rng.uniform(0.25, 0.8))
        img += alpha * rng.uniform(-0.45, 0.45, size=3)[:, None, None]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _soft_step(t: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(t))


def _palette(rng: np.random.Generator, count: int) -> np.ndarray:
    return rng.integers(0, 6, size=(count, 3)) / 5.0


def _pixel_art(rng: np.random.Generator, size: int, cell: int) -> np.ndarray:
    if size % cell:
        raise ValueError(f"image size {size} must be a multiple of the cell size {cell}")
    n = size // cell
    palette = _palette(rng, int(rng.integers(4, 9)))
    grid = np.zeros((n, n), dtype=np.int64)
    grid[:] = 0
    if rng.random() < 0.5 and n > 1:
        split = int(rng.integers(n // 3, n - 1))
        grid[split:] = 1
    for _ in range(int(rng.integers(2, 6))):
        h = int(rng.integers(3, max(4, min(7, n))))
        w = int(rng.integers(3, max(4, min(7, n))))
        h, w = min(h, n), min(w, n)
        half = rng.random((h, (w + 1) // 2)) < 0.55
        mask = np.concatenate([half, half[:, : w // 2][:, ::-1]], axis=1)
        colors = rng.integers(2, len(palette), size=mask.shape)
        top = int(rng.integers(0, n - h + 1))
        left = int(rng.integers(0, n - w + 1))
        region = grid[top : top + h, left : left + w]
        region[mask] = colors[mask]
    img = palette[grid].transpose(2, 0, 1)
    return np.repeat(np.repeat(img, cell, axis=1), cell, axis=2).astype(np.float32)


def _screen_text(rng: np.random.Generator, size: int) -> np.ndarray:
    bg = rng.choice([0.95, 1.0, 0.12, 0.2])
    img = np.full((3, size, size), bg, dtype=np.float64)
    ink = 0.05 if bg > 0.5 else 0.9
    accent = _palette(rng, 1)[0]
    for _ in range(int(rng.integers(1, 3))):
        top = int(rng.integers(0, size - 8))
        left = int(rng.integers(0, size - 8))
        h = int(rng.integers(6, size - top))
        w = int(rng.integers(6, size - left))
        img[:, top : top + h, left] = ink
        img[:, top : top + h, left + w - 1] = ink
        img[:, top, left : left + w] = ink
        img[:, top + h - 1, left : left + w] = ink
    row = int(rng.integers(2, 6))
    while row + 7 < size:
        col = int(rng.integers(2, 8))
        color = accent if rng.random() < 0.2 else np.full(3, ink)
        while col + 5 < size and rng.random() < 0.93:
            gw = int(rng.integers(3, 6))
            glyph = rng.random((7, gw)) < 0.45
            glyph[:, 0] |= rng.random() < 0.5
            for c in range(3):
                patch = img[c, row : row + 7, col : col + gw]
                patch[glyph] = color[c]
            col += gw + 1
            if rng.random() < 0.15:
                col += 3
        row += int(rng.integers(9, 14))
    return img.astype(np.float32)


def generate(spec: DomainSpec, count: int) -> np.ndarray:
    """``count`` deterministic images of ``spec`` as an array (count, 3, size, size)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    out = np.empty((count, 3, spec.size, spec.size), dtype=np.float32)
    for i in range(count):
        rng = make_rng(spec.seed, 0xDA7A, i)
        if spec.kind is DomainKind.SMOOTH_NATURAL:
            out[i] = _smooth_natural(rng, spec.size)
        elif spec.kind is DomainKind.PIXEL_ART:
            out[i] = _pixel_art(rng, spec.size, spec.cell)
        else:
            out[i] = _screen_text(rng, spec.size)
    return out


# ---------------------------------------------------------------------------
# PPM / PGM


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(np.asarray(img, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def write_ppm(path, img: np.ndarray) -> None:
    """Binary P6 from a (3, H, W) float image in [0, 1] (or uint8)."""
    arr = img if img.dtype == np.uint8 else to_uint8(img)
    _, h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(arr.transpose(1, 2, 0)).tobytes())


def write_pgm(path, img: np.ndarray) -> None:
    """Binary P5 from an (H, W) float image in [0, 1] (or uint8)."""
    arr = img if img.dtype == np.uint8 else to_uint8(img)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(arr).tobytes())


def _read_netpbm(path) -> tuple[str, np.ndarray]:
    data = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1
    magic = tokens[0].decode("ascii")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"only 8-bit netpbm files are supported (maxval {maxval})")
    channels = 3 if magic == "P6" else 1
    if magic not in ("P5", "P6"):
        raise ValueError(f"unsupported netpbm magic {magic}")
    raw = np.frombuffer(data[pos : pos + w * h * channels], dtype=np.uint8)
    if raw.size != w * h * channels:
        raise ValueError("truncated netpbm file")
    return magic, raw.reshape(h, w, channels)


def read_ppm_uint8(path) -> np.ndarray:
    magic, arr = _read_netpbm(path)
    if magic != "P6":
        raise ValueError(f"{path} is not a P6 file")
    return arr.transpose(2, 0, 1).copy()


def read_ppm(path) -> np.ndarray:
    return read_ppm_uint8(path).astype(np.float32) / 255.0


def load_folder(folder, limit: int | None = None) -> list[np.ndarray]:
    """Read every .ppm (and, with Pillow installed, .png/.jpg) image in a folder."""
    paths = sorted(p for p in Path(folder).iterdir() if p.suffix.lower() in {".ppm", ".png", ".jpg", ".jpeg"})
    images = []
    for p in paths[:limit]:
        if p.suffix.lower() == ".ppm":
            images.append(read_ppm(p))
        else:
            from PIL import Image

            with Image.open(p) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
            images.append(arr.transpose(2, 0, 1).copy())
    return images

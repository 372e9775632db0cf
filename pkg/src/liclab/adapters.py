"""Channel re-allocation adapters for the transforms and low-rank adapters for
the entropy-parameters network, plus their plug-and-play file format.

Conv-Adapters sit after every stack of ``g_a`` (after its GDN) and after every
stack of ``g_s`` (after its transposed conv).  LoRA-Adapters add ``B @ A`` to
both 1x1 convs of ``g_ep``.  Every structure starts as an exact identity.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from . import codec as C
from . import tensor as T
from .serialization import CompatibilityError, FormatError, Reader, fnv1a64, split_checksum, write_str, write_tensor
from .tensor import DimensionError, Param, Tensor, make_rng

ADAPTER_MAGIC = b"LICA"
ADAPTER_VERSION = 1
DEFAULT_RANK = 10
DEFAULT_LORA_STD = 0.01


class ConfigurationError(ValueError):
    """Raised for adapter configurations the host model cannot support."""


class Structure(IntEnum):
    CONV1X1 = 0
    GDN = 1
    DWCONV3X3 = 2
    DWCONV3X3_CONV1X1 = 3
    CONV3X3 = 4

    @classmethod
    def parse(cls, text: "str | Structure") -> "Structure":
        if isinstance(text, Structure):
            return text
        key = str(text).strip().upper().replace("-", "_").replace("+", "_")
        aliases = {
            "CONV1X1": cls.CONV1X1,
            "GDN": cls.GDN,
            "DWCONV3X3": cls.DWCONV3X3,
            "DEPTHWISECONV3X3": cls.DWCONV3X3,
            "DWCONV3X3_CONV1X1": cls.DWCONV3X3_CONV1X1,
            "DEPTHWISECONV3X3PLUSCONV1X1": cls.DWCONV3X3_CONV1X1,
            "CONV3X3": cls.CONV3X3,
        }
        if key not in aliases:
            raise ConfigurationError(f"unknown adapter structure {text!r}")
        return aliases[key]


ENCODER_SITES = tuple(f"g_a.stack{i}" for i in range(1, 5))
DECODER_SITES = tuple(f"g_s.stack{i}" for i in range(1, 5))
LORA_SITES = ("g_ep.conv1", "g_ep.conv2")
STAGE2_SITE = "g_s.stack4"


def site_channels(site: str) -> int:
    """Output channel count of the host block an adapter follows."""
    kind, stack = site.split(".")
    i = int(stack.removeprefix("stack"))
    if kind == "g_a":
        return C.GA_CHANNELS[i]
    if kind == "g_s":
        return C.GS_CHANNELS[i]
    raise ConfigurationError(f"no transform stack at site {site!r}")


def is_encoder_side(site: str) -> bool:
    return site.startswith("g_a.")


# ---------------------------------------------------------------------------
# Conv-Adapter


def conv_adapter_apply(W: Tensor, b: Tensor, L: Tensor) -> Tensor:
    """Per-position channel mixing ``L' = W L + b`` with W of shape (c, c, 1, 1)."""
    c = W.shape[0]
    if L.shape[1] != c:
        raise DimensionError(f"adapter expects {c} channels, latent has {L.shape[1]}")
    return T.conv2d(L, W, b)


@dataclass
class ConvAdapter:
    site: str
    channels: int
    structure: Structure
    params: dict[str, Param]

    @classmethod
    def identity(cls, site: str, channels: int, structure: Structure, prefix: str = "adapter") -> "ConvAdapter":
        c = channels
        arrays: dict[str, np.ndarray] = {}
        if structure in (Structure.CONV1X1, Structure.DWCONV3X3_CONV1X1):
            arrays["W"] = np.eye(c, dtype=np.float32)[:, :, None, None]
            arrays["b"] = np.zeros(c, dtype=np.float32)
        if structure in (Structure.DWCONV3X3, Structure.DWCONV3X3_CONV1X1):
            dw = np.zeros((c, 1, 3, 3), dtype=np.float32)
            dw[:, 0, 1, 1] = 1.0
            arrays["dw_weight"] = dw
            arrays["dw_bias"] = np.zeros(c, dtype=np.float32)
        if structure is Structure.CONV3X3:
            w = np.zeros((c, c, 3, 3), dtype=np.float32)
            w[np.arange(c), np.arange(c), 1, 1] = 1.0
            arrays["W"] = w
            arrays["b"] = np.zeros(c, dtype=np.float32)
        if structure is Structure.GDN:
            arrays["beta"] = T.nonneg_init(np.ones(c))
            arrays["gamma"] = T.nonneg_init(np.zeros((c, c)))
        params = {k: Param(f"{prefix}.{site}.{k}", v) for k, v in arrays.items()}
        return cls(site, c, structure, params)

    def __call__(self, L: Tensor) -> Tensor:
        p = self.params
        if L.shape[1] != self.channels:
            raise DimensionError(f"adapter at {self.site} expects {self.channels} channels, got {L.shape[1]}")
        s = self.structure
        if s is Structure.CONV1X1:
            return conv_adapter_apply(p["W"], p["b"], L)
        if s is Structure.GDN:
            beta = T.nonneg_value(p["beta"], C.GDN_BETA_MIN)
            gamma = T.nonneg_value(p["gamma"])
            return T.gdn(L, beta, gamma)
        if s is Structure.DWCONV3X3:
            return T.depthwise_conv2d(L, p["dw_weight"], p["dw_bias"], pad=1)
        if s is Structure.DWCONV3X3_CONV1X1:
            h = T.depthwise_conv2d(L, p["dw_weight"], p["dw_bias"], pad=1)
            return conv_adapter_apply(p["W"], p["b"], h)
        return T.conv2d(L, p["W"], p["b"], 1, 1)

    def num_params(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))


# ---------------------------------------------------------------------------
# LoRA-Adapter


def lora_effective_weight(A: np.ndarray, B: np.ndarray, W0: np.ndarray) -> np.ndarray:
    """``W0 + B @ A`` reshaped to the (c_out, c_in, 1, 1) conv layout."""
    A = np.asarray(A)
    B = np.asarray(B)
    W0 = np.asarray(W0)
    if W0.ndim != 4 or W0.shape[2:] != (1, 1):
        raise DimensionError(f"LoRA host must be a 1x1 conv weight, got shape {W0.shape}")
    c_out, c_in = W0.shape[:2]
    r = A.shape[0]
    if A.shape != (r, c_in) or B.shape != (c_out, r):
        raise DimensionError(f"LoRA shapes A{A.shape}, B{B.shape} do not fit a ({c_out}, {c_in}) host with rank {r}")
    return W0 + (B @ A).astype(W0.dtype)[:, :, None, None]


@dataclass
class LoraAdapter:
    site: str
    A: Param
    B: Param

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @classmethod
    def fresh(cls, site: str, c_in: int, c_out: int, rank: int, rng, std: float, prefix: str = "adapter"):
        if not 1 <= rank <= min(c_in, c_out):
            raise ConfigurationError(f"LoRA rank {rank} must lie in [1, {min(c_in, c_out)}]")
        A = Param(f"{prefix}.{site}.A", (rng.standard_normal((rank, c_in)) * std).astype(np.float32))
        B = Param(f"{prefix}.{site}.B", np.zeros((c_out, rank), dtype=np.float32))
        return cls(site, A, B)

    def merged_weight(self, W0: np.ndarray) -> np.ndarray:
        return lora_effective_weight(self.A.data, self.B.data, W0)

    def parallel(self, x: Tensor, W0: Tensor, b0: Tensor) -> Tensor:
        """``conv1x1(x, W0) + b0 + B (A x)`` with gradients into A and B."""
        base = T.conv2d(x, W0, b0)
        r, c_in = self.A.shape
        a4 = T.reshape(self.A, (r, c_in, 1, 1))
        b4 = T.reshape(self.B, (self.B.shape[0], r, 1, 1))
        return T.add(base, T.conv2d(T.conv2d(x, a4, None), b4, None))

    def num_params(self) -> int:
        return int(self.A.data.size + self.B.data.size)


# ---------------------------------------------------------------------------
# AdapterSet


@dataclass
class AdapterSet:
    structure: Structure
    rank: int
    base_model_id: int
    domain_name: str = ""
    conv: dict[str, ConvAdapter] = field(default_factory=dict)
    lora: dict[str, LoraAdapter] = field(default_factory=dict)

    # hooks used by the codec -------------------------------------------------
    def apply(self, site: str, h: Tensor) -> Tensor:
        adapter = self.conv.get(site)
        if adapter is None:
            if is_encoder_side(site):
                raise ConfigurationError(f"adapter set has no encoder-side adapter for {site}; load the local section")
            raise ConfigurationError(f"adapter set has no adapter for {site}")
        return adapter(h)

    def ep_conv(self, site: str, h: Tensor, weight: Tensor, bias: Tensor, merged: bool) -> Tensor:
        adapter = self.lora.get(site)
        if adapter is None:
            return T.conv2d(h, weight, bias)
        if merged:
            return T.conv2d(h, Tensor(adapter.merged_weight(weight.data)), bias)
        return adapter.parallel(h, weight, bias)

    # parameter views ---------------------------------------------------------
    def params(self) -> list[Param]:
        out: list[Param] = []
        for site in sorted(self.conv):
            out.extend(self.conv[site].params.values())
        for site in sorted(self.lora):
            out.extend((self.lora[site].A, self.lora[site].B))
        return out

    def encoder_params(self) -> list[Param]:
        return [p for site in sorted(self.conv) if is_encoder_side(site) for p in self.conv[site].params.values()]

    def decoder_params(self) -> list[Param]:
        out = [p for site in sorted(self.conv) if not is_encoder_side(site) for p in self.conv[site].params.values()]
        for site in sorted(self.lora):
            out.extend((self.lora[site].A, self.lora[site].B))
        return out

    def stage2_params(self) -> list[Param]:
        return list(self.conv[STAGE2_SITE].params.values())

    def num_params(self) -> int:
        return int(sum(p.data.size for p in self.params()))

    def has_encoder_side(self) -> bool:
        return all(site in self.conv for site in ENCODER_SITES)

    def set_trainable(self, names: set[str] | None) -> None:
        """Mark exactly ``names`` trainable (all adapter params when None)."""
        for p in self.params():
            p.trainable = names is None or p.name in names

    def snapshot(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.params()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for p in self.params():
            p.data = snap[p.name].copy()

    def copy(self) -> "AdapterSet":
        return load_adapters(save_adapters(self), model_id=self.base_model_id)

    @property
    def adapter_id(self) -> int:
        return fnv1a64(_section_bytes(self.decoder_params()))


def init_adapter_set(
    model: C.CodecModel,
    structure: Structure | str = Structure.CONV1X1,
    rank: int = DEFAULT_RANK,
    seed: int = 0,
    lora_std: float = DEFAULT_LORA_STD,
    domain_name: str = "",
) -> AdapterSet:
    """Identity-initialized adapters at all 8 transform stacks and both g_ep convs.

    Freezes the host model and marks every adapter parameter trainable.
    """
    structure = Structure.parse(structure)
    model.freeze()
    aset = AdapterSet(structure=structure, rank=rank, base_model_id=model.model_id, domain_name=domain_name)
    for site in ENCODER_SITES + DECODER_SITES:
        c = site_channels(site)
        if structure is Structure.GDN and c < 1:
            raise ConfigurationError(f"GDN adapter needs a known channel count at {site}")
        aset.conv[site] = ConvAdapter.identity(site, c, structure)
    rng = make_rng(seed, 0x10A)
    for site in LORA_SITES:
        w0 = model[f"{site}.weight"]
        aset.lora[site] = LoraAdapter.fresh(site, w0.shape[1], w0.shape[0], rank, rng, lora_std)
    aset.set_trainable(None)
    return aset


@dataclass
class ParamReport:
    total_model_params: int
    adapter_params: int
    encoder_side_params: int
    decoder_side_params: int

    @property
    def transmit_proportion(self) -> float:
        return self.decoder_side_params / self.total_model_params if self.total_model_params else 0.0


def adapter_param_report(aset: AdapterSet | None, model: C.CodecModel) -> ParamReport:
    if aset is None:
        return ParamReport(model.num_params(), 0, 0, 0)
    enc = sum(p.data.size for p in aset.encoder_params())
    dec = sum(p.data.size for p in aset.decoder_params())
    return ParamReport(model.num_params(), int(enc + dec), int(enc), int(dec))


def transmit_proportion(transmitted: float, total: float) -> float:
    return transmitted / total


# ---------------------------------------------------------------------------
# file format


def _section_bytes(params: list[Param]) -> bytes:
    buf = bytearray(struct.pack("<I", len(params)))
    for p in params:
        write_tensor(buf, p.name, p.data)
    return bytes(buf)


def save_adapters(aset: AdapterSet, include_local: bool = True) -> bytes:
    """Serialize: decoder-side tensors in ``transmit``, encoder-side in ``local``."""
    buf = bytearray(ADAPTER_MAGIC)
    buf += struct.pack("<HQ", ADAPTER_VERSION, aset.base_model_id)
    write_str(buf, aset.domain_name)
    buf += struct.pack("<BB", int(aset.structure), aset.rank)
    buf += _section_bytes(aset.decoder_params())
    buf += _section_bytes(aset.encoder_params() if include_local else [])
    buf += struct.pack("<Q", fnv1a64(bytes(buf)))
    return bytes(buf)


def transmit_section_size(data: bytes) -> int:
    """Byte length of the transmit section inside a serialized adapter file."""
    r = _header_reader(data)
    start = r.pos
    _read_section(r)
    return r.pos - start


def _header_reader(data: bytes) -> Reader:
    body, _ = split_checksum(data)
    r = Reader(body)
    if r.take(4) != ADAPTER_MAGIC:
        raise FormatError("not an adapter file (bad magic)")
    version = r.unpack("<H")
    if version != ADAPTER_VERSION:
        raise FormatError(f"unsupported adapter file version {version}")
    r.unpack("<Q")
    r.read_str()
    r.unpack("<BB")
    return r


def _read_section(r: Reader) -> list[tuple[str, np.ndarray]]:
    count = r.unpack("<I")
    return [r.read_tensor() for _ in range(count)]


def load_adapters(data: bytes, model: C.CodecModel | None = None, model_id: int | None = None) -> AdapterSet:
    """Parse an adapter file.  Nothing is returned unless the whole file validates."""
    body, _ = split_checksum(data)
    r = Reader(body)
    if r.take(4) != ADAPTER_MAGIC:
        raise FormatError("not an adapter file (bad magic)")
    version, base_id = r.unpack("<HQ")
    if version != ADAPTER_VERSION:
        raise FormatError(f"unsupported adapter file version {version}")
    domain = r.read_str()
    code, rank = r.unpack("<BB")
    try:
        structure = Structure(code)
    except ValueError as exc:
        raise FormatError(f"unknown structure code {code}") from exc
    transmit = _read_section(r)
    local = _read_section(r)
    if not r.at_end():
        raise FormatError("trailing bytes after adapter sections")
    expected = model.model_id if model is not None else model_id
    if expected is not None and expected != base_id:
        raise CompatibilityError(f"adapters were trained for model {base_id:016x}, loaded model is {expected:016x}")

    tensors = dict(transmit)
    for name, arr in local:
        if not name.startswith("adapter.g_a."):
            raise FormatError(f"local section holds a decoder-side tensor {name!r}")
        tensors[name] = arr
    aset = AdapterSet(structure=structure, rank=rank, base_model_id=base_id, domain_name=domain)
    sites = DECODER_SITES + (ENCODER_SITES if local else ())
    for site in sites:
        ref = ConvAdapter.identity(site, site_channels(site), structure)
        for key, p in ref.params.items():
            arr = tensors.pop(p.name, None)
            if arr is None:
                raise FormatError(f"missing tensor {p.name!r}")
            if arr.shape != p.shape:
                raise FormatError(f"tensor {p.name!r} has shape {arr.shape}, expected {p.shape}")
            p.data = arr.copy()
        aset.conv[site] = ref
    for site in LORA_SITES:
        A = tensors.pop(f"adapter.{site}.A", None)
        B = tensors.pop(f"adapter.{site}.B", None)
        if A is None or B is None:
            raise FormatError(f"missing LoRA tensors for {site}")
        if A.shape[0] != rank or B.shape[1] != rank:
            raise FormatError(f"LoRA tensors for {site} disagree with rank {rank}")
        aset.lora[site] = LoraAdapter(site, Param(f"adapter.{site}.A", A.copy()), Param(f"adapter.{site}.B", B.copy()))
    if tensors:
        raise FormatError(f"unexpected tensors: {sorted(tensors)}")
    aset.set_trainable(None)
    return aset

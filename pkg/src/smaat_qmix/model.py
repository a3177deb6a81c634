"""The four network variants and their plumbing.

Encoder: five levels of (conv block -> CBAM), with a 2x2 max pool between
levels. Levels 1-3 always use DoubleDSC; levels 4-5 switch to DoubleMixConv
in the mix/qmix variants, as does the first decoder stage. The level-5 CBAM
output is the bottleneck; q/qmix route it through the VQ module. Decoder:
four stages of (bilinear upsample -> concat skip -> conv block), then a
1x1 output head.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .blocks import CBAM, Conv2d, DoubleDSC, DoubleMixConv, Module
from .errors import ConfigError, FormatError, ShapeError
from .tensor import Tensor
from .vq import VQBottleneck, VQResult

VARIANTS = ("baseline", "q", "mix", "qmix")

DISPLAY_NAMES = {
    "baseline": "SmaAT-UNet",
    "q": "SmaAT-Q-UNet",
    "mix": "SmaAT-Mix-UNet",
    "qmix": "SmaAT-QMix-UNet",
}


@dataclass
class ModelConfig:
    variant: str = "qmix"
    in_frames: int = 12
    input_size: int = 288
    base_width: int = 64
    depthwise_multiplier: int = 2
    cbam_ratio: int = 16
    vq_codewords: int = 32
    vq_beta: float = 0.75
    vq_per_element_norm: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.input_size % 16:
            raise ConfigError(
                f"input_size must be divisible by 16, got {self.input_size}"
            )

    @property
    def uses_vq(self) -> bool:
        return self.variant in ("q", "qmix")

    @property
    def uses_mixconv(self) -> bool:
        return self.variant in ("mix", "qmix")

    @property
    def widths(self) -> tuple[int, ...]:
        w = self.base_width
        # level 5 stays at 8w: the bilinear decoder has no learned
        # upsampling, so the bottleneck matches the level-4 width
        return (w, 2 * w, 4 * w, 8 * w, 8 * w)

    @property
    def bottleneck_size(self) -> int:
        return self.input_size // 16


@dataclass
class ForwardResult:
    prediction: Tensor
    vq: Optional[VQResult] = None
    vq_indices: Optional[np.ndarray] = None
    captures: dict = field(default_factory=dict)

    @property
    def vq_loss(self) -> Optional[Tensor]:
        return self.vq.loss if self.vq is not None else None


class NowcastUNet(Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(seed)
        m = config.depthwise_multiplier
        r = config.cbam_ratio
        w1, w2, w3, w4, w5 = config.widths

        def block(cin, cout, mid, mix):
            if mix:
                return DoubleMixConv(rng, cin, cout, mid_channels=mid)
            return DoubleDSC(rng, cin, cout, multiplier=m, mid_channels=mid)

        mixed = config.uses_mixconv
        self.enc1 = block(config.in_frames, w1, None, False)
        self.cbam1 = CBAM(rng, w1, r)
        self.enc2 = block(w1, w2, None, False)
        self.cbam2 = CBAM(rng, w2, r)
        self.enc3 = block(w2, w3, None, False)
        self.cbam3 = CBAM(rng, w3, r)
        self.enc4 = block(w3, w4, None, mixed)
        self.cbam4 = CBAM(rng, w4, r)
        self.enc5 = block(w4, w5, None, mixed)
        self.cbam5 = CBAM(rng, w5, r)

        if config.uses_vq:
            self.vq = VQBottleneck(
                rng, config.vq_codewords, w5, beta=config.vq_beta,
                per_element_norm=config.vq_per_element_norm,
            )
        else:
            self.vq = None

        # decoder stages narrow through a hidden width of half the
        # concatenated input, the usual bilinear-UNet layout
        self.dec1 = block(w5 + w4, w3, (w5 + w4) // 2, mixed)
        self.dec2 = block(w3 + w3, w2, w3, False)
        self.dec3 = block(w2 + w2, w1, w2, False)
        self.dec4 = block(w1 + w1, w1, w1, False)
        self.head = Conv2d(rng, w1, 1, 1)

    def forward(self, x: Tensor, capture: bool = False) -> ForwardResult:
        cfg = self.config
        if x.data.ndim != 4 or x.shape[1] != cfg.in_frames:
            raise ShapeError(
                f"expected input (B, {cfg.in_frames}, S, S), got {x.shape}"
            )
        if x.shape[2] != cfg.input_size or x.shape[3] != cfg.input_size:
            raise ShapeError(
                f"expected spatial size {cfg.input_size}, got {x.shape[2:]}"
            )
        caps: dict[str, Tensor] = {}

        def grab(name, t):
            if capture:
                caps[name] = t.retain_grad()
            return t

        skips = []
        h = x
        blocks = [(self.enc1, self.cbam1), (self.enc2, self.cbam2),
                  (self.enc3, self.cbam3), (self.enc4, self.cbam4),
                  (self.enc5, self.cbam5)]
        for i, (enc, cbam) in enumerate(blocks, start=1):
            h = grab(f"enc{i}.block", enc(h))
            h = grab(f"enc{i}.cbam", cbam(h))
            if i < 5:
                skips.append(h)
                h = T.maxpool2(h)

        vq_result = None
        vq_indices = None
        grab("bottleneck", h)
        if self.vq is not None:
            if self.training:
                vq_result = self.vq.quantize(h)
                h = vq_result.z_q
                vq_indices = vq_result.indices
            elif capture and T.is_grad_enabled():
                # saliency needs the straight-through path even in eval mode
                vq_result = self.vq.quantize(h, track_usage=False)
                h = vq_result.z_q
                vq_indices = vq_result.indices
            else:
                h, vq_indices = self.vq.inference_quantize(h)

        for j, dec in enumerate([self.dec1, self.dec2, self.dec3, self.dec4],
                                start=1):
            h = T.bilinear_upsample2(h)
            h = T.concat_channels(h, skips[-j])
            h = grab(f"dec{j}", dec(h))

        pred = self.head(h)
        return ForwardResult(pred, vq_result, vq_indices, caps)


def build(config: ModelConfig, seed: int = 0) -> NowcastUNet:
    return NowcastUNet(config, seed=seed)


def count_parameters(model: NowcastUNet) -> dict:
    """Total and per-top-level-module trainable element counts."""
    per_module: dict[str, int] = {}
    for name, p in model.named_parameters():
        top = name.split(".", 1)[0]
        per_module[top] = per_module.get(top, 0) + p.size
    return {"total": sum(per_module.values()), "per_module": per_module}


def parameter_reduction(baseline_total: int, other_total: int) -> float:
    return 1.0 - other_total / baseline_total


# ---------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------

_MAGIC = b"SQMU"
_VERSION = 1


def _state_entries(model: NowcastUNet):
    entries = {name: p.data for name, p in model.named_parameters()}
    entries.update({name: b for name, b in model.named_buffers()})
    return entries


def save_checkpoint(model: NowcastUNet, path) -> None:
    entries = _state_entries(model)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(entries)))
        for name in sorted(entries):
            arr = np.ascontiguousarray(entries[name], dtype="<f4")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError("checkpoint truncated")
    return buf


def load_checkpoint(model: NowcastUNet, path) -> None:
    """Load a checkpoint into ``model`` in place.

    The stored name set must match the model's registry exactly; a
    mismatch (e.g. loading a q checkpoint into a mix model) raises
    FormatError without touching the model.
    """
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != _MAGIC:
            raise FormatError("bad checkpoint magic")
        version, count = struct.unpack("<II", _read_exact(fh, 8))
        if version != _VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        loaded: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, nlen).decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(fh, 1))
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
            n = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(_read_exact(fh, 4 * n), dtype="<f4")
            loaded[name] = data.reshape(dims)

    entries = _state_entries(model)
    if set(loaded) != set(entries):
        missing = sorted(set(entries) - set(loaded))[:3]
        extra = sorted(set(loaded) - set(entries))[:3]
        raise FormatError(
            f"checkpoint registry mismatch (missing={missing}, extra={extra})"
        )
    for name, arr in loaded.items():
        target = entries[name]
        if arr.shape != target.shape:
            raise FormatError(
                f"shape mismatch for {name}: {arr.shape} vs {target.shape}"
            )
    for name, arr in loaded.items():
        entries[name][...] = arr.astype(entries[name].dtype)

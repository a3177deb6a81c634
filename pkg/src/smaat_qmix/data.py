"""Synthetic radar sequences: advected Gaussian rain cells on a periodic grid.

Stands in for a real radar archive at desk scale. Each sequence is a sum of
isotropic Gaussian cells, each drifting with its own constant velocity and
wrapping around the domain, clipped to [0, 1]. Generation is bit-reproducible
per seed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import ConfigError, FormatError


@dataclass
class GeneratorConfig:
    seed: int = 0
    grid_size: int = 64
    num_frames: int = 36
    n_cells: int = 6
    amp_range: tuple[float, float] = (0.4, 1.0)
    sigma_range: tuple[float, float] = (4.0, 9.0)
    speed_range: tuple[float, float] = (1.0, 2.5)  # pixels per frame
    cells: tuple | None = None  # explicit (y, x, vy, vx, amp, sigma) rows


@dataclass
class RadarSequence:
    frames: np.ndarray          # (T, H, W) float32 in [0, 1]
    cadence_minutes: float = 5.0
    normalization_max: float = 1.0

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class NowcastSample:
    input: np.ndarray           # (in_frames, H, W)
    target: np.ndarray          # (1, H, W)


def generate(config: GeneratorConfig) -> RadarSequence:
    """Render a sequence of drifting Gaussian cells, normalized to [0, 1]."""
    rng = np.random.default_rng(config.seed)
    g, t_total = config.grid_size, config.num_frames
    if config.cells is not None:
        spec_rows = np.asarray(config.cells, dtype=np.float64).reshape(-1, 6)
        n = spec_rows.shape[0]
        pos0, vel = spec_rows[:, 0:2], spec_rows[:, 2:4]
        amp, sigma = spec_rows[:, 4], spec_rows[:, 5]
    else:
        n = config.n_cells
        pos0 = rng.uniform(0, g, size=(n, 2))
        amp = rng.uniform(*config.amp_range, size=n)
        sigma = rng.uniform(*config.sigma_range, size=n)
        speed = rng.uniform(*config.speed_range, size=n)
        angle = rng.uniform(0, 2 * np.pi, size=n)
        vel = np.stack([speed * np.cos(angle), speed * np.sin(angle)], axis=1)
    frames = np.zeros((t_total, g, g), dtype=np.float64)
    if n > 0:
        yy, xx = np.meshgrid(np.arange(g), np.arange(g), indexing="ij")
        for t in range(t_total):
            pos = pos0 + t * vel
            for i in range(n):
                # periodic distance so cells wrap instead of leaving
                dy = (yy - pos[i, 0] + g / 2) % g - g / 2
                dx = (xx - pos[i, 1] + g / 2) % g - g / 2
                frames[t] += amp[i] * np.exp(
                    -(dy * dy + dx * dx) / (2 * sigma[i] ** 2)
                )
    peak = frames.max()
    norm = float(peak) if peak > 1.0 else 1.0
    frames = np.clip(frames / norm, 0.0, 1.0)
    return RadarSequence(frames.astype(np.float32), normalization_max=norm)


def window(seq: RadarSequence, in_frames: int = 12,
           lead_steps: int = 6) -> Iterator[NowcastSample]:
    """Sliding windows: one sample per valid start index, stride 1."""
    if lead_steps < 1:
        raise ConfigError(f"lead_steps must be >= 1, got {lead_steps}")
    if in_frames < 1:
        raise ConfigError(f"in_frames must be >= 1, got {in_frames}")
    t_total = seq.num_frames
    for start in range(t_total - in_frames - lead_steps + 1):
        inp = seq.frames[start : start + in_frames]
        tgt = seq.frames[start + in_frames - 1 + lead_steps]
        yield NowcastSample(inp, tgt[None])


def nl50_filter(sample: NowcastSample, rain_threshold: float = 0.5) -> bool:
    """True iff at least half the target pixels are rainy (>= threshold)."""
    if not 0.0 < rain_threshold < 1.0:
        raise ConfigError(f"rain_threshold must be in (0, 1), got {rain_threshold}")
    return float(np.mean(sample.target >= rain_threshold)) >= 0.5


def samples_to_arrays(samples: list[NowcastSample]):
    """Stack samples into (N, in_frames, H, W) inputs and (N, 1, H, W) targets."""
    x = np.stack([s.input for s in samples])
    y = np.stack([s.target for s in samples])
    return x, y


def split_sequence(seq: RadarSequence, in_frames: int = 12, lead_steps: int = 6,
                   fractions=(0.70, 0.15, 0.15)):
    """Train/val/test by contiguous time blocks, no shared frames.

    Windowing inside each block keeps adjacent windows from leaking across
    the split boundaries.
    """
    t_total = seq.num_frames
    cut1 = int(t_total * fractions[0])
    cut2 = int(t_total * (fractions[0] + fractions[1]))
    out = []
    for lo, hi in ((0, cut1), (cut1, cut2), (cut2, t_total)):
        block = RadarSequence(seq.frames[lo:hi], seq.cadence_minutes,
                              seq.normalization_max)
        out.append(list(window(block, in_frames, lead_steps)))
    return tuple(out)


# ---------------------------------------------------------------------
# .rseq on-disk format
# ---------------------------------------------------------------------

_MAGIC = b"RSEQ"
_VERSION = 1


def write_rseq(seq: RadarSequence, path) -> None:
    frames = np.ascontiguousarray(seq.frames, dtype="<f4")
    t_total, h, w = frames.shape
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IIIIff", _VERSION, t_total, h, w,
                             seq.cadence_minutes, seq.normalization_max))
        fh.write(frames.tobytes())


def read_rseq(path) -> RadarSequence:
    with open(path, "rb") as fh:
        head = fh.read(4)
        if head != _MAGIC:
            raise FormatError("bad .rseq magic")
        meta = fh.read(24)
        if len(meta) != 24:
            raise FormatError(".rseq header truncated")
        version, t_total, h, w, cadence, norm = struct.unpack("<IIIIff", meta)
        if version != _VERSION:
            raise FormatError(f"unsupported .rseq version {version}")
        payload = fh.read(4 * t_total * h * w)
        if len(payload) != 4 * t_total * h * w:
            raise FormatError(".rseq payload shorter than header claims")
        frames = np.frombuffer(payload, dtype="<f4").reshape(t_total, h, w)
    return RadarSequence(frames.copy(), float(cadence), float(norm))

"""Vector-quantization bottleneck.

Maps every spatial vector of the bottleneck tensor to its nearest codeword
(exhaustive squared-distance scan, ties to the lowest index), rebuilds the
quantized map, and produces the two-term loss: a codebook term that moves
only the codewords and a beta-weighted commitment term that moves only the
encoder output. The quantized output carries a straight-through gradient:
whatever gradient arrives at z_q is passed to z_e unchanged, and none of it
reaches the codebook.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .blocks import Module
from .errors import ConfigError, IoError, ShapeError
from .tensor import Tensor


@dataclass
class VQResult:
    z_q: Tensor                # (B, C, H, W), straight-through gradient
    indices: np.ndarray        # (B, H, W) assigned codeword ids
    loss: Tensor               # scalar, codebook + beta * commitment
    codebook_term: float
    commitment_term: float


def nearest_codeword(v: np.ndarray, codewords: np.ndarray) -> int:
    """Index of the codeword minimizing squared l2 distance to ``v``."""
    if codewords.ndim != 2 or codewords.shape[0] < 1:
        raise ConfigError("codebook must be a non-empty KxD matrix")
    d = codewords - v[None, :]
    return int(np.argmin(np.einsum("kd,kd->k", d, d)))


def _assign(flat: np.ndarray, codewords: np.ndarray) -> np.ndarray:
    """Nearest codeword per row of ``flat`` (N x D), ties to lowest index."""
    # ||v - e||^2 = ||v||^2 - 2 v.e + ||e||^2; argmin over k per row.
    # The cross-term form can break exact ties differently under rounding,
    # so compute true squared distances blockwise instead.
    n = flat.shape[0]
    out = np.empty(n, dtype=np.int64)
    step = max(1, 65536 // codewords.shape[0])
    for start in range(0, n, step):
        block = flat[start : start + step]
        diff = block[:, None, :] - codewords[None, :, :]
        d2 = np.einsum("nkd,nkd->nk", diff, diff)
        out[start : start + step] = np.argmin(d2, axis=1)
    return out


class VQBottleneck(Module):
    """Learnable codebook of K codewords of dimension D (= channel count)."""

    def __init__(self, rng: np.random.Generator, num_codewords: int, dim: int,
                 beta: float = 0.75, per_element_norm: bool = False):
        super().__init__()
        if num_codewords < 1:
            raise ConfigError(f"codebook size must be >= 1, got {num_codewords}")
        if beta < 0:
            raise ConfigError(f"commitment cost must be >= 0, got {beta}")
        self.num_codewords = num_codewords
        self.dim = dim
        self.beta = beta
        self.per_element_norm = per_element_norm
        scale = 1.0 / num_codewords
        init = rng.uniform(-scale, scale, size=(num_codewords, dim))
        self.codewords = Tensor(init.astype(T.get_default_dtype()), requires_grad=True)
        self.usage = np.zeros(num_codewords, dtype=np.int64)

    def reset_usage(self):
        self.usage[:] = 0

    def quantize(self, z_e: Tensor, track_usage: bool = True) -> VQResult:
        """Full training-mode pass: z_q, assignments, loss, usage update."""
        B, C, H, W = self._check(z_e)
        E = self.codewords
        flat = z_e.data.transpose(0, 2, 3, 1).reshape(-1, C)
        idx = _assign(flat, E.data)
        if track_usage:
            np.add.at(self.usage, idx, 1)
        quant = E.data[idx]
        z_q_data = np.ascontiguousarray(
            quant.reshape(B, H, W, C).transpose(0, 3, 1, 2)
        )

        # straight-through: gradient on z_q is copied to z_e, none to E
        z_q = T._node(z_q_data, (z_e,), lambda g: (g,))

        n = flat.shape[0]
        denom = n * C if self.per_element_norm else n
        gap = flat - quant
        sq = float(np.einsum("nd,nd->", gap, gap)) / denom
        codebook_term = sq
        commitment_term = self.beta * sq
        loss_val = np.asarray(codebook_term + commitment_term,
                              dtype=z_e.data.dtype)

        def bw(g):
            g = float(g)
            # commitment term moves z_e toward its codeword
            gz_flat = (2.0 * self.beta / denom) * gap * g
            gz = gz_flat.reshape(B, H, W, C).transpose(0, 3, 1, 2)
            # codebook term pulls each codeword toward its assigned vectors
            gE = np.zeros_like(E.data)
            np.add.at(gE, idx, (-2.0 / denom) * gap * g)
            return np.ascontiguousarray(gz), gE

        loss = T._node(loss_val, (z_e, E), bw)
        indices = idx.reshape(B, H, W)
        return VQResult(z_q, indices, loss, codebook_term, commitment_term)

    def inference_quantize(self, z_e: Tensor, track_usage: bool = False):
        """Deterministic nearest-codeword mapping; no loss, no gradient."""
        B, C, H, W = self._check(z_e)
        flat = z_e.data.transpose(0, 2, 3, 1).reshape(-1, C)
        idx = _assign(flat, self.codewords.data)
        if track_usage:
            np.add.at(self.usage, idx, 1)
        z_q = np.ascontiguousarray(
            self.codewords.data[idx].reshape(B, H, W, C).transpose(0, 3, 1, 2)
        )
        return Tensor(z_q, dtype=z_q.dtype), idx.reshape(B, H, W)

    def _check(self, z_e: Tensor):
        if z_e.data.ndim != 4:
            raise ShapeError(f"VQ input must be rank 4, got {z_e.shape}")
        B, C, H, W = z_e.shape
        if C != self.dim:
            raise ShapeError(f"VQ expects {self.dim} channels, got {C}")
        return B, C, H, W


def export_codebook(vq: VQBottleneck, path, vectors: np.ndarray | None = None,
                    assignments: np.ndarray | None = None, assignments_path=None):
    """Write the codebook (and optionally pre-VQ vectors) as CSV.

    Codebook file: header ``k, d0..d{D-1}, usage``, one row per codeword.
    Assignments file: header ``b, h, w, k, v0..v{D-1}``, one row per vector.
    """
    D = vq.dim
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k"] + [f"d{i}" for i in range(D)] + ["usage"])
            for k in range(vq.num_codewords):
                row = [k] + [repr(float(v)) for v in vq.codewords.data[k]]
                row.append(int(vq.usage[k]))
                w.writerow(row)
        if vectors is not None and assignments is not None:
            if assignments_path is None:
                raise ConfigError("assignments_path required when exporting vectors")
            B, H, W = assignments.shape
            flat = vectors.reshape(B, H, W, D)
            with open(assignments_path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["b", "h", "w", "k"] + [f"v{i}" for i in range(D)])
                for b in range(B):
                    for h in range(H):
                        for x in range(W):
                            row = [b, h, x, int(assignments[b, h, x])]
                            row += [repr(float(v)) for v in flat[b, h, x]]
                            w.writerow(row)
    except OSError as exc:
        raise IoError(f"codebook export failed: {exc}") from exc


def read_codebook_csv(path):
    """Parse a codebook CSV back into (codewords, usage)."""
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise IoError(f"codebook read failed: {exc}") from exc
    header, body = rows[0], rows[1:]
    D = len(header) - 2
    codewords = np.array([[float(v) for v in r[1 : 1 + D]] for r in body])
    usage = np.array([int(r[-1]) for r in body], dtype=np.int64)
    return codewords, usage

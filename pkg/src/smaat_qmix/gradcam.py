"""Grad-CAM saliency maps per level, plus latent/codeword export.

The target scalar for a regression output is the mean of the predicted
map by default, or the mean restricted to a pixel mask for region-focused
maps. Channel weights are the spatial mean of the gradient at the hooked
layer; the map is ReLU of the weighted activation sum, min-max normalized
(an all-zero map stays all-zero) and bilinearly upsampled back to input
resolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .model import NowcastUNet
from .tensor import Tensor
from .vq import export_codebook


def hook_points(model: NowcastUNet) -> list[str]:
    """The 14 capture sites: 5 encoder blocks, 5 CBAMs, 4 decoder stages."""
    names = []
    for i in range(1, 6):
        names.append(f"enc{i}.block")
    for i in range(1, 6):
        names.append(f"enc{i}.cbam")
    for j in range(1, 5):
        names.append(f"dec{j}")
    return names


@dataclass
class SaliencyMap:
    layer: str
    map: np.ndarray  # (H, W) in [0, 1] at input resolution


def _cam_from(activation: np.ndarray, gradient: np.ndarray) -> np.ndarray:
    """ReLU(sum_c alpha_c A_c) with alpha = spatial mean of the gradient."""
    alpha = gradient.mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(alpha, activation, axes=1), 0.0)
    peak = cam.max()
    if peak > 0:
        lo = cam.min()
        cam = (cam - lo) / (peak - lo) if peak > lo else np.ones_like(cam)
    return cam


def _upsample_to(cam: np.ndarray, size: int) -> np.ndarray:
    t = Tensor(cam[None, None], dtype=cam.dtype)
    with T.no_grad():
        while t.shape[2] < size:
            t = T.bilinear_upsample2(t)
    return np.clip(t.data[0, 0], 0.0, 1.0)


def gradcam(model: NowcastUNet, x: np.ndarray, layer: str,
            target_mask: np.ndarray | None = None) -> SaliencyMap:
    """Saliency for one sample at one hook point.

    ``x`` is a single (in_frames, S, S) input. The target scalar is the
    mean of the prediction, optionally restricted to ``target_mask``
    (an (S, S) boolean array).
    """
    maps = gradcam_sweep(model, x, layers=[layer], target_mask=target_mask)
    return maps[0]


def gradcam_sweep(model: NowcastUNet, x: np.ndarray, layers=None,
                  target_mask: np.ndarray | None = None) -> list[SaliencyMap]:
    """Saliency maps for several hook points from a single forward/backward."""
    valid = hook_points(model)
    layers = list(layers) if layers is not None else valid
    for name in layers:
        if name not in valid:
            raise ConfigError(f"unknown Grad-CAM layer {name!r}")
    size = model.config.input_size

    was_training = model.training
    model.eval()
    xt = Tensor(np.asarray(x, dtype=T.get_default_dtype())[None])
    result = model(xt, capture=True)
    if target_mask is None:
        target = T.tmean(result.prediction)
    else:
        mask = np.asarray(target_mask, dtype=T.get_default_dtype())
        weights = mask / max(mask.sum(), 1.0)
        target = T.tsum(result.prediction * Tensor(weights[None, None]))
    T.backward(target)
    model.train(was_training)

    out = []
    for name in layers:
        node = result.captures[name]
        if node.grad is None:
            cam = np.zeros(node.shape[2:], dtype=np.float64)
        else:
            cam = _cam_from(node.data[0], node.grad[0])
        out.append(SaliencyMap(name, _upsample_to(cam.astype(np.float64), size)))
    return out


def export_embedding_inputs(model: NowcastUNet, x: np.ndarray,
                            codebook_path, assignments_path) -> None:
    """Write pre-VQ bottleneck vectors with assignments plus the codebook.

    Feeds external embedding tools (e.g. a 2-D projection of codewords);
    the projection itself is out of scope here.
    """
    if model.vq is None:
        raise ConfigError("embedding export needs a VQ variant")
    was_training = model.training
    model.eval()
    with T.no_grad():
        result = model(Tensor(np.asarray(x, dtype=T.get_default_dtype())),
                       capture=True)
    model.train(was_training)
    z_e = result.captures["bottleneck"].data          # (B, C, H, W)
    vectors = z_e.transpose(0, 2, 3, 1)               # (B, H, W, C)
    export_codebook(model.vq, codebook_path, vectors=vectors,
                    assignments=result.vq_indices,
                    assignments_path=assignments_path)


# ---------------------------------------------------------------------
# image output
# ---------------------------------------------------------------------


def write_pgm(sal: np.ndarray, path) -> None:
    """8-bit binary (P5) grayscale."""
    img = np.clip(np.round(sal * 255), 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def write_png(sal: np.ndarray, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.imsave(path, sal, cmap="viridis", vmin=0.0, vmax=1.0)


def write_contact_sheet(maps: list[SaliencyMap], path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cols = 5
    rows = (len(maps) + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(3 * cols, 3 * rows))
    for ax in np.atleast_1d(axes).ravel():
        ax.axis("off")
    for ax, sal in zip(np.atleast_1d(axes).ravel(), maps):
        ax.imshow(sal.map, cmap="viridis", vmin=0.0, vmax=1.0)
        ax.set_title(sal.layer, fontsize=9)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def export_gradcam_images(maps: list[SaliencyMap], variant: str, out_dir) -> list:
    """``gradcam_<variant>_<level>_<block>.pgm/.png`` plus a contact sheet."""
    import os

    written = []
    for sal in maps:
        if sal.layer.startswith("enc"):
            level, kind = sal.layer.split(".")
        else:
            level, kind = sal.layer, "block"
        stem = os.path.join(out_dir, f"gradcam_{variant}_{level}_{kind}")
        write_pgm(sal.map, stem + ".pgm")
        write_png(sal.map, stem + ".png")
        written += [stem + ".pgm", stem + ".png"]
    sheet = os.path.join(out_dir, f"gradcam_sheet_{variant}.png")
    write_contact_sheet(maps, sheet)
    written.append(sheet)
    return written

"""Training loop, evaluation metrics, persistence baseline, VQ grid search."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import UsageError
from .model import ModelConfig, NowcastUNet, build
from .tensor import Tensor


@dataclass
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 8
    max_epochs: int = 100
    lr_patience: int = 4
    lr_factor: float = 0.1
    early_stop_patience: int = 15
    seed: int = 0

    def __post_init__(self):
        if self.lr_patience < 1 or self.early_stop_patience < 1:
            raise UsageError("patience values must be >= 1")
        if not 0.0 < self.lr_factor < 1.0:
            raise UsageError("lr_factor must lie in (0, 1)")


class Adam:
    """Standard Adam with bias correction, one moment pair per parameter."""

    def __init__(self, params: list[Tensor], lr: float = 0.001,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self):
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                raise UsageError("adam_step called with a missing gradient")
            g = p.grad
            m += (1 - b1) * (g - m)
            v += (1 - b2) * (g * g - v)
            mhat = m / (1 - b1 ** t)
            vhat = v / (1 - b2 ** t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    vq_codebook_term: float = 0.0
    vq_commitment_term: float = 0.0


@dataclass
class TrainResult:
    history: list[EpochRecord]
    best_val_loss: float
    best_epoch: int
    best_state: dict[str, np.ndarray]
    stopped_early: bool


def _snapshot(model: NowcastUNet) -> dict[str, np.ndarray]:
    state = {name: p.data.copy() for name, p in model.named_parameters()}
    state.update({name: b.copy() for name, b in model.named_buffers()})
    return state


def _restore(model: NowcastUNet, state: dict[str, np.ndarray]) -> None:
    for name, p in model.named_parameters():
        p.data[...] = state[name]
    for name, b in model.named_buffers():
        b[...] = state[name]


def _step_loss(model: NowcastUNet, xb: Tensor, yb: Tensor, vq_weight: float):
    result = model(xb)
    loss = T.mse(result.prediction, yb)
    cb = cm = 0.0
    if result.vq is not None:
        loss = loss + vq_weight * result.vq.loss
        cb, cm = result.vq.codebook_term, result.vq.commitment_term
    return loss, cb, cm


def validation_loss(model: NowcastUNet, x: np.ndarray, y: np.ndarray,
                    batch_size: int, vq_weight: float = 1.0,
                    include_vq: bool = True) -> float:
    """Mean total loss over a split, without mutating anything trainable."""
    was_training = model.training
    model.train()  # VQ loss needs the training path; grads stay off
    saved_buffers = {name: b.copy() for name, b in model.named_buffers()}
    total, count = 0.0, 0
    with T.no_grad():
        for lo in range(0, len(x), batch_size):
            xb, yb = Tensor(x[lo : lo + batch_size]), Tensor(y[lo : lo + batch_size])
            result = model(xb)
            loss = float(T.mse(result.prediction, yb).item())
            if include_vq and result.vq is not None:
                loss += vq_weight * float(result.vq.loss.item())
            n = xb.shape[0]
            total += loss * n
            count += n
    for name, b in model.named_buffers():
        b[...] = saved_buffers[name]  # validation must not drift BN stats
    model.train(was_training)
    return total / count


def train(model: NowcastUNet, train_xy, val_xy, cfg: TrainConfig,
          vq_weight: float = 1.0) -> TrainResult:
    """Adam + plateau LR schedule + early stopping, best-checkpoint retention.

    Batch statistics during validation mirror training (total loss incl. VQ
    terms); the model is left holding the best parameters on return.
    """
    x_train, y_train = train_xy
    x_val, y_val = val_xy
    if len(x_train) == 0 or len(x_val) == 0:
        raise UsageError("train and val splits must be non-empty")
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.parameters(), lr=cfg.lr)
    history: list[EpochRecord] = []
    best_val = math.inf
    best_epoch = -1
    best_state = _snapshot(model)
    epochs_since_improvement = 0
    model.train()
    stopped_early = False

    for epoch in range(cfg.max_epochs):
        order = rng.permutation(len(x_train))
        ep_loss, ep_cb, ep_cm, seen = 0.0, 0.0, 0.0, 0
        for lo in range(0, len(order), cfg.batch_size):
            sel = order[lo : lo + cfg.batch_size]
            xb, yb = Tensor(x_train[sel]), Tensor(y_train[sel])
            opt.zero_grad()
            loss, cb, cm = _step_loss(model, xb, yb, vq_weight)
            loss_val = float(loss.item())
            if not math.isfinite(loss_val):
                raise FloatingPointError(
                    f"non-finite training loss at epoch {epoch}"
                )
            T.backward(loss)
            opt.step()
            n = len(sel)
            ep_loss += loss_val * n
            ep_cb += cb * n
            ep_cm += cm * n
            seen += n

        val_loss = validation_loss(model, x_val, y_val, cfg.batch_size, vq_weight)
        history.append(EpochRecord(epoch, ep_loss / seen, val_loss, opt.lr,
                                   ep_cb / seen, ep_cm / seen))

        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_state = _snapshot(model)
            epochs_since_improvement = 0
        else:
            epochs_since_improvement += 1
            if epochs_since_improvement >= cfg.early_stop_patience:
                stopped_early = True
                break
            if epochs_since_improvement % cfg.lr_patience == 0:
                opt.lr *= cfg.lr_factor

    _restore(model, best_state)
    return TrainResult(history, best_val, best_epoch, best_state, stopped_early)


# ---------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def add_masks(self, pred_mask: np.ndarray, target_mask: np.ndarray):
        p = pred_mask.astype(bool)
        t = target_mask.astype(bool)
        self.tp += int(np.sum(p & t))
        self.fp += int(np.sum(p & ~t))
        self.tn += int(np.sum(~p & ~t))
        self.fn += int(np.sum(~p & t))

    def merge(self, other: "ConfusionCounts"):
        self.tp += other.tp
        self.fp += other.fp
        self.tn += other.tn
        self.fn += other.fn

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class MetricsReport:
    mse: float
    precision: float
    recall: float
    accuracy: float
    f1: float


def _safe_div(num: float, den: float) -> float:
    return num / den if den > 0 else 0.0


def metrics_from_counts(mse: float, c: ConfusionCounts) -> MetricsReport:
    precision = _safe_div(c.tp, c.tp + c.fp)
    recall = _safe_div(c.tp, c.tp + c.fn)
    accuracy = _safe_div(c.tp + c.tn, c.total)
    f1 = _safe_div(2 * precision * recall, precision + recall)
    return MetricsReport(mse, precision, recall, accuracy, f1)


def persistence_forecast(sample_input: np.ndarray) -> np.ndarray:
    """Repeat the last input frame, untouched."""
    return sample_input[..., -1:, :, :]


def evaluate(predict_fn, x: np.ndarray, y: np.ndarray,
             rain_threshold: float = 0.5, batch_size: int = 8) -> MetricsReport:
    """Pooled per-pixel MSE and confusion metrics over a test set.

    ``predict_fn`` maps a (B, F, H, W) input batch to (B, 1, H, W)
    predictions; use :func:`model_predict_fn` or the persistence baseline.
    """
    if len(x) == 0:
        raise UsageError("empty test set")
    counts = ConfusionCounts()
    sq_sum, n_px = 0.0, 0
    for lo in range(0, len(x), batch_size):
        xb, yb = x[lo : lo + batch_size], y[lo : lo + batch_size]
        pred = predict_fn(xb)
        diff = pred.astype(np.float64) - yb.astype(np.float64)
        sq_sum += float(np.sum(diff * diff))
        n_px += diff.size
        counts.add_masks(pred >= rain_threshold, yb >= rain_threshold)
    return metrics_from_counts(sq_sum / n_px, counts)


def model_predict_fn(model: NowcastUNet):
    """Eval-mode forward as a plain array function."""
    def fn(xb: np.ndarray) -> np.ndarray:
        was_training = model.training
        model.eval()
        with T.no_grad():
            out = model(Tensor(xb)).prediction.data
        model.train(was_training)
        return out
    return fn


# ---------------------------------------------------------------------
# VQ hyperparameter grid search
# ---------------------------------------------------------------------

GRID_K = (8, 16, 32, 64)
GRID_BETA = (0.25, 0.50, 0.75, 1.00)


@dataclass
class GridResult:
    grid: np.ndarray                  # (len(K), len(beta)) validation MSE
    ks: tuple = GRID_K
    betas: tuple = GRID_BETA
    failed: list = field(default_factory=list)

    @property
    def argmin(self) -> tuple[int, float]:
        masked = np.where(np.isnan(self.grid), np.inf, self.grid)
        i, j = np.unravel_index(int(np.argmin(masked)), self.grid.shape)
        return self.ks[i], self.betas[j]


def tune_vq(model_config: ModelConfig, train_xy, val_xy, cfg: TrainConfig,
            ks=GRID_K, betas=GRID_BETA, model_seed: int = 0,
            progress=None) -> GridResult:
    """Train one model per (K, beta) cell; grid holds validation MSE.

    Every cell shares the data split, model seed and shuffling seed, so
    differences are attributable to the hyperparameters alone. A cell that
    diverges is recorded as NaN and the sweep continues.
    """
    if not model_config.uses_vq:
        raise UsageError("tune_vq needs a VQ variant (q or qmix)")
    grid = np.full((len(ks), len(betas)), np.nan)
    failed = []
    for i, k in enumerate(ks):
        for j, beta in enumerate(betas):
            mc = replace(model_config, vq_codewords=k, vq_beta=beta)
            model = build(mc, seed=model_seed)
            try:
                train(model, train_xy, val_xy, cfg)
                grid[i, j] = validation_loss(
                    model, val_xy[0], val_xy[1], cfg.batch_size,
                    include_vq=False,
                )
            except FloatingPointError:
                failed.append((k, beta))
            if progress is not None:
                progress(k, beta, grid[i, j])
    return GridResult(grid, tuple(ks), tuple(betas), failed)


# ---------------------------------------------------------------------
# CSV artifacts
# ---------------------------------------------------------------------


def write_history_csv(history: list[EpochRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss", "lr",
                    "vq_codebook_term", "vq_commitment_term"])
        for r in history:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss),
                        repr(r.lr), repr(r.vq_codebook_term),
                        repr(r.vq_commitment_term)])


def write_metrics_csv(reports: dict[str, MetricsReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "mse", "precision", "recall", "accuracy", "f1"])
        for name, r in reports.items():
            w.writerow([name, repr(r.mse), repr(r.precision), repr(r.recall),
                        repr(r.accuracy), repr(r.f1)])


def write_grid_csv(result: GridResult, path) -> None:
    """First row is the beta values, first column the K values."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["K\\beta"] + [repr(b) for b in result.betas])
        for i, k in enumerate(result.ks):
            w.writerow([k] + [repr(float(v)) for v in result.grid[i]])

"""Adam, the deep-supervised training loop with early stopping, and evaluation."""
from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .data import ImageSample, extract_patches, stitch_patches
from .errors import ConfigError, DataError, ShapeError
from .graph import NestedUNet
from .metrics import METRIC_NAMES, all_metrics, binarize, total_loss
from .tensor import Parameter, Tensor, no_grad

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    batch_size: int = 4
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    deep_supervision: bool = True
    # stop as soon as validation dice reaches this value (None: never)
    target_dice: float | None = None

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")

    def to_dict(self) -> dict:
        return asdict(self)


def adam_step(params: Iterable[Parameter], lr: float = 3e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update, in place."""
    for p in params:
        g = p.grad
        p.step += 1
        p.m *= beta1
        p.m += (1.0 - beta1) * g
        p.v *= beta2
        p.v += (1.0 - beta2) * g * g
        mhat = p.m / (1.0 - beta1**p.step)
        vhat = p.v / (1.0 - beta2**p.step)
        p.data -= lr * mhat / (np.sqrt(vhat) + eps)


def loss_weights(num_heads: int, deep_supervision: bool) -> list[float]:
    """All-ones with deep supervision; otherwise only the deepest head counts."""
    if deep_supervision:
        return [1.0] * num_heads
    return [0.0] * (num_heads - 1) + [1.0]


def stack_samples(samples: Sequence[ImageSample]) -> tuple[np.ndarray, np.ndarray]:
    if not samples:
        raise DataError("empty dataset")
    shapes = {s.image.shape for s in samples}
    if len(shapes) != 1:
        raise ShapeError(f"samples in one set must share a size, got {sorted(shapes)}")
    x = np.stack([s.image for s in samples])[:, None].astype(np.float64)
    y = np.stack([s.mask for s in samples])[:, None].astype(np.float64)
    return x, y


def labels_for(model: NestedUNet, masks: np.ndarray) -> np.ndarray:
    """Map N x 1 x H x W binary masks to the label layout the heads emit."""
    c = model.config.num_classes
    if c == 1:
        return masks
    onehot = np.zeros((masks.shape[0], c) + masks.shape[2:])
    idx = masks[:, 0].astype(int)
    for k in range(c):
        onehot[:, k] = idx == k
    return onehot


def foreground(probs: np.ndarray) -> np.ndarray:
    """Foreground probability map (N x H x W) from head output."""
    return probs[:, 0] if probs.shape[1] == 1 else 1.0 - probs[:, 0]


class EpochRecord(NamedTuple):
    epoch: int
    train_loss: float
    val_loss: float
    val_dice: float


class FitResult(NamedTuple):
    history: list[EpochRecord]
    best_epoch: int
    best_state: dict[str, np.ndarray]
    final_state: dict[str, np.ndarray]


def snapshot(model: NestedUNet) -> dict[str, np.ndarray]:
    return {name: arr.copy() for name, arr, _ in model.state()}


def _dataset_loss(model: NestedUNet, x: np.ndarray, y: np.ndarray, weights, batch_size: int, use_ensemble: bool):
    """Inference-mode mean total loss and mean dice over a dataset."""
    losses, dices = [], []
    with no_grad():
        for start in range(0, len(x), batch_size):
            xb, yb = x[start : start + batch_size], y[start : start + batch_size]
            res = model.forward(xb, train=False)
            heads = [res.heads[q] for q in sorted(res.heads)]
            losses.append(total_loss(labels_for(model, yb), heads, weights).item() * len(xb))
            probs = np.mean([h.data for h in heads], axis=0) if use_ensemble else heads[-1].data
            pred = binarize(foreground(probs))
            dices += [all_metrics(yb[i, 0], pred[i])["dice"] for i in range(len(xb))]
    return float(np.sum(losses) / len(x)), float(np.mean(dices))


def fit(
    model: NestedUNet,
    train_set: Sequence[ImageSample],
    val_set: Sequence[ImageSample],
    config: TrainConfig,
) -> FitResult:
    """Train with the weighted multi-head loss; early-stop on validation loss.

    The model is left holding the best-validation parameters.
    """
    x, y = stack_samples(train_set)
    xv, yv = stack_samples(val_set)
    weights = loss_weights(len(model.plan.heads), config.deep_supervision)
    rng = np.random.default_rng([config.seed, 1])
    params = model.parameters()

    history: list[EpochRecord] = []
    best_loss, best_epoch, best_state = np.inf, -1, snapshot(model)
    stale = 0
    for epoch in range(config.max_epochs):
        order = rng.permutation(len(x))
        batch_losses = []
        for start in range(0, len(x), config.batch_size):
            idx = order[start : start + config.batch_size]
            model.zero_grad()
            res = model.forward(x[idx], train=True)
            heads = [res.heads[q] for q in sorted(res.heads)]
            loss = total_loss(labels_for(model, y[idx]), heads, weights)
            loss.backward()
            adam_step(params, config.learning_rate, config.beta1, config.beta2, config.eps_adam)
            batch_losses.append(loss.item() * len(idx))
        train_loss = float(np.sum(batch_losses) / len(x))
        val_loss, val_dice = _dataset_loss(model, xv, yv, weights, config.batch_size, config.deep_supervision)
        history.append(EpochRecord(epoch, train_loss, val_loss, val_dice))
        log.info("epoch %d train %.6f val %.6f dice %.4f", epoch, train_loss, val_loss, val_dice)

        if val_loss < best_loss:
            best_loss, best_epoch, best_state, stale = val_loss, epoch, snapshot(model), 0
        else:
            stale += 1
        if stale >= config.patience:
            break
        if config.target_dice is not None and val_dice >= config.target_dice:
            if best_epoch != epoch:
                best_epoch, best_state = epoch, snapshot(model)
            break

    final_state = snapshot(model)
    model.load_state(best_state)
    return FitResult(history, best_epoch, best_state, final_state)


def history_csv(history: Sequence[EpochRecord]) -> str:
    lines = ["epoch,train_loss,val_loss,val_dice"]
    for r in history:
        lines.append(f"{r.epoch},{r.train_loss!r},{r.val_loss!r},{r.val_dice!r}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# inference and evaluation
# ---------------------------------------------------------------------------

def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("R2UPP_THREADS", "1")))
    except ValueError:
        return 1


def predict_image(
    model: NestedUNet,
    image: np.ndarray,
    mode: str | int = "ensemble",
    patch_size: int | None = None,
    stride: int | None = None,
    batch_size: int = 8,
) -> np.ndarray:
    """Foreground probability map for one H x W image.

    With ``patch_size`` the image is cut into an edge-anchored sliding-window
    grid, each patch is predicted and the results are averaged back together.
    """
    image = np.asarray(image, dtype=np.float64)
    if patch_size is None:
        return foreground(model.predict(image[None, None], mode))[0]
    factor = 2**model.config.depth
    if patch_size % factor:
        raise ShapeError(f"patch size {patch_size} is not divisible by 2^depth = {factor}")
    grid, patches = extract_patches(image, patch_size, stride or patch_size, edge_anchored=True)
    preds = []
    for start in range(0, len(patches), batch_size):
        chunk = patches[start : start + batch_size][:, None]
        preds.append(foreground(model.predict(chunk, mode)))
    stitched, _ = stitch_patches(np.concatenate(preds), grid)
    return stitched


class EvalReport(NamedTuple):
    per_image: list[dict]
    mean: dict[str, float]
    sd: dict[str, float]


def summarize(per_image: Sequence[Mapping[str, float]]) -> tuple[dict, dict]:
    """Mean and population standard deviation of each metric."""
    mean = {k: float(np.mean([r[k] for r in per_image])) for k in METRIC_NAMES}
    sd = {k: float(np.std([r[k] for r in per_image])) for k in METRIC_NAMES}
    return mean, sd


def evaluate(
    model: NestedUNet,
    dataset: Sequence[ImageSample],
    mode: str = "ensemble",
    q: int | None = None,
    patch_size: int | None = None,
    stride: int | None = None,
    threshold: float = 0.5,
) -> EvalReport:
    """Per-image metrics plus mean and sd.

    ``mode="ensemble"`` averages every depth head; ``mode="single"`` uses head
    ``q`` (the deepest head when ``q`` is None).
    """
    if mode == "ensemble":
        which: str | int = "ensemble"
    elif mode == "single":
        which = model.config.depth if q is None else q
    else:
        raise ConfigError(f"evaluation mode must be 'ensemble' or 'single', got {mode!r}")

    def one(sample: ImageSample) -> dict:
        prob = predict_image(model, sample.image, which, patch_size, stride)
        row = {"id": sample.id}
        row.update(all_metrics(sample.mask, binarize(prob, threshold)))
        return row

    workers = min(worker_count(), max(1, len(dataset)))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(one, dataset))
    else:
        rows = [one(s) for s in dataset]
    mean, sd = summarize(rows)
    return EvalReport(rows, mean, sd)

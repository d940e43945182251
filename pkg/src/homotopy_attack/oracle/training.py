"""Deterministic minibatch trainer for the built-in classifiers."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .data import SyntheticDataset
from .model import Model, build_mlp, build_small_conv

__all__ = ["TrainingDiverged", "TrainResult", "train_model", "accuracy"]

log = logging.getLogger(__name__)

ARCHITECTURES = {"mlp": build_mlp, "conv": build_small_conv, "small_conv": build_small_conv}


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainResult:
    model: Model
    test_accuracy: float
    final_loss: float


def accuracy(model: Model, x: np.ndarray, y: np.ndarray) -> float:
    logits = model.forward_batch(x)
    return float(np.mean(np.argmax(logits, axis=1) == y))


def _batch_ce(logits: np.ndarray, y: np.ndarray):
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    total = e.sum(axis=1, keepdims=True)
    rows = np.arange(y.size)
    loss = float(np.mean(np.log(total[:, 0]) - shifted[rows, y]))
    d = e / total
    d[rows, y] -= 1.0
    return loss, d / y.size


def _first_layer_response(model: Model, x: np.ndarray) -> np.ndarray:
    h = x[None]
    for layer in model.layers:
        h, _ = layer.forward(h)
        if layer.params():
            return h[0].reshape(-1, h.shape[-1]).mean(axis=0) if h.ndim > 2 else h[0]
    raise ValueError("model has no parametric layer")


def train_model(
    dataset: SyntheticDataset,
    arch: str = "mlp",
    seed: int = 0,
    epochs: int = 40,
    batch_size: int = 50,
    lr: float = 1e-3,
    betas: tuple[float, float] = (0.9, 0.999),
) -> TrainResult:
    """Train with Adam on cross entropy.

    Output is a deterministic function of every argument. ``epochs=0`` returns
    the freshly initialized model.
    """
    if arch not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {arch!r}; choose from {sorted(ARCHITECTURES)}")
    rng = np.random.default_rng(seed)
    model = ARCHITECTURES[arch](
        input_shape=dataset.image_shape, num_classes=dataset.num_classes, rng=rng
    )
    params = [p.copy() for p in model.params()]
    # center the first layer on the mean training image so the shared
    # background does not saturate the ReLUs at initialization
    mean_image = dataset.x_train.mean(axis=0)
    params[1] -= _first_layer_response(model, mean_image)
    model = model.with_params(params)
    first_moment = [np.zeros_like(p) for p in params]
    second_moment = [np.zeros_like(p) for p in params]
    step = 0
    n = dataset.y_train.size
    loss = float("nan")
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            logits, caches = model.forward_batch(dataset.x_train[idx], keep_cache=True)
            loss, dlogits = _batch_ce(logits, dataset.y_train[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} in epoch {epoch} at batch offset {start}")
            _, grads = model.backward_batch(caches, dlogits)
            step += 1
            b1, b2 = betas
            scale = lr * np.sqrt(1 - b2**step) / (1 - b1**step)
            for p, m1, m2, g in zip(params, first_moment, second_moment, grads):
                m1 *= b1
                m1 += (1 - b1) * g
                m2 *= b2
                m2 += (1 - b2) * g * g
                p -= scale * m1 / (np.sqrt(m2) + 1e-8)
            model = model.with_params(params)
        log.info("epoch %d: last batch loss %.4f", epoch, loss)
    acc = accuracy(model, dataset.x_test, dataset.y_test)
    return TrainResult(model=model, test_accuracy=acc, final_loss=loss)

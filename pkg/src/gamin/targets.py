"""Target classifier zoo: the five reference architectures plus trainers.

Conv targets use 2x2 kernels with 2x2 max pooling (valid padding, stride 1).
`train_target` is plain minibatch training (Adam by default, SGD available);
`train_target_noisy` is the noisy-SGD variant with per-example gradient
clipping and Gaussian perturbation.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import nn


class TargetName(str, Enum):
    SOFT = "soft"
    MLP1 = "mlp1"
    MLP2 = "mlp2"
    CNN1 = "cnn1"
    CNN2 = "cnn2"


@dataclass
class TrainReport:
    train_accuracy: float
    test_accuracy: float
    epochs: int
    seed: int
    wall_time: float

    def __post_init__(self):
        if not (0.0 <= self.train_accuracy <= 1.0 and 0.0 <= self.test_accuracy <= 1.0):
            raise ValueError("accuracies must lie in [0, 1]")

    def record(self, model_name):
        return {"model": str(model_name), "seed": self.seed, "epochs": self.epochs,
                "acc_train": round(self.train_accuracy, 6),
                "acc_test": round(self.test_accuracy, 6),
                "wall_time_s": round(self.wall_time, 3)}


def _image_shape(input_dim, image_shape):
    if image_shape is not None:
        if math.prod(image_shape) != input_dim:
            raise ValueError(f"image shape {image_shape} does not cover {input_dim} inputs")
        return tuple(image_shape)
    side = math.isqrt(input_dim)
    if side * side != input_dim:
        raise ValueError(f"input_dim {input_dim} is not square; pass image_shape")
    return (1, side, side)


def build_target(name, input_dim, output_dim, image_shape=None) -> nn.ArchitectureSpec:
    """Architecture for one of the five reference targets."""
    name = TargetName(name)
    if name is TargetName.SOFT:
        layers = [nn.dense(output_dim, "softmax")]
    elif name is TargetName.MLP1:
        layers = [nn.dense(100, "relu"), nn.dense(output_dim, "softmax")]
    elif name is TargetName.MLP2:
        layers = [nn.dense(200, "relu"), nn.dense(200, "relu"),
                  nn.dense(output_dim, "softmax")]
    else:
        shape = _image_shape(input_dim, image_shape)
        layers = [nn.reshape(shape),
                  nn.conv2d(32, 2, "valid", "relu"), nn.maxpool2d(2)]
        if name is TargetName.CNN2:
            layers += [nn.conv2d(64, 2, "valid", "relu"), nn.maxpool2d(2)]
        layers += [nn.flatten(), nn.dense(200, "relu"),
                   nn.dense(output_dim, "softmax")]
    return nn.ArchitectureSpec(input_dim, output_dim, tuple(layers))


def accuracy(model, dataset, chunk=1024):
    """Fraction of argmax-correct predictions (lowest index wins ties)."""
    hits = 0
    x = dataset.flat
    for i in range(0, len(dataset), chunk):
        preds = model.forward(x[i:i + chunk], "infer")
        hits += int((np.argmax(preds, axis=1) == dataset.labels[i:i + chunk]).sum())
    return hits / len(dataset) if len(dataset) else 0.0


def _check_task(spec, train_set):
    if train_set.num_classes != spec.output_dim:
        raise ValueError(f"dataset has {train_set.num_classes} classes, "
                         f"architecture outputs {spec.output_dim}")
    if train_set.input_dim != spec.input_dim:
        raise ValueError(f"dataset inputs are {train_set.input_dim}-dim, "
                         f"architecture expects {spec.input_dim}")


def _epoch_batches(n, batch_size, rng):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def train_target(spec, train_set, test_set, epochs=20, seed=0, batch_size=64,
                 optimizer="adam", lr=None, log=None):
    """Train a classifier with cross-entropy; returns (Model, TrainReport)."""
    _check_task(spec, train_set)
    t0 = time.monotonic()
    model = nn.Model(spec, seed=seed)
    x = train_set.flat
    y = train_set.one_hot()
    shuffle_rng = np.random.default_rng([seed, 1])
    if optimizer == "adam":
        lr = 1e-3 if lr is None else lr
        adam = nn.AdamState(model, lr=lr)
        step = lambda bx, by: model.train_step(bx, by, adam)
    elif optimizer == "sgd":
        lr = 0.1 if lr is None else lr

        def step(bx, by):
            loss, grads = model.loss_and_grads([(bx, by, 1.0)])
            if not np.isfinite(loss):
                raise nn.EngineError(f"non-finite loss {loss!r}")
            model._check_finite(grads)
            _sgd_apply(model.params, grads, lr)
            return loss
    else:
        raise ValueError(f"optimizer must be adam or sgd, got {optimizer!r}")

    for epoch in range(epochs):
        for idx in _epoch_batches(len(x), batch_size, shuffle_rng):
            try:
                loss = step(x[idx], y[idx])
            except nn.EngineError as exc:
                raise nn.EngineError(f"divergence in epoch {epoch}: {exc}") from exc
        if log:
            log(epoch, loss)
    report = TrainReport(accuracy(model, train_set), accuracy(model, test_set),
                         epochs, seed, time.monotonic() - t0)
    return model, report


def _sgd_apply(params, grads, lr):
    for p, g in zip(params, grads):
        if p is None:
            continue
        w, b = p
        w -= lr * g[0]
        b -= lr * g[1]


def train_target_noisy(spec, train_set, test_set, epochs, clip_norm,
                       noise_multiplier, seed=0, batch_size=64, lr=0.1,
                       grad_norm_hook=None, log=None):
    """Noisy batched SGD: per-example gradients are L2-clipped to clip_norm,
    summed, perturbed with N(0, (noise_multiplier * clip_norm)^2) per
    coordinate, averaged over the batch and applied by plain SGD.

    With noise_multiplier = 0 and clip_norm above every per-example norm the
    trajectory matches train_target(optimizer="sgd") bit for bit at equal
    seed (for power-of-two batch sizes, where the mean rescaling is exact).
    """
    if clip_norm <= 0:
        raise ValueError("clip_norm must be positive")
    if noise_multiplier < 0:
        raise ValueError("noise_multiplier must be non-negative")
    _check_task(spec, train_set)
    t0 = time.monotonic()
    model = nn.Model(spec, seed=seed)
    x = train_set.flat
    y = train_set.one_hot()
    shuffle_rng = np.random.default_rng([seed, 1])
    noise_rng = np.random.default_rng([seed, 2])
    sigma = noise_multiplier * clip_norm

    for epoch in range(epochs):
        for idx in _epoch_batches(len(x), batch_size, shuffle_rng):
            grads, norms = model.clipped_grad_sum(x[idx], y[idx], clip_norm)
            if grad_norm_hook:
                grad_norm_hook(norms)
            inv_b = 1.0 / len(idx)
            for i, g in enumerate(grads):
                if g is None:
                    continue
                w, b = g
                if sigma > 0:
                    w = w + noise_rng.normal(0.0, sigma, w.shape).astype(w.dtype)
                    b = b + noise_rng.normal(0.0, sigma, b.shape).astype(b.dtype)
                grads[i] = (w * inv_b, b * inv_b)
            model._check_finite(grads)
            if not all(np.isfinite(n) for n in norms):
                raise nn.EngineError(f"divergence in epoch {epoch}: non-finite norms")
            _sgd_apply(model.params, grads, lr)
        if log:
            log(epoch, float(np.mean(norms)))
    report = TrainReport(accuracy(model, train_set), accuracy(model, test_set),
                         epochs, seed, time.monotonic() - t0)
    return model, report

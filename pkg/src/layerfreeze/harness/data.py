"""Synthetic Gaussian-blob tasks with a related pre-training distribution.

Pre-training data are blobs around random class centres.  Two fine-tuning
tasks build on them:

* ``shift``: same classes, but the inputs pass through a near-identity linear
  map plus an offset (scaled by ``shift``), so a pre-trained network starts
  close to a solution and mostly re-fits its input-side layers.
* ``teacher``: same inputs, labels taken from a copy of the pre-trained
  network whose layers are perturbed more the deeper they sit.  The first
  layer is held exact, so the early layers start out converged and the
  later ones have progressively further to go.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..nncore import Model, predict


@dataclass
class Task:
    x_pre: np.ndarray
    y_pre: np.ndarray
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    x_probe: np.ndarray


def blobs(rng: np.random.Generator, centers: np.ndarray, n: int, noise: float):
    labels = rng.integers(0, centers.shape[0], size=n)
    x = centers[labels] + noise * rng.standard_normal((n, centers.shape[1]))
    return x, labels


def make_task(rng: np.random.Generator, n_train: int, n_test: int, n_features: int,
              n_classes: int, noise: float = 1.0, shift: float = 1.0,
              probe_size: int = 256, kind: str = "shift") -> Task:
    """Draw pre-training, fine-tuning, test and probe sets.

    For ``kind="teacher"`` the inputs are left unshifted; the labels are
    replaced later by :func:`relabel` once a pre-trained model exists.
    """
    centers = 2.0 * rng.standard_normal((n_classes, n_features))
    if kind == "teacher":
        shift = 0.0
    mix = np.eye(n_features) + shift * rng.standard_normal((n_features, n_features)) / np.sqrt(n_features)
    offset = shift * rng.standard_normal(n_features)

    def fine_tune(n):
        x, y = blobs(rng, centers, n, noise)
        return x @ mix.T + offset, y

    x_pre, y_pre = blobs(rng, centers, n_train, noise)
    x_train, y_train = fine_tune(n_train)
    x_test, y_test = fine_tune(n_test)
    x_probe, _ = fine_tune(probe_size)
    return Task(x_pre, y_pre, x_train, y_train, x_test, y_test, x_probe)


def perturbed_teacher(rng: np.random.Generator, model: Model, strength: float,
                      held: int = 1) -> Model:
    """Copy of ``model`` with weight noise growing linearly with depth.

    Layers below ``held`` stay exact; the top layer gets Gaussian noise of
    ``strength`` times its mean absolute weight.
    """
    teacher = model.copy()
    L = len(teacher.layers)
    for j in range(held, L):
        layer = teacher.layers[j]
        scale = strength * (j - held + 1) / (L - held)
        layer.weights += scale * np.abs(layer.weights).mean() * rng.standard_normal(layer.weights.shape)
    return teacher


def relabel(task: Task, teacher: Model) -> Task:
    """Replace the fine-tuning and test labels with ``teacher``'s predictions."""
    return Task(task.x_pre, task.y_pre, task.x_train, predict(teacher, task.x_train),
                task.x_test, predict(teacher, task.x_test), task.x_probe)

"""Minibatch training and accuracy evaluation on top of the model graph."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import tensor as T
from .dataio import Dataset, shuffle_and_batch
from .errors import NonFiniteError
from .imaging import NoiseSpec, corrupt_batch, derive_seed, normalize
from .model import ModelSpec, forward, predict_logits
from .optim import AdamConfig, AdamState, adam_step


class Trainer:
    """Owns trainable tensors and Adam state for one model."""

    def __init__(self, spec: ModelSpec, state: Mapping[str, np.ndarray], adam: AdamConfig,
                 n_threads: int | None = None):
        self.spec = spec
        self.params = {k: T.Tensor(v, requires_grad=True, name=k) for k, v in state.items()}
        self.adam = adam
        self.adam_state = AdamState()
        self.n_threads = n_threads

    @property
    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    @property
    def step_count(self) -> int:
        return self.adam_state.t

    def train_step(self, images: np.ndarray, labels: np.ndarray) -> float:
        """One Adam step on a normalized batch; returns the batch loss."""
        logits = forward(self.spec, self.params, images, self.n_threads)
        loss, _ = T.softmax_cross_entropy(logits, labels)
        value = loss.item()
        if not np.isfinite(value):
            raise NonFiniteError(f"non-finite training loss at step {self.step_count + 1}")
        T.zero_grad(self.params.values())
        loss.backward()
        grads = {k: p.grad if p.grad is not None else np.zeros_like(p.data) for k, p in self.params.items()}
        adam_step(self.adam, self.adam_state, self.state, grads)
        return value

    def train_epoch(self, dataset: Dataset, batch_size: int, seed: int, on_step=None) -> float:
        """One pass over ``dataset`` in a seeded order; returns the sample-weighted mean loss."""
        if dataset.corrupted:
            raise ValueError("refusing to train on noise-corrupted data")
        total, count = 0.0, 0
        for batch in shuffle_and_batch(dataset, batch_size, seed):
            loss = self.train_step(normalize(batch.images), batch.labels)
            total += loss * len(batch)
            count += len(batch)
            if on_step is not None:
                on_step(self, total / count)
        return total / count


@dataclass(frozen=True)
class Accuracy:
    correct: int
    total: int

    @property
    def value(self) -> float:
        return self.correct / self.total if self.total else 0.0


def corrupt_dataset(dataset: Dataset, noise: NoiseSpec) -> Dataset:
    """Copy of ``dataset`` with per-image zero-noise (sub-seeds from ``noise.seed`` and image ids)."""
    out = dataset.subset(np.arange(len(dataset)))
    out.images = corrupt_batch(dataset.images, noise, dataset.ids)
    out.corrupted = True
    return out


def evaluate_counts(spec: ModelSpec, state: Mapping, testset: Dataset, noise: NoiseSpec | None = None,
                    batch_size: int = 256, n_threads: int | None = None) -> Accuracy:
    data = testset if noise is None or noise.ratio == 0.0 else corrupt_dataset(testset, noise)
    correct = 0
    for start in range(0, len(data), batch_size):
        chunk = normalize(data.images[start:start + batch_size])
        logits = predict_logits(spec, state, chunk, batch_size, n_threads)
        correct += int((logits.argmax(axis=1) == data.labels[start:start + batch_size]).sum())
    return Accuracy(correct, len(data))


def evaluate(spec: ModelSpec, state: Mapping, testset: Dataset, noise: NoiseSpec | None = None,
             batch_size: int = 256, n_threads: int | None = None) -> float:
    """Argmax accuracy, optionally under zero-noise applied to every test image."""
    return evaluate_counts(spec, state, testset, noise, batch_size, n_threads).value


def noise_seed(master_seed: int, level: float) -> int:
    """Seed of the single corruption realization used for ``level`` in a run."""
    return int(derive_seed(master_seed, 1000 + int(round(level * 10))))

"""Modality-discrimination probes for inspecting how modality-invariant a
representation is."""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from .autodiff import ParamGroup, Tape, affine, relu, sgd_step
from .data import Dataset
from .losses import modal_adversarial_loss
from .network import StarNetwork, _dense_layers


def _stack(reps: Mapping[str, np.ndarray]):
    mods = list(reps)
    x = np.vstack([reps[m] for m in mods])
    y = np.concatenate([np.full(reps[m].shape[0], k) for k, m in enumerate(mods)])
    return x, y


def discriminator_accuracy(net: StarNetwork, dataset: Dataset) -> float:
    """Accuracy of the network's own modality discriminator on its common representations."""
    mods = net.config.modalities
    preds, truth = [], []
    for k, mod in enumerate(mods):
        out = net.discriminate(mod, dataset.features[mod])
        preds.append(out.argmax(axis=1))
        truth.append(np.full(out.shape[0], k))
    return float(np.mean(np.concatenate(preds) == np.concatenate(truth)))


class ModalityProbe:
    """Fresh MLP modality classifier (sigmoid cross entropy, plain SGD)."""

    def __init__(self, in_dim: int, num_modalities: int, widths: Sequence[int] = (128, 128), lr: float = 0.01, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.group = ParamGroup("probe", [], lr, 0.0)
        self.layers = _dense_layers(rng, self.group, list(widths) + [num_modalities], in_dim)
        self.num_modalities = num_modalities
        self.seed = seed

    def _forward(self, tape, x):
        h = tape.constant(x)
        for i, (wi, bi) in enumerate(self.layers):
            h = affine(h, tape.param(self.group, wi), tape.param(self.group, bi))
            if i < len(self.layers) - 1:
                h = relu(h)
        return h

    def fit(self, reps: Mapping[str, np.ndarray], epochs: int = 50, batch_size: int = 32) -> "ModalityProbe":
        x, y = _stack(reps)
        mean, std = x.mean(axis=0), x.std(axis=0) + 1e-8
        self.mean, self.std = mean, std
        x = (x - mean) / std
        onehot = np.eye(self.num_modalities)[y]
        rng = np.random.default_rng(self.seed)
        for _ in range(epochs):
            order = rng.permutation(x.shape[0])
            for start in range(0, x.shape[0], batch_size):
                rows = order[start : start + batch_size]
                tape = Tape()
                loss = modal_adversarial_loss(self._forward(tape, x[rows]), onehot[rows])
                grads = tape.backward(loss, [self.group])
                sgd_step(self.group, grads["probe"])
        return self

    def predict(self, x) -> np.ndarray:
        x = (np.asarray(x, dtype=np.float64) - self.mean) / self.std
        return self._forward(Tape(record=False), x).value.argmax(axis=1)

    def accuracy(self, reps: Mapping[str, np.ndarray]) -> float:
        x, y = _stack(reps)
        return float(np.mean(self.predict(x) == y))


def probe_accuracy(train_reps, test_reps, seed: int = 0, **kwargs) -> float:
    """Train a fresh probe on ``train_reps`` and report its accuracy on ``test_reps``."""
    first = next(iter(train_reps.values()))
    probe = ModalityProbe(first.shape[1], len(train_reps), seed=seed, **{k: v for k, v in kwargs.items() if k in ("widths", "lr")})
    probe.fit(train_reps, **{k: v for k, v in kwargs.items() if k in ("epochs", "batch_size")})
    return probe.accuracy(test_reps)

"""Linear probing of frozen per-layer features.

Features are pooled hidden states from a clean-only forward pass (no
rotation conditioning is applied anywhere on that path): the mean over
every token of every frame after a given block. A multinomial logistic
regression is then trained on frozen features with plain full-batch
gradient descent and scored by held-out top-1 accuracy, one probe per
layer.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .model import FrameDiT
from .rng import substream

PROBE_EPOCHS = 200
PROBE_LR = 0.1


@dataclass
class ProbeEntry:
    layer: int
    accuracy: float
    train_accuracy: float


@dataclass
class ProbeReport:
    entries: list[ProbeEntry] = field(default_factory=list)
    n_train: int = 0
    n_test: int = 0
    epochs: int = PROBE_EPOCHS
    seed: int = 0

    def best(self) -> ProbeEntry:
        return max(self.entries, key=lambda e: e.accuracy)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["layer", "accuracy", "n_train", "n_test", "seed"])
            for e in self.entries:
                writer.writerow([e.layer, f"{e.accuracy:.4f}", self.n_train, self.n_test, self.seed])


def extract_features(model: FrameDiT, video, layer: int) -> np.ndarray:
    """Pooled feature vector for one video after the given block (1-based)."""
    if not 1 <= layer <= model.config.layers:
        raise DomainError(f"layer {layer} outside [1, {model.config.layers}]")
    frames = np.asarray(video.frames if hasattr(video, "frames") else video)
    return model.clean_features(frames)[layer - 1][0]


def extract_layer_features(model: FrameDiT, videos, layers) -> dict[int, np.ndarray]:
    """Feature matrix per requested layer over a list of videos."""
    for layer in layers:
        if not 1 <= layer <= model.config.layers:
            raise DomainError(f"layer {layer} outside [1, {model.config.layers}]")
    per_layer: dict[int, list[np.ndarray]] = {layer: [] for layer in layers}
    for video in videos:
        frames = np.asarray(video.frames if hasattr(video, "frames") else video)
        feats = model.clean_features(frames)
        for layer in layers:
            per_layer[layer].append(feats[layer - 1][0])
    return {layer: np.stack(rows) for layer, rows in per_layer.items()}


def train_probe(
    features: np.ndarray,
    labels: np.ndarray,
    train_idx: np.ndarray,
    test_idx: np.ndarray,
    epochs: int = PROBE_EPOCHS,
    lr: float = PROBE_LR,
) -> tuple[float, float]:
    """Multinomial logistic regression on frozen features.

    Full-batch gradient descent from a zero-initialized weight matrix, no
    regularization. Returns (held-out top-1 accuracy, training accuracy).
    """
    labels = np.asarray(labels, dtype=np.intp)
    classes = np.unique(labels[train_idx])
    if classes.size < 2:
        raise DomainError("training split holds a single class")
    k = int(labels.max()) + 1
    x_train = features[train_idx].astype(np.float64)
    y_train = labels[train_idx]
    w = np.zeros((features.shape[1], k))
    b = np.zeros(k)
    onehot = np.zeros((len(y_train), k))
    onehot[np.arange(len(y_train)), y_train] = 1.0
    for _ in range(epochs):
        logits = x_train @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        probs = e / e.sum(axis=1, keepdims=True)
        g = (probs - onehot) / len(y_train)
        w -= lr * (x_train.T @ g)
        b -= lr * g.sum(axis=0)

    def accuracy(idx):
        logits = features[idx].astype(np.float64) @ w + b
        return float(np.mean(np.argmax(logits, axis=1) == labels[idx]))

    return accuracy(test_idx), accuracy(train_idx)


def split_indices(n: int, test_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Disjoint train/test indices from a seeded shuffle."""
    order = substream(seed, "probe-split").permutation(n)
    n_test = max(1, int(round(n * test_fraction)))
    return order[n_test:], order[:n_test]


def probe_sweep(
    model: FrameDiT,
    videos,
    layers,
    seed: int = 0,
    test_fraction: float = 0.25,
    epochs: int = PROBE_EPOCHS,
) -> ProbeReport:
    """Probe every requested layer and collect accuracies into a report."""
    layers = list(layers)
    if not layers:
        raise DomainError("need at least one layer")
    labels = np.array([v.label for v in videos], dtype=np.intp)
    train_idx, test_idx = split_indices(len(videos), test_fraction, seed)
    feats = extract_layer_features(model, videos, layers)
    report = ProbeReport(n_train=len(train_idx), n_test=len(test_idx), epochs=epochs, seed=seed)
    for layer in layers:
        acc, train_acc = train_probe(feats[layer], labels, train_idx, test_idx, epochs=epochs)
        report.entries.append(ProbeEntry(layer, acc, train_acc))
    return report

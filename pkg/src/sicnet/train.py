"""Desk-scale training loop: SGD with momentum, metrics logging, checkpoints.

The update rule is classical momentum:

    v <- momentum * v - lr * grad        w <- w + v

with a step learning-rate schedule (divide by a fixed factor every N epochs).
Runs are deterministic for a fixed config: batch order, dropout masks and
initialization all derive from the seed.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .basic import softmax_cross_entropy, softmax_cross_entropy_backward
from .data import Dataset, batches
from .checkpoint import save_checkpoint
from .network import Network

METRICS_HEADER = ("epoch", "split", "loss", "top1", "top5")


@dataclass
class TrainConfig:
    lr: float = 0.1
    lr_decay_every: int = 8  # epochs between /lr_decay_factor steps
    lr_decay_factor: float = 10.0
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 100
    epochs: int = 20
    dropout: float | None = None  # overrides the model's dropout rates when set
    seed: int = 0
    precision: str = "single"
    min_epochs: int = 1
    stop_at_accuracy: float | None = None  # early stop once train top-1 reaches this

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")

    def lr_at(self, epoch: int) -> float:
        return self.lr / self.lr_decay_factor ** (epoch // self.lr_decay_every)


@dataclass
class EpochMetrics:
    epoch: int
    split: str
    loss: float
    top1: float  # error rates in [0, 1]
    top5: float


@dataclass
class TrainState:
    network: Network
    velocities: dict[str, np.ndarray]
    epoch: int
    seed: int


@dataclass
class TrainResult:
    state: TrainState
    history: list[EpochMetrics] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def train_losses(self) -> list[float]:
        return [m.loss for m in self.history if m.split == "train"]

    @property
    def final_train_accuracy(self) -> float:
        train = [m for m in self.history if m.split == "train"]
        return 1.0 - train[-1].top1 if train else 0.0


def sgd_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    velocities: dict[str, np.ndarray],
    lr: float,
    momentum: float,
    weight_decay: float = 0.0,
) -> None:
    """In-place momentum update of every parameter array."""
    for key, w in params.items():
        g = grads[key]
        if g.shape != w.shape:
            raise ValueError(f"gradient shape mismatch for {key}")
        if weight_decay:
            g = g + weight_decay * w
        v = velocities.get(key)
        if v is None:
            v = np.zeros_like(w)
            velocities[key] = v
        v *= momentum
        v -= lr * g.astype(w.dtype, copy=False)
        w += v


def topk_hits(logits: np.ndarray, labels: np.ndarray, k: int) -> int:
    top = np.argpartition(-logits, min(k, logits.shape[1] - 1), axis=1)[:, :k]
    return int((top == labels[:, None]).any(axis=1).sum())


def _append_metrics(path, rows: list[EpochMetrics], write_header: bool) -> None:
    with open(path, "a", newline="") as f:
        writer = csv.writer(f)
        if write_header:
            writer.writerow(METRICS_HEADER)
        for m in rows:
            writer.writerow([m.epoch, m.split, f"{m.loss:.6f}", f"{m.top1:.6f}", f"{m.top5:.6f}"])


def train(
    network: Network,
    dataset: Dataset,
    config: TrainConfig,
    eval_dataset: Dataset | None = None,
    checkpoint_dir=None,
    metrics_path=None,
    verbose: bool = False,
) -> TrainResult:
    """Run SGD epochs; returns per-epoch metrics (error rates, mean loss).

    Train metrics are accumulated on the fly over the epoch's minibatches.
    Early stopping triggers after `min_epochs` once the train top-1 accuracy
    reaches `stop_at_accuracy`.
    """
    rng = np.random.default_rng((config.seed, 0xB47C4))
    if config.dropout is not None:
        from .network import DropoutLayer

        for layer in network.layers:
            if isinstance(layer, DropoutLayer):
                layer.rate = config.dropout
    velocities: dict[str, np.ndarray] = {}
    result = TrainResult(TrainState(network, velocities, 0, config.seed))
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
    started = time.time()
    wrote_header = False

    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        total_loss = 0.0
        hits1 = hits5 = seen = 0
        for x, labels in batches(dataset, config.batch_size, rng):
            logits = network.forward(x, train_mode=True)
            loss = softmax_cross_entropy(logits, labels)
            network.backward(softmax_cross_entropy_backward(logits, labels))
            sgd_step(
                network.parameters(), network.gradients(), velocities,
                lr, config.momentum, config.weight_decay,
            )
            n = len(labels)
            total_loss += loss * n
            hits1 += topk_hits(logits, labels, 1)
            hits5 += topk_hits(logits, labels, min(5, network.num_classes))
            seen += n

        rows = [
            EpochMetrics(
                epoch, "train", total_loss / seen, 1.0 - hits1 / seen, 1.0 - hits5 / seen
            )
        ]
        if eval_dataset is not None:
            top1, top5, val_loss = evaluate(network, eval_dataset, config.batch_size)
            rows.append(EpochMetrics(epoch, "val", val_loss, top1, top5))
        result.history.extend(rows)
        result.state.epoch = epoch + 1

        if metrics_path is not None:
            _append_metrics(metrics_path, rows, write_header=not wrote_header)
            wrote_header = True
        if checkpoint_dir is not None:
            save_checkpoint(
                Path(checkpoint_dir) / f"epoch_{epoch:04d}.ckpt",
                network,
                extra={"epoch": epoch, "seed": config.seed},
            )
        if verbose:
            m = rows[0]
            print(
                f"epoch {epoch:3d}  lr {lr:.4f}  loss {m.loss:.4f}  "
                f"top1 err {m.top1:.4f}", flush=True,
            )
        if (
            config.stop_at_accuracy is not None
            and epoch + 1 >= config.min_epochs
            and 1.0 - rows[0].top1 >= config.stop_at_accuracy
        ):
            break

    result.seconds = time.time() - started
    return result


def evaluate(network: Network, dataset: Dataset, batch_size: int = 100) -> tuple[float, float, float]:
    """(top-1 error, top-5 error, mean loss) over a dataset in eval mode."""
    hits1 = hits5 = seen = 0
    total_loss = 0.0
    for x, labels in batches(dataset, batch_size):
        logits = network.forward(x, train_mode=False)
        total_loss += softmax_cross_entropy(logits, labels) * len(labels)
        hits1 += topk_hits(logits, labels, 1)
        hits5 += topk_hits(logits, labels, min(5, network.num_classes))
        seen += len(labels)
    return 1.0 - hits1 / seen, 1.0 - hits5 / seen, total_loss / seen

"""Client datasets: synthetic generation, CSV ingestion, eval splits.

The synthetic task draws one global ground-truth parameter vector and
gives user ``i`` the scaled version ``s_i * w`` with ``s_i`` log-uniform
in ``[1/spread, spread]``.  At ``spread = 1`` every user sees the same
distribution; larger spreads stretch the client-update norm distribution
across orders of magnitude, which is what makes clip adaptation
interesting.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .rng import RngStream, StreamLabel

# Substream codes within the DATA_GEN label.
_GLOBAL_TRUTH = 0
_PER_USER = 1

# Softmax sharpness for synthetic classification; keeps labels mostly
# clean at user scale 1 without saturating gradients.
_LOGIT_GAIN = 3.0


class IngestionError(ValueError):
    """Malformed input data; the message points at the offending line."""


@dataclass
class ClientDataset:
    """One user's examples plus the batch size used for local training."""

    user_id: str
    features: np.ndarray
    targets: np.ndarray
    batch_size: int = 10

    def __post_init__(self) -> None:
        if self.features.ndim != 2:
            raise ValueError(f"features must be 2-d, got shape {self.features.shape}")
        if self.features.shape[0] < 1:
            raise ValueError(f"user {self.user_id!r} has no examples")
        if self.targets.shape[0] != self.features.shape[0]:
            raise ValueError(
                f"user {self.user_id!r}: {self.targets.shape[0]} targets for "
                f"{self.features.shape[0]} feature rows"
            )
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")

    @property
    def num_examples(self) -> int:
        return self.features.shape[0]

    def batches(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        """Contiguous fixed-size batches in storage order; the final batch
        may be short but is never dropped."""
        for start in range(0, self.num_examples, self.batch_size):
            stop = start + self.batch_size
            yield self.features[start:stop], self.targets[start:stop]


def generate_synthetic_task(
    seed: int,
    num_users: int,
    examples_per_user: tuple[int, int] = (10, 30),
    spread: float = 1.0,
    input_dim: int = 10,
    task: str = "regression",
    num_classes: int = 2,
    target_noise: float = 0.1,
    batch_size: int = 10,
) -> list[ClientDataset]:
    """Build a population of users around one global ground truth.

    Every random quantity is keyed by ``seed`` and the user index, so the
    dataset for user ``i`` does not depend on how many other users exist.
    Returns clients in ascending user-id order.
    """
    if num_users < 1:
        raise ValueError(f"num_users must be positive, got {num_users}")
    lo, hi = examples_per_user
    if not 1 <= lo <= hi:
        raise ValueError(f"examples_per_user must satisfy 1 <= lo <= hi, got ({lo}, {hi})")
    if spread < 1.0:
        raise ValueError(f"spread must be at least 1, got {spread}")
    if task not in ("regression", "classification"):
        raise ValueError(f"task must be 'regression' or 'classification', got {task!r}")
    if task == "classification" and num_classes < 2:
        raise ValueError(f"num_classes must be at least 2, got {num_classes}")

    global_gen = RngStream(seed, StreamLabel.DATA_GEN, 0, _GLOBAL_TRUTH).generator()
    if task == "regression":
        truth = global_gen.standard_normal(input_dim) / math.sqrt(input_dim)
    else:
        truth = global_gen.standard_normal((num_classes, input_dim)) / math.sqrt(input_dim)

    log_spread = math.log(spread)
    clients = []
    for i in range(num_users):
        gen = RngStream(seed, StreamLabel.DATA_GEN, i, _PER_USER).generator()
        scale = math.exp(gen.uniform(-log_spread, log_spread)) if spread > 1.0 else 1.0
        count = int(gen.integers(lo, hi + 1))
        features = gen.standard_normal((count, input_dim))
        if task == "regression":
            noise = gen.standard_normal(count)
            targets = features @ (scale * truth) + target_noise * scale * noise
        else:
            logits = _LOGIT_GAIN * (features @ (scale * truth).T)
            shifted = logits - logits.max(axis=1, keepdims=True)
            probs = np.exp(shifted)
            probs /= probs.sum(axis=1, keepdims=True)
            draws = gen.random(count)
            targets = (probs.cumsum(axis=1) < draws[:, None]).sum(axis=1).astype(np.int64)
        clients.append(
            ClientDataset(
                user_id=f"user_{i:05d}", features=features, targets=targets, batch_size=batch_size
            )
        )
    return clients


def split_eval(
    clients: list[ClientDataset], fraction: float = 0.1
) -> tuple[list[ClientDataset], np.ndarray, np.ndarray]:
    """Hold out the trailing ``fraction`` of each user's examples.

    Users too small to contribute a held-out example keep everything in
    the training split.  Returns the trimmed clients plus pooled eval
    features and targets (possibly empty).
    """
    if not 0.0 <= fraction < 1.0:
        raise ValueError(f"fraction must lie in [0, 1), got {fraction}")
    train, held_f, held_t = [], [], []
    for client in clients:
        keep = client.num_examples - int(client.num_examples * fraction)
        if keep == client.num_examples:
            train.append(client)
            continue
        train.append(
            ClientDataset(
                user_id=client.user_id,
                features=client.features[:keep],
                targets=client.targets[:keep],
                batch_size=client.batch_size,
            )
        )
        held_f.append(client.features[keep:])
        held_t.append(client.targets[keep:])
    if held_f:
        return train, np.concatenate(held_f), np.concatenate(held_t)
    width = clients[0].features.shape[1] if clients else 0
    return train, np.zeros((0, width)), np.zeros(0)


def write_task_csv(
    clients: list[ClientDataset],
    path: str,
    user_column: str = "user",
    target_column: str = "target",
) -> None:
    """Write clients as a flat CSV: user id, target, then feature columns.

    Floats use 17 significant digits so a read-back reproduces the exact
    same values.
    """
    if not clients:
        raise ValueError("cannot write an empty client list")
    width = clients[0].features.shape[1]
    integral_targets = clients[0].targets.dtype.kind in "iu"
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow([user_column, target_column] + [f"x{j}" for j in range(width)])
        for client in clients:
            for row, target in zip(client.features, client.targets):
                rendered = str(int(target)) if integral_targets else format(target, ".17g")
                writer.writerow([client.user_id, rendered] + [format(v, ".17g") for v in row])


def ingest_csv(
    path: str,
    user_column: str = "user",
    target_column: str = "target",
    batch_size: int = 10,
) -> list[ClientDataset]:
    """Group a flat CSV into per-user datasets, sorted by user id.

    All non-user, non-target columns are features, in header order.
    Malformed content raises :class:`IngestionError` naming the file line.
    """
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(f"{path}: empty file") from None
        for name in (user_column, target_column):
            if name not in header:
                raise IngestionError(f"{path}: missing column {name!r} in header")
        user_idx = header.index(user_column)
        target_idx = header.index(target_column)
        feature_idx = [j for j in range(len(header)) if j not in (user_idx, target_idx)]
        if not feature_idx:
            raise IngestionError(f"{path}: no feature columns besides "
                                 f"{user_column!r} and {target_column!r}")

        grouped: dict[str, tuple[list[list[float]], list[float]]] = {}
        for line_no, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise IngestionError(
                    f"{path}: line {line_no}: expected {len(header)} fields, got {len(row)}"
                )
            try:
                values = [float(row[j]) for j in feature_idx]
                target = float(row[target_idx])
            except ValueError as exc:
                raise IngestionError(f"{path}: line {line_no}: {exc}") from None
            rows, targets = grouped.setdefault(row[user_idx], ([], []))
            rows.append(values)
            targets.append(target)

    if not grouped:
        raise IngestionError(f"{path}: no data rows")
    return [
        ClientDataset(
            user_id=user,
            features=np.array(rows),
            targets=np.array(targets),
            batch_size=batch_size,
        )
        for user, (rows, targets) in sorted(grouped.items())
    ]

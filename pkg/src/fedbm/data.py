"""Datasets and client partitions.

Provides a Gaussian-blob benchmark with a fixed 7:1:2 split, a Dirichlet
label-skew partitioner, and a small CSV importer for external tables.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class LabeledDataset:
    """Feature matrix (N, d) with integer labels (N,) and a split tag."""

    x: np.ndarray
    y: np.ndarray
    split: str = ""

    def __post_init__(self):
        x = np.ascontiguousarray(self.x, dtype=np.float64)
        y = np.ascontiguousarray(self.y, dtype=np.int64)
        if x.ndim != 2 or y.shape != (x.shape[0],):
            raise ValueError(f"bad dataset shapes: x {x.shape}, y {y.shape}")
        if not np.all(np.isfinite(x)):
            raise ValueError("features contain non-finite values")
        if y.size and y.min() < 0:
            raise ValueError("labels must be non-negative")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return self.x.shape[0]

    def subset(self, indices: np.ndarray, split: str | None = None) -> "LabeledDataset":
        return LabeledDataset(self.x[indices], self.y[indices], split or self.split)


@dataclass(frozen=True)
class PartitionPlan:
    """Per-client index arrays into a training set, all disjoint."""

    client_indices: tuple
    beta: float

    @property
    def num_clients(self) -> int:
        return len(self.client_indices)

    def sizes(self) -> list[int]:
        return [len(ix) for ix in self.client_indices]


def split_dataset(
    x: np.ndarray, y: np.ndarray, rng: np.random.Generator
) -> tuple[LabeledDataset, LabeledDataset, LabeledDataset]:
    """Shuffle and cut into train/val/test at 7:1:2."""
    n = x.shape[0]
    order = rng.permutation(n)
    x, y = x[order], y[order]
    n_train = int(round(0.7 * n))
    n_val = int(round(0.1 * n))
    return (
        LabeledDataset(x[:n_train], y[:n_train], "train"),
        LabeledDataset(x[n_train : n_train + n_val], y[n_train : n_train + n_val], "val"),
        LabeledDataset(x[n_train + n_val :], y[n_train + n_val :], "test"),
    )


def make_synthetic_benchmark(
    num_classes: int,
    input_dim: int,
    per_class: int,
    separation: float,
    seed: int,
) -> tuple[LabeledDataset, LabeledDataset, LabeledDataset]:
    """Gaussian blobs: class k centered at separation * u_k with unit noise.

    The u_k are random unit directions.  With separation 0 all classes share
    one blob and nothing is learnable; large separation makes the task easy.
    """
    if num_classes < 2 or input_dim < 1 or per_class < 1:
        raise ValueError(
            f"invalid benchmark spec: K={num_classes}, d={input_dim}, per_class={per_class}"
        )
    if not np.isfinite(separation) or separation < 0:
        raise ValueError(f"separation must be finite and non-negative, got {separation}")
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((num_classes, input_dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    centers *= separation
    xs = []
    ys = []
    for k in range(num_classes):
        xs.append(centers[k] + rng.standard_normal((per_class, input_dim)))
        ys.append(np.full(per_class, k, dtype=np.int64))
    x = np.concatenate(xs, axis=0)
    y = np.concatenate(ys, axis=0)
    return split_dataset(x, y, rng)


def dirichlet_partition(
    labels: np.ndarray,
    num_clients: int,
    beta: float,
    rng: np.random.Generator,
    max_attempts: int = 100,
) -> PartitionPlan:
    """Label-skew partition: each class is split by Dirichlet(beta) proportions.

    Proportions are drawn as normalized Gamma(beta, 1) variates, one per
    client, independently per class.  If any client ends up empty the whole
    plan is redrawn; after ``max_attempts`` failures an error is raised.
    Smaller beta means more skew.
    """
    y = np.asarray(labels)
    if num_clients < 1:
        raise ValueError(f"num_clients must be positive, got {num_clients}")
    if not np.isfinite(beta) or beta <= 0:
        raise ValueError(f"beta must be positive and finite, got {beta}")
    classes = np.unique(y)
    if y.size == 0:
        raise ValueError("cannot partition an empty label array")
    for _ in range(max_attempts):
        buckets: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
        for k in classes:
            idx = np.flatnonzero(y == k)
            idx = rng.permutation(idx)
            gamma = rng.gamma(shape=beta, scale=1.0, size=num_clients)
            total = gamma.sum()
            if total == 0:  # all draws underflowed; count as a failed attempt
                buckets = None
                break
            props = gamma / total
            cuts = (np.cumsum(props)[:-1] * len(idx)).astype(np.int64)
            for c, part in enumerate(np.split(idx, cuts)):
                buckets[c].append(part)
        if buckets is None:
            continue
        parts = [np.concatenate(b) if b else np.zeros(0, dtype=np.int64) for b in buckets]
        if all(len(p) > 0 for p in parts):
            return PartitionPlan(client_indices=tuple(parts), beta=float(beta))
    raise RuntimeError(
        f"could not produce {num_clients} non-empty partitions in {max_attempts} attempts "
        f"(n={y.size}, beta={beta})"
    )


def load_csv_dataset(path, num_classes: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Read features and integer labels from a CSV table with a header row.

    The column named ``label`` (case-insensitive) holds the labels; if no such
    column exists the last column is used.  Returns (x, y).
    """
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path!s} is empty; a header row is required") from None
        rows = list(reader)
    if not rows:
        raise ValueError(f"{path!s} has a header but no data rows")

    def _numeric(cell: str) -> bool:
        try:
            float(cell)
            return True
        except ValueError:
            return False

    if all(_numeric(c) for c in header):
        raise ValueError(f"{path!s}: first row is numeric; a header row is required")
    lowered = [h.strip().lower() for h in header]
    label_col = lowered.index("label") if "label" in lowered else len(header) - 1
    x_rows = []
    y_rows = []
    for lineno, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise ValueError(f"{path!s}:{lineno}: expected {len(header)} columns, got {len(row)}")
        try:
            label = float(row[label_col])
            feats = [float(v) for i, v in enumerate(row) if i != label_col]
        except ValueError as exc:
            raise ValueError(f"{path!s}:{lineno}: non-numeric value") from exc
        if label != int(label):
            raise ValueError(f"{path!s}:{lineno}: label {label} is not an integer")
        x_rows.append(feats)
        y_rows.append(int(label))
    x = np.asarray(x_rows, dtype=np.float64)
    y = np.asarray(y_rows, dtype=np.int64)
    if y.min() < 0:
        raise ValueError("labels must be non-negative")
    if num_classes is not None and y.max() >= num_classes:
        raise ValueError(f"label {y.max()} out of range for {num_classes} classes")
    return x, y

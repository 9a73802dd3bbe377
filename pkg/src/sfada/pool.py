"""Labeled/unlabeled partition of the target pool."""
from __future__ import annotations

import numpy as np


class PoolStateError(RuntimeError):
    pass


class TargetPool:
    """Target samples keyed by id, split into labeled and unlabeled parts.

    Labels are only stored for ids that went through :meth:`label`.
    """

    def __init__(self, ids, features):
        self.ids = np.asarray(ids, dtype=np.int64)
        self.features = np.asarray(features, dtype=np.float64)
        if self.features.shape[0] != self.ids.size:
            raise ValueError("features must have one row per id")
        self._row = {int(i): k for k, i in enumerate(self.ids)}
        if len(self._row) != self.ids.size:
            raise ValueError("pool ids must be unique")
        self.labels: dict[int, int] = {}
        self.round = 0
        self.history: list[list[int]] = []

    def __len__(self):
        return self.ids.size

    @property
    def labeled_ids(self) -> np.ndarray:
        return np.array(sorted(self.labels), dtype=np.int64)

    @property
    def unlabeled_ids(self) -> np.ndarray:
        mask = np.array([int(i) not in self.labels for i in self.ids], dtype=bool)
        return self.ids[mask]

    def rows(self, ids) -> np.ndarray:
        return np.array([self._row[int(i)] for i in ids], dtype=np.int64)

    def x(self, ids) -> np.ndarray:
        return self.features[self.rows(ids)]

    def y(self, ids) -> np.ndarray:
        return np.array([self.labels[int(i)] for i in ids], dtype=np.int64)

    def label(self, ids, oracle) -> None:
        """Move ``ids`` to the labeled side, asking ``oracle`` for each label."""
        ids = [int(i) for i in ids]
        for i in ids:
            if i not in self._row:
                raise PoolStateError(f"id {i} is not in the pool")
            if i in self.labels:
                raise PoolStateError(f"id {i} is already labeled")
        if len(set(ids)) != len(ids):
            raise PoolStateError("duplicate ids in one query")
        for i in ids:
            self.labels[i] = int(oracle[i])
        self.history.append(ids)
        self.round += 1

    def check_partition(self) -> None:
        lab = set(self.labels)
        unl = set(int(i) for i in self.unlabeled_ids)
        if lab & unl or (lab | unl) != set(int(i) for i in self.ids):
            raise PoolStateError("labeled/unlabeled partition is broken")
        if len(lab) != sum(len(h) for h in self.history):
            raise PoolStateError("labeled count differs from the query history")

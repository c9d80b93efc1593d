"""Shared data containers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DegenerateInputError(ValueError):
    """A resolution level ended up without points."""


@dataclass(frozen=True)
class PointCloud:
    coords: np.ndarray
    raw_features: np.ndarray | None = None

    def __post_init__(self):
        coords = np.array(self.coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 3 or coords.shape[0] < 1:
            raise ValueError(f"coords must be an (N>=1, 3) array, got shape {coords.shape}")
        if not np.isfinite(coords).all():
            raise ValueError("coords must be finite")
        coords.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        if self.raw_features is not None:
            feats = np.array(self.raw_features, dtype=np.float64)
            if feats.ndim == 1:
                feats = feats[:, None]
            if feats.shape[0] != coords.shape[0]:
                raise ValueError(
                    f"raw_features has {feats.shape[0]} rows for {coords.shape[0]} points")
            if feats.shape[1] == 0:
                feats = None
            else:
                feats.setflags(write=False)
            object.__setattr__(self, "raw_features", feats)

    def __len__(self) -> int:
        return self.coords.shape[0]

    @property
    def num_raw_channels(self) -> int:
        return 0 if self.raw_features is None else self.raw_features.shape[1]

    def input_features(self) -> np.ndarray:
        """xyz followed by any raw per-point channels."""
        if self.raw_features is None:
            return np.array(self.coords)
        return np.concatenate([self.coords, self.raw_features], axis=1)

    def permuted(self, perm) -> "PointCloud":
        perm = np.asarray(perm)
        feats = None if self.raw_features is None else self.raw_features[perm]
        return PointCloud(self.coords[perm], feats)


@dataclass(frozen=True)
class FeatureMatrix:
    data: np.ndarray
    scale_id: int

    def __post_init__(self):
        if not 0 <= self.scale_id <= 4:
            raise ValueError(f"scale_id must lie in 0..4, got {self.scale_id}")

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class LabelOutput:
    logits: FeatureMatrix
    labels: np.ndarray

    @classmethod
    def from_logits(cls, logits: np.ndarray) -> "LabelOutput":
        # np.argmax returns the first maximum, i.e. the lowest class id on ties
        return cls(FeatureMatrix(logits, 0), np.argmax(logits, axis=1).astype(np.int64))

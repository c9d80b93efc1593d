"""Text point-cloud reader and label/logit writers."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .core import PointCloud


class CloudParseError(ValueError):
    pass


def parse_cloud(text: str) -> PointCloud:
    """``x y z [f1 f2 ...]`` per line; ``#`` starts a comment."""
    rows = []
    width = None
    first_line = None
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0]
        if not body.strip():
            continue
        values = []
        col = 0
        for tok in body.split():
            col = body.index(tok, col)
            try:
                values.append(float(tok))
            except ValueError:
                raise CloudParseError(
                    f"line {lineno}, column {col + 1}: non-numeric token {tok!r}") from None
            col += len(tok)
        if len(values) < 3:
            raise CloudParseError(f"line {lineno}: expected ≥3 fields, got {len(values)}")
        if width is None:
            width, first_line = len(values), lineno
        elif len(values) != width:
            raise CloudParseError(f"line {lineno}: expected {width} fields (as on line "
                                  f"{first_line}), got {len(values)}")
        rows.append(values)
    if not rows:
        raise CloudParseError("no points in input")
    data = np.array(rows, dtype=np.float64)
    if not np.isfinite(data).all():
        bad = int(np.flatnonzero(~np.isfinite(data).all(axis=1))[0])
        raise CloudParseError(f"point {bad + 1}: non-finite value")
    return PointCloud(data[:, :3], data[:, 3:] if width > 3 else None)


def read_cloud(path) -> PointCloud:
    return parse_cloud(Path(path).read_text())


def format_cloud(cloud: PointCloud) -> str:
    data = cloud.coords
    if cloud.raw_features is not None:
        data = np.hstack([data, cloud.raw_features])
    return "".join(" ".join(repr(float(v)) for v in row) + "\n" for row in data)


def write_cloud(cloud: PointCloud, path) -> None:
    Path(path).write_text(format_cloud(cloud))


def write_labels(labels, path) -> None:
    Path(path).write_text("".join(f"{int(v)}\n" for v in labels))


def read_labels(path) -> np.ndarray:
    return np.array([int(s) for s in Path(path).read_text().split()], dtype=np.int64)


def write_logits(logits: np.ndarray, path) -> None:
    # repr round-trips float64 exactly
    Path(path).write_text("".join(" ".join(repr(float(v)) for v in row) + "\n" for row in logits))


def read_logits(path) -> np.ndarray:
    return np.loadtxt(path, dtype=np.float64, ndmin=2)

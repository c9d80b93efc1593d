"""Seeded synthetic scenes for benchmarks and tests."""

from __future__ import annotations

import numpy as np

from .core import PointCloud


def random_cloud(n: int, seed: int = 0, extent=(1.0, 1.0, 1.0)) -> PointCloud:
    """Uniform points in a box."""
    rng = np.random.default_rng(seed)
    return PointCloud(rng.random((n, 3)) * np.asarray(extent, dtype=np.float64))


def synthetic_room(n: int, seed: int = 0, size=(8.0, 8.0, 3.0), with_color: bool = False) -> PointCloud:
    """Points on the floor, ceiling and walls of a box room plus a few box-shaped objects.

    Surfaces are sampled in proportion to their area, which gives indoor-scan
    like densities (about 0.05 m spacing for 100k points in the default room).
    """
    rng = np.random.default_rng(seed)
    sx, sy, sz = size
    faces = [  # (origin, u axis, v axis)
        ((0, 0, 0), (sx, 0, 0), (0, sy, 0)),
        ((0, 0, sz), (sx, 0, 0), (0, sy, 0)),
        ((0, 0, 0), (sx, 0, 0), (0, 0, sz)),
        ((0, sy, 0), (sx, 0, 0), (0, 0, sz)),
        ((0, 0, 0), (0, sy, 0), (0, 0, sz)),
        ((sx, 0, 0), (0, sy, 0), (0, 0, sz)),
    ]
    for _ in range(6):
        lo = rng.random(3) * [sx - 1.5, sy - 1.5, 0] + [0.2, 0.2, 0]
        dims = rng.random(3) * [1.0, 1.0, 1.0] + [0.3, 0.3, 0.4]
        ox, oy, oz = lo
        dx, dy, dz = dims
        faces += [((ox, oy, oz + dz), (dx, 0, 0), (0, dy, 0)),
                  ((ox, oy, oz), (dx, 0, 0), (0, 0, dz)),
                  ((ox, oy + dy, oz), (dx, 0, 0), (0, 0, dz)),
                  ((ox, oy, oz), (0, dy, 0), (0, 0, dz)),
                  ((ox + dx, oy, oz), (0, dy, 0), (0, 0, dz))]
    origin = np.array([f[0] for f in faces], dtype=np.float64)
    u = np.array([f[1] for f in faces], dtype=np.float64)
    v = np.array([f[2] for f in faces], dtype=np.float64)
    area = np.linalg.norm(np.cross(u, v), axis=1)
    face = rng.choice(len(faces), size=n, p=area / area.sum())
    st = rng.random((n, 2))
    coords = origin[face] + st[:, :1] * u[face] + st[:, 1:] * v[face]
    coords += rng.normal(scale=0.005, size=coords.shape)
    colors = None
    if with_color:
        palette = rng.random((len(faces), 3))
        colors = np.clip(palette[face] + rng.normal(scale=0.05, size=(n, 3)), 0, 1)
    return PointCloud(coords, colors)

"""Synthetic "houses" with a known generating rule, for desk-scale experiments."""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from typing import Sequence

import numpy as np

from .voxels import VoxelGrid


def parity_block(x: int, y: int, z: int, n_categories: int = 4) -> int:
    """Block id (1-based) determined by coordinate parity."""
    if n_categories == 4:
        return 1 + (x % 2) + 2 * (y % 2)
    if n_categories == 8:
        return 1 + (x % 2) + 2 * (y % 2) + 4 * (z % 2)
    raise ValueError("parity rule defined for 4 or 8 categories")


def house_shell(rng: np.random.Generator, dim: int, max_blocks: int) -> list[tuple[int, int, int]]:
    """Floor plus four walls of a random box, with a door and windows cut until it fits."""
    w, d = rng.integers(3, min(6, dim) + 1, size=2)
    h = rng.integers(2, min(5, dim) + 1)
    ox, oz = rng.integers(0, dim - w + 1), rng.integers(0, dim - d + 1)
    oy = rng.integers(0, dim - h + 1)
    cells = set()
    for x in range(w):
        for z in range(d):
            cells.add((x, 0, z))
            if x in (0, w - 1) or z in (0, d - 1):
                cells.update((x, y, z) for y in range(1, h))
    door_x = int(rng.integers(1, w - 1))
    cells.discard((door_x, 1, 0))
    cells = sorted(cells)
    walls = [c for c in cells if c[1] > 0]
    excess = len(cells) - max_blocks
    if excess > 0:
        drop = set(map(tuple, rng.permutation(walls)[:excess].tolist()))
        cells = [c for c in cells if c not in drop]
    return [(int(x + ox), int(y + oy), int(z + oz)) for x, y, z in cells]


def make_parity_houses(
    n: int = 512, dim: int = 8, max_blocks: int = 64, n_categories: int = 4, seed: int = 0
) -> list[VoxelGrid]:
    rng = np.random.default_rng(seed)
    grids = []
    for _ in range(n):
        coords = house_shell(rng, dim, max_blocks)
        grids.append(VoxelGrid(dim, {c: parity_block(*c, n_categories) for c in coords}))
    return grids


def follows_rule(grid: VoxelGrid, n_categories: int = 4) -> np.ndarray:
    return np.array([b == parity_block(*c, n_categories) for c, b in grid.cells.items()], dtype=bool)


def conditional_entropy(grids: Sequence[VoxelGrid]) -> float:
    """Empirical H(category | coordinate) in nats per occupied voxel, by counting."""
    table: dict = defaultdict(Counter)
    for g in grids:
        for c, b in g.cells.items():
            table[c][b] += 1
    total = sum(sum(cnt.values()) for cnt in table.values())
    h = 0.0
    for cnt in table.values():
        n = sum(cnt.values())
        for m in cnt.values():
            h -= m / total * math.log(m / n)
    return h

"""Seeded random mask generator shared by the mask tests."""

import numpy as np


def random_mask(rng: np.random.Generator, size: int = 64) -> np.ndarray:
    """A few rectangles and discs, some speckle, and the odd punched hole."""
    m = np.zeros((size, size), dtype=bool)
    yy, xx = np.mgrid[:size, :size]
    for _ in range(int(rng.integers(0, 5))):
        if rng.random() < 0.5:
            y0, x0 = rng.integers(0, size, 2)
            h, w = rng.integers(2, size // 2, 2)
            m[y0 : y0 + h, x0 : x0 + w] = True
        else:
            cy, cx = rng.integers(0, size, 2)
            r = rng.integers(2, size // 3)
            m |= (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    m ^= rng.random((size, size)) < rng.choice([0.0, 0.01, 0.05])
    if rng.random() < 0.3:
        cy, cx = rng.integers(0, size, 2)
        m[cy : cy + 8, cx : cx + 8] = False
    return m


def ring_grid(count: int = 16, wall: int = 6, gap: int = 10, cell: int = 30) -> np.ndarray:
    """``count`` separate square rings on a 4-wide grid.

    Walls survive a 5x5 opening and gaps survive a 5x5 closing.
    """
    per_row = 4
    rows = -(-count // per_row)
    m = np.zeros((gap + rows * (cell + gap), gap + per_row * (cell + gap)), dtype=bool)
    for i in range(count):
        r, c = divmod(i, per_row)
        y, x = gap + r * (cell + gap), gap + c * (cell + gap)
        m[y : y + cell, x : x + cell] = True
        m[y + wall : y + cell - wall, x + wall : x + cell - wall] = False
    return m

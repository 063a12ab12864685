"""Block Data Layout container and test-matrix generators.

A :class:`TileMatrix` stores a ``p*b x q*b`` matrix as ``p*q`` contiguous
``b x b`` tiles. Each tile is column-major and the tiles themselves are
ordered column-major over the ``(i, j)`` grid, so tile ``(i, j)`` starts at
offset ``(j*p + i) * b*b`` of the flat buffer. Tile indices are 0-based.

Dense matrices are plain 2-D ``float64`` numpy arrays.
"""

from __future__ import annotations

import numpy as np


class DimensionError(ValueError):
    """Matrix dimensions are not a multiple of the tile size."""


class TileMatrix:
    """A ``p x q`` grid of ``b x b`` tiles held in one flat buffer."""

    def __init__(self, p: int, q: int, b: int, buf: np.ndarray | None = None):
        if p < 1 or q < 1 or b < 1:
            raise ValueError(f"p, q, b must be >= 1 (got p={p}, q={q}, b={b})")
        self.p, self.q, self.b = p, q, b
        size = p * q * b * b
        if buf is None:
            buf = np.zeros(size)
        elif buf.shape != (size,) or buf.dtype != np.float64:
            raise ValueError(f"buffer must be float64 of length {size}")
        self.buf = buf
        # views are created once so kernels always see the same memory
        self._tiles = [
            [self._make_view(i, j) for j in range(q)] for i in range(p)
        ]

    def _make_view(self, i: int, j: int) -> np.ndarray:
        bb = self.b * self.b
        off = (j * self.p + i) * bb
        return self.buf[off:off + bb].reshape((self.b, self.b), order="F")

    @property
    def m(self) -> int:
        return self.p * self.b

    @property
    def n(self) -> int:
        return self.q * self.b

    @property
    def shape(self) -> tuple[int, int]:
        return self.m, self.n

    def tile(self, i: int, j: int) -> np.ndarray:
        """Writable ``b x b`` view of tile ``(i, j)``."""
        return self._tiles[i][j]

    def __getitem__(self, rc: tuple[int, int]) -> float:
        r, c = rc
        b = self.b
        return float(self._tiles[r // b][c // b][r % b, c % b])

    def copy(self) -> "TileMatrix":
        return TileMatrix(self.p, self.q, self.b, self.buf.copy())

    @classmethod
    def from_dense(cls, d: np.ndarray, b: int) -> "TileMatrix":
        d = np.asarray(d, dtype=np.float64)
        if d.ndim != 2:
            raise ValueError("expected a 2-D array")
        m, n = d.shape
        if b < 1 or m % b or n % b:
            raise DimensionError(
                f"tile size {b} does not divide matrix dimensions {m}x{n}"
            )
        p, q = m // b, n // b
        # (m, n) -> (p, b, q, b) -> tile grid column-major, tile content column-major
        blocks = d.reshape(p, b, q, b).transpose(2, 0, 3, 1)
        return cls(p, q, b, np.ascontiguousarray(blocks).reshape(-1))

    def to_dense(self) -> np.ndarray:
        p, q, b = self.p, self.q, self.b
        blocks = self.buf.reshape(q, p, b, b).transpose(1, 3, 0, 2)
        return np.ascontiguousarray(blocks.reshape(p * b, q * b))

    def __repr__(self) -> str:
        return f"TileMatrix(p={self.p}, q={self.q}, b={self.b})"


def from_dense(d: np.ndarray, b: int) -> TileMatrix:
    return TileMatrix.from_dense(d, b)


def to_dense(t: TileMatrix) -> np.ndarray:
    return t.to_dense()


def inf_norm(d: np.ndarray) -> float:
    """Maximum absolute row sum."""
    d = np.asarray(d)
    if d.size == 0:
        return 0.0
    return float(np.abs(d).sum(axis=1).max())


def _normal_stream(count: int, seed: int) -> np.ndarray:
    # PCG64 uniforms in [0, 1) fed through the Box-Muller transform.
    # Both halves of each pair are used: z0 then z1.
    pairs = (count + 1) // 2
    u = np.random.Generator(np.random.PCG64(seed)).random(2 * pairs)
    u1 = 1.0 - u[0::2]  # (0, 1], keeps log finite
    u2 = u[1::2]
    radius = np.sqrt(-2.0 * np.log(u1))
    angle = 2.0 * np.pi * u2
    z = np.empty(2 * pairs)
    z[0::2] = radius * np.cos(angle)
    z[1::2] = radius * np.sin(angle)
    return z[:count]


def gen_random(m: int, n: int, seed: int) -> np.ndarray:
    """``m x n`` matrix of i.i.d. standard normal entries, filled column by column."""
    if m < 1 or n < 1:
        raise ValueError("m and n must be >= 1")
    return _normal_stream(m * n, seed).reshape((n, m)).T.copy()


def gen_spd(n: int, seed: int) -> np.ndarray:
    """Symmetric positive definite ``(G + G^T)/2 + n*I``."""
    g = gen_random(n, n, seed)
    a = (g + g.T) / 2.0
    a[np.diag_indices(n)] += n
    return a

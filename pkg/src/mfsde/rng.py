"""Counter-based Gaussian noise keyed by (seed, path, step, component).

Every standard normal has a fixed position in a Philox4x64 stream keyed by the
experiment seed, so any block of paths can be generated independently and the
result never depends on how the paths are split across workers.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

_LANES = 4  # uint64 words per Philox counter increment
_TWO_PI = 2.0 * np.pi
_INV_2_53 = 1.0 / (1 << 53)


def _seed_key(seed: int) -> int:
    seed = int(seed)
    if seed < 0 or seed >= 1 << 64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return seed


def _raw_block(seed: int, start: int, count: int) -> np.ndarray:
    """uint64 words [start, start + count) of the stream for ``seed``."""
    bitgen = np.random.Philox(key=_seed_key(seed))
    block, lane = divmod(start, _LANES)
    if block:
        bitgen.advance(block)
    raw = bitgen.random_raw(lane + count)
    return raw[lane:]


def standard_normals(seed: int, start: int, count: int) -> np.ndarray:
    """Normals number ``start .. start + count - 1`` of the stream for ``seed``.

    Normal ``j`` is built by Box-Muller from uint64 words ``2*(j//2)`` and
    ``2*(j//2) + 1``; even ``j`` takes the cosine branch, odd ``j`` the sine.
    """
    if count <= 0:
        return np.empty(0)
    first_pair = start // 2
    last_pair = (start + count - 1) // 2
    raw = _raw_block(seed, 2 * first_pair, 2 * (last_pair - first_pair + 1))
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * _INV_2_53
    radius = np.sqrt(-2.0 * np.log(u[0::2]))
    angle = _TWO_PI * u[1::2]
    out = np.empty(2 * radius.size)
    out[0::2] = radius * np.cos(angle)
    out[1::2] = radius * np.sin(angle)
    offset = start - 2 * first_pair
    return out[offset:offset + count]


def brownian_increments(
    seed: int,
    n_paths: int,
    n_steps: int,
    dim: int,
    dt: float,
    workers: int = 1,
    chunk: int = 8192,
) -> np.ndarray:
    """Brownian increments of shape ``(n_steps, n_paths, dim)``.

    The increment of path ``i``, step ``k``, component ``c`` is
    ``sqrt(dt)`` times normal number ``(i * n_steps + k) * dim + c``.
    """
    if n_paths < 1 or n_steps < 1 or dim < 1:
        raise ValueError("n_paths, n_steps and dim must be positive")
    per_path = n_steps * dim
    out = np.empty((n_steps, n_paths, dim))
    scale = np.sqrt(dt)

    def fill(lo: int) -> None:
        hi = min(lo + chunk, n_paths)
        z = standard_normals(seed, lo * per_path, (hi - lo) * per_path)
        out[:, lo:hi, :] = scale * z.reshape(hi - lo, n_steps, dim).transpose(1, 0, 2)

    starts = range(0, n_paths, chunk)
    if workers <= 1:
        for lo in starts:
            fill(lo)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(fill, starts))
    return out


def projection_directions(seed: int, count: int, dim: int) -> np.ndarray:
    """``count`` unit vectors in R^dim, deterministic in ``seed``."""
    z = standard_normals(seed, 0, count * dim).reshape(count, dim)
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    return z / np.where(norms > 0, norms, 1.0)

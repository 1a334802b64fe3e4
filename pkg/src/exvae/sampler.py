"""Sampling from a trained model: the three-step exemplar process, exemplar
conditioning, chained generation and latent interpolation, plus image grids."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import model
from .data import LabeledDataset, write_idx
from .errors import ContractError

NOISE_SOURCE = -1


@dataclass
class SampleBatch:
    images: np.ndarray        # decoder means, one row per sample
    sources: np.ndarray       # exemplar index per sample, NOISE_SOURCE when not from the pool
    steps: np.ndarray         # chain step (0 outside iterative mode)
    latents: np.ndarray | None = None


def _exemplar_latents(params, x: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """z ~ N(mu(x), sigma^2 I); only the shared mean head and sigma^2 are read."""
    mu = model.prior_encode(params, np.atleast_2d(x)).astype(np.float64)
    return mu + math.sqrt(model.sigma2(params)) * eps


def generate(params, exemplar_pool: np.ndarray, n: int, rng: np.random.Generator) -> SampleBatch:
    pool = np.atleast_2d(np.asarray(exemplar_pool))
    if len(pool) == 0 or np.asarray(exemplar_pool).size == 0:
        raise ContractError("generate needs a non-empty exemplar pool")
    d_z = model.dims(params)[1]
    src = rng.integers(0, len(pool), size=n)
    z = _exemplar_latents(params, pool[src], rng.standard_normal((n, d_z)))
    return SampleBatch(model.decode(params, z), src, np.zeros(n, dtype=np.int64), z)


def conditioned(params, exemplar_x: np.ndarray, n: int, rng: np.random.Generator | None,
                eps: np.ndarray | None = None) -> SampleBatch:
    """``n`` draws around one exemplar.  Pass ``eps`` to fix the noise."""
    d_z = model.dims(params)[1]
    if eps is None:
        eps = rng.standard_normal((n, d_z))
    eps = np.atleast_2d(eps)
    z = _exemplar_latents(params, exemplar_x, eps)
    return SampleBatch(model.decode(params, z), np.zeros(len(z), dtype=np.int64),
                       np.zeros(len(z), dtype=np.int64), z)


def iterate(params, seed_image: np.ndarray | None, steps: int, rng: np.random.Generator) -> SampleBatch:
    """Chain x^{t+1} ~ conditioned(x^t); ``None`` seeds the chain with uniform noise."""
    if steps < 1:
        raise ContractError(f"steps must be at least 1, got {steps}")
    d_x = model.dims(params)[0]
    x = rng.random(d_x) if seed_image is None else np.asarray(seed_image, dtype=np.float64)
    images, latents = [], []
    for _ in range(steps):
        out = conditioned(params, x, 1, rng)
        x = out.images[0]
        images.append(x)
        latents.append(out.latents[0])
    return SampleBatch(np.array(images), np.full(steps, NOISE_SOURCE if seed_image is None else 0),
                       np.arange(1, steps + 1), np.array(latents))


def interpolate(params, x_a: np.ndarray, x_b: np.ndarray, steps: int) -> SampleBatch:
    """Decode evenly spaced points on the segment between the two encoder means."""
    if steps < 2:
        raise ContractError(f"steps must be at least 2, got {steps}")
    mu = model.prior_encode(params, np.stack([x_a, x_b])).astype(np.float64)
    t = np.linspace(0.0, 1.0, steps)[:, None]
    z = (1.0 - t) * mu[0] + t * mu[1]
    return SampleBatch(model.decode(params, z), np.zeros(steps, dtype=np.int64), np.arange(steps), z)


def to_grid(images: np.ndarray, rows: int, cols: int, shape=(28, 28), pad: int = 1) -> np.ndarray:
    """Tile up to rows*cols images into one uint8 array; empty cells stay black."""
    images = np.atleast_2d(images)
    if len(images) > rows * cols:
        raise ContractError(f"{len(images)} images do not fit a {rows}x{cols} grid")
    h, w = shape
    grid = np.zeros((rows * (h + pad) + pad, cols * (w + pad) + pad), dtype=np.uint8)
    pix = np.rint(np.clip(images, 0.0, 1.0) * 255).astype(np.uint8).reshape(-1, h, w)
    for k, im in enumerate(pix):
        r, c = divmod(k, cols)
        grid[pad + r * (h + pad):pad + r * (h + pad) + h, pad + c * (w + pad):pad + c * (w + pad) + w] = im
    return grid


def pgm_bytes(grid: np.ndarray) -> bytes:
    h, w = grid.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(grid, dtype=np.uint8).tobytes()


def write_pgm(path, images: np.ndarray, rows: int, cols: int, shape=(28, 28)) -> None:
    with open(path, "wb") as fh:
        fh.write(pgm_bytes(to_grid(images, rows, cols, shape)))


def write_images_idx(path, images: np.ndarray, shape=(28, 28)) -> None:
    # values are quantized to 8 bits like any IDX image file
    q = np.rint(np.clip(images, 0.0, 1.0) * 255) / 255.0
    write_idx(LabeledDataset(q, None, "samples", shape), path)

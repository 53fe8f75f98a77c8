"""Ray sampling and volume-rendering compositing.

Reference implementations here are numpy/float64 and work on one ray; the
``*_torch`` variants are batched (rays x samples) for training and compute the
exponentials in float64 before casting back.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float
    view: int = -1
    pixel: tuple = (-1, -1)

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.direction = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-6:
            raise ValueError("ray direction must be unit length")
        if not self.near < self.far:
            raise ValueError(f"need near < far, got {self.near} >= {self.far}")


@dataclass
class RaySamples:
    t: np.ndarray  # (N,) distances along the ray, increasing
    positions: np.ndarray  # (N, 3)
    deltas: np.ndarray  # (N,)
    densities: np.ndarray | None = None
    values: np.ndarray | None = None  # (N, D)


def sample_ray(ray: Ray, n: int, rng: np.random.Generator | None = None) -> RaySamples:
    """Stratified samples in [near, far]; bin midpoints when ``rng`` is None."""
    if n < 1:
        raise ValueError("need at least one sample per ray")
    edges = np.linspace(ray.near, ray.far, n + 1)
    u = 0.5 if rng is None else rng.random(n)
    t = edges[:-1] + u * (edges[1:] - edges[:-1])
    deltas = np.empty(n)
    deltas[:-1] = np.diff(t)
    deltas[-1] = (ray.far - ray.near) / n
    return RaySamples(t, ray.origin + t[:, None] * ray.direction, deltas)


def composite_weights(sigma, delta):
    """w_i = T_i (1 - exp(-sigma_i delta_i)),  T_i = exp(-sum_{j<i} sigma_j delta_j)."""
    sigma = np.asarray(sigma, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if np.any(sigma < 0):
        raise ValueError("densities must be non-negative")
    tau = sigma * delta
    trans = np.exp(-np.concatenate([np.zeros(tau.shape[:-1] + (1,)), np.cumsum(tau, axis=-1)[..., :-1]], axis=-1))
    w = trans * -np.expm1(-tau)
    # rounding can push the sum a few ulps past 1; shrink those rays until it is not
    for k in range(1, 9):
        over = w.sum(axis=-1, keepdims=True) > 1.0
        if not over.any():
            break
        w = np.where(over, w * (1.0 - k * np.finfo(np.float64).eps), w)
    return w, trans


def render_along_ray(samples: RaySamples):
    """Returns (value, accumulated opacity, expected depth)."""
    w, _ = composite_weights(samples.densities, samples.deltas)
    value = w @ np.asarray(samples.values, dtype=np.float64).reshape(len(w), -1)
    return value, float(w.sum()), float(w @ samples.t)


def stratified_t_torch(near, far, n: int, generator: torch.Generator | None = None, jitter: bool = True):
    """(R, n) sample distances and deltas between per-ray near/far."""
    r = near.shape[0]
    u = torch.rand(r, n, generator=generator, dtype=near.dtype) if jitter else torch.full((r, n), 0.5, dtype=near.dtype)
    step = ((far - near) / n)[:, None]
    t = near[:, None] + (torch.arange(n, dtype=near.dtype)[None] + u) * step
    deltas = torch.cat([t[:, 1:] - t[:, :-1], step], dim=1)
    return t, deltas


def composite_weights_torch(sigma: torch.Tensor, delta: torch.Tensor) -> torch.Tensor:
    tau = (sigma * delta).double()
    excl = torch.cumsum(tau, dim=-1) - tau
    w = torch.exp(-excl) * -torch.expm1(-tau)
    return w.to(sigma.dtype)

"""Repulsion-based diversity guidance over a group of latent trajectories.

At each denoising step the group's bandwidth is the median pairwise distance
of the current latents; each latent is pushed by a kernel force

    F(z_n) = sum_{n' != n} 2·(1 - d^2/(2·sigma^2))·exp(-d^2/(2·sigma^2))·(z_n - z_n')

scaled by gamma_max·(t/K), which anneals to zero as denoising finishes. The
coefficient changes sign for pairs farther than sqrt(2)·sigma, so very distant
pairs interact weakly (and slightly attractively) — implemented exactly as
written. Pairwise antisymmetry makes the group centroid invariant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class GuidanceConfig:
    gamma_max: float = 0.8
    enabled: bool = True

    def __post_init__(self):
        if self.gamma_max < 0:
            raise ValueError("gamma_max must be >= 0")


def _flatten_group(latents) -> np.ndarray:
    arr = np.asarray(latents, dtype=np.float64)
    return arr.reshape(arr.shape[0], -1)


def bandwidth(latents) -> float | None:
    """Median pairwise Euclidean distance over flattened blocks.

    Returns None for groups smaller than two (guidance is skipped); an
    even pair count uses the mean of the two central values.
    """
    flat = _flatten_group(latents)
    n = flat.shape[0]
    if n < 2:
        return None
    iu = np.triu_indices(n, k=1)
    sq = np.sum(flat * flat, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (flat @ flat.T)
    dists = np.sqrt(np.maximum(d2[iu], 0.0))
    return float(np.median(dists))


def _pair_coefficients(flat: np.ndarray, sigma: float) -> np.ndarray:
    """(n, n) matrix of 2·(1 - d^2/(2s^2))·exp(-d^2/(2s^2)), zero diagonal."""
    sq = np.sum(flat * flat, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (flat @ flat.T), 0.0)
    u = d2 / (2.0 * sigma * sigma)
    coef = 2.0 * (1.0 - u) * np.exp(-u)
    np.fill_diagonal(coef, 0.0)
    return coef


def repulsion_force(latents, index: int, sigma: float) -> np.ndarray:
    """Kernel force on the latent at `index`; shaped like one block."""
    arr = np.asarray(latents, dtype=np.float64)
    flat = _flatten_group(arr)
    coef = _pair_coefficients(flat, sigma)[index]
    force = (coef[:, None] * (flat[index][None, :] - flat)).sum(axis=0)
    return force.reshape(arr.shape[1:])


def repulsion_forces(latents, sigma: float) -> np.ndarray:
    """All forces at once; rows match repulsion_force per index."""
    arr = np.asarray(latents, dtype=np.float64)
    flat = _flatten_group(arr)
    coef = _pair_coefficients(flat, sigma)
    # F_n = (sum_n' c_nn')·z_n - sum_n' c_nn'·z_n'
    forces = coef.sum(axis=1)[:, None] * flat - coef @ flat
    return forces.reshape(arr.shape)


def guided_update(base_means, latents, step_t: int, total_steps: int,
                  config: GuidanceConfig) -> tuple[np.ndarray, np.ndarray]:
    """Add gamma_max·(t/K)·F to the group's transition means.

    step_t counts down from total_steps (noisiest) to 0; groups smaller than
    two or with coincident members get zero offsets. Returns (means, offsets).
    """
    if not 0 <= step_t <= total_steps:
        raise ValueError("step index must lie in [0, total_steps]")
    base = np.asarray(base_means, dtype=np.float64)
    offsets = np.zeros_like(base)
    if not config.enabled or step_t == 0:
        return base, offsets
    arr = np.asarray(latents, dtype=np.float64)
    if arr.shape[0] < 2:
        return base, offsets
    sigma = bandwidth(arr)
    if sigma is None or sigma <= 0.0:
        return base, offsets
    gamma = config.gamma_max * (step_t / total_steps)
    offsets = gamma * repulsion_forces(arr, sigma)
    return base + offsets, offsets

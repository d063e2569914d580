"""Procedural two-material (bone / soft tissue) ellipse phantoms."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

from .geometry import ImageGrid


def _ellipse_mask(grid: ImageGrid, cx, cy, a, b, phi):
    """Boolean mask of an ellipse given in mm (center, semi-axes, tilt)."""
    h = grid.pixel_size_mm
    xs = grid.xmin + (np.arange(grid.n_cols) + 0.5) * h
    ys = grid.ymin + (np.arange(grid.n_rows) + 0.5) * h
    X, Y = np.meshgrid(xs, ys)
    c, s = np.cos(phi), np.sin(phi)
    u = (X - cx) * c + (Y - cy) * s
    v = -(X - cx) * s + (Y - cy) * c
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def make_phantom(grid: ImageGrid, seed: int) -> dict:
    """Random ellipse-composite density maps (g/cm^3) for both materials.

    Returns {"soft_tissue": map, "bone": map} on the given grid. The body
    fits inside ~90% of the half field of view so the full fan covers it.
    """
    rng = np.random.default_rng(seed)
    fov = 0.5 * min(grid.n_rows, grid.n_cols) * grid.pixel_size_mm
    soft = np.zeros((grid.n_rows, grid.n_cols))
    bone = np.zeros((grid.n_rows, grid.n_cols))

    body_a = fov * rng.uniform(0.70, 0.88)
    body_b = fov * rng.uniform(0.62, 0.85)
    body_phi = rng.uniform(0, np.pi)
    body = _ellipse_mask(grid, 0.0, 0.0, body_a, body_b, body_phi)
    soft[body] = rng.uniform(0.95, 1.05)

    # soft-tissue texture: a few low-contrast internal ellipses
    for _ in range(rng.integers(2, 5)):
        a = fov * rng.uniform(0.10, 0.35)
        b = fov * rng.uniform(0.10, 0.35)
        cx = rng.uniform(-0.4, 0.4) * body_a
        cy = rng.uniform(-0.4, 0.4) * body_b
        m = _ellipse_mask(grid, cx, cy, a, b, rng.uniform(0, np.pi)) & body
        soft[m] += rng.uniform(-0.15, 0.15)

    # air-like cavity now and then
    if rng.random() < 0.5:
        a = fov * rng.uniform(0.08, 0.2)
        m = _ellipse_mask(grid, rng.uniform(-0.3, 0.3) * body_a,
                          rng.uniform(-0.3, 0.3) * body_b,
                          a, a * rng.uniform(0.6, 1.2),
                          rng.uniform(0, np.pi)) & body
        soft[m] *= rng.uniform(0.1, 0.4)

    # bone inclusions replace soft tissue
    for _ in range(rng.integers(2, 5)):
        a = fov * rng.uniform(0.05, 0.16)
        b = fov * rng.uniform(0.05, 0.16)
        cx = rng.uniform(-0.55, 0.55) * body_a
        cy = rng.uniform(-0.55, 0.55) * body_b
        m = _ellipse_mask(grid, cx, cy, a, b, rng.uniform(0, np.pi)) & body
        bone[m] = rng.uniform(1.6, 1.95)
        soft[m] = 0.0

    # smooth density variation so tissue is not piecewise constant
    field = gaussian_filter(rng.standard_normal(soft.shape),
                            sigma=0.08 * grid.n_rows)
    field /= max(np.abs(field).max(), 1e-12)
    soft[body] *= 1.0 + 0.10 * field[body]

    soft = np.clip(soft, 0.0, None)
    return {"soft_tissue": soft, "bone": bone}


def disk_phantom(grid: ImageGrid, radius_frac: float = 0.3,
                 value: float = 1.0) -> np.ndarray:
    """Uniform centered disk; radius as a fraction of the grid extent."""
    fov = 0.5 * min(grid.n_rows, grid.n_cols) * grid.pixel_size_mm
    r = radius_frac * 2.0 * fov
    m = _ellipse_mask(grid, 0.0, 0.0, r, r, 0.0)
    return np.where(m, value, 0.0)

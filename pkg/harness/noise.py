"""
Regular-octagon disturbance model.
"""

from typing import Optional

import numpy as np

from safe_rl.polytope import FacetPolytope

N_SIDES = 8


def octagon_vertices(circumradius: float) -> np.ndarray:
    """Vertices at angles pi/8 + k pi/4, counter-clockwise."""
    angles = np.pi / N_SIDES + 2.0 * np.pi * np.arange(N_SIDES) / N_SIDES
    return circumradius * np.column_stack([np.cos(angles), np.sin(angles)])


def octagon_facets(circumradius: float) -> FacetPolytope:
    """Facet form: normals at angles k pi/4, offsets R cos(pi/8)."""
    angles = 2.0 * np.pi * np.arange(N_SIDES) / N_SIDES
    normals = np.column_stack([np.cos(angles), np.sin(angles)])
    return FacetPolytope(normals, np.full(N_SIDES, circumradius * np.cos(np.pi / N_SIDES)))


def octagon_sampler(circumradius: float, rng: np.random.Generator,
                    size: Optional[int] = None) -> np.ndarray:
    """Uniform samples over the regular octagon.

    The octagon is fan-triangulated from its center; a triangle is picked with
    probability proportional to its area and a point drawn uniformly inside it.

    Returns:
        Array of shape (2,) when size is None, else (size, 2)
    """
    if circumradius < 0:
        raise ValueError(f"circumradius must be nonnegative, got {circumradius}")
    count = 1 if size is None else size
    if circumradius == 0:
        samples = np.zeros((count, 2))
        return samples[0] if size is None else samples

    corners = octagon_vertices(circumradius)
    nxt = np.roll(corners, -1, axis=0)
    areas = 0.5 * np.abs(corners[:, 0] * nxt[:, 1] - corners[:, 1] * nxt[:, 0])
    picks = rng.choice(N_SIDES, size=count, p=areas / areas.sum())
    r1 = rng.random(count)
    r2 = rng.random(count)
    flip = r1 + r2 > 1.0
    r1[flip], r2[flip] = 1.0 - r1[flip], 1.0 - r2[flip]
    samples = r1[:, None] * corners[picks] + r2[:, None] * nxt[picks]
    return samples[0] if size is None else samples

"""Supervision-frame selection: blur filtering and greedy pose-space coverage."""

from __future__ import annotations

import numpy as np

from .camera import CameraPose, rotation_angle

DEFAULT_BETA = 0.5
FEATURE_FRAMES = 400
BLUR_DISCARD = 0.2

_LAPLACE = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


def blur_score(image) -> float:
    """Variance of the 3x3 Laplacian of the grayscale image (valid region)."""
    img = np.asarray(image, dtype=np.float64)
    gray = img.mean(axis=-1) if img.ndim == 3 else img
    if gray.ndim != 2 or min(gray.shape) < 3:
        raise ValueError(f"blur_score needs an image of at least 3x3, got {img.shape}")
    lap = (gray[:-2, 1:-1] + gray[2:, 1:-1] + gray[1:-1, :-2] + gray[1:-1, 2:] - 4.0 * gray[1:-1, 1:-1])
    return float(lap.var())


def filter_blurred(images, fraction: float = BLUR_DISCARD) -> list:
    """Indices kept after dropping the floor(fraction * N) blurriest images."""
    if not 0.0 <= fraction < 1.0:
        raise ValueError("fraction must lie in [0, 1)")
    scores = np.array([blur_score(im) for im in images])
    n_drop = int(np.floor(fraction * len(scores)))
    # stable sort: among equal scores the higher index is dropped first
    order = sorted(range(len(scores)), key=lambda i: (scores[i], -i))
    dropped = set(order[:n_drop])
    return [i for i in range(len(scores)) if i not in dropped]


def pose_dissimilarity(a: CameraPose, b: CameraPose, beta: float = DEFAULT_BETA, diag: float = 1.0) -> float:
    return float(np.linalg.norm(a.position - b.position) / diag + beta * rotation_angle(a.orientation, b.orientation) / np.pi)


def dissimilarity_matrix(poses, beta: float = DEFAULT_BETA, diag: float = 1.0) -> np.ndarray:
    pos = np.stack([p.position for p in poses])
    q = np.stack([p.orientation for p in poses])
    dpos = np.linalg.norm(pos[:, None] - pos[None], axis=-1) / diag
    dot = np.clip(np.abs(q @ q.T), 0.0, 1.0)
    ang = 2.0 * np.arccos(dot)
    out = dpos + beta * ang / np.pi
    np.fill_diagonal(out, 0.0)
    return out


def select_frames(poses, k: int, beta: float = DEFAULT_BETA, bounds=None) -> list:
    """Greedy farthest-point selection in pose space.

    The pose closest to the centroid of all camera positions is the reference
    seed: the first pick is the pose farthest from it. The seed itself only
    re-enters through the normal max-min rule, so for k=2 on a line the two
    endpoints come back. Each further pick maximizes the minimum dissimilarity
    to the chosen set. Ties go to the lowest index.
    """
    n = len(poses)
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= {n}, got k={k}")
    pos = np.stack([p.position for p in poses])
    if bounds is None:
        diag = float(np.linalg.norm(pos.max(axis=0) - pos.min(axis=0))) or 1.0
    else:
        b = np.asarray(bounds, dtype=np.float64).reshape(2, 3)
        diag = float(np.linalg.norm(b[1] - b[0]))
    dist = dissimilarity_matrix(poses, beta, diag)
    seed = int(np.argmin(np.linalg.norm(pos - pos.mean(axis=0), axis=1)))
    first = int(np.argmax(dist[seed]))
    chosen = [first]
    mind = dist[first].copy()
    mind[first] = -np.inf
    while len(chosen) < k:
        nxt = int(np.argmax(mind))  # argmax returns the lowest index on ties
        chosen.append(nxt)
        mind = np.minimum(mind, dist[nxt])
        mind[chosen] = -np.inf
    return chosen


def min_pairwise(dist: np.ndarray, idx) -> float:
    idx = list(idx)
    if len(idx) < 2:
        return np.inf
    sub = dist[np.ix_(idx, idx)]
    return float(sub[np.triu_indices(len(idx), 1)].min())

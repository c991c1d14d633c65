"""Streamline geometry: validation, resampling, barycenters, MDF distance and cloud merging.

A streamline is an ``(n, 3)`` float array of RAS coordinates in millimetres with
``n >= 2``. A point cloud is an ``(n, 3)`` array whose row order carries no meaning.
All geometry runs in float64.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy.interpolate import CubicSpline

from tractokit.errors import InvalidInputError


def as_streamline(points, min_points: int = 2) -> np.ndarray:
    """Validate and return ``points`` as a float64 ``(n, 3)`` array."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise InvalidInputError(f"streamline must have shape (n, 3), got {arr.shape}")
    if arr.shape[0] < min_points:
        raise InvalidInputError(f"streamline needs at least {min_points} points, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("streamline contains non-finite coordinates")
    return arr


def as_point_cloud(points) -> np.ndarray:
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3 or arr.shape[0] < 1:
        raise InvalidInputError(f"point cloud must have shape (n>=1, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("point cloud contains non-finite coordinates")
    return arr


def _collapse_duplicates(s: np.ndarray) -> np.ndarray:
    step = np.linalg.norm(np.diff(s, axis=0), axis=1)
    keep = np.concatenate([[True], step > 0])
    return s[keep]


def chord_parameter(s: np.ndarray) -> np.ndarray:
    """Normalised cumulative chord length in [0, 1] (s must have no repeated neighbours)."""
    seg = np.linalg.norm(np.diff(s, axis=0), axis=1)
    t = np.concatenate([[0.0], np.cumsum(seg)])
    return t / t[-1]


def resample(s, m: int) -> np.ndarray:
    """Resample a streamline to ``m`` points.

    A cubic spline (not-a-knot end conditions) is fitted per coordinate over
    the normalised chord-length parameter and evaluated at ``m`` equally spaced parameter
    values. Two-point inputs fall back to linear interpolation. Endpoints are
    reproduced exactly.
    """
    s = as_streamline(s)
    if m < 2:
        raise InvalidInputError(f"resample needs m >= 2, got {m}")
    pts = _collapse_duplicates(s)
    if pts.shape[0] == 1:
        return np.repeat(pts, m, axis=0)
    t = chord_parameter(pts)
    # steps too short to move the normalised parameter would give repeated knots
    keep = np.concatenate([[True], np.diff(t) > 0])
    if not keep.all():
        idx = np.flatnonzero(keep)
        idx[-1] = len(t) - 1
        pts, t = pts[idx], t[idx]
    u = np.linspace(0.0, 1.0, m)
    if pts.shape[0] == 2:
        out = pts[0] + u[:, None] * (pts[1] - pts[0])
    else:
        out = CubicSpline(t, pts, bc_type="not-a-knot", axis=0)(u)
    out[0] = s[0]
    out[-1] = s[-1]
    return out


def resample_many(streamlines: Sequence, m: int) -> np.ndarray:
    """Resample a list of streamlines into one ``(N, m, 3)`` array."""
    out = np.empty((len(streamlines), m, 3), dtype=np.float64)
    for i, s in enumerate(streamlines):
        out[i] = resample(s, m)
    return out


def arc_length(s) -> float:
    s = as_streamline(s)
    return float(np.linalg.norm(np.diff(s, axis=0), axis=1).sum())


def barycenter(s) -> np.ndarray:
    return as_streamline(s, min_points=1).mean(axis=0)


def _palindromic_mean(d: np.ndarray) -> np.ndarray:
    # mean over the last axis of (d + reversed d) / 2; summing a palindrome makes the
    # result independent of traversal direction, so MDF is exactly symmetric and flip-invariant
    return (d + d[..., ::-1]).mean(axis=-1) / 2.0


def mdf_distance(a, b) -> float:
    """Mean direct-flip distance between two streamlines with equal point counts."""
    a = as_streamline(a, min_points=1)
    b = as_streamline(b, min_points=1)
    if a.shape != b.shape:
        raise InvalidInputError(
            f"mdf_distance needs equal point counts, got {a.shape[0]} and {b.shape[0]}; resample first"
        )
    direct = _palindromic_mean(np.linalg.norm(a - b, axis=1))
    flipped = _palindromic_mean(np.linalg.norm(a - b[::-1], axis=1))
    return float(min(direct, flipped))


def mdf_to_many(query: np.ndarray, stack: np.ndarray) -> np.ndarray:
    """MDF from one ``(m, 3)`` streamline to every row of an ``(N, m, 3)`` stack."""
    if stack.shape[0] == 0:
        return np.empty(0)
    direct = _palindromic_mean(np.linalg.norm(stack - query, axis=2))
    flipped = _palindromic_mean(np.linalg.norm(stack - query[::-1], axis=2))
    return np.minimum(direct, flipped)


def to_point_cloud(streamlines: Sequence, n_c: int, seed=None) -> np.ndarray:
    """Merge streamline points and draw ``n_c`` of them.

    Sampling is without replacement when ``n_c`` does not exceed the number of
    merged points and with replacement otherwise.
    """
    if len(streamlines) == 0:
        raise InvalidInputError("to_point_cloud needs at least one streamline")
    if n_c < 1:
        raise InvalidInputError(f"n_c must be >= 1, got {n_c}")
    merged = np.concatenate([as_streamline(s, min_points=1) for s in streamlines], axis=0)
    rng = np.random.default_rng(seed)
    total = merged.shape[0]
    idx = rng.choice(total, size=n_c, replace=n_c > total)
    return merged[idx]

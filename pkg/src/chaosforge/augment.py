"""Dynamics-preserving trajectory augmentations.

Time-delay embedding, affine channel mixing, and convex combinations keep the
underlying dynamics intact (Takens for the embedding, smooth conjugacy for
near-identity affine maps) while diversifying the observation coordinates.
"""

import numpy as np

from .integrator import Trajectory
from .util import DataError


def _rewrap(traj, samples):
    return Trajectory(
        samples=np.ascontiguousarray(samples, dtype=np.float64),
        dt_sample=traj.dt_sample,
        system_id=traj.system_id,
        initial_condition=np.asarray(samples[0], dtype=np.float64),
    )


def time_delay_embed(traj, channel, tau, m):
    """Delay-embed one channel: row t is (x_t, x_{t+tau}, ..., x_{t+(m-1)tau})."""
    if tau < 1:
        raise DataError("delay tau must be >= 1")
    if m < 1:
        raise DataError("embedding dimension must be >= 1")
    X = traj.samples
    T = X.shape[0]
    n_rows = T - (m - 1) * tau
    if n_rows <= 0:
        raise DataError(f"trajectory too short for embedding: T={T}, tau={tau}, m={m}")
    if not 0 <= channel < X.shape[1]:
        raise DataError(f"channel {channel} out of range for {X.shape[1]} variables")
    x = X[:, channel]
    out = np.stack([x[i * tau : i * tau + n_rows] for i in range(m)], axis=1)
    return _rewrap(traj, out)


def affine_transform(traj, A, b):
    """Apply x -> A x + b to every sample; A is V_out x V_in."""
    A = np.asarray(A, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    V = traj.samples.shape[1]
    if A.ndim != 2 or A.shape[1] != V:
        raise DataError(f"A must have {V} columns, got shape {A.shape}")
    if b.shape != (A.shape[0],):
        raise DataError(f"offset must have shape ({A.shape[0]},), got {b.shape}")
    return _rewrap(traj, traj.samples @ A.T + b)


def convex_combination(trajs, weights):
    """Pointwise weighted sum of equal-shape trajectories; weights on the simplex."""
    if not trajs:
        raise DataError("need at least one trajectory")
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(trajs),):
        raise DataError("one weight per trajectory required")
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
        raise DataError("weights must be nonnegative and sum to 1")
    shape = trajs[0].samples.shape
    for t in trajs[1:]:
        if t.samples.shape != shape:
            raise DataError("all trajectories must share a shape")
    out = np.zeros(shape)
    for wi, t in zip(w, trajs):
        out += wi * t.samples
    return _rewrap(trajs[0], out)


def random_affine(V, rng, scale=0.1):
    """Near-identity channel mix: A = I + E, E and b entries ~ N(0, scale^2)."""
    A = np.eye(V) + rng.normal(0.0, scale, size=(V, V))
    b = rng.normal(0.0, scale, size=V)
    return A, b


def draw_augment(traj, rng, prob=0.3, affine_scale=0.1):
    """Dataset-assembly policy: each augmentation fires independently at `prob`.

    A time-delay embedding (random channel, tau in [1,4], m = V so the width
    is preserved) may replace the trajectory, then a random near-identity
    affine may mix channels. Returns (trajectory, descriptor list); the
    descriptors make the draw reproducible inside a manifest.
    """
    V = traj.samples.shape[1]
    applied = []
    out = traj
    if rng.random() < prob:
        channel = int(rng.integers(0, V))
        tau = int(rng.integers(1, 5))
        m = V
        if traj.samples.shape[0] > (m - 1) * tau + 1:
            out = time_delay_embed(out, channel, tau, m)
            applied.append({"kind": "time_delay", "channel": channel, "tau": tau, "m": m})
    if rng.random() < prob:
        A, b = random_affine(out.samples.shape[1], rng, scale=affine_scale)
        out = affine_transform(out, A, b)
        applied.append({"kind": "affine", "A": A.tolist(), "b": b.tolist()})
    return out, applied


def apply_descriptors(traj, descriptors):
    """Replay a stored augmentation descriptor list."""
    out = traj
    for d in descriptors:
        if d["kind"] == "time_delay":
            out = time_delay_embed(out, d["channel"], d["tau"], d["m"])
        elif d["kind"] == "affine":
            out = affine_transform(out, np.asarray(d["A"]), np.asarray(d["b"]))
        else:
            raise DataError(f"unknown augmentation kind {d['kind']!r}")
    return out

"""Synthetic isotropic Gaussian mixtures, the latent prior and mode labelling."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

NONE = -1

# Every read of the real data distribution is appended here as
# ``(purpose, n)``. The unlearning trainer is checked against this log.
ACCESS_LOG = []


@dataclass(frozen=True)
class GmmSpec:
    centers: tuple
    weights: tuple
    sigmas: tuple

    def __post_init__(self):
        centers = tuple(tuple(float(c) for c in row) for row in self.centers)
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        object.__setattr__(self, "sigmas", tuple(float(s) for s in self.sigmas))
        k = len(centers)
        if k == 0 or len(self.weights) != k or len(self.sigmas) != k:
            raise ValueError("centers, weights and sigmas must have the same non-zero length")
        if len({len(c) for c in centers}) != 1:
            raise ValueError("all centers must share one dimension")
        if min(self.weights) <= 0 or abs(sum(self.weights) - 1.0) > 1e-9:
            raise ValueError(f"weights must be positive and sum to 1, got {self.weights}")
        if min(self.sigmas) <= 0:
            raise ValueError("sigmas must be positive")
        if len(set(centers)) != k:
            raise ValueError("mode centers must be pairwise distinct")

    @property
    def dimension(self):
        return len(self.centers[0])

    @property
    def n_modes(self):
        return len(self.centers)

    @property
    def center_array(self):
        return np.array(self.centers, dtype=np.float64)

    @property
    def sigma_array(self):
        return np.array(self.sigmas, dtype=np.float64)

    def without(self, index):
        """The mixture with mode ``index`` removed and weights renormalised."""
        keep = [i for i in range(self.n_modes) if i != index]
        w = np.array([self.weights[i] for i in keep])
        w = w / w.sum()
        return GmmSpec([self.centers[i] for i in keep], tuple(w), [self.sigmas[i] for i in keep])

    def only(self, index):
        """The single-mode mixture consisting of mode ``index``."""
        return GmmSpec([self.centers[index]], (1.0,), [self.sigmas[index]])

    def to_dict(self):
        return {"centers": [list(c) for c in self.centers], "weights": list(self.weights),
                "sigmas": list(self.sigmas)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["centers"], d["weights"], d["sigmas"])

    def digest(self):
        return hashlib.sha256(repr(self.to_dict()).encode()).hexdigest()[:16]


def default_spec():
    """Three equal-weight modes; mode 0 at (0, 1) is the default forget mode."""
    return GmmSpec(
        centers=((0.0, 1.0), (-1.0, -0.5), (1.0, -0.5)),
        weights=(1 / 3, 1 / 3, 1 / 3),
        sigmas=(0.1, 0.1, 0.1),
    )


def sample_gmm(spec, n, seed, purpose="data"):
    """Draw ``n`` labelled points. Returns ``(points, labels)``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    ACCESS_LOG.append((purpose, int(n)))
    rng = np.random.default_rng(seed)
    w = np.array(spec.weights)
    labels = rng.choice(spec.n_modes, size=n, p=w / w.sum())
    noise = rng.standard_normal((n, spec.dimension))
    points = spec.center_array[labels] + spec.sigma_array[labels, None] * noise
    return points, labels


def sample_prior(dimension, n, seed):
    """``n`` i.i.d. standard normal vectors of the given dimension."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return np.random.default_rng(seed).standard_normal((n, dimension))


def nearest_mode(points, spec, k_sigma=3.0):
    """Index of the nearest center, or ``NONE`` (-1) when farther than k_sigma * sigma.

    Accepts a single point or an ``(n, d)`` batch. Ties go to the lowest
    index (``argmin`` returns the first minimum).
    """
    if k_sigma <= 0:
        raise ValueError("k_sigma must be positive")
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    d2 = ((pts[:, None, :] - spec.center_array[None, :, :]) ** 2).sum(-1)
    idx = np.argmin(d2, axis=1)
    dist = np.sqrt(d2[np.arange(len(pts)), idx])
    out = np.where(dist <= k_sigma * spec.sigma_array[idx], idx, NONE)
    return int(out[0]) if single else out


def derive_seed(master, purpose):
    """Sub-seed from hashing ``(purpose, master)``; new purposes never shift old streams."""
    h = hashlib.sha256(f"{purpose}:{int(master)}".encode()).digest()
    return int.from_bytes(h[:8], "little")


def write_samples_csv(path, points, labels):
    with open(path, "w") as fh:
        fh.write("x0,x1,mode\n")
        for p, m in zip(points, labels):
            fh.write(f"{float(p[0])!r},{float(p[1])!r},{int(m)}\n")

"""Soft skeletons, clDice, the pairwise overlap penalty and their weighted sum (ATL).

All functions accept numpy arrays or tracked tensors.  Spatial reductions run
over the last two axes; any leading axes (batch) are kept, so the losses
return one value per leading index.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import value
from .field import DomainError

_SPATIAL = (-2, -1)


@dataclass(frozen=True)
class SkeletonConfig:
    iterations: int = 10
    epsilon: float = 1e-6

    def __post_init__(self):
        if self.iterations < 1:
            raise DomainError("skeleton iterations must be >= 1")
        if not self.epsilon > 0:
            raise DomainError("epsilon must be positive")


@dataclass(frozen=True)
class AtlWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    cl_classes: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if not (np.isfinite(self.lambda1) and np.isfinite(self.lambda2)) or self.lambda1 < 0 or self.lambda2 < 0:
            raise DomainError("ATL weights must be finite and non-negative")
        object.__setattr__(self, "cl_classes", tuple(int(k) for k in self.cl_classes))


def soft_erode(x):
    return ad.minpool3(x)


def soft_dilate(x):
    return ad.maxpool3(x)


def soft_open(x):
    return soft_dilate(soft_erode(x))


def soft_skeleton(x, cfg: SkeletonConfig = SkeletonConfig()):
    """Iterative min/max-pool thinning.

    Each round erodes the current image and keeps what an opening would
    remove; the new piece only adds the part exceeding what is already
    claimed, ``skel += relu(delta - skel)``, so the result never exceeds the
    input.
    """
    img = ad.clamp(x, 0.0, 1.0)
    skel = ad.relu(ad.sub(img, soft_open(img)))
    for _ in range(cfg.iterations):
        img = soft_erode(img)
        delta = ad.relu(ad.sub(img, soft_open(img)))
        skel = ad.add(skel, ad.relu(ad.sub(delta, skel)))
    return skel


def _inner(a, b):
    return ad.sum_(ad.mul(a, b), axis=_SPATIAL)


def cldice_parts(p_k, q_k, cfg: SkeletonConfig = SkeletonConfig()):
    """Topology precision X and sensitivity Y."""
    q = np.asarray(value(q_k), dtype=np.float64)
    eps = cfg.epsilon
    sp = soft_skeleton(p_k, cfg)
    sq = value(soft_skeleton(q, cfg))
    X = ad.div(_inner(sp, q), ad.add(ad.sum_(sp, axis=_SPATIAL), eps))
    Y = ad.div(_inner(p_k, sq), sq.sum(axis=_SPATIAL) + eps)
    return X, Y


def cldice_loss(p_k, q_k, cfg: SkeletonConfig = SkeletonConfig()):
    """1 - 2XY / (X + Y + eps).  An empty target gives Y = 0 and hence loss 1."""
    X, Y = cldice_parts(p_k, q_k, cfg)
    return ad.sub(1.0, ad.div(ad.mul(2.0, ad.mul(X, Y)), ad.add(ad.add(X, Y), cfg.epsilon)))


def overlap_loss(p, num_anatomy_classes: int | None = None):
    """2 / (A (A - 1)) * sum_{i<j} mean_x p_i p_j, with A = K unless given.

    Uses sum_{i<j} p_i p_j = ((sum_k p_k)^2 - sum_k p_k^2) / 2.
    """
    K = np.shape(value(p))[-3]
    if K < 2:
        raise DomainError("overlap needs at least two classes")
    A = K if num_anatomy_classes is None else num_anatomy_classes
    total = ad.sum_(p, axis=-3)
    sq = ad.sum_(ad.mul(p, p), axis=-3)
    pair = ad.mul(0.5, ad.sub(ad.mul(total, total), sq))
    return ad.mul(2.0 / (A * (A - 1)), ad.mean(pair, axis=_SPATIAL))


def atl_loss(p, q, w: AtlWeights, cfg: SkeletonConfig = SkeletonConfig()):
    """lambda1 * sum_{k in cl_classes} clDice(p_k, q_k) + lambda2 * overlap(p).

    ``q`` is a (..., K, H, W) stack of binary target masks (only the
    ``cl_classes`` planes are read).
    """
    out = ad.mul(w.lambda2, overlap_loss(p)) if w.lambda2 else 0.0
    if w.lambda1 and w.cl_classes:
        qv = np.asarray(value(q), dtype=np.float64)
        for k in w.cl_classes:
            pk = ad.getitem(p, (Ellipsis, k, slice(None), slice(None)))
            out = ad.add(out, ad.mul(w.lambda1, cldice_loss(pk, qv[..., k, :, :], cfg)))
    if not ad.tracked(out) and np.ndim(out) == 0 and np.ndim(value(p)) > 3:
        out = np.zeros(np.shape(value(p))[:-3])
    return out

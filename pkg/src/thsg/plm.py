"""Piecewise linear manipulation: push anchor-positive pairs apart.

The stretch factor is large for pairs that are already close (relative to an
adaptive threshold ``d_t``) and decays exponentially for pairs that are
already far apart, so stretched pairs stay near their class.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError

log = logging.getLogger(__name__)


@dataclass
class PlmState:
    alpha: float = 0.2
    gamma: float = 0.8
    d_t: float | None = None  # None until bootstrapped from the first batch
    dist_sum: float = 0.0
    dist_count: int = 0

    def __post_init__(self):
        if self.alpha <= 0 or self.gamma < 0:
            raise ContractError(f"need alpha > 0 and gamma >= 0, got {self.alpha}, {self.gamma}")
        if self.d_t is not None and self.d_t <= 0:
            raise ContractError(f"d_t must be positive, got {self.d_t}")

    def observe(self, distances):
        """Add this batch's anchor-positive distances to the epoch accumulator."""
        distances = np.asarray(distances, dtype=np.float64).ravel()
        self.dist_sum += float(np.sum(distances))
        self.dist_count += distances.size

    def bootstrap(self, distances):
        """Set d_t from the first batch seen, if no threshold exists yet."""
        if self.d_t is None:
            distances = np.asarray(distances, dtype=np.float64).ravel()
            value = float(np.mean(distances)) if distances.size else 0.0
            self.d_t = value if value > 0 else 1.0


def compute_lambda(d_ap, state):
    """Stretch factor for pairs at distance ``d_ap`` (scalar or array)."""
    d_ap = np.asarray(d_ap, dtype=np.float64)
    if np.any(d_ap < 0):
        raise ContractError("distances must be non-negative")
    d_t = state.d_t
    if d_t is None:
        raise ContractError("PlmState.d_t has not been initialised")
    far = state.alpha / np.exp(np.maximum(d_ap - d_t, 0.0))
    near = state.alpha + state.gamma * (1.0 - d_ap / d_t)
    lam = np.where(d_ap >= d_t, far, near)
    return float(lam) if lam.ndim == 0 else lam


def stretch_pair(a, p, lam):
    """Return ``(a + lam*(a-p), p + lam*(p-a))``.

    Works on numpy vectors/matrices or on Tensors (then differentiable in a
    and p).  For batched input ``lam`` is a column of per-row factors.
    """
    if isinstance(a, ad.Tensor) or isinstance(p, ad.Tensor):
        lam = np.asarray(lam, dtype=np.float64)
        if lam.ndim == 1:
            lam = lam[:, None]
        diff = ad.sub(a, p)
        return ad.add(a, ad.mul(diff, lam)), ad.sub(p, ad.mul(diff, lam))
    a = np.asarray(a, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if a.shape != p.shape:
        raise ContractError(f"anchor and positive shapes differ: {a.shape} vs {p.shape}")
    lam = np.asarray(lam, dtype=np.float64)
    if lam.ndim == 1 and a.ndim == 2:
        lam = lam[:, None]
    diff = a - p
    return a + lam * diff, p - lam * diff


def update_threshold(state):
    """Roll the epoch: d_t becomes the mean pair distance just observed."""
    if state.dist_count == 0:
        log.warning("PLM threshold update with no observed pairs; d_t stays %s", state.d_t)
        return state
    mean = state.dist_sum / state.dist_count
    if mean > 0 and math.isfinite(mean):
        state.d_t = mean
    else:
        log.warning("PLM threshold update produced %r; d_t stays %s", mean, state.d_t)
    state.dist_sum = 0.0
    state.dist_count = 0
    return state

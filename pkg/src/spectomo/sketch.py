"""Leverage-score block sampling of the data-term square-root Hessian.

Rows of the weighted forward operator are grouped into per-view blocks
(each spanning all energy bins).  Blocks are drawn with replacement from a
distribution proportional to their ridge leverage scores, with the ridge
set to the mean diagonal of the regularizer Hessian.  Exact scores (dense
SVD) serve as the oracle; the fast path estimates them through the
Kronecker-circulant surrogate of the normal operator and Gaussian probes,
touching only FFT-based operators.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .linops import _cached_fourier, gram_multiplier


@dataclass(frozen=True)
class BlockScores:
    """Nonnegative per-view sampling scores."""

    per_block: np.ndarray
    ridge: float
    block_size: int

    def __post_init__(self):
        pb = np.asarray(self.per_block, dtype=float).ravel()
        if np.any(pb < 0):
            raise ValueError("block scores must be nonnegative")
        object.__setattr__(self, "per_block", pb)

    @property
    def total(self):
        return float(self.per_block.sum())

    def probabilities(self):
        s = self.total
        if s <= 0:
            raise ValueError("cannot sample from all-zero scores")
        return self.per_block / s


@dataclass(frozen=True)
class SketchPlan:
    """Sampled view blocks with importance-sampling rescale weights.

    ``views`` lists the distinct sampled views; ``multiplicity`` how often
    each was drawn out of ``n_draws`` total.  ``weights[i]`` scales the rows
    of view ``views[i]`` so that stacking the distinct blocks once is
    equivalent to stacking every draw rescaled by 1/sqrt(n_draws * p_i):
    weights[i] = sqrt(multiplicity[i] / (n_draws * p_i)).
    """

    views: np.ndarray
    multiplicity: np.ndarray
    weights: np.ndarray
    probabilities: np.ndarray
    n_draws: int


def ridge_scores_exact(B, ridge):
    """Ridge leverage score of every row: b_i^T (B^T B + ridge I)^+ b_i.

    Dense SVD implementation; oracle for tests and small problems.
    """
    B = np.asarray(B, dtype=float)
    U, s, _ = np.linalg.svd(B, full_matrices=False)
    if ridge < 0:
        raise ValueError("ridge must be >= 0")
    s2 = s**2
    if ridge == 0:
        tol = max(B.shape) * np.finfo(float).eps * (s[0] if s.size else 0.0)
        factors = np.where(s > tol, 1.0, 0.0)
    else:
        factors = s2 / (s2 + ridge)
    return (U**2) @ factors


def effective_dimension(B, ridge):
    """Sum of ridge leverage scores: sum_j s_j^2 / (s_j^2 + ridge)."""
    s = np.linalg.svd(np.asarray(B, dtype=float), compute_uv=False)
    if ridge == 0:
        tol = max(np.asarray(B).shape) * np.finfo(float).eps * (s[0] if s.size else 0.0)
        return float(np.count_nonzero(s > tol))
    s2 = s**2
    return float(np.sum(s2 / (s2 + ridge)))


def block_scores(row_scores, block_size, ridge=0.0):
    """Sum contiguous groups of ``block_size`` row scores into block scores."""
    row_scores = np.asarray(row_scores, dtype=float).ravel()
    if block_size < 1 or row_scores.size % block_size:
        raise ValueError(
            f"{row_scores.size} row scores do not divide into blocks of {block_size}"
        )
    per_block = row_scores.reshape(-1, block_size).sum(axis=1)
    return BlockScores(per_block=per_block, ridge=ridge, block_size=block_size)


def min_sketch_size(sum_block_scores, n_cols, delta, epsilon):
    """Number of block draws guaranteeing a spectral embedding:
    ceil(4 * sum_scores * log(4 n / (delta epsilon^2)))."""
    if not (0 < delta < 1 and 0 < epsilon < 1):
        raise ValueError("delta and epsilon must lie in (0, 1)")
    if sum_block_scores < 0:
        raise ValueError("score sum must be nonnegative")
    if sum_block_scores == 0:
        return 0
    return math.ceil(
        4.0 * sum_block_scores * math.log(4.0 * n_cols / (delta * epsilon**2))
    )


def draw_sketch(scores, s_blocks, seed=None):
    """Draw ``s_blocks`` view blocks i.i.d. with replacement from the score
    distribution and attach unbiasedness rescale weights."""
    if s_blocks < 1:
        raise ValueError("s_blocks must be >= 1")
    p = scores.probabilities()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    draws = rng.choice(p.size, size=int(s_blocks), replace=True, p=p)
    views, multiplicity = np.unique(draws, return_counts=True)
    weights = np.sqrt(multiplicity / (s_blocks * p[views]))
    return SketchPlan(
        views=views,
        multiplicity=multiplicity,
        weights=weights,
        probabilities=p,
        n_draws=int(s_blocks),
    )


def sketched_sqrt_apply(plan, B, v):
    """Rows of the sketched square-root Hessian applied to ``v``.

    Only the sampled views of ``B`` are evaluated; each distinct block is
    rescaled by its plan weight.  Output stacks the distinct blocks in view
    order, each of size (n_bins * n_detectors).
    """
    blocks = B.apply_view_blocks(v, plan.views)
    return (blocks * plan.weights[:, None, None]).ravel()


def sketched_normal_apply(plan, B, v):
    """Sketched data-term Hessian action: G^T G v without forming G."""
    return B.normal_apply_views(v, plan.views, plan.weights**2)


def surrogate_normal_factors(geom, mix, inv_cov_diag, n_bins):
    """Eigen-factorization pieces of the Kronecker-circulant surrogate of
    the weighted normal operator.

    The per-measurement weights are collapsed to their per-bin means so the
    normal operator factorizes as (material matrix) x (circulant gram);
    returns the material eigenpairs and the circulant spectrum.
    """
    mix = np.atleast_2d(np.asarray(mix, dtype=float))
    w = np.asarray(inv_cov_diag, dtype=float).reshape(n_bins, -1)
    w_bar = w.mean(axis=1)
    weighted = mix * np.sqrt(w_bar)[:, None]
    cw = weighted.T @ weighted
    eigvals, eigvecs = np.linalg.eigh(cw)
    eigvals = np.clip(eigvals, 0.0, None)
    circ = gram_multiplier(geom, geom.image_side, smooth=True)
    return eigvals, eigvecs, circ, w_bar


def estimate_block_scores_fft(geom, mix, inv_cov_diag, ridge, probes=16,
                              seed=None):
    """Estimate per-view block ridge leverage scores without touching the
    measurement operator's rows.

    For each Gaussian probe g, z = M^(-1/2) g is computed in closed form in
    the surrogate's eigenbasis (material rotation + 2-D FFT), and the probe
    is pushed through the FFT-based projector; squared norms accumulate per
    view.  Scores are clamped nonnegative and renormalized to the
    surrogate's effective dimension.
    """
    if probes < 1:
        raise ValueError("probes must be >= 1")
    if ridge < 0:
        raise ValueError("ridge must be >= 0")
    mix = np.atleast_2d(np.asarray(mix, dtype=float))
    n_bins, n_mat = mix.shape
    side = geom.image_side
    n_pix = side * side

    eigvals, eigvecs, circ, w_bar = surrogate_normal_factors(
        geom, mix, inv_cov_diag, n_bins
    )
    denom = eigvals[:, None, None] * circ[None, :, :] + ridge
    floor = np.finfo(float).eps * max(float(denom.max()), 1.0)
    inv_half = np.where(denom > floor, 1.0 / np.sqrt(np.maximum(denom, floor)), 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(
            denom > floor,
            eigvals[:, None, None] * circ[None, :, :] / np.maximum(denom, floor),
            0.0,
        )
    n_eff = float(ratio.sum())

    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    radon = _cached_fourier(geom)
    weighted_mix = mix * np.sqrt(w_bar)[:, None]
    acc = np.zeros(geom.n_views)
    for _ in range(probes):
        g = rng.standard_normal((n_mat, side, side))
        rot = np.einsum("jm,mxy->jxy", eigvecs.T, g)
        spec = np.fft.fft2(rot, axes=(1, 2)) * inv_half
        half = np.fft.ifft2(spec, axes=(1, 2)).real
        z = np.einsum("mj,jxy->mxy", eigvecs, half).reshape(n_mat, n_pix)
        mixed = weighted_mix @ z
        for k in range(n_bins):
            sino = radon.apply(mixed[k]).reshape(geom.n_views, geom.n_detectors)
            acc += np.sum(sino**2, axis=1)

    scores = np.clip(acc / probes, 0.0, None)
    total = scores.sum()
    if total > 0 and n_eff > 0:
        scores = scores * (n_eff / total)
    return BlockScores(
        per_block=scores,
        ridge=float(ridge),
        block_size=geom.n_detectors * n_bins,
    )

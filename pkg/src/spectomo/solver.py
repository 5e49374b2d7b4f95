"""Outer Newton loop with sketched data Hessian and exact regularizer terms.

Each outer iteration refreshes the ridge scalar from the denoiser trace,
re-estimates per-view sampling scores, draws a fresh sketch, and solves the
(partially sketched) Newton system with matrix-free conjugate gradients.
The gradient is always exact; only the data-term Hessian is subsampled.
Iterates stay nonnegative through projection, and a cost backtracking line
search keeps the objective nonincreasing across accepted steps.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import scipy.optimize

from .denoise import (
    CountingDenoiser,
    red_gradient,
    red_penalty,
    reg_hessian_action,
    ridge_penalty_scalar,
)
from .sketch import (
    draw_sketch,
    estimate_block_scores_fft,
    min_sketch_size,
    sketched_normal_apply,
)
from .spectral import sqrt_hessian


@dataclass
class SolverConfig:
    max_outer: int = 15
    cg_max_iters: int = 30
    cg_rel_tol: float = 1e-3
    subsample_fraction: float = 1.0
    s_blocks: int | None = None          # absolute draw count, overrides fraction
    auto_sketch_size: bool = False       # size from the embedding bound
    step_size: float = 1.0
    epsilon_embed: float = 0.5
    delta_embed: float = 0.1
    full_hessian_mode: bool = False
    score_probes: int = 16
    plateau_rel_tol: float = 1e-8
    plateau_iters: int = 3
    max_backtracks: int = 8

    def __post_init__(self):
        if not (0.0 < self.subsample_fraction <= 1.0):
            raise ValueError("subsample_fraction must lie in (0, 1]")
        if self.cg_rel_tol <= 0:
            raise ValueError("cg_rel_tol must be positive")

    def sketching_enabled(self):
        """Sketching is off in full-Hessian mode and at fraction exactly 1
        (keeping every block equals the full Hessian)."""
        if self.full_hessian_mode:
            return False
        return (
            self.auto_sketch_size
            or self.s_blocks is not None
            or self.subsample_fraction < 1.0
        )


@dataclass
class CGResult:
    p: np.ndarray
    iters: int
    residual_norm: float
    converged: bool
    negative_curvature: bool = False


def cg_solve(hess_action, rhs, max_iters, rel_tol, callback=None):
    """Conjugate gradients on H p = rhs with a matrix-free action.

    Stops when the residual drops below ``rel_tol * ||rhs||`` or after
    ``max_iters`` products.  Directions of nonpositive curvature (possible
    with finite-difference Jacobian noise) truncate the solve: the current
    iterate is returned with a flag.
    """
    rhs = np.asarray(rhs, dtype=float).ravel()
    x = np.zeros_like(rhs)
    rhs_norm = float(np.linalg.norm(rhs))
    if rhs_norm == 0.0:
        return CGResult(x, 0, 0.0, True)
    r = rhs.copy()
    d = rhs.copy()
    rs = float(r @ r)
    tol = rel_tol * rhs_norm
    for k in range(1, max_iters + 1):
        hd = hess_action(d)
        dhd = float(d @ hd)
        if dhd <= 0.0:
            return CGResult(x, k - 1, float(np.sqrt(rs)), False,
                            negative_curvature=True)
        alpha = rs / dhd
        x += alpha * d
        r -= alpha * hd
        rs_new = float(r @ r)
        if callback is not None:
            callback(x.copy())
        if np.sqrt(rs_new) <= tol:
            return CGResult(x, k, float(np.sqrt(rs_new)), True)
        d = r + (rs_new / rs) * d
        rs = rs_new
    return CGResult(x, max_iters, float(np.sqrt(rs)), False)


def newton_step(x, grad, B, den, red_cfg, cfg, plan=None, denoised=None,
                free_mask=None, callback=None):
    """Solve the (partially sketched) Newton system for the step direction.

    The Hessian action combines the data term (full or sketched through
    ``plan``) with the regularizer's Jacobian-vector products at the fixed
    outer iterate; nothing is materialized.  With ``free_mask`` given, the
    system is restricted to the free variables: coordinates pinned at the
    nonnegativity bound with an inward-pushing gradient are excluded, which
    keeps the projected step a descent direction.
    """
    grad = np.asarray(grad, dtype=float).ravel()
    rhs = -grad if free_mask is None else np.where(free_mask, -grad, 0.0)
    if not np.any(rhs):
        return np.zeros_like(grad), CGResult(np.zeros_like(grad), 0, 0.0, True)

    if plan is None:
        def data_action(v):
            return B.normal_apply(v)
    else:
        def data_action(v):
            return sketched_normal_apply(plan, B, v)

    def hess_action(v):
        return data_action(v) + reg_hessian_action(
            den, red_cfg, x, v, denoised=denoised
        )

    if free_mask is None:
        action = hess_action
    else:
        def action(v):
            out = hess_action(np.where(free_mask, v, 0.0))
            return np.where(free_mask, out, 0.0)

    res = cg_solve(action, rhs, cfg.cg_max_iters, cfg.cg_rel_tol,
                   callback=callback)
    return res.p, res


@dataclass
class IterationRecord:
    outer_iter: int
    cost: float
    grad_norm: float
    rmse: float | None
    wall_time_s: float
    row_accesses: int
    cg_iters: int
    sum_block_scores: float | None = None
    lambda_ridge: float | None = None
    s_blocks: int | None = None
    sampled_views: dict | None = None
    step_scale: float = 1.0
    stalled: bool = False
    denoiser_calls: int = 0


@dataclass
class SolveResult:
    x: np.ndarray
    records: list
    converged: bool
    stalled: bool

    @property
    def final_cost(self):
        return self.records[-1].cost if self.records else np.nan


def _rmse_overall(x, truth):
    d = np.asarray(x, dtype=float).ravel() - np.asarray(truth, dtype=float).ravel()
    return float(np.sqrt(np.mean(d * d)))


def denoising_ihs(meas, A, den, red_cfg, cfg, x0=None, truth=None, seed=0,
                  counter=None):
    """Run the sketched Newton-CG loop on the regularized decomposition.

    Per outer iteration: (1) ridge scalar from the denoiser trace and fresh
    per-view scores, (2) a new block sketch, (3) CG on the partially
    sketched system, (4) projected step with cost backtracking.  Returns
    the final iterate and one record per outer iteration.
    """
    den = CountingDenoiser(den)
    B = sqrt_hessian(meas, A)
    geom = A.radon.geom
    n_views = geom.n_views
    rng = np.random.default_rng(seed)
    y = meas.log_data
    w = meas.inv_cov_diag

    x = np.zeros(A.cols) if x0 is None else np.asarray(x0, dtype=float).ravel().copy()
    if x.size != A.cols:
        raise ValueError(f"x0 has length {x.size}, expected {A.cols}")
    if np.any(x < 0):
        raise ValueError("x0 must be nonnegative")

    def residual_and_cost(v, denoised):
        r = A.apply(v) - y
        return r, 0.5 * float(r @ (w * r)) + red_penalty(den, red_cfg, v, denoised)

    def gradient(v, residual, denoised):
        return A.adjoint_apply(w * residual) + red_gradient(den, red_cfg, v,
                                                            denoised)

    denoised = den.apply(x)
    residual, cost = residual_and_cost(x, denoised)
    grad = gradient(x, residual, denoised)

    records = []
    start = time.perf_counter()
    plateau_run = 0
    converged = False
    stalled_any = False
    sketching = cfg.sketching_enabled()

    for t in range(1, cfg.max_outer + 1):
        plan = None
        lam = None
        scores_total = None
        s_blocks = None
        if sketching:
            lam = ridge_penalty_scalar(den, red_cfg, x, seed=rng, denoised=denoised)
            scores = estimate_block_scores_fft(
                geom, A.mix, w, lam, probes=cfg.score_probes, seed=rng
            )
            scores_total = scores.total
            if cfg.s_blocks is not None:
                s_blocks = int(cfg.s_blocks)
            elif cfg.auto_sketch_size:
                s_blocks = max(
                    1,
                    min_sketch_size(scores.total, A.cols, cfg.delta_embed,
                                    cfg.epsilon_embed),
                )
            else:
                s_blocks = max(1, round(cfg.subsample_fraction * n_views))
            plan = draw_sketch(scores, s_blocks, seed=rng)

        free = (x > 0.0) | (grad < 0.0)
        p, cg_res = newton_step(x, grad, B, den, red_cfg, cfg, plan=plan,
                                denoised=denoised, free_mask=free)

        alpha = cfg.step_size
        stalled = False
        accepted = None
        for _ in range(cfg.max_backtracks + 1):
            cand = np.maximum(x + alpha * p, 0.0)
            cand_denoised = den.apply(cand)
            cand_residual, cand_cost = residual_and_cost(cand, cand_denoised)
            if cand_cost <= cost:
                accepted = (cand, cand_denoised, cand_residual, cand_cost, alpha)
                break
            alpha *= 0.5
        if accepted is None:
            stalled = True
            stalled_any = True
            accepted = (x, denoised, residual, cost, 0.0)

        prev_cost = cost
        x, denoised, residual, cost, alpha = accepted
        grad = gradient(x, residual, denoised)

        records.append(IterationRecord(
            outer_iter=t,
            cost=cost,
            grad_norm=float(np.linalg.norm(grad)),
            rmse=None if truth is None else _rmse_overall(x, truth),
            wall_time_s=time.perf_counter() - start,
            row_accesses=counter.rows if counter is not None else 0,
            cg_iters=cg_res.iters,
            sum_block_scores=scores_total,
            lambda_ridge=lam,
            s_blocks=s_blocks,
            sampled_views=(
                dict(zip(plan.views.tolist(), plan.multiplicity.tolist()))
                if plan is not None else None
            ),
            step_scale=alpha,
            stalled=stalled,
            denoiser_calls=den.calls,
        ))

        rel_drop = (prev_cost - cost) / max(abs(prev_cost), 1e-300)
        plateau_run = plateau_run + 1 if rel_drop < cfg.plateau_rel_tol else 0
        if plateau_run >= cfg.plateau_iters:
            # a plateau made of rejected steps is a stall, not convergence
            converged = not any(
                r.stalled for r in records[-cfg.plateau_iters:]
            )
            break

    return SolveResult(x=x, records=records, converged=converged,
                       stalled=stalled_any)


def weighted_ls_baseline(meas, A, cfg=None, x0=None, truth=None, seed=0,
                         counter=None):
    """Unregularized weighted least squares through the same machinery:
    identity denoiser, full Hessian, projected Newton."""
    from .denoise import IdentityDenoiser, RedConfig

    base = cfg or SolverConfig()
    full_cfg = SolverConfig(
        max_outer=base.max_outer,
        cg_max_iters=base.cg_max_iters,
        cg_rel_tol=base.cg_rel_tol,
        step_size=base.step_size,
        full_hessian_mode=True,
        plateau_rel_tol=base.plateau_rel_tol,
        plateau_iters=base.plateau_iters,
        max_backtracks=base.max_backtracks,
    )
    return denoising_ihs(meas, A, IdentityDenoiser(), RedConfig(nu=1.0),
                         full_cfg, x0=x0, truth=truth, seed=seed,
                         counter=counter)


@dataclass
class ConvergenceReport:
    """Empirical contraction diagnostics for an error sequence."""

    errors: np.ndarray
    rates: np.ndarray                 # e_{t+1} / e_t
    c_quadratic: float                # fitted coefficient of e_t^2
    c_linear: float                   # fitted coefficient of e_t
    envelope_factor: float            # max e_{t+1} / fit; bound holds after scaling
    satisfied: bool

    @property
    def envelope_quadratic(self):
        return self.c_quadratic * self.envelope_factor

    @property
    def envelope_linear(self):
        return self.c_linear * self.envelope_factor


def convergence_check(records_or_errors, floor=1e-14):
    """Fit e_{t+1} <= C1 e_t^2 + C e_t over the recorded error sequence.

    Accepts solver records (using their rmse field) or a raw error list.
    Constants come from a nonnegative least-squares fit; the envelope
    factor scales them so the inequality holds at every recorded step.
    """
    if len(records_or_errors) and isinstance(records_or_errors[0], IterationRecord):
        errors = np.array([r.rmse for r in records_or_errors], dtype=float)
        if np.any(np.isnan(errors)):
            raise ValueError("records lack rmse values; run with truth provided")
    else:
        errors = np.asarray(records_or_errors, dtype=float).ravel()
    if errors.size < 2:
        raise ValueError("need at least two error values")
    errors = np.maximum(errors, floor)
    e = errors[:-1]
    e_next = errors[1:]
    design = np.stack([e**2, e], axis=1)
    coef, _ = scipy.optimize.nnls(design, e_next)
    fit = design @ coef
    with np.errstate(divide="ignore"):
        factor = float(np.max(np.where(fit > 0, e_next / np.maximum(fit, floor), np.inf)))
    return ConvergenceReport(
        errors=errors,
        rates=e_next / e,
        c_quadratic=float(coef[0]),
        c_linear=float(coef[1]),
        envelope_factor=factor,
        satisfied=bool(np.isfinite(factor)),
    )

"""Sketched Newton-CG spectral CT material decomposition toolkit."""

__version__ = "0.1.0"

from .denoise import (
    Denoiser,
    GaussianBlurDenoiser,
    IdentityDenoiser,
    RedConfig,
    jvp_fd,
    make_denoiser,
    red_gradient,
    red_penalty,
    reg_hessian_action,
    ridge_penalty_scalar,
    trace_mc,
)
from .linops import (
    DiagonalMap,
    DimensionError,
    FourierRadon,
    KroneckerMap,
    LinearMap,
    RadonGeometry,
    RayRadon,
    RowAccessCounter,
    adjoint_mismatch,
    fourier_radon_apply,
    gram_fft_apply,
    kron_apply,
    ray_radon_apply,
)
from .phantom import PhantomSpec, desk_phantom, render_phantom, rmse
from .sketch import (
    BlockScores,
    SketchPlan,
    block_scores,
    draw_sketch,
    effective_dimension,
    estimate_block_scores_fft,
    min_sketch_size,
    ridge_scores_exact,
    sketched_normal_apply,
    sketched_sqrt_apply,
)
from .solver import (
    SolverConfig,
    cg_solve,
    convergence_check,
    denoising_ihs,
    newton_step,
    weighted_ls_baseline,
)
from .spectral import (
    MaterialBasis,
    SpectrumTable,
    binned_attenuation,
    load_materials_csv,
    load_spectrum_csv,
    log_linearize,
    loss_eval,
    loss_gradient,
    simulate_counts,
    sqrt_hessian,
)

__all__ = [name for name in dir() if not name.startswith("_")]

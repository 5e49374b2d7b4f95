"""Denoiser-based regularization: gradient, Hessian action, trace probes.

The regularizer is rho(x) = x^T (x - D(x)) / (2 nu) for a pluggable
denoiser D.  Its gradient is taken as (x - D(x)) / nu and its Hessian
action as (I - J[D(x)]) / nu, the convention under which the regularizer
Hessian is positive semi-definite for non-expansive denoisers.  Jacobians
are never formed; directional derivatives come from one extra denoiser
evaluation (forward differences) or, for the built-in linear denoisers,
from the denoiser itself.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class RedConfig:
    """Regularizer weight and estimator knobs."""

    nu: float = 1.0
    fd_epsilon_scale: float = 1e-6
    mc_probes: int = 1

    def __post_init__(self):
        if self.nu <= 0:
            raise ValueError("nu must be positive")
        if self.fd_epsilon_scale <= 0:
            raise ValueError("fd_epsilon_scale must be positive")
        if self.mc_probes < 1:
            raise ValueError("mc_probes must be >= 1")


class Denoiser:
    """Denoiser contract: a reentrant ``apply`` from R^n to R^n.

    Subclasses with a cheap exact Jacobian-vector product define
    ``exact_jvp(x, p)``; others leave it as None and solvers fall back to
    finite differences.
    """

    exact_jvp = None

    def apply(self, x):
        raise NotImplementedError


class PlanewiseDenoiser(Denoiser):
    """Base for image denoisers acting on stacked square material planes."""

    def __init__(self, image_side):
        self.image_side = int(image_side)

    def _planes(self, x):
        x = np.asarray(x, dtype=float).ravel()
        side = self.image_side
        if x.size % (side * side):
            raise ValueError(
                f"vector length {x.size} is not a multiple of {side}x{side}"
            )
        return x.reshape(-1, side, side)


class IdentityDenoiser(Denoiser):
    def __init__(self, image_side=None):
        self.image_side = image_side

    def apply(self, x):
        return np.asarray(x, dtype=float).ravel().copy()

    def exact_jvp(self, x, p):
        return np.asarray(p, dtype=float).ravel().copy()


class GaussianBlurDenoiser(PlanewiseDenoiser):
    """Separable Gaussian convolution with reflect padding.

    Linear with a symmetric Jacobian (symmetric kernel + half-sample
    reflection), so the Jacobian-vector product is the blur itself.
    """

    def __init__(self, image_side, sigma=1.5):
        super().__init__(image_side)
        if sigma <= 0:
            raise ValueError("sigma must be positive")
        self.sigma = float(sigma)

    def _blur(self, planes):
        out = ndimage.gaussian_filter1d(planes, self.sigma, axis=1, mode="reflect")
        return ndimage.gaussian_filter1d(out, self.sigma, axis=2, mode="reflect")

    def apply(self, x):
        return self._blur(self._planes(x)).ravel()

    def exact_jvp(self, x, p):
        return self.apply(p)

    def kernel_1d(self):
        """Materialized 1-D convolution matrix (dense oracle for tests)."""
        return ndimage.gaussian_filter1d(
            np.eye(self.image_side), self.sigma, axis=0, mode="reflect"
        )


class BoxMeanDenoiser(PlanewiseDenoiser):
    """Patch-mean (uniform box) filter with reflect padding; linear, symmetric."""

    def __init__(self, image_side, size=3):
        super().__init__(image_side)
        if size < 1:
            raise ValueError("size must be >= 1")
        self.size = int(size)

    def apply(self, x):
        planes = self._planes(x)
        out = ndimage.uniform_filter1d(planes, self.size, axis=1, mode="reflect")
        out = ndimage.uniform_filter1d(out, self.size, axis=2, mode="reflect")
        return out.ravel()

    def exact_jvp(self, x, p):
        return self.apply(p)


class BlurThresholdDenoiser(PlanewiseDenoiser):
    """Gaussian blur followed by soft thresholding (nonlinear test case).

    The Jacobian is diag(threshold')(blur), available in closed form
    through the chain rule.
    """

    def __init__(self, image_side, sigma=1.5, threshold=0.05):
        super().__init__(image_side)
        self.sigma = float(sigma)
        self.threshold = float(threshold)
        self._blur = GaussianBlurDenoiser(image_side, sigma)

    def apply(self, x):
        z = self._blur.apply(x)
        return np.sign(z) * np.maximum(np.abs(z) - self.threshold, 0.0)

    def exact_jvp(self, x, p):
        z = self._blur.apply(x)
        active = (np.abs(z) > self.threshold).astype(float)
        return active * self._blur.apply(p)


class LinearDenoiser(Denoiser):
    """Dense-matrix denoiser for oracles and property tests."""

    def __init__(self, matrix):
        self.matrix = np.asarray(matrix, dtype=float)

    def apply(self, x):
        return self.matrix @ np.asarray(x, dtype=float).ravel()

    def exact_jvp(self, x, p):
        return self.matrix @ np.asarray(p, dtype=float).ravel()


class ZeroDenoiser(Denoiser):
    def apply(self, x):
        return np.zeros_like(np.asarray(x, dtype=float).ravel())

    def exact_jvp(self, x, p):
        return np.zeros_like(np.asarray(p, dtype=float).ravel())


_DENOISERS = {
    "identity": IdentityDenoiser,
    "gaussian_blur": GaussianBlurDenoiser,
    "box_mean": BoxMeanDenoiser,
    "blur_threshold": BlurThresholdDenoiser,
}


def make_denoiser(name, image_side, params=None):
    """Instantiate a built-in denoiser from a config name + parameter map."""
    try:
        cls = _DENOISERS[name]
    except KeyError:
        raise ValueError(
            f"unknown denoiser {name!r}; available: {sorted(_DENOISERS)}"
        ) from None
    return cls(image_side, **(params or {}))


def red_penalty(den, cfg, x, denoised=None):
    """rho(x) = x^T (x - D(x)) / (2 nu)."""
    x = np.asarray(x, dtype=float).ravel()
    if denoised is None:
        denoised = den.apply(x)
    return float(x @ (x - denoised)) / (2.0 * cfg.nu)


def red_gradient(den, cfg, x, denoised=None):
    """(x - D(x)) / nu."""
    x = np.asarray(x, dtype=float).ravel()
    if denoised is None:
        denoised = den.apply(x)
    return (x - denoised) / cfg.nu


def _fd_step(cfg, x, p):
    return cfg.fd_epsilon_scale * (1.0 + float(np.max(np.abs(x)))) / max(
        float(np.max(np.abs(p))), 1e-300
    )


def jvp_fd(den, cfg, x, p, denoised=None):
    """Forward-difference Jacobian-vector product: one denoiser evaluation
    when D(x) is supplied."""
    x = np.asarray(x, dtype=float).ravel()
    p = np.asarray(p, dtype=float).ravel()
    if not np.any(p):
        return np.zeros_like(p)
    eps = _fd_step(cfg, x, p)
    if denoised is None:
        denoised = den.apply(x)
    return (den.apply(x + eps * p) - denoised) / eps


def reg_hessian_action(den, cfg, x, p, denoised=None):
    """(p - J[D(x)] p) / nu, using the exact product when the denoiser has one."""
    p = np.asarray(p, dtype=float).ravel()
    if den.exact_jvp is not None:
        jp = den.exact_jvp(x, p)
    else:
        jp = jvp_fd(den, cfg, x, p, denoised=denoised)
    return (p - jp) / cfg.nu


def trace_mc(den, cfg, x, seed=None, denoised=None):
    """Monte-Carlo estimate of Trace[J[D(x)]] from Gaussian probes.

    Each probe costs one denoiser evaluation (forward differences against
    the cached D(x)); unbiased for linear denoisers.
    """
    x = np.asarray(x, dtype=float).ravel()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if denoised is None:
        denoised = den.apply(x)
    total = 0.0
    for _ in range(cfg.mc_probes):
        n = rng.standard_normal(x.size)
        eps = _fd_step(cfg, x, n)
        total += float(n @ (den.apply(x + eps * n) - denoised)) / eps
    return total / cfg.mc_probes


def ridge_penalty_scalar(den, cfg, x, seed=None, denoised=None):
    """Mean diagonal of the regularizer Hessian, clamped at zero.

    Used as the ridge parameter when scoring measurement blocks; equals
    (1 - Trace[J]/n) / nu for the adopted Hessian convention.
    """
    x = np.asarray(x, dtype=float).ravel()
    tr = trace_mc(den, cfg, x, seed=seed, denoised=denoised)
    return max(0.0, (1.0 - tr / x.size) / cfg.nu)


class CountingDenoiser(Denoiser):
    """Proxy that counts ``apply`` calls; used for work accounting."""

    def __init__(self, inner):
        self.inner = inner
        self.image_side = getattr(inner, "image_side", None)
        self.calls = 0
        if inner.exact_jvp is not None:
            self.exact_jvp = inner.exact_jvp

    def apply(self, x):
        self.calls += 1
        return self.inner.apply(x)

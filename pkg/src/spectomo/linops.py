"""Matrix-free linear operators for 2-D parallel-beam tomography.

Everything the solvers touch goes through the ``LinearMap`` interface
(apply / adjoint_apply), so no n x n matrix is ever materialized outside
tests.  Two projector implementations are provided:

* ``RayRadon``: exact pixel/line intersection lengths (Siddon-style
  traversal), assembled once into a sparse matrix.  Slow to build, exact,
  and therefore the reference implementation.
* ``FourierRadon``: 1-D inverse transforms of polar slices of the 2-D
  image spectrum (central-slice construction).  Approximate on non
  band-limited images, O(n log n) per apply.

``gram_fft_apply`` applies the circulant approximation of the projector
normal operator entirely in the frequency domain.  ``KroneckerMap`` builds
the multi-channel forward operator out of a dense mixing matrix and a
single projector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp


class DimensionError(ValueError):
    """An operator received a vector of the wrong length."""


class LinearMap:
    """Linear operator with an explicit adjoint.

    Subclasses set ``rows``/``cols`` and implement ``apply`` and
    ``adjoint_apply``.  Operators are immutable after construction and may
    be shared between threads.
    """

    rows: int = 0
    cols: int = 0

    def apply(self, x):
        raise NotImplementedError

    def adjoint_apply(self, y):
        raise NotImplementedError

    def _check(self, v, n, name="input"):
        v = np.asarray(v, dtype=np.float64).ravel()
        if v.size != n:
            raise DimensionError(
                f"{type(self).__name__}: {name} has length {v.size}, expected {n}"
            )
        return v

    def as_dense(self):
        """Materialize column by column.  Test/oracle use only."""
        out = np.zeros((self.rows, self.cols))
        e = np.zeros(self.cols)
        for j in range(self.cols):
            e[j] = 1.0
            out[:, j] = self.apply(e)
            e[j] = 0.0
        return out


def adjoint_mismatch(op, rng, trials=20):
    """Worst normalized defect of <Au, v> == <u, A^T v> over random pairs."""
    worst = 0.0
    for _ in range(trials):
        u = rng.standard_normal(op.cols)
        v = rng.standard_normal(op.rows)
        au = op.apply(u)
        atv = op.adjoint_apply(v)
        num = abs(float(au @ v) - float(u @ atv))
        den = (
            np.linalg.norm(au) * np.linalg.norm(v)
            + np.linalg.norm(u) * np.linalg.norm(atv)
            + 1e-300
        )
        worst = max(worst, num / den)
    return worst


@dataclass
class RowAccessCounter:
    """Mutable tally of projector rows touched (single-owner, per run)."""

    rows: int = 0
    views_touched: set = field(default_factory=set)

    def record(self, views, n_detectors):
        views = list(views)
        self.rows += len(views) * n_detectors
        self.views_touched.update(int(v) for v in views)

    def reset(self):
        self.rows = 0
        self.views_touched.clear()


@dataclass(frozen=True)
class RadonGeometry:
    """Parallel-beam acquisition geometry.

    Pixel (r, c) of the ``image_side`` x ``image_side`` grid is centered at
    ``((c - (I-1)/2) * pixel_size, (r - (I-1)/2) * pixel_size)``; detector
    ``d`` of view ``theta`` integrates along the line
    ``x cos(theta) + y sin(theta) = u_d`` with
    ``u_d = (d - (N_d-1)/2) * detector_spacing``.  Lengths are unit-agnostic
    but must be consistent across fields.
    """

    image_side: int
    n_detectors: int
    view_angles: tuple
    detector_spacing: float = 1.0
    pixel_size: float = 1.0

    def __post_init__(self):
        if self.image_side < 2:
            raise ValueError("image_side must be >= 2")
        if self.n_detectors < 1:
            raise ValueError("n_detectors must be >= 1")
        ang = np.asarray(self.view_angles, dtype=float)
        if ang.size < 1:
            raise ValueError("need at least one view angle")
        if np.any(ang < 0.0) or np.any(ang >= np.pi):
            raise ValueError("view angles must lie in [0, pi)")
        if ang.size > 1 and np.any(np.diff(ang) <= 0):
            raise ValueError("view angles must be strictly increasing")
        if self.detector_spacing <= 0 or self.pixel_size <= 0:
            raise ValueError("spacings must be positive")

    @classmethod
    def uniform(cls, image_side, n_views, n_detectors, detector_spacing=1.0,
                pixel_size=1.0):
        angles = tuple(np.arange(n_views) * np.pi / n_views)
        return cls(image_side, n_detectors, angles, detector_spacing, pixel_size)

    @property
    def n_views(self):
        return len(self.view_angles)

    @property
    def n_pixels(self):
        return self.image_side * self.image_side

    @property
    def n_rays(self):
        return self.n_views * self.n_detectors

    def angles(self):
        return np.asarray(self.view_angles, dtype=float)

    def detector_offsets(self):
        nd = self.n_detectors
        return (np.arange(nd) - (nd - 1) / 2.0) * self.detector_spacing


def _build_intersection_matrix(geom):
    """Sparse ray/pixel intersection-length matrix, one block of rows per view."""
    side = geom.image_side
    h = geom.pixel_size
    nd = geom.n_detectors
    half = side * h / 2.0
    grid = -half + h * np.arange(side + 1)
    u = geom.detector_offsets()
    tbig = 4.0 * (half * math.sqrt(2.0) + float(np.max(np.abs(u))) + h)
    tiny = 1e-12 * h

    rows, cols, vals = [], [], []
    for v, theta in enumerate(geom.angles()):
        dx, dy = -math.sin(theta), math.cos(theta)
        px = u * math.cos(theta)
        py = u * math.sin(theta)
        if abs(dx) > 1e-14:
            tx = (grid[None, :] - px[:, None]) / dx
        else:
            tx = np.full((nd, side + 1), np.inf)
        if abs(dy) > 1e-14:
            ty = (grid[None, :] - py[:, None]) / dy
        else:
            ty = np.full((nd, side + 1), np.inf)
        t = np.clip(np.concatenate([tx, ty], axis=1), -tbig, tbig)
        t.sort(axis=1)
        seg = np.diff(t, axis=1)
        tm = 0.5 * (t[:, :-1] + t[:, 1:])
        mx = px[:, None] + tm * dx
        my = py[:, None] + tm * dy
        ci = np.floor((mx + half) / h).astype(np.int64)
        ri = np.floor((my + half) / h).astype(np.int64)
        ok = (seg > tiny) & (ci >= 0) & (ci < side) & (ri >= 0) & (ri < side)
        det_idx, _ = np.nonzero(ok)
        rows.append(v * nd + det_idx)
        cols.append(ri[ok] * side + ci[ok])
        vals.append(seg[ok])

    mat = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(geom.n_rays, geom.n_pixels),
    )
    return mat.tocsr()


class RayRadon(LinearMap):
    """Exact parallel-beam projector (intersection lengths, sparse-backed).

    Row ordering is view-major: ray index = view * n_detectors + detector.
    """

    def __init__(self, geom, counter=None):
        self.geom = geom
        self.rows = geom.n_rays
        self.cols = geom.n_pixels
        self.counter = counter
        self._matrix = _build_intersection_matrix(geom)
        self._matrix_t = self._matrix.T.tocsr()

    def apply(self, x):
        x = self._check(x, self.cols, "image")
        if not np.all(np.isfinite(x)):
            raise ValueError("image contains non-finite values")
        if self.counter is not None:
            self.counter.record(range(self.geom.n_views), self.geom.n_detectors)
        return self._matrix @ x

    def adjoint_apply(self, y):
        y = self._check(y, self.rows, "sinogram")
        if self.counter is not None:
            self.counter.record(range(self.geom.n_views), self.geom.n_detectors)
        return self._matrix_t @ y

    def _row_indices(self, views):
        nd = self.geom.n_detectors
        views = np.asarray(views, dtype=np.int64)
        return (views[:, None] * nd + np.arange(nd)[None, :]).ravel()

    def apply_views(self, x, views):
        """Project onto the listed views only; returns (len(views), n_detectors)."""
        x = self._check(x, self.cols, "image")
        if self.counter is not None:
            self.counter.record(views, self.geom.n_detectors)
        idx = self._row_indices(views)
        return (self._matrix[idx] @ x).reshape(len(views), self.geom.n_detectors)

    def adjoint_views(self, blocks, views):
        """Backproject per-view blocks of shape (len(views), n_detectors)."""
        if self.counter is not None:
            self.counter.record(views, self.geom.n_detectors)
        idx = self._row_indices(views)
        return self._matrix[idx].T @ np.asarray(blocks, dtype=np.float64).ravel()

    def as_dense(self):
        return self._matrix.toarray()


def _next_pow2(n):
    return 1 << (int(n) - 1).bit_length()


def _radial_sample_grid(geom):
    """Frequency coordinates of every (view, radial) slice sample.

    Returns fx, fy of shape (n_views, n_detectors) in cycles per length,
    laid out in detector-FFT order, plus the square-pixel footprint at
    those frequencies.
    """
    gamma = np.fft.fftfreq(geom.n_detectors, d=geom.detector_spacing)
    ang = geom.angles()
    fx = gamma[None, :] * np.cos(ang)[:, None]
    fy = gamma[None, :] * np.sin(ang)[:, None]
    h = geom.pixel_size
    footprint = np.sinc(h * fx) * np.sinc(h * fy)
    return fx, fy, footprint


def _bilinear_matrix(fx, fy, P, h, side):
    """Sparse wrap-around bilinear sampler of a P x P spectrum grid."""
    ix = (fx * P * h).ravel()
    iy = (fy * P * h).ravel()
    n = ix.size
    i0 = np.floor(iy)
    j0 = np.floor(ix)
    wy = iy - i0
    wx = ix - j0
    # The dephased spectrum is periodic up to a sign when the image center
    # sits at a half-integer pixel offset.
    sigma = -1.0 if (side - 1) % 2 else 1.0

    rows, cols, vals = [], [], []
    for di, dj, w in (
        (0, 0, (1 - wy) * (1 - wx)),
        (0, 1, (1 - wy) * wx),
        (1, 0, wy * (1 - wx)),
        (1, 1, wy * wx),
    ):
        qi = (i0 + di).astype(np.int64)
        qj = (j0 + dj).astype(np.int64)
        si = qi % P
        sj = qj % P
        signed_i = np.where(si < P // 2, si, si - P)
        signed_j = np.where(sj < P // 2, sj, sj - P)
        wraps = (qi - signed_i) // P + (qj - signed_j) // P
        sign = np.where(wraps % 2 == 0, 1.0, sigma)
        rows.append(np.arange(n))
        cols.append(si * P + sj)
        vals.append(w * sign)
    mat = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, P * P),
    )
    return mat.tocsr()


class FourierRadon(LinearMap):
    """Parallel-beam projector evaluated through the image spectrum.

    The padded 2-D FFT of the image is resampled (bilinear, with periodic
    wrap-around) along one radial line per view, multiplied by the square
    pixel footprint, and inverse transformed to detector samples.  The
    adjoint is the exact transpose of that chain, so adjoint consistency
    holds to rounding even though the forward model is approximate.

    Non-power-of-two image sides are zero-padded internally; the public
    dimensions are unchanged.

    Agreement with the ray-driven projector is best when detector offsets
    fall on pixel centers (even n_detectors with even image_side): on
    axis-aligned views the exact projection is piecewise constant, and
    detectors aligned with pixel boundaries sample it at its jumps, which a
    band-limited reconstruction cannot match.
    """

    def __init__(self, geom, counter=None, pad_factor=4):
        self.geom = geom
        self.rows = geom.n_rays
        self.cols = geom.n_pixels
        self.counter = counter

        side = geom.image_side
        h = geom.pixel_size
        nd = geom.n_detectors
        P = _next_pow2(max(pad_factor * side, nd))
        self._P = P
        center = (side - 1) / 2.0

        k = np.fft.fftfreq(P) * P  # signed integer frequency indices
        phase = np.exp(2j * np.pi * center * (k[:, None] + k[None, :]) / P)
        self._dephase = (h * h) * phase  # includes pixel-area scaling

        # Bilinear resampling of the spectrum multiplies the image by the
        # tent kernel's spatial envelope; divide it out up front (gridding
        # deapodization).
        ax = np.sinc((np.arange(side) - center) / P) ** 2
        self._deapodize = 1.0 / np.outer(ax, ax)

        fx, fy, self._footprint = _radial_sample_grid(geom)
        self._slices = _bilinear_matrix(fx, fy, P, h, side)

        kd = np.fft.fftfreq(nd) * nd
        shift = np.exp(-2j * np.pi * kd * ((nd - 1) / 2.0) / nd)
        self._detector_phase = shift / geom.detector_spacing

    def _spectrum(self, x):
        side = self.geom.image_side
        padded = np.zeros((self._P, self._P))
        padded[:side, :side] = x.reshape(side, side) * self._deapodize
        return self._dephase * np.fft.fft2(padded)

    def _slices_to_sinogram(self, vals):
        nv, nd = self.geom.n_views, self.geom.n_detectors
        s = vals.reshape(nv, nd) * self._footprint
        return np.fft.ifft(s * self._detector_phase[None, :], axis=1).real

    def apply(self, x):
        x = self._check(x, self.cols, "image")
        if self.counter is not None:
            self.counter.record(range(self.geom.n_views), self.geom.n_detectors)
        spec = self._spectrum(x)
        return self._slices_to_sinogram(self._slices @ spec.ravel()).ravel()

    def apply_views(self, x, views):
        x = self._check(x, self.cols, "image")
        nd = self.geom.n_detectors
        if self.counter is not None:
            self.counter.record(views, nd)
        spec = self._spectrum(x)
        views = np.asarray(views, dtype=np.int64)
        idx = (views[:, None] * nd + np.arange(nd)[None, :]).ravel()
        vals = (self._slices[idx] @ spec.ravel()).reshape(len(views), nd)
        s = vals * self._footprint[views]
        return np.fft.ifft(s * self._detector_phase[None, :], axis=1).real

    def adjoint_apply(self, y):
        y = self._check(y, self.rows, "sinogram")
        if self.counter is not None:
            self.counter.record(range(self.geom.n_views), self.geom.n_detectors)
        nv, nd = self.geom.n_views, self.geom.n_detectors
        side = self.geom.image_side
        q = np.fft.fft(y.reshape(nv, nd), axis=1) / nd
        q = q * np.conj(self._detector_phase)[None, :]
        q *= self._footprint
        spec = (self._slices.T @ q.ravel()).reshape(self._P, self._P)
        spec *= np.conj(self._dephase)
        img = np.fft.ifft2(spec) * (self._P * self._P)
        return (img[:side, :side].real * self._deapodize).ravel()


def gram_multiplier(geom, P, smooth=False):
    """Frequency response of the circulant normal-operator approximation.

    The default ("deposit") form accumulates the actual radial sampling
    pattern onto the grid: every (view, radial-frequency) slice sample
    deposits its bilinear weights times the squared pixel footprint.  The
    node density is proportional to ``n_views / |rho|``, so this is the
    discretely evaluated inverse-radial-frequency backprojection filter; it
    is finite at DC by construction.

    ``smooth=True`` returns the continuum form
    ``n_views / (pi * detector_spacing * |rho|)`` (pixel footprint squared,
    DC capped at half a frequency-grid step, zero beyond the sampled disk),
    which is strictly positive in band and better suited to closed-form
    inversion.
    """
    h = geom.pixel_size
    nd = geom.n_detectors
    du = geom.detector_spacing
    if smooth:
        f = np.fft.fftfreq(P, d=h)
        fx, fy = np.meshgrid(f, f, indexing="xy")
        rho = np.hypot(fx, fy)
        dc = 0.5 / (P * h)
        mult = geom.n_views / (np.pi * du) / np.maximum(rho, dc)
        mult *= (np.sinc(h * fx) * np.sinc(h * fy)) ** 2
        rho_max = (nd // 2) / (nd * du)
        mult[rho > rho_max] = 0.0
        return mult
    fx, fy, footprint = _radial_sample_grid(geom)
    sampler = _bilinear_matrix(fx, fy, P, h, geom.image_side)
    dep = sampler.T @ (footprint.ravel() ** 2)
    const = (P * P * h ** 4) / (nd * du ** 2)
    return np.maximum(const * dep.reshape(P, P), 0.0)


def gram_fft_apply(geom, image, pad_factor=2):
    """Apply the circulant approximation of projector^T @ projector.

    Exact only in the continuum limit; symmetric positive semi-definite by
    construction (nonnegative real frequency multiplier, compressed by
    zero-pad/crop).
    """
    side = geom.image_side
    image = np.asarray(image, dtype=np.float64).ravel()
    if image.size != side * side:
        raise DimensionError(
            f"gram_fft_apply: image has length {image.size}, expected {side * side}"
        )
    P = _next_pow2(pad_factor * side)
    mult = _cached_gram_multiplier(geom, P)
    padded = np.zeros((P, P))
    padded[:side, :side] = image.reshape(side, side)
    out = np.fft.ifft2(mult * np.fft.fft2(padded)).real
    return out[:side, :side].ravel()


@lru_cache(maxsize=8)
def _cached_gram_multiplier(geom, P):
    return gram_multiplier(geom, P)


class DiagonalMap(LinearMap):
    """Pointwise scaling by a fixed nonnegative vector."""

    def __init__(self, diag):
        self.diag = np.asarray(diag, dtype=np.float64).ravel()
        self.rows = self.cols = self.diag.size

    def apply(self, x):
        return self.diag * self._check(x, self.cols)

    adjoint_apply = apply


class KroneckerMap(LinearMap):
    """Channel-mixing matrix composed with a shared projector.

    ``apply`` on the stacked input (channel-major) equals projecting each
    mixed image: output channel k is ``radon(sum_m mix[k, m] * x_m)``.
    Output is channel-major: index = k * radon.rows + ray.
    """

    def __init__(self, mix, radon):
        self.mix = np.atleast_2d(np.asarray(mix, dtype=np.float64))
        self.radon = radon
        self.n_out, self.n_in = self.mix.shape
        self.rows = self.n_out * radon.rows
        self.cols = self.n_in * radon.cols

    def apply(self, x):
        x = self._check(x, self.cols)
        mixed = self.mix @ x.reshape(self.n_in, self.radon.cols)
        return np.stack([self.radon.apply(m) for m in mixed]).ravel()

    def adjoint_apply(self, y):
        y = self._check(y, self.rows)
        back = np.stack(
            [self.radon.adjoint_apply(r) for r in y.reshape(self.n_out, -1)]
        )
        return (self.mix.T @ back).ravel()

    def apply_view_blocks(self, x, views):
        """Rows of the sampled views, as (len(views), n_out, n_detectors)."""
        x = self._check(x, self.cols)
        mixed = self.mix @ x.reshape(self.n_in, self.radon.cols)
        per_bin = np.stack([self.radon.apply_views(m, views) for m in mixed])
        return per_bin.transpose(1, 0, 2)

    def adjoint_view_blocks(self, blocks, views):
        """Adjoint of ``apply_view_blocks`` for the same view list."""
        blocks = np.asarray(blocks, dtype=np.float64)
        back = np.stack(
            [self.radon.adjoint_views(blocks[:, k, :], views)
             for k in range(self.n_out)]
        )
        return (self.mix.T @ back).ravel()


def kron_apply(kron_map, x):
    return kron_map.apply(x)


@lru_cache(maxsize=8)
def _cached_ray(geom):
    return RayRadon(geom)


@lru_cache(maxsize=8)
def _cached_fourier(geom):
    return FourierRadon(geom)


def ray_radon_apply(geom, image):
    """Project ``image`` with the exact ray-driven operator."""
    return _cached_ray(geom).apply(image)


def fourier_radon_apply(geom, image):
    """Project ``image`` with the FFT-based operator."""
    return _cached_fourier(geom).apply(image)

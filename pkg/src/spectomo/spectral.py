"""Spectral CT measurement model and the Gaussian data-fit terms.

Forward simulation uses the full rectangular per-bin spectrum.  The
inversion path collapses each bin to its flux-weighted effective energy, so
the per-bin spectrum matrix becomes diagonal and the log-linearized data
follow a Gaussian model with a diagonal inverse covariance.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .linops import DimensionError, KroneckerMap, LinearMap


class ModelError(ValueError):
    """Measurement data violate the model's domain (e.g. nonpositive counts)."""


@dataclass(frozen=True)
class SpectrumTable:
    """Source flux and per-bin detector response on a shared energy grid."""

    energies: np.ndarray          # (n_energies,) keV
    source_flux: np.ndarray       # (n_energies,) photons per energy sample
    detector_response: np.ndarray  # (n_bins, n_energies), entries >= 0

    def __post_init__(self):
        e = np.asarray(self.energies, dtype=float)
        s = np.asarray(self.source_flux, dtype=float)
        d = np.atleast_2d(np.asarray(self.detector_response, dtype=float))
        if e.ndim != 1 or s.shape != e.shape or d.shape[1] != e.size:
            raise ValueError("spectrum arrays have inconsistent shapes")
        if np.any(s < 0) or np.any(d < 0):
            raise ValueError("spectrum entries must be nonnegative")
        if np.any((d @ np.where(s > 0, 1.0, 0.0)) <= 0):
            raise ValueError("every bin needs positive flux at some energy")
        object.__setattr__(self, "energies", e)
        object.__setattr__(self, "source_flux", s)
        object.__setattr__(self, "detector_response", d)

    @property
    def n_bins(self):
        return self.detector_response.shape[0]

    @property
    def n_energies(self):
        return self.energies.size

    @cached_property
    def effective_spectrum(self):
        """Per-bin effective spectrum: response row-scaled by source flux."""
        return self.detector_response * self.source_flux[None, :]

    def bin_flux(self):
        """Total effective flux per bin (the diagonal inversion spectrum)."""
        return self.effective_spectrum.sum(axis=1)

    def scaled(self, factor):
        return SpectrumTable(self.energies, self.source_flux * factor,
                             self.detector_response)

    def scaled_to_mean_bin_flux(self, target):
        """Rescale the source so the mean blank count per bin equals ``target``."""
        return self.scaled(target / self.bin_flux().mean())


@dataclass(frozen=True)
class MaterialBasis:
    """Linear attenuation of each basis material on the energy grid."""

    attenuation: np.ndarray   # (n_energies, n_materials)
    material_names: tuple

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.attenuation, dtype=float))
        if np.any(a < 0):
            raise ValueError("attenuation entries must be nonnegative")
        if a.shape[1] != len(self.material_names):
            raise ValueError("one name per material column required")
        for i in range(a.shape[1]):
            for j in range(i + 1, a.shape[1]):
                if np.allclose(a[:, i], a[:, j]):
                    raise ValueError(
                        f"materials {self.material_names[i]!r} and "
                        f"{self.material_names[j]!r} have identical attenuation"
                    )
        object.__setattr__(self, "attenuation", a)
        object.__setattr__(self, "material_names", tuple(self.material_names))

    @property
    def n_materials(self):
        return self.attenuation.shape[1]


def load_spectrum_csv(path):
    """Read ``energy_keV,flux,bin_1,...,bin_Nb`` rows into a SpectrumTable."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["energy_keV", "flux"]:
            raise ValueError(f"{path}: expected header energy_keV,flux,bin_1,...")
        rows = [[float(v) for v in row] for row in reader if row]
    data = np.asarray(rows)
    return SpectrumTable(data[:, 0], data[:, 1], data[:, 2:].T)


def load_materials_csv(path):
    """Read ``energy_keV,<name>,...`` rows into a MaterialBasis."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[0] != "energy_keV" or len(header) < 2:
            raise ValueError(f"{path}: expected header energy_keV,<material>,...")
        rows = [[float(v) for v in row] for row in reader if row]
    data = np.asarray(rows)
    basis = MaterialBasis(data[:, 1:], tuple(header[1:]))
    return data[:, 0], basis


def binned_attenuation(spec, basis):
    """Flux-weighted attenuation per detector bin (the inversion mixing matrix)."""
    eff = spec.effective_spectrum
    weights = eff / eff.sum(axis=1, keepdims=True)
    return weights @ basis.attenuation  # (n_bins, n_materials)


def equilibrate_columns(mix):
    """Rescale mixing-matrix columns to unit norm.

    Contrast agents attenuate orders of magnitude more per unit
    concentration than water, which cripples the normal equations'
    conditioning; solving in per-material natural units fixes it.  Returns
    the scaled matrix and the per-material unit sizes, so a solution ``z``
    in scaled units maps back to physical concentrations as
    ``x_m = unit[m] * z_m``.
    """
    mix = np.atleast_2d(np.asarray(mix, dtype=float))
    norms = np.linalg.norm(mix, axis=0)
    if np.any(norms <= 0):
        raise ValueError("mixing matrix has a zero column")
    units = 1.0 / norms
    return mix * units[None, :], units


def simulate_counts(spec, basis, radon, x, noise_seed=None):
    """Expected (or Poisson-sampled) photon counts for material image ``x``.

    Output is bin-major: index = bin * n_rays + ray.  ``noise_seed=None``
    returns the noiseless means.
    """
    x = np.asarray(x, dtype=float).ravel()
    n_m = basis.n_materials
    if x.size != n_m * radon.cols:
        raise DimensionError(
            f"material image has length {x.size}, expected {n_m * radon.cols}"
        )
    planes = x.reshape(n_m, radon.cols)
    # line integrals per energy: project the per-energy mixed image
    mixed = basis.attenuation @ planes            # (n_energies, n_pixels)
    paths = np.stack([radon.apply(m) for m in mixed])  # (n_energies, n_rays)
    means = spec.effective_spectrum @ np.exp(-paths)   # (n_bins, n_rays)
    if np.any(means <= 0):
        k, i = np.unravel_index(int(np.argmin(means)), means.shape)
        raise ModelError(f"nonpositive expected count in bin {k}, ray {i}")
    if noise_seed is None:
        return means.ravel()
    rng = np.random.default_rng(noise_seed)
    return rng.poisson(means).astype(float).ravel()


@dataclass(frozen=True)
class SpectralMeasurement:
    """Log-linearized measurement with per-element inverse variances."""

    photon_counts: np.ndarray
    log_data: np.ndarray
    inv_cov_diag: np.ndarray

    @property
    def size(self):
        return self.log_data.size


def log_linearize(spec, counts):
    """Normalize counts by per-bin flux, take the negative log, and attach
    the diagonal inverse covariance of the linearized Gaussian model.

    With a diagonal inversion spectrum the general inverse-covariance
    expression collapses elementwise to the raw counts:
    (p/s) * s * (1/p) * s * (p/s) = p.
    """
    counts = np.asarray(counts, dtype=float).ravel()
    s0 = spec.bin_flux()
    nb = spec.n_bins
    if counts.size % nb:
        raise DimensionError(
            f"count vector length {counts.size} is not divisible by {nb} bins"
        )
    bad = np.flatnonzero(counts <= 0)
    if bad.size:
        raise ModelError(
            f"nonpositive count at measurement index {int(bad[0])}"
            + (f" (+{bad.size - 1} more)" if bad.size > 1 else "")
        )
    per_bin = counts.reshape(nb, -1)
    normalized = per_bin / s0[:, None]
    return SpectralMeasurement(
        photon_counts=counts,
        log_data=-np.log(normalized).ravel(),
        inv_cov_diag=counts.copy(),
    )


def loss_eval(meas, A, x):
    """Half squared residual norm weighted by the inverse covariance."""
    r = A.apply(x) - meas.log_data
    return 0.5 * float(r @ (meas.inv_cov_diag * r))


def loss_gradient(meas, A, x):
    r = A.apply(x) - meas.log_data
    return A.adjoint_apply(meas.inv_cov_diag * r)


class SqrtLossMap(LinearMap):
    """Square root of the data-term Hessian: row-weighted forward operator.

    Exposes per-view block access so sketched solvers touch only sampled
    views.  Blocks are indexed by view and span all bins: block shape is
    (n_bins, n_detectors).
    """

    def __init__(self, kron, inv_cov_diag):
        if not isinstance(kron, KroneckerMap):
            raise TypeError("SqrtLossMap wraps a KroneckerMap forward operator")
        self.kron = kron
        self.rows = kron.rows
        self.cols = kron.cols
        w = np.asarray(inv_cov_diag, dtype=float).ravel()
        if w.size != kron.rows:
            raise DimensionError(
                f"inverse covariance has length {w.size}, expected {kron.rows}"
            )
        if np.any(w <= 0):
            raise ValueError("inverse covariance diagonal must be positive")
        self.weights = w
        self.sqrt_weights = np.sqrt(w)
        geom = kron.radon.geom
        self.n_views = geom.n_views
        self.n_detectors = geom.n_detectors
        self.n_bins = kron.n_out

    def apply(self, x):
        return self.sqrt_weights * self.kron.apply(x)

    def adjoint_apply(self, y):
        y = self._check(y, self.rows)
        return self.kron.adjoint_apply(self.sqrt_weights * y)

    def normal_apply(self, x):
        """Full data-term Hessian action A^T W A x."""
        return self.kron.adjoint_apply(self.weights * self.kron.apply(x))

    def _block_weights(self, views, power=0.5):
        w = self.weights.reshape(self.n_bins, self.n_views, self.n_detectors)
        sub = w[:, np.asarray(views, dtype=int), :].transpose(1, 0, 2)
        return np.sqrt(sub) if power == 0.5 else sub

    def apply_view_blocks(self, x, views):
        """Weighted rows of the sampled views: (len(views), n_bins, n_detectors)."""
        blocks = self.kron.apply_view_blocks(x, views)
        return blocks * self._block_weights(views)

    def adjoint_view_blocks(self, blocks, views):
        return self.kron.adjoint_view_blocks(
            np.asarray(blocks, dtype=float) * self._block_weights(views), views
        )

    def normal_apply_views(self, x, views, block_scale):
        """Restricted Hessian action: sum over sampled views of
        ``scale_v * (rows_v)^T rows_v x`` with per-view scale factors."""
        raw = self.kron.apply_view_blocks(x, views)
        w = self._block_weights(views, power=1.0)
        scaled = raw * w * np.asarray(block_scale, dtype=float)[:, None, None]
        return self.kron.adjoint_view_blocks(scaled, views)


def sqrt_hessian(meas, A):
    """LinearMap whose normal product is the data-term Hessian."""
    return SqrtLossMap(A, meas.inv_cov_diag)


def material_forward_operator(mix, radon):
    """Forward operator mapping stacked material images to bin-major data."""
    return KroneckerMap(mix, radon)

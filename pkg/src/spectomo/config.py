"""Run configuration: JSON ingestion, validation, and overrides.

A single JSON document drives every subcommand.  Command-line flags only
select the subcommand, the config path, and ``key.path=value`` overrides,
so a run directory's metadata fully reproduces the run.
"""

from __future__ import annotations

import copy
import importlib.resources
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .linops import RadonGeometry
from .phantom import Circle, PhantomSpec
from .spectral import load_materials_csv, load_spectrum_csv


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


def _get(d, path, default=None, required=False):
    node = d
    for part in path.split("."):
        if not isinstance(node, dict) or part not in node:
            if required:
                raise ConfigError(f"missing required config key: {path}")
            return default
        node = node[part]
    return node


def _expect(condition, message):
    if not condition:
        raise ConfigError(message)


@dataclass(frozen=True)
class RunConfig:
    """Validated run parameters plus the raw document they came from."""

    raw: dict
    geometry: RadonGeometry
    sim_geometry: RadonGeometry
    phantom: PhantomSpec
    spectrum_file: str
    materials_file: str
    noise_seed: int | None
    flux_scale: float
    double_grid: bool
    denoiser_name: str
    denoiser_params: dict
    nu: float
    fd_epsilon_scale: float
    mc_probes: int
    subsample_fraction: float
    s_blocks: int | None
    auto_sketch_size: bool
    epsilon_embed: float
    delta_embed: float
    score_probes: int
    sketch_seed: int
    solver: dict
    radon_kind: str
    threads: int
    output_dir: str

    def load_tables(self):
        spectrum = load_spectrum_csv(resolve_data_path(self.spectrum_file))
        energies, basis = load_materials_csv(resolve_data_path(self.materials_file))
        _expect(
            np.allclose(energies, spectrum.energies),
            "spectrum and materials files use different energy grids",
        )
        return spectrum.scaled_to_mean_bin_flux(self.flux_scale), basis


def resolve_data_path(name):
    """Resolve ``builtin:<name>`` to the packaged data file, else return as-is."""
    if name.startswith("builtin:"):
        resource = importlib.resources.files("spectomo") / "data" / (
            name[len("builtin:"):] + ".csv"
        )
        return str(resource)
    return name


def _parse_circles(items):
    circles = []
    for i, c in enumerate(items):
        try:
            circles.append(Circle(
                center_x=float(c["center_x"]),
                center_y=float(c["center_y"]),
                radius=float(c["radius"]),
                material=int(c["material"]),
                value=float(c["value"]),
            ))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"phantom.circles[{i}]: {exc}") from exc
    return tuple(circles)


def build_config(doc):
    """Validate a raw config dict into a RunConfig."""
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")

    side = int(_get(doc, "geometry.image_side", required=True))
    n_views = int(_get(doc, "geometry.n_views", required=True))
    n_det = int(_get(doc, "geometry.n_detectors", required=True))
    pixel_cm = float(_get(doc, "geometry.pixel_size_cm", 0.15))
    det_cm = float(_get(doc, "geometry.detector_spacing_cm", pixel_cm))
    angles = _get(doc, "geometry.angles")
    try:
        if angles is None:
            geometry = RadonGeometry.uniform(side, n_views, n_det, det_cm, pixel_cm)
        else:
            geometry = RadonGeometry(side, n_det, tuple(float(a) for a in angles),
                                     det_cm, pixel_cm)
            _expect(geometry.n_views == n_views,
                    "geometry.angles length must equal geometry.n_views")
    except ValueError as exc:
        raise ConfigError(f"geometry: {exc}") from exc

    double_grid = bool(_get(doc, "noise.double_grid", True))
    if double_grid:
        sim_geometry = RadonGeometry(
            2 * side, n_det, geometry.view_angles, det_cm, pixel_cm / 2.0
        )
    else:
        sim_geometry = geometry

    circles = _parse_circles(_get(doc, "phantom.circles", required=True))
    ph_side = int(_get(doc, "phantom.image_side", side))
    _expect(ph_side == side, "phantom.image_side must match geometry.image_side")
    phantom = PhantomSpec(side, circles)

    seed = _get(doc, "noise.seed")
    noise_enabled = bool(_get(doc, "noise.enabled", True))
    noise_seed = int(seed) if (noise_enabled and seed is not None) else None
    flux_scale = float(_get(doc, "noise.flux_scale", 2000.0))
    _expect(flux_scale > 0, "noise.flux_scale must be positive")

    denoiser_name = str(_get(doc, "red.denoiser", "gaussian_blur"))
    nu = float(_get(doc, "red.nu", 1e-3))
    _expect(nu > 0, "red.nu must be positive")

    fraction = float(_get(doc, "sketch.subsample_fraction", 1.0))
    _expect(0 < fraction <= 1, "sketch.subsample_fraction must lie in (0, 1]")
    s_blocks = _get(doc, "sketch.s_blocks")
    radon_kind = str(_get(doc, "geometry.radon", "ray"))
    _expect(radon_kind in ("ray", "fourier"),
            "geometry.radon must be 'ray' or 'fourier'")

    spectrum_file = str(_get(doc, "spectrum_file", "builtin:spectrum_80kvp_3bin"))
    materials_file = str(_get(doc, "materials_file", "builtin:materials_wig"))
    for label, path in (("spectrum_file", spectrum_file),
                        ("materials_file", materials_file)):
        resolved = resolve_data_path(path)
        if not path.startswith("builtin:") and not os.path.exists(resolved):
            raise ConfigError(f"{label}: no such file: {path}")

    solver = {
        "max_outer": int(_get(doc, "solver.max_outer", 15)),
        "cg_max_iters": int(_get(doc, "solver.cg_max_iters", 30)),
        "cg_rel_tol": float(_get(doc, "solver.cg_rel_tol", 1e-3)),
        "step_size": float(_get(doc, "solver.step_size", 1.0)),
        "full_hessian_mode": bool(_get(doc, "solver.full_hessian_mode", False)),
        "plateau_rel_tol": float(_get(doc, "solver.plateau_rel_tol", 1e-8)),
        "plateau_iters": int(_get(doc, "solver.plateau_iters", 3)),
        "max_backtracks": int(_get(doc, "solver.max_backtracks", 8)),
    }
    _expect(solver["cg_rel_tol"] > 0, "solver.cg_rel_tol must be positive")
    _expect(solver["max_outer"] >= 1, "solver.max_outer must be >= 1")

    return RunConfig(
        raw=copy.deepcopy(doc),
        geometry=geometry,
        sim_geometry=sim_geometry,
        phantom=phantom,
        spectrum_file=spectrum_file,
        materials_file=materials_file,
        noise_seed=noise_seed,
        flux_scale=flux_scale,
        double_grid=double_grid,
        denoiser_name=denoiser_name,
        denoiser_params=dict(_get(doc, "red.params", {}) or {}),
        nu=nu,
        fd_epsilon_scale=float(_get(doc, "red.fd_epsilon_scale", 1e-6)),
        mc_probes=int(_get(doc, "red.mc_probes", 1)),
        subsample_fraction=fraction,
        s_blocks=None if s_blocks is None else int(s_blocks),
        auto_sketch_size=bool(_get(doc, "sketch.auto_theorem_size", False)),
        epsilon_embed=float(_get(doc, "sketch.epsilon", 0.5)),
        delta_embed=float(_get(doc, "sketch.delta", 0.1)),
        score_probes=int(_get(doc, "sketch.probes", 16)),
        sketch_seed=int(_get(doc, "sketch.seed", 0)),
        solver=solver,
        radon_kind=radon_kind,
        threads=int(_get(doc, "threads", 0)),
        output_dir=str(_get(doc, "output_dir", required=True)),
    )


def load_config(path, overrides=()):
    """Read a JSON config (or a simulate meta.json) and apply overrides."""
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError:
        raise
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    if "config" in doc and isinstance(doc.get("config"), dict):
        doc = doc["config"]  # meta.json wraps the resolved config
    for item in overrides:
        doc = apply_override(doc, item)
    return build_config(doc)


def apply_override(doc, item):
    """Apply one ``key.path=value`` override; values parse as JSON when possible."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key.path=value")
    path, raw_value = item.split("=", 1)
    try:
        value = json.loads(raw_value)
    except json.JSONDecodeError:
        value = raw_value
    doc = copy.deepcopy(doc)
    node = doc
    parts = path.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {path!r} crosses a non-object value")
    node[parts[-1]] = value
    return doc


def desk_config(output_dir="runs/desk", **tweaks):
    """The default desk-scale experiment document."""
    doc = {
        "geometry": {
            "image_side": 64,
            "n_views": 60,
            "n_detectors": 96,
            "pixel_size_cm": 0.15,
            "radon": "ray",
        },
        "spectrum_file": "builtin:spectrum_80kvp_3bin",
        "materials_file": "builtin:materials_wig",
        "phantom": {
            "image_side": 64,
            "circles": [
                {"center_x": c.center_x, "center_y": c.center_y,
                 "radius": c.radius, "material": c.material, "value": c.value}
                for c in _desk_circles()
            ],
        },
        "noise": {"seed": 1234, "flux_scale": 2000.0, "enabled": True,
                  "double_grid": True},
        "red": {"denoiser": "gaussian_blur", "params": {"sigma": 1.5},
                "nu": 1e-3, "fd_epsilon_scale": 1e-6, "mc_probes": 1},
        "sketch": {"subsample_fraction": 1.0 / 3.0, "epsilon": 0.5,
                   "delta": 0.1, "probes": 16, "seed": 99},
        "solver": {"max_outer": 25, "cg_max_iters": 60, "cg_rel_tol": 1e-4,
                   "full_hessian_mode": False},
        "threads": 0,
        "output_dir": output_dir,
    }
    for key, value in tweaks.items():
        doc = apply_override(doc, f"{key}={json.dumps(value)}")
    return doc


def _desk_circles():
    from .phantom import desk_phantom

    return desk_phantom(64).circles

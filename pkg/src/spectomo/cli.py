"""Command-line entry points: simulate, reconstruct, compare, scores.

Every run is driven by one JSON config; flags only pick the subcommand,
the config path, and ``key.path=value`` overrides.  Exit codes: 0 success,
2 configuration error, 3 solver did not converge (stall or budget
exhausted), 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STALL = 3
EXIT_IO = 4

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)


def _peek_threads(path, overrides):
    """Read the thread budget from the raw JSON before numpy is imported."""
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError):
        return 0
    if isinstance(doc.get("config"), dict):
        doc = doc["config"]
    threads = doc.get("threads", 0)
    for item in overrides or ():
        if item.startswith("threads="):
            try:
                threads = int(item.split("=", 1)[1])
            except ValueError:
                pass
    try:
        return int(threads)
    except (TypeError, ValueError):
        return 0


def _apply_thread_budget(threads):
    if threads and threads > 0:
        for var in _THREAD_VARS:
            os.environ[var] = str(threads)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="spectomo",
        description="Spectral CT material decomposition via sketched Newton-CG",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_args(p):
        p.add_argument("--config", required=True, help="path to the JSON run config")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY.PATH=VALUE", help="override a config value")
        p.add_argument("--out", help="override output directory")

    p_sim = sub.add_parser("simulate", help="render the phantom and simulate counts")
    add_config_args(p_sim)

    p_rec = sub.add_parser("reconstruct", help="reconstruct material images")
    add_config_args(p_rec)
    p_rec.add_argument("--counts", help="run directory holding counts.bin "
                                        "(default: the config's output_dir)")

    p_cmp = sub.add_parser("compare", help="tabulate and plot finished runs")
    p_cmp.add_argument("runs", nargs="+", help="run directories to compare")
    p_cmp.add_argument("--out", required=True, help="comparison output directory")

    p_sc = sub.add_parser("scores", help="dump the view sampling distribution")
    add_config_args(p_sc)
    p_sc.add_argument("--counts", help="run directory holding counts.bin")

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    if getattr(args, "config", None):
        _apply_thread_budget(_peek_threads(args.config, args.overrides))

    from .config import ConfigError

    try:
        if args.command == "simulate":
            return cmd_simulate(args)
        if args.command == "reconstruct":
            return cmd_reconstruct(args)
        if args.command == "compare":
            return cmd_compare(args)
        if args.command == "scores":
            return cmd_scores(args)
        raise AssertionError(args.command)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


def _load(args):
    from .config import load_config

    cfg = load_config(args.config, args.overrides)
    if args.out:
        from .config import apply_override, build_config

        cfg = build_config(apply_override(cfg.raw, f"output_dir={args.out}"))
    return cfg


def _resolved_meta(cfg, spectrum, basis, extra):
    import numpy as np

    from . import __version__
    from .spectral import binned_attenuation

    doc = dict(cfg.raw)
    doc["output_dir"] = cfg.output_dir
    meta = {
        "config": doc,
        "derived": {
            "n_views": cfg.geometry.n_views,
            "n_detectors": cfg.geometry.n_detectors,
            "n_bins": spectrum.n_bins,
            "n_materials": basis.n_materials,
            "material_names": list(basis.material_names),
            "bin_flux": [float(v) for v in spectrum.bin_flux()],
            "binned_attenuation": np.round(
                binned_attenuation(spectrum, basis), 10
            ).tolist(),
            "sim_image_side": cfg.sim_geometry.image_side,
        },
        "notes": [
            "counts are Poisson-distributed; the reconstruction fits the "
            "Gaussian approximation of the log-linearized data, so the "
            "noise model and the fitted model intentionally differ",
        ],
        "version": __version__,
    }
    meta.update(extra)
    return meta


def cmd_simulate(args):
    import numpy as np

    from .files import ensure_dir, write_raw
    from .linops import RayRadon
    from .phantom import render_phantom
    from .spectral import simulate_counts

    cfg = _load(args)
    spectrum, basis = cfg.load_tables()
    truth = render_phantom(cfg.phantom, basis.n_materials)
    sim_phantom = cfg.phantom.scaled(cfg.sim_geometry.image_side)
    sim_image = render_phantom(sim_phantom, basis.n_materials)
    radon = RayRadon(cfg.sim_geometry)
    counts = simulate_counts(spectrum, basis, radon, sim_image,
                             noise_seed=cfg.noise_seed)

    out = ensure_dir(cfg.output_dir)
    write_raw(os.path.join(out, "counts.bin"), counts)
    write_raw(os.path.join(out, "truth.bin"), truth)
    meta = _resolved_meta(cfg, spectrum, basis, {
        "counts_shape": [spectrum.n_bins, cfg.geometry.n_views,
                         cfg.geometry.n_detectors],
        "truth_shape": [basis.n_materials, cfg.geometry.image_side,
                        cfg.geometry.image_side],
        "noiseless": cfg.noise_seed is None,
        "min_count": float(np.min(counts)),
    })
    with open(os.path.join(out, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    print(f"simulate: wrote {out}/counts.bin (min count {np.min(counts):.3g})")
    return EXIT_OK


def _build_problem(cfg, counts_dir, counter=None):
    import numpy as np

    from .config import ConfigError
    from .files import read_raw
    from .linops import FourierRadon, KroneckerMap, RayRadon
    from .spectral import binned_attenuation, equilibrate_columns, log_linearize

    spectrum, basis = cfg.load_tables()
    counts_path = os.path.join(counts_dir, "counts.bin")
    counts = read_raw(counts_path)
    expected = spectrum.n_bins * cfg.geometry.n_rays
    if counts.size != expected:
        raise ConfigError(
            f"{counts_path}: holds {counts.size} values, geometry expects {expected}"
        )
    meas = log_linearize(spectrum, counts)
    radon_cls = RayRadon if cfg.radon_kind == "ray" else FourierRadon
    radon = radon_cls(cfg.geometry, counter=counter)
    # solve in per-material natural units; physical concentrations are
    # unit[m] * z_m
    mix_scaled, units = equilibrate_columns(binned_attenuation(spectrum, basis))
    A = KroneckerMap(mix_scaled, radon)
    truth_path = os.path.join(counts_dir, "truth.bin")
    truth = read_raw(truth_path) if os.path.exists(truth_path) else None
    unit_per_pixel = np.repeat(units, cfg.geometry.n_pixels)
    truth_scaled = None if truth is None else truth / unit_per_pixel
    return spectrum, basis, meas, A, truth, truth_scaled, unit_per_pixel


def cmd_reconstruct(args):
    import numpy as np

    from .denoise import RedConfig, make_denoiser
    from .files import (ensure_dir, write_iterations_csv, write_pgm, write_raw,
                        write_sampling_csv)
    from .linops import RowAccessCounter
    from .phantom import rmse
    from .solver import SolverConfig, denoising_ihs

    cfg = _load(args)
    counts_dir = args.counts or cfg.output_dir
    counter = RowAccessCounter()
    (spectrum, basis, meas, A, truth, truth_scaled,
     unit_per_pixel) = _build_problem(cfg, counts_dir, counter=counter)

    den = make_denoiser(cfg.denoiser_name, cfg.geometry.image_side,
                        cfg.denoiser_params)
    red_cfg = RedConfig(nu=cfg.nu, fd_epsilon_scale=cfg.fd_epsilon_scale,
                        mc_probes=cfg.mc_probes)
    solver_cfg = SolverConfig(
        subsample_fraction=cfg.subsample_fraction,
        s_blocks=cfg.s_blocks,
        auto_sketch_size=cfg.auto_sketch_size,
        epsilon_embed=cfg.epsilon_embed,
        delta_embed=cfg.delta_embed,
        score_probes=cfg.score_probes,
        **cfg.solver,
    )
    result = denoising_ihs(meas, A, den, red_cfg, solver_cfg,
                           truth=truth_scaled, seed=cfg.sketch_seed,
                           counter=counter)
    x_physical = result.x * unit_per_pixel

    out = ensure_dir(cfg.output_dir)
    write_raw(os.path.join(out, "recon.bin"), x_physical)
    write_iterations_csv(os.path.join(out, "iterations.csv"), result.records)
    if any(r.sampled_views for r in result.records):
        write_sampling_csv(os.path.join(out, "sampling.csv"), result.records)
    meta = _resolved_meta(cfg, spectrum, basis, {
        "counts_dir": os.path.abspath(counts_dir),
        "material_units": [float(u) for u in unit_per_pixel[:: cfg.geometry.n_pixels]],
    })
    with open(os.path.join(out, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)

    side = cfg.geometry.image_side
    planes = x_physical.reshape(basis.n_materials, side, side)
    windows = {}
    for name, plane in zip(basis.material_names, planes):
        lo, hi = write_pgm(os.path.join(out, f"preview_{name}.pgm"), plane)
        windows[name] = [lo, hi]

    summary = {
        "final_cost": result.final_cost,
        "converged": result.converged,
        "stalled": result.stalled,
        "outer_iterations": len(result.records),
        "row_accesses": counter.rows,
        "denoiser_calls": result.records[-1].denoiser_calls,
        "preview_windows": windows,
        "notes": [
            "Poisson-simulated counts fitted with the Gaussian "
            "log-linearized model (intentional model mismatch)",
        ],
    }
    if truth is not None:
        err = rmse(x_physical, truth, basis.n_materials)
        summary["rmse"] = {
            "overall": err.overall,
            "per_material": dict(zip(basis.material_names, err.per_material)),
        }
    with open(os.path.join(out, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)

    status = "converged" if result.converged else (
        "stalled" if result.stalled else "budget exhausted"
    )
    print(f"reconstruct: {status} after {len(result.records)} outer iterations, "
          f"final cost {result.final_cost:.6g}, rows {counter.rows}")
    return EXIT_OK if result.converged else EXIT_STALL


def _read_run(run_dir):
    from .config import ConfigError
    from .files import read_iterations_csv

    needed = ["meta.json", "summary.json", "iterations.csv"]
    for name in needed:
        if not os.path.exists(os.path.join(run_dir, name)):
            raise ConfigError(f"{run_dir}: missing {name}; not a finished run")
    with open(os.path.join(run_dir, "meta.json"), encoding="utf-8") as fh:
        meta = json.load(fh)
    with open(os.path.join(run_dir, "summary.json"), encoding="utf-8") as fh:
        summary = json.load(fh)
    rows = read_iterations_csv(os.path.join(run_dir, "iterations.csv"))
    return meta, summary, rows


def cmd_compare(args):
    import csv

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .config import ConfigError
    from .files import ensure_dir

    if len(args.runs) < 2:
        raise ConfigError("compare needs at least two run directories")
    runs = []
    for run_dir in args.runs:
        meta, summary, rows = _read_run(run_dir)
        runs.append((os.path.basename(os.path.normpath(run_dir)) or run_dir,
                     meta, summary, rows))

    reference = json.dumps(runs[0][1]["config"].get("phantom"), sort_keys=True)
    for name, meta, _, _ in runs[1:]:
        if json.dumps(meta["config"].get("phantom"), sort_keys=True) != reference:
            raise ConfigError(
                f"run {name!r} uses a different phantom; refusing to compare"
            )

    out = ensure_dir(args.out)
    with open(os.path.join(out, "comparison.csv"), "w", newline="",
              encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run", "outer_iter", "cost", "row_accesses", "rmse"])
        for name, _, _, rows in runs:
            for row in rows:
                writer.writerow([
                    name, int(row["outer_iter"]), row["cost"],
                    int(row["row_accesses"]),
                    "" if row["rmse"] is None else row["rmse"],
                ])

    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    for name, _, _, rows in runs:
        work = [row["row_accesses"] for row in rows]
        cost = [row["cost"] for row in rows]
        ax.semilogy(work, cost, marker="o", markersize=3, label=name)
    ax.set_xlabel("cumulative projector row accesses")
    ax.set_ylabel("objective value")
    ax.legend()
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(os.path.join(out, "cost_vs_work.svg"))
    plt.close(fig)

    lines = ["| run | final cost | row accesses | overall RMSE |",
             "|---|---|---|---|"]
    material_names = []
    for name, _, summary, _ in runs:
        rmse_info = summary.get("rmse", {})
        overall = rmse_info.get("overall")
        lines.append(
            f"| {name} | {summary['final_cost']:.6g} | "
            f"{summary['row_accesses']} | "
            f"{'' if overall is None else format(overall, '.6g')} |"
        )
        if rmse_info.get("per_material"):
            material_names = list(rmse_info["per_material"])
    if material_names:
        lines.append("")
        lines.append("| run | " + " | ".join(material_names) + " |")
        lines.append("|---|" + "---|" * len(material_names))
        for name, _, summary, _ in runs:
            per = summary.get("rmse", {}).get("per_material", {})
            lines.append(
                f"| {name} | "
                + " | ".join(format(per.get(m, float("nan")), ".6g")
                             for m in material_names)
                + " |"
            )
    with open(os.path.join(out, "rmse_table.md"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")

    print(f"compare: wrote {out}/comparison.csv, cost_vs_work.svg, rmse_table.md")
    return EXIT_OK


def cmd_scores(args):
    import csv

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    import numpy as np

    from .denoise import RedConfig, make_denoiser, ridge_penalty_scalar
    from .files import ensure_dir
    from .sketch import estimate_block_scores_fft

    cfg = _load(args)
    counts_dir = args.counts or cfg.output_dir
    spectrum, basis, meas, A, _, _, _ = _build_problem(cfg, counts_dir)

    den = make_denoiser(cfg.denoiser_name, cfg.geometry.image_side,
                        cfg.denoiser_params)
    red_cfg = RedConfig(nu=cfg.nu, fd_epsilon_scale=cfg.fd_epsilon_scale,
                        mc_probes=cfg.mc_probes)
    x0 = np.zeros(A.cols)
    lam = ridge_penalty_scalar(den, red_cfg, x0, seed=cfg.sketch_seed)
    scores = estimate_block_scores_fft(
        cfg.geometry, A.mix, meas.inv_cov_diag, lam,
        probes=cfg.score_probes, seed=cfg.sketch_seed,
    )
    probs = scores.probabilities()

    out = ensure_dir(cfg.output_dir)
    with open(os.path.join(out, "scores.csv"), "w", newline="",
              encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["view", "angle_rad", "block_score", "probability"])
        for v, (ang, s, p) in enumerate(zip(cfg.geometry.angles(),
                                            scores.per_block, probs)):
            writer.writerow([v, f"{ang:.10g}", f"{s:.10g}", f"{p:.10g}"])

    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    ax.bar(np.degrees(cfg.geometry.angles()), probs,
           width=0.8 * 180 / cfg.geometry.n_views)
    ax.set_xlabel("view angle (degrees)")
    ax.set_ylabel("sampling probability")
    ax.set_title(f"ridge {lam:.4g}, total score {scores.total:.4g}")
    fig.tight_layout()
    fig.savefig(os.path.join(out, "scores.svg"))
    plt.close(fig)

    print(f"scores: wrote {out}/scores.csv and scores.svg "
          f"(ridge {lam:.4g}, total {scores.total:.4g})")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

import json
import os

import numpy as np
import pytest

from spectomo.cli import main
from spectomo.config import desk_config
from spectomo.files import read_iterations_csv, read_raw


def small_config(out_dir, **tweaks):
    doc = desk_config(output_dir=str(out_dir))
    doc["geometry"].update({"image_side": 24, "n_views": 16, "n_detectors": 36})
    doc["phantom"]["image_side"] = 24
    doc["solver"].update({"max_outer": 5, "cg_max_iters": 25})
    for key, value in tweaks.items():
        node = doc
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return doc


def write_config(tmp_path, doc, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


class TestSimulate:
    def test_deterministic_given_seed(self, tmp_path):
        doc = small_config(tmp_path / "run")
        cfg = write_config(tmp_path, doc)
        assert main(["simulate", "--config", cfg]) == 0
        first = (tmp_path / "run" / "counts.bin").read_bytes()
        assert main(["simulate", "--config", cfg]) == 0
        assert (tmp_path / "run" / "counts.bin").read_bytes() == first

    def test_zero_phantom_noiseless_counts_are_bin_fluxes(self, tmp_path):
        doc = small_config(tmp_path / "run", **{"noise.enabled": False})
        doc["phantom"]["circles"] = []
        cfg = write_config(tmp_path, doc)
        assert main(["simulate", "--config", cfg]) == 0
        counts = read_raw(tmp_path / "run" / "counts.bin").reshape(3, -1)
        meta = json.loads((tmp_path / "run" / "meta.json").read_text())
        for k, flux in enumerate(meta["derived"]["bin_flux"]):
            assert np.allclose(counts[k], flux, rtol=1e-6)

    def test_counts_positive_at_reference_flux(self, tmp_path):
        doc = small_config(tmp_path / "run")
        cfg = write_config(tmp_path, doc)
        assert main(["simulate", "--config", cfg]) == 0
        counts = read_raw(tmp_path / "run" / "counts.bin")
        assert counts.min() >= 1.0

    def test_meta_records_resolved_parameters(self, tmp_path):
        doc = small_config(tmp_path / "run")
        cfg = write_config(tmp_path, doc)
        main(["simulate", "--config", cfg])
        meta = json.loads((tmp_path / "run" / "meta.json").read_text())
        assert meta["config"]["geometry"]["image_side"] == 24
        assert meta["derived"]["n_bins"] == 3
        assert meta["counts_shape"] == [3, 16, 36]


class TestReconstruct:
    def test_identity_full_hessian_noiseless_recovers_truth(self, tmp_path):
        doc = small_config(
            tmp_path / "run",
            **{
                "noise.enabled": False,
                "noise.double_grid": False,
                "red.denoiser": "identity",
                "red.params": {},
                "solver.full_hessian_mode": True,
                "solver.cg_max_iters": 2000,
                "solver.cg_rel_tol": 1e-12,
                "solver.max_outer": 6,
            },
        )
        cfg = write_config(tmp_path, doc)
        assert main(["simulate", "--config", cfg]) == 0
        code = main(["reconstruct", "--config", cfg])
        assert code in (0, 3)
        summary = json.loads((tmp_path / "run" / "summary.json").read_text())
        assert summary["rmse"]["overall"] <= 1e-4

    def test_row_access_ratio_sketched_vs_full(self, tmp_path):
        doc = small_config(
            tmp_path / "sk",
            **{"solver.plateau_iters": 10**6, "solver.max_outer": 6},
        )
        cfg = write_config(tmp_path, doc)
        main(["simulate", "--config", cfg])
        assert main(["reconstruct", "--config", cfg]) in (0, 3)
        full_out = str(tmp_path / "fu")
        assert main([
            "reconstruct", "--config", cfg, "--counts", str(tmp_path / "sk"),
            "--set", "sketch.subsample_fraction=1.0", "--out", full_out,
        ]) in (0, 3)
        sk = json.loads((tmp_path / "sk" / "summary.json").read_text())
        fu = json.loads((tmp_path / "fu" / "summary.json").read_text())
        assert sk["row_accesses"] <= 0.5 * fu["row_accesses"]

    def test_malformed_config_exits_2_without_outputs(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text('{"geometry": {"image_side": 24}}')  # missing keys
        assert main(["simulate", "--config", str(bad)]) == 2
        assert not (tmp_path / "run").exists()
        garbage = tmp_path / "garbage.json"
        garbage.write_text("{not json")
        assert main(["simulate", "--config", str(garbage)]) == 2

    def test_missing_counts_exits_4(self, tmp_path):
        doc = small_config(tmp_path / "run")
        cfg = write_config(tmp_path, doc)
        assert main(["reconstruct", "--config", cfg]) == 4

    def test_rerun_from_meta_reproduces_recon_bit_exactly(self, tmp_path):
        doc = small_config(tmp_path / "run", **{"solver.max_outer": 3})
        cfg = write_config(tmp_path, doc)
        main(["simulate", "--config", cfg])
        assert main(["reconstruct", "--config", cfg]) in (0, 3)
        recon = (tmp_path / "run" / "recon.bin").read_bytes()
        redo = str(tmp_path / "redo")
        assert main([
            "reconstruct", "--config", str(tmp_path / "run" / "meta.json"),
            "--counts", str(tmp_path / "run"), "--out", redo,
        ]) in (0, 3)
        assert (tmp_path / "redo" / "recon.bin").read_bytes() == recon

    def test_iteration_log_schema(self, tmp_path):
        doc = small_config(tmp_path / "run", **{"solver.max_outer": 3})
        cfg = write_config(tmp_path, doc)
        main(["simulate", "--config", cfg])
        main(["reconstruct", "--config", cfg])
        rows = read_iterations_csv(tmp_path / "run" / "iterations.csv")
        assert len(rows) == 3
        assert list(rows[0]) == [
            "outer_iter", "cost", "grad_norm", "rmse", "wall_time_s",
            "row_accesses", "cg_iters", "sum_block_scores", "lambda_ridge",
        ]
        assert (tmp_path / "run" / "sampling.csv").exists()
        for name in ("water", "iodine", "gadolinium"):
            assert (tmp_path / "run" / f"preview_{name}.pgm").exists()


class TestCompare:
    def _two_runs(self, tmp_path, same=True):
        doc = small_config(tmp_path / "a", **{"solver.max_outer": 3})
        cfg = write_config(tmp_path, doc, "a.json")
        main(["simulate", "--config", cfg])
        main(["reconstruct", "--config", cfg])
        if same:
            doc_b = small_config(tmp_path / "b", **{"solver.max_outer": 3})
        else:
            doc_b = small_config(tmp_path / "b", **{"solver.max_outer": 3})
            doc_b["phantom"]["circles"] = doc_b["phantom"]["circles"][:2]
        cfg_b = write_config(tmp_path, doc_b, "b.json")
        main(["simulate", "--config", cfg_b])
        main(["reconstruct", "--config", cfg_b])
        return str(tmp_path / "a"), str(tmp_path / "b")

    def test_identical_runs_identical_curves(self, tmp_path):
        a, b = self._two_runs(tmp_path, same=True)
        out = str(tmp_path / "cmp")
        assert main(["compare", a, b, "--out", out]) == 0
        import csv

        with open(os.path.join(out, "comparison.csv"), newline="") as fh:
            rows = list(csv.DictReader(fh))
        by_run = {}
        for row in rows:
            by_run.setdefault(row["run"], []).append((row["cost"], row["rmse"]))
        assert by_run["a"] == by_run["b"]
        assert os.path.exists(os.path.join(out, "cost_vs_work.svg"))
        table = open(os.path.join(out, "rmse_table.md")).read()
        assert "| a |" in table and "| b |" in table

    def test_mismatched_phantoms_refused(self, tmp_path):
        a, b = self._two_runs(tmp_path, same=False)
        assert main(["compare", a, b, "--out", str(tmp_path / "cmp")]) == 2

    def test_three_runs_three_rows(self, tmp_path):
        a, b = self._two_runs(tmp_path, same=True)
        c_dir = str(tmp_path / "c")
        doc = small_config(tmp_path / "c", **{"solver.max_outer": 2})
        cfg = write_config(tmp_path, doc, "c.json")
        main(["simulate", "--config", cfg])
        main(["reconstruct", "--config", cfg])
        out = str(tmp_path / "cmp3")
        assert main(["compare", a, b, c_dir, "--out", out]) == 0
        table = open(os.path.join(out, "rmse_table.md")).read()
        body = [ln for ln in table.splitlines()
                if ln.startswith("|") and "final cost" not in ln
                and "---" not in ln]
        # first table: one row per run
        assert len([ln for ln in body if ln.split("|")[1].strip() in
                    ("a", "b", "c")]) >= 3


class TestScores:
    def test_scores_outputs(self, tmp_path):
        doc = small_config(tmp_path / "run")
        cfg = write_config(tmp_path, doc)
        main(["simulate", "--config", cfg])
        assert main(["scores", "--config", cfg]) == 0
        import csv

        with open(tmp_path / "run" / "scores.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 16
        probs = np.array([float(r["probability"]) for r in rows])
        assert probs.sum() == pytest.approx(1.0, abs=1e-9)
        assert (tmp_path / "run" / "scores.svg").exists()

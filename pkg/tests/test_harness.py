import csv
import io
import json
import math
import statistics
from pathlib import Path

import numpy as np
import pytest

from neuroloc import harness
from neuroloc import io as nio


def small_config(noise_db=21.6, dp_iters=8, seeds=(0, 1), **kw):
    cfg = harness.ExperimentConfig(
        headmodel=harness.HeadModelConfig(region_radius_mm=40.0, n_sensors=30),
        source=harness.SourceConfig(nearest_to=[10.0, 10.0, 20.0], moment=[0.0, 40.0, 10.0]),
        noise=harness.NoiseConfig(target_psnr_db=noise_db),
        solvers=[harness.SolverConfig("mne", lambda_grid=[0.01, 1.0, 100.0]),
                 harness.SolverConfig("sloreta", lambda_grid=[0.01, 1.0]),
                 harness.SolverConfig("deep_prior", lambda_grid=[0.0, 1.0], p_grid=[0.5],
                                      dp={"iterations": dp_iters, "snapshot_every": 4})],
        seeds=list(seeds),
        name="small",
    )
    for k, v in kw.items():
        setattr(cfg, k, v)
    return cfg.validate()


@pytest.fixture(scope="module")
def sweep(tmp_path_factory):
    out = tmp_path_factory.mktemp("sweep")
    return harness.run_experiment(small_config(), output_dir=out), out


class TestConfig:
    def test_builtin_configs(self):
        shallow = harness.builtin_config("shallow-analog")
        deep = harness.builtin_config("deep-analog")
        assert np.linalg.norm(deep.source.nearest_to) == pytest.approx(0.35 * 70)
        assert np.linalg.norm(shallow.source.nearest_to) == pytest.approx(0.75 * 70)
        # tangential moment
        assert abs(np.dot(deep.source.nearest_to, deep.source.moment)) < 1e-9
        assert deep.config_hash() != shallow.config_hash()

    @pytest.mark.parametrize("name", ["shallow-analog", "deep-analog"])
    def test_shipped_toml_matches_builtin(self, name):
        path = Path(__file__).resolve().parents[1] / "configs" / f"{name}.toml"
        assert harness.load_config(path) == harness.builtin_config(name)

    def test_hash_ignores_output_dir(self):
        a = small_config()
        b = small_config(output_dir="elsewhere")
        assert a.config_hash() == b.config_hash()
        assert a.config_hash() != small_config(seeds=(0, 2)).config_hash()

    def test_dict_roundtrip(self):
        cfg = small_config()
        back = harness.ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert back == cfg

    def test_toml_and_json_loading(self, tmp_path):
        (tmp_path / "c.toml").write_text(
            'name = "t"\nseeds = [0]\n[noise]\ntarget_psnr_db = inf\n'
            '[[solvers]]\nmethod = "sloreta"\nlambda_grid = [0.1, 1.0]\n')
        cfg = harness.load_config(tmp_path / "c.toml")
        assert math.isinf(cfg.noise.target_psnr_db)
        assert cfg.solvers[0].p_grid == [0.0]
        (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
        assert harness.load_config(tmp_path / "c.json").config_hash() == cfg.config_hash()
        assert harness.load_config("builtin:deep-analog").name == "deep-analog"

    @pytest.mark.parametrize("solver, msg", [
        (dict(method="lasso"), "unknown method"),
        (dict(method="mne", lambda_grid=[]), "empty"),
        (dict(method="mne", lambda_grid=[1.0, 0.1]), "increasing"),
        (dict(method="mne", lambda_grid=[-1.0]), ">= 0"),
        (dict(method="sloreta", p_grid=[0.5]), "depth weighting"),
        (dict(method="deep_prior", dp={"momentum": 0.9}), "unknown deep-prior"),
    ])
    def test_validation(self, solver, msg):
        with pytest.raises(ValueError, match=msg):
            harness.ExperimentConfig(solvers=[harness.SolverConfig(**solver)]).validate()

    def test_geometry_and_seed_validation(self):
        with pytest.raises(ValueError, match="radius"):
            harness.ExperimentConfig(headmodel=harness.HeadModelConfig(region_radius_mm=95.0),
                                     solvers=[harness.SolverConfig("mne")]).validate()
        with pytest.raises(ValueError, match="unique"):
            harness.ExperimentConfig(solvers=[harness.SolverConfig("mne")],
                                     seeds=[1, 1]).validate()

    def test_default_grids(self):
        assert harness.default_lambda_grid("deep_prior")[0] == 0.0
        assert len(harness.default_lambda_grid("mne")) == 13
        assert harness.SolverConfig("mne").p_grid == [0.0, 0.5]


class TestSweep:
    def test_cells_and_files(self, sweep):
        result, out = sweep
        assert result.all_ok
        # linear solvers once per (p, lambda); deep prior once per seed
        assert len(result.rows) == 3 * 2 + 2 + 2 * 2
        for name in ("results.json", "results.csv", "observation.json", "observation.bin"):
            assert (out / name).exists()
        cell_dir = out / "cells" / result.config_hash
        for r in result.rows:
            est = nio.load_estimate(cell_dir / r["estimate"])
            assert est.method == r["method"] and est.lam == r["lambda"]
            assert ("trace" in r) == (r["method"] == "deep_prior")

    def test_observation_shared_by_cells(self, sweep):
        result, out = sweep
        obs = nio.load_observation(out / "observation")
        assert obs.psnr_db == pytest.approx(21.6, abs=1e-9)
        assert result.observation["psnr_db"] == obs.psnr_db

    def test_results_csv_layout(self, sweep):
        _, out = sweep
        rows = list(csv.DictReader(io.StringIO((out / "results.csv").read_text())))
        assert tuple(rows[0]) == harness.RESULTS_CSV_FIELDS
        assert [r["seed"] for r in rows if r["method"] == "sloreta"] == ["", ""]

    def test_best_rows_are_grid_minima(self, sweep):
        result, _ = sweep
        for b in result.best:
            errs = {}
            for r in result.series(b["method"], b["p"]):
                errs.setdefault(r["lambda"], []).append(r["localization_error_mm"])
            meds = {lam: statistics.median(v) for lam, v in errs.items()}
            assert b["median_error_mm"] == min(meds.values())
            assert b["lambda"] == min(lam for lam, m in meds.items() if m == min(meds.values()))

    def test_load_roundtrip_and_tamper_detection(self, sweep, tmp_path):
        result, out = sweep
        back = harness.SweepResult.load(out / "results.json")
        assert back.rows == result.rows and back.best == result.best
        d = json.loads((out / "results.json").read_text())
        d["best"][0]["median_error_mm"] += 1.0
        (tmp_path / "results.json").write_text(json.dumps(d))
        with pytest.raises(ValueError, match="best row"):
            harness.SweepResult.load(tmp_path / "results.json")

    def test_resume_reuses_cells(self, sweep, monkeypatch):
        result, out = sweep
        calls = []
        monkeypatch.setattr(harness, "solve_cell", lambda *a, **k: calls.append(a))
        again = harness.run_experiment(small_config(), output_dir=out)
        assert calls == []
        assert (out / "results.csv").read_text() == harness.results_csv(result)
        assert again.best == result.best

    def test_partial_resume(self, sweep, tmp_path):
        result, out = sweep
        fresh = tmp_path / "fresh"
        cell_dir = fresh / "cells" / result.config_hash
        cell_dir.mkdir(parents=True)
        keep = result.rows[0]["key"]
        src = out / "cells" / result.config_hash
        for suffix in (".json", ".est.json", ".est.bin"):
            (cell_dir / f"{keep}{suffix}").write_bytes((src / f"{keep}{suffix}").read_bytes())
        seen = []
        harness.run_experiment(small_config(), output_dir=fresh, progress=seen.append)
        assert len(seen) == len(result.rows) - 1
        assert keep not in {r["key"] for r in seen}
        assert (fresh / "results.csv").read_text() == (out / "results.csv").read_text()

    def test_errors_are_recorded_per_cell(self, tmp_path, monkeypatch):
        real = harness.solve_cell

        def flaky(problem, method, *a, **k):
            if method == "mne":
                raise RuntimeError("boom")
            return real(problem, method, *a, **k)

        monkeypatch.setattr(harness, "solve_cell", flaky)
        result = harness.run_experiment(small_config(), output_dir=tmp_path)
        bad = [r for r in result.rows if r["status"] != "ok"]
        assert bad and all(r["method"] == "mne" for r in bad)
        assert all("boom" in r["status"] for r in bad)
        assert not result.all_ok
        assert {b["method"] for b in result.best} == {"sloreta", "deep_prior"}

    def test_noiseless_sloreta_is_exact(self, tmp_path):
        cfg = small_config(noise_db=math.inf)
        cfg.solvers = [harness.SolverConfig("sloreta", lambda_grid=[1e-4, 1e-2, 1.0])]
        result = harness.run_experiment(cfg, output_dir=tmp_path)
        (best,) = result.best
        assert best["median_error_mm"] == 0.0

    def test_results_csv_is_byte_identical(self, sweep, tmp_path):
        _, out = sweep
        again = tmp_path / "again"
        harness.run_experiment(small_config(), output_dir=again)
        assert (again / "results.csv").read_bytes() == (out / "results.csv").read_bytes()

    def test_worker_pool_matches_serial(self, sweep, tmp_path):
        _, out = sweep
        harness.run_experiment(small_config(), output_dir=tmp_path, workers=2)
        assert (tmp_path / "results.csv").read_bytes() == (out / "results.csv").read_bytes()


class TestEmitters:
    def test_table_sorted_with_hash_footer(self, sweep):
        result, _ = sweep
        text, table_csv = harness.emit_table(result)
        lines = text.splitlines()
        assert lines[0].split() == ["method", "p", "best_lambda", "median_error_mm", "n_seeds"]
        assert lines[-1] == f"config_hash: {result.config_hash}"
        rows = list(csv.reader(io.StringIO(table_csv)))
        assert rows[-1] == [f"# config_hash={result.config_hash}"]
        body = rows[1:-1]
        assert len(body) == len(result.best) == 4
        keys = [(r[0], float(r[3]), float(r[1])) for r in body]
        assert keys == sorted(keys)

    def test_plotdata_medians(self, sweep):
        result, _ = sweep
        series, plot_csv = harness.emit_sweep_plotdata(result)
        assert set(series) == {"mne/p=0", "mne/p=0.5", "sloreta/p=0", "deep_prior/p=0.5"}
        for s in series.values():
            assert s["lambda"] == sorted(s["lambda"])
            for lam, med, lo, hi, n in zip(s["lambda"], s["median"], s["min"], s["max"], s["n"]):
                errs = [r["localization_error_mm"] for r in result.series(s["method"], s["p"])
                        if r["lambda"] == lam]
                assert med == statistics.median(errs)
                assert (lo, hi, n) == (min(errs), max(errs), len(errs))
        assert series["deep_prior/p=0.5"]["n"] == [2, 2]
        assert len(plot_csv.splitlines()) == 1 + sum(len(s["lambda"]) for s in series.values())

    def test_slices(self, sweep, tmp_path):
        result, out = sweep
        cfg = harness.ExperimentConfig.from_dict(result.config)
        space, truth = harness.build_truth(cfg)
        row = next(r for r in result.rows if r["method"] == "sloreta")
        est = nio.load_estimate(out / "cells" / result.config_hash / row["estimate"])
        sl = harness.emit_slices(est, space, truth)
        k = int(np.argmax(est.per_point_amplitude))
        ix, iy, iz = sl["argmax_index"]
        vol = harness.amplitude_volume(est, space)
        peak = est.per_point_amplitude[k]
        for name, plane in sl["planes"].items():
            assert plane["grid"].max() == peak
        assert sl["planes"]["xy"]["grid"].shape == space.grid_dims[:2]
        assert vol[ix, iy, iz] == peak
        t = sl["truth_index"]
        np.testing.assert_allclose(space.origin + np.array(t) * space.grid_spacing,
                                   truth.location)
        assert sl["planes"]["xz"]["truth_marker"] == [t[0], t[2]]
        written = harness.write_slices(sl, tmp_path, prefix="c")
        assert [p.name for p in written] == ["c_xz.csv", "c_yz.csv", "c_xy.csv"]
        first = written[0].read_text().splitlines()
        assert first[0].startswith("# plane=xz")
        assert len(first) == 1 + space.grid_dims[0]

import csv
import json
from dataclasses import replace

import numpy as np
import pytest

from cate_fusion.bench import (
    AGGREGATE_FIELDS,
    RECORD_FIELDS,
    ExperimentResult,
    ExperimentSpec,
    aggregate,
    child_seeds,
    emit,
    emit_heatmap_table,
    load_spec,
    parse_spec,
    point_config,
    run_experiment,
    run_task,
    summarize,
)
from cate_fusion.dgp import DgpConfig, generate
from cate_fusion.estimators import EstimatorConfig
from cate_fusion.exceptions import ConfigParse

TINY = """
experiment = custom
parameter = dgp.v_coef_mag
grid = 0.5,1.0
n_replicates = 2
methods = racer,mr_oscar
seed = 11
dgp.p = 20
dgp.n_r = 60
dgp.n_o = 120
dgp.n_eval = 50
estimator.path_length = 20
estimator.cv_folds = 3
estimator.n_crossfit_folds = 3
"""


@pytest.fixture(scope="module")
def tiny_spec():
    return parse_spec(TINY)


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory, tiny_spec):
    out = tmp_path_factory.mktemp("tiny")
    return out, run_experiment(tiny_spec, out=out)


class TestConfig:
    def test_empty_file_gives_defaults(self, tmp_path):
        (tmp_path / "e.cfg").write_text("")
        spec = load_spec(tmp_path / "e.cfg")
        assert spec == ExperimentSpec()
        assert spec.dgp.partition.p_u == 30 and spec.n_replicates == 50
        assert spec.grid == (0.3, 0.5, 0.7, 0.9, 1.1, 1.3)

    def test_unknown_field(self):
        with pytest.raises(ConfigParse) as err:
            parse_spec("dgp.rho = 0.4\ndgp.bogus = 1\n")
        assert err.value.field == "dgp.bogus" and err.value.line == 2
        assert "dgp.bogus" in str(err.value)

    def test_bad_value(self):
        with pytest.raises(ConfigParse) as err:
            parse_spec("n_replicates = many")
        assert err.value.field == "n_replicates"

    def test_missing_equals(self):
        with pytest.raises(ConfigParse):
            parse_spec("experiment v_effect_sweep")

    def test_invalid_dgp_value(self):
        with pytest.raises(ConfigParse):
            parse_spec("dgp.f1 = 0.5\ndgp.f2 = 0.5")

    def test_round_trip(self, tiny_spec):
        spec = replace(
            tiny_spec,
            compute_ci=True,
            dgp=replace(tiny_spec.dgp, r2_target=0.3, lambda_seed=4),
            estimator=EstimatorConfig(stage_rules={"final": "1se"}, fixed_lambdas={"discrepancy": 0.25}),
        )
        assert parse_spec(emit(spec)) == spec
        default = ExperimentSpec()
        assert parse_spec(emit(default)) == default

    def test_comments_and_lists(self):
        spec = parse_spec("# header\nmethods = racer, r_oscar  # two\ngrid = 1, 2\nexperiment = nr_sweep\n")
        assert spec.methods == ("racer", "r_oscar") and spec.grid == (1.0, 2.0)

    def test_unknown_method_and_experiment(self):
        with pytest.raises(ConfigParse):
            parse_spec("methods = racer,tlearner")
        with pytest.raises(ConfigParse):
            parse_spec("experiment = forest_sweep")
        with pytest.raises(ConfigParse):
            parse_spec("experiment = custom\ngrid = 1\nparameter = dgp.nope")


class TestSeedsAndPoints:
    def test_child_seeds_distinct_and_stable(self):
        seeds = [child_seeds(5, r) for r in range(50)]
        assert len({s for pair in seeds for s in pair}) == 100
        assert child_seeds(5, 3) == seeds[3]

    def test_v_sweep_fixes_blocks(self):
        spec = ExperimentSpec(dgp=DgpConfig(p=50, f1=0.1, f2=0.1))
        cfg = point_config(spec, 0.9, 1)
        assert (cfg.p, cfg.f1, cfg.f2, cfg.v_coef_mag) == (100, 0.3, 0.3, 0.9)

    def test_heatmap_points(self):
        spec = ExperimentSpec(experiment="mismatch_heatmap")
        assert len(spec.points) == 36 and spec.points[1] == (0.0, 0.1)

    def test_r2_points_share_lambda(self):
        spec = ExperimentSpec(experiment="r2_sweep", seed=9)
        a, b = point_config(spec, 0.2, 1), point_config(spec, 0.8, 2)
        assert a.lambda_seed == b.lambda_seed == 9

    def test_matched_data_across_methods(self, tiny_spec, monkeypatch):
        seen = []
        import cate_fusion.bench as bench

        real = bench.fit_method

        def spy(method, fused, cfg):
            seen.append((method, fused.rct.outcome.copy(), cfg.seed))
            return real(method, fused, cfg)

        monkeypatch.setattr(bench, "fit_method", spy)
        run_task(tiny_spec, 0, 1)
        assert [s[0] for s in seen] == ["racer", "mr_oscar"]
        np.testing.assert_array_equal(seen[0][1], seen[1][1])
        assert seen[0][2] == seen[1][2]


class TestRun:
    def test_record_count_and_files(self, tiny_run, tiny_spec):
        out, res = tiny_run
        assert len(res.records) == len(tiny_spec.grid) * len(tiny_spec.methods) * tiny_spec.n_replicates
        for name in ("records.csv", "aggregate.csv", "timings.csv", "metadata.json"):
            assert (out / name).exists()
        assert not (out / ".incomplete").exists()
        meta = json.loads((out / "metadata.json").read_text())
        assert meta["complete"] and parse_spec(meta["spec"]) == tiny_spec
        header = (out / "records.csv").read_text().splitlines()[0].split(",")
        assert tuple(header) == RECORD_FIELDS

    def test_byte_identical_rerun(self, tiny_run, tiny_spec, tmp_path):
        out, _ = tiny_run
        run_experiment(tiny_spec, out=tmp_path)
        for name in ("records.csv", "aggregate.csv"):
            assert (tmp_path / name).read_bytes() == (out / name).read_bytes()

    def test_aggregate_consistency(self, tiny_run):
        out, res = tiny_run
        loaded = ExperimentResult.load(out)
        with open(out / "aggregate.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert tuple(rows[0]) == AGGREGATE_FIELDS
        for row in rows:
            vals = np.array([
                r["rmse"] for r in loaded.records
                if r["grid_index"] == int(row["grid_index"]) and r["method"] == row["method"] and not r["error"]
            ])
            assert abs(vals.mean() - float(row["mean_rmse"])) < 1e-12
            assert abs(vals.std(ddof=1) - float(row["sd_rmse"])) < 1e-12

    def test_rmse_matches_direct_fit(self, tiny_run, tiny_spec):
        from cate_fusion.dgp import true_cate_rmse
        from cate_fusion.estimators import fit_method

        _, res = tiny_run
        rec = next(r for r in res.records if r["grid_index"] == 1 and r["replicate"] == 0 and r["method"] == "mr_oscar")
        data_seed, est_seed = child_seeds(tiny_spec.seed, 0)
        fused, truth, ev = generate(point_config(tiny_spec, 1.0, data_seed))
        est = fit_method("mr_oscar", fused, replace(tiny_spec.estimator, method="mr_oscar", seed=est_seed))
        assert rec["rmse"] == true_cate_rmse(est, ev, truth)

    def test_single_record(self, tmp_path):
        spec = parse_spec(TINY.replace("grid = 0.5,1.0", "grid = 0.5").replace("n_replicates = 2", "n_replicates = 1")
                          .replace("methods = racer,mr_oscar", "methods = racer"))
        res = run_experiment(spec, out=tmp_path)
        assert len(res.records) == 1 and len(res.aggregates) == 1

    def test_failures_are_tagged(self, tmp_path):
        # n_r too small for the fold structure -> every fit fails, the sweep still completes
        spec = parse_spec(TINY + "dgp.n_r = 12\n")
        res = run_experiment(spec, out=tmp_path)
        assert res.n_failed == len(res.records)
        assert all(r["error"].startswith("ArmTooSmall") for r in res.records)
        assert all(r["n_ok"] == 0 for r in res.aggregates)
        assert "failed" in summarize(res)

    def test_ci_columns(self, tmp_path):
        spec = parse_spec(TINY + "compute_ci = true\nn_replicates = 1\n")
        res = run_experiment(spec, out=tmp_path)
        assert all(0 <= r["ci_coverage"] <= 1 and r["ci_width"] > 0 for r in res.records)
        assert all(0 <= r["ci_coverage_selected"] <= 1 for r in res.records)

    def test_parallel_matches_serial(self, tiny_run, tiny_spec, tmp_path):
        out, _ = tiny_run
        run_experiment(tiny_spec, out=tmp_path, workers=2)
        assert (tmp_path / "records.csv").read_bytes() == (out / "records.csv").read_bytes()

    def test_summarize_table(self, tiny_run):
        text = summarize(tiny_run[1])
        assert "racer" in text and "+-" in text and len(text.splitlines()) == 3


class TestHeatmap:
    def test_na_cells_and_gaps(self, tmp_path):
        spec = parse_spec(
            "experiment = mismatch_heatmap\ngrid = 0.0,0.5\nn_replicates = 1\nmethods = racer,sr_oscar,mr_oscar\n"
            "dgp.p = 20\ndgp.n_r = 80\ndgp.n_o = 120\ndgp.n_eval = 40\nestimator.path_length = 15\n"
        )
        res = run_experiment(spec, out=tmp_path)
        assert {r["grid_value"] for r in res.records} == {"0;0", "0;0.5", "0.5;0"}
        rows, matrices = emit_heatmap_table(res, grid=spec.grid)
        cell = {(r["f1"], r["f2"]): r for r in rows}
        assert cell[(0.5, 0.5)]["gap_mr_racer"] is None and not cell[(0.5, 0.5)]["feasible"]
        means = {(a["grid_value"], a["method"]): a["mean_rmse"] for a in aggregate(res.records)}
        assert cell[(0.0, 0.5)]["gap_mr_sr"] == means[("0;0.5", "mr_oscar")] - means[("0;0.5", "sr_oscar")]
        lines = matrices["gap_mr_racer"].splitlines()
        assert lines[0] == "f1\\f2,0,0.5" and lines[2].endswith(",NA")

import numpy as np
import pandas as pd
import pytest

from grokking_lab.core.exceptions import NonBracketingError, PreconditionError
from grokking_lab.models.models import AccuracyBand
from grokking_lab.schemas.schemas import (
    EfficiencyRecord,
    ModelConfig,
    OptimizerConfig,
    RunConfig,
    TaskSpec,
    UngrokkingSweepConfig,
)
from grokking_lab.services.sweeps import (
    SEMIGROK_COLUMNS,
    UNGROK_COLUMNS,
    check_ungrok_source,
    classify_band,
    estimate_critical_size,
    geometric_sizes,
    logit_ratio_report,
    middling_cells,
    run_cells,
    run_efficiency_sweep,
    run_semigrok_sweep,
    run_ungrokking,
)
from grokking_lab.services.training import CHECKPOINT_NAME, run_grokking

TASK = TaskSpec(modulus=7)
SMALL = ModelConfig.for_task(TASK, d_model=16, d_head=4, n_heads=4, d_mlp=32)


def _square(x):
    if x == 3:
        raise RuntimeError("boom")
    return x * x


@pytest.fixture
def source_checkpoint(tmp_path):
    cfg = RunConfig(
        task=TASK, train_count=30, seed=0, model=SMALL, optimizer=OptimizerConfig(lr=1e-2), max_epochs=2,
        eval_every=1, analyze_every=0, out_dir=tmp_path / "source",
    )
    run_grokking(cfg)
    return tmp_path / "source" / CHECKPOINT_NAME


def series(seed, wd, sizes, accs):
    return pd.DataFrame({"reduced_size": sizes, "weight_decay": wd, "seed": seed, "final_test_acc": accs})


class TestRunCells:
    def test_failed_cells_become_none(self):
        assert run_cells(_square, [1, 2, 3, 4], workers=1, desc="test") == [1, 4, None, 16]

    def test_process_pool_keeps_order(self):
        assert run_cells(_square, [4, 3, 2], workers=2, desc="test") == [16, None, 4]


class TestCriticalSize:
    def test_single_series_interpolates(self):
        estimate = estimate_critical_size(series(0, 1.0, [100, 200, 300, 400], [0.05, 0.2, 0.8, 0.99]))
        assert estimate.estimate == pytest.approx(250.0)
        assert (estimate.lo, estimate.hi) == (200.0, 300.0)

    def test_running_max_removes_dips(self):
        estimate = estimate_critical_size(series(0, 1.0, [100, 200, 300, 400], [0.1, 0.6, 0.3, 0.9]))
        assert estimate.estimate == pytest.approx(100 + 0.4 / 0.5 * 100)

    def test_unsorted_rows(self):
        estimate = estimate_critical_size(series(0, 1.0, [300, 100, 200], [1.0, 0.0, 0.0]))
        assert estimate.estimate == pytest.approx(250.0)

    def test_median_over_series(self):
        frame = pd.concat([
            series(0, 1.0, [100, 200], [0.0, 1.0]),
            series(1, 1.0, [100, 200], [0.0, 0.5]),
            series(2, 1.0, [200, 300], [0.0, 1.0]),
        ])
        estimate = estimate_critical_size(frame)
        assert estimate.estimate == pytest.approx(200.0)
        assert (estimate.lo, estimate.hi) == (100.0, 300.0)
        assert estimate.spread == (150.0, 250.0)

    def test_non_bracketing_series_is_skipped(self):
        frame = pd.concat([series(0, 1.0, [100, 200], [0.0, 1.0]), series(1, 1.0, [100, 200], [0.9, 1.0])])
        estimate = estimate_critical_size(frame)
        assert len(estimate.series) == 1

    @pytest.mark.parametrize("accs", [[0.0, 0.1, 0.2], [0.7, 0.8, 1.0]])
    def test_nothing_brackets(self, accs):
        with pytest.raises(NonBracketingError):
            estimate_critical_size(series(0, 1.0, [100, 200, 300], accs))

    def test_reads_csv_and_dataset_size_column(self, tmp_path):
        frame = pd.DataFrame({"dataset_size": [10, 20], "seed": 0, "final_test_acc": [0.0, 1.0]})
        path = tmp_path / "summary.csv"
        frame.to_csv(path, index=False)
        assert estimate_critical_size(path).estimate == pytest.approx(15.0)

    def test_unrestored_cells_are_excluded(self, tmp_path):
        frame = series(0, 1.0, [100, 200, 300, 400], [0.05, 0.2, 0.8, 0.99])
        frame["train_acc_restored"] = [True, True, False, True]
        path = tmp_path / "summary.csv"
        frame.to_csv(path, index=False)
        for data in (frame, path):
            estimate = estimate_critical_size(data)
            assert estimate.estimate == pytest.approx(200 + 0.3 / 0.79 * 200)
            assert (estimate.lo, estimate.hi) == (200.0, 400.0)


class TestBands:
    @pytest.mark.parametrize(
        "acc, band",
        [
            (0.0, AccuracyBand.NEAR_RANDOM),
            (0.19, AccuracyBand.NEAR_RANDOM),
            (0.2, AccuracyBand.MIDDLING),
            (0.9, AccuracyBand.MIDDLING),
            (0.91, AccuracyBand.FULL),
        ],
    )
    def test_classify(self, acc, band):
        assert classify_band(acc) == band

    def test_middling_cells(self):
        frame = pd.DataFrame({"final_test_acc": [0.05, 0.5, 0.99]})
        assert middling_cells(frame)["final_test_acc"].tolist() == [0.5]

    def test_geometric_sizes(self):
        sizes = geometric_sizes(100, 1000, 4)
        assert sizes == [100, 215, 464, 1000]


class TestSemigrok:
    def test_zero_epoch_sweep(self, tmp_path):
        summary = run_semigrok_sweep(
            sizes=[20, 30], seeds=[0, 1], epochs=0, task=TASK, eval_every=1, out_dir=tmp_path / "semi", workers=1
        )
        assert list(summary.columns) == SEMIGROK_COLUMNS
        assert len(summary) == 4
        assert summary["band"].isin([b.value for b in AccuracyBand]).all()
        curves = pd.read_csv(tmp_path / "semi" / "accuracy_curves.csv")
        assert set(curves["dataset_size"]) == {20, 30}
        assert (tmp_path / "semi" / "summary.csv").exists()

    def test_same_seed_same_result(self, tmp_path):
        kwargs = dict(sizes=[25], seeds=[3], epochs=0, task=TASK, eval_every=1, workers=1)
        a = run_semigrok_sweep(out_dir=tmp_path / "a", **kwargs)
        b = run_semigrok_sweep(out_dir=tmp_path / "b", **kwargs)
        pd.testing.assert_frame_equal(a, b)


class TestEfficiencySweep:
    def test_no_seeds_gives_header_only(self, tmp_path):
        result = run_efficiency_sweep(
            sizes=[10], lambdas=[1.0], seeds=[], mode="mem", task=TASK, max_epochs=1, out_dir=tmp_path / "eff",
        )
        assert result.records.empty
        lines = (tmp_path / "eff" / "summary.csv").read_text().splitlines()
        assert lines == [",".join(EfficiencyRecord.csv_columns())]

    def test_bad_mode(self, tmp_path):
        with pytest.raises(ValueError):
            run_efficiency_sweep(sizes=[10], lambdas=[1.0], seeds=[0], mode="both", out_dir=tmp_path)

    def test_mem_sweep_records(self, tmp_path):
        result = run_efficiency_sweep(
            sizes=[1, 2], lambdas=[1.0], seeds=[0], mode="mem", task=TASK, max_epochs=5,
            out_dir=tmp_path / "eff", workers=1, model=SMALL,
        )
        assert sorted(result.records["dataset_size"]) == [1, 2]
        assert (result.records["tag"] == "mem-only").all()
        assert (tmp_path / "eff" / "isologit_spearman.csv").exists()


class TestUngrokking:
    def test_ungrokked_source_is_rejected(self, source_checkpoint, tmp_path):
        sweep = UngrokkingSweepConfig(source_checkpoint=source_checkpoint, reduced_sizes=[10], out_dir=tmp_path / "u")
        with pytest.raises(PreconditionError):
            check_ungrok_source(sweep, min_test_acc=1.01)

    def test_reduced_size_too_large(self, source_checkpoint, tmp_path):
        sweep = UngrokkingSweepConfig(source_checkpoint=source_checkpoint, reduced_sizes=[31], out_dir=tmp_path / "u")
        with pytest.raises(PreconditionError):
            check_ungrok_source(sweep, min_test_acc=0.0)

    def test_sweep_summary(self, source_checkpoint, tmp_path):
        sweep = UngrokkingSweepConfig(
            source_checkpoint=source_checkpoint, reduced_sizes=[10, 20], weight_decays=[1.0], seeds=[0],
            continuation_epochs=3, eval_every=1, out_dir=tmp_path / "u", workers=1,
        )
        frame = run_ungrokking(sweep, min_source_test_acc=0.0)
        assert list(frame.columns) == UNGROK_COLUMNS
        assert frame["reduced_size"].tolist() == [10, 20]
        assert frame["final_epoch"].tolist() == [3, 3]
        assert frame["correct_logit_trig"].notna().all()
        on_disk = pd.read_csv(tmp_path / "u" / "summary.csv")
        assert len(on_disk) == 2

        report = logit_ratio_report(frame, n_buckets=2)
        assert set(report.columns) >= {"logit_ratio", "norm_bucket"}
        assert np.all(report["norm_bucket"].between(0, 1))


class TestCriticalSizeShapes:
    def test_step_data(self):
        sizes = [390, 620, 900, 1200]
        accs = [0.0 if d < 900 else 1.0 for d in sizes]
        estimate = estimate_critical_size(series(0, 1.0, sizes, accs))
        assert 620 <= estimate.estimate <= 900

    def test_linear_ramp(self):
        sizes = np.arange(400, 1401, 50)
        accs = np.clip((sizes - 400) / 1000, 0, 1)
        estimate = estimate_critical_size(series(0, 1.0, sizes, accs))
        assert estimate.estimate == pytest.approx(900, abs=50)


@pytest.mark.slow
def test_memorization_norm_grows_with_dataset_size(tmp_path):
    task = TaskSpec(modulus=23)
    model = ModelConfig.for_task(task, d_model=64, d_head=16, n_heads=4, d_mlp=256)
    result = run_efficiency_sweep(
        sizes=[50, 100, 200], lambdas=[0.3, 1.0], seeds=[0, 1, 2], mode="mem", task=task, max_epochs=5000,
        out_dir=tmp_path / "mem", model=model,
    )
    assert result.isologit.positive_share() > 0.5


@pytest.mark.slow
def test_larger_weight_decay_gives_smaller_norm(tmp_path):
    task = TaskSpec(modulus=23)
    model = ModelConfig.for_task(task, d_model=64, d_head=16, n_heads=4, d_mlp=256)
    result = run_efficiency_sweep(
        sizes=[100], lambdas=[0.3, 1.0], seeds=[0, 1, 2], mode="mem", task=task, max_epochs=5000,
        out_dir=tmp_path / "mem", model=model,
    )
    norms = result.records.pivot(index="seed", columns="weight_decay", values="param_norm")
    assert (norms[1.0] < norms[0.3]).all()


@pytest.mark.slow
def test_ungrokking_smoke(tmp_path):
    task = TaskSpec(modulus=23)
    model = ModelConfig.for_task(task, d_model=64, d_head=16, n_heads=4, d_mlp=256)
    source = RunConfig(
        task=task, train_count=400, seed=0, model=model, max_epochs=10000, eval_every=100, analyze_every=0,
        target_test_acc=0.995, out_dir=tmp_path / "source",
    )
    run_grokking(source)
    sweep = UngrokkingSweepConfig(
        source_checkpoint=tmp_path / "source" / CHECKPOINT_NAME, reduced_sizes=[40, 400], weight_decays=[1.0],
        seeds=[0], continuation_epochs=5000, out_dir=tmp_path / "ungrok",
    )
    frame = run_ungrokking(sweep).set_index("reduced_size")
    assert frame.loc[40, "final_test_acc"] < frame.loc[400, "final_test_acc"]
    assert frame.loc[40, "final_train_acc"] == 1.0

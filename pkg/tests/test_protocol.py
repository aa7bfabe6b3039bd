import pytest

from mhe.errors import ConfigError
from mhe.metrics import MetricsReport
from mhe.protocol import (CellKey, ExperimentPlan, ResultTable, ensure_datasets,
                          render_pivot, run_fewshot, run_plan, run_pretrain,
                          run_zeroshot)


def small_plan(tmp_path, **kw):
    defaults = dict(
        out_dir=str(tmp_path / "results"),
        data_dir=str(tmp_path / "data"),
        target_presets=("target_a",),
        variants=("conv_baseline",),
        init_modes=("pretrained",),
        pcts=(5.0,),
        seeds=(0,),
        n_source=(12, 2, 4),
        n_target=(10, 2, 4),
        pretrain_epochs=3,
        finetune_epochs=2,
        pretrain_lr=5e-3,
        finetune_lr=1e-3,
        batch=4,
    )
    defaults.update(kw)
    return ExperimentPlan(**defaults)


class TestPlan:
    def test_unknown_variant_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            small_plan(tmp_path, variants=("resnet",))

    def test_unknown_preset_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            small_plan(tmp_path, target_presets=("mars",))

    def test_plan_hash_stable_and_sensitive(self, tmp_path):
        p1 = small_plan(tmp_path)
        p2 = small_plan(tmp_path)
        p3 = small_plan(tmp_path, seeds=(1,))
        assert p1.plan_hash() == p2.plan_hash()
        assert p1.plan_hash() != p3.plan_hash()


class TestDatasets:
    def test_ensure_generates_then_reuses(self, tmp_path):
        plan = small_plan(tmp_path)
        d1 = ensure_datasets(plan)
        assert set(d1) == {"source", "target_a"}
        img, _ = d1["source"].split_pairs("train")[0]
        stamp = img.stat().st_mtime_ns
        d2 = ensure_datasets(plan)
        assert img.stat().st_mtime_ns == stamp  # untouched on reuse
        assert d2["source"].counts() == d1["source"].counts()


class TestPieces:
    def test_pretrain_improves_and_is_seeded(self, tmp_path):
        plan = small_plan(tmp_path, pretrain_epochs=4)
        source = ensure_datasets(plan)[plan.source_preset]
        c0, curve0 = run_pretrain(plan, "conv_baseline", 0, source)
        c1, curve1 = run_pretrain(plan, "conv_baseline", 1, source)
        assert curve0[-1] < curve0[0]
        assert any(c0.tensors[n].tobytes() != c1.tensors[n].tobytes()
                   for n in c0.tensors)

    def test_zeroshot_on_source_equals_indomain(self, tmp_path):
        plan = small_plan(tmp_path)
        ds = ensure_datasets(plan)
        ckpt, _ = run_pretrain(plan, "conv_baseline", 0, ds["source"])
        rep1 = run_zeroshot(ckpt, {"source": ds["source"]})["source"]
        rep2 = run_zeroshot(ckpt, {"source": ds["source"]})["source"]
        assert rep1 == rep2

    def test_zeroshot_empty_targets(self, tmp_path):
        plan = small_plan(tmp_path)
        ds = ensure_datasets(plan)
        ckpt, _ = run_pretrain(plan, "conv_baseline", 0, ds["source"])
        assert run_zeroshot(ckpt, {}) == {}

    def test_fewshot_deterministic(self, tmp_path):
        plan = small_plan(tmp_path)
        ds = ensure_datasets(plan)
        ckpt, _ = run_pretrain(plan, "conv_baseline", 0, ds["source"])
        r1 = run_fewshot(plan, ckpt, "conv_baseline", ds["target_a"], 5.0, "pretrained", 0)
        r2 = run_fewshot(plan, ckpt, "conv_baseline", ds["target_a"], 5.0, "pretrained", 0)
        assert r1 == r2


class TestResultTable:
    def _table(self):
        t = ResultTable()
        t.add(CellKey("target_a", "sdc", "pretrained", 1.0, 0),
              MetricsReport(1.0, 2.0, 3.0, 4.0, 4))
        t.add(CellKey("target_a", "sdc", "pretrained", 1.0, 1),
              MetricsReport(2.0, 3.0, 4.0, 5.0, 4))
        t.add(CellKey("target_a", "conv_baseline", "pretrained", 1.0, 0),
              MetricsReport(3.0, 4.0, 5.0, 6.0, 4))
        return t

    def test_duplicate_cell_rejected(self):
        t = self._table()
        with pytest.raises(ConfigError):
            t.add(CellKey("target_a", "sdc", "pretrained", 1.0, 0),
                  MetricsReport(0, 0, 0, 0, 1))

    def test_csv_roundtrip_identity(self):
        t = self._table()
        t.add(CellKey("target_a", "sdc", "random", 5.0, 2),
              MetricsReport(1 / 3, 2 / 7, 1e-17, 0.1 + 0.2, 4))
        back = ResultTable.from_csv(t.to_csv())
        assert back.cells == t.cells
        assert back.to_csv() == t.to_csv()

    def test_mean_over_seeds(self):
        t = self._table()
        assert t.mean_over_seeds("target_a", "sdc", "pretrained", 1.0) == pytest.approx(1.5)

    def test_aggregate_std_only_with_two_seeds(self):
        agg = self._table().aggregate()
        mean, std = agg[("target_a", "sdc", "pretrained", 1.0)]["mae"]
        assert mean == pytest.approx(1.5) and std is not None
        mean, std = agg[("target_a", "conv_baseline", "pretrained", 1.0)]["mae"]
        assert std is None

    def test_pivot_marks_best(self):
        txt = render_pivot(self._table(), pcts=(1.0,))
        lines = [ln for ln in txt.splitlines() if ln.startswith("target_a")]
        starred = [ln for ln in lines if "*" in ln]
        assert len(starred) == 1 and "sdc" in starred[0]


class TestRunPlan:
    def test_single_cell_plan_end_to_end(self, tmp_path):
        plan = small_plan(tmp_path)
        table = run_plan(plan)
        res = plan.results_dir()
        # one fewshot cell + in-domain + zero-shot rows
        assert CellKey("target_a", "conv_baseline", "pretrained", 5.0, 0) in table.cells
        assert CellKey("source", "conv_baseline", "pretrained", 0.0, 0) in table.cells
        assert CellKey("target_a", "conv_baseline", "pretrained", 0.0, 0) in table.cells
        assert (res / "table.csv").exists()
        assert (res / "table.txt").exists()
        assert (res / "plan.json").exists()
        cells = list((res / "cells").glob("*.csv"))
        assert len(cells) == len(table.cells)
        back = ResultTable.from_csv((res / "table.csv").read_text())
        assert back.cells == table.cells

    def test_plan_replay_byte_identical(self, tmp_path):
        plan = small_plan(tmp_path)
        run_plan(plan)
        first = (plan.results_dir() / "table.csv").read_bytes()
        run_plan(plan)
        assert (plan.results_dir() / "table.csv").read_bytes() == first


class TestEmitCompleteness:
    def test_incomplete_plan_refused(self, tmp_path):
        from mhe.protocol import emit_tables, expected_cells
        plan = small_plan(tmp_path)
        table = ResultTable()
        table.add(CellKey("target_a", "conv_baseline", "pretrained", 5.0, 0),
                  MetricsReport(1.0, 2.0, 3.0, 4.0, 4))
        with pytest.raises(ConfigError):
            emit_tables(table, tmp_path / "out", pcts=plan.pcts,
                        expected=expected_cells(plan))

    def test_expected_enumeration_counts(self, tmp_path):
        from mhe.protocol import expected_cells
        plan = small_plan(tmp_path, variants=("conv_baseline", "sdc"),
                          init_modes=("pretrained", "random"),
                          pcts=(1.0, 5.0), seeds=(0, 1, 2))
        keys = expected_cells(plan)
        # per (variant, seed): 1 in-domain + 1 zero-shot + 2*2 fewshot
        assert len(keys) == 2 * 3 * (1 + 1 + 4)
        assert len(set(keys)) == len(keys)


class TestPretrainQuality:
    def test_pretrain_halves_loss_at_desk_scale(self, tmp_path):
        # desk-scale fixture: the pretraining curve must at least halve
        plan = small_plan(tmp_path, n_source=(128, 4, 8), pretrain_epochs=15,
                          pretrain_lr=3e-3, batch=8)
        source = ensure_datasets(plan)[plan.source_preset]
        _, curve = run_pretrain(plan, "sdc", 0, source)
        assert curve[-1] < 0.5 * curve[0], (curve[0], curve[-1])


class TestPivotSchema:
    def test_column_count_is_metrics_times_pcts(self):
        table = ResultTable()
        for pct in (1.0, 5.0):
            table.add(CellKey("t", "sdc", "pretrained", pct, 0),
                      MetricsReport(1.0, 2.0, 3.0, 4.0, 4))
        txt = render_pivot(table, pcts=(1.0, 5.0))
        header = next(ln for ln in txt.splitlines() if "MAE@1%" in ln)
        labels = [h for h in header.split() if "@" in h]
        assert len(labels) == 4 * 2

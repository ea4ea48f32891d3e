import json

import pytest

from conftest import make_config
from models.exceptions import ContractError
from models.schemas import ProbeResult
from services.eval_harness import confidence_interval
from services.report_service import (
    build_curves,
    build_tables,
    convergence_summaries,
    export_curves,
    format_cell,
    format_table,
    load_curves,
    render_curves,
    render_tables,
)


def probe(accuracies, method="simclr", variant="affine", dataset="cifar10", epoch=1, run_id=None, seed=0):
    mean, half, degenerate = confidence_interval(accuracies)
    return ProbeResult(
        run_id=run_id or f"{method}-{variant}-{seed}",
        method=method,
        variant=variant,
        dataset=dataset,
        seed=seed,
        epoch=epoch,
        checkpoint="epoch.pt",
        trial_seeds=list(range(len(accuracies))),
        accuracies=accuracies,
        mean=mean,
        ci_half_width=half,
        degenerate_ci=degenerate,
        n_trials=len(accuracies),
    )


def table(tables, name):
    return next(t for t in tables if t.name == name)


def row(t, method, variant):
    return next(r for r in t.rows if r.method == method and r.variant == variant)


class TestTables:
    def test_cell_uses_the_stored_interval(self):
        stored = probe([0.52, 0.53]).model_copy(update={"mean": 0.5288, "ci_half_width": 0.0017})
        main = table(build_tables([stored]), "main")
        cell = row(main, "simclr", "affine").cells["cifar10"]
        assert format_cell(cell.model_copy(update={"bold": False})) == "52.88 ± 0.17"

    def test_baseline_row_and_significance(self):
        probes = [
            probe([0.50, 0.51, 0.49], variant="standard"),
            probe([0.60, 0.61, 0.59]),
        ]
        tables = build_tables(probes)
        main = table(tables, "main")
        assert [r.variant for r in main.rows] == ["standard", "affine"]
        affine = row(main, "simclr", "affine").cells["cifar10"]
        assert affine.bold and affine.significant
        assert format_cell(affine) == "**60.00 ± 2.48***"
        gain = row(table(tables, "relative_improvement"), "simclr", "relative_improvement")
        assert gain.cells["relative_improvement"].mean == pytest.approx(20.0)

    def test_missing_cells_render_as_dash(self):
        probes = [
            probe([0.5, 0.6], variant="standard", dataset="cifar10"),
            probe([0.5, 0.6], variant="standard", dataset="cifar100"),
            probe([0.55, 0.65], variant="affine", dataset="cifar10"),
        ]
        main = table(build_tables(probes), "main")
        assert row(main, "simclr", "affine").cells["cifar100"] is None
        assert "| simclr | affine | **60.00 ± 63.53** | - |" in format_table(main)

    def test_single_trial_has_no_interval(self):
        main = table(build_tables([probe([0.4])]), "main")
        assert format_cell(row(main, "simclr", "affine").cells["cifar10"]) == "**40.00**"

    def test_seeds_are_pooled(self):
        probes = [probe([0.5, 0.6], seed=0), probe([0.7, 0.8], seed=1)]
        cell = row(table(build_tables(probes), "main"), "simclr", "affine").cells["cifar10"]
        assert cell.n == 4
        assert cell.mean == pytest.approx(65.0)
        assert cell.source_runs == ["simclr-affine-0", "simclr-affine-1"]

    def test_last_epoch_only(self):
        probes = [probe([0.3, 0.3], epoch=1), probe([0.5, 0.5], epoch=2)]
        cell = row(table(build_tables(probes), "main"), "simclr", "affine").cells["cifar10"]
        assert cell.mean == pytest.approx(50.0)

    def test_ablation_tables_need_two_variants(self):
        names = [t.name for t in build_tables([probe([0.5, 0.6])])]
        assert names == ["main", "relative_improvement"]
        names = [t.name for t in build_tables([probe([0.5, 0.6]), probe([0.5, 0.6], variant="affine[2x]")])]
        assert "views" in names and "aggregation" not in names

    def test_percent_of_max(self):
        probes = [
            probe([0.5, 0.5], dataset="cifar10"),
            probe([0.5, 0.5], dataset="cifar100"),
            probe([0.25, 0.25], variant="affine[rotation]", dataset="cifar10"),
            probe([0.5, 0.5], variant="affine[rotation]", dataset="cifar100"),
            probe([0.5, 0.5], variant="affine[shear]", dataset="cifar10"),
        ]
        ratios = row(table(build_tables(probes), "percent_of_max"), "simclr", "percent_of_max")
        assert ratios.cells["rotation"].mean == pytest.approx(75.0)
        assert ratios.cells["shear"].mean == pytest.approx(100.0)
        assert ratios.cells["scale"] is None

    def test_methods_follow_the_canonical_order(self):
        probes = [probe([0.5, 0.6], method=m) for m in ("barlow_twins", "simclr", "byol")]
        assert [r.method for r in table(build_tables(probes), "main").rows if r.variant == "affine"] == [
            "simclr", "byol", "barlow_twins",
        ]

    def test_no_results(self):
        with pytest.raises(ContractError):
            build_tables([])


class TestRenderTables:
    def test_writes_markdown_and_json(self, store, tmp_path):
        for affine in (False, True):
            config = make_config(affine=affine)
            run_id = store.register(config)
            store.append_probe(run_id, probe([0.5, 0.6], variant=config.variant_label(), run_id=run_id))
        tables = render_tables(store, tmp_path / "report")
        exported = json.loads((tmp_path / "report" / "tables.json").read_text())
        assert [t["name"] for t in exported] == [t.name for t in tables]
        assert "### Linear evaluation accuracy" in (tmp_path / "report" / "tables.md").read_text()

    def test_empty_store(self, store):
        with pytest.raises(ContractError):
            render_tables(store)


class TestCurves:
    def test_series_match_the_records(self, tmp_path):
        probes = [
            probe([0.40, 0.42], variant="standard", epoch=1),
            probe([0.50, 0.52], variant="standard", epoch=2),
            probe([0.45, 0.47], epoch=1),
            probe([0.55, 0.57], epoch=2),
        ]
        series = build_curves(probes)
        assert [(s.variant, s.epochs) for s in series] == [("affine", [1, 2]), ("standard", [1, 2])]
        standard = series[1]
        assert standard.means == [probes[0].mean, probes[1].mean]
        assert standard.ci_half_widths == [probes[0].ci_half_width, probes[1].ci_half_width]
        assert load_curves(export_curves(series, tmp_path / "curves.json")) == series

    def test_convergence_epoch(self):
        probes = [
            probe([0.4, 0.4], variant="standard", epoch=1),
            probe([0.5, 0.5], variant="standard", epoch=2),
            probe([0.5, 0.5], epoch=1),
            probe([0.6, 0.6], epoch=2),
        ]
        (summary,) = convergence_summaries(build_curves(probes))
        assert summary.baseline_final_accuracy == pytest.approx(0.5)
        assert summary.epoch_reached == 1

    def test_never_reached(self):
        probes = [probe([0.5, 0.5], variant="standard", epoch=1), probe([0.4, 0.4], epoch=1)]
        assert convergence_summaries(build_curves(probes))[0].epoch_reached is None

    def test_single_epoch_figure(self, store, tmp_path):
        for affine in (False, True):
            config = make_config(affine=affine)
            run_id = store.register(config)
            store.append_probe(run_id, probe([0.5, 0.6], variant=config.variant_label(), run_id=run_id, dataset="synthetic"))
        figures = render_curves(store, tmp_path / "report")
        assert [f.name for f in figures] == ["curves_simclr_synthetic.png"]
        assert figures[0].stat().st_size > 0
        assert (tmp_path / "report" / "convergence.json").exists()

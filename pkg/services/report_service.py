"""
Tables and accuracy curves rendered from stored probe results.

Every number comes from ProbeResult records: a group holding one record
reuses its stored mean and half width, a group pooling several seeds
recomputes the interval over all of their trial accuracies.
"""

import json
import logging
from collections import defaultdict
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from database.result_store import ResultStore  # noqa: E402
from models.exceptions import ContractError  # noqa: E402
from models.schemas import (  # noqa: E402
    COMPONENT_COLUMNS,
    ConvergenceSummary,
    CurveSeries,
    ProbeResult,
    ResultsCell,
    ResultsRow,
    ResultsTable,
    SSLMethod,
)
from services.eval_harness import confidence_interval, welch_significance  # noqa: E402

logger = logging.getLogger(__name__)

BASELINE = "standard"
AFFINE = "affine"
COMPONENTS = list(COMPONENT_COLUMNS)
CURVE_VARIANTS = (BASELINE, AFFINE)
MISSING = "-"

# name -> (title, variants); the first variant is the reference row for significance
TABLE_LAYOUTS: Dict[str, Tuple[str, List[str]]] = {
    "main": ("Linear evaluation accuracy, standard vs +affine", [BASELINE, AFFINE]),
    "views": ("Affine transform applied to one view vs both views", [AFFINE, "affine[2x]"]),
    "aggregation": ("Transition vector by difference vs concatenation", [AFFINE, "affine[concat]"]),
    "source": ("Transition vector from encoder f vs projector g", [AFFINE, "affine[g]"]),
    "bounded": ("Full warped image vs bounded crop", [AFFINE, "affine[bounded]"]),
    "components": (
        "Single affine components vs the full transform",
        [f"affine[{c}]" for c in COMPONENTS] + [AFFINE],
    ),
}


class _Group:
    """Probe results sharing (method, variant, dataset, epoch)."""

    def __init__(self, results: Sequence[ProbeResult]):
        self.results = list(results)

    @property
    def accuracies(self) -> List[float]:
        return [a for r in self.results for a in r.accuracies]

    def stats(self) -> Tuple[float, float, bool]:
        if len(self.results) == 1:
            r = self.results[0]
            return r.mean, r.ci_half_width, r.degenerate_ci
        return confidence_interval(self.accuracies)

    def cell(self) -> ResultsCell:
        mean, half, degenerate = self.stats()
        return ResultsCell(
            mean=100.0 * mean,
            ci_half_width=None if degenerate else 100.0 * half,
            n=len(self.accuracies),
            source_runs=sorted({r.run_id for r in self.results}),
        )


def _final_results(probes: Iterable[ProbeResult]) -> Dict[Tuple[str, str, str], _Group]:
    """Last evaluated epoch of every run, grouped by (method, variant, dataset)."""
    last_epoch: Dict[Tuple[str, str], int] = {}
    probes = list(probes)
    for p in probes:
        key = (p.run_id, p.dataset)
        last_epoch[key] = max(last_epoch.get(key, -1), p.epoch)
    grouped: Dict[Tuple[str, str, str], List[ProbeResult]] = defaultdict(list)
    for p in probes:
        if p.epoch == last_epoch[(p.run_id, p.dataset)]:
            grouped[(p.method, p.variant, p.dataset)].append(p)
    return {k: _Group(v) for k, v in grouped.items()}


def _method_order(methods: Iterable[str]) -> List[str]:
    known = [m.value for m in SSLMethod]
    return sorted(set(methods), key=lambda m: (known.index(m) if m in known else len(known), m))


def _mark_bold(table: ResultsTable) -> None:
    for column in table.columns:
        cells = [row.cells.get(column) for row in table.rows]
        values = [c.mean for c in cells if c is not None]
        if not values:
            continue
        best = max(values)
        for c in cells:
            if c is not None and c.mean == best:
                c.bold = True


def build_comparison_table(
    name: str,
    title: str,
    variants: Sequence[str],
    groups: Dict[Tuple[str, str, str], _Group],
    datasets: Sequence[str],
) -> Optional[ResultsTable]:
    """
    Rows (method, variant) for every method that ran any of `variants`.

    Absent cells stay None. Cells of non-reference rows carry a Welch test
    against the reference row of the same method.
    """
    present = {(m, v) for (m, v, _) in groups if v in variants}
    if len({v for _, v in present}) < 2 and name != "main":
        return None
    if not present:
        return None

    table = ResultsTable(name=name, title=title, columns=list(datasets))
    for method in _method_order(m for m, _ in present):
        reference = variants[0]
        for variant in variants:
            row = ResultsRow(method=method, variant=variant)
            for dataset in datasets:
                group = groups.get((method, variant, dataset))
                if group is None:
                    row.cells[dataset] = None
                    continue
                cell = group.cell()
                baseline = groups.get((method, reference, dataset))
                if variant != reference and baseline is not None:
                    cell.significant = welch_significance(group.accuracies, baseline.accuracies)
                row.cells[dataset] = cell
            table.rows.append(row)
    _mark_bold(table)
    return table


def percent_of_max_table(components: ResultsTable) -> ResultsTable:
    """
    Per method and component: component accuracy / full-transform accuracy,
    in percent, averaged over the datasets where both exist.
    """
    table = ResultsTable(
        name="percent_of_max",
        title="Single-component accuracy as a percentage of the full transform, mean over datasets",
        columns=COMPONENTS,
    )
    rows = {(r.method, r.variant): r for r in components.rows}
    for method in _method_order(r.method for r in components.rows):
        full = rows.get((method, AFFINE))
        row = ResultsRow(method=method, variant="percent_of_max")
        for component in COMPONENTS:
            single = rows.get((method, f"affine[{component}]"))
            ratios = []
            if full is not None and single is not None:
                for dataset in components.columns:
                    a, b = single.cells.get(dataset), full.cells.get(dataset)
                    if a is not None and b is not None and b.mean > 0:
                        ratios.append(100.0 * a.mean / b.mean)
            row.cells[component] = (
                ResultsCell(mean=sum(ratios) / len(ratios), n=len(ratios)) if ratios else None
            )
        table.rows.append(row)
    _mark_bold(table)
    return table


def relative_improvement_table(main: ResultsTable) -> ResultsTable:
    """Per method: mean over datasets of (affine - standard) / standard, in percent."""
    table = ResultsTable(
        name="relative_improvement",
        title="Relative improvement of +affine over the standard baseline, mean over datasets",
        columns=["relative_improvement"],
    )
    rows = {(r.method, r.variant): r for r in main.rows}
    for method in _method_order(r.method for r in main.rows):
        base, aff = rows.get((method, BASELINE)), rows.get((method, AFFINE))
        gains = []
        if base is not None and aff is not None:
            for dataset in main.columns:
                b, a = base.cells.get(dataset), aff.cells.get(dataset)
                if a is not None and b is not None and b.mean > 0:
                    gains.append(100.0 * (a.mean - b.mean) / b.mean)
        cell = ResultsCell(mean=sum(gains) / len(gains), n=len(gains)) if gains else None
        table.rows.append(ResultsRow(method=method, variant="relative_improvement", cells={"relative_improvement": cell}))
    return table


def build_tables(probes: Sequence[ProbeResult]) -> List[ResultsTable]:
    """All table layouts that the given probe results populate."""
    if not probes:
        raise ContractError("No probe results to tabulate")
    groups = _final_results(probes)
    datasets = sorted({p.dataset for p in probes})

    tables: List[ResultsTable] = []
    for name, (title, variants) in TABLE_LAYOUTS.items():
        table = build_comparison_table(name, title, variants, groups, datasets)
        if table is None:
            continue
        tables.append(table)
        if name == "main":
            tables.append(relative_improvement_table(table))
        if name == "components":
            tables.append(percent_of_max_table(table))
    return tables


def format_cell(cell: Optional[ResultsCell]) -> str:
    if cell is None:
        return MISSING
    text = cell.text()
    if cell.significant:
        text += "*"
    return f"**{text}**" if cell.bold else text


def format_table(table: ResultsTable) -> str:
    """Markdown rendering; bold marks the column maximum, * a significant difference."""
    lines = [
        f"### {table.title}",
        "",
        "| method | variant | " + " | ".join(table.columns) + " |",
        "|---|---|" + "---|" * len(table.columns),
    ]
    for row in table.rows:
        cells = [format_cell(row.cells.get(c)) for c in table.columns]
        lines.append(f"| {row.method} | {row.variant} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def render_tables(store: ResultStore, output_dir: Optional[Path] = None) -> List[ResultsTable]:
    """
    Build every table from the store and export them.

    Writes tables.md (formatted) and tables.json (machine-readable) to
    `output_dir`, by default <store root>/report.
    """
    probes = store.list_probes()
    if not probes:
        raise ContractError(f"Result store {store.root} holds no probe results")
    tables = build_tables(probes)

    output_dir = Path(output_dir or store.root / "report")
    output_dir.mkdir(parents=True, exist_ok=True)
    (output_dir / "tables.md").write_text("\n".join(format_table(t) for t in tables))
    (output_dir / "tables.json").write_text(
        json.dumps([t.model_dump(mode="json") for t in tables], indent=2)
    )
    logger.info(f"Rendered {len(tables)} tables from {len(probes)} probe results to {output_dir}")
    return tables


def build_curves(probes: Sequence[ProbeResult]) -> List[CurveSeries]:
    """One accuracy-vs-epoch series per (method, variant, dataset)."""
    grouped: Dict[Tuple[str, str, str], Dict[int, List[ProbeResult]]] = defaultdict(lambda: defaultdict(list))
    for p in probes:
        grouped[(p.method, p.variant, p.dataset)][p.epoch].append(p)

    series: List[CurveSeries] = []
    for (method, variant, dataset), by_epoch in sorted(grouped.items()):
        epochs = sorted(by_epoch)
        stats = [_Group(by_epoch[e]).stats() for e in epochs]
        series.append(
            CurveSeries(
                method=method,
                variant=variant,
                dataset=dataset,
                epochs=epochs,
                means=[s[0] for s in stats],
                ci_half_widths=[s[1] for s in stats],
            )
        )
    return series


def convergence_summaries(series: Sequence[CurveSeries]) -> List[ConvergenceSummary]:
    """First evaluated epoch at which +affine reaches the baseline's final accuracy."""
    index = {(s.method, s.variant, s.dataset): s for s in series}
    summaries = []
    for (method, variant, dataset), base in sorted(index.items()):
        if variant != BASELINE:
            continue
        affine = index.get((method, AFFINE, dataset))
        if affine is None:
            continue
        target = base.means[-1]
        reached = next((e for e, m in zip(affine.epochs, affine.means) if m >= target), None)
        summaries.append(
            ConvergenceSummary(method=method, dataset=dataset, baseline_final_accuracy=target, epoch_reached=reached)
        )
    return summaries


def export_curves(series: Sequence[CurveSeries], path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps([s.model_dump(mode="json") for s in series], indent=2))
    return path


def load_curves(path: Path) -> List[CurveSeries]:
    return [CurveSeries.model_validate(s) for s in json.loads(Path(path).read_text())]


def plot_curves(method: str, dataset: str, series: Sequence[CurveSeries], path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    ticks = set()
    for s in series:
        means = [100.0 * m for m in s.means]
        halves = [100.0 * h for h in s.ci_half_widths]
        ticks.update(s.epochs)
        if len(s.epochs) == 1:
            ax.errorbar(s.epochs, means, yerr=halves, fmt="o", capsize=3, label=s.variant)
            continue
        (line,) = ax.plot(s.epochs, means, marker="o", markersize=3, label=s.variant)
        lower = [m - h for m, h in zip(means, halves)]
        upper = [m + h for m, h in zip(means, halves)]
        ax.fill_between(s.epochs, lower, upper, color=line.get_color(), alpha=0.2)
    ax.set_xticks(sorted(ticks))
    ax.set_xlabel("Epoch")
    ax.set_ylabel("Linear evaluation accuracy (%)")
    ax.set_title(f"{method} on {dataset}")
    ax.grid(True, alpha=0.3)
    ax.legend()
    plt.tight_layout()
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return path


def render_curves(store: ResultStore, output_dir: Optional[Path] = None) -> List[Path]:
    """
    One figure per (method, dataset) comparing baseline and +affine.

    Also exports curves.json (every series, ablation variants included) and
    convergence.json next to the figures.

    Returns:
        Paths of the written figures
    """
    probes = store.list_probes()
    if not probes:
        raise ContractError(f"Result store {store.root} holds no probe results")
    output_dir = Path(output_dir or store.root / "report")
    output_dir.mkdir(parents=True, exist_ok=True)

    series = build_curves(probes)
    export_curves(series, output_dir / "curves.json")
    summaries = convergence_summaries(series)
    (output_dir / "convergence.json").write_text(
        json.dumps([s.model_dump(mode="json") for s in summaries], indent=2)
    )

    panels: Dict[Tuple[str, str], List[CurveSeries]] = defaultdict(list)
    for s in series:
        if s.variant in CURVE_VARIANTS:
            panels[(s.method, s.dataset)].append(s)

    figures = []
    for (method, dataset), members in sorted(panels.items()):
        members.sort(key=lambda s: CURVE_VARIANTS.index(s.variant))
        figures.append(plot_curves(method, dataset, members, output_dir / f"curves_{method}_{dataset}.png"))
    logger.info(f"Rendered {len(figures)} curve figures to {output_dir}")
    return figures

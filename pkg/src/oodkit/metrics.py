"""FPR-at-TPR and AUROC with ID as the positive class, plus report tables.

AUROC is computed as the Mann-Whitney statistic
``(#{id > ood} + 0.5 * #{id == ood}) / (n_id * n_ood)`` via a single joint
ranking, which equals the trapezoidal ROC integral with ties counted half.
The FPR threshold comes from the detector's discrete rule so the two modules
can never disagree about the cutoff.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .detector import calibrate_threshold


class MetricsError(ValueError):
    pass


def fpr_at_tpr(id_scores: np.ndarray, ood_scores: np.ndarray,
               target_tpr: float = 0.95) -> float:
    """Fraction of OOD scores at or above the ID threshold for target_tpr."""
    ood = np.asarray(ood_scores, dtype=np.float64).ravel()
    if ood.size == 0:
        raise MetricsError("empty OOD score vector")
    lam = calibrate_threshold(id_scores, target_tpr).lambda_
    return float((ood >= lam).mean())


def auroc(id_scores: np.ndarray, ood_scores: np.ndarray) -> float:
    """Probability a random ID score exceeds a random OOD score, ties half."""
    pos = np.asarray(id_scores, dtype=np.float64).ravel()
    neg = np.asarray(ood_scores, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise MetricsError("empty score vector")
    ranks = rankdata(np.concatenate([pos, neg]), method="average")
    u = ranks[:pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


@dataclass(frozen=True)
class EvalCell:
    """One (method, OOD dataset) result."""
    method: str
    ood_dataset: str
    fpr95: float
    auroc: float
    n_id: int
    n_ood: int
    group: str = "default"
    flags: str = ""

    def __post_init__(self):
        if not 0.0 <= self.fpr95 <= 1.0:
            raise MetricsError(f"fpr95 out of [0,1]: {self.fpr95}")
        if not 0.0 <= self.auroc <= 1.0:
            raise MetricsError(f"auroc out of [0,1]: {self.auroc}")


@dataclass(frozen=True)
class EvalReport:
    """Cells in a deterministic (method, dataset) grid plus row averages."""
    methods: tuple[str, ...]
    datasets: tuple[str, ...]
    cells: dict[tuple[str, str], EvalCell]
    averages: dict[str, tuple[float, float]]  # method -> (mean fpr95, mean auroc)


def evaluate_pair(method: str, ood_dataset: str, id_scores, ood_scores,
                  target_tpr: float = 0.95, group: str = "default",
                  low_n_threshold: int = 10) -> EvalCell:
    """Compute both metrics for one score pair, flagging tiny OOD sets."""
    id_s = np.asarray(id_scores, dtype=np.float64).ravel()
    ood_s = np.asarray(ood_scores, dtype=np.float64).ravel()
    flags = "low_n" if ood_s.size < low_n_threshold else ""
    return EvalCell(
        method=method, ood_dataset=ood_dataset,
        fpr95=fpr_at_tpr(id_s, ood_s, target_tpr),
        auroc=auroc(id_s, ood_s),
        n_id=int(id_s.size), n_ood=int(ood_s.size),
        group=group, flags=flags)


def build_report(cells: list[EvalCell]) -> EvalReport:
    """Group cells by method, append per-method row averages."""
    seen = {}
    for cell in cells:
        key = (cell.method, cell.ood_dataset)
        if key in seen:
            raise MetricsError(f"duplicate cell for {key}")
        seen[key] = cell
    methods = tuple(sorted({c.method for c in cells}))
    datasets = tuple(sorted({c.ood_dataset for c in cells}))
    averages = {}
    for m in methods:
        row = [seen[(m, d)] for d in datasets if (m, d) in seen]
        averages[m] = (
            float(np.mean([c.fpr95 for c in row])),
            float(np.mean([c.auroc for c in row])),
        )
    return EvalReport(methods=methods, datasets=datasets, cells=seen,
                      averages=averages)


# --- rendering -----------------------------------------------------------------


def report_to_csv(report: EvalReport, delimiter: str = "\t") -> str:
    """Machine-readable: one row per cell, full-precision fractions."""
    lines = [delimiter.join((
        "method", "ood_dataset", "group", "fpr95", "auroc",
        "n_id", "n_ood", "flags"))]
    for m in report.methods:
        for d in report.datasets:
            cell = report.cells.get((m, d))
            if cell is None:
                continue
            lines.append(delimiter.join((
                m, d, cell.group, repr(cell.fpr95), repr(cell.auroc),
                str(cell.n_id), str(cell.n_ood), cell.flags)))
        avg_f, avg_a = report.averages[m]
        lines.append(delimiter.join((
            m, "__average__", "", repr(avg_f), repr(avg_a), "", "", "")))
    return "\n".join(lines) + "\n"


def report_to_table(report: EvalReport) -> str:
    """Aligned text table, FPR95/AUROC as percentages with one decimal."""
    headers = ["Method"] + list(report.datasets) + ["Average"]
    rows = []
    for m in report.methods:
        row = [m]
        for d in report.datasets:
            cell = report.cells.get((m, d))
            row.append("-" if cell is None
                       else f"{100 * cell.fpr95:.1f} / {100 * cell.auroc:.1f}")
        avg_f, avg_a = report.averages[m]
        row.append(f"{100 * avg_f:.1f} / {100 * avg_a:.1f}")
        rows.append(row)
    widths = [max(len(r[i]) for r in [headers] + rows)
              for i in range(len(headers))]
    def fmt(row):
        return "  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip()
    sep = "  ".join("-" * w for w in widths)
    out = [fmt(headers), sep] + [fmt(r) for r in rows]
    out.append("")
    out.append("cells: FPR95 / AUROC as percentages")
    return "\n".join(out) + "\n"


def report_to_chart_svg(report: EvalReport, path, title: str = "") -> None:
    """Grouped bar chart per method: average AUROC and FPR95 for each dataset
    group, written as a deterministic SVG."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    groups = sorted({c.group for c in report.cells.values()})
    methods = report.methods

    def group_mean(metric, m, g):
        vals = [getattr(c, metric) for c in report.cells.values()
                if c.method == m and c.group == g]
        return 100 * float(np.mean(vals)) if vals else 0.0

    series = []
    for g in groups:
        series.append((f"AUROC {g}", [group_mean("auroc", m, g) for m in methods]))
    for g in groups:
        series.append((f"FPR95 {g}", [group_mean("fpr95", m, g) for m in methods]))

    with plt.rc_context({"svg.hashsalt": "oodkit"}):
        fig, ax = plt.subplots(figsize=(max(6, 1.2 * len(methods)), 4))
        x = np.arange(len(methods))
        width = 0.8 / max(len(series), 1)
        for i, (label, values) in enumerate(series):
            ax.bar(x + i * width, values, width, label=label)
        ax.set_xticks(x + 0.4 - width / 2)
        ax.set_xticklabels(methods, rotation=45, ha="right")
        ax.set_ylabel("percent")
        if title:
            ax.set_title(title)
        ax.legend(fontsize="small")
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)

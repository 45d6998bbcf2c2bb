"""Learning-curve figures from experiment CSVs.

Consumes only the versioned curve schema; one line per group (mean over runs
at matching update counts), with the batch baseline drawn as a constant
reference line. Rendering is deterministic: identical inputs give an
identical image file.
"""

from __future__ import annotations

import argparse
import csv
import glob
import os
import sys
from dataclasses import dataclass, field

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

SCHEMA = ["run_id", "approach", "b", "eps_inv", "delay_delta", "t", "samples_used", "test_error", "staleness"]
GROUP_COLUMNS = ["approach", "b", "eps_inv", "delay_delta"]
BATCH = "central_batch"

FIGURES = {
    "fig3": "No privacy, no delay",
    "fig4": "Privacy 1/eps = 0.1, varying minibatch",
    "fig5": "Privacy 1/eps = 0.1, varying delay",
}


class SchemaError(ValueError):
    pass


@dataclass
class CurveSpec:
    csv_paths: list[str]
    output_path: str
    group_by: list[str] = field(default_factory=lambda: list(GROUP_COLUMNS))
    title: str = ""
    x_label: str = "samples used"
    y_label: str = "test error"


def load_rows(paths: list[str]) -> list[dict]:
    rows = []
    for path in paths:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != SCHEMA:
                missing = sorted(set(SCHEMA) - set(header or []))
                raise SchemaError(f"{path}: header does not match the curve schema; missing columns {missing}")
            for raw in reader:
                row = dict(zip(SCHEMA, raw))
                row["t"] = int(row["t"])
                for col in ("b", "eps_inv", "delay_delta", "samples_used", "test_error", "staleness"):
                    row[col] = float(row[col])
                rows.append(row)
    return rows


def grouped_means(rows: list[dict], group_by: list[str]) -> dict[tuple, list[tuple[float, float]]]:
    """Per group: mean (samples_used, test_error) over run_id at each t, sorted by t."""
    unknown = [col for col in group_by if col not in SCHEMA]
    if unknown:
        raise SchemaError(f"group-by columns not in the schema: {unknown}")
    buckets: dict[tuple, dict[int, list[dict]]] = {}
    for row in rows:
        key = tuple(row[col] for col in group_by)
        buckets.setdefault(key, {}).setdefault(row["t"], []).append(row)
    out = {}
    for key, by_t in buckets.items():
        pts = []
        for t in sorted(by_t):
            group = by_t[t]
            pts.append((
                float(np.mean([g["samples_used"] for g in group])),
                float(np.mean([g["test_error"] for g in group])),
            ))
        out[key] = pts
    return out


def _label(key: tuple, group_by: list[str], varying: list[str]) -> str:
    parts = []
    for col, value in zip(group_by, key):
        if col == "approach":
            parts.append(str(value))
        elif col in varying:
            shown = int(value) if float(value).is_integer() else value
            parts.append(f"{col}={shown}")
    return " ".join(parts)


def build_figure(spec: CurveSpec):
    """Figure plus the plotted group means, so callers can cross-check values."""
    rows = load_rows(spec.csv_paths)
    if not rows:
        raise ValueError("no rows matched; nothing to plot")
    groups = grouped_means(rows, spec.group_by)
    varying = [
        col for col in spec.group_by
        if col != "approach" and len({key[spec.group_by.index(col)] for key in groups}) > 1
    ]

    fig, ax = plt.subplots(figsize=(7, 4.5), dpi=120)
    for key in sorted(groups, key=str):
        pts = groups[key]
        label = _label(key, spec.group_by, varying)
        approach = key[spec.group_by.index("approach")] if "approach" in spec.group_by else ""
        if approach == BATCH:
            # batch training is not incremental: a constant reference line
            ax.axhline(pts[-1][1], linestyle="--", color="black", label=f"{label} (constant)")
        else:
            xs, ys = zip(*pts)
            ax.plot(xs, ys, label=label)
    ax.set_xlabel(spec.x_label)
    ax.set_ylabel(spec.y_label)
    ax.set_ylim(0.0, 1.0)
    if spec.title:
        ax.set_title(spec.title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return fig, groups


def render(spec: CurveSpec) -> str:
    fig, _ = build_figure(spec)
    os.makedirs(os.path.dirname(spec.output_path) or ".", exist_ok=True)
    # pinned metadata keeps re-renders byte-identical
    fig.savefig(spec.output_path, format="png", metadata={"Software": "curveplot"})
    plt.close(fig)
    return spec.output_path


def spec_for_figure(figure: str, input_dir: str, output_dir: str) -> CurveSpec:
    paths = sorted(glob.glob(os.path.join(input_dir, "*", "run_*.csv")))
    return CurveSpec(
        csv_paths=paths,
        output_path=os.path.join(output_dir, f"{figure}.png"),
        title=FIGURES.get(figure, figure),
    )


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="curveplot", description=__doc__)
    parser.add_argument("--input-dir", required=True, help="experiment output directory (cell subdirs)")
    parser.add_argument("--output-dir", required=True)
    parser.add_argument("--figure", choices=sorted(FIGURES), default="fig3")
    args = parser.parse_args(argv)
    spec = spec_for_figure(args.figure, args.input_dir, args.output_dir)
    if not spec.csv_paths:
        print(f"no run CSVs under {args.input_dir}", file=sys.stderr)
        return 1
    try:
        path = render(spec)
    except (SchemaError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())

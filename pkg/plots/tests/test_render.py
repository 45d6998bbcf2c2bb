import hashlib
import os
import subprocess
import sys

import numpy as np
import pytest

from curveplot import CurveSpec, SchemaError, build_figure, grouped_means, load_rows, render
from curveplot.render import SCHEMA, main, spec_for_figure

HEADER = ",".join(SCHEMA)


def write_csv(path, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [HEADER] + [",".join(str(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")
    return str(path)


def fixture_cell(tmp_path, approach="crowd", b=1, eps=0.0, delay=0.0, runs=2):
    paths = []
    for r in range(runs):
        rows = [
            (f"{approach}_r{r}", approach, b, eps, delay, t, t * 10, 0.5 / (t + r), 0.0)
            for t in (1, 20, 40)
        ]
        paths.append(write_csv(tmp_path / f"{approach}_b{b}" / f"run_{r}.csv", rows))
    return paths


class TestLoading:
    def test_round_trip(self, tmp_path):
        paths = fixture_cell(tmp_path)
        rows = load_rows(paths)
        assert len(rows) == 6
        assert rows[0]["approach"] == "crowd" and rows[0]["t"] == 1

    def test_schema_mismatch_names_columns(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("run_id,approach,b\nx,crowd,1\n")
        with pytest.raises(SchemaError) as info:
            load_rows([str(bad)])
        assert "delay_delta" in str(info.value)

    def test_unknown_group_column(self, tmp_path):
        rows = load_rows(fixture_cell(tmp_path))
        with pytest.raises(SchemaError):
            grouped_means(rows, ["approach", "flavor"])


class TestGroupedMeans:
    def test_means_are_exact(self, tmp_path):
        paths = fixture_cell(tmp_path, runs=3)
        rows = load_rows(paths)
        groups = grouped_means(rows, ["approach", "b", "eps_inv", "delay_delta"])
        key = ("crowd", 1.0, 0.0, 0.0)
        pts = dict((int(x / 10), y) for x, y in groups[key])
        # at t=20: runs r=0,1,2 logged 0.5/(20+r)
        want = float(np.mean([0.5 / 20, 0.5 / 21, 0.5 / 22]))
        assert pts[20] == want

    def test_groups_split_by_columns(self, tmp_path):
        fixture_cell(tmp_path, b=1)
        fixture_cell(tmp_path, b=20)
        rows = load_rows(sorted(str(p) for p in tmp_path.glob("*/run_*.csv")))
        groups = grouped_means(rows, ["approach", "b", "eps_inv", "delay_delta"])
        assert len(groups) == 2


class TestRender:
    def test_writes_image_and_is_deterministic(self, tmp_path):
        paths = fixture_cell(tmp_path)
        spec = CurveSpec(csv_paths=paths, output_path=str(tmp_path / "fig" / "out.png"))
        first = render(spec)
        digest_a = hashlib.sha256(open(first, "rb").read()).hexdigest()
        render(spec)
        digest_b = hashlib.sha256(open(first, "rb").read()).hexdigest()
        assert digest_a == digest_b
        assert os.path.getsize(first) > 1000

    def test_plotted_values_equal_csv_means(self, tmp_path):
        paths = fixture_cell(tmp_path, runs=2)
        spec = CurveSpec(csv_paths=paths, output_path=str(tmp_path / "out.png"))
        fig, groups = build_figure(spec)
        (line,) = fig.axes[0].lines
        ys = list(line.get_ydata())
        want = [y for _, y in groups[("crowd", 1.0, 0.0, 0.0)]]
        assert ys == want

    def test_batch_is_constant_line(self, tmp_path):
        paths = fixture_cell(tmp_path) + [
            write_csv(tmp_path / "central_batch_b0" / "run_0.csv",
                      [("batch_r0", "central_batch", 0, 0.0, 0.0, 0, 1000, 0.1, 0.0)])
        ]
        spec = CurveSpec(csv_paths=paths, output_path=str(tmp_path / "out.png"))
        fig, _ = build_figure(spec)
        ax = fig.axes[0]
        constants = [ln for ln in ax.lines if len(set(ln.get_ydata())) == 1 and "constant" in str(ln.get_label())]
        assert constants and constants[0].get_ydata()[0] == 0.1

    def test_empty_input_errors_without_file(self, tmp_path):
        out = tmp_path / "nothing.png"
        with pytest.raises(ValueError):
            render(CurveSpec(csv_paths=[], output_path=str(out)))
        assert not out.exists()

    def test_cli_main(self, tmp_path):
        fixture_cell(tmp_path / "exp")
        rc = main(["--input-dir", str(tmp_path / "exp"), "--output-dir", str(tmp_path / "figs"),
                   "--figure", "fig3"])
        assert rc == 0
        assert (tmp_path / "figs" / "fig3.png").exists()
        assert main(["--input-dir", str(tmp_path / "hollow"), "--output-dir", str(tmp_path / "figs")]) == 1


MINI_PROTOCOLS = {
    "fig3": (
        "approach = crowd\napproach = central_batch\napproach = decentralized\n"
        "b = 1\neps_inv = 0\ndelay_delta = 0\n"
    ),
    "fig4": (
        "approach = crowd\napproach = central_sgd_private\napproach = central_batch\n"
        "b = 1\nb = 4\neps_inv = 0.2\ndelay_delta = 0\n"
    ),
    "fig5": (
        "approach = crowd\nb = 1\nb = 4\neps_inv = 0.2\n"
        "delay_delta = 1\ndelay_delta = 100\n"
    ),
}

COMMON = (
    "trials = 2\nlambda = 0.0001\nc = 2.0\ndevices = 3\npasses = 2\neval_every = 10\n"
    "seed = 5\ndata = synth:classes=3,features=6,train=300,test=80,sep=3.0\n"
)


@pytest.fixture(scope="module")
def outputs(tmp_path_factory):
    base = tmp_path_factory.mktemp("exp")
    dirs = {}
    for name, block in MINI_PROTOCOLS.items():
        cfg = base / f"{name}.cfg"
        out = base / name
        cfg.write_text(block + COMMON + f"out_dir = {out}\n")
        proc = subprocess.run(
            [sys.executable, "-m", "privsgd.cli", "simulate", str(cfg)],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0, proc.stderr
        dirs[name] = str(out)
    return dirs


class TestFigureAnalogs:
    """Criterion-11 shape: miniature experiment outputs -> three rendered figures."""

    @pytest.mark.parametrize("figure", ["fig3", "fig4", "fig5"])
    def test_render_each_figure(self, outputs, figure, tmp_path):
        spec = spec_for_figure(figure, outputs[figure], str(tmp_path))
        assert spec.csv_paths
        path = render(spec)
        digest_a = hashlib.sha256(open(path, "rb").read()).hexdigest()
        render(spec)
        digest_b = hashlib.sha256(open(path, "rb").read()).hexdigest()
        assert digest_a == digest_b

    def test_spot_check_plotted_means(self, outputs, tmp_path):
        spec = spec_for_figure("fig3", outputs["fig3"], str(tmp_path))
        fig, groups = build_figure(spec)
        rows = load_rows(spec.csv_paths)
        crowd = [r for r in rows if r["approach"] == "crowd"]
        some_t = crowd[0]["t"]
        want = float(np.mean([r["test_error"] for r in crowd if r["t"] == some_t]))
        key = ("crowd", 1.0, 0.0, 0.0)
        got = dict(
            (t, y) for (x, y), t in zip(groups[key], sorted({r["t"] for r in crowd}))
        )[some_t]
        assert got == want

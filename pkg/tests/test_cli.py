import os

import numpy as np
import pytest

from privsgd.cli import (
    CSV_HEADER,
    ConfigError,
    ExperimentConfig,
    build_live_server,
    device_live,
    expand_cells,
    load_config,
    report,
    resolve_data,
    run_experiment,
)
from privsgd.optim import LearningRateSchedule
from privsgd.privacy import RngStream
from privsgd.simnet import SimConfig, run_simulation
from privsgd.wire import WireServer

BASE_CFG = """
# comment lines and blanks are fine
approach = crowd
approach = central_batch
trials = 2
b = 1
b = 2
eps_inv = 0
delay_delta = 0
lambda = 0.0001
c = 2.0
devices = 3
passes = 2
eval_every = 5
seed = 7
data = synth:classes=3,features=6,train=240,test=60,sep=3.0
out_dir = {out}
"""


def write_cfg(tmp_path, text, name="exp.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


class TestConfigParsing:
    def test_full_parse(self, tmp_path):
        cfg = load_config(write_cfg(tmp_path, BASE_CFG.format(out=tmp_path / "out")))
        assert cfg.approaches == ["crowd", "central_batch"]
        assert cfg.b_list == [1, 2] and cfg.trials == 2
        assert cfg.lambda_grid == [0.0001] and cfg.c_grid == [2.0]
        assert cfg.devices == 3 and cfg.seed == 7

    def test_defaults_survive(self, tmp_path):
        cfg = load_config(write_cfg(tmp_path, "approach = crowd\n"))
        assert cfg.trials == 10 and cfg.b_list == [1] and cfg.rho is None

    def test_unknown_key_names_line(self, tmp_path):
        path = write_cfg(tmp_path, "approach = crowd\nbogus = 3\n")
        with pytest.raises(ConfigError) as info:
            load_config(path)
        assert ":2:" in str(info.value)

    def test_bad_value_names_line(self, tmp_path):
        path = write_cfg(tmp_path, "trials = soon\n")
        with pytest.raises(ConfigError) as info:
            load_config(path)
        assert ":1:" in str(info.value)

    def test_missing_equals(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(write_cfg(tmp_path, "approach crowd\n"))

    def test_unknown_approach(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(write_cfg(tmp_path, "approach = waterfall\n"))

    def test_rho_none_sentinel(self, tmp_path):
        cfg = load_config(write_cfg(tmp_path, "approach = crowd\nrho = none\n"))
        assert cfg.rho is None
        cfg = load_config(write_cfg(tmp_path, "approach = crowd\nrho = 0.25\n"))
        assert cfg.rho == 0.25

    def test_out_dir_env_override(self, tmp_path, monkeypatch):
        monkeypatch.setenv("PRIVSGD_OUT_DIR", str(tmp_path / "elsewhere"))
        cfg = load_config(write_cfg(tmp_path, "approach = crowd\nout_dir = ignored\n"))
        assert cfg.out_dir.endswith("elsewhere")


class TestCellExpansion:
    def test_axes_per_approach(self):
        cfg = ExperimentConfig(
            approaches=["crowd", "central_batch", "central_sgd_private", "decentralized"],
            b_list=[1, 20], eps_inv_list=[0.0, 0.1], delay_delta_list=[0.0, 10.0],
        )
        cells = expand_cells(cfg)
        crowd = [c for c in cells if c.approach == "crowd"]
        assert len(crowd) == 8  # full product
        csp = [c for c in cells if c.approach == "central_sgd_private"]
        assert len(csp) == 4 and all(c.delay_delta == 0.0 for c in csp)
        assert sum(c.approach == "central_batch" for c in cells) == 1
        assert sum(c.approach == "decentralized" for c in cells) == 1

    def test_cell_names_unique(self):
        cfg = ExperimentConfig(approaches=["crowd"], b_list=[1, 2], eps_inv_list=[0.0, 0.5],
                               delay_delta_list=[0.0, 1.0])
        names = [c.name for c in expand_cells(cfg)]
        assert len(set(names)) == len(names)


class TestResolveData:
    def test_synth(self):
        cfg = ExperimentConfig(data="synth:classes=4,features=5,train=100,test=40,sep=2.0")
        train, test = resolve_data(cfg)
        assert len(train) == 100 and len(test) == 40
        assert train.n_classes == 4 and train.n_features == 5
        train.check_l1()

    def test_digits_with_pca(self, tmp_path):
        cfg = ExperimentConfig(
            data=f"digits:train=120,test=30,cache_dir={tmp_path}", pca_dim=12)
        train, test = resolve_data(cfg)
        assert train.n_features == 12 and len(test) == 30
        train.check_l1()

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            resolve_data(ExperimentConfig(data="parquet:x=1"))


class TestRunExperiment:
    def test_end_to_end_outputs(self, tmp_path):
        out = tmp_path / "out"
        code = run_experiment(write_cfg(tmp_path, BASE_CFG.format(out=out)))
        assert code == 0
        cells = expand_cells(load_config(write_cfg(tmp_path, BASE_CFG.format(out=out))))
        for cell in cells:
            cell_dir = out / cell.name
            assert (cell_dir / "run_0.csv").exists()
            assert (cell_dir / "mean.csv").exists()
        assert (out / "summary.csv").exists()
        assert (out / "metadata.txt").exists()
        first = (out / cells[0].name / "run_0.csv").read_text().splitlines()
        assert first[0] == CSV_HEADER

    def test_mean_csv_is_exact_mean(self, tmp_path):
        out = tmp_path / "out"
        run_experiment(write_cfg(tmp_path, BASE_CFG.format(out=out)))
        cell_dir = out / "crowd_b1_e0_d0"
        runs = []
        for k in range(2):
            rows = [ln.split(",") for ln in (cell_dir / f"run_{k}.csv").read_text().splitlines()[1:]]
            runs.append({int(r[5]): float(r[7]) for r in rows})
        mean_rows = [ln.split(",") for ln in (cell_dir / "mean.csv").read_text().splitlines()[1:]]
        for r in mean_rows:
            t, got = int(r[5]), float(r[7])
            vals = [run[t] for run in runs if t in run]
            assert got == float(np.mean(vals))

    def test_byte_identical_reruns(self, tmp_path):
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        run_experiment(write_cfg(tmp_path, BASE_CFG.format(out=out_a), name="a.cfg"))
        run_experiment(write_cfg(tmp_path, BASE_CFG.format(out=out_b), name="b.cfg"))
        for root, _, files in os.walk(out_a):
            for f in files:
                a_path = os.path.join(root, f)
                b_path = a_path.replace(str(out_a), str(out_b))
                assert open(a_path, "rb").read() == open(b_path, "rb").read(), f

    def test_bad_config_exit_2(self, tmp_path):
        assert run_experiment(write_cfg(tmp_path, "nonsense = 1\n")) == 2
        assert run_experiment(str(tmp_path / "missing.cfg")) == 2

    def test_runtime_failure_exit_1(self, tmp_path, capsys):
        text = BASE_CFG.format(out=tmp_path / "out").replace(
            "data = synth:classes=3,features=6,train=240,test=60,sep=3.0",
            "data = idx:train_images=/nope,train_labels=/nope,test_images=/nope,test_labels=/nope",
        )
        assert run_experiment(write_cfg(tmp_path, text)) == 1
        assert "failed" in capsys.readouterr().err

    def test_grid_selection_records_choice(self, tmp_path):
        out = tmp_path / "out"
        text = BASE_CFG.format(out=out) + "lambda = 0.01\nc = 0.5\n"
        assert run_experiment(write_cfg(tmp_path, text)) == 0
        meta = (out / "metadata.txt").read_text()
        assert "lambda=" in meta and "c=" in meta
        summary = (out / "summary.csv").read_text().splitlines()
        assert summary[0] == "approach,b,eps_inv,delay_delta,lambda,c,trials,final_error"

    def test_report(self, tmp_path, capsys):
        out = tmp_path / "out"
        run_experiment(write_cfg(tmp_path, BASE_CFG.format(out=out)))
        assert report(str(out)) == 0
        assert "approach" in capsys.readouterr().out
        assert report(str(tmp_path / "empty")) == 1


LIVE_CFG = """
approach = crowd
b = 1
eps_inv = 0
delay_delta = 0
lambda = 0.001
c = 2.0
devices = 1
trials = 1
passes = 2
seed = 13
sample_rate = 10000
data = synth:classes=3,features=6,train=80,test=20,sep=3.0
token = hushhush
"""


class TestLiveMode:
    def test_live_device_matches_simulation(self, tmp_path):
        cfg_path = write_cfg(tmp_path, LIVE_CFG)
        cfg = load_config(cfg_path)
        train, test = resolve_data(cfg)
        server = build_live_server(cfg, train)
        wire = WireServer(server, "127.0.0.1", 0)
        wire.start()
        try:
            rc = device_live(cfg_path, f"127.0.0.1:{wire.address[1]}")
            assert rc == 0
        finally:
            wire.stop()
        sim = SimConfig(n_devices=1, b=1, cap=cfg.buffer_cap, sched=LearningRateSchedule(2.0),
                        l2=0.001, passes=2, seed=13)
        trace = run_simulation(sim, train, test)
        assert server.t == trace.records[-1].t
        assert np.abs(server.params.w - trace.final_params.w).max() <= 1e-12

    def test_checkpoint_restart_resumes_exactly(self, tmp_path):
        ckpt = str(tmp_path / "ckpt")
        cfg = load_config(write_cfg(tmp_path, LIVE_CFG + f"checkpoint = {ckpt}\ncheckpoint_every = 2\n"))
        train, _ = resolve_data(cfg)
        server = build_live_server(cfg, train)
        from privsgd.device import CheckinMessage

        for k in range(4):
            g = RngStream(k, 0).generator().standard_normal(server.params.w.shape) * 0.01
            server.handle_checkin(
                CheckinMessage(0, g, 1, 0, np.array([1, 0, 0])), token=cfg.token)
        resumed = build_live_server(cfg, train)  # picks the checkpoint up
        assert resumed.t == 4
        assert resumed.params.w.tobytes() == server.params.w.tobytes()

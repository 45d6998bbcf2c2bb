"""Experiment runner, CSV persistence, and live (wire-protocol) mode.

Configs are flat `key = value` text files; repeating a key builds a list
(`approach`, `b`, `eps_inv`, `delay_delta`, and the `lambda`/`c` grids).
Curve CSVs share one versioned schema so the plotting side never needs to
know how a run was produced.
"""

from __future__ import annotations

import argparse
import itertools
import math
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import baselines
from .data import Dataset, digit_corpus_dataset, finalize, load_idx, random_shards, synth_generate
from .device import DeviceState
from .model import ParamMatrix
from .optim import LearningRateSchedule
from .privacy import PrivacySpec, RngStream, derive_seed
from .server import build_server, load_checkpoint, save_checkpoint
from .simnet import DelayModel, SimConfig, run_simulation
from .wire import WireClient, WireServer

CSV_HEADER = "run_id,approach,b,eps_inv,delay_delta,t,samples_used,test_error,staleness"

CROWD = "crowd"
APPROACHES = (CROWD, baselines.CENTRAL_BATCH, baselines.CENTRAL_SGD_PRIVATE, baselines.DECENTRALIZED)


class ConfigError(ValueError):
    def __init__(self, path: str, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.line_no = line_no


@dataclass
class ExperimentConfig:
    approaches: list[str] = field(default_factory=lambda: [CROWD])
    trials: int = 10
    b_list: list[int] = field(default_factory=lambda: [1])
    eps_inv_list: list[float] = field(default_factory=lambda: [0.0])
    delay_delta_list: list[float] = field(default_factory=lambda: [0.0])
    lambda_grid: list[float] = field(default_factory=lambda: [0.0])
    c_grid: list[float] = field(default_factory=lambda: [1.0])
    devices: int = 50
    sample_rate: float = 1.0
    buffer_cap: int = 1000
    holdout_fraction: float = 0.0
    passes: int = 5
    radius: float = 100.0
    t_max: int = 10**9
    rho: float | None = None
    eval_every: int = 20
    eps_counts: float = 0.1
    drop_prob: float = 0.0
    seed: int = 0
    data: str = "synth:classes=3,features=10,train=2000,test=500,sep=3.0"
    pca_dim: int | None = None
    batch_iters: int = 500
    out_dir: str = "out"
    token: str = "public"
    host: str = "127.0.0.1"
    port: int = 0
    checkpoint: str | None = None
    checkpoint_every: int = 100
    live_device_id: int = 0


_KEYS = {
    "approach": ("approaches", str, True),
    "trials": ("trials", int, False),
    "b": ("b_list", int, True),
    "eps_inv": ("eps_inv_list", float, True),
    "delay_delta": ("delay_delta_list", float, True),
    "lambda": ("lambda_grid", float, True),
    "c": ("c_grid", float, True),
    "devices": ("devices", int, False),
    "sample_rate": ("sample_rate", float, False),
    "buffer_cap": ("buffer_cap", int, False),
    "holdout_fraction": ("holdout_fraction", float, False),
    "passes": ("passes", int, False),
    "radius": ("radius", float, False),
    "t_max": ("t_max", int, False),
    "rho": ("rho", lambda s: None if s == "none" else float(s), False),
    "eval_every": ("eval_every", int, False),
    "eps_counts": ("eps_counts", float, False),
    "drop_prob": ("drop_prob", float, False),
    "seed": ("seed", int, False),
    "data": ("data", str, False),
    "pca_dim": ("pca_dim", lambda s: None if s == "none" else int(s), False),
    "batch_iters": ("batch_iters", int, False),
    "out_dir": ("out_dir", str, False),
    "token": ("token", str, False),
    "host": ("host", str, False),
    "port": ("port", int, False),
    "checkpoint": ("checkpoint", str, False),
    "checkpoint_every": ("checkpoint_every", int, False),
    "live_device_id": ("live_device_id", int, False),
}


def load_config(path: str) -> ExperimentConfig:
    cfg = ExperimentConfig()
    seen_lists: set[str] = set()
    with open(path) as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(path, line_no, f"expected 'key = value', got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in _KEYS:
                raise ConfigError(path, line_no, f"unknown key {key!r}")
            attr, parse, is_list = _KEYS[key]
            try:
                parsed = parse(value)
            except ValueError:
                raise ConfigError(path, line_no, f"bad value {value!r} for {key}") from None
            if is_list:
                if attr not in seen_lists:
                    # first occurrence replaces the default list
                    setattr(cfg, attr, [])
                    seen_lists.add(attr)
                getattr(cfg, attr).append(parsed)
            else:
                setattr(cfg, attr, parsed)
    for approach in cfg.approaches:
        if approach not in APPROACHES:
            raise ConfigError(path, 0, f"unknown approach {approach!r}")
    if not cfg.approaches:
        raise ConfigError(path, 0, "approach list is empty")
    if cfg.trials < 1:
        raise ConfigError(path, 0, "trials must be >= 1")
    if any(b > cfg.buffer_cap for b in cfg.b_list):
        raise ConfigError(path, 0, "a minibatch size exceeds buffer_cap")
    cfg.out_dir = os.environ.get("PRIVSGD_OUT_DIR", cfg.out_dir)
    return cfg


def resolve_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """Build the (train, test) pair named by the config's data descriptor."""
    kind, _, spec = cfg.data.partition(":")
    opts = dict(item.split("=", 1) for item in spec.split(",") if item)
    data_seed = derive_seed(cfg.seed, "data")

    if kind == "synth":
        n_train = int(opts.get("train", 2000))
        n_test = int(opts.get("test", 500))
        ds = synth_generate(
            int(opts.get("classes", 3)),
            int(opts.get("features", 10)),
            n_train + n_test,
            float(opts.get("sep", 3.0)),
            seed=data_seed,
        )
        train, test = ds.subset(np.arange(n_train)), ds.subset(np.arange(n_train, n_train + n_test))
        return finalize(train, test, cfg.pca_dim, data_seed) if cfg.pca_dim else (train, test)

    if kind == "digits":
        train, test = digit_corpus_dataset(
            int(opts.get("train", 10000)),
            int(opts.get("test", 2000)),
            seed=data_seed,
            cache_dir=opts.get("cache_dir"),
        )
        return finalize(train, test, cfg.pca_dim, data_seed)

    if kind == "idx":
        train = load_idx(opts["train_images"], opts["train_labels"])
        test = load_idx(opts["test_images"], opts["test_labels"])
        rng = RngStream(data_seed, 0).generator()
        if "train_subset" in opts:
            train = train.subset(rng.choice(len(train), int(opts["train_subset"]), replace=False))
        if "test_subset" in opts:
            test = test.subset(rng.choice(len(test), int(opts["test_subset"]), replace=False))
        return finalize(train, test, cfg.pca_dim, data_seed)

    raise ValueError(f"unknown data descriptor kind {kind!r}")


@dataclass(frozen=True)
class Cell:
    approach: str
    b: int
    eps_inv: float
    delay_delta: float

    @property
    def name(self) -> str:
        return f"{self.approach}_b{self.b}_e{_fmt(self.eps_inv)}_d{_fmt(self.delay_delta)}"


def _fmt(x: float) -> str:
    return repr(int(x)) if float(x).is_integer() else repr(float(x))


def expand_cells(cfg: ExperimentConfig) -> list[Cell]:
    """One cell per point of the grid each approach actually depends on."""
    cells: list[Cell] = []
    for approach in cfg.approaches:
        if approach == CROWD:
            for b, eps, delay in itertools.product(cfg.b_list, cfg.eps_inv_list, cfg.delay_delta_list):
                cells.append(Cell(approach, b, eps, delay))
        elif approach == baselines.CENTRAL_SGD_PRIVATE:
            for b, eps in itertools.product(cfg.b_list, cfg.eps_inv_list):
                cells.append(Cell(approach, b, eps, 0.0))
        elif approach == baselines.CENTRAL_BATCH:
            cells.append(Cell(approach, 0, 0.0, 0.0))
        elif approach == baselines.DECENTRALIZED:
            cells.append(Cell(approach, 1, 0.0, 0.0))
    return cells


@dataclass
class RunResult:
    rows: list[tuple]
    final_error: float
    seed: int


def run_cell_trial(
    cfg: ExperimentConfig,
    cell: Cell,
    lam: float,
    c: float,
    trial: int,
    train: Dataset,
    test: Dataset,
) -> RunResult:
    seed = derive_seed(cfg.seed, cell.approach, str(cell.b), str(cell.eps_inv), str(cell.delay_delta), trial)
    run_id = f"{cell.name}_r{trial}"
    sched = LearningRateSchedule(c)

    def row(t, samples_used, err, staleness=0.0):
        return (run_id, cell.approach, cell.b, cell.eps_inv, cell.delay_delta,
                int(t), int(samples_used), float(err), float(staleness))

    if cell.approach == CROWD:
        sim = SimConfig(
            n_devices=cfg.devices,
            b=cell.b,
            cap=cfg.buffer_cap,
            sample_rate=cfg.sample_rate,
            holdout_fraction=cfg.holdout_fraction,
            priv=PrivacySpec.from_eps_inv(cell.eps_inv, cfg.eps_counts),
            sched=sched,
            l2=lam,
            radius=cfg.radius,
            t_max=cfg.t_max,
            rho=cfg.rho,
            delay=DelayModel.from_delta(cell.delay_delta, cfg.devices, cfg.sample_rate),
            passes=cfg.passes,
            eval_every=cfg.eval_every,
            drop_prob=cfg.drop_prob,
            seed=seed,
            data=cfg.data,
        )
        trace = run_simulation(sim, train, test)
        rows = [
            row(rec.t, rec.samples_used, rec.test_error, rec.staleness)
            for rec in trace.records
            if not math.isnan(rec.test_error)
        ]
        return RunResult(rows, trace.final_test_error(), seed)

    if cell.approach == baselines.CENTRAL_BATCH:
        res = baselines.train_central_batch(train, lam, iters=cfg.batch_iters, test=test)
    elif cell.approach == baselines.CENTRAL_SGD_PRIVATE:
        res = baselines.train_central_sgd_private(
            train,
            PrivacySpec.from_eps_inv(cell.eps_inv, cfg.eps_counts),
            cell.b,
            sched,
            lam,
            cfg.radius,
            RngStream(seed, 0).generator(),
            test=test,
            passes=cfg.passes,
            eval_every=cfg.eval_every,
        )
    else:
        shards = random_shards(len(train), cfg.devices, RngStream(derive_seed(seed, "shard"), 0).generator())
        res = baselines.train_decentralized(train, shards, sched, lam, cfg.radius, test=test, passes=cfg.passes)
    rows = [row(t, n, err) for t, n, err in res.curve]
    return RunResult(rows, res.final_error, seed)


def _write_csv(path: str, rows: list[tuple]) -> None:
    with open(path, "w") as fh:
        fh.write(CSV_HEADER + "\n")
        for r in rows:
            fh.write(",".join(_csv_field(v) for v in r) + "\n")


def _csv_field(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _mean_rows(runs: list[RunResult], cell: Cell) -> list[tuple]:
    """Aggregate per-run rows at matching t: plain arithmetic means."""
    by_t: dict[int, list[tuple]] = {}
    for run in runs:
        for r in run.rows:
            by_t.setdefault(r[5], []).append(r)
    out = []
    for t in sorted(by_t):
        group = by_t[t]
        out.append((
            "mean", cell.approach, cell.b, cell.eps_inv, cell.delay_delta, t,
            float(np.mean([g[6] for g in group])),
            float(np.mean([g[7] for g in group])),
            float(np.mean([g[8] for g in group])),
        ))
    return out


def run_experiment(config_path: str) -> int:
    """Run every (approach, b, eps, delay) cell for `trials` seeded runs; write CSVs."""
    try:
        cfg = load_config(config_path)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    cell = None
    try:
        train, test = resolve_data(cfg)
        os.makedirs(cfg.out_dir, exist_ok=True)
        summary_rows = []
        meta_lines = []
        for cell in expand_cells(cfg):
            # deterministic baselines do not vary across trials
            trials = 1 if cell.approach == baselines.CENTRAL_BATCH else cfg.trials
            uses_c = cell.approach != baselines.CENTRAL_BATCH
            grid = list(itertools.product(cfg.lambda_grid, cfg.c_grid if uses_c else cfg.c_grid[:1]))
            best = None
            for lam, c in grid:
                runs = [run_cell_trial(cfg, cell, lam, c, k, train, test) for k in range(trials)]
                mean_final = float(np.mean([r.final_error for r in runs]))
                if best is None or mean_final < best[0]:
                    best = (mean_final, lam, c, runs)
            mean_final, lam, c, runs = best
            cell_dir = os.path.join(cfg.out_dir, cell.name)
            os.makedirs(cell_dir, exist_ok=True)
            for k, run in enumerate(runs):
                _write_csv(os.path.join(cell_dir, f"run_{k}.csv"), run.rows)
                meta_lines.append(f"cell={cell.name} trial={k} seed={run.seed} lambda={lam!r} c={c!r}")
            _write_csv(os.path.join(cell_dir, "mean.csv"), _mean_rows(runs, cell))
            summary_rows.append((cell, lam, c, trials, mean_final))

        with open(os.path.join(cfg.out_dir, "summary.csv"), "w") as fh:
            fh.write("approach,b,eps_inv,delay_delta,lambda,c,trials,final_error\n")
            for cell, lam, c, trials, err in summary_rows:
                fh.write(f"{cell.approach},{cell.b},{_csv_field(float(cell.eps_inv))},"
                         f"{_csv_field(float(cell.delay_delta))},{_csv_field(float(lam))},"
                         f"{_csv_field(float(c))},{trials},{_csv_field(float(err))}\n")
        with open(os.path.join(cfg.out_dir, "metadata.txt"), "w") as fh:
            fh.write("\n".join(meta_lines) + "\n")
        return 0
    except Exception as exc:  # noqa: BLE001 - report the failing cell, then fail
        where = cell.name if cell is not None else "setup"
        print(f"experiment failed in {where}: {exc}", file=sys.stderr)
        return 1


def report(out_dir: str) -> int:
    path = os.path.join(out_dir, "summary.csv")
    if not os.path.exists(path):
        print(f"no summary at {path}", file=sys.stderr)
        return 1
    with open(path) as fh:
        lines = [ln.rstrip("\n").split(",") for ln in fh]
    widths = [max(len(row[i]) for row in lines) for i in range(len(lines[0]))]
    for row in lines:
        print("  ".join(col.ljust(w) for col, w in zip(row, widths)))
    return 0


# --- live mode -------------------------------------------------------------


def build_live_server(cfg: ExperimentConfig, train: Dataset):
    seed = derive_seed(cfg.seed, "server")
    if cfg.checkpoint and os.path.exists(cfg.checkpoint):
        server = load_checkpoint(
            cfg.checkpoint,
            LearningRateSchedule(cfg.c_grid[0]),
            cfg.t_max,
            radius=cfg.radius,
            l2=cfg.lambda_grid[0],
            rho=cfg.rho,
            token=cfg.token,
            checkpoint_path=cfg.checkpoint,
            checkpoint_every=cfg.checkpoint_every,
        )
        for m in range(cfg.devices):
            server.register_device(m)
        return server
    server = build_server(
        train.n_classes,
        train.n_features,
        LearningRateSchedule(cfg.c_grid[0]),
        cfg.t_max,
        seed,
        radius=cfg.radius,
        l2=cfg.lambda_grid[0],
        rho=cfg.rho,
        n_devices=cfg.devices,
        token=cfg.token,
        checkpoint_path=cfg.checkpoint,
        checkpoint_every=cfg.checkpoint_every,
    )
    return server


def serve_live(config_path: str) -> int:
    cfg = load_config(config_path)
    train, _ = resolve_data(cfg)
    server = build_live_server(cfg, train)
    wire_server = WireServer(server, cfg.host, cfg.port)
    print(f"serving on {wire_server.address[0]}:{wire_server.address[1]}")
    try:
        wire_server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        if cfg.checkpoint:
            save_checkpoint(server, cfg.checkpoint)
    return 0


def device_live(config_path: str, address: str, device_id: int | None = None) -> int:
    """Run the device loop against a live server, pacing samples at the config rate."""
    cfg = load_config(config_path)
    train, _ = resolve_data(cfg)
    m = cfg.live_device_id if device_id is None else device_id
    host, _, port = address.partition(":")
    client = WireClient(host, int(port), cfg.token)

    shard_rng = RngStream(derive_seed(cfg.seed, "shard"), 0).generator()
    shard = random_shards(len(train), cfg.devices, shard_rng)[m]
    stream = np.tile(shard, cfg.passes)
    device = DeviceState(m, train.n_classes, cfg.b_list[0], cfg.buffer_cap, cfg.holdout_fraction)
    rng = RngStream(derive_seed(cfg.seed, "device", m), 0).generator()
    priv = PrivacySpec.from_eps_inv(cfg.eps_inv_list[0], cfg.eps_counts)

    for idx in stream:
        time.sleep(1.0 / cfg.sample_rate)
        request = device.on_sample(train.sample(int(idx)))
        if request is None:
            continue
        reply = client.checkout(m)
        if reply is None:
            device.on_checkout_failure()
            continue
        _, w = reply
        params = ParamMatrix(w, radius=cfg.radius, l2=cfg.lambda_grid[0])
        msg = device.compute_checkin(params, priv, rng)
        client.checkin(msg)
    client.close()
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="privsgd", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)
    p_sim = sub.add_parser("simulate", help="run the experiment grid from a config file")
    p_sim.add_argument("config")
    p_serve = sub.add_parser("serve", help="run a live parameter server")
    p_serve.add_argument("config")
    p_dev = sub.add_parser("device", help="run a live device against a server")
    p_dev.add_argument("config")
    p_dev.add_argument("address", help="host:port of the server")
    p_dev.add_argument("--device-id", type=int, default=None)
    p_rep = sub.add_parser("report", help="print the summary table from an output dir")
    p_rep.add_argument("out_dir")
    args = parser.parse_args(argv)

    if args.verb == "simulate":
        return run_experiment(args.config)
    if args.verb == "serve":
        return serve_live(args.config)
    if args.verb == "device":
        return device_live(args.config, args.address, args.device_id)
    return report(args.out_dir)


if __name__ == "__main__":
    sys.exit(main())

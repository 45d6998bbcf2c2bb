"""Deterministic discrete-event simulation of many devices, one server, and network delays.

Virtual time only: device m emits its i-th sample at (i + m/M) / F_s, every
communication leg draws a uniform delay from its own [0, tau], and the event
heap is ordered by (time, creation sequence) so identical configs replay
identical runs bit for bit.
"""

from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, random_shards
from .device import DeviceState
from .model import ParamMatrix, error_rate
from .optim import LearningRateSchedule
from .privacy import PrivacySpec, RngStream, derive_seed
from .server import StoppedError, build_server

SAMPLE_ARRIVAL = "sample_arrival"
REQUEST_AT_SERVER = "request_at_server"
PARAMS_AT_DEVICE = "params_at_device"
CHECKIN_AT_SERVER = "checkin_at_server"


@dataclass(frozen=True)
class DelayModel:
    """Maximum one-way delays; each instance draws uniformly from [0, tau]."""

    tau_req: float = 0.0
    tau_co: float = 0.0
    tau_ci: float = 0.0

    def __post_init__(self):
        if min(self.tau_req, self.tau_co, self.tau_ci) < 0:
            raise ValueError("delays must be nonnegative")

    @classmethod
    def from_delta(cls, n_delta: float, n_devices: int, sample_rate: float) -> "DelayModel":
        """All three delays set to n_delta crowd-samples: tau = n_delta / (M * F_s)."""
        tau = n_delta / (n_devices * sample_rate)
        return cls(tau, tau, tau)


@dataclass
class SimConfig:
    n_devices: int
    b: int
    cap: int
    sample_rate: float = 1.0
    holdout_fraction: float = 0.0
    priv: PrivacySpec = field(default_factory=PrivacySpec.disabled)
    sched: LearningRateSchedule = field(default_factory=LearningRateSchedule)
    l2: float = 0.0
    radius: float = 100.0
    t_max: int = 10**9
    rho: float | None = None
    delay: DelayModel = field(default_factory=DelayModel)
    passes: int = 5
    eval_every: int = 20
    drop_prob: float = 0.0
    seed: int = 0
    data: str = ""
    record_params: bool = False

    def __post_init__(self):
        if self.n_devices < 1:
            raise ValueError("need at least one device")
        if self.sample_rate <= 0:
            raise ValueError("sample rate must be positive")
        if self.b > self.cap:
            raise ValueError(f"minibatch size {self.b} exceeds buffer cap {self.cap}")


@dataclass
class TraceRecord:
    t: int
    time: float
    device_id: int
    train_error: float
    test_error: float
    staleness: int
    samples_used: int


@dataclass
class Trace:
    records: list[TraceRecord]
    final_params: ParamMatrix
    samples_delivered: int
    samples_dropped: int
    params_history: list[np.ndarray] | None = None

    def final_test_error(self) -> float:
        for rec in reversed(self.records):
            if not math.isnan(rec.test_error):
                return rec.test_error
        return math.nan


def mean_staleness(trace: Trace) -> float:
    if not trace.records:
        raise ValueError("empty trace")
    return float(np.mean([r.staleness for r in trace.records]))


def run_simulation(cfg: SimConfig, train: Dataset, test: Dataset | None = None) -> Trace:
    """Run the event loop until the stopping criteria fire or the sample streams drain."""
    if len(train) == 0:
        raise ValueError("empty training set")
    train.check_l1()

    shard_rng = RngStream(derive_seed(cfg.seed, "shard"), 0).generator()
    net_rng = RngStream(derive_seed(cfg.seed, "net"), 0).generator()
    drop_rng = RngStream(derive_seed(cfg.seed, "drop"), 0).generator()
    device_rngs = [
        RngStream(derive_seed(cfg.seed, "device", m), 0).generator()
        for m in range(cfg.n_devices)
    ]

    shards = random_shards(len(train), cfg.n_devices, shard_rng)
    streams = [np.tile(shard, cfg.passes) for shard in shards]
    devices = [
        DeviceState(m, train.n_classes, cfg.b, cfg.cap, cfg.holdout_fraction)
        for m in range(cfg.n_devices)
    ]
    server = build_server(
        train.n_classes,
        train.n_features,
        cfg.sched,
        cfg.t_max,
        derive_seed(cfg.seed, "server"),
        radius=cfg.radius,
        l2=cfg.l2,
        rho=cfg.rho,
        n_devices=cfg.n_devices,
    )

    def test_error(params: ParamMatrix) -> float:
        if test is None:
            return math.nan
        return error_rate(params, test.X, test.y)

    heap: list[tuple] = []
    seq = itertools.count()

    def push(time: float, kind: str, device_id: int, payload=None):
        heapq.heappush(heap, (time, next(seq), kind, device_id, payload))

    def arrival_time(m: int, i: int) -> float:
        # deterministic stagger of b/M sample intervals spreads the devices'
        # buffer-fill phases evenly over one refill period, so checkins flow
        # at the steady rate M*F_s/b instead of arriving in synchronized bursts
        return (i + m * cfg.b / cfg.n_devices) / cfg.sample_rate

    for m in range(cfg.n_devices):
        if len(streams[m]):
            push(arrival_time(m, 0), SAMPLE_ARRIVAL, m, 0)

    records: list[TraceRecord] = []
    history: list[np.ndarray] | None = [] if cfg.record_params else None
    delivered = 0
    exact_s = 0
    exact_e = 0

    while heap and not server.stopping():
        now, _, kind, m, payload = heapq.heappop(heap)

        if kind == SAMPLE_ARRIVAL:
            i = payload
            request = devices[m].on_sample(train.sample(int(streams[m][i])))
            delivered += 1
            if i + 1 < len(streams[m]):
                push(arrival_time(m, i + 1), SAMPLE_ARRIVAL, m, i + 1)
            if request is not None:
                push(now + net_rng.uniform(0.0, cfg.delay.tau_req), REQUEST_AT_SERVER, m)

        elif kind == REQUEST_AT_SERVER:
            if cfg.drop_prob and drop_rng.random() < cfg.drop_prob:
                devices[m].on_checkout_failure()
                continue
            try:
                snapshot = server.handle_checkout(m)
            except StoppedError:
                devices[m].on_checkout_failure()
                continue
            push(now + net_rng.uniform(0.0, cfg.delay.tau_co), PARAMS_AT_DEVICE, m, (snapshot, server.t))

        elif kind == PARAMS_AT_DEVICE:
            snapshot, t_checkout = payload
            if cfg.drop_prob and drop_rng.random() < cfg.drop_prob:
                devices[m].on_checkout_failure()
                continue
            msg = devices[m].compute_checkin(snapshot, cfg.priv, device_rngs[m])
            true_counts = devices[m].last_true_counts
            push(now + net_rng.uniform(0.0, cfg.delay.tau_ci), CHECKIN_AT_SERVER, m, (msg, t_checkout, true_counts))

        elif kind == CHECKIN_AT_SERVER:
            msg, t_checkout, true_counts = payload
            try:
                t_new = server.handle_checkin(msg)
            except StoppedError:
                continue
            exact_s += true_counts.n_s
            exact_e += true_counts.n_e
            evaluate = t_new == 1 or t_new % cfg.eval_every == 0
            records.append(
                TraceRecord(
                    t=t_new,
                    time=now,
                    device_id=m,
                    train_error=exact_e / exact_s,
                    test_error=test_error(server.params) if evaluate else math.nan,
                    staleness=t_new - 1 - t_checkout,
                    samples_used=exact_s,
                )
            )
            if history is not None:
                history.append(server.params.w.copy())

    if records and math.isnan(records[-1].test_error):
        records[-1].test_error = test_error(server.params)

    return Trace(
        records=records,
        final_params=server.params,
        samples_delivered=delivered,
        samples_dropped=sum(d.dropped for d in devices),
        params_history=history,
    )

"""Parameter server: checkout/checkin handling, the projected SGD update, progress estimates.

Handlers may be called from many threads (live mode); a single lock
serializes every read-modify-write so checkins apply atomically and checkout
snapshots never observe a half-applied update.
"""

from __future__ import annotations

import math
import os
import threading

import numpy as np

from .device import CheckinMessage
from .model import ParamMatrix
from .optim import LearningRateSchedule, learning_rate, sgd_step
from .privacy import RngStream


class AuthError(PermissionError):
    """Unknown device id or wrong token."""


class StoppedError(RuntimeError):
    """Request refused because the stopping criteria are met."""


class MalformedMessage(ValueError):
    """Checkin rejected before any state change."""


class NoDataError(RuntimeError):
    """Estimate requested before any samples were reported."""


def init_params(
    n_classes: int, n_features: int, radius: float, l2: float, rng: np.random.Generator
) -> ParamMatrix:
    """Randomized small init; keeps early posteriors near uniform."""
    w = rng.uniform(-0.01, 0.01, size=(n_classes, n_features))
    return ParamMatrix(w, radius=radius, l2=l2)


class DeviceAggregates:
    """Per-device running totals of reported counts."""

    def __init__(self, n_classes: int):
        self.n_s = 0
        self.n_e = 0
        self.n_y = np.zeros(n_classes, dtype=np.int64)
        self.last_checkout_t = -1


class Server:
    """Holds (t, w, per-device aggregates) and applies checkins in arrival order."""

    def __init__(
        self,
        params: ParamMatrix,
        sched: LearningRateSchedule,
        t_max: int,
        rho: float | None = None,
        n_devices: int = 0,
        token: str | None = None,
        max_staleness: float = math.inf,
        checkpoint_path: str | None = None,
        checkpoint_every: int = 100,
    ):
        self.params = params
        self.sched = sched
        self.t = 0
        self.t_max = t_max
        self.rho = rho
        self.token = token
        self.max_staleness = max_staleness
        self.checkpoint_path = checkpoint_path
        self.checkpoint_every = checkpoint_every
        self.aggregates: dict[int, DeviceAggregates] = {
            m: DeviceAggregates(params.n_classes) for m in range(n_devices)
        }
        self._lock = threading.Lock()

    def register_device(self, device_id: int) -> None:
        """Devices can join mid-task; sizes the aggregate slot for a late arrival."""
        with self._lock:
            self.aggregates.setdefault(device_id, DeviceAggregates(self.params.n_classes))

    def _auth(self, device_id: int, token: str | None) -> DeviceAggregates:
        agg = self.aggregates.get(device_id)
        if agg is None:
            raise AuthError(f"unregistered device {device_id}")
        if self.token is not None and token != self.token:
            raise AuthError(f"bad token from device {device_id}")
        return agg

    def handle_checkout(self, device_id: int, token: str | None = None) -> ParamMatrix:
        """Immutable snapshot of the current parameters."""
        with self._lock:
            agg = self._auth(device_id, token)
            if self._stopping_locked():
                raise StoppedError("stopping criteria met")
            agg.last_checkout_t = self.t
            return self.params.copy()

    def handle_checkin(self, msg: CheckinMessage, token: str | None = None) -> int:
        """Apply one sanitized report: aggregates, then w <- project(w - eta(t+1) g).

        Validation happens before any mutation; a rejected message leaves
        (t, w, aggregates) bit-identical. Returns the post-update counter.
        """
        with self._lock:
            agg = self._auth(msg.device_id, token)
            if self._stopping_locked():
                raise StoppedError("stopping criteria met")
            self._validate_locked(msg, agg)

            agg.n_s += int(msg.n_s)
            agg.n_e += int(msg.n_e_hat)
            agg.n_y += np.asarray(msg.n_y_hat, dtype=np.int64)
            eta = learning_rate(self.sched, self.t + 1)
            self.params = sgd_step(self.params, msg.g_hat, eta)
            self.t += 1
            if self.checkpoint_path and self.t % self.checkpoint_every == 0:
                save_checkpoint(self, self.checkpoint_path)
            return self.t

    def _validate_locked(self, msg: CheckinMessage, agg: DeviceAggregates) -> None:
        g = np.asarray(msg.g_hat)
        if g.shape != self.params.w.shape:
            raise MalformedMessage(f"gradient shape {g.shape} != {self.params.w.shape}")
        if not np.all(np.isfinite(g)):
            raise MalformedMessage("non-finite gradient entries")
        if len(np.asarray(msg.n_y_hat)) != self.params.n_classes:
            raise MalformedMessage("label-count vector has the wrong length")
        if msg.n_s < 1:
            raise MalformedMessage(f"n_s must be >= 1, got {msg.n_s}")
        if agg.last_checkout_t >= 0 and self.t - agg.last_checkout_t > self.max_staleness:
            raise MalformedMessage(
                f"gradient staleness {self.t - agg.last_checkout_t} exceeds cutoff"
            )

    def total_samples(self) -> int:
        return sum(a.n_s for a in self.aggregates.values())

    def error_estimate(self) -> float:
        """Running misclassification ratio from the (noisy) counts; unclamped."""
        n_s = self.total_samples()
        if n_s == 0:
            raise NoDataError("no samples reported yet")
        return sum(a.n_e for a in self.aggregates.values()) / n_s

    def prior_estimate(self, k: int) -> float:
        n_s = self.total_samples()
        if n_s == 0:
            raise NoDataError("no samples reported yet")
        return sum(int(a.n_y[k]) for a in self.aggregates.values()) / n_s

    def _stopping_locked(self) -> bool:
        if self.t >= self.t_max:
            return True
        if self.rho is None:
            return False
        n_s = self.total_samples()
        return n_s > 0 and sum(a.n_e for a in self.aggregates.values()) / n_s <= self.rho

    def stopping(self) -> bool:
        with self._lock:
            return self._stopping_locked()


def build_server(
    n_classes: int,
    n_features: int,
    sched: LearningRateSchedule,
    t_max: int,
    seed: int,
    radius: float = 100.0,
    l2: float = 0.0,
    rho: float | None = None,
    n_devices: int = 0,
    **kwargs,
) -> Server:
    """Server with seeded parameter init; the one constructor sim and live mode share."""
    params = init_params(n_classes, n_features, radius, l2, RngStream(seed, 0).generator())
    return Server(params, sched, t_max, rho=rho, n_devices=n_devices, **kwargs)


def save_checkpoint(server: Server, path: str) -> None:
    """Write (t, w, aggregates) as one PARAMS record plus one AGG line per device."""
    from . import wire

    lines = [wire.encode_params(server.t, server.params.w)]
    for m in sorted(server.aggregates):
        a = server.aggregates[m]
        fields = ["AGG", str(m), str(a.n_s), str(a.n_e)] + [str(int(c)) for c in a.n_y]
        lines.append(" ".join(fields))
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def load_checkpoint(
    path: str,
    sched: LearningRateSchedule,
    t_max: int,
    radius: float = 100.0,
    l2: float = 0.0,
    **kwargs,
) -> Server:
    """Rebuild a server from a checkpoint; schedule/limits come from config, not the file."""
    from . import wire

    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    t, w = wire.decode_params(lines[0])
    server = Server(ParamMatrix(w, radius=radius, l2=l2), sched, t_max, **kwargs)
    server.t = t
    for ln in lines[1:]:
        parts = ln.split()
        if parts[0] != "AGG":
            raise ValueError(f"unexpected checkpoint record {parts[0]!r}")
        m = int(parts[1])
        agg = DeviceAggregates(w.shape[0])
        agg.n_s, agg.n_e = int(parts[2]), int(parts[3])
        agg.n_y = np.array([int(v) for v in parts[4:]], dtype=np.int64)
        server.aggregates[m] = agg
    return server

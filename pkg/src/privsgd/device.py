"""Device-side state machine: buffer samples, check out parameters, report sanitized gradients.

A device buffers incoming samples until it holds at least b of them, asks the
server for current parameters, and on receipt computes predictions, label and
error counts, and the averaged gradient over everything buffered (possibly
more than b if the network was slow). Everything that leaves the device goes
through the sanitizers in `privacy`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import ParamMatrix, Sample, mean_gradient, predict_batch
from .privacy import PrivacySpec, holdout_size, sanitize_count, sanitize_gradient

COLLECTING = "collecting"
AWAITING_PARAMS = "awaiting_params"
COMPUTING = "computing"


class ProtocolError(RuntimeError):
    """Device routine invoked in a phase that forbids it."""


@dataclass(frozen=True)
class CheckoutRequest:
    device_id: int


@dataclass(frozen=True)
class CheckinMessage:
    """The only payload a device ever sends: sanitized gradient and counts.

    n_s is transmitted raw (it counts samples, not their contents); the error
    and label counts carry discrete noise and may be negative.
    """

    device_id: int
    g_hat: np.ndarray
    n_s: int
    n_e_hat: int
    n_y_hat: np.ndarray


@dataclass
class TrueCounts:
    """Pre-sanitization values of the last report. Simulator diagnostics only;
    never transmitted."""

    n_s: int
    n_e: int
    n_y: np.ndarray
    n_grad: int


@dataclass
class DeviceState:
    """Algorithm state owned by a single device.

    b is the minibatch size that triggers a checkout; cap is the buffer bound
    past which samples are dropped (collection pauses); holdout_fraction of
    each report is counted but kept out of the gradient average.
    """

    device_id: int
    n_classes: int
    b: int
    cap: int
    holdout_fraction: float = 0.0
    buffer: list[Sample] = field(default_factory=list)
    n_s: int = 0
    n_e: int = 0
    n_y: np.ndarray = None
    phase: str = COLLECTING
    dropped: int = 0
    last_true_counts: TrueCounts | None = None

    def __post_init__(self):
        if self.b > self.cap:
            raise ValueError(f"minibatch size {self.b} exceeds buffer cap {self.cap}")
        if self.n_y is None:
            self.n_y = np.zeros(self.n_classes, dtype=np.int64)

    def on_sample(self, sample: Sample) -> CheckoutRequest | None:
        """Buffer one sample; returns a checkout request when the trigger fires.

        At the buffer cap the sample is dropped (tallied) but the checkout
        trigger still runs, so a device stuck awaiting nothing keeps retrying.
        """
        if self.n_s >= self.cap:
            self.dropped += 1
        else:
            self.buffer.append(sample)
            self.n_s += 1
        if self.n_s >= self.b and self.phase == COLLECTING:
            self.phase = AWAITING_PARAMS
            return CheckoutRequest(self.device_id)
        return None

    def on_checkout_failure(self) -> None:
        """Server unreachable or refused: keep the buffer, retry on a later sample."""
        if self.phase != AWAITING_PARAMS:
            raise ProtocolError(f"checkout failure in phase {self.phase!r}")
        self.phase = COLLECTING

    def compute_checkin(
        self, params: ParamMatrix, priv: PrivacySpec, rng: np.random.Generator
    ) -> CheckinMessage:
        """Predict over the buffer, average gradients, sanitize, reset.

        Consumes rng in a fixed order (holdout pick, gradient noise, error
        count, label counts) so a fixed stream reproduces the message exactly.
        """
        if self.phase != AWAITING_PARAMS:
            raise ProtocolError(f"compute_checkin in phase {self.phase!r}")
        if self.n_s < 1:
            raise ProtocolError("compute_checkin with an empty buffer")
        self.phase = COMPUTING

        X = np.stack([s.x for s in self.buffer])
        y = np.array([s.y for s in self.buffer])
        preds = predict_batch(params, X)
        self.n_e = int(np.sum(preds != y))
        self.n_y = np.bincount(y, minlength=self.n_classes).astype(np.int64)

        n_hold = holdout_size(self.holdout_fraction, self.n_s)
        if n_hold:
            held = rng.choice(self.n_s, size=n_hold, replace=False)
            grad_mask = np.ones(self.n_s, dtype=bool)
            grad_mask[held] = False
        else:
            grad_mask = slice(None)
        Xg, yg = X[grad_mask], y[grad_mask]
        n_grad = len(yg)
        g_tilde = mean_gradient(params, Xg, yg)

        msg = CheckinMessage(
            device_id=self.device_id,
            g_hat=sanitize_gradient(g_tilde, priv.eps_g, n_grad, rng),
            n_s=self.n_s,
            n_e_hat=sanitize_count(self.n_e, priv.eps_e, rng),
            n_y_hat=np.array(
                [sanitize_count(int(c), priv.eps_yk, rng) for c in self.n_y], dtype=np.int64
            ),
        )
        self.last_true_counts = TrueCounts(self.n_s, self.n_e, self.n_y.copy(), n_grad)

        self.buffer = []
        self.n_s = 0
        self.n_e = 0
        self.n_y = np.zeros(self.n_classes, dtype=np.int64)
        self.phase = COLLECTING
        return msg

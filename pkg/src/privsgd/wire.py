"""Plaintext wire protocol: newline-delimited flat records, lossless float encoding.

Requests:
    CHECKOUT <device_id> <token>
    CHECKIN <device_id> <token> <n_s> <n_e_hat> <C label counts> <C*D gradient values>
Responses:
    PARAMS <t> <C> <D> <C*D row-major values>
    ACK <t>
    ERR <code>

Floats are written with 17 significant digits, which round-trips every 64-bit
float exactly, so a value that crosses the wire comes back bit-identical.
"""

from __future__ import annotations

import socket
import socketserver
import threading

import numpy as np

from .device import CheckinMessage
from .server import AuthError, MalformedMessage, Server, StoppedError

ERR_AUTH = "AUTH"
ERR_STOPPED = "STOPPED"
ERR_BADMSG = "BADMSG"
ERR_BADREQ = "BADREQ"


def fmt_float(x: float) -> str:
    return format(float(x), ".17g")


def encode_checkout(device_id: int, token: str) -> str:
    return f"CHECKOUT {device_id} {token}"


def encode_checkin(msg: CheckinMessage, token: str) -> str:
    fields = ["CHECKIN", str(msg.device_id), token, str(msg.n_s), str(msg.n_e_hat)]
    fields += [str(int(c)) for c in msg.n_y_hat]
    fields += [fmt_float(v) for v in np.asarray(msg.g_hat).ravel()]
    return " ".join(fields)


def decode_checkin(parts: list[str], n_classes: int, n_features: int) -> tuple[CheckinMessage, str]:
    want = 5 + n_classes + n_classes * n_features
    if len(parts) != want:
        raise ValueError(f"CHECKIN has {len(parts)} fields, expected {want}")
    device_id, token = int(parts[1]), parts[2]
    n_s, n_e_hat = int(parts[3]), int(parts[4])
    n_y = np.array([int(v) for v in parts[5 : 5 + n_classes]], dtype=np.int64)
    g = np.array([float(v) for v in parts[5 + n_classes :]], dtype=np.float64)
    msg = CheckinMessage(device_id, g.reshape(n_classes, n_features), n_s, n_e_hat, n_y)
    return msg, token


def encode_params(t: int, w: np.ndarray) -> str:
    fields = ["PARAMS", str(t), str(w.shape[0]), str(w.shape[1])]
    fields += [fmt_float(v) for v in w.ravel()]
    return " ".join(fields)


def decode_params(line: str) -> tuple[int, np.ndarray]:
    parts = line.split()
    if parts[0] != "PARAMS":
        raise ValueError(f"expected PARAMS record, got {parts[0]!r}")
    t, c, d = int(parts[1]), int(parts[2]), int(parts[3])
    w = np.array([float(v) for v in parts[4:]], dtype=np.float64)
    if w.size != c * d:
        raise ValueError(f"PARAMS carries {w.size} values, expected {c * d}")
    return t, w.reshape(c, d)


def handle_line(server: Server, line: str) -> str:
    """Dispatch one request line against the server; always answers with one line."""
    parts = line.split()
    try:
        if not parts:
            return f"ERR {ERR_BADREQ}"
        if parts[0] == "CHECKOUT" and len(parts) == 3:
            snap = server.handle_checkout(int(parts[1]), token=parts[2])
            return encode_params(server.t, snap.w)
        if parts[0] == "CHECKIN":
            msg, token = decode_checkin(parts, server.params.n_classes, server.params.n_features)
            t = server.handle_checkin(msg, token=token)
            return f"ACK {t}"
        return f"ERR {ERR_BADREQ}"
    except AuthError:
        return f"ERR {ERR_AUTH}"
    except StoppedError:
        return f"ERR {ERR_STOPPED}"
    except (MalformedMessage, ValueError):
        return f"ERR {ERR_BADMSG}"


class WireServer:
    """Threaded TCP front end; one response line per request line, connections persist."""

    def __init__(self, server: Server, host: str = "127.0.0.1", port: int = 0):
        logic = server

        class Handler(socketserver.StreamRequestHandler):
            def handle(self):
                for raw in self.rfile:
                    line = raw.decode().strip()
                    if not line:
                        continue
                    self.wfile.write((handle_line(logic, line) + "\n").encode())
                    self.wfile.flush()

        class TCP(socketserver.ThreadingTCPServer):
            allow_reuse_address = True
            daemon_threads = True

        self._tcp = TCP((host, port), Handler)
        self.address = self._tcp.server_address
        self._thread: threading.Thread | None = None

    def start(self) -> None:
        self._thread = threading.Thread(target=self._tcp.serve_forever, daemon=True)
        self._thread.start()

    def serve_forever(self) -> None:
        self._tcp.serve_forever()

    def stop(self) -> None:
        self._tcp.shutdown()
        self._tcp.server_close()
        if self._thread:
            self._thread.join()


class WireClient:
    """Device-side connection: send one line, read one line."""

    def __init__(self, host: str, port: int, token: str):
        self.token = token
        self._sock = socket.create_connection((host, port))
        self._file = self._sock.makefile("rwb")

    def _roundtrip(self, line: str) -> str:
        self._file.write((line + "\n").encode())
        self._file.flush()
        reply = self._file.readline().decode().strip()
        if not reply:
            raise ConnectionError("server closed the connection")
        return reply

    def checkout(self, device_id: int) -> tuple[int, np.ndarray] | None:
        """Returns (t, w) or None if the server answered ERR."""
        reply = self._roundtrip(encode_checkout(device_id, self.token))
        if reply.startswith("ERR"):
            return None
        return decode_params(reply)

    def checkin(self, msg: CheckinMessage) -> int | None:
        reply = self._roundtrip(encode_checkin(msg, self.token))
        if reply.startswith("ERR"):
            return None
        return int(reply.split()[1])

    def close(self) -> None:
        self._file.close()
        self._sock.close()

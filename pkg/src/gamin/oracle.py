"""Black-box oracle boundary: budget ledger, defenses, local/remote handles.

Every attack-side prediction flows through an OracleHandle, which enforces
an exact query budget (atomic per batch, reserve/commit so failed calls
consume nothing) and optionally applies the confidence-rounding defense.
"""

from __future__ import annotations

import socket
import threading

import numpy as np

from . import nn

PROTOCOL = "GAMIN-ORACLE/1"
MAX_LINE = 1024


class BudgetExhausted(RuntimeError):
    """Requested batch does not fit in the remaining query budget."""

    def __init__(self, requested, remaining):
        super().__init__(f"batch of {requested} queries exceeds remaining "
                         f"budget of {remaining}")
        self.requested = requested
        self.remaining = remaining


class OracleTransportError(RuntimeError):
    """Remote oracle unreachable mid-call; safe to retry, no budget consumed."""


class OracleProtocolError(RuntimeError):
    """Remote oracle answered with an ERR response."""


class QueryBudget:
    """Thread-safe consumed/remaining ledger with all-or-nothing batches."""

    def __init__(self, total):
        if total < 0:
            raise ValueError("budget total must be non-negative")
        self.total = int(total)
        self._consumed = 0
        self._reserved = 0
        self._lock = threading.Lock()

    @property
    def consumed(self):
        return self._consumed

    @property
    def remaining(self):
        with self._lock:
            return self.total - self._consumed - self._reserved

    def reserve(self, n):
        with self._lock:
            if self._consumed + self._reserved + n > self.total:
                raise BudgetExhausted(n, self.total - self._consumed - self._reserved)
            self._reserved += n

    def commit(self, n):
        with self._lock:
            self._reserved -= n
            self._consumed += n

    def release(self, n):
        with self._lock:
            self._reserved -= n


def round_confidences(y, decimals):
    """Round each entry half-away-from-zero to `decimals` decimals."""
    if decimals < 0:
        raise ValueError("decimals must be >= 0")
    y = np.asarray(y)
    scale = 10.0 ** decimals
    rounded = np.sign(y) * np.floor(np.abs(y).astype(np.float64) * scale + 0.5) / scale
    return rounded.astype(y.dtype)


class OracleHandle:
    """Query-counted access to a predictor with an optional defense.

    `predictor` maps a (batch, input_dim) float32 array to per-class
    probability rows. Budget accounting is atomic per batch: transport or
    predictor failures release the reservation, so failed queries consume
    nothing.
    """

    def __init__(self, predictor, budget: QueryBudget, input_dim,
                 num_classes=None, round_decimals=None):
        self.predictor = predictor
        self.budget = budget
        self.input_dim = input_dim
        self.num_classes = num_classes
        self.round_decimals = round_decimals

    def query(self, x):
        x = np.ascontiguousarray(x, dtype=np.float32)
        if x.ndim == 1:
            x = x[None, :]
        x = x.reshape(len(x), -1)
        if x.shape[1] != self.input_dim:
            raise ValueError(f"oracle expects {self.input_dim}-dim inputs, "
                             f"got {x.shape[1]}")
        n = len(x)
        self.budget.reserve(n)
        try:
            preds = self.predictor(x)
        except Exception:
            self.budget.release(n)
            raise
        self.budget.commit(n)
        if self.num_classes is None:
            self.num_classes = preds.shape[1]
        if self.round_decimals is not None:
            preds = round_confidences(preds, self.round_decimals)
        return preds

    @property
    def consumed(self):
        return self.budget.consumed

    @property
    def remaining(self):
        return self.budget.remaining


def local_oracle(model: nn.Model, budget, round_decimals=None) -> OracleHandle:
    """In-process oracle over an engine model (inference mode)."""
    if not isinstance(budget, QueryBudget):
        budget = QueryBudget(budget)
    return OracleHandle(lambda x: model.forward(x, "infer"), budget,
                        input_dim=model.spec.input_dim,
                        num_classes=model.spec.output_dim,
                        round_decimals=round_decimals)


# ---------------------------------------------------------------------------
# wire protocol client

def _recv_exact(sock, n):
    chunks = []
    while n > 0:
        chunk = sock.recv(min(n, 1 << 20))
        if not chunk:
            raise OracleTransportError("connection closed mid-response")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def _recv_line(sock):
    buf = bytearray()
    while len(buf) < MAX_LINE:
        ch = sock.recv(1)
        if not ch:
            raise OracleTransportError("connection closed before response line")
        if ch == b"\n":
            return bytes(buf).decode()
        buf += ch
    raise OracleProtocolError("response line too long")


class WireClient:
    """One-request-per-round-trip client; keeps the connection alive and
    reconnects transparently on the next call after a failure."""

    def __init__(self, host, port, timeout=30.0):
        self.host = host
        self.port = int(port)
        self.timeout = timeout
        self._sock = None

    def _connect(self):
        if self._sock is None:
            try:
                self._sock = socket.create_connection((self.host, self.port),
                                                      timeout=self.timeout)
            except OSError as exc:
                raise OracleTransportError(f"cannot connect to "
                                           f"{self.host}:{self.port}: {exc}") from exc
        return self._sock

    def close(self):
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None

    def predict(self, x):
        x = np.ascontiguousarray(x, dtype="<f4")
        n, d = x.shape
        header = f"{PROTOCOL} PREDICT batch={n} dim={d}\n".encode()
        sock = self._connect()
        try:
            sock.sendall(header + x.tobytes())
            line = _recv_line(sock)
        except (OSError, OracleTransportError):
            self.close()
            raise OracleTransportError(
                f"lost connection to {self.host}:{self.port}") from None
        if line.startswith("ERR"):
            raise OracleProtocolError(line)
        if not line.startswith("OK "):
            self.close()
            raise OracleProtocolError(f"unrecognized response {line!r}")
        fields = dict(tok.split("=", 1) for tok in line[3:].split())
        rn, k = int(fields["batch"]), int(fields["classes"])
        try:
            payload = _recv_exact(sock, rn * k * 4)
        except (OSError, OracleTransportError):
            self.close()
            raise OracleTransportError("lost connection mid-payload") from None
        return np.frombuffer(payload, dtype="<f4").reshape(rn, k).copy()


def remote_oracle(endpoint, budget, input_dim, num_classes=None,
                  round_decimals=None) -> OracleHandle:
    """Client-side handle over `host:port`; budget enforced locally."""
    host, _, port = endpoint.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"endpoint must be host:port, got {endpoint!r}")
    if not isinstance(budget, QueryBudget):
        budget = QueryBudget(budget)
    client = WireClient(host, int(port))
    return OracleHandle(client.predict, budget, input_dim=input_dim,
                        num_classes=num_classes, round_decimals=round_decimals)

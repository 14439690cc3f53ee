"""Prediction service speaking the binary oracle wire protocol.

Request:  "GAMIN-ORACLE/1 PREDICT batch=<n> dim=<d>\n" + n*d little-endian
float32 values. Response: "OK batch=<n> classes=<k>\n" + n*k floats, or
"ERR <code> <message>\n". One request per round-trip; connections are kept
alive until the client closes them.
"""

from __future__ import annotations

import socketserver
import threading

import numpy as np

from . import nn
from .oracle import MAX_LINE, PROTOCOL

MAX_BATCH = 65536


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        self.request.settimeout(self.server.request_timeout)
        while True:
            try:
                line = self._read_line()
            except (OSError, ConnectionError):
                return
            if line is None:  # client closed
                return
            try:
                self._serve_one(line)
            except _ProtocolError as exc:
                if not self._send(f"ERR {exc.code} {exc}\n".encode()):
                    return
            except (OSError, ConnectionError):
                return
            except Exception as exc:  # pragma: no cover - defensive
                if not self._send(f"ERR 500 internal: {exc}\n".encode()):
                    return

    def _read_line(self):
        buf = bytearray()
        while len(buf) < MAX_LINE:
            ch = self.request.recv(1)
            if not ch:
                return None if not buf else bytes(buf).decode(errors="replace")
            if ch == b"\n":
                return bytes(buf).decode(errors="replace")
            buf += ch
        raise _ProtocolError(400, "request line too long")

    def _send(self, payload):
        try:
            self.request.sendall(payload)
            return True
        except (OSError, ConnectionError):
            return False

    def _serve_one(self, line):
        parts = line.split()
        if len(parts) != 4 or parts[0] != PROTOCOL or parts[1] != "PREDICT":
            raise _ProtocolError(400, f"malformed request line {line!r}")
        try:
            fields = dict(tok.split("=", 1) for tok in parts[2:])
            n = int(fields["batch"])
            d = int(fields["dim"])
        except (ValueError, KeyError):
            raise _ProtocolError(400, "expected batch=<n> dim=<d>") from None
        if not 1 <= n <= MAX_BATCH:
            raise _ProtocolError(413, f"batch must be in [1, {MAX_BATCH}]")
        model = self.server.model
        if d != model.spec.input_dim:
            raise _ProtocolError(422, f"expected dim={model.spec.input_dim}")
        raw = self._read_exact(n * d * 4)
        x = np.frombuffer(raw, dtype="<f4").reshape(n, d)
        preds = model.forward(x, "infer").astype("<f4")
        self._send(f"OK batch={n} classes={preds.shape[1]}\n".encode()
                   + preds.tobytes())

    def _read_exact(self, count):
        chunks = []
        while count > 0:
            chunk = self.request.recv(min(count, 1 << 20))
            if not chunk:
                raise _ProtocolError(400, "request payload truncated")
            chunks.append(chunk)
            count -= len(chunk)
        return b"".join(chunks)


class _ProtocolError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


class OracleServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, model: nn.Model, bind_addr, request_timeout=60.0):
        self.model = model
        self.request_timeout = request_timeout
        super().__init__(bind_addr, _Handler)


def serve(model, bind="127.0.0.1:7501", background=False):
    """Run the oracle service; returns the server (caller owns shutdown).

    With background=True the accept loop runs in a daemon thread, which is
    how tests and in-process experiments drive it.
    """
    host, _, port = bind.rpartition(":")
    server = OracleServer(model, (host or "127.0.0.1", int(port)))
    if background:
        threading.Thread(target=server.serve_forever, daemon=True).start()
        return server
    return server

"""Protocol server: answers denoiser requests over TCP or stdio.

One request is in flight per connection and responses are written in request
order; multiple TCP connections are served concurrently. Every request emits
one latency log line (JSON: seq, ms, shape) with a monotonically increasing
sequence number.
"""

from __future__ import annotations

import json
import socket
import sys
import threading
import time
from dataclasses import dataclass

import numpy as np

from . import protocol
from .model import load_model
from .protocol import COND_CHANNELS, FrameError


@dataclass
class BridgeConfig:
    model_path: str | None = None     # None with echo=True
    device: str = "cpu"
    guidance: float = 7.5
    echo: bool = False
    listen: str | None = None         # "host:port"; None for stdio
    expected_resolution: int | None = None  # resize conditions to this if set
    cond_channels: int = COND_CHANNELS
    log_stream: object = None

    def __post_init__(self):
        if self.cond_channels != COND_CHANNELS:
            raise ValueError(f"condition stack must declare {COND_CHANNELS} channels")


class _LatencyLog:
    def __init__(self, stream):
        self.stream = stream if stream is not None else sys.stderr
        self.seq = 0
        self.lock = threading.Lock()

    def record(self, started: float, shape) -> None:
        with self.lock:
            self.seq += 1
            line = json.dumps({"seq": self.seq,
                               "ms": round((time.monotonic() - started) * 1e3, 3),
                               "shape": list(shape)})
            print(line, file=self.stream, flush=True)


class DenoiserServer:
    def __init__(self, config: BridgeConfig):
        self.config = config
        self.model = None
        if not config.echo:
            self.model = load_model(config.model_path, config.device)
        self.log = _LatencyLog(config.log_stream)
        self._sock = None

    # -- request handling ---------------------------------------------------

    def answer(self, req: protocol.Request) -> bytes:
        started = time.monotonic()
        if self.config.echo:
            eps = req.x_t
        else:
            if req.x_t.shape[0] != self.model.image_channels:
                return protocol.error_frame(
                    f"model expects {self.model.image_channels} image channels, "
                    f"request has {req.x_t.shape[0]}")
            cond = req.cond
            res = self.config.expected_resolution
            if res is not None and req.x_t.shape[1:] != (res, res):
                return protocol.error_frame(
                    f"model expects {res}x{res} inputs, got {req.x_t.shape[1:]}")
            if cond.shape[1:] != req.x_t.shape[1:]:
                cond = protocol.resize_condition(cond, *req.x_t.shape[1:])
            eps = self.model.predict(req.x_t, req.t, cond,
                                     guidance=self.config.guidance)
        frame = protocol.response_frame(eps)
        self.log.record(started, req.x_t.shape)
        return frame

    def _serve_stream(self, read, write) -> None:
        while True:
            try:
                req = protocol.read_request(read)
            except FrameError as e:
                try:
                    write(protocol.error_frame(str(e)))
                except OSError:
                    pass
                return
            if req is None:
                return
            write(self.answer(req))

    # -- transports ----------------------------------------------------------

    def serve_stdio(self) -> None:
        stdin = sys.stdin.buffer
        stdout = sys.stdout.buffer

        def write(data):
            stdout.write(data)
            stdout.flush()

        self._serve_stream(stdin.read1 if hasattr(stdin, "read1") else stdin.read,
                           write)

    def serve_tcp(self) -> None:
        host, port = self.config.listen.rsplit(":", 1)
        self._sock = socket.socket()
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((host, int(port)))
        self._sock.listen()
        self.bound_port = self._sock.getsockname()[1]
        while True:
            try:
                conn, _ = self._sock.accept()
            except OSError:
                return  # socket closed by stop()
            threading.Thread(target=self._handle_conn, args=(conn,),
                             daemon=True).start()

    def _handle_conn(self, conn) -> None:
        with conn:
            def write(data):
                conn.sendall(data)

            self._serve_stream(conn.recv, write)

    def stop(self) -> None:
        if self._sock is not None:
            self._sock.close()

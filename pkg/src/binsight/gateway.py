"""Classification gateway: one loaded model, several intakes, one verdict log.

Intakes
    * a watched directory, polled every 250 ms; a file is classified once its
      size and mtime are unchanged across two polls.
    * a TCP listener speaking a one-shot, length-prefixed protocol::

          request  = b"BSG1" | payload length (u32 little-endian) | payload
          response = one verdict record (JSON) terminated by "\\n"

      The server closes the connection after the response.

Verdict records are single-line JSON objects with the keys ``id``, ``ts``,
``source``, ``class``, ``probs``, ``flagged``, ``latency_ms`` and ``status``.
Malformed submissions produce a record with ``status`` starting ``"error"``
and do not stop the service.
"""
from __future__ import annotations

import itertools
import json
import logging
import os
import queue
import secrets
import signal
import socket
import socketserver
import struct
import threading
import time
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np

from . import encoder
from .errors import BinsightError, ConfigError
from .model import Model, load_model, predict

log = logging.getLogger(__name__)

WIRE_MAGIC = b"BSG1"
DEFAULT_MAX_BYTES = 16 * 1024 * 1024
POLL_INTERVAL = 0.25
BENIGN_CLASSES = frozenset({"goodware", "benign"})


def _now_rfc3339() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="milliseconds").replace("+00:00", "Z")


@dataclass
class Verdict:
    id: str
    source: str
    class_name: Optional[str]
    probs: list
    flagged: bool
    latency_ms: float
    status: str = "ok"
    ts: str = field(default_factory=_now_rfc3339)

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "ts": self.ts,
            "source": self.source,
            "class": self.class_name,
            "probs": [float(p) for p in self.probs],
            "flagged": self.flagged,
            "latency_ms": round(self.latency_ms, 3),
            "status": self.status,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(", ", ": "))

    @classmethod
    def from_dict(cls, d: dict) -> "Verdict":
        return cls(d["id"], d["source"], d["class"], list(d["probs"]), bool(d["flagged"]),
                   float(d["latency_ms"]), d["status"], d["ts"])

    @classmethod
    def from_json(cls, line: str) -> "Verdict":
        return cls.from_dict(json.loads(line))


class Classifier:
    """Bytes -> :class:`Verdict` with a fixed, never-mutated model."""

    def __init__(self, model: Model, mode: Optional[str] = None, window: int = encoder.DEFAULT_WINDOW,
                 threshold: float = 0.5):
        if not 0.0 < threshold < 1.0:
            raise ConfigError("threshold must lie strictly between 0 and 1")
        self.model = model
        self.mode = mode or encoder.mode_for_channels(model.config.channels)
        if encoder.channels_for_mode(self.mode) != model.config.channels:
            raise ConfigError(f"mode {self.mode!r} does not match a {model.config.channels}-channel model")
        if model.config.input_height != model.config.input_width:
            raise ConfigError("gateway needs a square model input")
        self.side = model.config.input_height
        self.window = window
        self.threshold = threshold

    def probabilities(self, data: bytes, source: str = "") -> np.ndarray:
        image = encoder.encode(encoder.RawBinary(bytes(data), source), self.mode, self.side, self.window)
        return predict(self.model, image)

    def classify(self, data: bytes, source: str = "", submission_id: str = "") -> Verdict:
        t0 = time.perf_counter()
        try:
            probs = self.probabilities(data, source)
        except (BinsightError, ValueError) as exc:
            return Verdict(submission_id, source, None, [], False,
                           (time.perf_counter() - t0) * 1000.0, f"error: {exc}")
        latency = (time.perf_counter() - t0) * 1000.0
        k = int(np.argmax(probs))
        name = self.model.class_names[k]
        flagged = name not in BENIGN_CLASSES and float(probs[k]) >= self.threshold
        return Verdict(submission_id, source, name, [float(p) for p in probs], flagged, latency)


# --------------------------------------------------------------------------
# wire protocol
# --------------------------------------------------------------------------

def encode_request(payload: bytes) -> bytes:
    return WIRE_MAGIC + struct.pack("<I", len(payload)) + bytes(payload)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks, got = [], 0
    while got < n:
        chunk = sock.recv(min(n - got, 1 << 20))
        if not chunk:
            break
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def send_raw(address: tuple, raw: bytes, timeout: float = 30.0) -> str:
    """Send ``raw`` bytes as-is and return the server's response line."""
    with socket.create_connection(address, timeout=timeout) as sock:
        sock.sendall(raw)
        sock.shutdown(socket.SHUT_WR)
        buf = b""
        while not buf.endswith(b"\n"):
            chunk = sock.recv(65536)
            if not chunk:
                break
            buf += chunk
    return buf.decode("utf-8").rstrip("\n")


def wire_submit(address: tuple, payload: bytes, timeout: float = 30.0) -> Verdict:
    return Verdict.from_json(send_raw(address, encode_request(payload), timeout))


# --------------------------------------------------------------------------
# service
# --------------------------------------------------------------------------

@dataclass
class GatewayConfig:
    model_path: Optional[str] = None
    mode: Optional[str] = None
    watch_dir: Optional[str] = None
    listen: Optional[tuple] = None  # (host, port); port 0 picks a free one
    log_path: str = "verdicts.jsonl"
    threshold: float = 0.5
    workers: int = 4
    max_bytes: int = DEFAULT_MAX_BYTES
    window: int = encoder.DEFAULT_WINDOW
    poll_interval: float = POLL_INTERVAL

    def validate(self) -> None:
        if self.watch_dir is None and self.listen is None:
            raise ConfigError("enable at least one intake (watch directory or listen address)")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("threshold must lie strictly between 0 and 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.max_bytes < 1:
            raise ConfigError("max_bytes must be >= 1")


def parse_listen(text: str) -> tuple:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ConfigError(f"listen address must look like HOST:PORT, got {text!r}")
    return (host or "127.0.0.1", int(port))


class _WireHandler(socketserver.BaseRequestHandler):
    def handle(self):
        gw: Gateway = self.server.gateway
        sock = self.request
        sock.settimeout(30.0)
        peer = "%s:%d" % self.client_address[:2]
        try:
            header = _recv_exact(sock, 8)
            if len(header) < 8:
                verdict = gw.error_verdict(peer, "error: truncated header")
            elif header[:4] != WIRE_MAGIC:
                verdict = gw.error_verdict(peer, f"error: bad magic {header[:4]!r}")
            else:
                (length,) = struct.unpack("<I", header[4:])
                if length > gw.config.max_bytes:
                    verdict = gw.error_verdict(peer, f"error: payload length {length} exceeds limit {gw.config.max_bytes}")
                else:
                    payload = _recv_exact(sock, length)
                    if len(payload) < length:
                        verdict = gw.error_verdict(peer, f"error: payload truncated at {len(payload)} of {length} bytes")
                    else:
                        verdict = gw.submit(payload, peer).result()
            sock.sendall((verdict.to_json() + "\n").encode("utf-8"))
        except OSError as exc:
            log.warning("wire connection from %s failed: %s", peer, exc)


class _Server(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True
    request_queue_size = 128


class Gateway:
    """Runs the intakes, a bounded worker pool and the single log writer."""

    def __init__(self, config: GatewayConfig, model: Optional[Model] = None):
        config.validate()
        self.config = config
        if model is None:
            if not config.model_path:
                raise ConfigError("no model given")
            model = load_model(config.model_path)
        self.classifier = Classifier(model, config.mode, config.window, config.threshold)
        self._run = secrets.token_hex(3)
        self._ids = itertools.count(1)
        self._id_lock = threading.Lock()
        self._log_q: queue.Queue = queue.Queue()
        self._stop = threading.Event()
        self._threads: list = []
        self._pool: Optional[ThreadPoolExecutor] = None
        self._server: Optional[_Server] = None
        self._seen: set = set()
        self.verdict_count = 0

    # ids and bookkeeping

    def next_id(self) -> str:
        with self._id_lock:
            return f"{self._run}-{next(self._ids):06d}"

    def error_verdict(self, source: str, status: str) -> Verdict:
        v = Verdict(self.next_id(), source, None, [], False, 0.0, status)
        self._log_q.put(v)
        return v

    def submit(self, data: bytes, source: str) -> Future:
        if self._pool is None:
            raise BinsightError("gateway is not running")
        sid = self.next_id()
        return self._pool.submit(self._process, data, source, sid)

    def _process(self, data: bytes, source: str, sid: str) -> Verdict:
        verdict = self.classifier.classify(data, source, sid)
        self._log_q.put(verdict)
        return verdict

    # threads

    def _log_writer(self):
        path = Path(self.config.log_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "a", encoding="utf-8") as fh:
            while True:
                v = self._log_q.get()
                if v is None:
                    break
                fh.write(v.to_json() + "\n")
                fh.flush()
                self.verdict_count += 1

    def _watch(self):
        root = Path(self.config.watch_dir)
        last: dict = {}
        while not self._stop.is_set():
            current = {}
            try:
                entries = list(os.scandir(root))
            except OSError as exc:
                log.warning("cannot scan %s: %s", root, exc)
                entries = []
            for entry in entries:
                if entry.name.startswith(".") or not entry.is_file(follow_symlinks=False):
                    continue
                st = entry.stat(follow_symlinks=False)
                sig = (st.st_size, st.st_mtime_ns)
                current[entry.path] = sig
                key = (entry.path, sig)
                if last.get(entry.path) == sig and key not in self._seen:
                    self._seen.add(key)
                    self._submit_file(entry.path)
            last = current
            self._stop.wait(self.config.poll_interval)

    def _submit_file(self, path: str):
        try:
            data = Path(path).read_bytes()
        except OSError as exc:
            self.error_verdict(path, f"error: {exc}")
            return
        self.submit(data, path)

    # lifecycle

    @property
    def address(self) -> Optional[tuple]:
        return self._server.server_address[:2] if self._server else None

    def start(self) -> "Gateway":
        self._pool = ThreadPoolExecutor(self.config.workers, thread_name_prefix="binsight-worker")
        writer = threading.Thread(target=self._log_writer, name="binsight-log", daemon=True)
        writer.start()
        self._writer = writer
        if self.config.listen is not None:
            self._server = _Server(tuple(self.config.listen), _WireHandler)
            self._server.gateway = self
            t = threading.Thread(target=self._server.serve_forever, kwargs={"poll_interval": 0.1},
                                 name="binsight-wire", daemon=True)
            t.start()
            self._threads.append(t)
        if self.config.watch_dir is not None:
            Path(self.config.watch_dir).mkdir(parents=True, exist_ok=True)
            t = threading.Thread(target=self._watch, name="binsight-watch", daemon=True)
            t.start()
            self._threads.append(t)
        return self

    def stop(self) -> None:
        """Stop intakes, finish in-flight work, flush the log."""
        self._stop.set()
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()
        for t in self._threads:
            t.join()
        if self._pool is not None:
            self._pool.shutdown(wait=True)
        self._log_q.put(None)
        self._writer.join()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    def serve_forever(self) -> None:
        """Run until SIGINT or SIGTERM."""
        done = threading.Event()
        previous = {s: signal.signal(s, lambda *_: done.set()) for s in (signal.SIGINT, signal.SIGTERM)}
        self.start()
        if self.address:
            log.info("listening on %s:%d", *self.address)
        if self.config.watch_dir:
            log.info("watching %s", self.config.watch_dir)
        try:
            done.wait()
        finally:
            self.stop()
            for s, h in previous.items():
                signal.signal(s, h)

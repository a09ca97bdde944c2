"""Out-of-process backend bridge.

Frame format: 4-byte big-endian payload length, then a UTF-8 JSON map
with keys exactly {"id","method","params"} (request) or {"id","result"}
or {"id","error"} (response). Error payloads are {"code": int,
"message": str} with codes 1 version mismatch, 2 malformed message,
3 unsupported method, 4 backend failure, 5 timeout (client side).

Protocol rules shared by every server implementation:
  - handshake first: any other method before it gets code 2; handshake
    returns server_version, capabilities, dimension, and the backend's
    neutral_embedding tensor.
  - tensors travel as {"values": flat number list, "shape": int list};
    floats are serialized in shortest round-trip decimal form, so 64-bit
    values cross the wire exactly.
  - a malformed payload gets an error response (id -1 when the request id
    is unrecoverable) and never desynchronizes later frames.

The default transport is the standard input/output of a child process
named by the REASON_IAD_BACKEND_CMD environment variable; a local socket
is the alternative.
"""

from __future__ import annotations

import json
import os
import select
import shlex
import socket
import subprocess
import sys
import threading
from dataclasses import dataclass

import numpy as np

from .backend import (GENERATE, EvaluationResult, ModelBackend,
                      ToyImageSpec)

PROTOCOL_VERSION = "1.0"
BACKEND_CMD_ENV = "REASON_IAD_BACKEND_CMD"
MAX_FRAME_BYTES = 256 * 1024 * 1024

CODE_VERSION_MISMATCH = 1
CODE_MALFORMED = 2
CODE_UNSUPPORTED = 3
CODE_BACKEND_FAILURE = 4
CODE_TIMEOUT = 5

_REQUEST_KEYS = {"id", "method", "params"}
_METHODS = {"handshake", "encode_text", "encode_image", "evaluate",
            "generate", "shutdown"}


class WireError(RuntimeError):
    """Protocol-level failure, carrying the defined error code."""

    def __init__(self, code: int, message: str):
        super().__init__(f"[code {code}] {message}")
        self.code = code
        self.message = message


def encode_frame(payload: dict) -> bytes:
    data = json.dumps(payload, separators=(",", ":")).encode("utf-8")
    return len(data).to_bytes(4, "big") + data


def tensor_to_wire(array) -> dict:
    arr = np.asarray(array, dtype=np.float64)
    return {"values": arr.ravel().tolist(), "shape": list(arr.shape)}


def tensor_from_wire(obj) -> np.ndarray:
    if (not isinstance(obj, dict) or set(obj) != {"values", "shape"}
            or not isinstance(obj["values"], list)
            or not isinstance(obj["shape"], list)):
        raise WireError(CODE_MALFORMED, "tensor must be {values, shape}")
    try:
        arr = np.asarray(obj["values"], dtype=np.float64).reshape(obj["shape"])
    except (TypeError, ValueError) as exc:
        raise WireError(CODE_MALFORMED, f"bad tensor payload: {exc}") from exc
    return arr


# ---------------------------------------------------------------------------
# Transports
# ---------------------------------------------------------------------------

def _stderr_target():
    try:
        return sys.stderr.fileno()
    except (AttributeError, OSError, ValueError):
        return None


class _PipeTransport:
    """Child process connected over unbuffered stdin/stdout pipes."""

    def __init__(self, command: str):
        self.process = subprocess.Popen(
            shlex.split(command),
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=_stderr_target(),
            bufsize=0,
        )

    def write(self, data: bytes) -> None:
        try:
            self.process.stdin.write(data)
            self.process.stdin.flush()
        except (BrokenPipeError, ValueError) as exc:
            raise ConnectionError(f"backend process closed stdin: {exc}") from exc

    def read_exact(self, count: int, timeout: float | None) -> bytes:
        fd = self.process.stdout.fileno()
        chunks = bytearray()
        while len(chunks) < count:
            if timeout is not None:
                ready, _, _ = select.select([fd], [], [], timeout)
                if not ready:
                    raise WireError(CODE_TIMEOUT, f"no response within {timeout}s")
            chunk = os.read(fd, count - len(chunks))
            if not chunk:
                raise ConnectionError("backend process closed the connection")
            chunks.extend(chunk)
        return bytes(chunks)

    def close(self) -> None:
        for stream in (self.process.stdin, self.process.stdout):
            try:
                stream.close()
            except OSError:
                pass
        try:
            self.process.wait(timeout=5)
        except subprocess.TimeoutExpired:
            self.process.kill()
            self.process.wait()


class _SocketTransport:
    def __init__(self, address: tuple[str, int]):
        self.sock = socket.create_connection(address)

    def write(self, data: bytes) -> None:
        try:
            self.sock.sendall(data)
        except OSError as exc:
            raise ConnectionError(f"socket send failed: {exc}") from exc

    def read_exact(self, count: int, timeout: float | None) -> bytes:
        self.sock.settimeout(timeout)
        chunks = bytearray()
        while len(chunks) < count:
            try:
                chunk = self.sock.recv(count - len(chunks))
            except socket.timeout as exc:
                raise WireError(CODE_TIMEOUT, f"no response within {timeout}s") from exc
            if not chunk:
                raise ConnectionError("backend closed the socket")
            chunks.extend(chunk)
        return bytes(chunks)

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


class WireConnection:
    """Low-level framed connection: send payloads (or raw bytes), read frames."""

    def __init__(self, command: str | None = None,
                 socket_address: tuple[str, int] | None = None,
                 timeout: float | None = 30.0):
        if (command is None) == (socket_address is None):
            raise ValueError("provide exactly one of command or socket_address")
        self.timeout = timeout
        self._transport = (_PipeTransport(command) if command is not None
                           else _SocketTransport(socket_address))

    def send_payload(self, payload: dict) -> None:
        self._transport.write(encode_frame(payload))

    def send_raw_frame(self, data: bytes) -> None:
        self._transport.write(len(data).to_bytes(4, "big") + data)

    def read_frame(self) -> dict:
        header = self._transport.read_exact(4, self.timeout)
        length = int.from_bytes(header, "big")
        if length > MAX_FRAME_BYTES:
            raise WireError(CODE_MALFORMED, f"frame of {length} bytes exceeds limit")
        data = self._transport.read_exact(length, self.timeout)
        try:
            frame = json.loads(data.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise WireError(CODE_MALFORMED, f"bad response payload: {exc}") from exc
        if not isinstance(frame, dict):
            raise WireError(CODE_MALFORMED, "response payload must be a map")
        return frame

    @property
    def process(self) -> subprocess.Popen | None:
        return getattr(self._transport, "process", None)

    def close(self) -> None:
        self._transport.close()


# ---------------------------------------------------------------------------
# Client backend
# ---------------------------------------------------------------------------

def _renormalize_rows(rows: np.ndarray, loose: float, what: str) -> np.ndarray:
    """Accept rows summing to 1 within `loose`; snap anything sloppier than
    the strict in-process tolerance back to an exact simplex so engine
    invariants hold (exact backends pass through bit-identical)."""
    if rows.size == 0:
        return rows
    if not np.all(np.isfinite(rows)) or np.any(rows < 0):
        raise WireError(CODE_BACKEND_FAILURE, f"{what} entries invalid")
    sums = rows.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > loose):
        raise WireError(CODE_BACKEND_FAILURE, f"{what} rows do not sum to 1")
    if np.any(np.abs(sums - 1.0) > 1e-9):
        rows = rows / sums[:, None]
    return rows


class WireBackend(ModelBackend):
    """ModelBackend implementation speaking the frame protocol.

    One request in flight per connection (a lock serializes callers), so
    a single WireBackend is safe to share between worker threads.
    """

    def __init__(self, command: str | None = None,
                 socket_address: tuple[str, int] | None = None,
                 timeout: float | None = 30.0):
        if command is None and socket_address is None:
            command = os.environ.get(BACKEND_CMD_ENV)
            if not command:
                raise WireError(
                    CODE_BACKEND_FAILURE,
                    f"no backend command: set {BACKEND_CMD_ENV} or pass one explicitly")
        self._connection = WireConnection(command=command,
                                          socket_address=socket_address,
                                          timeout=timeout)
        self._lock = threading.Lock()
        self._next_id = 0
        self._closed = False

        result = self.call("handshake", {"client_version": PROTOCOL_VERSION})
        try:
            self._capabilities = frozenset(result["capabilities"])
            self._dimension = int(result["dimension"])
            self._neutral = tensor_from_wire(result["neutral_embedding"])
        except (KeyError, TypeError) as exc:
            raise WireError(CODE_MALFORMED, f"bad handshake result: {exc}") from exc
        if self._neutral.shape != (self._dimension,):
            raise WireError(CODE_MALFORMED, "neutral embedding dimension mismatch")

    def call(self, method: str, params: dict) -> dict:
        with self._lock:
            if self._closed:
                raise WireError(CODE_BACKEND_FAILURE, "connection already closed")
            self._next_id += 1
            request_id = self._next_id
            self._connection.send_payload(
                {"id": request_id, "method": method, "params": params})
            frame = self._connection.read_frame()
        if frame.get("id") != request_id:
            raise WireError(CODE_MALFORMED,
                            f"response id {frame.get('id')} != request id {request_id}")
        if "error" in frame:
            error = frame["error"]
            if not isinstance(error, dict):
                raise WireError(CODE_MALFORMED, "error payload must be a map")
            raise WireError(int(error.get("code", CODE_BACKEND_FAILURE)),
                            str(error.get("message", "unknown error")))
        if "result" not in frame:
            raise WireError(CODE_MALFORMED, "response carries neither result nor error")
        return frame["result"]

    @property
    def capabilities(self) -> frozenset[str]:
        return self._capabilities

    @property
    def dimension(self) -> int:
        return self._dimension

    @property
    def neutral_token_embedding(self) -> np.ndarray:
        return self._neutral.copy()

    def encode_text(self, text: str) -> np.ndarray:
        vector = tensor_from_wire(self.call("encode_text", {"text": text}))
        if vector.shape != (self._dimension,):
            raise WireError(CODE_BACKEND_FAILURE, "encoded text has wrong dimension")
        return vector

    def encode_image(self, image_ref) -> tuple[np.ndarray, np.ndarray]:
        if isinstance(image_ref, ToyImageSpec):
            params = {"spec": image_ref.to_json()}
        elif isinstance(image_ref, dict):
            params = {"spec": image_ref}
        else:
            params = {"path": str(image_ref)}
        result = self.call("encode_image", params)
        try:
            pooled = tensor_from_wire(result["pooled"])
            patches = tensor_from_wire(result["patches"])
        except KeyError as exc:
            raise WireError(CODE_MALFORMED, f"bad encode_image result: {exc}") from exc
        if pooled.shape != (self._dimension,) or patches.ndim != 2 \
                or patches.shape[1] != self._dimension:
            raise WireError(CODE_BACKEND_FAILURE, "encoded image has wrong shape")
        return pooled, patches

    def evaluate(self, sequence, latent_positions, patch_positions,
                 num_options: int) -> EvaluationResult:
        result = self.call("evaluate", {
            "sequence": tensor_to_wire(sequence),
            "latent_positions": [int(i) for i in latent_positions],
            "patch_positions": [int(i) for i in patch_positions],
            "num_options": int(num_options),
        })
        try:
            distributions = tensor_from_wire(result["distributions"])
            attention = (None if result.get("attention") is None
                         else tensor_from_wire(result["attention"]))
            echoed = tuple(int(i) for i in result["latent_positions"])
        except (KeyError, TypeError) as exc:
            raise WireError(CODE_MALFORMED, f"bad evaluate result: {exc}") from exc

        if distributions.ndim != 2 or distributions.shape != (len(echoed), num_options):
            raise WireError(CODE_BACKEND_FAILURE, "distributions have wrong shape")
        distributions = _renormalize_rows(distributions, 1e-6, "distribution")
        if attention is not None:
            if attention.ndim != 2 or attention.shape[0] != len(echoed):
                raise WireError(CODE_BACKEND_FAILURE, "attention has wrong shape")
            attention = _renormalize_rows(attention, 1e-6, "attention")
        evaluation = EvaluationResult(distributions=distributions,
                                      attention=attention,
                                      latent_positions=echoed)
        try:
            return evaluation.validate()
        except ValueError as exc:
            raise WireError(CODE_BACKEND_FAILURE, f"invalid evaluate payload: {exc}") from exc

    def generate(self, sequence, latent_positions, patch_positions) -> str:
        result = self.call("generate", {
            "sequence": tensor_to_wire(sequence),
            "latent_positions": [int(i) for i in latent_positions],
            "patch_positions": [int(i) for i in patch_positions],
        })
        text = result.get("text")
        if not isinstance(text, str):
            raise WireError(CODE_MALFORMED, "generate result must carry text")
        return text

    def shutdown(self) -> None:
        if self._closed:
            return
        try:
            self.call("shutdown", {})
        finally:
            self.close()

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._connection.close()

    @property
    def process(self) -> subprocess.Popen | None:
        return self._connection.process

    def __enter__(self) -> "WireBackend":
        return self

    def __exit__(self, *exc_info) -> None:
        try:
            self.shutdown()
        except (WireError, ConnectionError):
            self.close()


# ---------------------------------------------------------------------------
# Server
# ---------------------------------------------------------------------------

def _error_frame(request_id, code: int, message: str) -> dict:
    return {"id": request_id, "error": {"code": code, "message": message}}


def _major_version(version: str) -> str:
    return str(version).split(".", 1)[0]


class _BackendServer:
    def __init__(self, backend: ModelBackend):
        self.backend = backend
        self.handshaken = False

    def handle(self, raw: bytes) -> tuple[dict, bool]:
        """Returns (response frame, keep_serving)."""
        try:
            frame = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            return _error_frame(-1, CODE_MALFORMED, f"unparseable frame: {exc}"), True

        request_id = frame.get("id") if isinstance(frame, dict) else None
        if not isinstance(request_id, int) or isinstance(request_id, bool):
            request_id = -1
        if (not isinstance(frame, dict) or set(frame) != _REQUEST_KEYS
                or request_id == -1
                or not isinstance(frame.get("method"), str)
                or not isinstance(frame.get("params"), dict)):
            return _error_frame(request_id, CODE_MALFORMED,
                                'request must be {"id", "method", "params"}'), True

        method, params = frame["method"], frame["params"]
        if method not in _METHODS:
            return _error_frame(request_id, CODE_UNSUPPORTED,
                                f"unknown method {method!r}"), True
        if method != "handshake" and not self.handshaken:
            return _error_frame(request_id, CODE_MALFORMED, "handshake required"), True

        try:
            if method == "handshake":
                client_version = str(params.get("client_version", ""))
                if _major_version(client_version) != _major_version(PROTOCOL_VERSION):
                    return _error_frame(
                        request_id, CODE_VERSION_MISMATCH,
                        f"client {client_version!r} incompatible with "
                        f"server {PROTOCOL_VERSION!r}"), True
                self.handshaken = True
                return {"id": request_id, "result": {
                    "server_version": PROTOCOL_VERSION,
                    "capabilities": sorted(self.backend.capabilities),
                    "dimension": self.backend.dimension,
                    "neutral_embedding": tensor_to_wire(
                        self.backend.neutral_token_embedding),
                }}, True

            if method == "shutdown":
                return {"id": request_id, "result": {}}, False

            if method == "encode_text":
                text = params.get("text")
                if not isinstance(text, str):
                    return _error_frame(request_id, CODE_MALFORMED,
                                        "encode_text needs a text string"), True
                return {"id": request_id, "result":
                        tensor_to_wire(self.backend.encode_text(text))}, True

            if method == "encode_image":
                if "spec" in params:
                    reference = params["spec"]
                elif "path" in params:
                    reference = params["path"]
                else:
                    return _error_frame(request_id, CODE_MALFORMED,
                                        "encode_image needs path or spec"), True
                pooled, patches = self.backend.encode_image(reference)
                return {"id": request_id, "result": {
                    "pooled": tensor_to_wire(pooled),
                    "patches": tensor_to_wire(patches),
                }}, True

            if method == "evaluate":
                sequence = tensor_from_wire(params.get("sequence"))
                latent_positions = params.get("latent_positions")
                patch_positions = params.get("patch_positions")
                num_options = params.get("num_options")
                if (not isinstance(latent_positions, list)
                        or not isinstance(patch_positions, list)
                        or not isinstance(num_options, int)):
                    return _error_frame(request_id, CODE_MALFORMED,
                                        "bad evaluate parameters"), True
                evaluation = self.backend.evaluate(
                    sequence, latent_positions, patch_positions, num_options)
                return {"id": request_id, "result": {
                    "distributions": tensor_to_wire(evaluation.distributions),
                    "attention": (None if evaluation.attention is None
                                  else tensor_to_wire(evaluation.attention)),
                    "latent_positions": list(evaluation.latent_positions),
                }}, True

            # generate
            if GENERATE not in self.backend.capabilities:
                return _error_frame(request_id, CODE_UNSUPPORTED,
                                    "backend does not support generation"), True
            sequence = tensor_from_wire(params.get("sequence"))
            text = self.backend.generate(
                sequence, params.get("latent_positions", []),
                params.get("patch_positions", []))
            return {"id": request_id, "result": {"text": text}}, True

        except WireError as exc:
            return _error_frame(request_id, exc.code, exc.message), True
        except Exception as exc:  # backend failure propagates with message
            return _error_frame(request_id, CODE_BACKEND_FAILURE, str(exc)), True


def _read_exact_from(stream, count: int) -> bytes | None:
    chunks = bytearray()
    while len(chunks) < count:
        chunk = stream.read(count - len(chunks))
        if not chunk:
            return None
        chunks.extend(chunk)
    return bytes(chunks)


def serve_backend(backend: ModelBackend, infile, outfile) -> None:
    """Serve one framed connection over binary file objects until shutdown/EOF."""
    server = _BackendServer(backend)
    while True:
        header = _read_exact_from(infile, 4)
        if header is None:
            return
        length = int.from_bytes(header, "big")
        if length > MAX_FRAME_BYTES:
            outfile.write(encode_frame(_error_frame(
                -1, CODE_MALFORMED, f"frame of {length} bytes exceeds limit")))
            outfile.flush()
            return
        raw = _read_exact_from(infile, length)
        if raw is None:
            return
        response, keep_serving = server.handle(raw)
        outfile.write(encode_frame(response))
        outfile.flush()
        if not keep_serving:
            return


def serve_stdio(backend: ModelBackend) -> None:
    serve_backend(backend, sys.stdin.buffer, sys.stdout.buffer)


def serve_socket(backend: ModelBackend, port: int, host: str = "127.0.0.1",
                 max_connections: int | None = None,
                 on_bound=None) -> None:
    """Serve framed connections sequentially on a local socket.

    shutdown ends one connection, not the server (multiple connections are
    permitted for parallel instances); pass max_connections to stop after
    serving that many. With port 0 the bound port is reported via on_bound.
    """
    served = 0
    with socket.create_server((host, port)) as listener:
        if on_bound is not None:
            on_bound(listener.getsockname()[1])
        while max_connections is None or served < max_connections:
            connection, _ = listener.accept()
            served += 1
            with connection:
                reader = connection.makefile("rb")
                writer = connection.makefile("wb")
                serve_backend(backend, reader, writer)


# ---------------------------------------------------------------------------
# Conformance suite
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConformanceCheck:
    name: str
    passed: bool
    detail: str = ""


def _expect_error(frame: dict, code: int) -> tuple[bool, str]:
    error = frame.get("error")
    if not isinstance(error, dict):
        return False, f"expected error frame, got {frame}"
    if error.get("code") != code:
        return False, f"expected code {code}, got {error.get('code')}"
    return True, ""


def run_conformance(command: str | None = None,
                    socket_address: tuple[str, int] | None = None,
                    timeout: float = 30.0) -> list[ConformanceCheck]:
    """Protocol conformance checks against a backend served at the address.

    Each check opens a fresh connection, so a failing backend cannot
    poison later checks.
    """
    checks: list[ConformanceCheck] = []

    def connect() -> WireConnection:
        return WireConnection(command=command, socket_address=socket_address,
                              timeout=timeout)

    def record(name: str, body) -> None:
        try:
            detail = body()
            checks.append(ConformanceCheck(name, True, detail or ""))
        except AssertionError as exc:
            checks.append(ConformanceCheck(name, False, str(exc)))
        except Exception as exc:
            checks.append(ConformanceCheck(name, False, f"{type(exc).__name__}: {exc}"))

    def handshake_on(conn: WireConnection, request_id: int = 1) -> dict:
        conn.send_payload({"id": request_id, "method": "handshake",
                           "params": {"client_version": PROTOCOL_VERSION}})
        return conn.read_frame()

    def check_handshake():
        conn = connect()
        try:
            frame = handshake_on(conn)
            assert "result" in frame, f"handshake failed: {frame}"
            result = frame["result"]
            assert isinstance(result.get("dimension"), int) and result["dimension"] >= 1, \
                "dimension missing or < 1"
            assert isinstance(result.get("capabilities"), list) and result["capabilities"], \
                "capabilities missing"
            neutral = tensor_from_wire(result["neutral_embedding"])
            assert neutral.shape == (result["dimension"],), "neutral embedding shape"
            return f"dimension {result['dimension']}, capabilities {result['capabilities']}"
        finally:
            conn.close()

    def check_version_mismatch():
        conn = connect()
        try:
            conn.send_payload({"id": 1, "method": "handshake",
                               "params": {"client_version": "99.0"}})
            ok, why = _expect_error(conn.read_frame(), CODE_VERSION_MISMATCH)
            assert ok, why
            frame = handshake_on(conn, request_id=2)
            assert "result" in frame, "connection unusable after version mismatch"
        finally:
            conn.close()

    def check_malformed_recovery():
        conn = connect()
        try:
            conn.send_raw_frame(b"this is not json {")
            ok, why = _expect_error(conn.read_frame(), CODE_MALFORMED)
            assert ok, why
            frame = handshake_on(conn)
            assert "result" in frame, "connection desynchronized after malformed frame"
        finally:
            conn.close()

    def check_pre_handshake_call():
        conn = connect()
        try:
            conn.send_payload({"id": 1, "method": "encode_text",
                               "params": {"text": "early"}})
            ok, why = _expect_error(conn.read_frame(), CODE_MALFORMED)
            assert ok, why
        finally:
            conn.close()

    def check_unknown_method():
        conn = connect()
        try:
            handshake_on(conn)
            conn.send_payload({"id": 2, "method": "no_such_method", "params": {}})
            ok, why = _expect_error(conn.read_frame(), CODE_UNSUPPORTED)
            assert ok, why
        finally:
            conn.close()

    def check_encode_text_deterministic():
        backend = WireBackend(command=command, socket_address=socket_address,
                              timeout=timeout)
        try:
            first = backend.encode_text("stable industrial fixture")
            second = backend.encode_text("stable industrial fixture")
            assert first.shape == (backend.dimension,), "wrong embedding shape"
            assert np.array_equal(first, second), "encode_text not deterministic"
        finally:
            backend.__exit__(None, None, None)

    def _evaluation_request(backend: WireBackend):
        d = backend.dimension
        neutral = backend.neutral_token_embedding
        text = backend.encode_text("conformance probe")
        sequence = np.stack([text, text * 0.5, -text, neutral, neutral])
        return backend.evaluate(sequence, latent_positions=[3, 4],
                                patch_positions=[1, 2], num_options=3), d

    def check_evaluate_structural():
        backend = WireBackend(command=command, socket_address=socket_address,
                              timeout=timeout)
        try:
            evaluation, _ = _evaluation_request(backend)
            assert evaluation.distributions.shape == (2, 3), "distribution shape"
            assert evaluation.attention is not None, "attention missing"
            assert evaluation.attention.shape == (2, 2), "attention shape"
            assert evaluation.latent_positions == (3, 4), "latent positions not echoed"
        finally:
            backend.__exit__(None, None, None)

    def check_evaluate_deterministic():
        backend = WireBackend(command=command, socket_address=socket_address,
                              timeout=timeout)
        try:
            first, _ = _evaluation_request(backend)
            second, _ = _evaluation_request(backend)
            assert np.array_equal(first.distributions, second.distributions), \
                "distributions differ between identical requests"
            assert np.array_equal(first.attention, second.attention), \
                "attention differs between identical requests"
        finally:
            backend.__exit__(None, None, None)

    def check_generate_capability():
        backend = WireBackend(command=command, socket_address=socket_address,
                              timeout=timeout)
        try:
            sequence = np.stack([backend.neutral_token_embedding] * 2)
            if GENERATE in backend.capabilities:
                text = backend.generate(sequence, [1], [0])
                assert isinstance(text, str) and text, "generate returned no text"
                return "generate supported"
            try:
                backend.generate(sequence, [1], [0])
            except WireError as exc:
                assert exc.code == CODE_UNSUPPORTED, \
                    f"undeclared generate should yield code 3, got {exc.code}"
                return "generate correctly undeclared"
            raise AssertionError("generate succeeded despite undeclared capability")
        finally:
            backend.__exit__(None, None, None)

    def check_shutdown_lifecycle():
        conn = connect()
        process = conn.process
        try:
            handshake_on(conn)
            conn.send_payload({"id": 2, "method": "shutdown", "params": {}})
            frame = conn.read_frame()
            assert frame.get("result") == {}, f"shutdown must return an empty result, got {frame}"
        finally:
            conn.close()
        if process is not None:
            code = process.wait(timeout=10)
            assert code == 0, f"server exited with status {code}"

    record("handshake", check_handshake)
    record("version_mismatch", check_version_mismatch)
    record("malformed_frame_recovery", check_malformed_recovery)
    record("pre_handshake_call", check_pre_handshake_call)
    record("unknown_method", check_unknown_method)
    record("encode_text_deterministic", check_encode_text_deterministic)
    record("evaluate_structural", check_evaluate_structural)
    record("evaluate_deterministic", check_evaluate_deterministic)
    record("generate_capability", check_generate_capability)
    record("shutdown_lifecycle", check_shutdown_lifecycle)
    return checks

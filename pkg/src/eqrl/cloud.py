"""Client/cloud session layer for encrypted batch SARSA(0).

Frames on the byte stream are ``u32 length | u8 type | payload`` (little-endian),
where ``length`` is the payload size.  The cloud holds only the parameter
hash, the relinearization key and counters; secret and public keys,
plaintexts and origin metadata never leave the client.
"""

from __future__ import annotations

import csv
import enum
import hashlib
import socket
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .circuit import (OPS, OpCounter, PackedBatch, decrypt_and_unpack, evaluate_update,
                      pack_and_encrypt, plain_batch_update_vectors, relative_errors,
                      write_op_report_tsv)
from .ckks import (CkksError, CkksParams, KeySet, ParamsMismatchError, RelinKey,
                   SerializationError, deserialize_ciphertext, deserialize_relin_key,
                   serialize_ciphertext, serialize_relin_key)
from .learner import BatchCollector, batch_apply, plain_batch_update
from .mdp import Mdp, MdpEnv, PolicyConfig, QTable, rng_streams

PROTOCOL_VERSION = 1
MAX_FRAME = 1 << 30
_FRAME = struct.Struct("<IB")
_HELLO = struct.Struct("<H8s")
_REPORT = struct.Struct("<Q" + "Id" * len(OPS))


class MsgType(enum.IntEnum):
    HELLO = 1
    HELLO_ACK = 2
    RELIN_KEY_UPLOAD = 3
    BATCH_REQUEST = 4
    BATCH_RESPONSE = 5
    FAULT = 6
    BYE = 7


class FaultCode(enum.IntEnum):
    MALFORMED = 1
    PARAMS_MISMATCH = 2
    MISSING_RELIN_KEY = 3
    EVALUATION = 4
    INTERNAL = 5


class ProtocolFault(Exception):
    """A fault frame from the peer, or a locally detected protocol error."""

    def __init__(self, code: int, message: str, remote: bool = True):
        super().__init__(f"fault {int(code)}: {message}")
        self.code = int(code)
        self.message = message
        self.remote = remote


class _Eof(Exception):
    pass


class _TruncatedFrame(Exception):
    pass


# -- framing -----------------------------------------------------------------

def encode_frame(msg_type: int, payload: bytes = b"") -> bytes:
    return _FRAME.pack(len(payload), int(msg_type)) + payload


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks, got = [], 0
    while got < n:
        chunk = sock.recv(min(n - got, 1 << 20))
        if not chunk:
            if got == 0:
                raise _Eof()
            raise _TruncatedFrame(f"stream ended after {got} of {n} bytes")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket) -> tuple[int, bytes]:
    """Return ``(type, payload)``; raises ``_Eof`` at a clean frame boundary."""
    header = _recv_exact(sock, _FRAME.size)
    length, msg_type = _FRAME.unpack(header)
    if length > MAX_FRAME:
        raise _TruncatedFrame(f"frame length {length} exceeds limit")
    try:
        payload = _recv_exact(sock, length) if length else b""
    except _Eof:
        raise _TruncatedFrame(f"stream ended before a {length}-byte payload") from None
    return msg_type, payload


def send_frame(sock: socket.socket, msg_type: int, payload: bytes = b"") -> None:
    sock.sendall(encode_frame(msg_type, payload))


def pack_blobs(blobs) -> bytes:
    out = [struct.pack("<I", len(blobs))]
    for blob in blobs:
        out.append(struct.pack("<I", len(blob)))
        out.append(blob)
    return b"".join(out)


def unpack_blobs(payload: bytes) -> list[bytes]:
    if len(payload) < 4:
        raise SerializationError("payload too short for a blob count")
    (count,), pos, blobs = struct.unpack_from("<I", payload), 4, []
    for _ in range(count):
        if pos + 4 > len(payload):
            raise SerializationError("truncated blob length")
        (size,) = struct.unpack_from("<I", payload, pos)
        pos += 4
        if pos + size > len(payload):
            raise SerializationError("truncated blob")
        blobs.append(payload[pos:pos + size])
        pos += size
    if pos != len(payload):
        raise SerializationError(f"{len(payload) - pos} trailing bytes after blobs")
    return blobs


def encode_report(batch_index: int, counter: OpCounter) -> bytes:
    fields = []
    for op in OPS:
        fields += [counter.counts[op], counter.seconds[op]]
    return _REPORT.pack(batch_index, *fields)


def decode_report(data: bytes) -> tuple[int, OpCounter]:
    if len(data) != _REPORT.size:
        raise SerializationError(f"report has {len(data)} bytes, expected {_REPORT.size}")
    values = _REPORT.unpack(data)
    counter = OpCounter()
    for i, op in enumerate(OPS):
        counter.counts[op] = values[1 + 2 * i]
        counter.seconds[op] = values[2 + 2 * i]
    return values[0], counter


def fault_payload(code: int, message: str) -> bytes:
    return struct.pack("<B", int(code)) + message.encode("utf-8", "replace")


def parse_fault(payload: bytes) -> ProtocolFault:
    if not payload:
        return ProtocolFault(FaultCode.MALFORMED, "empty fault frame")
    return ProtocolFault(payload[0], payload[1:].decode("utf-8", "replace"))


# -- cloud side --------------------------------------------------------------

@dataclass
class SessionState:
    params_hash: bytes | None = None
    relin_key: RelinKey | None = None
    batches_served: int = 0
    counter: OpCounter = field(default_factory=OpCounter)
    # kept for auditing what the cloud has seen (ciphertext bytes only)
    last_request: bytes = b""

    @property
    def has_relin_key(self) -> bool:
        return self.relin_key is not None

    def retained_bytes(self) -> bytes:
        """Everything the session holds, as raw bytes, for confidentiality scans."""
        parts = [self.params_hash or b"", self.last_request]
        if self.relin_key is not None:
            parts.append(serialize_relin_key(self.relin_key))
        parts.append(encode_report(self.batches_served, self.counter))
        return b"".join(parts)


class Metrics:
    """Counters shared by all connection workers."""

    def __init__(self):
        self._lock = threading.Lock()
        self.connections = 0
        self.batches = 0
        self.faults = 0

    def bump(self, name: str) -> None:
        with self._lock:
            setattr(self, name, getattr(self, name) + 1)


class CloudServer:
    """Evaluates uploaded batches; one worker thread per connection."""

    def __init__(self, params: CkksParams):
        self.params = params
        self.metrics = Metrics()
        self.sessions: list[SessionState] = []
        self._threads: list[threading.Thread] = []
        self._stop = threading.Event()
        self._listener: socket.socket | None = None

    # request handlers return (type, payload) replies
    def _handle(self, state: SessionState, msg_type: int, payload: bytes) -> tuple[int, bytes]:
        if msg_type == MsgType.HELLO:
            if len(payload) != _HELLO.size:
                raise ProtocolFault(FaultCode.MALFORMED, "bad hello payload")
            version, phash = _HELLO.unpack(payload)
            if version != PROTOCOL_VERSION:
                raise ProtocolFault(FaultCode.MALFORMED, f"protocol version {version}")
            if phash != self.params.params_hash:
                raise ProtocolFault(FaultCode.PARAMS_MISMATCH,
                                    f"client params {phash.hex()} != cloud "
                                    f"{self.params.params_hash.hex()}")
            state.params_hash = phash
            return MsgType.HELLO_ACK, _HELLO.pack(PROTOCOL_VERSION, phash)
        if msg_type == MsgType.RELIN_KEY_UPLOAD:
            self._require_hello(state)
            state.relin_key = deserialize_relin_key(payload, self.params)
            return MsgType.HELLO_ACK, _HELLO.pack(PROTOCOL_VERSION, state.params_hash)
        if msg_type == MsgType.BATCH_REQUEST:
            self._require_hello(state)
            if state.relin_key is None:
                raise ProtocolFault(FaultCode.MISSING_RELIN_KEY, "no relinearization key uploaded")
            blobs = unpack_blobs(payload)
            if len(blobs) != 5:
                raise ProtocolFault(FaultCode.MALFORMED, f"expected 5 ciphertexts, got {len(blobs)}")
            cts = [deserialize_ciphertext(b, self.params) for b in blobs]
            state.last_request = payload
            try:
                out, delta = evaluate_update(*cts, state.relin_key)
            except CkksError as exc:
                raise ProtocolFault(FaultCode.EVALUATION, str(exc)) from exc
            state.counter.merge(delta)
            state.batches_served += 1
            self.metrics.bump("batches")
            body = serialize_ciphertext(out)
            return MsgType.BATCH_RESPONSE, pack_blobs(
                [body, encode_report(state.batches_served, delta)])
        raise ProtocolFault(FaultCode.MALFORMED, f"unexpected message type {msg_type}")

    @staticmethod
    def _require_hello(state: SessionState) -> None:
        if state.params_hash is None:
            raise ProtocolFault(FaultCode.PARAMS_MISMATCH, "no parameters negotiated yet")

    def serve_connection(self, sock: socket.socket) -> SessionState:
        state = SessionState()
        self.sessions.append(state)
        self.metrics.bump("connections")
        try:
            while not self._stop.is_set():
                try:
                    msg_type, payload = read_frame(sock)
                except _Eof:
                    break
                except _TruncatedFrame as exc:
                    self.metrics.bump("faults")
                    _try_send(sock, MsgType.FAULT, fault_payload(FaultCode.MALFORMED, str(exc)))
                    break
                if msg_type == MsgType.BYE:
                    _try_send(sock, MsgType.BYE)
                    break
                try:
                    reply = self._handle(state, msg_type, payload)
                except ProtocolFault as exc:
                    reply = (MsgType.FAULT, fault_payload(exc.code, exc.message))
                except ParamsMismatchError as exc:
                    reply = (MsgType.FAULT, fault_payload(FaultCode.PARAMS_MISMATCH, str(exc)))
                except (SerializationError, struct.error) as exc:
                    reply = (MsgType.FAULT, fault_payload(FaultCode.MALFORMED, str(exc)))
                except Exception as exc:  # keep the worker alive
                    reply = (MsgType.FAULT, fault_payload(FaultCode.INTERNAL, repr(exc)))
                if reply[0] == MsgType.FAULT:
                    self.metrics.bump("faults")
                if not _try_send(sock, *reply):
                    break
        finally:
            sock.close()
        return state

    def spawn(self, sock: socket.socket) -> threading.Thread:
        t = threading.Thread(target=self.serve_connection, args=(sock,), daemon=True)
        self._threads.append(t)
        t.start()
        return t

    def listen(self, host: str = "127.0.0.1", port: int = 0) -> tuple[str, int]:
        """Bind a TCP listener and accept connections on a background thread."""
        listener = socket.create_server((host, port))
        listener.settimeout(0.2)
        self._listener = listener

        def accept_loop():
            while not self._stop.is_set():
                try:
                    conn, _ = listener.accept()
                except (socket.timeout, OSError):
                    continue
                conn.settimeout(None)
                self.spawn(conn)
            listener.close()

        t = threading.Thread(target=accept_loop, daemon=True)
        self._threads.append(t)
        t.start()
        return listener.getsockname()[:2]

    def shutdown(self, timeout: float = 5.0) -> None:
        self._stop.set()
        for t in self._threads:
            t.join(timeout)


def _try_send(sock: socket.socket, msg_type: int, payload: bytes = b"") -> bool:
    try:
        send_frame(sock, msg_type, payload)
        return True
    except OSError:
        return False


def cloud_serve(endpoint, params: CkksParams) -> CloudServer:
    """Start a cloud on ``"host:port"`` (TCP) or on an already connected socket.

    Returns the running server; call ``shutdown()`` to stop it.
    """
    server = CloudServer(params)
    if isinstance(endpoint, socket.socket):
        server.spawn(endpoint)
    else:
        host, _, port = str(endpoint).rpartition(":")
        server.listen(host or "127.0.0.1", int(port))
    return server


def loopback_cloud(params: CkksParams) -> tuple[socket.socket, CloudServer]:
    """In-memory socket pair with a cloud worker on one end."""
    client_end, cloud_end = socket.socketpair()
    return client_end, cloud_serve(cloud_end, params)


# -- client side -------------------------------------------------------------

class ClientSession:
    """Owns all key material; talks to the cloud one batch at a time."""

    def __init__(self, sock: socket.socket, keys: KeySet, params: CkksParams,
                 rng: np.random.Generator, timeout: float | None = 60.0):
        self.sock = sock
        self.sock.settimeout(timeout)
        self.keys = keys
        self.params = params
        self.rng = rng
        self.client_counter = OpCounter()
        self.cloud_counter = OpCounter()
        self.batches = 0
        self.last_response_ct: bytes = b""
        self.last_request_cts: list[bytes] = []

    @classmethod
    def connect(cls, endpoint, keys: KeySet, params: CkksParams, rng: np.random.Generator,
                timeout: float | None = 60.0) -> "ClientSession":
        if isinstance(endpoint, socket.socket):
            sock = endpoint
        else:
            host, _, port = str(endpoint).rpartition(":")
            sock = socket.create_connection((host or "127.0.0.1", int(port)), timeout=timeout)
        session = cls(sock, keys, params, rng, timeout)
        session.handshake()
        session.upload_relin_key()
        return session

    def _request(self, msg_type: int, payload: bytes, expect: int) -> bytes:
        send_frame(self.sock, msg_type, payload)
        try:
            got, body = read_frame(self.sock)
        except (_Eof, _TruncatedFrame) as exc:
            raise ProtocolFault(FaultCode.MALFORMED, f"connection lost: {exc}", remote=False)
        if got == MsgType.FAULT:
            raise parse_fault(body)
        if got != expect:
            raise ProtocolFault(FaultCode.MALFORMED, f"expected message {expect}, got {got}",
                                remote=False)
        return body

    def handshake(self) -> None:
        body = self._request(MsgType.HELLO, _HELLO.pack(PROTOCOL_VERSION, self.params.params_hash),
                             MsgType.HELLO_ACK)
        _, phash = _HELLO.unpack(body)
        if phash != self.params.params_hash:
            raise ProtocolFault(FaultCode.PARAMS_MISMATCH, "cloud acknowledged other params",
                                remote=False)

    def upload_relin_key(self) -> None:
        self._request(MsgType.RELIN_KEY_UPLOAD, serialize_relin_key(self.keys.relin),
                      MsgType.HELLO_ACK)

    def upload_batch(self, records) -> np.ndarray:
        batch = records if isinstance(records, PackedBatch) else PackedBatch.from_records(records)
        if len(batch) == 0:
            raise ProtocolFault(FaultCode.MALFORMED, "empty batch", remote=False)
        if len(batch) > self.params.slot_count:
            raise ProtocolFault(FaultCode.MALFORMED,
                                f"batch of {len(batch)} exceeds {self.params.slot_count} slots",
                                remote=False)
        cts, _ = pack_and_encrypt(batch, self.keys, self.params, self.rng, self.client_counter)
        self.last_request_cts = [serialize_ciphertext(ct) for ct in cts]
        body = self._request(MsgType.BATCH_REQUEST, pack_blobs(self.last_request_cts),
                             MsgType.BATCH_RESPONSE)
        try:
            ct_bytes, report = unpack_blobs(body)
            _, delta = decode_report(report)
            ct = deserialize_ciphertext(ct_bytes, self.params)
        except (ValueError, SerializationError) as exc:
            raise ProtocolFault(FaultCode.MALFORMED, f"bad batch response: {exc}", remote=False)
        self.cloud_counter.merge(delta)
        self.last_response_ct = ct_bytes
        values, _ = decrypt_and_unpack(ct, self.keys, len(batch), self.client_counter)
        self.batches += 1
        return values

    def close(self) -> None:
        try:
            send_frame(self.sock, MsgType.BYE)
            read_frame(self.sock)
        except (OSError, _Eof, _TruncatedFrame):
            pass
        finally:
            self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class InProcessCloud:
    """Same interface as :class:`ClientSession` with the circuit called directly."""

    def __init__(self, keys: KeySet, params: CkksParams, rng: np.random.Generator):
        self.keys = keys
        self.params = params
        self.rng = rng
        self.client_counter = OpCounter()
        self.cloud_counter = OpCounter()
        self.batches = 0
        self.last_response_ct: bytes = b""

    def upload_batch(self, records) -> np.ndarray:
        batch = records if isinstance(records, PackedBatch) else PackedBatch.from_records(records)
        if len(batch) == 0:
            raise ProtocolFault(FaultCode.MALFORMED, "empty batch", remote=False)
        cts, _ = pack_and_encrypt(batch, self.keys, self.params, self.rng, self.client_counter)
        out, _ = evaluate_update(*cts, self.keys.relin, self.cloud_counter)
        self.last_response_ct = serialize_ciphertext(out)
        values, _ = decrypt_and_unpack(out, self.keys, len(batch), self.client_counter)
        self.batches += 1
        return values

    def close(self) -> None:
        pass


class PlaintextSession:
    """Unencrypted stand-in: same batch interface, plain arithmetic, no op counts."""

    slot_count = 1 << 30

    def __init__(self):
        self.client_counter = OpCounter()
        self.cloud_counter = OpCounter()
        self.batches = 0
        self.last_response_ct = b""

    def upload_batch(self, records) -> np.ndarray:
        batch = records if isinstance(records, PackedBatch) else PackedBatch.from_records(records)
        if len(batch) == 0:
            raise ProtocolFault(FaultCode.MALFORMED, "empty batch", remote=False)
        values = plain_batch_update_vectors(batch)
        self.last_response_ct = values.tobytes()
        self.batches += 1
        return values

    def close(self) -> None:
        pass


def session_slots(session) -> int:
    params = getattr(session, "params", None)
    return params.slot_count if params is not None else session.slot_count


# -- training driver ---------------------------------------------------------

CURVE_HEADER = ("batch", "steps", "mean_reward", "episodes", "mean_episode_length",
                "max_rel_deviation")


@dataclass
class EncryptedRunResult:
    q: QTable
    shadow_q: QTable
    curve: list[tuple]
    max_rel_deviation: float
    max_abs_deviation: float
    client_counter: OpCounter
    cloud_counter: OpCounter
    response_digest: str
    batches: int

    @property
    def counter(self) -> OpCounter:
        return OpCounter().merge(self.client_counter).merge(self.cloud_counter)


def run_encrypted_training(env, cfg: PolicyConfig, batch_size: int, batches: int, session, *,
                           gamma: float | None = None, initial: float = 0.0,
                           combine: str = "last", out_dir: str | Path | None = None,
                           rel_floor: float = 1e-6) -> EncryptedRunResult:
    """Collect, upload, apply, repeated ``batches`` times.

    ``env`` is an :class:`Mdp` (sampled with the config seed) or any object with
    ``reset``/``step``/``num_states``/``num_actions``.  ``session`` is a
    :class:`ClientSession` or :class:`InProcessCloud`.  A shadow table receives
    plaintext updates on the same transitions for the precision report.
    """
    streams = rng_streams(cfg.seed)
    if isinstance(env, Mdp):
        gamma = env.discount if gamma is None else gamma
        env = MdpEnv(env, streams.env)
    if gamma is None:
        raise ValueError("gamma is required for a non-MDP environment")
    if not 1 <= batch_size <= session_slots(session):
        raise ValueError(f"batch size {batch_size} outside [1, {session_slots(session)}]")
    q = QTable.zeros(env.num_states, env.num_actions, initial)
    shadow = q.copy()
    collector = BatchCollector(env, cfg, gamma, streams.policy)
    digest = hashlib.sha256()
    curve = []
    max_rel = max_abs = 0.0
    steps = 0
    for b in range(1, batches + 1):
        done_before = len(collector.episode_lengths)
        records = collector.collect(q, batch_size)
        steps += len(records)
        values = session.upload_batch(records)
        digest.update(session.last_response_ct)
        shadow_records = [_rebase(z, shadow) for z in records]
        batch_apply(q, records, values, combine=combine)
        batch_apply(shadow, shadow_records, plain_batch_update(shadow_records), combine=combine)
        diff = np.abs(q.values - shadow.values)
        rel = float(np.max(relative_errors(q.values, shadow.values, rel_floor)))
        max_rel = max(max_rel, rel)
        max_abs = max(max_abs, float(np.max(diff)))
        finished = collector.episode_lengths[done_before:]
        curve.append((b, steps, float(np.mean([z.reward for z in records])), len(finished),
                      float(np.mean(finished)) if finished else float("nan"), rel))
    result = EncryptedRunResult(q, shadow, curve, max_rel, max_abs, session.client_counter,
                                session.cloud_counter, digest.hexdigest(), batches)
    if out_dir is not None:
        write_run_outputs(out_dir, result)
    return result


def _rebase(z, table: QTable):
    """Same transition, values read from ``table``."""
    s, a, s_next, a_next = z.origin
    q_next = 0.0 if a_next < 0 else float(table.values[s_next, a_next])
    return type(z)(float(table.values[s, a]), z.reward, q_next, z.alpha, z.gamma, z.origin)


def write_curve_csv(path: str | Path, curve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_HEADER)
        for row in curve:
            w.writerow([row[0], row[1], repr(row[2]), row[3], repr(row[4]), repr(row[5])])


def write_run_outputs(out_dir: str | Path, result: EncryptedRunResult) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_curve_csv(out / "learning_curve.csv", result.curve)
    write_op_report_tsv(out / "op_report.tsv", result.counter, result.batches, include_reference=True)
    with open(out / "precision.tsv", "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t")
        w.writerow(["metric", "value"])
        w.writerow(["batches", result.batches])
        w.writerow(["max_rel_deviation", repr(result.max_rel_deviation)])
        w.writerow(["max_rel_deviation_percent", repr(100 * result.max_rel_deviation)])
        w.writerow(["max_abs_deviation", repr(result.max_abs_deviation)])
        w.writerow(["response_digest", result.response_digest])

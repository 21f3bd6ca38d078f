"""JSON-lines wire format and message transports between sensors and backend.

Three record types travel as one compact JSON object per line, discriminated
by ``"type"``: ``pose`` (sensor -> backend), ``feedback`` (backend -> sensor)
and ``skeleton`` (backend output stream). See docs/protocol.md for the schema.
"""

from __future__ import annotations

import json
import math
import socket
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from edgepose.errors import Disconnected, InvariantViolation, SchemaViolation
from edgepose.skeleton import Skeleton3D

PSD_TOL = 1e-9


def _arrays_equal(a, b) -> bool:
    return np.array_equal(np.asarray(a), np.asarray(b))


@dataclass(eq=False)
class PersonPose:
    local_track_id: int
    bbox: np.ndarray  # x, y, w, h
    valid: np.ndarray  # (J,)
    uv: np.ndarray  # (J, 2)
    confidence: np.ndarray  # (J,)
    cov: np.ndarray  # (J, 3) as sxx, sxy, syy

    @property
    def n_joints(self) -> int:
        return len(self.valid)

    def cov_matrices(self) -> np.ndarray:
        c = np.asarray(self.cov, dtype=np.float64)
        return np.stack([np.stack([c[:, 0], c[:, 1]], -1), np.stack([c[:, 1], c[:, 2]], -1)], -2)

    def __eq__(self, other):
        if not isinstance(other, PersonPose):
            return NotImplemented
        return self.local_track_id == other.local_track_id and all(
            _arrays_equal(getattr(self, f), getattr(other, f)) for f in ("bbox", "valid", "uv", "confidence", "cov")
        )


@dataclass(eq=False)
class PoseMessage:
    camera_id: int
    capture_timestamp_us: int
    persons: list[PersonPose] = field(default_factory=list)

    def __eq__(self, other):
        if not isinstance(other, PoseMessage):
            return NotImplemented
        return (self.camera_id, self.capture_timestamp_us) == (other.camera_id, other.capture_timestamp_us) and (
            self.persons == other.persons
        )


@dataclass(eq=False)
class FeedbackPerson:
    person_id: int
    bbox: np.ndarray
    valid: np.ndarray
    uv: np.ndarray
    cov: np.ndarray  # (J, 3)

    def cov_matrices(self) -> np.ndarray:
        c = np.asarray(self.cov, dtype=np.float64)
        return np.stack([np.stack([c[:, 0], c[:, 1]], -1), np.stack([c[:, 1], c[:, 2]], -1)], -2)

    def __eq__(self, other):
        if not isinstance(other, FeedbackPerson):
            return NotImplemented
        return self.person_id == other.person_id and all(
            _arrays_equal(getattr(self, f), getattr(other, f)) for f in ("bbox", "valid", "uv", "cov")
        )


@dataclass(eq=False)
class FeedbackMessage:
    camera_id: int
    source_timestamp_us: int
    emit_timestamp_us: int
    persons: list[FeedbackPerson] = field(default_factory=list)

    def __eq__(self, other):
        if not isinstance(other, FeedbackMessage):
            return NotImplemented
        head = (self.camera_id, self.source_timestamp_us, self.emit_timestamp_us)
        return head == (other.camera_id, other.source_timestamp_us, other.emit_timestamp_us) and (
            self.persons == other.persons
        )


# ---------------------------------------------------------------- validation


def _check_int(name, value, minimum=None):
    if not isinstance(value, int) or isinstance(value, bool):
        raise SchemaViolation(f"{name} must be an integer")
    if minimum is not None and value < minimum:
        raise InvariantViolation(f"{name} must be >= {minimum}")
    return value


def _check_num(name, value):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SchemaViolation(f"{name} must be a number")
    if not math.isfinite(value):
        raise InvariantViolation(f"{name} must be finite")
    return float(value)


def _check_keys(name, obj, keys):
    if not isinstance(obj, dict):
        raise SchemaViolation(f"{name} must be an object")
    have = set(obj)
    if have != keys:
        raise SchemaViolation(f"{name}: unknown fields {sorted(have - keys)}, missing fields {sorted(keys - have)}")


def _check_cov2(name, sxx, sxy, syy):
    if sxx < 0 or syy < 0 or sxx * syy - sxy * sxy < -PSD_TOL * max(1.0, sxx * syy):
        raise InvariantViolation(f"{name} is not positive semi-definite")


def _check_bbox(name, bbox):
    if not isinstance(bbox, list) or len(bbox) != 4:
        raise SchemaViolation(f"{name} must be [x, y, w, h]")
    vals = [_check_num(name, b) for b in bbox]
    if vals[2] < 0 or vals[3] < 0:
        raise InvariantViolation(f"{name} has negative extent")
    return vals


def _validate_pose_message(msg: PoseMessage, n_joints=None) -> None:
    _check_int("camera_id", msg.camera_id, 0)
    _check_int("capture_timestamp_us", msg.capture_timestamp_us, 0)
    for p in msg.persons:
        J = p.n_joints
        if n_joints is not None and J != n_joints:
            raise InvariantViolation(f"person has {J} joints, expected {n_joints}")
        n_joints = J
        conf = np.asarray(p.confidence, float)
        if np.any(~np.isfinite(conf)) or np.any(conf < 0) or np.any(conf > 1):
            raise InvariantViolation("confidence outside [0, 1]")
        for c in np.asarray(p.cov, float):
            _check_cov2("joint cov", *c)
        bbox = np.asarray(p.bbox, float)
        if bbox.shape != (4,) or bbox[2] < 0 or bbox[3] < 0:
            raise InvariantViolation("bbox must be [x, y, w, h] with non-negative extent")
        if not (np.all(np.isfinite(p.uv)) and np.all(np.isfinite(p.cov)) and np.all(np.isfinite(bbox))):
            raise InvariantViolation("non-finite joint values")


def _validate_feedback_message(msg: FeedbackMessage, n_joints=None) -> None:
    _check_int("camera_id", msg.camera_id, 0)
    _check_int("source_timestamp_us", msg.source_timestamp_us, 0)
    _check_int("emit_timestamp_us", msg.emit_timestamp_us, 0)
    if msg.emit_timestamp_us < msg.source_timestamp_us:
        raise InvariantViolation("feedback emitted before its source frame was captured")
    for p in msg.persons:
        if n_joints is not None and len(p.valid) != n_joints:
            raise InvariantViolation(f"person has {len(p.valid)} joints, expected {n_joints}")
        n_joints = len(p.valid)
        for c in np.asarray(p.cov, float):
            _check_cov2("joint cov", *c)
        if not (np.all(np.isfinite(p.uv)) and np.all(np.isfinite(p.cov)) and np.all(np.isfinite(p.bbox))):
            raise InvariantViolation("non-finite joint values")


# ------------------------------------------------------------------- codec


def _f(x) -> float:
    return float(x)


def _pose_to_obj(msg: PoseMessage) -> dict:
    persons = []
    for p in msg.persons:
        joints = [
            {
                "valid": bool(p.valid[j]),
                "u": _f(p.uv[j, 0]),
                "v": _f(p.uv[j, 1]),
                "confidence": _f(p.confidence[j]),
                "cov": [_f(p.cov[j, 0]), _f(p.cov[j, 1]), _f(p.cov[j, 2])],
            }
            for j in range(p.n_joints)
        ]
        persons.append({"local_track_id": int(p.local_track_id), "bbox": [_f(b) for b in p.bbox], "joints": joints})
    return {
        "type": "pose",
        "camera_id": int(msg.camera_id),
        "capture_timestamp_us": int(msg.capture_timestamp_us),
        "persons": persons,
    }


def _feedback_to_obj(msg: FeedbackMessage) -> dict:
    persons = []
    for p in msg.persons:
        joints = [
            {
                "valid": bool(p.valid[j]),
                "u": _f(p.uv[j, 0]),
                "v": _f(p.uv[j, 1]),
                "cov": [_f(p.cov[j, 0]), _f(p.cov[j, 1]), _f(p.cov[j, 2])],
            }
            for j in range(len(p.valid))
        ]
        persons.append({"person_id": int(p.person_id), "bbox": [_f(b) for b in p.bbox], "joints": joints})
    return {
        "type": "feedback",
        "camera_id": int(msg.camera_id),
        "source_timestamp_us": int(msg.source_timestamp_us),
        "emit_timestamp_us": int(msg.emit_timestamp_us),
        "persons": persons,
    }


def _skeleton_to_obj(sk: Skeleton3D) -> dict:
    iu = np.triu_indices(3)
    joints = [
        {
            "valid": bool(sk.valid[j]),
            "x": _f(sk.means[j, 0]),
            "y": _f(sk.means[j, 1]),
            "z": _f(sk.means[j, 2]),
            "cov": [_f(c) for c in sk.covs[j][iu]],
        }
        for j in range(sk.n_joints)
    ]
    return {"type": "skeleton", "person_id": int(sk.person_id), "timestamp_us": int(sk.timestamp_us), "joints": joints}


def encode(msg) -> bytes:
    """One message as a single newline-terminated JSON line."""
    if isinstance(msg, PoseMessage):
        _validate_pose_message(msg)
        obj = _pose_to_obj(msg)
    elif isinstance(msg, FeedbackMessage):
        _validate_feedback_message(msg)
        obj = _feedback_to_obj(msg)
    elif isinstance(msg, Skeleton3D):
        obj = _skeleton_to_obj(msg)
    else:
        raise TypeError(f"cannot encode {type(msg).__name__}")
    try:
        text = json.dumps(obj, separators=(",", ":"), allow_nan=False)
    except ValueError as err:
        raise InvariantViolation(str(err)) from None
    return text.encode() + b"\n"


def _decode_pose(obj, n_joints) -> PoseMessage:
    _check_keys("pose message", obj, {"type", "camera_id", "capture_timestamp_us", "persons"})
    if not isinstance(obj["persons"], list):
        raise SchemaViolation("persons must be a list")
    persons = []
    for p in obj["persons"]:
        _check_keys("person", p, {"local_track_id", "bbox", "joints"})
        if not isinstance(p["joints"], list):
            raise SchemaViolation("joints must be a list")
        valid, uv, conf, cov = [], [], [], []
        for jt in p["joints"]:
            _check_keys("joint", jt, {"valid", "u", "v", "confidence", "cov"})
            if not isinstance(jt["valid"], bool):
                raise SchemaViolation("valid must be a boolean")
            if not isinstance(jt["cov"], list) or len(jt["cov"]) != 3:
                raise SchemaViolation("cov must be [sxx, sxy, syy]")
            valid.append(jt["valid"])
            uv.append((_check_num("u", jt["u"]), _check_num("v", jt["v"])))
            conf.append(_check_num("confidence", jt["confidence"]))
            cov.append([_check_num("cov", c) for c in jt["cov"]])
        persons.append(
            PersonPose(
                local_track_id=_check_int("local_track_id", p["local_track_id"]),
                bbox=np.array(_check_bbox("bbox", p["bbox"])),
                valid=np.array(valid, dtype=bool),
                uv=np.array(uv, dtype=np.float64).reshape(-1, 2),
                confidence=np.array(conf, dtype=np.float64),
                cov=np.array(cov, dtype=np.float64).reshape(-1, 3),
            )
        )
    msg = PoseMessage(obj["camera_id"], obj["capture_timestamp_us"], persons)
    _validate_pose_message(msg, n_joints)
    return msg


def _decode_feedback(obj, n_joints) -> FeedbackMessage:
    _check_keys("feedback message", obj, {"type", "camera_id", "source_timestamp_us", "emit_timestamp_us", "persons"})
    if not isinstance(obj["persons"], list):
        raise SchemaViolation("persons must be a list")
    persons = []
    for p in obj["persons"]:
        _check_keys("person", p, {"person_id", "bbox", "joints"})
        if not isinstance(p["joints"], list):
            raise SchemaViolation("joints must be a list")
        valid, uv, cov = [], [], []
        for jt in p["joints"]:
            _check_keys("joint", jt, {"valid", "u", "v", "cov"})
            if not isinstance(jt["valid"], bool):
                raise SchemaViolation("valid must be a boolean")
            if not isinstance(jt["cov"], list) or len(jt["cov"]) != 3:
                raise SchemaViolation("cov must be [sxx, sxy, syy]")
            valid.append(jt["valid"])
            uv.append((_check_num("u", jt["u"]), _check_num("v", jt["v"])))
            cov.append([_check_num("cov", c) for c in jt["cov"]])
        persons.append(
            FeedbackPerson(
                person_id=_check_int("person_id", p["person_id"]),
                bbox=np.array(_check_bbox("bbox", p["bbox"])),
                valid=np.array(valid, dtype=bool),
                uv=np.array(uv, dtype=np.float64).reshape(-1, 2),
                cov=np.array(cov, dtype=np.float64).reshape(-1, 3),
            )
        )
    msg = FeedbackMessage(obj["camera_id"], obj["source_timestamp_us"], obj["emit_timestamp_us"], persons)
    _validate_feedback_message(msg, n_joints)
    return msg


def _decode_skeleton(obj, n_joints) -> Skeleton3D:
    _check_keys("skeleton", obj, {"type", "person_id", "timestamp_us", "joints"})
    if not isinstance(obj["joints"], list):
        raise SchemaViolation("joints must be a list")
    if n_joints is not None and len(obj["joints"]) != n_joints:
        raise InvariantViolation(f"skeleton has {len(obj['joints'])} joints, expected {n_joints}")
    J = len(obj["joints"])
    means = np.zeros((J, 3))
    covs = np.zeros((J, 3, 3))
    valid = np.zeros(J, dtype=bool)
    iu = np.triu_indices(3)
    for j, jt in enumerate(obj["joints"]):
        _check_keys("joint", jt, {"valid", "x", "y", "z", "cov"})
        if not isinstance(jt["valid"], bool) or not isinstance(jt["cov"], list) or len(jt["cov"]) != 6:
            raise SchemaViolation("skeleton joint needs a boolean valid flag and 6 covariance entries")
        valid[j] = jt["valid"]
        means[j] = [_check_num(k, jt[k]) for k in ("x", "y", "z")]
        c = np.zeros((3, 3))
        c[iu] = [_check_num("cov", v) for v in jt["cov"]]
        covs[j] = c + np.triu(c, 1).T
    return Skeleton3D(
        _check_int("person_id", obj["person_id"]), _check_int("timestamp_us", obj["timestamp_us"], 0), means, covs, valid
    )


_DECODERS = {"pose": _decode_pose, "feedback": _decode_feedback, "skeleton": _decode_skeleton}


def decode(line, n_joints: int | None = None):
    """Parse one JSON line into a PoseMessage, FeedbackMessage or Skeleton3D."""
    if isinstance(line, (bytes, bytearray)):
        try:
            line = line.decode()
        except UnicodeDecodeError as err:
            raise SchemaViolation(f"not UTF-8: {err}") from None
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as err:
        raise SchemaViolation(f"malformed JSON: {err}") from None
    if not isinstance(obj, dict) or obj.get("type") not in _DECODERS:
        raise SchemaViolation("record must be an object with type pose, feedback or skeleton")
    return _DECODERS[obj["type"]](obj, n_joints)


def iter_decode(lines: Iterable, n_joints: int | None = None, errors: list | None = None) -> Iterator:
    """Decode a stream of lines, skipping (and collecting) broken ones."""
    for line in lines:
        if not line.strip():
            continue
        try:
            yield decode(line, n_joints)
        except (SchemaViolation, InvariantViolation) as err:
            if errors is not None:
                errors.append(err)


# --------------------------------------------------------------- transport


@dataclass(frozen=True)
class LatencyModel:
    fixed_ms: float = 0.0
    jitter_ms: float = 0.0  # uniform in [-jitter, +jitter]
    loss: float = 0.0

    def __post_init__(self):
        if self.fixed_ms < 0 or self.jitter_ms < 0 or not 0.0 <= self.loss <= 1.0:
            raise ValueError("latency terms must be non-negative and loss a probability")


@dataclass
class ChannelStats:
    sent: int = 0
    delivered: int = 0
    lost: int = 0
    dropped_on_close: int = 0
    bytes_sent: int = 0
    latency_us_total: int = 0


class LoopbackChannel:
    """One-way in-process channel on simulated time.

    Payloads are delivered FIFO at send time + latency; losses and jitter are
    drawn from a generator seeded at construction.
    """

    def __init__(self, latency: LatencyModel = LatencyModel(), seed: int = 0):
        self.latency = latency
        self._rng = np.random.default_rng(seed)
        self._queue: deque = deque()
        self._last_delivery = -(2**62)
        self._lock = threading.Lock()
        self.closed = False
        self.stats = ChannelStats()

    def _delivery_time(self, now_us: int) -> int | None:
        lost = self._rng.random() < self.latency.loss
        jitter = self._rng.uniform(-self.latency.jitter_ms, self.latency.jitter_ms) if self.latency.jitter_ms else 0.0
        if lost:
            return None
        delay_us = max(0, int(round((self.latency.fixed_ms + jitter) * 1000)))
        t = max(now_us + delay_us, self._last_delivery)
        self._last_delivery = t
        return t

    def send(self, payload: bytes, now_us: int) -> bool:
        with self._lock:
            if self.closed:
                raise Disconnected("send on closed channel")
            self.stats.sent += 1
            self.stats.bytes_sent += len(payload)
            t = self._delivery_time(now_us)
            if t is None:
                self.stats.lost += 1
                return False
            self._enqueue(payload, now_us, t)
            return True

    def _enqueue(self, payload, now_us, t):
        self._queue.append((t, now_us, payload))

    def _take(self, entry):
        return entry[2]

    def next_delivery_us(self) -> int | None:
        with self._lock:
            return self._queue[0][0] if self._queue else None

    def poll(self, now_us: int) -> list[tuple[bytes, int]]:
        """Payloads due by ``now_us`` with their delivery times, in send order."""
        out = []
        with self._lock:
            while self._queue and self._queue[0][0] <= now_us:
                entry = self._queue.popleft()
                out.append((self._take(entry), entry[0]))
                self.stats.delivered += 1
                self.stats.latency_us_total += entry[0] - entry[1]
        return out

    def close(self) -> None:
        with self._lock:
            self.closed = True
            self.stats.dropped_on_close += len(self._queue)
            self._queue.clear()


class SocketChannel(LoopbackChannel):
    """Same timing model as the loopback, but the bytes cross a real stream socket.

    Framing is one message per newline-terminated line; the i-th line read
    from the socket is the i-th message that was not lost.
    """

    BUFFER = 4 << 20

    def __init__(self, latency: LatencyModel = LatencyModel(), seed: int = 0):
        super().__init__(latency, seed)
        self._tx, self._rx = socket.socketpair()
        for s in (self._tx, self._rx):
            s.setsockopt(socket.SOL_SOCKET, socket.SO_SNDBUF, self.BUFFER)
            s.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, self.BUFFER)
        self._buf = bytearray()

    def _enqueue(self, payload, now_us, t):
        if not payload.endswith(b"\n") or b"\n" in payload[:-1]:
            raise ValueError("socket payloads must be exactly one newline-terminated line")
        self._tx.sendall(payload)
        self._queue.append((t, now_us, None))

    def _take(self, entry):
        while b"\n" not in self._buf:
            chunk = self._rx.recv(65536)
            if not chunk:
                raise Disconnected("socket closed by peer")
            self._buf.extend(chunk)
        i = self._buf.index(b"\n") + 1
        line = bytes(self._buf[:i])
        del self._buf[:i]
        return line

    def close(self) -> None:
        super().close()
        self._tx.close()
        self._rx.close()


def make_channel(kind: str = "loopback", latency: LatencyModel = LatencyModel(), seed: int = 0) -> LoopbackChannel:
    if kind == "loopback":
        return LoopbackChannel(latency, seed)
    if kind == "socket":
        return SocketChannel(latency, seed)
    raise ValueError(f"unknown transport {kind!r}")


@dataclass
class DuplexLink:
    """A pair of one-way channels: ``up`` (sensor -> backend) and ``down`` (backend -> sensor)."""

    up: LoopbackChannel
    down: LoopbackChannel

    def close(self) -> None:
        self.up.close()
        self.down.close()


def transport(kind: str = "loopback", latency: LatencyModel = LatencyModel(), seed: int = 0) -> DuplexLink:
    return DuplexLink(make_channel(kind, latency, seed), make_channel(kind, latency, seed + 1))

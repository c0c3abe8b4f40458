"""Broadcast-medium abstraction and a minimal consumer/producer forwarder.

Two media are provided: a deterministic simulated bus driven by virtual (or
wall-clock) time, and a UDP multicast face for live demos. Every frame a
face sends is seen by every attached face, the sender included; the node
layer filters a node's own frames so it never satisfies its own pending
Interests.
"""

from __future__ import annotations

import heapq
import logging
import random
import socket
import struct
import threading
import time
from dataclasses import dataclass
from typing import Callable

from .tlv import (
    DataPacket,
    InterestPacket,
    MalformedTlv,
    MAX_PACKET_SIZE,
    Name,
    T_DATA,
    decode_packet,
    peek_name,
)

logger = logging.getLogger(__name__)

DEFAULT_LIFETIME_MS = 4000
DEFAULT_RETX_BUDGET = 3

MULTICAST_GROUP = "224.0.23.170"
MULTICAST_PORT = 56363


class FaceClosed(RuntimeError):
    """Operation on a face that was detached or closed."""


class DuplicateRegistration(ValueError):
    """A prefix is already registered on this face."""


# ---------------------------------------------------------------------------
# schedulers
# ---------------------------------------------------------------------------

class TimerHandle:
    __slots__ = ("fn", "cancelled")

    def __init__(self, fn: Callable[[], None]):
        self.fn = fn
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True


class VirtualScheduler:
    """Deterministic event loop over virtual milliseconds."""

    def __init__(self, start_ms: float = 0.0):
        self.now_ms = start_ms
        self._heap: list[tuple[float, int, TimerHandle]] = []
        self._seq = 0

    def schedule(self, delay_ms: float, fn: Callable[[], None]) -> TimerHandle:
        handle = TimerHandle(fn)
        self._seq += 1
        heapq.heappush(self._heap, (self.now_ms + max(0.0, delay_ms), self._seq, handle))
        return handle

    def submit(self, fn: Callable[[], None]) -> TimerHandle:
        return self.schedule(0.0, fn)

    def run_until(self, t_ms: float) -> None:
        while self._heap and self._heap[0][0] <= t_ms:
            due, _, handle = heapq.heappop(self._heap)
            if handle.cancelled:
                continue
            self.now_ms = max(self.now_ms, due)
            handle.fn()
        self.now_ms = max(self.now_ms, t_ms)

    def run_for(self, duration_ms: float) -> None:
        self.run_until(self.now_ms + duration_ms)

    def run_until_idle(self, limit_ms: float = 10**9) -> None:
        while self._heap:
            due = self._heap[0][0]
            if due > limit_ms:
                break
            self.run_until(due)


class WallClockScheduler:
    """Thread-backed scheduler with the same interface, for live operation.

    All callbacks run on the single loop thread; schedule/submit are safe to
    call from any thread.
    """

    def __init__(self):
        self._heap: list[tuple[float, int, TimerHandle]] = []
        self._seq = 0
        self._cond = threading.Condition()
        self._stopped = False
        self._thread = threading.Thread(target=self._run, daemon=True)

    @property
    def now_ms(self) -> float:
        return time.time() * 1000.0

    def start(self) -> "WallClockScheduler":
        self._thread.start()
        return self

    def stop(self) -> None:
        with self._cond:
            self._stopped = True
            self._cond.notify()
        if self._thread.is_alive():
            self._thread.join(timeout=5)

    def schedule(self, delay_ms: float, fn: Callable[[], None]) -> TimerHandle:
        handle = TimerHandle(fn)
        with self._cond:
            self._seq += 1
            heapq.heappush(
                self._heap, (self.now_ms + max(0.0, delay_ms), self._seq, handle)
            )
            self._cond.notify()
        return handle

    def submit(self, fn: Callable[[], None]) -> TimerHandle:
        return self.schedule(0.0, fn)

    def _run(self) -> None:
        while True:
            with self._cond:
                if self._stopped:
                    return
                if not self._heap:
                    self._cond.wait(timeout=0.5)
                    continue
                due, _, handle = self._heap[0]
                wait_s = (due - self.now_ms) / 1000.0
                if wait_s > 0:
                    self._cond.wait(timeout=min(wait_s, 0.5))
                    continue
                heapq.heappop(self._heap)
            if not handle.cancelled:
                try:
                    handle.fn()
                except Exception:
                    logger.exception("scheduler callback failed")


# ---------------------------------------------------------------------------
# simulated broadcast bus
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BusConfig:
    loss_probability: float = 0.0
    latency: tuple = ("fixed", 5.0)  # or ("uniform", lo_ms, hi_ms)
    seed: int = 0

    @staticmethod
    def parse_latency(text: str) -> tuple:
        parts = text.split(":")
        if parts[0] == "fixed" and len(parts) == 2:
            return ("fixed", float(parts[1]))
        if parts[0] == "uniform" and len(parts) == 3:
            return ("uniform", float(parts[1]), float(parts[2]))
        raise ValueError(f"bad latency spec {text!r}")


@dataclass(frozen=True)
class TraceEvent:
    t: float
    kind: str  # send | deliver | drop
    face: str
    name: Name
    ptype: int  # T_INTEREST or T_DATA

    def line(self) -> str:
        return f"t={self.t:.0f} {self.kind} {self.face} {self.name.to_uri()}"

    @property
    def is_data(self) -> bool:
        return self.ptype == T_DATA


class Face:
    """Attachment point to a medium: send bytes, receive via callback."""

    label: str

    def send(self, wire: bytes) -> None:
        raise NotImplementedError

    def set_receiver(self, cb: Callable[[bytes, str | None], None]) -> None:
        """cb(wire, sender_label); sender_label is None when unknown (UDP)."""
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError


class BusFace(Face):
    def __init__(self, bus: "SimulatedBus", label: str):
        self.bus = bus
        self.label = label
        self._receiver: Callable[[bytes, str | None], None] | None = None
        self.closed = False

    def send(self, wire: bytes) -> None:
        if self.closed:
            raise FaceClosed(self.label)
        self.bus._broadcast(self, wire)

    def set_receiver(self, cb) -> None:
        self._receiver = cb

    def close(self) -> None:
        self.bus.detach(self)

    def _deliver(self, wire: bytes, sender: str) -> None:
        if not self.closed and self._receiver is not None:
            self._receiver(wire, sender)


class SimulatedBus:
    """Single broadcast domain with seeded, per-delivery loss and latency.

    Randomness for each delivery is derived from (seed, receiving face,
    packet type, packet name, occurrence index), so adding or removing one
    face never perturbs the loss/latency draws other faces see.
    """

    def __init__(self, scheduler, config: BusConfig = BusConfig()):
        self.scheduler = scheduler
        self.config = config
        self.faces: list[BusFace] = []
        self.trace: list[TraceEvent] = []
        self._occurrence: dict[tuple, int] = {}

    def attach(self, label: str) -> BusFace:
        if any(face.label == label for face in self.faces):
            raise ValueError(f"face label {label!r} already attached")
        face = BusFace(self, label)
        self.faces.append(face)
        return face

    def detach(self, face: BusFace) -> None:
        face.closed = True
        if face in self.faces:
            self.faces.remove(face)

    def _record(self, kind: str, face_label: str, name: Name, ptype: int) -> None:
        self.trace.append(
            TraceEvent(self.scheduler.now_ms, kind, face_label, name, ptype)
        )

    def _draw(self, face_label: str, ptype: int, name: Name) -> tuple[bool, float]:
        key = (face_label, ptype, name)
        occurrence = self._occurrence.get(key, 0)
        self._occurrence[key] = occurrence + 1
        rng = random.Random(
            f"{self.config.seed}|{face_label}|{ptype}|{name.to_uri()}|{occurrence}"
        )
        dropped = rng.random() < self.config.loss_probability
        if self.config.latency[0] == "fixed":
            latency = self.config.latency[1]
        else:
            latency = rng.uniform(self.config.latency[1], self.config.latency[2])
        return dropped, latency

    def _broadcast(self, sender: BusFace, wire: bytes) -> None:
        if len(wire) > MAX_PACKET_SIZE:
            raise ValueError("frame exceeds maximum packet size")
        ptype, name = peek_name(wire)
        self._record("send", sender.label, name, ptype)
        for face in list(self.faces):
            dropped, latency = self._draw(face.label, ptype, name)
            if face is sender:
                dropped = False  # a sender always hears itself
            if dropped:
                self._record("drop", face.label, name, ptype)
                continue
            self.scheduler.schedule(
                latency, _Delivery(self, face, wire, sender.label, name, ptype)
            )

    def write_trace(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for event in self.trace:
                fh.write(event.line() + "\n")


class _Delivery:
    """Scheduled frame arrival; a plain callable to keep the heap lean."""

    __slots__ = ("bus", "face", "wire", "sender", "name", "ptype")

    def __init__(self, bus, face, wire, sender, name, ptype):
        self.bus = bus
        self.face = face
        self.wire = wire
        self.sender = sender
        self.name = name
        self.ptype = ptype

    def __call__(self) -> None:
        if self.face.closed:
            return
        self.bus._record("deliver", self.face.label, self.name, self.ptype)
        self.face._deliver(self.wire, self.sender)


# ---------------------------------------------------------------------------
# UDP multicast face
# ---------------------------------------------------------------------------

class UdpMulticastFace(Face):
    """One TLV packet per datagram on a multicast group.

    Self-sent frames are filtered by remembering digests of recent sends,
    since every process on a host shares the group/port pair.
    """

    def __init__(self, scheduler, group: str = MULTICAST_GROUP,
                 port: int = MULTICAST_PORT, label: str = "udp",
                 interface_ip: str = "0.0.0.0"):
        self.scheduler = scheduler
        self.label = label
        self.group = group
        self.port = port
        self._receiver = None
        self._sent: dict[bytes, int] = {}
        self._lock = threading.Lock()
        self.closed = False

        self._sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind(("", port))
        mreq = struct.pack(
            "4s4s", socket.inet_aton(group), socket.inet_aton(interface_ip)
        )
        self._sock.setsockopt(socket.IPPROTO_IP, socket.IP_ADD_MEMBERSHIP, mreq)
        self._sock.setsockopt(socket.IPPROTO_IP, socket.IP_MULTICAST_LOOP, 1)
        self._sock.setsockopt(socket.IPPROTO_IP, socket.IP_MULTICAST_TTL, 1)
        self._sock.settimeout(0.25)
        self._thread = threading.Thread(target=self._reader, daemon=True)
        self._thread.start()

    def send(self, wire: bytes) -> None:
        if self.closed:
            raise FaceClosed(self.label)
        if len(wire) > MAX_PACKET_SIZE:
            raise ValueError("frame exceeds maximum packet size")
        digest = hash(wire)
        with self._lock:
            self._sent[digest] = self._sent.get(digest, 0) + 1
        try:
            self._sock.sendto(wire, (self.group, self.port))
        except OSError as exc:
            raise FaceClosed(f"socket send failed: {exc}") from exc

    def set_receiver(self, cb) -> None:
        self._receiver = cb

    def close(self) -> None:
        self.closed = True
        self._thread.join(timeout=1)
        self._sock.close()

    def _reader(self) -> None:
        while not self.closed:
            try:
                wire, _addr = self._sock.recvfrom(MAX_PACKET_SIZE + 1)
            except socket.timeout:
                continue
            except OSError:
                return
            digest = hash(wire)
            with self._lock:
                if self._sent.get(digest, 0) > 0:
                    self._sent[digest] -= 1
                    if self._sent[digest] == 0:
                        del self._sent[digest]
                    continue
            if self._receiver is not None:
                self.scheduler.submit(lambda w=wire: self._receiver(w, None))


def udp_multicast_face(scheduler, group: str = MULTICAST_GROUP,
                       port: int = MULTICAST_PORT, label: str = "udp") -> UdpMulticastFace:
    return UdpMulticastFace(scheduler, group, port, label)


# ---------------------------------------------------------------------------
# consumer/producer node
# ---------------------------------------------------------------------------

@dataclass
class PitEntry:
    name: Name
    on_data: Callable[[DataPacket], None]
    on_timeout: Callable[[], None] | None
    retx_budget: int
    lifetime_ms: float
    app_params: bytes | None
    timer: TimerHandle | None = None
    done: bool = False

    def cancel(self) -> None:
        self.done = True
        if self.timer is not None:
            self.timer.cancel()


class Registration:
    __slots__ = ("node", "prefix", "handler", "active")

    def __init__(self, node, prefix, handler):
        self.node = node
        self.prefix = prefix
        self.handler = handler
        self.active = True

    def cancel(self) -> None:
        self.active = False
        self.node._registrations.pop(self.prefix.components, None)


class Node:
    """Single-entity forwarder: PIT, producer prefix table, dedup, overhear."""

    def __init__(self, face: Face, scheduler, rng: random.Random | None = None):
        self.face = face
        self.scheduler = scheduler
        # system entropy unless a simulation injects a seeded stream
        self.rng = rng if rng is not None else random.SystemRandom()
        self._pit: list[PitEntry] = []
        self._registrations: dict[tuple, Registration] = {}
        self._overhear: list[tuple[Name, Callable[[DataPacket], None]]] = []
        self._seen_interests: dict[tuple[Name, bytes], float] = {}
        self.malformed_count = 0
        face.set_receiver(self._handle_frame)

    # -- consumer side ------------------------------------------------------

    def express_interest(
        self,
        name: Name,
        on_data: Callable[[DataPacket], None],
        on_timeout: Callable[[], None] | None = None,
        retx_budget: int = DEFAULT_RETX_BUDGET,
        lifetime_ms: float = DEFAULT_LIFETIME_MS,
        app_params: bytes | None = None,
    ) -> PitEntry:
        if getattr(self.face, "closed", False):
            raise FaceClosed(self.face.label)
        entry = PitEntry(name, on_data, on_timeout, retx_budget, lifetime_ms, app_params)
        self._pit.append(entry)
        self._transmit(entry)
        return entry

    def _transmit(self, entry: PitEntry) -> None:
        nonce = bytes(self.rng.getrandbits(8) for _ in range(4))
        interest = InterestPacket(entry.name, nonce, int(entry.lifetime_ms),
                                  entry.app_params)
        self.face.send(interest.encode())
        entry.timer = self.scheduler.schedule(
            entry.lifetime_ms, lambda: self._expire(entry)
        )

    def _expire(self, entry: PitEntry) -> None:
        if entry.done:
            return
        if getattr(self.face, "closed", False):
            entry.done = True
            if entry in self._pit:
                self._pit.remove(entry)
            return
        if entry.retx_budget != 0:
            if entry.retx_budget > 0:
                entry.retx_budget -= 1
            self._transmit(entry)  # fresh nonce each retransmission
            return
        entry.done = True
        if entry in self._pit:
            self._pit.remove(entry)
        if entry.on_timeout is not None:
            entry.on_timeout()

    def announce(self, name: Name, lifetime_ms: float = 100.0) -> None:
        """Broadcast a notification Interest without creating a PIT entry."""
        nonce = bytes(self.rng.getrandbits(8) for _ in range(4))
        self.face.send(InterestPacket(name, nonce, int(lifetime_ms)).encode())

    # -- producer side ------------------------------------------------------

    def register_prefix(self, prefix: Name, on_interest) -> Registration:
        key = prefix.components
        if key in self._registrations:
            raise DuplicateRegistration(prefix.to_uri())
        registration = Registration(self, prefix, on_interest)
        self._registrations[key] = registration
        return registration

    def send_data(self, data: DataPacket) -> None:
        self.face.send(data.encode())

    def on_overheard_data(self, prefix: Name, cb) -> None:
        self._overhear.append((prefix, cb))

    # -- frame handling -----------------------------------------------------

    def _handle_frame(self, wire: bytes, sender: str | None) -> None:
        if sender is not None and sender == self.face.label:
            return  # own broadcast: never self-satisfy
        try:
            packet = decode_packet(wire)
        except MalformedTlv:
            self.malformed_count += 1
            return
        if isinstance(packet, InterestPacket):
            self._handle_interest(packet)
        else:
            self._handle_data(packet)

    def _handle_interest(self, interest: InterestPacket) -> None:
        now = self.scheduler.now_ms
        key = (interest.name, interest.nonce)
        expiry = self._seen_interests.get(key)
        if expiry is not None and expiry > now:
            return  # duplicate within lifetime
        self._seen_interests[key] = now + interest.lifetime_ms
        if len(self._seen_interests) > 4096:
            self._seen_interests = {
                k: v for k, v in self._seen_interests.items() if v > now
            }
        best: Registration | None = None
        for registration in self._registrations.values():
            if not registration.active:
                continue
            if registration.prefix.is_prefix_of(interest.name):
                if best is None or len(registration.prefix) > len(best.prefix):
                    best = registration
        if best is None:
            return
        response = best.handler(interest)
        if response is not None:
            self.send_data(response)

    def _handle_data(self, data: DataPacket) -> None:
        matched = [e for e in self._pit if not e.done and e.name.is_prefix_of(data.name)]
        for entry in matched:
            entry.cancel()
            if entry in self._pit:
                self._pit.remove(entry)
        for entry in matched:
            entry.on_data(data)
        for prefix, cb in self._overhear:
            if prefix.is_prefix_of(data.name):
                cb(data)

    @property
    def pending_count(self) -> int:
        return len(self._pit)

"""Datagram bearers beneath WDP: a simulated impaired channel and UDP.

The simulated bearer applies loss, duplication, pairwise reordering and
delay/jitter from a seeded RNG, so a fixed seed plus a fixed send schedule
yields a fixed delivery trace.  Bit errors are modeled as whole-datagram
loss; delivered payloads are always bit-identical to what was sent.

Reordering model: with probability ``reorder_prob`` a datagram is held and
swapped with its immediate successor.  A held datagram is released by the
next send from the same endpoint (or by ``close``).

The UDP adapter puts the payload bytes on a real socket with no extra
framing; its bearer address is an ``"ip:port"`` string.
"""

from __future__ import annotations

import queue
import random
import socket
import threading
from dataclasses import dataclass

DEFAULT_MTU = 1400


class BearerError(Exception):
    pass


class BearerClosed(BearerError):
    pass


class OversizeDatagram(BearerError):
    pass


class InvalidProfile(BearerError):
    pass


@dataclass
class ImpairmentProfile:
    loss_prob: float = 0.0
    dup_prob: float = 0.0
    reorder_prob: float = 0.0
    delay_ms: float = 0.0
    jitter_ms: float = 0.0
    mtu_bytes: int = DEFAULT_MTU
    seed: int = 0

    def validate(self) -> "ImpairmentProfile":
        for name in ("loss_prob", "dup_prob", "reorder_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise InvalidProfile(f"{name} must be in [0, 1], got {p}")
        if self.delay_ms < 0 or self.jitter_ms < 0:
            raise InvalidProfile("delay_ms and jitter_ms must be >= 0")
        if self.mtu_bytes < 64:
            raise InvalidProfile(f"mtu_bytes must be >= 64, got {self.mtu_bytes}")
        return self


@dataclass
class RawDatagram:
    src: str
    dst: str
    payload: bytes


class SimNetwork:
    """In-process mesh of simulated bearer endpoints keyed by address."""

    def __init__(self, clock):
        self.clock = clock
        self._nodes: dict[str, "SimBearer"] = {}
        self._lock = threading.Lock()

    def endpoint(self, addr: str, profile: ImpairmentProfile | None = None) -> "SimBearer":
        if not addr:
            raise ValueError("bearer address must be non-empty")
        with self._lock:
            if addr in self._nodes:
                raise ValueError(f"address {addr!r} already attached")
            node = SimBearer(self, addr, profile)
            self._nodes[addr] = node
            return node

    def _detach(self, addr: str) -> None:
        with self._lock:
            self._nodes.pop(addr, None)

    def _deliver(self, dgram: RawDatagram) -> None:
        with self._lock:
            node = self._nodes.get(dgram.dst)
        if node is not None:
            node._on_delivered(dgram)


class SimBearer:
    """One endpoint on a :class:`SimNetwork`; impairments apply on egress."""

    def __init__(self, network: SimNetwork, addr: str,
                 profile: ImpairmentProfile | None = None):
        self._network = network
        self._addr = addr
        self._profile = (profile or ImpairmentProfile()).validate()
        self._rng = random.Random(self._profile.seed)
        self._lock = threading.Lock()
        self._queue: queue.Queue[RawDatagram] = queue.Queue()
        self._receiver = None
        self._held: list[RawDatagram] | None = None
        self._send_index = 0
        self._script = None
        self._closed = False

    @property
    def local_addr(self) -> str:
        return self._addr

    @property
    def mtu(self) -> int:
        return self._profile.mtu_bytes

    def set_impairments(self, profile: ImpairmentProfile) -> None:
        """Swap the profile; datagrams already in flight keep the old one."""
        profile.validate()
        with self._lock:
            reseed = profile.seed != self._profile.seed
            self._profile = profile
            if reseed:
                self._rng = random.Random(profile.seed)

    def set_delivery_script(self, fn) -> None:
        """Override random impairments with ``fn(dgram, send_index)``.

        The script returns an iterable of delivery delays in milliseconds;
        an empty iterable drops the datagram.  Used for hand-computed trace
        oracles.  Pass ``None`` to restore the random profile.
        """
        with self._lock:
            self._script = fn

    def send(self, dst: str, payload: bytes) -> None:
        with self._lock:
            if self._closed:
                raise BearerClosed(self._addr)
            profile = self._profile
            if len(payload) > profile.mtu_bytes:
                raise OversizeDatagram(
                    f"payload {len(payload)} exceeds MTU {profile.mtu_bytes}")
            dgram = RawDatagram(self._addr, dst, bytes(payload))
            index = self._send_index
            self._send_index += 1

            if self._script is not None:
                copies = [(dgram, d) for d in self._script(dgram, index)]
                held = None
            else:
                # Draw order is fixed (loss, dup, reorder, delays) so that a
                # seed fully determines the trace.
                copies = []
                if self._rng.random() >= profile.loss_prob:
                    copies.append(dgram)
                    if self._rng.random() < profile.dup_prob:
                        copies.append(dgram)
                reorder = self._rng.random() < profile.reorder_prob
                copies = [(d, profile.delay_ms + self._rng.uniform(0.0, profile.jitter_ms))
                          for d in copies]
                held = None
                if self._held is not None:
                    held = self._held
                    self._held = None
                elif copies and reorder:
                    self._held = copies
                    return
        for d, delay in copies:
            self._schedule(d, delay)
        if held:
            for d, delay in held:
                self._schedule(d, delay)

    def _schedule(self, dgram: RawDatagram, delay_ms: float) -> None:
        self._network.clock.call_later(delay_ms / 1000.0,
                                       self._network._deliver, dgram)

    def _on_delivered(self, dgram: RawDatagram) -> None:
        with self._lock:
            if self._closed:
                return
            receiver = self._receiver
        if receiver is not None:
            receiver(dgram)
        else:
            self._queue.put(dgram)

    def set_receiver(self, cb) -> None:
        """Deliver via callback instead of the recv queue; drains any backlog."""
        with self._lock:
            self._receiver = cb
        if cb is not None:
            while True:
                try:
                    dgram = self._queue.get_nowait()
                except queue.Empty:
                    break
                cb(dgram)

    def recv(self, timeout: float | None = None) -> RawDatagram | None:
        """Next delivered datagram, or None when the wait times out."""
        if self._closed and self._queue.empty():
            raise BearerClosed(self._addr)
        try:
            if timeout == 0:
                return self._queue.get_nowait()
            return self._queue.get(timeout=timeout)
        except queue.Empty:
            return None

    def close(self) -> None:
        with self._lock:
            if self._closed:
                return
            self._closed = True
            held = self._held
            self._held = None
        if held:
            for d, delay in held:
                self._schedule(d, delay)
        self._network._detach(self._addr)


def _parse_udp_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"bad UDP bearer address {addr!r}, expected ip:port")
    return host, int(port)


class UdpBearer:
    """UDP adapter: one socket per endpoint, payload bytes are the wire."""

    def __init__(self, bind: tuple[str, int] = ("127.0.0.1", 0),
                 mtu: int = DEFAULT_MTU):
        self._mtu = mtu
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self._sock.bind(bind)
        host, port = self._sock.getsockname()
        self._addr = f"{host}:{port}"
        self._queue: queue.Queue[RawDatagram] = queue.Queue()
        self._receiver = None
        self._lock = threading.Lock()
        self._closed = False
        self._thread = threading.Thread(target=self._read_loop, daemon=True,
                                        name=f"udp-bearer-{port}")
        self._thread.start()

    @property
    def local_addr(self) -> str:
        return self._addr

    @property
    def mtu(self) -> int:
        return self._mtu

    def send(self, dst: str, payload: bytes) -> None:
        if self._closed:
            raise BearerClosed(self._addr)
        if len(payload) > self._mtu:
            raise OversizeDatagram(
                f"payload {len(payload)} exceeds MTU {self._mtu}")
        self._sock.sendto(payload, _parse_udp_addr(dst))

    def _read_loop(self) -> None:
        while True:
            try:
                data, (host, port) = self._sock.recvfrom(65535)
            except OSError:
                return
            dgram = RawDatagram(f"{host}:{port}", self._addr, data)
            with self._lock:
                receiver = self._receiver
            if receiver is not None:
                receiver(dgram)
            else:
                self._queue.put(dgram)

    def set_receiver(self, cb) -> None:
        with self._lock:
            self._receiver = cb
        if cb is not None:
            while True:
                try:
                    dgram = self._queue.get_nowait()
                except queue.Empty:
                    break
                cb(dgram)

    def recv(self, timeout: float | None = None) -> RawDatagram | None:
        if self._closed and self._queue.empty():
            raise BearerClosed(self._addr)
        try:
            if timeout == 0:
                return self._queue.get_nowait()
            return self._queue.get(timeout=timeout)
        except queue.Empty:
            return None

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        self._sock.close()

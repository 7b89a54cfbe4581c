"""Transaction layer: classes 0/1/2 over (optionally secured) WDP.

PDU wire format:

    byte 0   bits 7..4 pdu type (Invoke=0x1 Result=0x2 Ack=0x3 Abort=0x4)
             bit 3 rid (retransmission), bit 2 uak (user-ack requested),
             bits 1..0 must be zero
    bytes 1-2  tid, big-endian
    Invoke:  byte 3 = class, payload follows
    Result:  payload from byte 3
    Ack:     optional out-of-band bytes from byte 3 (max 64)
    Abort:   byte 3 = reason

Concatenation: a leading 0x00 marker followed by repeated
``{uint16 length, pdu}`` groups; any other first byte is a single bare PDU
(possible because a valid PDU's first byte is always >= 0x10).

State machines (class 2): the initiator retransmits Invoke until it sees a
standalone Ack or the Result; the Result is acknowledged with an Ack.  The
responder delays its automatic Ack by ``ack_delay_ms`` so a prompt Result
acknowledges the Invoke implicitly, and retransmits the Result until the
initiator's Ack arrives.  Class 1 completes on Ack; class 0 is
fire-and-forget.  When ``uak`` is set the provider never auto-acknowledges:
the receiving user must call ``Invocation.ack`` (optionally with out-of-band
bytes, which ride the Ack back to the initiator).

Completed transaction records linger for ``linger_ms`` so duplicate PDUs
re-trigger retransmissions but never a second user indication.
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass
from typing import Callable, NamedTuple

PDU_INVOKE = 0x1
PDU_RESULT = 0x2
PDU_ACK = 0x3
PDU_ABORT = 0x4

PDU_NAMES = {PDU_INVOKE: "Invoke", PDU_RESULT: "Result",
             PDU_ACK: "Ack", PDU_ABORT: "Abort"}

MAX_OOB = 64

# transaction states
NULL = "NULL"
INVOKE_SENT = "INVOKE_SENT"
INVOKE_RCVD = "INVOKE_RCVD"
RESULT_SENT = "RESULT_SENT"
RESULT_RCVD = "RESULT_RCVD"
WAIT_USER_ACK = "WAIT_USER_ACK"
DONE = "DONE"
ABORTED = "ABORTED"

ABORT_USER = 0x01
ABORT_RETRIES_EXHAUSTED = 0x02


class WtpError(Exception):
    pass


class MalformedPdu(WtpError):
    pass


class MalformedConcat(WtpError):
    pass


class TransactionTimeout(WtpError):
    pass


class Aborted(WtpError):
    def __init__(self, reason: int):
        super().__init__(f"transaction aborted, reason {reason}")
        self.reason = reason


class UnknownTid(WtpError):
    pass


class WrongClass(WtpError):
    pass


class WrongState(WtpError):
    pass


class UserAckNotRequested(WtpError):
    pass


class AlreadyCompleted(WtpError):
    pass


class OversizePayload(WtpError):
    pass


@dataclass
class WtpPdu:
    pdu_type: int
    tid: int
    rid: bool = False
    uak: bool = False
    tclass: int | None = None      # Invoke only
    abort_reason: int | None = None  # Abort only
    oob: bytes = b""               # Ack only
    payload: bytes = b""           # Invoke/Result


def encode_pdu(pdu: WtpPdu) -> bytes:
    if pdu.pdu_type not in PDU_NAMES:
        raise MalformedPdu(f"unknown pdu type {pdu.pdu_type}")
    if not 0 <= pdu.tid <= 65535:
        raise MalformedPdu(f"tid {pdu.tid} out of range")
    b0 = (pdu.pdu_type << 4) | (0x08 if pdu.rid else 0) | (0x04 if pdu.uak else 0)
    out = bytes([b0]) + struct.pack("!H", pdu.tid)
    if pdu.pdu_type == PDU_INVOKE:
        if pdu.tclass not in (0, 1, 2):
            raise MalformedPdu(f"invoke class {pdu.tclass} invalid")
        return out + bytes([pdu.tclass]) + pdu.payload
    if pdu.pdu_type == PDU_RESULT:
        return out + pdu.payload
    if pdu.pdu_type == PDU_ACK:
        if len(pdu.oob) > MAX_OOB:
            raise MalformedPdu(f"oob data {len(pdu.oob)} exceeds {MAX_OOB} bytes")
        return out + pdu.oob
    # Abort
    if pdu.abort_reason is None or not 0 <= pdu.abort_reason <= 255:
        raise MalformedPdu("abort needs a reason byte")
    return out + bytes([pdu.abort_reason])


def decode_pdu(data: bytes) -> WtpPdu:
    if len(data) < 3:
        raise MalformedPdu(f"pdu shorter than 3 bytes ({len(data)})")
    b0 = data[0]
    if b0 & 0x03:
        raise MalformedPdu("reserved bits set")
    pdu_type = b0 >> 4
    if pdu_type not in PDU_NAMES:
        raise MalformedPdu(f"unknown pdu type {pdu_type}")
    rid = bool(b0 & 0x08)
    uak = bool(b0 & 0x04)
    tid = struct.unpack_from("!H", data, 1)[0]
    if pdu_type == PDU_INVOKE:
        if len(data) < 4:
            raise MalformedPdu("invoke missing class byte")
        tclass = data[3]
        if tclass not in (0, 1, 2):
            raise MalformedPdu(f"invoke class {tclass} invalid")
        return WtpPdu(pdu_type, tid, rid, uak, tclass=tclass, payload=data[4:])
    if pdu_type == PDU_RESULT:
        return WtpPdu(pdu_type, tid, rid, uak, payload=data[3:])
    if pdu_type == PDU_ACK:
        if len(data) - 3 > MAX_OOB:
            raise MalformedPdu("ack oob data too long")
        return WtpPdu(pdu_type, tid, rid, uak, oob=data[3:])
    if len(data) != 4:
        raise MalformedPdu("abort must be exactly 4 bytes")
    return WtpPdu(pdu_type, tid, rid, uak, abort_reason=data[3])


def concat_pdus(chunks: list[bytes]) -> bytes:
    out = bytearray([0x00])
    for chunk in chunks:
        if len(chunk) > 65535:
            raise MalformedConcat(f"pdu of {len(chunk)} bytes too long to concat")
        out += struct.pack("!H", len(chunk)) + chunk
    return bytes(out)


def split_pdus(data: bytes) -> list[bytes]:
    if not data:
        raise MalformedConcat("empty datagram")
    if data[0] != 0x00:
        return [data]
    parts = []
    pos = 1
    while pos < len(data):
        if pos + 2 > len(data):
            raise MalformedConcat("truncated length prefix")
        (length,) = struct.unpack_from("!H", data, pos)
        pos += 2
        if pos + length > len(data):
            raise MalformedConcat("pdu extends past datagram")
        parts.append(data[pos:pos + length])
        pos += length
    return parts


@dataclass
class RetransmissionPolicy:
    retry_interval_ms: int = 300
    max_retrans: int = 8
    ack_delay_ms: int = 100
    linger_ms: int = 3000  # how long completed state answers duplicates

    def validate(self) -> "RetransmissionPolicy":
        for name in ("retry_interval_ms", "max_retrans", "ack_delay_ms",
                     "linger_ms"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        return self


class TraceEvent(NamedTuple):
    direction: str   # "snd" | "rcv"
    pdu_type: str
    tid: int
    rid: bool
    uak: bool
    tclass: int | None


class TransactionHandle:
    """Initiator-side view of one transaction."""

    def __init__(self, provider: "WtpProvider", tid: int, tclass: int):
        self.tid = tid
        self.tclass = tclass
        self.state = NULL
        self.result: bytes | None = None
        self.oob: bytes | None = None
        self.error: Exception | None = None
        self._provider = provider
        self._event = threading.Event()
        self._callbacks: list[Callable[["TransactionHandle"], None]] = []

    @property
    def done(self) -> bool:
        return self._event.is_set()

    def wait(self, timeout: float | None = None) -> "TransactionHandle":
        if not self._event.wait(timeout):
            raise TransactionTimeout(f"tid {self.tid} still pending after wait")
        if self.error is not None:
            raise self.error
        return self

    def add_done_callback(self, fn) -> None:
        run_now = False
        with self._provider._lock:
            if self.done:
                run_now = True
            else:
                self._callbacks.append(fn)
        if run_now:
            fn(self)

    def abort(self, reason: int = ABORT_USER) -> None:
        self._provider._abort_initiator(self, reason)

    def _complete(self, state: str, error: Exception | None = None) -> None:
        self.state = state
        self.error = error
        self._event.set()
        callbacks, self._callbacks = self._callbacks, []
        for fn in callbacks:
            fn(self)


class Invocation:
    """Responder-side indication of a received Invoke; delivered once."""

    def __init__(self, provider: "WtpProvider", src, tid: int, tclass: int,
                 payload: bytes, uak: bool):
        self._provider = provider
        self.src = src
        self.tid = tid
        self.tclass = tclass
        self.payload = payload
        self.uak = uak

    def respond(self, payload: bytes) -> None:
        self._provider.respond(self.src, self.tid, payload)

    def ack(self, oob: bytes = b"") -> None:
        self._provider.user_ack(self.src, self.tid, oob)

    def abort(self, reason: int = ABORT_USER) -> None:
        self._provider._abort_responder(self.src, self.tid, reason)


class _InitiatorTxn:
    __slots__ = ("handle", "dst", "payload", "uak", "retransmits", "timer",
                 "acked", "cleanup")

    def __init__(self, handle, dst, payload, uak):
        self.handle = handle
        self.dst = dst
        self.payload = payload
        self.uak = uak
        self.retransmits = 0
        self.timer = None
        self.acked = False        # standalone Ack seen (class 2)
        self.cleanup = None


class _ResponderTxn:
    __slots__ = ("src", "tid", "tclass", "uak", "state", "ack_timer",
                 "result_payload", "result_timer", "retransmits",
                 "acked_standalone", "last_oob", "cleanup")

    def __init__(self, src, tid, tclass, uak):
        self.src = src
        self.tid = tid
        self.tclass = tclass
        self.uak = uak
        self.state = INVOKE_RCVD
        self.ack_timer = None
        self.result_payload = None
        self.result_timer = None
        self.retransmits = 0
        self.acked_standalone = False
        self.last_oob = b""
        self.cleanup = None


class WtpProvider:
    """Event-driven transaction machine over one datagram transport.

    Datagram arrivals, timer expirations and user calls are serialized by
    one re-entrant lock; distinct tids progress concurrently.
    """

    def __init__(self, transport, clock, policy: RetransmissionPolicy | None = None,
                 trace: Callable[[TraceEvent], None] | None = None):
        self._transport = transport
        self._clock = clock
        self.policy = (policy or RetransmissionPolicy()).validate()
        self.trace = trace
        self._lock = threading.RLock()
        self._next_tid = 1
        self._initiator: dict[int, _InitiatorTxn] = {}
        self._responder: dict[tuple, _ResponderTxn] = {}
        self.on_invoke: Callable[[Invocation], None] | None = None
        self.on_abort = None  # optional: fn(src, tid, reason)
        self.malformed_count = 0
        self._closed = False
        transport.set_receiver(self._on_datagram)

    # --- helpers ----------------------------------------------------------

    def _emit(self, direction: str, pdu: WtpPdu) -> None:
        if self.trace is not None:
            self.trace(TraceEvent(direction, PDU_NAMES[pdu.pdu_type], pdu.tid,
                                  pdu.rid, pdu.uak, pdu.tclass))

    def _send(self, dst, pdu: WtpPdu) -> None:
        self._transport.send(dst, encode_pdu(pdu))
        self._emit("snd", pdu)

    def _alloc_tid(self) -> int:
        for _ in range(65535):
            tid = self._next_tid
            self._next_tid = self._next_tid % 65535 + 1
            if tid not in self._initiator:
                return tid
        raise WtpError("no free tids")

    def _seconds(self, ms: int) -> float:
        return ms / 1000.0

    def _schedule_cleanup_initiator(self, txn: _InitiatorTxn) -> None:
        txn.cleanup = self._clock.call_later(
            self._seconds(self.policy.linger_ms),
            self._initiator.pop, txn.handle.tid, None)

    def _schedule_cleanup_responder(self, txn: _ResponderTxn) -> None:
        txn.cleanup = self._clock.call_later(
            self._seconds(self.policy.linger_ms),
            self._responder.pop, (txn.src, txn.tid), None)

    # --- initiator API ------------------------------------------------------

    def invoke(self, dst, tclass: int, payload: bytes, uak: bool = False) -> TransactionHandle:
        if tclass not in (0, 1, 2):
            raise ValueError(f"class must be 0, 1 or 2, got {tclass}")
        if len(payload) + 4 > self._transport.max_payload:
            raise OversizePayload(
                f"invoke payload {len(payload)} exceeds transport budget")
        with self._lock:
            if self._closed:
                raise WtpError("provider closed")
            tid = self._alloc_tid()
            handle = TransactionHandle(self, tid, tclass)
            pdu = WtpPdu(PDU_INVOKE, tid, uak=uak, tclass=tclass, payload=payload)
            if tclass == 0:
                self._send(dst, pdu)
                handle._complete(DONE)
                return handle
            txn = _InitiatorTxn(handle, dst, payload, uak)
            self._initiator[tid] = txn
            handle.state = INVOKE_SENT
            self._send(dst, pdu)
            txn.timer = self._clock.call_later(
                self._seconds(self.policy.retry_interval_ms),
                self._on_invoke_timer, tid)
            return handle

    def _on_invoke_timer(self, tid: int) -> None:
        with self._lock:
            txn = self._initiator.get(tid)
            if txn is None or txn.handle.state != INVOKE_SENT or txn.acked:
                return
            if txn.retransmits >= self.policy.max_retrans:
                txn.handle._complete(
                    ABORTED, TransactionTimeout(
                        f"tid {tid}: {txn.retransmits} retransmissions exhausted"))
                self._schedule_cleanup_initiator(txn)
                return
            txn.retransmits += 1
            self._send(txn.dst, WtpPdu(PDU_INVOKE, tid, rid=True, uak=txn.uak,
                                       tclass=txn.handle.tclass,
                                       payload=txn.payload))
            txn.timer = self._clock.call_later(
                self._seconds(self.policy.retry_interval_ms),
                self._on_invoke_timer, tid)

    def _abort_initiator(self, handle: TransactionHandle, reason: int) -> None:
        with self._lock:
            if handle.done:
                raise AlreadyCompleted(f"tid {handle.tid} already completed")
            txn = self._initiator.get(handle.tid)
            if txn is None:
                raise UnknownTid(f"tid {handle.tid}")
            if txn.timer:
                txn.timer.cancel()
            self._send(txn.dst, WtpPdu(PDU_ABORT, handle.tid, abort_reason=reason))
            handle._complete(ABORTED, Aborted(reason))
            self._schedule_cleanup_initiator(txn)

    # --- responder API ------------------------------------------------------

    def respond(self, src, tid: int, payload: bytes) -> None:
        if len(payload) + 3 > self._transport.max_payload:
            raise OversizePayload(
                f"result payload {len(payload)} exceeds transport budget")
        with self._lock:
            txn = self._responder.get((src, tid))
            if txn is None:
                raise UnknownTid(f"tid {tid} from {src}")
            if txn.tclass != 2:
                raise WrongClass(f"tid {tid} is class {txn.tclass}, result needs class 2")
            if txn.state not in (INVOKE_RCVD, WAIT_USER_ACK):
                raise WrongState(f"tid {tid} in state {txn.state}")
            if txn.ack_timer:
                txn.ack_timer.cancel()
            txn.result_payload = payload
            txn.state = RESULT_SENT
            self._send(src, WtpPdu(PDU_RESULT, tid, payload=payload))
            txn.result_timer = self._clock.call_later(
                self._seconds(self.policy.retry_interval_ms),
                self._on_result_timer, src, tid)

    def _on_result_timer(self, src, tid: int) -> None:
        with self._lock:
            txn = self._responder.get((src, tid))
            if txn is None or txn.state != RESULT_SENT:
                return
            if txn.retransmits >= self.policy.max_retrans:
                txn.state = ABORTED
                self._schedule_cleanup_responder(txn)
                return
            txn.retransmits += 1
            self._send(src, WtpPdu(PDU_RESULT, tid, rid=True,
                                   payload=txn.result_payload))
            txn.result_timer = self._clock.call_later(
                self._seconds(self.policy.retry_interval_ms),
                self._on_result_timer, src, tid)

    def user_ack(self, src, tid: int, oob: bytes = b"") -> None:
        if len(oob) > MAX_OOB:
            raise ValueError(f"oob data limited to {MAX_OOB} bytes")
        with self._lock:
            txn = self._responder.get((src, tid))
            if txn is None:
                raise UnknownTid(f"tid {tid} from {src}")
            if not txn.uak:
                raise UserAckNotRequested(f"tid {tid} did not request user ack")
            if txn.state != WAIT_USER_ACK:
                raise WrongState(f"tid {tid} in state {txn.state}")
            txn.last_oob = oob
            txn.acked_standalone = True
            self._send(src, WtpPdu(PDU_ACK, tid, oob=oob))
            if txn.tclass == 1:
                txn.state = DONE
                self._schedule_cleanup_responder(txn)
            else:
                txn.state = INVOKE_RCVD  # awaiting respond()

    def _abort_responder(self, src, tid: int, reason: int) -> None:
        with self._lock:
            txn = self._responder.get((src, tid))
            if txn is None:
                raise UnknownTid(f"tid {tid} from {src}")
            if txn.state in (DONE, ABORTED):
                raise AlreadyCompleted(f"tid {tid} already completed")
            for timer in (txn.ack_timer, txn.result_timer):
                if timer:
                    timer.cancel()
            self._send(src, WtpPdu(PDU_ABORT, tid, abort_reason=reason))
            txn.state = ABORTED
            self._schedule_cleanup_responder(txn)

    def _on_ack_delay(self, src, tid: int) -> None:
        with self._lock:
            txn = self._responder.get((src, tid))
            if txn is None or txn.state != INVOKE_RCVD or txn.acked_standalone:
                return
            txn.acked_standalone = True
            self._send(src, WtpPdu(PDU_ACK, tid))

    # --- datagram dispatch --------------------------------------------------

    def _on_datagram(self, src, data: bytes) -> None:
        with self._lock:
            if self._closed:
                return
            try:
                parts = split_pdus(data)
            except MalformedConcat:
                self.malformed_count += 1
                return
            for part in parts:
                try:
                    pdu = decode_pdu(part)
                except MalformedPdu:
                    self.malformed_count += 1
                    continue
                self._emit("rcv", pdu)
                self._dispatch(src, pdu)

    def _dispatch(self, src, pdu: WtpPdu) -> None:
        if pdu.pdu_type == PDU_INVOKE:
            self._on_invoke_pdu(src, pdu)
            return
        itxn = self._initiator.get(pdu.tid)
        if itxn is not None and itxn.dst == src:
            self._on_initiator_pdu(itxn, pdu)
            return
        rtxn = self._responder.get((src, pdu.tid))
        if rtxn is not None:
            self._on_responder_pdu(rtxn, pdu)
        # else: stale PDU for a forgotten transaction; drop silently

    def _on_initiator_pdu(self, txn: _InitiatorTxn, pdu: WtpPdu) -> None:
        handle = txn.handle
        if pdu.pdu_type == PDU_ACK:
            if handle.state != INVOKE_SENT:
                return
            if pdu.oob:
                handle.oob = pdu.oob
            if txn.timer:
                txn.timer.cancel()
            if handle.tclass == 1:
                handle._complete(DONE)
                self._schedule_cleanup_initiator(txn)
            else:
                txn.acked = True
        elif pdu.pdu_type == PDU_RESULT:
            if handle.tclass != 2:
                return
            if handle.state == INVOKE_SENT:
                if txn.timer:
                    txn.timer.cancel()
                handle.state = RESULT_RCVD
                handle.result = pdu.payload
                self._send(txn.dst, WtpPdu(PDU_ACK, handle.tid))
                handle._complete(DONE)
                self._schedule_cleanup_initiator(txn)
            elif handle.state == DONE:
                # duplicate Result: our Ack was lost, repeat it
                self._send(txn.dst, WtpPdu(PDU_ACK, handle.tid, rid=True))
        elif pdu.pdu_type == PDU_ABORT:
            if handle.done:
                return
            if txn.timer:
                txn.timer.cancel()
            handle._complete(ABORTED, Aborted(pdu.abort_reason))
            self._schedule_cleanup_initiator(txn)

    def _on_invoke_pdu(self, src, pdu: WtpPdu) -> None:
        key = (src, pdu.tid)
        txn = self._responder.get(key)
        if txn is not None:
            self._on_duplicate_invoke(txn)
            return
        txn = _ResponderTxn(src, pdu.tid, pdu.tclass, pdu.uak)
        self._responder[key] = txn
        if pdu.tclass == 0:
            txn.state = DONE
            self._schedule_cleanup_responder(txn)
        elif pdu.uak:
            txn.state = WAIT_USER_ACK
        elif pdu.tclass == 1:
            txn.acked_standalone = True
            txn.state = DONE
            self._send(src, WtpPdu(PDU_ACK, pdu.tid))
            self._schedule_cleanup_responder(txn)
        else:  # class 2, provider-acknowledged
            txn.ack_timer = self._clock.call_later(
                self._seconds(self.policy.ack_delay_ms),
                self._on_ack_delay, src, pdu.tid)
        if self.on_invoke is not None:
            self.on_invoke(Invocation(self, src, pdu.tid, pdu.tclass,
                                      pdu.payload, pdu.uak))

    def _on_duplicate_invoke(self, txn: _ResponderTxn) -> None:
        # never a second indication; re-trigger whatever answer we last gave
        if txn.state == RESULT_SENT:
            self._send(txn.src, WtpPdu(PDU_RESULT, txn.tid, rid=True,
                                       payload=txn.result_payload))
        elif txn.acked_standalone and txn.state in (INVOKE_RCVD, DONE):
            self._send(txn.src, WtpPdu(PDU_ACK, txn.tid, rid=True,
                                       oob=txn.last_oob))

    def _on_responder_pdu(self, txn: _ResponderTxn, pdu: WtpPdu) -> None:
        if pdu.pdu_type == PDU_ACK:
            if txn.state == RESULT_SENT:
                if txn.result_timer:
                    txn.result_timer.cancel()
                txn.state = DONE
                self._schedule_cleanup_responder(txn)
        elif pdu.pdu_type == PDU_ABORT:
            if txn.state in (DONE, ABORTED):
                return
            for timer in (txn.ack_timer, txn.result_timer):
                if timer:
                    timer.cancel()
            txn.state = ABORTED
            self._schedule_cleanup_responder(txn)
            if self.on_abort is not None:
                self.on_abort(txn.src, txn.tid, pdu.abort_reason)
        # Invoke handled earlier; Result to a responder is nonsense, drop

    def close(self) -> None:
        with self._lock:
            self._closed = True
            for txn in self._initiator.values():
                for timer in (txn.timer, txn.cleanup):
                    if timer:
                        timer.cancel()
            for txn in self._responder.values():
                for timer in (txn.ack_timer, txn.result_timer, txn.cleanup):
                    if timer:
                        timer.cancel()
            self._initiator.clear()
            self._responder.clear()

"""Timer scheduling: ordering, cancellation, both clock implementations."""

import threading

from wapstack.clock import RealClock, VirtualClock


def test_virtual_clock_fires_in_deadline_order():
    clock = VirtualClock()
    out = []
    clock.call_later(0.2, out.append, "b")
    clock.call_later(0.1, out.append, "a")
    clock.call_later(0.3, out.append, "c")
    clock.advance(0.3)
    assert out == ["a", "b", "c"]
    assert clock.now() == 0.3


def test_virtual_clock_same_instant_fires_in_scheduling_order():
    clock = VirtualClock()
    out = []
    for name in "abcd":
        clock.call_later(0.1, out.append, name)
    clock.advance(0.1)
    assert out == ["a", "b", "c", "d"]


def test_virtual_clock_cancel():
    clock = VirtualClock()
    out = []
    handle = clock.call_later(0.1, out.append, "x")
    clock.call_later(0.1, out.append, "y")
    handle.cancel()
    clock.advance(1.0)
    assert out == ["y"]


def test_virtual_clock_callback_can_reschedule():
    clock = VirtualClock()
    out = []

    def tick():
        out.append(clock.now())
        if len(out) < 3:
            clock.call_later(0.5, tick)

    clock.call_later(0.5, tick)
    clock.advance(2.0)
    assert out == [0.5, 1.0, 1.5]


def test_virtual_clock_run_until_idle_and_pending():
    clock = VirtualClock()
    out = []
    clock.call_later(1.0, out.append, 1)
    clock.call_later(2.0, out.append, 2)
    assert clock.pending() == 2
    clock.run_until_idle()
    assert out == [1, 2]
    assert clock.pending() == 0


def test_real_clock_fires_and_orders():
    clock = RealClock()
    try:
        out = []
        done = threading.Event()
        clock.call_later(0.01, out.append, "a")
        clock.call_later(0.03, lambda: (out.append("b"), done.set()))
        assert done.wait(2.0)
        assert out == ["a", "b"]
    finally:
        clock.close()


def test_real_clock_cancel_and_close():
    clock = RealClock()
    fired = threading.Event()
    handle = clock.call_later(0.05, fired.set)
    handle.cancel()
    assert not fired.wait(0.2)
    clock.close()
    try:
        clock.call_later(0.01, fired.set)
        raised = False
    except RuntimeError:
        raised = True
    assert raised


def test_real_clock_survives_callback_exception():
    clock = RealClock()
    try:
        done = threading.Event()
        clock.call_later(0.0, lambda: 1 / 0)
        clock.call_later(0.02, done.set)
        assert done.wait(2.0)
    finally:
        clock.close()

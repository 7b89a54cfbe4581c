"""Desk-scale WAP protocol stack.

Layers, bottom to top:

- ``bearer``    : in-process impaired datagram channel and a UDP adapter
- ``wdp``       : uniform datagram service with port multiplexing
- ``wtls``      : optional record security (integrity, privacy, auth, replay)
- ``wtp``       : transaction layer (classes 0/1/2, retransmission, acks)
- ``wsp``       : session layer (compact headers, suspend/resume, methods)
- ``wml``       : WML-subset parser and tokenized binary codec
- ``gateway``   : wireless-stack-to-HTTP proxy with content encoding
- ``useragent`` : micro-browser client (fetch, render, navigate)

Each layer is independently usable: every module exposes its own wire codec
and service objects, and upper layers depend only on the small transport
duck type (``send(dst, payload)`` / ``set_receiver(cb)`` / ``max_payload``).
"""

__version__ = "0.1.0"

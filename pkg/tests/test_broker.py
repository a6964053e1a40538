"""TCP pub-sub broker: ordering, fan-out, and discard semantics."""

from __future__ import annotations

import socket
import time

import pytest

from cv2x_bench.broker import (Broker, BrokerClient, TransportError,
                               recv_envelope, send_envelope)


def test_envelope_round_trip():
    a, b = socket.socketpair()
    try:
        send_envelope(a, "PUB topic", b"\x01\x02frame")
        command, frame = recv_envelope(b)
        assert command == "PUB topic"
        assert frame == b"\x01\x02frame"
        send_envelope(a, "SUB topic")
        assert recv_envelope(b) == ("SUB topic", b"")
    finally:
        a.close()
        b.close()


def test_envelope_requires_command_line():
    a, b = socket.socketpair()
    try:
        a.sendall((3).to_bytes(4, "big") + b"abc")
        with pytest.raises(TransportError):
            recv_envelope(b)
    finally:
        a.close()
        b.close()


def test_single_subscriber_receives_in_order():
    with Broker() as broker:
        with BrokerClient(broker.host, broker.port) as sub, \
                BrokerClient(broker.host, broker.port) as pub:
            sub.subscribe("UL")
            time.sleep(0.1)
            for i in range(100):
                pub.publish("UL", bytes([i]))
            got = [sub.recv_message(timeout=2.0) for _ in range(100)]
            assert all(m is not None for m in got)
            assert [m[1][0] for m in got] == list(range(100))
            assert all(m[0] == "UL" for m in got)
            assert sub.frames_received == 100
            assert pub.frames_published == 100


def test_no_subscriber_frames_discarded():
    with Broker() as broker:
        with BrokerClient(broker.host, broker.port) as pub:
            for _ in range(5):
                pub.publish("nowhere", b"x")
            deadline = time.monotonic() + 2.0
            while broker.frames_discarded < 5 and time.monotonic() < deadline:
                time.sleep(0.01)
            assert broker.frames_discarded == 5
            assert broker.frames_relayed == 0


def test_two_subscribers_both_receive_everything():
    with Broker() as broker:
        with BrokerClient(broker.host, broker.port) as sub_a, \
                BrokerClient(broker.host, broker.port) as sub_b, \
                BrokerClient(broker.host, broker.port) as pub:
            sub_a.subscribe("DL")
            sub_b.subscribe("DL")
            time.sleep(0.1)
            for i in range(20):
                pub.publish("DL", i.to_bytes(2, "big"))
            for sub in (sub_a, sub_b):
                frames = [sub.recv_message(timeout=2.0) for _ in range(20)]
                assert [int.from_bytes(f[1], "big") for f in frames] == list(range(20))


def test_subscriber_only_gets_its_topic():
    with Broker() as broker:
        with BrokerClient(broker.host, broker.port) as sub, \
                BrokerClient(broker.host, broker.port) as pub:
            sub.subscribe("UL")
            time.sleep(0.1)
            pub.publish("DL", b"wrong")
            pub.publish("UL", b"right")
            topic, frame = sub.recv_message(timeout=2.0)
            assert (topic, frame) == ("UL", b"right")
            assert sub.recv_message(timeout=0.2) is None

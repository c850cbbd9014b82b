import io
import socket
import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedirr import protocol
from fedirr.errors import (CleanClose, ConnectionClosed, EncodeError, FrameTooLarge,
                           MalformedPayload, SchemaViolation, UnknownType)
from fedirr.protocol import (CfgEcho, ClientUpdateMsg, Error, GlobalModelMsg, Heartbeat,
                             Register, RegisterAck, RoundStart, decode, encode, frame_read,
                             frame_write)

finite = st.floats(allow_nan=False, allow_infinity=False)
weights = st.lists(finite, min_size=1, max_size=64).map(tuple)
ids = st.text(min_size=0, max_size=20)
counts = st.integers(0, 2**40)

messages = st.one_of(
    st.builds(Register, ids, counts),
    st.builds(RegisterAck, st.booleans(), counts),
    st.builds(RoundStart, counts, weights, st.builds(CfgEcho, st.integers(1, 1000), finite)),
    st.builds(ClientUpdateMsg, ids, counts, weights, counts, finite),
    st.builds(GlobalModelMsg, counts, weights, st.booleans()),
    st.builds(Heartbeat, ids),
    st.builds(Error, ids, st.text(max_size=50)),
)


class Chunked:
    """Reader that hands back at most one segment per call."""

    def __init__(self, data: bytes, cuts):
        self.data = data
        self.pos = 0
        self.bounds = sorted(set(cuts) | {len(data)})

    def read(self, n):
        nxt = next(b for b in self.bounds if b > self.pos) if self.pos < len(self.data) else self.pos
        out = self.data[self.pos:min(self.pos + n, nxt)]
        self.pos += len(out)
        return out


class TestEncode:
    def test_heartbeat_bytes(self):
        assert encode(Heartbeat("n1")) == b'{"type":"heartbeat","client_id":"n1"}'

    def test_update_bytes(self):
        msg = ClientUpdateMsg("node-01", 3, (0.1, -2.0, 1e-300), 12, 0.5)
        assert encode(msg) == (b'{"type":"client_update","client_id":"node-01","round":3,'
                               b'"weights":[0.1,-2.0,1e-300],"sample_count":12,"local_loss":0.5}')

    def test_point_one_exact(self):
        msg = ClientUpdateMsg("a", 0, (0.1,), 1, 0.1)
        back = decode(encode(msg))
        assert back.weights[0] == 0.1 and back == msg

    @settings(max_examples=1000, deadline=None)
    @given(messages)
    def test_round_trip(self, msg):
        assert decode(encode(msg)) == msg

    def test_nan_rejected(self):
        with pytest.raises(EncodeError):
            encode(GlobalModelMsg(1, (float("nan"),), False))

    def test_not_a_message(self):
        with pytest.raises(EncodeError):
            encode({"type": "heartbeat"})


class TestDecode:
    def test_unknown_type(self):
        with pytest.raises(UnknownType):
            decode(b'{"type":"bogus"}')

    def test_truncated(self):
        with pytest.raises(MalformedPayload):
            decode(b'{"type":"heartbeat","client_')

    def test_not_utf8(self):
        with pytest.raises(MalformedPayload):
            decode(b'\xff\xfe')

    def test_nan_literal(self):
        with pytest.raises(MalformedPayload):
            decode(b'{"type":"global_model","round":1,"weights":[NaN],"converged":false}')

    @pytest.mark.parametrize("payload", [
        b'{"type":"heartbeat"}',
        b'{"type":"register","client_id":"a","feature_dim":-1}',
        b'{"type":"register","client_id":"a","feature_dim":true}',
        b'{"type":"global_model","round":1,"weights":["x"],"converged":false}',
        b'{"type":"round_start","round":0,"global_weights":[0],"cfg_echo":{"local_epochs":1}}',
        b'[1,2]',
        b'{"no_type":1}',
    ])
    def test_schema(self, payload):
        with pytest.raises(SchemaViolation):
            decode(payload)

    def test_unknown_fields_ignored(self):
        assert decode(b'{"type":"heartbeat","client_id":"n1","v":2}') == Heartbeat("n1")


class TestFraming:
    def test_memory_round_trip(self):
        buf = io.BytesIO()
        frame_write(buf, b"hello")
        buf.seek(0)
        assert frame_read(buf) == b"hello"

    def test_two_frames_in_order(self):
        buf = io.BytesIO()
        frame_write(buf, b"one")
        frame_write(buf, b"")
        buf.seek(0)
        assert frame_read(buf) == b"one"
        assert frame_read(buf) == b""

    def test_header_layout(self):
        buf = io.BytesIO()
        frame_write(buf, b"abc")
        assert buf.getvalue() == b"\x00\x00\x00\x03abc"

    def test_oversized_header(self):
        class NoBody(io.BytesIO):
            def read(self, n=-1):
                if self.tell() >= 4:
                    raise AssertionError("body must not be read")
                return super().read(n)
        with pytest.raises(FrameTooLarge):
            frame_read(NoBody(b"\x00\x20\x00\x00" + b"x" * 16))

    def test_write_oversized(self):
        with pytest.raises(FrameTooLarge):
            frame_write(io.BytesIO(), b"x" * (protocol.MAX_FRAME + 1))

    def test_clean_close(self):
        with pytest.raises(CleanClose):
            frame_read(io.BytesIO(b""))

    @pytest.mark.parametrize("data", [b"\x00\x00", b"\x00\x00\x00\x05ab"])
    def test_partial(self, data):
        with pytest.raises(ConnectionClosed) as info:
            frame_read(io.BytesIO(data))
        assert not isinstance(info.value, CleanClose)

    def test_segmentation_invariance(self):
        payloads = [encode(Heartbeat("n1")), b"", encode(GlobalModelMsg(2, (0.5, -1.0), True))]
        buf = io.BytesIO()
        for p in payloads:
            frame_write(buf, p)
        stream = buf.getvalue()
        for cut in range(len(stream) + 1):
            r = Chunked(stream, [cut])
            assert [frame_read(r) for _ in payloads] == payloads

    @settings(max_examples=200)
    @given(st.lists(st.binary(max_size=40), min_size=1, max_size=4),
           st.lists(st.integers(0, 200), max_size=10))
    def test_arbitrary_segmentation(self, payloads, cuts):
        buf = io.BytesIO()
        for p in payloads:
            frame_write(buf, p)
        r = Chunked(buf.getvalue(), cuts)
        assert [frame_read(r) for _ in payloads] == payloads

    def test_socket_pair(self):
        a, b = socket.socketpair()
        with a, b:
            protocol.send_message(a, Register("n1", 4))
            protocol.send_message(a, Heartbeat("n1"))
            assert protocol.recv_message(b) == Register("n1", 4)
            assert protocol.recv_message(b) == Heartbeat("n1")
            a.shutdown(socket.SHUT_WR)
            with pytest.raises(CleanClose):
                protocol.recv_message(b)

    def test_max_frame_constant(self):
        assert protocol.MAX_FRAME == 1 << 20
        assert struct.unpack("!I", b"\x00\x20\x00\x00")[0] == 2 * protocol.MAX_FRAME

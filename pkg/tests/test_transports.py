import socket
import struct
import threading
import time

import numpy as np
import pytest

from radfarm.farm import FarmConfig
from radfarm.protocol import (
    Bye,
    ClientHello,
    ENC_RAW,
    FrameData,
    PoseUpdate,
    ServerHello,
    StreamDecoder,
    decode_message,
    encode_message,
    frame_stream,
)
from radfarm.scenes import orbit_camera
from radfarm.serve import FarmServer
from radfarm.transports import WallClock, WsDecoder, websocket_accept_key, _ws_encode


def hello_msg(width=24, fps=30.0):
    fx = width / (2 * np.tan(np.radians(30)))
    return ClientHello(width, width, fx, fx, width / 2, width / 2, fps)


@pytest.fixture
def live_server(toy_asset):
    config = FarmConfig(heavy_workers=1, light_workers=1, tick_s=0.005,
                        tile_size=24, encoding=ENC_RAW, stats_every_ticks=0)
    server = FarmServer({"toy": toy_asset}, config, WallClock())
    port = server.listen("127.0.0.1", 0)
    thread = threading.Thread(target=server.run_for, args=(6.0,), daemon=True)
    thread.start()
    yield "127.0.0.1", port, server
    server.shutdown()


class TestTcpPath:
    def test_hello_pose_frame_round_trip(self, live_server):
        host, port, _server = live_server
        sock = socket.create_connection((host, port), timeout=5)
        sock.sendall(frame_stream(encode_message(hello_msg())))
        decoder = StreamDecoder()
        sock.settimeout(5)

        def read_messages(deadline_s=5.0):
            msgs = []
            end = time.time() + deadline_s
            while time.time() < end and not msgs:
                try:
                    data = sock.recv(65536)
                except socket.timeout:
                    break
                if not data:
                    break
                msgs.extend(decode_message(p) for p in decoder.feed(data))
            return msgs

        msgs = read_messages()
        assert msgs and isinstance(msgs[0], ServerHello)
        assert msgs[0].assets == ["toy"]

        pose = orbit_camera(0.4, 0.3, radius=2.0, size=24).pose
        for seq in range(1, 6):
            sock.sendall(frame_stream(encode_message(PoseUpdate(seq=seq, pose=pose))))
            time.sleep(0.02)

        got_frame = None
        end = time.time() + 5.0
        while time.time() < end and got_frame is None:
            try:
                data = sock.recv(65536)
            except socket.timeout:
                break
            if not data:
                break
            for payload in decoder.feed(data):
                msg = decode_message(payload)
                if isinstance(msg, FrameData):
                    got_frame = msg
        assert got_frame is not None
        assert got_frame.width == 24
        sock.sendall(frame_stream(encode_message(Bye())))
        sock.close()

    def test_pose_cadence_ingestion(self, live_server):
        # 20 ms cadence for 1 s: >= 45 accepted, zero drops at idle load
        host, port, server = live_server
        sock = socket.create_connection((host, port), timeout=5)
        sock.sendall(frame_stream(encode_message(hello_msg())))
        time.sleep(0.1)
        pose = orbit_camera(0.1, 0.2, radius=2.0, size=24).pose
        for seq in range(1, 51):
            sock.sendall(frame_stream(encode_message(PoseUpdate(seq=seq, pose=pose))))
            time.sleep(0.020)
        time.sleep(0.2)
        sessions = list(server.master.sessions.values())
        assert sessions, "session was not registered"
        assert sessions[0].poses_accepted >= 45
        assert sessions[0].pose_drops == 0
        sock.close()


class TestWebSocketFraming:
    def test_accept_key_rfc_example(self):
        # the handshake example key from the protocol RFC
        assert (
            websocket_accept_key("dGhlIHNhbXBsZSBub25jZQ==")
            == "s3pPLMBiTxaQ9kYGzzhZRbK+xOo="
        )

    def test_masked_frame_round_trip(self):
        payload = encode_message(hello_msg())
        mask = bytes([1, 2, 3, 4])
        masked = bytes(b ^ mask[i % 4] for i, b in enumerate(payload))
        frame = bytes([0x82, 0x80 | len(payload)]) + mask + masked
        dec = WsDecoder()
        out = dec.feed(frame)
        assert len(out) == 1
        opcode, body = out[0]
        assert opcode == 2
        assert body == payload

    def test_server_frame_has_no_mask(self):
        data = _ws_encode(b"abc")
        assert data[0] == 0x82
        assert data[1] == 3  # no mask bit
        assert data[2:] == b"abc"

    def test_large_frame_lengths(self):
        big = bytes(70000)
        data = _ws_encode(big)
        assert data[1] == 127
        assert struct.unpack(">Q", data[2:10])[0] == 70000
        dec = WsDecoder()
        # client-to-server must be masked per the RFC; emulate a mask of zeros
        masked = bytes([0x82, 0xFF]) + struct.pack(">Q", len(big)) + bytes(4) + big
        out = dec.feed(masked)
        assert out[0][1] == big

    def test_websocket_session_against_live_server(self, live_server):
        host, port, _server = live_server
        sock = socket.create_connection((host, port), timeout=5)
        key = "dGhlIHNhbXBsZSBub25jZQ=="
        sock.sendall(
            (
                f"GET / HTTP/1.1\r\nHost: {host}:{port}\r\n"
                "Upgrade: websocket\r\nConnection: Upgrade\r\n"
                f"Sec-WebSocket-Key: {key}\r\nSec-WebSocket-Version: 13\r\n\r\n"
            ).encode()
        )
        sock.settimeout(5)
        response = sock.recv(4096).decode("latin-1")
        assert "101 Switching Protocols" in response
        assert websocket_accept_key(key) in response

        payload = encode_message(hello_msg())
        mask = bytes([9, 8, 7, 6])
        masked = bytes(b ^ mask[i % 4] for i, b in enumerate(payload))
        sock.sendall(bytes([0x82, 0x80 | len(payload)]) + mask + masked)

        dec = WsDecoder()
        hello_reply = None
        end = time.time() + 5
        while time.time() < end and hello_reply is None:
            try:
                data = sock.recv(65536)
            except socket.timeout:
                break
            if not data:
                break
            for opcode, body in dec.feed(data):
                if opcode == 2:
                    msg = decode_message(body)
                    if isinstance(msg, ServerHello):
                        hello_reply = msg
        assert hello_reply is not None
        assert hello_reply.assets == ["toy"]
        sock.close()

    def test_malformed_bytes_never_perturb_other_sessions(self, live_server):
        """Fuzz isolation: garbage from one connection must not interrupt a
        healthy session's frame stream."""
        host, port, server = live_server
        good = socket.create_connection((host, port), timeout=5)
        good.sendall(frame_stream(encode_message(hello_msg())))
        time.sleep(0.1)
        pose = orbit_camera(0.2, 0.1, radius=2.0, size=24).pose

        rng = np.random.default_rng(0)
        evil = socket.create_connection((host, port), timeout=5)
        decoder = StreamDecoder()
        good.settimeout(0.05)
        frames = 0
        for seq in range(1, 40):
            good.sendall(frame_stream(encode_message(PoseUpdate(seq=seq, pose=pose))))
            # garbage: valid framing with junk payloads, then raw junk bytes;
            # the server is expected to drop the fuzzer (hence OSError here)
            try:
                evil.sendall(frame_stream(bytes(rng.integers(0, 256, 20, dtype=np.uint8))))
                evil.sendall(bytes(rng.integers(0, 256, 64, dtype=np.uint8)))
            except OSError:
                pass
            try:
                data = good.recv(65536)
                for payload in decoder.feed(data):
                    if isinstance(decode_message(payload), FrameData):
                        frames += 1
            except socket.timeout:
                pass
            time.sleep(0.02)
        assert frames >= 3, "healthy session starved by a fuzzing peer"
        good.close()
        evil.close()

    def test_static_file_serving(self, toy_asset, tmp_path):
        (tmp_path / "index.html").write_text("<html>viewer</html>")
        config = FarmConfig(stats_every_ticks=0)
        server = FarmServer({"toy": toy_asset}, config, WallClock())
        port = server.listen("127.0.0.1", 0, static_dir=tmp_path)
        try:
            sock = socket.create_connection(("127.0.0.1", port), timeout=5)
            sock.sendall(b"GET /index.html HTTP/1.1\r\nHost: x\r\n\r\n")
            sock.settimeout(5)
            data = b""
            while b"</html>" not in data:
                chunk = sock.recv(4096)
                if not chunk:
                    break
                data += chunk
            assert b"200 OK" in data
            assert b"<html>viewer</html>" in data
            sock.close()
        finally:
            server.shutdown()

    def test_metrics_endpoint_dumps_json(self, toy_asset):
        import json as jsonmod

        config = FarmConfig(stats_every_ticks=0)
        server = FarmServer({"toy": toy_asset}, config, WallClock())
        port = server.listen("127.0.0.1", 0)
        try:
            sock = socket.create_connection(("127.0.0.1", port), timeout=5)
            sock.sendall(b"GET /metrics HTTP/1.1\r\nHost: x\r\n\r\n")
            sock.settimeout(5)
            data = b""
            while True:
                chunk = sock.recv(4096)
                if not chunk:
                    break
                data += chunk
            head, _, body = data.partition(b"\r\n\r\n")
            assert b"200 OK" in head
            metrics = jsonmod.loads(body)
            assert "frames_delivered" in metrics
            assert metrics["sessions"] == 0
            sock.close()
        finally:
            server.shutdown()

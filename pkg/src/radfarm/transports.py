"""Message transports: in-process loopback for deterministic tests, TCP with
length-prefixed framing for native clients, and a minimal RFC6455 websocket
(plus static-file HTTP) for the browser viewer.  All of them move the same
protocol payloads."""

from __future__ import annotations

import base64
import hashlib
import socket
import struct
import threading
import time
from collections import deque
from pathlib import Path

from .errors import DecodeError, ProtocolError
from .protocol import StreamDecoder, decode_message, encode_message, frame_stream


class Clock:
    def now(self) -> float:
        raise NotImplementedError

    def sleep_until(self, t: float) -> None:
        raise NotImplementedError


class VirtualClock(Clock):
    """Deterministic clock: time advances only when asked to."""

    def __init__(self):
        self._now = 0.0

    def now(self) -> float:
        return self._now

    def sleep_until(self, t: float) -> None:
        self._now = max(self._now, t)


class WallClock(Clock):
    def __init__(self):
        self._start = time.monotonic()

    def now(self) -> float:
        return time.monotonic() - self._start

    def sleep_until(self, t: float) -> None:
        delta = t - self.now()
        if delta > 0:
            time.sleep(delta)


class LoopbackTransport:
    """A directly connected client/server endpoint pair."""

    def __init__(self):
        self._to_client: deque = deque()
        self._to_server: deque = deque()
        self.closed = False

    # server-side surface
    def send_message(self, msg) -> None:
        if not self.closed:
            self._to_client.append(msg)

    def poll_messages(self) -> list:
        out = list(self._to_server)
        self._to_server.clear()
        return out

    # client-side surface
    def client_send(self, msg) -> None:
        if not self.closed:
            self._to_server.append(msg)

    def client_poll(self) -> list:
        out = list(self._to_client)
        self._to_client.clear()
        return out

    def close(self) -> None:
        self.closed = True


class TcpTransport:
    """Server-side view of one connected TCP client."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.sock.setblocking(False)
        self.decoder = StreamDecoder()
        self.closed = False
        self._lock = threading.Lock()

    def send_message(self, msg) -> None:
        if self.closed:
            return
        data = frame_stream(encode_message(msg))
        try:
            with self._lock:
                self.sock.sendall(data)
        except OSError:
            self.close()

    def poll_messages(self) -> list:
        if self.closed:
            return []
        out = []
        try:
            while True:
                chunk = self.sock.recv(65536)
                if not chunk:
                    self.close()
                    break
                for payload in self.decoder.feed(chunk):
                    out.append(decode_message(payload))
        except BlockingIOError:
            pass
        except OSError:
            self.close()
        except DecodeError:
            # protocol violation: drop this client, never the server
            self.close()
        return out

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            try:
                self.sock.close()
            except OSError:
                pass


_WS_GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"


def websocket_accept_key(client_key: str) -> str:
    digest = hashlib.sha1((client_key + _WS_GUID).encode("ascii")).digest()
    return base64.b64encode(digest).decode("ascii")


def _ws_encode(payload: bytes) -> bytes:
    """Server-to-client binary frame (FIN, opcode 2, no mask)."""
    n = len(payload)
    head = bytes([0x82])
    if n < 126:
        head += bytes([n])
    elif n < 65536:
        head += bytes([126]) + struct.pack(">H", n)
    else:
        head += bytes([127]) + struct.pack(">Q", n)
    return head + payload


class WsDecoder:
    """Incremental websocket frame parser (client-to-server, masked)."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes):
        self._buf.extend(data)
        out = []
        while True:
            if len(self._buf) < 2:
                break
            b0, b1 = self._buf[0], self._buf[1]
            opcode = b0 & 0x0F
            masked = b1 & 0x80
            length = b1 & 0x7F
            pos = 2
            if length == 126:
                if len(self._buf) < 4:
                    break
                length = struct.unpack_from(">H", self._buf, 2)[0]
                pos = 4
            elif length == 127:
                if len(self._buf) < 10:
                    break
                length = struct.unpack_from(">Q", self._buf, 2)[0]
                pos = 10
            mask = b""
            if masked:
                if len(self._buf) < pos + 4:
                    break
                mask = bytes(self._buf[pos : pos + 4])
                pos += 4
            if len(self._buf) < pos + length:
                break
            payload = bytes(self._buf[pos : pos + length])
            del self._buf[: pos + length]
            if mask:
                payload = bytes(b ^ mask[i % 4] for i, b in enumerate(payload))
            out.append((opcode, payload))
        return out


class WebSocketTransport:
    """Server-side websocket endpoint carrying protocol payloads as binary
    frames (the stream's 4-byte length prefix is redundant here)."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.sock.setblocking(False)
        self.decoder = WsDecoder()
        self.closed = False
        self._lock = threading.Lock()

    def send_message(self, msg) -> None:
        if self.closed:
            return
        try:
            with self._lock:
                self.sock.sendall(_ws_encode(encode_message(msg)))
        except OSError:
            self.close()

    def poll_messages(self) -> list:
        if self.closed:
            return []
        out = []
        try:
            while True:
                chunk = self.sock.recv(65536)
                if not chunk:
                    self.close()
                    break
                for opcode, payload in self.decoder.feed(chunk):
                    if opcode == 0x8:  # close
                        self.close()
                    elif opcode in (0x1, 0x2):
                        out.append(decode_message(payload))
        except BlockingIOError:
            pass
        except OSError:
            self.close()
        except DecodeError:
            self.close()
        return out

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            try:
                self.sock.close()
            except OSError:
                pass


_MIME = {
    ".html": "text/html; charset=utf-8",
    ".js": "application/javascript",
    ".css": "text/css",
    ".json": "application/json",
    ".png": "image/png",
}


def _http_response(status: str, headers: dict, body: bytes = b"") -> bytes:
    lines = [f"HTTP/1.1 {status}"]
    headers = {"Content-Length": str(len(body)), "Connection": "close", **headers}
    lines += [f"{k}: {v}" for k, v in headers.items()]
    return ("\r\n".join(lines) + "\r\n\r\n").encode("ascii") + body


class ConnectionListener:
    """Accept loop: sniffs each connection for raw binary vs HTTP, upgrades
    websockets, serves static viewer files plus a /metrics JSON dump, and
    hands transports to a sink."""

    def __init__(self, host: str, port: int, on_transport, static_dir=None,
                 metrics_fn=None):
        self.on_transport = on_transport
        self.static_dir = Path(static_dir) if static_dir else None
        self.metrics_fn = metrics_fn
        self.sock = socket.create_server((host, port))
        self.port = self.sock.getsockname()[1]
        self._stop = threading.Event()
        self.thread = threading.Thread(target=self._accept_loop, daemon=True)

    def start(self) -> None:
        self.thread.start()

    def stop(self) -> None:
        self._stop.set()
        try:
            self.sock.close()
        except OSError:
            pass

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _addr = self.sock.accept()
            except OSError:
                return
            threading.Thread(target=self._handle, args=(conn,), daemon=True).start()

    def _handle(self, conn: socket.socket) -> None:
        conn.settimeout(5.0)
        try:
            first = conn.recv(4096, socket.MSG_PEEK)
        except OSError:
            conn.close()
            return
        if first[:4] in (b"GET ", b"HEAD"):
            self._handle_http(conn)
        else:
            self.on_transport(TcpTransport(conn))

    def _handle_http(self, conn: socket.socket) -> None:
        try:
            data = b""
            while b"\r\n\r\n" not in data:
                chunk = conn.recv(4096)
                if not chunk:
                    conn.close()
                    return
                data += chunk
            head = data.split(b"\r\n\r\n", 1)[0].decode("latin-1")
            lines = head.split("\r\n")
            path = lines[0].split(" ")[1]
            headers = {}
            for line in lines[1:]:
                if ":" in line:
                    k, v = line.split(":", 1)
                    headers[k.strip().lower()] = v.strip()
            if headers.get("upgrade", "").lower() == "websocket":
                key = headers.get("sec-websocket-key", "")
                accept = websocket_accept_key(key)
                conn.sendall(
                    (
                        "HTTP/1.1 101 Switching Protocols\r\n"
                        "Upgrade: websocket\r\n"
                        "Connection: Upgrade\r\n"
                        f"Sec-WebSocket-Accept: {accept}\r\n\r\n"
                    ).encode("ascii")
                )
                conn.settimeout(None)
                self.on_transport(WebSocketTransport(conn))
                return
            self._serve_static(conn, path)
        except (OSError, IndexError, ProtocolError):
            conn.close()

    def _serve_static(self, conn: socket.socket, path: str) -> None:
        if path.split("?")[0] == "/metrics" and self.metrics_fn is not None:
            import json

            body = json.dumps(self.metrics_fn(), default=float).encode("utf-8")
            conn.sendall(
                _http_response("200 OK", {"Content-Type": "application/json"}, body)
            )
            conn.close()
            return
        if self.static_dir is None:
            conn.sendall(_http_response("404 Not Found", {}, b"no static dir"))
            conn.close()
            return
        rel = path.split("?")[0].lstrip("/") or "index.html"
        target = (self.static_dir / rel).resolve()
        if not str(target).startswith(str(self.static_dir.resolve())) or not target.is_file():
            conn.sendall(_http_response("404 Not Found", {}, b"not found"))
        else:
            mime = _MIME.get(target.suffix, "application/octet-stream")
            conn.sendall(
                _http_response("200 OK", {"Content-Type": mime}, target.read_bytes())
            )
        conn.close()

"""Binary wire protocol, version 1.

Stream framing: 4-byte little-endian payload length, then the payload.
Payload: 1 version byte, 1 tag byte, tag-specific body (little-endian).
The same payloads travel unchanged over the browser's socket framing, which
delimits messages itself (no length prefix there).

Frame payloads: RAW is rgba8 rows then u16 depth (quantized as
round(min(depth, far)/far * 65534), 65535 = miss); DEFLATE wraps each of the
two blocks in zlib with a u32 length prefix per block.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .core import Frame
from .errors import DecodeError, ProtocolError

VERSION = 1

TAG_CLIENT_HELLO = 1
TAG_SERVER_HELLO = 2
TAG_SESSION_DENIED = 3
TAG_POSE_UPDATE = 4
TAG_FRAME_DATA = 5
TAG_SCENE_EDIT = 6
TAG_STATS = 7
TAG_BYE = 8

ENC_RAW = 0
ENC_DEFLATE = 1

DEPTH_MISS_U16 = 65535


@dataclass
class ClientHello:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    target_fps: float


@dataclass
class ServerHello:
    session_id: int
    assets: list[str]


@dataclass
class SessionDenied:
    retry_after_s: float


@dataclass
class PoseUpdate:
    seq: int
    pose: np.ndarray  # 4x4 row-major camera-to-world


@dataclass
class FrameData:
    pose_seq: int
    frame_index: int
    encoding: int
    width: int
    height: int
    depth_far: float
    rgba: bytes
    depth: bytes


@dataclass
class SceneEdit:
    op: str  # "add" | "remove"
    asset: str
    transform: np.ndarray | None = None


@dataclass
class Stats:
    payload: dict


@dataclass
class Bye:
    pass


def encode_message(msg) -> bytes:
    head = struct.pack("<BB", VERSION, _tag_of(msg))
    if isinstance(msg, ClientHello):
        body = struct.pack(
            "<HHfffff", msg.width, msg.height, msg.fx, msg.fy, msg.cx, msg.cy, msg.target_fps
        )
    elif isinstance(msg, ServerHello):
        body = struct.pack("<IH", msg.session_id, len(msg.assets))
        for name in msg.assets:
            raw = name.encode("utf-8")
            body += struct.pack("<H", len(raw)) + raw
    elif isinstance(msg, SessionDenied):
        body = struct.pack("<f", msg.retry_after_s)
    elif isinstance(msg, PoseUpdate):
        body = struct.pack("<I", msg.seq) + np.asarray(
            msg.pose, dtype="<f4"
        ).reshape(16).tobytes()
    elif isinstance(msg, FrameData):
        body = struct.pack(
            "<IIBHHf",
            msg.pose_seq,
            msg.frame_index,
            msg.encoding,
            msg.width,
            msg.height,
            msg.depth_far,
        )
        if msg.encoding == ENC_DEFLATE:
            body += struct.pack("<I", len(msg.rgba)) + msg.rgba
            body += struct.pack("<I", len(msg.depth)) + msg.depth
        else:
            body += msg.rgba + msg.depth
    elif isinstance(msg, SceneEdit):
        op = 0 if msg.op == "add" else 1
        raw = msg.asset.encode("utf-8")
        body = struct.pack("<BH", op, len(raw)) + raw
        if msg.op == "add":
            t = msg.transform if msg.transform is not None else np.eye(4)
            body += np.asarray(t, dtype="<f4").reshape(16).tobytes()
    elif isinstance(msg, Stats):
        raw = json.dumps(msg.payload).encode("utf-8")
        body = struct.pack("<I", len(raw)) + raw
    elif isinstance(msg, Bye):
        body = b""
    else:
        raise ProtocolError(f"cannot encode {type(msg).__name__}")
    return head + body


def _tag_of(msg) -> int:
    return {
        ClientHello: TAG_CLIENT_HELLO,
        ServerHello: TAG_SERVER_HELLO,
        SessionDenied: TAG_SESSION_DENIED,
        PoseUpdate: TAG_POSE_UPDATE,
        FrameData: TAG_FRAME_DATA,
        SceneEdit: TAG_SCENE_EDIT,
        Stats: TAG_STATS,
        Bye: TAG_BYE,
    }[type(msg)]


def decode_message(payload: bytes):
    if len(payload) < 2:
        raise DecodeError("payload shorter than header", 0)
    version, tag = payload[0], payload[1]
    if version != VERSION:
        raise DecodeError(f"unsupported protocol version {version}", 0)
    body = payload[2:]
    try:
        if tag == TAG_CLIENT_HELLO:
            w, h, fx, fy, cx, cy, fps = struct.unpack_from("<HHfffff", body, 0)
            return ClientHello(w, h, fx, fy, cx, cy, fps)
        if tag == TAG_SERVER_HELLO:
            sid, n = struct.unpack_from("<IH", body, 0)
            pos = 6
            assets = []
            for _ in range(n):
                (ln,) = struct.unpack_from("<H", body, pos)
                pos += 2
                assets.append(body[pos : pos + ln].decode("utf-8"))
                pos += ln
            return ServerHello(sid, assets)
        if tag == TAG_SESSION_DENIED:
            return SessionDenied(struct.unpack_from("<f", body, 0)[0])
        if tag == TAG_POSE_UPDATE:
            (seq,) = struct.unpack_from("<I", body, 0)
            pose = np.frombuffer(body, dtype="<f4", count=16, offset=4).reshape(4, 4)
            return PoseUpdate(seq, pose.astype(np.float64))
        if tag == TAG_FRAME_DATA:
            seq, idx, enc, w, h, far = struct.unpack_from("<IIBHHf", body, 0)
            pos = 17
            if enc == ENC_RAW:
                n_rgba = w * h * 4
                n_depth = w * h * 2
                rgba = body[pos : pos + n_rgba]
                depth = body[pos + n_rgba : pos + n_rgba + n_depth]
                if len(rgba) != n_rgba or len(depth) != n_depth:
                    raise DecodeError("frame payload truncated", 2 + pos)
            elif enc == ENC_DEFLATE:
                (ln,) = struct.unpack_from("<I", body, pos)
                pos += 4
                rgba = body[pos : pos + ln]
                if len(rgba) != ln:
                    raise DecodeError("compressed rgba truncated", 2 + pos)
                pos += ln
                (ln2,) = struct.unpack_from("<I", body, pos)
                pos += 4
                depth = body[pos : pos + ln2]
                if len(depth) != ln2:
                    raise DecodeError("compressed depth truncated", 2 + pos)
            else:
                raise DecodeError(f"unknown frame encoding {enc}", 2 + 8)
            return FrameData(seq, idx, enc, w, h, far, bytes(rgba), bytes(depth))
        if tag == TAG_SCENE_EDIT:
            op, ln = struct.unpack_from("<BH", body, 0)
            name = body[3 : 3 + ln].decode("utf-8")
            if op == 0:
                t = np.frombuffer(body, dtype="<f4", count=16, offset=3 + ln)
                return SceneEdit("add", name, t.reshape(4, 4).astype(np.float64))
            return SceneEdit("remove", name)
        if tag == TAG_STATS:
            (ln,) = struct.unpack_from("<I", body, 0)
            return Stats(json.loads(body[4 : 4 + ln].decode("utf-8")))
        if tag == TAG_BYE:
            return Bye()
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DecodeError(f"malformed body for tag {tag}: {e}", 2) from e
    raise DecodeError(f"unknown message tag {tag}", 1)


def frame_stream(payload: bytes) -> bytes:
    """Length-prefix a payload for a reliable byte stream."""
    return struct.pack("<I", len(payload)) + payload


class StreamDecoder:
    """Incremental length-prefixed de-framer for socket byte chunks."""

    def __init__(self, max_payload=64 * 1024 * 1024):
        self._buf = bytearray()
        self._max = max_payload

    def feed(self, data: bytes) -> list[bytes]:
        self._buf.extend(data)
        out = []
        while len(self._buf) >= 4:
            (n,) = struct.unpack_from("<I", self._buf, 0)
            if n > self._max:
                raise DecodeError(f"payload length {n} exceeds limit", 0)
            if len(self._buf) < 4 + n:
                break
            out.append(bytes(self._buf[4 : 4 + n]))
            del self._buf[: 4 + n]
        return out


def encode_frame(frame: Frame, encoding: int = ENC_RAW, depth_far: float = 10.0) -> FrameData:
    """Quantize a frame to rgba8 + u16 depth, optionally deflated."""
    rgba8 = np.clip(np.round(frame.rgba * 255.0), 0, 255).astype(np.uint8)
    finite = np.isfinite(frame.depth)
    q = np.full(frame.depth.shape, DEPTH_MISS_U16, dtype=np.uint16)
    scaled = np.round(np.minimum(frame.depth[finite], depth_far) / depth_far * 65534.0)
    q[finite] = scaled.astype(np.uint16)
    rgba_bytes = rgba8.tobytes()
    depth_bytes = q.astype("<u2").tobytes()
    if encoding == ENC_DEFLATE:
        rgba_bytes = zlib.compress(rgba_bytes, 6)
        depth_bytes = zlib.compress(depth_bytes, 6)
    elif encoding != ENC_RAW:
        raise ProtocolError(f"unknown frame encoding {encoding}")
    return FrameData(
        pose_seq=0,
        frame_index=0,
        encoding=encoding,
        width=frame.width,
        height=frame.height,
        depth_far=depth_far,
        rgba=rgba_bytes,
        depth=depth_bytes,
    )


def decode_frame(msg: FrameData):
    """FrameData -> (rgba8 (H,W,4) uint8, depth (H,W) float32 with inf misses)."""
    rgba_bytes, depth_bytes = msg.rgba, msg.depth
    if msg.encoding == ENC_DEFLATE:
        try:
            rgba_bytes = zlib.decompress(rgba_bytes)
            depth_bytes = zlib.decompress(depth_bytes)
        except zlib.error as e:
            raise DecodeError(f"deflate error: {e}", 0) from e
    expected = msg.width * msg.height
    if len(rgba_bytes) != expected * 4:
        raise DecodeError("rgba size mismatch", 0)
    if len(depth_bytes) != expected * 2:
        raise DecodeError("depth size mismatch", len(rgba_bytes))
    rgba = np.frombuffer(rgba_bytes, dtype=np.uint8).reshape(msg.height, msg.width, 4)
    q = np.frombuffer(depth_bytes, dtype="<u2").reshape(msg.height, msg.width)
    depth = q.astype(np.float32) / 65534.0 * msg.depth_far
    depth[q == DEPTH_MISS_U16] = np.inf
    return rgba, depth

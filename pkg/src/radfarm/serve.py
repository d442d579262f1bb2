"""Server glue: drives a MasterNode from a clock, binds transports to
sessions, and provides the headless client used by soak tests and demos."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import look_at
from .errors import ProtocolError
from .farm import FarmConfig, MasterNode
from .protocol import (
    Bye,
    ClientHello,
    FrameData,
    PoseUpdate,
    ServerHello,
    SessionDenied,
    Stats,
    decode_frame,
)
from .transports import Clock, ConnectionListener, LoopbackTransport, VirtualClock, WallClock


class FarmServer:
    """Owns the master loop; transports feed it, sessions map back to them."""

    def __init__(self, assets, config: FarmConfig, clock: Clock | None = None):
        self.master = MasterNode(assets, config)
        self.clock = clock or WallClock()
        self.config = config
        self._pending: list = []  # transports with no session yet
        self._by_transport: dict = {}
        self.listener: ConnectionListener | None = None
        self.stopping = False

    # transports -----------------------------------------------------------

    def attach(self, transport) -> None:
        self._pending.append(transport)

    def listen(self, host: str, port: int, static_dir=None) -> int:
        self.listener = ConnectionListener(
            host, port, self.attach, static_dir, metrics_fn=self.master.metrics
        )
        self.listener.start()
        return self.listener.port

    def _pump_transports(self, now: float) -> None:
        still_pending = []
        for transport in self._pending:
            opened = False
            for msg in transport.poll_messages():
                if isinstance(msg, ClientHello) and not opened:
                    reply = self.master.open_session(msg, transport)
                    transport.send_message(reply)
                    if isinstance(reply, ServerHello):
                        self._by_transport[id(transport)] = reply.session_id
                        opened = True
                else:
                    transport.send_message(SessionDenied(retry_after_s=0.1))
            if not opened and not transport.closed:
                still_pending.append(transport)
        self._pending = still_pending

        for transport_id, sid in list(self._by_transport.items()):
            session = self.master.sessions.get(sid)
            if session is None:
                del self._by_transport[transport_id]
                continue
            transport = session.transport
            if transport.closed:
                self.master.close_session(sid)
                del self._by_transport[transport_id]
                continue
            for msg in transport.poll_messages():
                try:
                    self.master.ingest(sid, msg, now)
                except ProtocolError:
                    pass  # malformed input never disturbs other sessions

    # loop -------------------------------------------------------------------

    def step(self) -> None:
        now = self.clock.now()
        self._pump_transports(now)
        self.master.tick(now)

    def run_for(self, duration_s: float) -> None:
        end = self.clock.now() + duration_s
        next_tick = self.clock.now()
        while self.clock.now() < end and not self.stopping:
            self.step()
            next_tick += self.config.tick_s
            self.clock.sleep_until(next_tick)

    def shutdown(self) -> None:
        self.stopping = True
        for session in list(self.master.sessions.values()):
            if session.transport is not None:
                session.transport.send_message(Bye())
        for sid in list(self.master.sessions):
            self.master.close_session(sid)
        if self.listener:
            self.listener.stop()


@dataclass
class ClientStats:
    frames: int = 0
    stale_dropped: int = 0
    out_of_order: int = 0
    denied: bool = False
    retry_after_s: float = 0.0
    last_stats: dict = field(default_factory=dict)


class HeadlessClient:
    """Scripted client: orbits the scene, sends poses, collects frames."""

    def __init__(self, width=64, height=64, fov_deg=60.0, target_fps=20.0,
                 radius=2.0, target=(0.5, 0.5, 0.5)):
        fx = width / (2.0 * math.tan(math.radians(fov_deg) / 2.0))
        self.hello = ClientHello(
            width=width, height=height, fx=fx, fy=fx, cx=width / 2, cy=height / 2,
            target_fps=target_fps,
        )
        self.radius = radius
        self.target = np.asarray(target, dtype=np.float64)
        self.session_id = None
        self.assets: list[str] = []
        self.seq = 0
        self.frames: list[FrameData] = []
        self.frame_indices: list[int] = []
        self.pose_seqs: list[int] = []
        self.delivery_log: list[tuple] = []  # (time, frame_index)
        self.stats = ClientStats()
        self._last_seq_displayed = -1

    def pose_at(self, t: float) -> np.ndarray:
        azimuth = 0.4 * t
        eye = self.target + self.radius * np.array(
            [math.cos(azimuth), math.sin(azimuth), 0.45]
        ) / math.sqrt(1 + 0.45**2)
        return look_at(eye, self.target, up=(0, 0, 1))

    def connect(self, transport) -> None:
        self.transport = transport
        transport.client_send(self.hello)

    def send_pose(self, t: float) -> None:
        self.seq += 1
        self.transport.client_send(PoseUpdate(seq=self.seq, pose=self.pose_at(t)))

    def poll(self, now: float = 0.0) -> None:
        for msg in self.transport.client_poll():
            if isinstance(msg, ServerHello):
                self.session_id = msg.session_id
                self.assets = msg.assets
            elif isinstance(msg, SessionDenied):
                self.stats.denied = True
                self.stats.retry_after_s = msg.retry_after_s
            elif isinstance(msg, FrameData):
                if msg.pose_seq < self._last_seq_displayed:
                    self.stats.stale_dropped += 1
                    continue
                self._last_seq_displayed = msg.pose_seq
                self.frames.append(msg)
                self.frame_indices.append(msg.frame_index)
                self.pose_seqs.append(msg.pose_seq)
                self.delivery_log.append((now, msg.frame_index))
                self.stats.frames += 1
            elif isinstance(msg, Stats):
                self.stats.last_stats = msg.payload

    def decode_latest(self):
        if not self.frames:
            return None
        return decode_frame(self.frames[-1])


def run_soak(
    assets,
    config: FarmConfig,
    duration_s: float = 5.0,
    target_fps: float = 20.0,
    pose_interval_s: float = 0.020,
    width: int = 48,
    kill_worker_at: float | None = None,
):
    """Scripted loopback soak on a virtual clock; returns (client, server)."""
    clock = VirtualClock()
    server = FarmServer(assets, config, clock)
    client = HeadlessClient(width=width, height=width, target_fps=target_fps)
    transport = LoopbackTransport()
    server.attach(transport)
    client.connect(transport)

    next_pose = 0.0
    next_tick = 0.0
    killed = False
    while clock.now() < duration_s:
        now = clock.now()
        if kill_worker_at is not None and not killed and now >= kill_worker_at:
            light = [w for w in server.master.workers if w.worker_class == "light"]
            if light:
                light[0].alive = False
            killed = True
        while next_pose <= now:
            client.send_pose(next_pose)
            next_pose += pose_interval_s
        server.step()
        client.poll(now)
        next_tick += config.tick_s
        clock.sleep_until(next_tick)
    return client, server

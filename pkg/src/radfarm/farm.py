"""Master node, worker pool, and depth composition.

One master owns all session/compose state and advances in ticks: ingest
client messages, run the scheduler, dispatch assignments to workers, collect
results, compose finished frames by depth, encode, and send.  Workers
communicate only through task/result values, so in-process farms replay
deterministically; socketed workers reuse the same dispatch surface.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .core import Camera, Frame
from .errors import ProtocolError
from .lightfield import LightFieldAsset, RenderCounters
from .protocol import (
    Bye,
    ClientHello,
    ENC_DEFLATE,
    FrameData,
    PoseUpdate,
    SceneEdit,
    ServerHello,
    SessionDenied,
    Stats,
    encode_frame,
)
from .renderer import RayRange, Tile, estimate_nhit, render_range, tile_ranges
from .scheduler import (
    RenderTask,
    TaskClass,
    Thresholds,
    UserSession,
    classify_task,
    quantize_pose,
    schedule_tick,
    update_wait_time,
    FarmView,
)


@dataclass
class FarmConfig:
    heavy_workers: int = 1
    light_workers: int = 2
    light_rays_per_tick: int = 16384
    tick_s: float = 0.005
    tile_size: int = 32
    thresholds: Thresholds = field(default_factory=Thresholds)
    depth_far: float = 10.0
    encoding: int = ENC_DEFLATE
    frame_timeout_ticks: int = 2
    pose_min_interval_s: float = 0.010
    rot_cell_deg: float = 5.0
    cache_ttl_s: float = 2.0
    stats_every_ticks: int = 50


@dataclass
class TaskResult:
    task_id: str
    ok: bool
    tile: Tile | None = None
    instr: dict = field(default_factory=dict)
    worker_id: str = ""
    error: str | None = None


@dataclass
class FarmTask:
    """A scheduler task plus everything a worker needs to render it."""

    base: RenderTask
    camera: Camera
    asset_id: str
    transform: np.ndarray
    rect: tuple  # (x0, y0, x1, y1)
    recipients: list  # [(session_id, frame_index, pose_seq)]


class Worker:
    """One render worker; heavy workers take one task at a time."""

    def __init__(self, worker_id: str, worker_class: str, capacity_rays: int = 0):
        self.worker_id = worker_id
        self.worker_class = worker_class
        self.capacity_rays = capacity_rays
        self.loaded_assets: set = set()
        self.alive = True
        self.counters = RenderCounters()

    def execute(self, assets: dict, task: FarmTask) -> TaskResult:
        if not self.alive:
            return TaskResult(task.base.task_id, ok=False, worker_id=self.worker_id,
                              error="worker down")
        if task.base.task_class is TaskClass.HEAVY and self.worker_class != "heavy":
            return TaskResult(task.base.task_id, ok=False, worker_id=self.worker_id,
                              error="class mismatch: heavy task on light worker")
        asset = assets.get(task.asset_id)
        if asset is None:
            return TaskResult(task.base.task_id, ok=False, worker_id=self.worker_id,
                              error=f"unknown asset {task.asset_id!r}")
        self.loaded_assets.add(task.asset_id)  # lazy-load on first touch
        if task.base.skip:
            x0, y0, x1, y1 = task.rect
            tile = Tile(
                x0=x0, y0=y0,
                rgba=np.zeros((y1 - y0, x1 - x0, 4), dtype=np.float32),
                depth=np.full((y1 - y0, x1 - x0), np.inf, dtype=np.float32),
            )
            return TaskResult(task.base.task_id, ok=True, tile=tile,
                              instr={"rays": 0, "hits": 0, "wall_time_s": 0.0},
                              worker_id=self.worker_id)
        placed = asset
        if task.transform is not None:
            from dataclasses import replace

            placed = replace(asset, object_to_world=np.asarray(task.transform, dtype=np.float64))
        rng = RayRange(task.camera, *task.rect, task.asset_id)
        tile, instr = render_range(placed, rng, self.counters)
        return TaskResult(task.base.task_id, ok=True, tile=tile, instr=instr,
                          worker_id=self.worker_id)


def compose(frames: list[Frame], asset_order: list[int] | None = None,
            alpha_vis: float = 0.5) -> Frame:
    """Depth-sorted front-to-back over of per-asset frames.

    Color channels are premultiplied radiance, so the over operator is
    out = c_front + (1 - a_front) * c_back.  Depth ties break by position in
    ``frames`` (stable asset order); output depth is the nearest sample with
    alpha above ``alpha_vis``.
    """
    if not frames:
        raise ProtocolError("compose needs at least one frame")
    h, w = frames[0].height, frames[0].width
    k = len(frames)
    rgba = np.stack([f.rgba for f in frames])  # (K,H,W,4)
    depth = np.stack([f.depth for f in frames])  # (K,H,W)
    order = np.argsort(depth, axis=0, kind="stable")  # ties keep asset order

    out_c = np.zeros((h, w, 3), dtype=np.float64)
    trans = np.ones((h, w), dtype=np.float64)
    out_depth = np.full((h, w), np.inf, dtype=np.float32)
    depth_set = np.zeros((h, w), dtype=bool)
    for rank in range(k):
        idx = order[rank]  # (H,W) asset index at this depth rank
        c = np.take_along_axis(rgba, idx[None, :, :, None], axis=0)[0]
        d = np.take_along_axis(depth, idx[None, :, :], axis=0)[0]
        a = c[..., 3]
        out_c += trans[..., None] * c[..., :3]
        sel = (~depth_set) & (a > alpha_vis)
        out_depth[sel] = d[sel]
        depth_set |= sel
        trans *= 1.0 - a
    out = Frame(
        width=w,
        height=h,
        rgba=np.concatenate(
            [np.clip(out_c, 0, 1), np.clip(1.0 - trans, 0, 1)[..., None]], axis=2
        ).astype(np.float32),
        depth=out_depth,
    )
    # enforce the alpha == 0 <-> miss sentinel invariant after blending
    zero = out.rgba[..., 3] <= 0
    out.rgba[zero] = 0.0
    out.depth[zero] = np.inf
    return out


@dataclass
class FarmSession:
    session_id: int
    transport: object
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    target_fps: float
    scene: list = field(default_factory=list)  # [(asset_id, transform)]
    pose: np.ndarray | None = None
    pose_seq: int = -1
    last_pose_time: float = -1.0
    pose_drops: int = 0
    poses_accepted: int = 0
    frame_index: int = 0
    delivered: int = 0
    last_delivered_seq: int = -1
    timed_out_tiles: int = 0
    sched: UserSession | None = None
    closed: bool = False

    def camera(self) -> Camera:
        return Camera(
            pose=self.pose,
            fx=self.fx,
            fy=self.fy,
            cx=self.cx,
            cy=self.cy,
            width=self.width,
            height=self.height,
        )


@dataclass
class _Assembly:
    session_id: int
    frame_index: int
    pose_seq: int
    born_tick: int
    expected: set  # task ids outstanding
    buffers: dict  # asset_id -> Frame
    order: list  # asset ids in scene order


@dataclass
class _CacheEntry:
    expiry: float
    tile: Tile
    instr: dict


class MasterNode:
    """Single owner of sessions, assemblies, cache, and the farm."""

    def __init__(self, assets: dict[str, LightFieldAsset], config: FarmConfig):
        self.assets = assets
        self.config = config
        self.workers = [
            Worker(f"heavy{i}", "heavy") for i in range(config.heavy_workers)
        ] + [
            Worker(f"light{i}", "light", config.light_rays_per_tick)
            for i in range(config.light_workers)
        ]
        self.sessions: dict[int, FarmSession] = {}
        self.assemblies: dict[tuple, _Assembly] = {}
        self.tasks: dict[str, FarmTask] = {}
        self.tile_cache: dict[tuple, _CacheEntry] = {}
        self.tick_index = 0
        self.admission_denied = False
        self._next_session = 1
        self._task_seq = 0
        self.stats = {
            "frames_delivered": 0,
            "frames_dropped": 0,
            "tiles_timed_out": 0,
            "rays_requested": 0,
            "rays_rendered": 0,
            "cache_hits": 0,
            "shared_tasks": 0,
            "rerouted_tasks": 0,
            "join_denials": 0,
            "pose_drops": 0,
        }

    # ---- session lifecycle -------------------------------------------------

    def open_session(self, hello: ClientHello, transport):
        if self.admission_denied:
            self.stats["join_denials"] += 1
            return SessionDenied(retry_after_s=4 * self.config.tick_s)
        sid = self._next_session
        self._next_session += 1
        session = FarmSession(
            session_id=sid,
            transport=transport,
            width=hello.width,
            height=hello.height,
            fx=hello.fx,
            fy=hello.fy,
            cx=hello.cx,
            cy=hello.cy,
            target_fps=hello.target_fps,
        )
        session.scene = [(name, np.eye(4)) for name in sorted(self.assets)]
        session.sched = UserSession(user_id=str(sid), target_fps=hello.target_fps)
        self.sessions[sid] = session
        return ServerHello(session_id=sid, assets=sorted(self.assets))

    def close_session(self, sid: int) -> None:
        session = self.sessions.pop(sid, None)
        if session is None:
            return
        session.closed = True
        for key in [k for k in self.assemblies if k[0] == sid]:
            del self.assemblies[key]

    def ingest(self, sid: int, msg, now: float) -> None:
        session = self.sessions.get(sid)
        if session is None:
            raise ProtocolError(f"message for unknown session {sid}")
        if isinstance(msg, PoseUpdate):
            if msg.seq <= session.pose_seq:
                session.pose_drops += 1
                self.stats["pose_drops"] += 1
                return
            rot = msg.pose[:3, :3]
            if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-3):
                session.pose_drops += 1
                self.stats["pose_drops"] += 1
                raise ProtocolError("non-rigid pose matrix dropped")
            # coalesce: the newest pose within the rate window wins
            session.pose = np.asarray(msg.pose, dtype=np.float64)
            session.pose_seq = msg.seq
            session.last_pose_time = now
            session.poses_accepted += 1
        elif isinstance(msg, SceneEdit):
            if msg.op == "add":
                if msg.asset not in self.assets:
                    raise ProtocolError(f"unknown asset {msg.asset!r}")
                session.scene = [s for s in session.scene if s[0] != msg.asset]
                session.scene.append((msg.asset, msg.transform))
            else:
                session.scene = [s for s in session.scene if s[0] != msg.asset]
        elif isinstance(msg, Bye):
            self.close_session(sid)
        elif isinstance(msg, ClientHello):
            raise ProtocolError("duplicate hello on an open session")
        else:
            raise ProtocolError(f"unexpected message {type(msg).__name__}")

    # ---- frame/task production ----------------------------------------------

    def _build_frame_tasks(self, session: FarmSession, now: float) -> None:
        cam = session.camera()
        index = session.frame_index
        session.frame_index += 1
        assembly = _Assembly(
            session_id=session.session_id,
            frame_index=index,
            pose_seq=session.pose_seq,
            born_tick=self.tick_index,
            expected=set(),
            buffers={},
            order=[a for a, _ in session.scene],
        )
        diag_cell = 1.0 / 64.0
        for asset_id, transform in session.scene:
            asset = self.assets[asset_id]
            world_proxy = asset.proxy
            est = estimate_nhit(world_proxy, transform, cam)
            task_class, skip = classify_task(est, self.config.thresholds)
            pose_key = quantize_pose(
                session.pose,
                trans_cell=max(asset.proxy.diagonal, 1e-6) * diag_cell,
                rot_cell_deg=self.config.rot_cell_deg,
            )
            if skip:
                rects = [(0, 0, cam.width, cam.height)]
            elif task_class is TaskClass.HEAVY:
                rects = [(0, 0, cam.width, cam.height)]
            else:
                rects = [
                    (r.x0, r.y0, r.x1, r.y1)
                    for r in tile_ranges(cam, self.config.tile_size, asset_id)
                ]
            for rect in rects:
                self._task_seq += 1
                rays = 0 if skip else (rect[2] - rect[0]) * (rect[3] - rect[1])
                base = RenderTask(
                    task_id=f"f{self._task_seq:08d}",
                    asset_id=asset_id,
                    user_id=str(session.session_id),
                    rays=rays,
                    task_class=task_class,
                    shared_key=(asset_id, pose_key, rect, cam.width, cam.height),
                    skip=skip,
                    frame_id=(session.session_id, index),
                    rect=rect,
                )
                task = FarmTask(
                    base=base,
                    camera=cam,
                    asset_id=asset_id,
                    transform=transform,
                    rect=rect,
                    recipients=[(session.session_id, index, session.pose_seq)],
                )
                self.tasks[base.task_id] = task
                assembly.expected.add(base.task_id)
                session.sched.pending.append(base)
                self.stats["rays_requested"] += rays
        self.assemblies[(session.session_id, index)] = assembly

    # ---- dedup against other sessions and the tile cache --------------------

    def _dedup_and_cache(self, now: float) -> None:
        # expire old cache entries
        for key in [k for k, e in self.tile_cache.items() if e.expiry <= now]:
            del self.tile_cache[key]

        by_key: dict = {}
        for session in self.sessions.values():
            if session.sched.target_time > now:
                continue
            for base in list(session.sched.pending):
                if base.skip:
                    continue
                entry = self.tile_cache.get(base.shared_key)
                task = self.tasks[base.task_id]
                if entry is not None:
                    # serve straight from the cache: no render at all
                    self.stats["cache_hits"] += 1
                    session.sched.pending.remove(base)
                    for sid, fidx, _seq in task.recipients:
                        self._deliver_tile(sid, fidx, task.asset_id, base.task_id,
                                           entry.tile)
                    continue
                lead = by_key.get(base.shared_key)
                if lead is None:
                    by_key[base.shared_key] = base
                elif lead.user_id != base.user_id and lead.task_id in self.tasks:
                    # merge into the lead; heavy per the shared-ray policy
                    lead_task = self.tasks[lead.task_id]
                    lead_task.recipients.extend(task.recipients)
                    lead.shared_users = tuple(
                        sorted(set(lead.shared_users or (lead.user_id,)) | {base.user_id})
                    )
                    lead.task_class = TaskClass.HEAVY
                    session.sched.pending.remove(base)
                    # the merged task also sits in this session's queue so any
                    # due sharer can trigger it
                    session.sched.pending.append(lead)
                    assembly = self.assemblies.get((int(base.user_id), base.frame_id[1]))
                    if assembly is not None:
                        assembly.expected.discard(base.task_id)
                        assembly.expected.add(lead.task_id)
                    del self.tasks[base.task_id]
                    self.stats["shared_tasks"] += 1

    # ---- dispatch and collection --------------------------------------------

    def _dispatch(self, assignments: list[RenderTask], now: float) -> list[TaskResult]:
        results = []
        heavy_pool = [w for w in self.workers if w.worker_class == "heavy" and w.alive]
        light_pool = [w for w in self.workers if w.worker_class == "light" and w.alive]
        light_load = {w.worker_id: 0 for w in light_pool}
        for base in assignments:
            task = self.tasks.get(base.task_id)
            if task is None:
                continue
            if base.task_class is TaskClass.HEAVY and heavy_pool:
                worker = heavy_pool.pop(0)
            elif light_pool:
                worker = min(light_pool, key=lambda w: light_load[w.worker_id])
                light_load[worker.worker_id] += base.rays
            else:
                worker = None
            if worker is None:
                self._requeue(base)
                continue
            result = worker.execute(self.assets, task)
            if result.ok:
                self.stats["rays_rendered"] += base.rays
            results.append(result)
        return results

    def _requeue(self, base: RenderTask) -> None:
        """Put a task back for the next tick (worker loss or overflow)."""
        task = self.tasks.get(base.task_id)
        if task is None:
            return
        self.stats["rerouted_tasks"] += 1
        for sid, _fidx, _seq in task.recipients[:1]:
            session = self.sessions.get(sid)
            if session is not None and base not in session.sched.pending:
                session.sched.pending.append(base)

    def _deliver_tile(self, sid: int, frame_index: int, asset_id: str,
                      task_id: str, tile: Tile) -> None:
        assembly = self.assemblies.get((sid, frame_index))
        if assembly is None:
            return
        session = self.sessions.get(sid)
        if session is None:
            return
        buf = assembly.buffers.get(asset_id)
        if buf is None:
            buf = Frame.empty(session.width, session.height)
            assembly.buffers[asset_id] = buf
        h, w = tile.rgba.shape[:2]
        buf.rgba[tile.y0 : tile.y0 + h, tile.x0 : tile.x0 + w] = tile.rgba
        buf.depth[tile.y0 : tile.y0 + h, tile.x0 : tile.x0 + w] = tile.depth
        assembly.expected.discard(task_id)

    def _collect(self, results: list[TaskResult], now: float) -> None:
        for result in results:
            task = self.tasks.get(result.task_id)
            if task is None:
                continue
            if not result.ok:
                self._requeue(task.base)
                continue
            if task.base.shared_key is not None and not task.base.skip:
                self.tile_cache[task.base.shared_key] = _CacheEntry(
                    expiry=now + self.config.cache_ttl_s, tile=result.tile,
                    instr=result.instr,
                )
            for sid, fidx, _seq in task.recipients:
                self._deliver_tile(sid, fidx, task.asset_id, result.task_id, result.tile)
            del self.tasks[result.task_id]

    def _finish_frames(self, now: float) -> list[tuple]:
        delivered = []
        for key in sorted(self.assemblies.keys()):
            assembly = self.assemblies[key]
            session = self.sessions.get(assembly.session_id)
            if session is None:
                del self.assemblies[key]
                continue
            timed_out = (
                self.tick_index - assembly.born_tick >= self.config.frame_timeout_ticks
                and assembly.expected
            )
            if assembly.expected and not timed_out:
                continue
            if timed_out:
                # missing tiles are composited as transparent and counted
                session.timed_out_tiles += len(assembly.expected)
                self.stats["tiles_timed_out"] += len(assembly.expected)
                # the work may still land later; drop its bookkeeping now
                for tid in list(assembly.expected):
                    task = self.tasks.get(tid)
                    if task is not None:
                        task.recipients = [
                            r for r in task.recipients
                            if (r[0], r[1]) != (assembly.session_id, assembly.frame_index)
                        ]
                    base_owner = self.sessions.get(assembly.session_id)
                    if base_owner:
                        base_owner.sched.pending = [
                            t for t in base_owner.sched.pending if t.task_id != tid
                        ]
                assembly.expected.clear()
            frames = [
                assembly.buffers.get(aid) or Frame.empty(session.width, session.height)
                for aid in assembly.order
            ]
            frame = compose(frames) if frames else Frame.empty(session.width, session.height)
            completion = max(0.0, now - assembly.born_tick * self.config.tick_s)
            update_wait_time(session.sched, completion, now)
            delivered.append((session, assembly, frame))
            del self.assemblies[key]
        return delivered

    # ---- the tick ------------------------------------------------------------

    def tick(self, now: float) -> list[tuple]:
        """One master-loop cycle; returns [(session, FrameData)] sent."""
        cfg = self.config
        # new frames for due sessions holding a pose and no outstanding frame
        for session in sorted(self.sessions.values(), key=lambda s: s.session_id):
            if session.pose is None:
                continue
            outstanding = any(
                k[0] == session.session_id for k in self.assemblies
            )
            if outstanding or session.sched.pending:
                continue
            if session.sched.target_time <= now:
                self._build_frame_tasks(session, now)

        self._dedup_and_cache(now)

        light_pool = [w for w in self.workers if w.worker_class == "light" and w.alive]
        heavy_pool = [w for w in self.workers if w.worker_class == "heavy" and w.alive]
        farm_view = FarmView(
            heavy_slots=len(heavy_pool),
            light_worker_rays=[cfg.light_rays_per_tick for _ in light_pool],
        )
        sched_sessions = [s.sched for s in self.sessions.values()]
        result = schedule_tick(sched_sessions, farm_view, now, cfg.tick_s)
        self.admission_denied = result.admission_denied

        results = self._dispatch(result.assignments, now)
        self._collect(results, now)
        finished = self._finish_frames(now)

        sent = []
        for session, assembly, frame in finished:
            msg = encode_frame(frame, cfg.encoding, cfg.depth_far)
            msg.pose_seq = assembly.pose_seq
            msg.frame_index = assembly.frame_index
            session.delivered += 1
            session.last_delivered_seq = max(session.last_delivered_seq, assembly.pose_seq)
            self.stats["frames_delivered"] += 1
            if session.transport is not None:
                session.transport.send_message(msg)
            sent.append((session, msg))

        if cfg.stats_every_ticks and self.tick_index % cfg.stats_every_ticks == 0:
            for session in self.sessions.values():
                if session.transport is not None:
                    session.transport.send_message(Stats(self._session_stats(session)))
        self.tick_index += 1
        return sent

    def _session_stats(self, session: FarmSession) -> dict:
        return {
            "session_id": session.session_id,
            "delivered": session.delivered,
            "timed_out_tiles": session.timed_out_tiles,
            "pose_drops": session.pose_drops,
            "farm": dict(self.stats),
        }

    def metrics(self) -> dict:
        return {
            "sessions": len(self.sessions),
            "tick": self.tick_index,
            **self.stats,
        }

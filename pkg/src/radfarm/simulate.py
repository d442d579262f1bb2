"""Virtual-clock scheduling simulation.

Users request frames continuously; each frame becomes a set of synthetic
tasks (tile rays + render time).  The tick loop runs the real scheduler:
cross-user dedup with a shared-ray cache, starvation-first assignment with
admission denial, and execution on modeled heavy/light workers.  Identical
workloads replay to identical traces.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .errors import ConfigError
from .scheduler import (
    FarmView,
    RayCache,
    RenderTask,
    ScheduleModel,
    SharedRayModel,
    TaskClass,
    UserSession,
    dedup_tasks,
    efficiency_report,
    schedule_tick,
    update_wait_time,
)

_FARM_KEYS = {"heavy_slots", "light_workers", "rays_per_tick"}
_MODEL_KEYS = {"bandwidth_bytes_per_s", "compose_s", "bytes_per_ray", "mesh_coeff_k"}
_USER_KEYS = {
    "id", "target_fps", "join_tick", "asset", "tiles_per_frame", "rays_per_tile",
    "render_s_per_tile", "heavy_tiles", "render_s_heavy", "pose_cell_ticks", "pose_phase",
}
_TOP_KEYS = {"tick_ms", "duration_ticks", "farm", "model", "users", "cache_ttl_s"}


def _require_keys(obj: dict, allowed: set, where: str) -> None:
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


@dataclass
class SimUser:
    user_id: str
    target_fps: float
    join_tick: int
    asset: str
    tiles_per_frame: int
    rays_per_tile: int
    render_s_per_tile: float
    heavy_tiles: int = 0
    render_s_heavy: float = 0.0
    pose_cell_ticks: int = 1_000_000_000  # static pose by default
    pose_phase: int = 0

    def pose_cell(self, tick: int) -> int:
        return (tick + self.pose_phase) // self.pose_cell_ticks


@dataclass
class Workload:
    tick_s: float
    duration_ticks: int
    heavy_slots: int
    light_workers: int
    rays_per_tick: int
    model: ScheduleModel
    bytes_per_ray: int
    mesh_coeff_k: float
    users: list
    cache_ttl_s: float = 2.0

    @classmethod
    def from_dict(cls, data: dict) -> "Workload":
        _require_keys(data, _TOP_KEYS, "workload")
        farm = data.get("farm", {})
        _require_keys(farm, _FARM_KEYS, "farm")
        model = data.get("model", {})
        _require_keys(model, _MODEL_KEYS, "model")
        users = []
        for u in data.get("users", []):
            _require_keys(u, _USER_KEYS, f"user {u.get('id')}")
            users.append(
                SimUser(
                    user_id=str(u["id"]),
                    target_fps=float(u["target_fps"]),
                    join_tick=int(u.get("join_tick", 0)),
                    asset=str(u.get("asset", "asset")),
                    tiles_per_frame=int(u.get("tiles_per_frame", 1)),
                    rays_per_tile=int(u.get("rays_per_tile", 1024)),
                    render_s_per_tile=float(u.get("render_s_per_tile", 0.002)),
                    heavy_tiles=int(u.get("heavy_tiles", 0)),
                    render_s_heavy=float(u.get("render_s_heavy", 0.0)),
                    pose_cell_ticks=int(u.get("pose_cell_ticks", 1_000_000_000)),
                    pose_phase=int(u.get("pose_phase", 0)),
                )
            )
        if not users:
            raise ConfigError("workload needs at least one user")
        return cls(
            tick_s=float(data.get("tick_ms", 5.0)) / 1000.0,
            duration_ticks=int(data["duration_ticks"]),
            heavy_slots=int(farm.get("heavy_slots", 1)),
            light_workers=int(farm.get("light_workers", 1)),
            rays_per_tick=int(farm.get("rays_per_tick", 8192)),
            model=ScheduleModel(
                bandwidth_bytes_per_s=float(model.get("bandwidth_bytes_per_s", 1e9)),
                compose_s=float(model.get("compose_s", 0.001)),
            ),
            bytes_per_ray=int(model.get("bytes_per_ray", 6)),
            mesh_coeff_k=float(model.get("mesh_coeff_k", 1.0)),
            users=users,
            cache_ttl_s=float(data.get("cache_ttl_s", 2.0)),
        )

    @classmethod
    def from_json(cls, text: str) -> "Workload":
        return cls.from_dict(json.loads(text))


@dataclass
class _Frame:
    user_id: str
    index: int
    request_time: float
    remaining: int
    bytes_total: int
    start_time: float | None = None  # first assignment; completion is measured
    # from here so pacing waits don't inflate the job time


class Simulation:
    """One virtual-clock run.

    Bookkeeping invariants: every original task id maps to exactly one frame
    (task_frame); a scheduled representative task maps to the original ids
    it covers (group_members, rebuilt from pending every tick); each original
    id is covered exactly once, when its representative completes.
    """

    def __init__(self, workload: Workload):
        self.w = workload
        self.cache = RayCache(ttl_s=workload.cache_ttl_s)
        self.sessions: dict[str, UserSession] = {}
        self.sim_users = {u.user_id: u for u in workload.users}
        self.frames: dict[tuple, _Frame] = {}
        self.frame_count: dict[str, int] = {}
        self.task_frame: dict[str, tuple] = {}
        self.group_members: dict[str, list] = {}
        self.running: list = []  # (task, done_time)
        self.heavy_busy_until: list[float] = [0.0] * workload.heavy_slots
        self.light_busy_until: list[float] = [0.0] * workload.light_workers
        self.trace: list[dict] = []
        self.rays_requested = 0
        self.rays_rendered = 0
        self.cache_hits = 0
        self.join_denied_total = 0
        self._task_seq = 0

    def _new_frame_tasks(self, user: SimUser, tick: int, now: float) -> list:
        index = self.frame_count.get(user.user_id, 0)
        self.frame_count[user.user_id] = index + 1
        self.frames[(user.user_id, index)] = _Frame(
            user_id=user.user_id,
            index=index,
            request_time=now,
            remaining=user.tiles_per_frame + user.heavy_tiles,
            bytes_total=user.tiles_per_frame * user.rays_per_tile * self.w.bytes_per_ray,
        )
        cell = user.pose_cell(tick)
        tasks = []

        def emit(rays, cls, render_s, tile):
            self._task_seq += 1
            t = RenderTask(
                task_id=f"t{self._task_seq:08d}",
                asset_id=user.asset,
                user_id=user.user_id,
                rays=rays,
                task_class=cls,
                shared_key=(user.asset, cell, tile),
                render_s=render_s,
                result_bytes=user.rays_per_tile * self.w.bytes_per_ray,
                frame_id=(user.user_id, index),
                rect=(tile,),
            )
            self.task_frame[t.task_id] = (user.user_id, index)
            tasks.append(t)

        for i in range(user.tiles_per_frame):
            emit(user.rays_per_tile, TaskClass.LIGHT, user.render_s_per_tile, i)
        for i in range(user.heavy_tiles):
            emit(0, TaskClass.HEAVY, user.render_s_heavy, f"h{i}")
        self.rays_requested += sum(t.rays for t in tasks)
        return tasks

    def _complete_original(self, task_id: str, now: float) -> None:
        frame_key = self.task_frame.pop(task_id, None)
        if frame_key is None:
            return
        frame = self.frames.get(frame_key)
        if frame is None:
            return
        frame.remaining -= 1
        if frame.remaining == 0:
            delivered = now + self.w.model.frame_time(0.0, frame.bytes_total)
            session = self.sessions[frame.user_id]
            started = frame.start_time if frame.start_time is not None else frame.request_time
            update_wait_time(session, delivered - started, delivered)
            del self.frames[frame_key]
            self._delivered.setdefault(frame.user_id, 0)
            self._delivered[frame.user_id] += 1

    def _complete_task(self, task: RenderTask, now: float) -> None:
        for member_id in self.group_members.pop(task.task_id, [task.task_id]):
            self._complete_original(member_id, now)

    def run(self):
        w = self.w
        waiting = sorted(w.users, key=lambda u: (u.join_tick, u.user_id))
        admission_denied = False

        for tick in range(w.duration_ticks):
            now = tick * w.tick_s
            self._delivered = {}
            denials = 0

            # 1. completions
            still = []
            for task, done in self.running:
                if done <= now:
                    if task.shared_key is not None:
                        self.cache.insert(task.shared_key, now)
                    self._complete_task(task, done)
                else:
                    still.append((task, done))
            self.running = still

            # 2. joins (denied while the scheduler is in a starvation state)
            joined = []
            for u in waiting:
                if u.join_tick > tick:
                    break
                if admission_denied:
                    denials += 1
                    self.join_denied_total += 1
                    continue
                self.sessions[u.user_id] = UserSession(
                    user_id=u.user_id, target_fps=u.target_fps, target_time=now
                )
                joined.append(u)
            for u in joined:
                waiting.remove(u)

            # 3. continuous demand: request the next frame once the previous
            #    one is fully delivered
            for user_id, session in self.sessions.items():
                outstanding = any(f.user_id == user_id for f in self.frames.values())
                if not outstanding and not session.pending:
                    session.pending.extend(
                        self._new_frame_tasks(self.sim_users[user_id], tick, now)
                    )

            # 4. cross-user dedup + cache, over due sessions only (serving a
            #    not-yet-due frame from the cache would defeat fps pacing).
            #    Already-merged representatives pass through untouched so the
            #    membership recorded at merge time survives until completion.
            due_sessions = [
                s for s in self.sessions.values() if s.pending and s.target_time <= now
            ]
            fresh = []
            seen_ids = set()
            for s in due_sessions:
                for t in s.pending:
                    if id(t) in seen_ids or t.shared_users:
                        seen_ids.add(id(t))
                        continue
                    seen_ids.add(id(t))
                    fresh.append(t)
            result = dedup_tasks(fresh, self.cache, now)
            self.cache_hits += len(result.cached)
            cached_ids = {t.task_id for t in result.cached}
            for t in result.cached:
                frame = self.frames.get(self.task_frame.get(t.task_id, ()))
                if frame is not None and frame.start_time is None:
                    frame.start_time = now  # cache hits are served, not queued
                self._complete_original(t.task_id, now)
            reps = {t.shared_key: t for t in result.shared}
            for rep in result.shared:
                self.group_members[rep.task_id] = []
            for s in due_sessions:
                new_pending = []
                seen = set()
                for t in s.pending:
                    if t.task_id in cached_ids and not t.shared_users:
                        continue
                    rep = reps.get(t.shared_key) if not t.shared_users else None
                    if rep is not None:
                        self.group_members[rep.task_id].append(t.task_id)
                        if rep.task_id not in seen:
                            new_pending.append(rep)
                            seen.add(rep.task_id)
                    else:
                        new_pending.append(t)
                s.pending = new_pending

            # 5. schedule; a worker running behind accepts proportionally
            #    fewer new rays this tick (zero once a full tick behind)
            free_heavy = sum(1 for b in self.heavy_busy_until if b <= now)
            light_rays = [
                int(w.rays_per_tick * max(0.0, 1.0 - max(0.0, busy - now) / w.tick_s))
                for busy in self.light_busy_until
            ]
            farm = FarmView(heavy_slots=free_heavy, light_worker_rays=light_rays)
            tick_result = schedule_tick(list(self.sessions.values()), farm, now, w.tick_s)
            admission_denied = tick_result.admission_denied

            # 6. execute on modeled workers
            rendered_this_tick = 0
            for task in tick_result.assignments:
                for member in self.group_members.get(task.task_id, [task.task_id]):
                    frame = self.frames.get(self.task_frame.get(member, ()))
                    if frame is not None and frame.start_time is None:
                        frame.start_time = now
                if task.skip:
                    self._complete_task(task, now)
                    continue
                if task.task_class is TaskClass.HEAVY:
                    slot = min(range(len(self.heavy_busy_until)),
                               key=lambda i: self.heavy_busy_until[i])
                    start = max(now, self.heavy_busy_until[slot])
                    done = start + task.render_s
                    self.heavy_busy_until[slot] = done
                else:
                    wk = min(range(w.light_workers), key=lambda i: self.light_busy_until[i])
                    start = max(now, self.light_busy_until[wk])
                    done = start + task.render_s
                    self.light_busy_until[wk] = done
                self.running.append((task, done))
                self.rays_rendered += task.rays
                rendered_this_tick += task.rays

            self.trace.append(
                {
                    "tick": tick,
                    "time_s": now + w.tick_s,
                    "assigned": len(tick_result.assignments),
                    "rays_requested": rendered_this_tick,
                    "rays_rendered": rendered_this_tick,
                    "cache_hits": len(result.cached),
                    "starved_users": tick_result.starved_users,
                    "join_denials": denials,
                    "frames_delivered": dict(self._delivered),
                }
            )

        return self._report(), self.trace

    def _report(self) -> dict:
        users = self.w.users
        per_user = [u.tiles_per_frame * u.render_s_per_tile for u in users]
        model = SharedRayModel(
            mesh_coeff_k=self.w.mesh_coeff_k,
            shared_mesh_s=0.0,
            shared_render_s=users[0].render_s_per_tile * users[0].tiles_per_frame,
            per_user_mesh_s=tuple(0.0 for _ in users),
            per_user_render_s=tuple(per_user),
        )
        report = efficiency_report(self.trace, model)
        report["rays_requested"] = self.rays_requested
        report["rays_rendered"] = self.rays_rendered
        report["cache_hits"] = self.cache_hits
        report["join_denials"] = self.join_denied_total
        report["frames_total"] = {u: self.frame_count.get(u, 0) for u in self.sim_users}
        report["dedup_ratio"] = (
            (self.rays_requested - self.rays_rendered) / self.rays_requested
            if self.rays_requested
            else 0.0
        )
        return report


def simulate(workload: Workload):
    return Simulation(workload).run()

"""Ray-level task scheduling: heavy/light classification, frame-time-model
placement, shared-ray deduplication, and the starvation-aware tick loop.

The scheduler is a single logical owner of all session and farm state; every
input arrives as a value on an ordered call sequence, so identical message
sequences replay to identical assignment sequences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .errors import CapacityError, DomainError
from .renderer import NhitEstimate


class TaskClass(Enum):
    HEAVY = "heavy"
    LIGHT = "light"


@dataclass
class RenderTask:
    """A schedulable unit: one tile (or whole-frame rect) of one asset for
    one or more users."""

    task_id: str
    asset_id: str
    user_id: str
    rays: int
    task_class: TaskClass = TaskClass.LIGHT
    shared_key: tuple | None = None
    shared_users: tuple = ()
    skip: bool = False  # zero-coverage: schedulable as a no-op
    render_s: float = 0.0  # synthetic/estimated execution time
    result_bytes: int = 0
    frame_id: tuple | None = None  # (user_id, frame_index)
    rect: tuple | None = None

    @property
    def users(self) -> tuple:
        return self.shared_users if self.shared_users else (self.user_id,)


@dataclass
class UserSession:
    """Scheduler-side view of one client."""

    user_id: str
    target_fps: float
    t_avg: float = 0.0  # moving average of completion time (s)
    wait_time: float = 0.0
    target_time: float = 0.0  # absolute deadline; due when now >= target_time
    last_frame_time: float = 0.0
    loaded_tasks: int = 0
    pending: list = field(default_factory=list)  # unrendered RenderTasks
    ema_rho: float = 0.3

    def __post_init__(self):
        if self.target_fps <= 0:
            raise DomainError("target fps must be positive")
        self.wait_time = 1.0 / self.target_fps - self.t_avg


@dataclass
class FarmView:
    """Capacity available to one scheduling tick."""

    heavy_slots: int
    light_worker_rays: list[int]  # remaining rays per light worker this tick

    @property
    def total_rays(self) -> int:
        return sum(self.light_worker_rays)


@dataclass
class ScheduleModel:
    """Frame-time model: completion = makespan + sum(D_i)/BW + C."""

    bandwidth_bytes_per_s: float
    compose_s: float

    def frame_time(self, makespan_s: float, total_bytes: int) -> float:
        return makespan_s + total_bytes / self.bandwidth_bytes_per_s + self.compose_s


@dataclass
class SharedRayModel:
    """Response-time model for n users viewing shared content.

    serial:      (k*T_M_S + T_N_S) * n + sum_i(k*T_M_i + T_N_i)
    shared-once: (k*T_M_S + T_N_S) + max_i(k*T_M_i + T_N_i)
    warm-cache:  max_i(k*T_M_i + T_N_i)
    """

    mesh_coeff_k: float = 1.0
    shared_mesh_s: float = 0.0  # T_M_S
    shared_render_s: float = 0.0  # T_N_S
    per_user_mesh_s: tuple = ()
    per_user_render_s: tuple = ()

    def _shared_term(self) -> float:
        return self.mesh_coeff_k * self.shared_mesh_s + self.shared_render_s

    def _per_user_terms(self):
        return [
            self.mesh_coeff_k * m + r
            for m, r in zip(self.per_user_mesh_s, self.per_user_render_s)
        ]

    def serial_time(self) -> float:
        n = len(self.per_user_render_s)
        return self._shared_term() * n + sum(self._per_user_terms())

    def shared_once_time(self) -> float:
        terms = self._per_user_terms()
        return self._shared_term() + (max(terms) if terms else 0.0)

    def cached_time(self) -> float:
        terms = self._per_user_terms()
        return max(terms) if terms else 0.0


@dataclass
class Thresholds:
    pix_fraction: float = 0.10
    depth: float = 2.0  # world units; typically 2x asset bounding radius


def classify_task(estimate: NhitEstimate, thresholds: Thresholds):
    """Heavy iff coverage >= pix threshold OR depth <= depth threshold;
    zero coverage is Light with a skip hint."""
    if estimate.n_pixel == 0:
        return TaskClass.LIGHT, True
    heavy = (
        estimate.frame_fraction >= thresholds.pix_fraction
        or estimate.avg_depth <= thresholds.depth
    )
    return (TaskClass.HEAVY if heavy else TaskClass.LIGHT), False


@dataclass
class Placement:
    heavy: list  # RenderTask per heavy slot
    light: list  # list per worker: list[RenderTask]
    predicted_frame_s: float
    dropped: list  # zero-coverage tasks


def plan_frame(tasks: list[RenderTask], model: ScheduleModel, farm: FarmView) -> Placement:
    """Place one frame's tasks: heavies on dedicated slots, lights packed
    longest-processing-time-first to greedily minimize the makespan term."""
    if not tasks:
        raise DomainError("plan_frame needs at least one task")
    dropped = [t for t in tasks if t.skip]
    live = [t for t in tasks if not t.skip]
    heavies = [t for t in live if t.task_class is TaskClass.HEAVY]
    lights = [t for t in live if t.task_class is TaskClass.LIGHT]
    if len(heavies) > farm.heavy_slots:
        raise CapacityError(
            f"{len(heavies)} heavy tasks exceed {farm.heavy_slots} heavy slots",
            overflow=[t.task_id for t in heavies[farm.heavy_slots:]],
        )
    n_workers = len(farm.light_worker_rays)
    if lights and n_workers == 0:
        raise CapacityError("light tasks with no light workers",
                            overflow=[t.task_id for t in lights])
    per_worker = [[] for _ in range(n_workers)]
    loads = [0.0] * n_workers
    for t in sorted(lights, key=lambda t: (-t.render_s, t.task_id)):
        w = loads.index(min(loads))
        per_worker[w].append(t)
        loads[w] += t.render_s
    makespan = max(
        [t.render_s for t in heavies] + [l for l in loads] + [0.0]
    )
    total_bytes = sum(t.result_bytes for t in live)
    return Placement(
        heavy=heavies,
        light=per_worker,
        predicted_frame_s=model.frame_time(makespan, total_bytes),
        dropped=dropped,
    )


def quantize_pose(pose: np.ndarray, trans_cell: float, rot_cell_deg: float = 5.0) -> tuple:
    """Pose -> shared-ray cache cell (translation grid + coarse view angles)."""
    pose = np.asarray(pose, dtype=np.float64)
    t = tuple(np.floor(pose[:3, 3] / trans_cell).astype(int).tolist())
    r = pose[:3, :3]
    yaw = math.degrees(math.atan2(r[1, 0], r[0, 0]))
    pitch = math.degrees(math.asin(max(-1.0, min(1.0, -r[2, 0]))))
    roll = math.degrees(math.atan2(r[2, 1], r[2, 2]))
    a = tuple(int(math.floor(v / rot_cell_deg)) for v in (yaw, pitch, roll))
    return t + a


@dataclass
class RayCache:
    """Historical table of recently rendered shared keys."""

    ttl_s: float = 2.0
    entries: dict = field(default_factory=dict)  # key -> expiry time

    def hit(self, key, now: float) -> bool:
        expiry = self.entries.get(key)
        return expiry is not None and expiry > now

    def insert(self, key, now: float) -> None:
        self.entries[key] = now + self.ttl_s

    def evict_expired(self, now: float) -> None:
        self.entries = {k: e for k, e in self.entries.items() if e > now}


@dataclass
class DedupResult:
    shared: list  # merged tasks fanned out to >= 2 users
    dedicated: list  # single-user tasks
    cached: list  # tasks served entirely from the cache (not rendered)

    @property
    def scheduled(self) -> list:
        return self.shared + self.dedicated


def dedup_tasks(tasks: list[RenderTask], cache: RayCache, now: float) -> DedupResult:
    """Merge tasks whose (asset, pose cell, rect) keys collide; serve keys
    still warm in the cache without rendering at all."""
    groups: dict = {}
    keyless = []
    for t in tasks:
        if t.shared_key is None:
            keyless.append(t)
        else:
            groups.setdefault(t.shared_key, []).append(t)

    shared, dedicated, cached = [], [], list()
    for key, group in sorted(groups.items(), key=lambda kv: str(kv[0])):
        if cache.hit(key, now):
            cached.extend(group)
            continue
        if len(group) == 1:
            dedicated.append(group[0])
            continue
        lead = group[0]
        merged = replace(
            lead,
            task_class=TaskClass.HEAVY,  # shareable rays go to the heavy farm
            shared_users=tuple(t.user_id for t in group),
        )
        shared.append(merged)
    dedicated.extend(keyless)
    return DedupResult(shared=shared, dedicated=dedicated, cached=cached)


def update_wait_time(session: UserSession, completion_s: float, now: float) -> UserSession:
    """Fold a completed frame time into the session's pacing state."""
    if completion_s < 0:
        raise DomainError("completion time must be >= 0")
    rho = session.ema_rho
    session.t_avg = (1.0 - rho) * session.t_avg + rho * completion_s
    session.wait_time = 1.0 / session.target_fps - session.t_avg
    session.last_frame_time = now
    session.target_time = now + max(session.wait_time, 0.0)
    return session


@dataclass
class TickResult:
    assignments: list  # RenderTasks chosen to render this tick
    admission_denied: bool
    starved_users: list
    deferred_users: list  # due users that did not fit this tick
    rays_assigned: int


def schedule_tick(
    sessions: list[UserSession],
    farm: FarmView,
    now: float,
    tick_s: float,
) -> TickResult:
    """One pass of the scheduling policy.

    Users are served in (loaded_tasks, target_time) order; users whose
    deadline passed a full tick ago are starved and served first, with
    admission denied until none remain.  A user is due once now reaches its
    target_time; the remaining capacity is filled user-by-user, shared tasks
    before dedicated, stopping at the first user that no longer fits.
    """
    for s in sessions:
        s.loaded_tasks = len(s.pending)

    order = sorted(sessions, key=lambda s: (s.loaded_tasks, s.target_time, s.user_id))
    due = [s for s in order if s.pending and s.target_time <= now]
    starved = [s for s in due if s.target_time <= now - tick_s]

    heavy_free = farm.heavy_slots
    rays = farm.total_rays
    assignments = []
    assigned_ids: set = set()
    rays_assigned = 0
    deferred = []

    def try_assign(task: RenderTask) -> bool:
        nonlocal heavy_free, rays, rays_assigned
        if id(task) in assigned_ids:
            return True  # shared task already taken via another user
        if task.skip:
            assignments.append(task)
            assigned_ids.add(id(task))
            return True
        if task.task_class is TaskClass.HEAVY:
            if heavy_free < 1:
                return False
            heavy_free -= 1
        else:
            if task.rays > rays:
                return False
            rays -= task.rays
            rays_assigned += task.rays
        assignments.append(task)
        assigned_ids.add(id(task))
        return True

    def user_fits(s: UserSession) -> bool:
        live = [t for t in s.pending if not t.skip and id(t) not in assigned_ids]
        need_heavy = sum(1 for t in live if t.task_class is TaskClass.HEAVY)
        need_rays = sum(t.rays for t in live if t.task_class is TaskClass.LIGHT)
        return need_heavy <= heavy_free and need_rays <= rays

    served = set()
    for s in starved:
        for t in sorted(s.pending, key=lambda t: (t.task_class is not TaskClass.HEAVY, t.task_id)):
            try_assign(t)
        served.add(s.user_id)

    for s in due:
        if s.user_id in served:
            continue
        if not user_fits(s):
            deferred.append(s.user_id)
            break
        shared = [t for t in s.pending if t.shared_users]
        dedicated = [t for t in s.pending if not t.shared_users]
        for t in sorted(shared, key=lambda t: t.task_id):
            try_assign(t)
        for t in sorted(dedicated, key=lambda t: t.task_id):
            try_assign(t)
        served.add(s.user_id)

    for s in sessions:
        s.pending = [t for t in s.pending if id(t) not in assigned_ids]

    return TickResult(
        assignments=assignments,
        admission_denied=bool(starved),
        starved_users=[s.user_id for s in starved],
        deferred_users=deferred,
        rays_assigned=rays_assigned,
    )


def efficiency_report(tick_log: list[dict], model: SharedRayModel | None = None) -> dict:
    """Aggregate a simulation/trace into the metrics the tick loop promises."""
    if not tick_log:
        raise DomainError("efficiency report needs at least one logged tick")
    total_requested = sum(row.get("rays_requested", 0) for row in tick_log)
    total_rendered = sum(row.get("rays_rendered", 0) for row in tick_log)
    starvation_events = sum(len(row.get("starved_users", ())) for row in tick_log)
    denials = sum(row.get("join_denials", 0) for row in tick_log)
    frames: dict = {}
    for row in tick_log:
        for user, count in row.get("frames_delivered", {}).items():
            frames[user] = frames.get(user, 0) + count
    duration_s = tick_log[-1].get("time_s", 0.0) or 1.0
    report = {
        "ticks": len(tick_log),
        "duration_s": duration_s,
        "rays_requested": total_requested,
        "rays_rendered": total_rendered,
        "dedup_ratio": (total_requested - total_rendered) / total_requested
        if total_requested
        else 0.0,
        "achieved_fps": {u: n / duration_s for u, n in frames.items()},
        "starvation_events": starvation_events,
        "join_denials": denials,
    }
    if model is not None:
        report["model"] = {
            "serial_s": model.serial_time(),
            "shared_once_s": model.shared_once_time(),
            "cached_s": model.cached_time(),
            "speedup_shared": model.serial_time() / model.shared_once_time()
            if model.shared_once_time() > 0
            else float("inf"),
        }
    return report

"""Synthetic ground truth for training and evaluation.

A scene is a room box containing textured box/sphere primitives, each with a
planted unit embedding standing in for its CLIP vector. Views are rendered by
an analytic ray tracer (independent of the splat rasterizer by design), so
color, depth, and instance ids are exact. Trajectories orbit the scene with
an optional pose-drift random walk and bundle-adjustment events that restore
ground-truth poses.

World frame: z up, objects resting on the z=0 floor plane.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from .errors import DataError
from .formats import KIND_FLAT, KIND_GRID, EmbeddingRecord, write_embeddings
from .geometry import (
    Image,
    PinholeCamera,
    Se3Pose,
    matrix_to_quat,
    project,
    quat_from_rotvec,
)
from .streams import (
    Keyframe,
    PoseUpdateEvent,
    RigConfig,
    cam_from_json,
    cam_to_json,
    pose_from_json,
    pose_to_json,
    rig_expand,
    write_stream,
)

BACKGROUND_ID = -1
CHECKER_PERIOD = 0.08
CHECKER_DIM = 0.78
LIGHT_DIR = np.array([0.4, -0.3, 0.85]) / np.linalg.norm([0.4, -0.3, 0.85])
DEFAULT_TARGET_SCALES = tuple(float(s) for s in np.geomspace(0.05, 2.0, 6))
RAY_EPS = 1e-9


@dataclasses.dataclass
class SceneObject:
    name: str
    kind: str  # "box" | "sphere"
    pose: Se3Pose
    size: np.ndarray  # box: half extents (3,); sphere: size[0] = radius
    color: np.ndarray
    embedding_index: int

    def aabb(self):
        if self.kind == "sphere":
            r = float(self.size[0])
            return self.pose.t - r, self.pose.t + r
        corners = np.array(
            [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], np.float64
        ) * self.size
        world = self.pose.apply(corners)
        return world.min(axis=0), world.max(axis=0)


@dataclasses.dataclass
class SceneSpec:
    room_lo: np.ndarray
    room_hi: np.ndarray
    objects: list
    background_color: np.ndarray
    seed: int
    embeddings: np.ndarray  # (num objects, D)
    background_embedding: np.ndarray
    negatives: np.ndarray  # (4, D)

    def __post_init__(self):
        for obj in self.objects:
            lo, hi = obj.aabb()
            if np.any(lo < self.room_lo - 1e-9) or np.any(hi > self.room_hi + 1e-9):
                raise DataError(f"object {obj.name!r} extends outside the room")
        planted = np.vstack(
            [self.embeddings, self.background_embedding[None, :], self.negatives]
        )
        dots = planted @ planted.T
        off = np.abs(dots - np.eye(len(planted)))
        if off.max() >= 0.1:
            raise DataError("planted embeddings are not near-orthogonal")

    @property
    def embed_dim(self) -> int:
        return self.embeddings.shape[1]

    def object_names(self):
        return [o.name for o in self.objects]


@dataclasses.dataclass
class TrajectorySpec:
    waypoints: np.ndarray  # (K, 3)
    n_keyframes: int
    look_at: np.ndarray
    closed: bool = True
    sigma_t: float = 0.0  # drift translation stddev per keyframe (m)
    sigma_r: float = 0.0  # drift rotation stddev per keyframe (rad)
    ba_interval: int = 0  # BA event every this many train keyframes; 0 disables
    holdout_every: int = 0  # every k-th step becomes a held-out eval view; 0 disables
    seconds_per_keyframe: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.sigma_t < 0 or self.sigma_r < 0:
            raise DataError("drift sigmas must be nonnegative")
        if self.ba_interval < 0:
            raise DataError("ba_interval must be >= 1, or 0 to disable")


def orthonormal_embeddings(rng: np.random.Generator, count: int, dim: int) -> np.ndarray:
    if count > dim:
        raise DataError(f"cannot plant {count} orthogonal embeddings in {dim} dims")
    q, _ = np.linalg.qr(rng.normal(0.0, 1.0, (dim, count)))
    return np.ascontiguousarray(q.T)


def default_scene(seed: int = 0, embed_dim: int = 64) -> SceneSpec:
    """Desk scene: 15 named objects, several nested small-on-large pairs."""

    def box(name, c, h, color):
        return (name, "box", np.array(c), np.array(h), np.array(color))

    def sphere(name, c, r, color):
        return (name, "sphere", np.array(c), np.array([r, r, r]), np.array(color))

    raw = [
        box("table", (0.0, 0.0, 0.05), (0.55, 0.40, 0.05), (0.55, 0.36, 0.20)),
        box("tray", (0.25, 0.18, 0.1125), (0.12, 0.09, 0.0125), (0.80, 0.80, 0.75)),
        box("button", (0.25, 0.18, 0.14), (0.02, 0.02, 0.015), (0.85, 0.10, 0.10)),
        sphere("mug", (-0.30, 0.20, 0.145), 0.045, (0.20, 0.40, 0.80)),
        sphere("ball", (0.10, -0.25, 0.16), 0.06, (0.90, 0.60, 0.10)),
        box("book", (-0.15, -0.20, 0.12), (0.09, 0.06, 0.02), (0.15, 0.50, 0.25)),
        box("pencil", (0.05, 0.05, 0.11), (0.07, 0.008, 0.008), (0.95, 0.80, 0.20)),
        box("block", (0.42, -0.20, 0.14), (0.04, 0.04, 0.04), (0.60, 0.20, 0.70)),
        sphere("marble", (-0.15, -0.20, 0.1525), 0.0125, (0.90, 0.90, 0.95)),
        sphere("lamp", (-0.42, -0.25, 0.18), 0.08, (0.95, 0.95, 0.60)),
        box("bottle", (0.35, 0.30, 0.16), (0.025, 0.025, 0.06), (0.10, 0.65, 0.65)),
        box("plate", (-0.05, 0.30, 0.105), (0.08, 0.08, 0.005), (0.90, 0.85, 0.80)),
        sphere("apple", (-0.05, 0.30, 0.14), 0.03, (0.75, 0.10, 0.15)),
        box("bin", (-0.65, 0.45, 0.12), (0.12, 0.12, 0.12), (0.30, 0.30, 0.35)),
        sphere("stone", (0.60, -0.50, 0.07), 0.07, (0.50, 0.50, 0.48)),
    ]
    rng = np.random.default_rng(seed)
    basis = orthonormal_embeddings(rng, len(raw) + 1 + 4, embed_dim)
    objects = [
        SceneObject(
            name=name,
            kind=kind,
            pose=Se3Pose(t=center, q=np.array([1.0, 0.0, 0.0, 0.0])),
            size=size,
            color=color,
            embedding_index=i,
        )
        for i, (name, kind, center, size, color) in enumerate(raw)
    ]
    return SceneSpec(
        room_lo=np.array([-1.6, -1.6, 0.0]),
        room_hi=np.array([1.6, 1.6, 2.2]),
        objects=objects,
        background_color=np.array([0.62, 0.64, 0.68]),
        seed=seed,
        embeddings=basis[: len(raw)],
        background_embedding=basis[len(raw)],
        negatives=basis[len(raw) + 1 :],
    )


def default_rig(width: int = 96, height: int = 72, fov_scale: float = 0.85) -> RigConfig:
    f = fov_scale * width
    cam = PinholeCamera(fx=f, fy=f, cx=width / 2, cy=height / 2, width=width, height=height)
    return RigConfig(primary="cam0", cameras={"cam0": cam}, extrinsics={"cam0": Se3Pose.identity()})


def default_trajectory(n_keyframes: int, **kw) -> TrajectorySpec:
    angles = np.arange(8) * (2.0 * np.pi / 8)
    radius = 1.25
    heights = np.where(np.arange(8) % 2 == 0, 0.55, 0.80)
    waypoints = np.stack(
        [radius * np.cos(angles), radius * np.sin(angles), heights], axis=1
    )
    return TrajectorySpec(
        waypoints=waypoints,
        n_keyframes=n_keyframes,
        look_at=np.array([0.0, 0.0, 0.12]),
        closed=True,
        **kw,
    )


# ---------------------------------------------------------------------------
# poses along the path
# ---------------------------------------------------------------------------

WORLD_DOWN = np.array([0.0, 0.0, -1.0])


def look_at_pose(position: np.ndarray, target: np.ndarray) -> Se3Pose:
    """Camera at `position` with +z toward `target`, +y as close to world down."""
    f = np.asarray(target, np.float64) - np.asarray(position, np.float64)
    nf = np.linalg.norm(f)
    if nf < 1e-12:
        raise DataError("look_at target coincides with camera position")
    f = f / nf
    r = np.cross(WORLD_DOWN, f)
    nr = np.linalg.norm(r)
    if nr < 1e-9:
        raise DataError("camera looking straight up/down has no stable roll")
    r = r / nr
    d = np.cross(f, r)
    rot = np.stack([r, d, f], axis=1)
    return Se3Pose(t=np.asarray(position, np.float64), q=matrix_to_quat(rot))


def trajectory_poses(traj: TrajectorySpec):
    """Ground-truth primary poses, arclength-uniform along the waypoint path."""
    wp = np.asarray(traj.waypoints, np.float64)
    pts = np.vstack([wp, wp[:1]]) if traj.closed else wp
    seg = np.diff(pts, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    total = cum[-1]
    if total < 1e-9:
        raise DataError("trajectory has zero length")
    # closed paths exclude the endpoint to avoid duplicating the start pose
    end = total if traj.closed else total * (1.0 - 1e-12)
    svals = np.linspace(0.0, end, traj.n_keyframes, endpoint=not traj.closed)
    poses = []
    for s in svals:
        k = min(np.searchsorted(cum, s, side="right") - 1, len(seg) - 1)
        frac = (s - cum[k]) / max(seg_len[k], 1e-12)
        poses.append(look_at_pose(pts[k] + frac * seg[k], traj.look_at))
    return poses


# ---------------------------------------------------------------------------
# analytic renderer
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class SimRender:
    color: Image
    depth: Image
    ids: np.ndarray  # (H, W) int32, BACKGROUND_ID for room surfaces


def _pixel_rays(cam: PinholeCamera, pose: Se3Pose):
    u = np.arange(cam.width) + 0.5
    v = np.arange(cam.height) + 0.5
    gu, gv = np.meshgrid(u, v)
    d_cam = np.stack(
        [(gu - cam.cx) / cam.fx, (gv - cam.cy) / cam.fy, np.ones_like(gu)], axis=-1
    )
    d_world = d_cam.reshape(-1, 3) @ pose.rotation_matrix().T
    return pose.t, d_world  # t along d_world equals camera-frame depth


def _box_intersect(o: np.ndarray, d: np.ndarray, half: np.ndarray):
    """Entry distance + object-frame entry normal for rays vs centered box."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - o) / d
        t2 = (half - o) / d
    tn = np.minimum(t1, t2)
    tf = np.maximum(t1, t2)
    near_axis = np.argmax(tn, axis=1)
    t_near = tn[np.arange(len(d)), near_axis]
    t_far = tf.min(axis=1)
    hit = (t_near <= t_far) & (t_near > RAY_EPS)
    t = np.where(hit, t_near, np.inf)
    normal = np.zeros_like(d)
    rows = np.arange(len(d))
    normal[rows, near_axis] = -np.sign(d[rows, near_axis])
    return t, normal


def _sphere_intersect(o: np.ndarray, d: np.ndarray, center: np.ndarray, radius: float):
    oc = o - center
    a = np.sum(d * d, axis=1)
    b = 2.0 * d @ oc
    c = oc @ oc - radius * radius
    disc = b * b - 4.0 * a * c
    ok = disc >= 0.0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t0 = (-b - sq) / (2.0 * a)
    t1 = (-b + sq) / (2.0 * a)
    t = np.where(t0 > RAY_EPS, t0, t1)  # camera may sit inside large spheres
    t = np.where(ok & (t > RAY_EPS), t, np.inf)
    return t


def _room_exit(o: np.ndarray, d: np.ndarray, lo: np.ndarray, hi: np.ndarray):
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - o) / d
        t2 = (hi - o) / d
    tf = np.maximum(t1, t2)
    far_axis = np.argmin(tf, axis=1)
    rows = np.arange(len(d))
    t = tf[rows, far_axis]
    normal = np.zeros_like(d)
    normal[rows, far_axis] = -np.sign(d[rows, far_axis])  # inward face normal
    return t, normal


def _checker(points: np.ndarray) -> np.ndarray:
    cells = np.floor(points / CHECKER_PERIOD).astype(np.int64).sum(axis=1)
    return np.where(cells % 2 == 0, 1.0, CHECKER_DIM)


def render_view(scene: SceneSpec, cam: PinholeCamera, pose: Se3Pose) -> SimRender:
    if np.any(pose.t < scene.room_lo) or np.any(pose.t > scene.room_hi):
        raise DataError("camera must be inside the room")
    origin, dirs = _pixel_rays(cam, pose)
    n = dirs.shape[0]
    best_t, normals = _room_exit(origin[None, :], dirs, scene.room_lo, scene.room_hi)
    ids = np.full(n, BACKGROUND_ID, np.int32)

    for i, obj in enumerate(scene.objects):
        if obj.kind == "box":
            r_inv = obj.pose.rotation_matrix().T
            o_local = r_inv @ (origin - obj.pose.t)
            d_local = dirs @ r_inv.T
            t, n_local = _box_intersect(o_local[None, :], d_local, obj.size)
            n_world = n_local @ r_inv
        else:
            t = _sphere_intersect(origin, dirs, obj.pose.t, float(obj.size[0]))
            n_world = None
        closer = t < best_t
        if n_world is None:
            hits = origin + t[closer, None] * dirs[closer]
            n_hit = (hits - obj.pose.t) / float(obj.size[0])
            normals[closer] = n_hit
        else:
            normals[closer] = n_world[closer]
        ids[closer] = i
        best_t = np.where(closer, t, best_t)

    points = origin + best_t[:, None] * dirs
    shade = 0.72 + 0.28 * np.maximum(normals @ LIGHT_DIR, 0.0)
    palette = np.vstack([scene.background_color[None, :]] + [o.color[None, :] for o in scene.objects])
    base = palette[ids + 1]
    color = np.clip(base * (shade * _checker(points))[:, None], 0.0, 1.0)

    h, w = cam.height, cam.width
    return SimRender(
        color=Image(color.reshape(h, w, 3)),
        depth=Image(best_t.reshape(h, w, 1)),
        ids=ids.reshape(h, w),
    )


# ---------------------------------------------------------------------------
# embedding-target oracle
# ---------------------------------------------------------------------------


def _id_integrals(ids: np.ndarray, num_objects: int) -> np.ndarray:
    h, w = ids.shape
    ii = np.zeros((num_objects + 1, h + 1, w + 1))
    for k in range(-1, num_objects):
        mask = (ids == k).astype(np.float64)
        ii[k + 1, 1:, 1:] = mask.cumsum(axis=0).cumsum(axis=1)
    return ii


def _crop_counts(ii: np.ndarray, cam: PinholeCamera, depth: np.ndarray, scale: float):
    h, w = depth.shape
    u = np.arange(w) + 0.5
    v = np.arange(h) + 0.5
    gu, gv = np.meshgrid(u, v)
    z = np.maximum(depth, 1e-6)
    half_u = 0.5 * scale * cam.fx / z
    half_v = 0.5 * scale * cam.fy / z
    j0 = np.clip(np.ceil(gu - half_u - 0.5), 0, w - 1).astype(np.int64)
    j1 = np.clip(np.floor(gu + half_u - 0.5), 0, w - 1).astype(np.int64)
    i0 = np.clip(np.ceil(gv - half_v - 0.5), 0, h - 1).astype(np.int64)
    i1 = np.clip(np.floor(gv + half_v - 0.5), 0, h - 1).astype(np.int64)
    j1 = np.maximum(j1, j0)  # a crop always covers its own pixel
    i1 = np.maximum(i1, i0)
    counts = (
        ii[:, i1 + 1, j1 + 1] - ii[:, i0, j1 + 1] - ii[:, i1 + 1, j0] + ii[:, i0, j0]
    )
    return counts  # (num_objects + 1, h, w)


def embedding_target_grid(
    scene: SceneSpec, cam: PinholeCamera, pose: Se3Pose, scale: float, render: SimRender | None = None
) -> np.ndarray:
    """Per-pixel supervision target at one physical scale, shape (H, W, D).

    Each pixel's target is the area-weighted mean of planted embeddings inside
    the scale-sized square crop around it (window in pixels from the physical
    scale at that pixel's depth), L2-normalized. Room surfaces contribute the
    background embedding.
    """
    render = render or render_view(scene, cam, pose)
    ii = _id_integrals(render.ids, len(scene.objects))
    counts = _crop_counts(ii, cam, render.depth.data[:, :, 0].astype(np.float64), scale)
    planted = np.vstack([scene.background_embedding[None, :], scene.embeddings])
    target = np.tensordot(counts, planted, axes=(0, 0))
    norms = np.linalg.norm(target, axis=2, keepdims=True)
    return target / np.maximum(norms, 1e-12)


def write_target_pyramid(path, scene, cam, pose, scales) -> None:
    render = render_view(scene, cam, pose)
    records = [
        EmbeddingRecord(
            kind=KIND_GRID,
            scale=s,
            data=embedding_target_grid(scene, cam, pose, s, render=render).astype(np.float32),
        )
        for s in scales
    ]
    write_embeddings(path, records)


# ---------------------------------------------------------------------------
# stream generation
# ---------------------------------------------------------------------------


def _camera_order(rig: RigConfig):
    rest = sorted(cid for cid in rig.cameras if cid != rig.primary)
    return [rig.primary] + rest


def generate_stream(
    scene: SceneSpec,
    traj: TrajectorySpec,
    rig: RigConfig,
    out_path,
    target_scales=DEFAULT_TARGET_SCALES,
    language_targets: bool = True,
    target_downscale: int = 4,
) -> dict:
    """Render the full stream to disk; returns the ground-truth sidecar dict.

    Writes manifest + PNGs, per-keyframe embedding-target pyramids, the
    planted query/negative embedding files, annotations for the recall
    protocol, and ground_truth.json.
    """
    root = Path(out_path)
    root.mkdir(parents=True, exist_ok=True)
    gt_primary = trajectory_poses(traj)
    rng = np.random.default_rng(traj.seed)
    order = _camera_order(rig)

    drift = Se3Pose.identity()
    records = []
    sidecar_poses = []
    train_seqs = []
    holdout_seqs = []
    seq = 0
    train_steps = 0
    # map seq -> ground-truth pose for BA corrections
    gt_by_seq = {}

    for step, gt in enumerate(gt_primary):
        is_holdout = traj.holdout_every > 0 and (step + 1) % traj.holdout_every == 0
        if is_holdout:
            measured = gt
        else:
            if traj.sigma_t > 0 or traj.sigma_r > 0:
                dt = rng.normal(0.0, traj.sigma_t, 3)
                dr = rng.normal(0.0, traj.sigma_r, 3)
                drift = Se3Pose(t=dt, q=quat_from_rotvec(dr)).compose(drift)
            measured = drift.compose(gt)
        cam_poses_true = rig_expand(gt, rig)
        cam_poses_measured = rig_expand(measured, rig)

        for cid in order:
            cam = rig.cameras[cid]
            true_pose = cam_poses_true[cid]
            render = render_view(scene, cam, true_pose)
            targets_name = None
            if language_targets and not is_holdout:
                targets_name = f"kf{seq:06d}_{cid}.legsemb"
                small = cam.scaled(1.0 / target_downscale)
                write_target_pyramid(root / targets_name, scene, small, true_pose, target_scales)
            kf = Keyframe(
                seq=seq,
                camera_id=cid,
                timestamp=step * traj.seconds_per_keyframe,
                image=render.color,
                depth=render.depth,
                pose=cam_poses_measured[cid],
                cam=cam,
                targets_path=targets_name,
                holdout=is_holdout,
            )
            records.append(kf)
            gt_by_seq[seq] = true_pose
            sidecar_poses.append(
                {
                    "seq": seq,
                    "camera_id": cid,
                    "pose": pose_to_json(true_pose),
                    "holdout": is_holdout,
                    "intrinsics": cam_to_json(cam),
                }
            )
            (holdout_seqs if is_holdout else train_seqs).append(seq)
            seq += 1

        if not is_holdout:
            train_steps += 1
            if traj.ba_interval > 0 and train_steps % traj.ba_interval == 0:
                corrections = [(s, gt_by_seq[s]) for s in train_seqs]
                records.append(PoseUpdateEvent(trigger_seq=seq - 1, corrections=corrections))
                drift = Se3Pose.identity()

    write_stream(root, records)
    write_embeddings(
        root / "queries.legsemb",
        [EmbeddingRecord(KIND_FLAT, 0.0, scene.embeddings.astype(np.float32))],
    )
    write_embeddings(
        root / "negatives.legsemb",
        [EmbeddingRecord(KIND_FLAT, 0.0, scene.negatives.astype(np.float32))],
    )

    sidecar = {
        "seed": scene.seed,
        "embed_dim": scene.embed_dim,
        "room": {"lo": scene.room_lo.tolist(), "hi": scene.room_hi.tolist()},
        "background_color": scene.background_color.tolist(),
        "objects": [
            {
                "name": o.name,
                "kind": o.kind,
                "pose": pose_to_json(o.pose),
                "size": np.asarray(o.size, np.float64).tolist(),
                "color": np.asarray(o.color, np.float64).tolist(),
                "embedding_index": o.embedding_index,
                "aabb": {"lo": o.aabb()[0].tolist(), "hi": o.aabb()[1].tolist()},
            }
            for o in scene.objects
        ],
        "embeddings": scene.embeddings.tolist(),
        "background_embedding": scene.background_embedding.tolist(),
        "negatives": scene.negatives.tolist(),
        "true_poses": sidecar_poses,
        "holdout_seqs": holdout_seqs,
        "train_seqs": train_seqs,
        "target_scales": [float(s) for s in target_scales],
    }
    with open(root / "ground_truth.json", "w") as f:
        json.dump(sidecar, f)

    if holdout_seqs:
        annotations = make_annotations(sidecar)
        with open(root / "annotations.json", "w") as f:
            json.dump(annotations, f)
    return sidecar


# ---------------------------------------------------------------------------
# annotations for the box-projection recall protocol
# ---------------------------------------------------------------------------


def _project_aabb(lo, hi, cam: PinholeCamera, pose: Se3Pose):
    corners = np.array(
        [[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])]
    )
    uv, z = project(cam, pose, corners)
    if np.any(z <= 0.01):
        return None
    u0, v0 = uv.min(axis=0)
    u1, v1 = uv.max(axis=0)
    box = [
        float(np.clip(u0, 0, cam.width)),
        float(np.clip(v0, 0, cam.height)),
        float(np.clip(u1, 0, cam.width)),
        float(np.clip(v1, 0, cam.height)),
    ]
    if box[2] - box[0] < 1.0 or box[3] - box[1] < 1.0:
        return None
    return box


def make_annotations(sidecar: dict) -> list:
    """One annotation per object: its 2D box in the best held-out view."""
    views = [p for p in sidecar["true_poses"] if p["holdout"]]
    if not views:
        raise DataError("no held-out views available for annotations")
    out = []
    for obj in sidecar["objects"]:
        lo = np.array(obj["aabb"]["lo"])
        hi = np.array(obj["aabb"]["hi"])
        best = None
        for view in views:
            cam = cam_from_json(view["intrinsics"])
            pose = pose_from_json(view["pose"])
            box = _project_aabb(lo, hi, cam, pose)
            if box is None:
                continue
            area = (box[2] - box[0]) * (box[3] - box[1])
            # prefer views where the box is fully inside the image
            inside = box[0] > 0 and box[1] > 0 and box[2] < cam.width and box[3] < cam.height
            key = (inside, area)
            if best is None or key > best[0]:
                best = (key, view, box)
        if best is None:
            raise DataError(f"object {obj['name']!r} is not visible in any held-out view")
        _, view, box = best
        out.append(
            {
                "query": obj["name"],
                "query_index": obj["embedding_index"],
                "camera": {"intrinsics": view["intrinsics"], "pose": view["pose"]},
                "box": box,
            }
        )
    return out

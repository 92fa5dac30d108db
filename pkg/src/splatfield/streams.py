"""Keyframe stream IO and multi-camera rig handling.

A stream is a directory with manifest.jsonl plus PNG images. Each manifest
line is either a keyframe record (pose, intrinsics, file names) or a
bundle-adjustment event carrying corrected poses for earlier keyframes.
Color images are 8-bit PNG; depth is 16-bit PNG in millimeters with 0
marking invalid pixels.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import queue
import threading
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import DataError
from .geometry import Image, PinholeCamera, Se3Pose

log = logging.getLogger(__name__)

PREFETCH_CAPACITY = 64
DEPTH_SCALE = 1000.0  # meters -> millimeters in the u16 depth PNG


@dataclasses.dataclass
class Keyframe:
    """One registered view: color + depth + camera-to-world pose."""

    seq: int
    camera_id: str
    timestamp: float
    image: Image
    depth: Image
    pose: Se3Pose
    cam: PinholeCamera
    targets_path: str | None = None
    holdout: bool = False

    def __post_init__(self):
        if (self.image.height, self.image.width) != (self.cam.height, self.cam.width):
            raise DataError(
                f"keyframe {self.seq}: image is {self.image.width}x{self.image.height}, "
                f"camera expects {self.cam.width}x{self.cam.height}"
            )
        if (self.depth.height, self.depth.width) != (self.cam.height, self.cam.width):
            raise DataError(f"keyframe {self.seq}: depth dimensions do not match camera")


@dataclasses.dataclass
class PoseUpdateEvent:
    """Bundle-adjustment output: corrected poses for keyframes <= trigger_seq."""

    trigger_seq: int
    corrections: list  # [(seq, Se3Pose), ...]

    def __post_init__(self):
        for seq, _ in self.corrections:
            if seq > self.trigger_seq:
                raise DataError(
                    f"pose update at seq {self.trigger_seq} corrects future seq {seq}"
                )


@dataclasses.dataclass
class RigConfig:
    """Camera rig: intrinsics per camera and fixed offsets from the primary."""

    primary: str
    cameras: dict
    extrinsics: dict  # camera_id -> Se3Pose, primary-frame pose of that camera

    def __post_init__(self):
        if self.primary not in self.cameras:
            raise DataError(f"primary camera {self.primary!r} not in rig")
        if set(self.cameras) != set(self.extrinsics):
            raise DataError("rig cameras and extrinsics must list the same ids")
        ex = self.extrinsics[self.primary]
        if np.linalg.norm(ex.t) > 1e-9 or abs(abs(ex.q[0]) - 1.0) > 1e-9:
            raise DataError("primary camera extrinsic must be the identity")


def rig_expand(primary_pose: Se3Pose, rig: RigConfig) -> dict:
    """World pose per camera: primary pose composed with each fixed offset."""
    return {cid: primary_pose.compose(ex) for cid, ex in rig.extrinsics.items()}


# ---------------------------------------------------------------------------
# JSON fragments shared by manifests, sidecars and checkpoints
# ---------------------------------------------------------------------------


def pose_to_json(pose: Se3Pose) -> dict:
    return {"t": [float(v) for v in pose.t], "q": [float(v) for v in pose.q]}


def pose_from_json(obj: dict) -> Se3Pose:
    return Se3Pose(t=np.array(obj["t"], np.float64), q=np.array(obj["q"], np.float64))


def cam_to_json(cam: PinholeCamera) -> dict:
    return {
        "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
        "width": cam.width, "height": cam.height,
    }


def cam_from_json(obj: dict) -> PinholeCamera:
    return PinholeCamera(
        fx=float(obj["fx"]), fy=float(obj["fy"]),
        cx=float(obj["cx"]), cy=float(obj["cy"]),
        width=int(obj["width"]), height=int(obj["height"]),
    )


# ---------------------------------------------------------------------------
# PNG helpers
# ---------------------------------------------------------------------------


def write_color_png(path, image: Image) -> None:
    data = np.clip(np.round(image.data * 255.0), 0, 255).astype(np.uint8)
    if data.shape[2] == 1:
        data = data[:, :, 0]
    PILImage.fromarray(data).save(path)


def read_color_png(path) -> Image:
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), np.float32)
    return Image(arr / 255.0)


def write_depth_png(path, depth: Image) -> None:
    mm = np.round(depth.data[:, :, 0] * DEPTH_SCALE)
    mm = np.clip(mm, 0, 65535).astype(np.uint16)
    PILImage.fromarray(mm).save(path)  # uint16 array maps to 16-bit grayscale


def read_depth_png(path) -> Image:
    with PILImage.open(path) as im:
        arr = np.asarray(im, np.float32)
    return Image(arr / DEPTH_SCALE)  # invalid pixels (0) stay 0


# ---------------------------------------------------------------------------
# manifest read/write
# ---------------------------------------------------------------------------


def _keyframe_record(kf: Keyframe, image_name: str, depth_name: str) -> dict:
    rec = {
        "seq": kf.seq,
        "camera_id": kf.camera_id,
        "timestamp": kf.timestamp,
        "pose": pose_to_json(kf.pose),
        "intrinsics": cam_to_json(kf.cam),
        "image": image_name,
        "depth": depth_name,
    }
    if kf.targets_path is not None:
        rec["targets"] = kf.targets_path
    if kf.holdout:
        rec["holdout"] = True
    return rec


def _event_record(ev: PoseUpdateEvent) -> dict:
    return {
        "event": "ba",
        "trigger_seq": ev.trigger_seq,
        "corrections": [{"seq": s, "pose": pose_to_json(p)} for s, p in ev.corrections],
    }


def frame_basename(kf: Keyframe) -> str:
    return f"kf{kf.seq:06d}_{kf.camera_id}"


def write_stream(path, records) -> None:
    """Write keyframes and events to a stream directory, in order."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "manifest.jsonl", "w") as mf:
        for rec in records:
            if isinstance(rec, PoseUpdateEvent):
                mf.write(json.dumps(_event_record(rec)) + "\n")
                continue
            base = frame_basename(rec)
            image_name = base + ".png"
            depth_name = base + "_depth.png"
            write_color_png(root / image_name, rec.image)
            write_depth_png(root / depth_name, rec.depth)
            mf.write(json.dumps(_keyframe_record(rec, image_name, depth_name)) + "\n")


def _parse_line(root: Path, lineno: int, obj: dict):
    if "event" in obj:
        if obj["event"] != "ba":
            raise DataError(f"manifest line {lineno}: unknown event {obj['event']!r}")
        corrections = [
            (int(c["seq"]), pose_from_json(c["pose"])) for c in obj["corrections"]
        ]
        return PoseUpdateEvent(trigger_seq=int(obj["trigger_seq"]), corrections=corrections)

    seq = int(obj["seq"])
    cam = cam_from_json(obj["intrinsics"])
    image_path = root / obj["image"]
    depth_path = root / obj["depth"]
    if not image_path.is_file():
        raise DataError(f"keyframe {seq}: missing image file {obj['image']}")
    if not depth_path.is_file():
        raise DataError(f"keyframe {seq}: missing depth file {obj['depth']}")
    return Keyframe(
        seq=seq,
        camera_id=str(obj["camera_id"]),
        timestamp=float(obj["timestamp"]),
        image=read_color_png(image_path),
        depth=read_depth_png(depth_path),
        pose=pose_from_json(obj["pose"]),
        cam=cam,
        targets_path=obj.get("targets"),
        holdout=bool(obj.get("holdout", False)),
    )


def read_stream(path):
    """Yield Keyframe and PoseUpdateEvent records in manifest order."""
    root = Path(path)
    manifest = root / "manifest.jsonl"
    if not manifest.is_file():
        raise DataError(f"no manifest.jsonl in {root}")
    last_seq = -1
    with open(manifest) as mf:
        for lineno, line in enumerate(mf, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"manifest line {lineno}: invalid JSON ({e.msg})") from e
            try:
                rec = _parse_line(root, lineno, obj)
            except (KeyError, ValueError, TypeError) as e:
                raise DataError(f"manifest line {lineno}: malformed record ({e})") from e
            if isinstance(rec, Keyframe):
                if rec.seq <= last_seq:
                    raise DataError(
                        f"manifest line {lineno}: seq {rec.seq} not increasing (last {last_seq})"
                    )
                last_seq = rec.seq
            yield rec


_SENTINEL = object()


def prefetch_stream(path, capacity: int = PREFETCH_CAPACITY):
    """read_stream through a bounded queue fed by a producer thread.

    Record order is unchanged; the queue only overlaps file IO with
    consumption. The producer blocks when the consumer falls behind.
    """
    q: queue.Queue = queue.Queue(maxsize=capacity)

    def produce():
        try:
            for rec in read_stream(path):
                q.put(rec)
        except BaseException as e:  # propagated to the consumer
            q.put(e)
            return
        q.put(_SENTINEL)

    t = threading.Thread(target=produce, daemon=True)
    t.start()
    while True:
        item = q.get()
        if item is _SENTINEL:
            break
        if isinstance(item, BaseException):
            raise item
        yield item
    t.join()

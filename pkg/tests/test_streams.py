"""Stream directory IO, rig expansion, and event ordering."""

import json

import numpy as np
import pytest

from splatfield.errors import DataError
from splatfield.geometry import Image, PinholeCamera, Se3Pose, quat_from_rotvec
from splatfield.streams import (
    Keyframe,
    PoseUpdateEvent,
    RigConfig,
    prefetch_stream,
    read_depth_png,
    read_stream,
    rig_expand,
    write_depth_png,
    write_stream,
)


def make_cam(w=8, h=6):
    return PinholeCamera(fx=10.0, fy=10.0, cx=w / 2, cy=h / 2, width=w, height=h)


def make_kf(seq, rng, cam=None, **kw):
    cam = cam or make_cam()
    return Keyframe(
        seq=seq,
        camera_id="cam0",
        timestamp=0.1 * seq,
        image=Image(rng.uniform(0, 1, (cam.height, cam.width, 3))),
        depth=Image(rng.uniform(0.5, 3.0, (cam.height, cam.width, 1))),
        pose=Se3Pose(t=rng.normal(0, 1, 3), q=quat_from_rotvec(rng.normal(0, 0.3, 3))),
        cam=cam,
        **kw,
    )


class TestRig:
    def rig(self):
        cams = {"cam0": make_cam(), "cam1": make_cam(4, 4)}
        ext = {
            "cam0": Se3Pose.identity(),
            "cam1": Se3Pose(t=np.array([0.1, 0.0, 0.0]), q=quat_from_rotvec(np.array([0.0, np.pi / 2, 0.0]))),
        }
        return RigConfig(primary="cam0", cameras=cams, extrinsics=ext)

    def test_identity_extrinsic_passes_pose_through(self):
        rig = self.rig()
        pose = Se3Pose(t=np.array([1.0, 2.0, 3.0]), q=quat_from_rotvec(np.array([0.2, 0.1, 0.0])))
        out = rig_expand(pose, rig)
        np.testing.assert_allclose(out["cam0"].t, pose.t)
        np.testing.assert_allclose(out["cam0"].q, pose.q)

    def test_yaw_extrinsic_rotates_forward_axis(self):
        rig = self.rig()
        out = rig_expand(Se3Pose.identity(), rig)
        fwd = out["cam1"].rotation_matrix() @ np.array([0.0, 0.0, 1.0])
        np.testing.assert_allclose(fwd, [1.0, 0.0, 0.0], atol=1e-12)  # +90 deg yaw

    def test_expand_then_relative_recovers_extrinsics(self):
        rig = self.rig()
        pose = Se3Pose(t=np.array([0.3, -0.2, 1.0]), q=quat_from_rotvec(np.array([0.4, -0.2, 0.7])))
        out = rig_expand(pose, rig)
        for cid, ex in rig.extrinsics.items():
            rel = pose.inverse().compose(out[cid])
            np.testing.assert_allclose(rel.t, ex.t, atol=1e-9)
            assert min(np.linalg.norm(rel.q - ex.q), np.linalg.norm(rel.q + ex.q)) < 1e-9

    def test_bad_rigs_rejected(self):
        cams = {"cam0": make_cam()}
        with pytest.raises(DataError, match="primary"):
            RigConfig(primary="nope", cameras=cams, extrinsics={"cam0": Se3Pose.identity()})
        shifted = Se3Pose(t=np.array([0.1, 0, 0]), q=np.array([1.0, 0, 0, 0]))
        with pytest.raises(DataError, match="identity"):
            RigConfig(primary="cam0", cameras=cams, extrinsics={"cam0": shifted})


class TestStreamRoundTrip:
    def test_poses_and_intrinsics_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        kfs = [make_kf(i, rng) for i in range(3)]
        write_stream(tmp_path / "s", kfs)
        back = list(read_stream(tmp_path / "s"))
        assert len(back) == 3
        for a, b in zip(kfs, back):
            assert a.seq == b.seq and a.camera_id == b.camera_id
            assert a.timestamp == b.timestamp
            np.testing.assert_array_equal(a.pose.t, b.pose.t)
            np.testing.assert_array_equal(a.pose.q, b.pose.q)
            assert a.cam == b.cam

    def test_image_quantization_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        kf = make_kf(0, rng)
        # values on the u8 lattice survive the PNG round trip exactly
        kf.image.data[:] = np.round(kf.image.data * 255.0).astype(np.float32) / 255.0
        write_stream(tmp_path / "s", [kf])
        back = next(iter(read_stream(tmp_path / "s")))
        np.testing.assert_allclose(back.image.data, kf.image.data, atol=1e-7)

    def test_depth_millimeter_round_trip(self, tmp_path):
        depth = Image(np.array([[[0.0, 1.234, 0.001], [65.535, 2.0, 0.5]]]).reshape(2, 3, 1))
        write_depth_png(tmp_path / "d.png", depth)
        back = read_depth_png(tmp_path / "d.png")
        np.testing.assert_allclose(back.data, depth.data, atol=5e-4)  # half a millimeter
        assert back.data[0, 0, 0] == 0.0  # invalid stays invalid

    def test_event_ordering_preserved(self, tmp_path):
        rng = np.random.default_rng(2)
        ev = PoseUpdateEvent(trigger_seq=1, corrections=[(0, Se3Pose.identity())])
        records = [make_kf(0, rng), make_kf(1, rng), ev, make_kf(2, rng)]
        write_stream(tmp_path / "s", records)
        back = list(read_stream(tmp_path / "s"))
        kinds = [type(r).__name__ for r in back]
        assert kinds == ["Keyframe", "Keyframe", "PoseUpdateEvent", "Keyframe"]
        assert back[2].trigger_seq == 1
        np.testing.assert_array_equal(back[2].corrections[0][1].q, [1, 0, 0, 0])

    def test_holdout_and_targets_fields_survive(self, tmp_path):
        rng = np.random.default_rng(3)
        kf = make_kf(0, rng, targets_path="kf000000_cam0.legsemb", holdout=True)
        write_stream(tmp_path / "s", [kf])
        back = next(iter(read_stream(tmp_path / "s")))
        assert back.holdout is True
        assert back.targets_path == "kf000000_cam0.legsemb"

    def test_empty_manifest_empty_iterator(self, tmp_path):
        d = tmp_path / "s"
        d.mkdir()
        (d / "manifest.jsonl").write_text("")
        assert list(read_stream(d)) == []


class TestStreamErrors:
    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataError, match="manifest"):
            list(read_stream(tmp_path))

    def test_missing_image_names_seq(self, tmp_path):
        rng = np.random.default_rng(4)
        write_stream(tmp_path / "s", [make_kf(7, rng)])
        (tmp_path / "s" / "kf000007_cam0.png").unlink()
        with pytest.raises(DataError, match="keyframe 7"):
            list(read_stream(tmp_path / "s"))

    def test_bad_json_reports_line(self, tmp_path):
        d = tmp_path / "s"
        d.mkdir()
        (d / "manifest.jsonl").write_text('{"seq": 0}\nnot json\n')
        with pytest.raises(DataError, match="line 1"):
            list(read_stream(d))

    def test_malformed_record_reports_line(self, tmp_path):
        d = tmp_path / "s"
        d.mkdir()
        (d / "manifest.jsonl").write_text(json.dumps({"seq": 0, "camera_id": "c"}) + "\n")
        with pytest.raises(DataError, match="line 1"):
            list(read_stream(d))

    def test_non_increasing_seq_rejected(self, tmp_path):
        rng = np.random.default_rng(5)
        a, b = make_kf(3, rng), make_kf(3, rng)
        write_stream(tmp_path / "s", [a])
        manifest = (tmp_path / "s" / "manifest.jsonl").read_text()
        (tmp_path / "s" / "manifest.jsonl").write_text(manifest + manifest)
        with pytest.raises(DataError, match="not increasing"):
            list(read_stream(tmp_path / "s"))

    def test_future_correction_rejected(self):
        with pytest.raises(DataError, match="future"):
            PoseUpdateEvent(trigger_seq=1, corrections=[(5, Se3Pose.identity())])

    def test_mismatched_image_size_rejected(self):
        rng = np.random.default_rng(6)
        cam = make_cam()
        with pytest.raises(DataError, match="camera expects"):
            Keyframe(
                seq=0, camera_id="c", timestamp=0.0,
                image=Image(np.zeros((4, 4, 3))),
                depth=Image(np.zeros((cam.height, cam.width, 1))),
                pose=Se3Pose.identity(), cam=cam,
            )


class TestPrefetch:
    def test_order_matches_plain_read(self, tmp_path):
        rng = np.random.default_rng(7)
        records = [make_kf(i, rng) for i in range(10)]
        records.insert(5, PoseUpdateEvent(trigger_seq=4, corrections=[]))
        write_stream(tmp_path / "s", records)
        plain = list(read_stream(tmp_path / "s"))
        fetched = list(prefetch_stream(tmp_path / "s", capacity=2))
        assert [type(r) for r in plain] == [type(r) for r in fetched]
        for a, b in zip(plain, fetched):
            if isinstance(a, Keyframe):
                assert a.seq == b.seq
                np.testing.assert_array_equal(a.image.data, b.image.data)

    def test_producer_error_reaches_consumer(self, tmp_path):
        with pytest.raises(DataError, match="manifest"):
            list(prefetch_stream(tmp_path / "missing"))

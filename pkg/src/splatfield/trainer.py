"""Joint optimization of the Gaussian scene and the language feature field.

A single training loop owns all mutable state. Keyframes arrive over time
(follow mode) or are ingested up front (batch mode); pose-correction events
update the keyframe store mid-run and can optionally rebase anchored
Gaussians. Every random draw flows through one generator in a documented
order (keyframe pick, then optional scale-level pick, then any split
offsets), so a fixed seed and stream reproduce the metrics log byte for
byte. Wall-clock timings go to a separate sidecar for the same reason.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError, DataError, NumericalError
from .formats import read_embeddings, read_sections, write_sections
from .geometry import (
    GaussianCloud,
    Image,
    PinholeCamera,
    Se3Pose,
    covariance_of,
    deproject,
    psnr,
    quat_multiply,
)
from .langfield import LanguageField
from .losses import cosine_feature_loss, rgb_loss
from .rasterizer import project_cloud, render, render_backward
from .streams import (
    Keyframe,
    PoseUpdateEvent,
    cam_from_json,
    cam_to_json,
    pose_from_json,
    pose_to_json,
    prefetch_stream,
    read_stream,
)

log = logging.getLogger(__name__)

GAUSSIAN_GROUPS = ("means", "log_scales", "rotations", "opacity_logits", "colors")
SUPERVISED_TRANSMITTANCE = 1.0 - 1e-6
CHECKPOINT_NAME = "checkpoint.legsckp"


@dataclasses.dataclass
class TrainConfig:
    iterations: int = 4000
    seed: int = 0
    # learning rates; lr_means is per unit of scene extent and decays
    # exponentially to lr_means_final_frac of itself over the budget
    lr_means: float = 1.6e-4
    lr_means_final_frac: float = 0.01
    lr_log_scales: float = 5e-3
    lr_rotations: float = 1e-3
    lr_opacity: float = 5e-2
    lr_colors: float = 2.5e-3
    lr_field: float = 1e-2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-15
    # loss mix
    lambda_ssim: float = 0.2
    lambda_lang: float = 0.1
    lang_downscale: int = 4
    # density control
    densify_interval: int = 200
    densify_start: int = 500
    densify_stop: int = 0  # 0 -> iterations // 2
    tau_pos: float = 2e-5  # mean accumulated screen gradient, pixels
    split_extent_frac: float = 0.01
    split_sigma_ratio: float = 1.6
    prune_opacity: float = 0.005
    max_gaussians: int = 500_000
    # keyframe ingestion
    init_samples: int = 500
    init_opacity: float = 0.1
    iters_per_keyframe: int = 100
    # bookkeeping
    snapshot_interval: int = 100
    nan_check_interval: int = 100
    eval_interval: int = 500  # held-out PSNR cadence; 0 disables
    # language field capacity (the field keeps its own defaults; desk-scale
    # runs need far fewer table rows than the encoder's ceiling)
    field_levels: int = 8
    field_table_size: int = 2 ** 15
    field_features: int = 4
    field_res_min: int = 16
    field_res_max: int = 512
    field_hidden: int = 64
    field_bounds_lo: tuple | None = None
    field_bounds_hi: tuple | None = None

    def __post_init__(self):
        rates = {
            "lr_means": self.lr_means,
            "lr_log_scales": self.lr_log_scales,
            "lr_rotations": self.lr_rotations,
            "lr_opacity": self.lr_opacity,
            "lr_colors": self.lr_colors,
            "lr_field": self.lr_field,
        }
        for name, value in rates.items():
            if value <= 0:
                raise ConfigError(f"{name} must be positive, got {value}")
        if not 0.0 < self.prune_opacity < 1.0:
            raise ConfigError(f"prune_opacity must be in (0, 1), got {self.prune_opacity}")
        if self.iterations <= 0:
            raise ConfigError("iterations must be positive")
        if not 0.0 <= self.lambda_ssim <= 1.0:
            raise ConfigError("lambda_ssim must be in [0, 1]")
        if self.lambda_lang < 0:
            raise ConfigError("lambda_lang must be nonnegative")
        if self.max_gaussians < 1:
            raise ConfigError("max_gaussians must be positive")

    @property
    def densify_end(self) -> int:
        return self.densify_stop if self.densify_stop > 0 else self.iterations // 2


@dataclasses.dataclass(frozen=True)
class SceneSnapshot:
    """Immutable view published for query/render consumers."""

    iteration: int
    cloud: GaussianCloud
    field_config: dict | None
    field_state: dict | None

    def make_field(self) -> LanguageField | None:
        if self.field_config is None:
            return None
        return field_from_config(self.field_config, self.field_state)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def field_config_dict(field: LanguageField) -> dict:
    return {
        "out_dim": field.out_dim,
        "levels": field.levels,
        "table_size": field.table_size,
        "features_per_level": field.features_per_level,
        "res_min": field.res_min,
        "res_max": field.res_max,
        "hidden": field.hidden,
        "bounds_lo": field.bounds_lo.tolist(),
        "bounds_hi": field.bounds_hi.tolist(),
    }


def field_from_config(cfg: dict, state: dict | None = None) -> LanguageField:
    field = LanguageField(
        out_dim=int(cfg["out_dim"]),
        bounds_lo=np.array(cfg["bounds_lo"], np.float64),
        bounds_hi=np.array(cfg["bounds_hi"], np.float64),
        levels=int(cfg["levels"]),
        table_size=int(cfg["table_size"]),
        features_per_level=int(cfg["features_per_level"]),
        res_min=int(cfg["res_min"]),
        res_max=int(cfg["res_max"]),
        hidden=int(cfg["hidden"]),
        rng=np.random.default_rng(0),
    )
    if state is not None:
        field.load_state_arrays(state)
    return field


class Trainer:
    """Owns the Gaussian cloud, the language field, and their optimizers."""

    def __init__(self, cfg: TrainConfig, metrics_sink=None, timings_sink=None):
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.cloud = GaussianCloud.empty(np.float32)
        self.field: LanguageField | None = None
        self.keyframes: list[Keyframe] = []
        self.holdouts: list[Keyframe] = []
        self.kf_by_seq: dict[int, Keyframe] = {}
        self.targets: dict[int, list] = {}
        self.iteration = 0
        self.moments: dict[str, list] = {g: self._zero_moments(g) for g in GAUSSIAN_GROUPS}
        self.adam_t: dict[str, int] = {}
        self.densify_accum = np.zeros(0, np.float32)
        self.densify_count = np.zeros(0, np.int64)
        self.bounds_lo = np.full(3, np.inf)
        self.bounds_hi = np.full(3, -np.inf)
        self.snapshot: SceneSnapshot | None = None
        self.metrics_sink = metrics_sink
        self.timings_sink = timings_sink
        self._unhydrated: set[int] = set()

    # -- bookkeeping ---------------------------------------------------------

    def _zero_moments(self, group: str, n: int = 0):
        shapes = {
            "means": (n, 3),
            "log_scales": (n, 3),
            "rotations": (n, 4),
            "opacity_logits": (n,),
            "colors": (n, 3),
        }
        return [np.zeros(shapes[group], np.float32), np.zeros(shapes[group], np.float32)]

    @property
    def scene_extent(self) -> float:
        if not np.all(np.isfinite(self.bounds_lo)):
            return 1.0
        return max(0.5 * float(np.linalg.norm(self.bounds_hi - self.bounds_lo)), 1e-3)

    def _grow_bounds(self, points: np.ndarray) -> None:
        if points.size == 0:
            return
        self.bounds_lo = np.minimum(self.bounds_lo, points.min(axis=0))
        self.bounds_hi = np.maximum(self.bounds_hi, points.max(axis=0))

    def _adam(self, name: str, param: np.ndarray, grad, lr: float) -> None:
        g = np.asarray(grad, dtype=param.dtype).reshape(param.shape)
        if name not in self.moments:
            self.moments[name] = [np.zeros_like(param), np.zeros_like(param)]
        m, v = self.moments[name]
        t = self.adam_t.get(name, 0) + 1
        self.adam_t[name] = t
        b1, b2 = self.cfg.adam_beta1, self.cfg.adam_beta2
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / (1.0 - b1 ** t)
        vhat = v / (1.0 - b2 ** t)
        param -= (lr * mhat / (np.sqrt(vhat) + self.cfg.adam_eps)).astype(param.dtype)

    # -- keyframe ingestion --------------------------------------------------

    def ingest_keyframe(self, kf: Keyframe, targets: list | None = None) -> int:
        """Register a keyframe; seed new Gaussians from its depth (train only).

        Returns the number of Gaussians added. Held-out keyframes go to the
        evaluation set and never spawn Gaussians.
        """
        if kf.seq in self.kf_by_seq:
            raise DataError(f"keyframe {kf.seq} ingested twice")
        self.kf_by_seq[kf.seq] = kf
        self._grow_bounds(kf.pose.t[None, :])
        if kf.holdout:
            self.holdouts.append(kf)
            return 0
        self.keyframes.append(kf)
        if targets is not None and self.cfg.lambda_lang > 0:
            recs = sorted(targets, key=lambda r: r.scale)
            small = kf.cam.scaled(1.0 / self.cfg.lang_downscale)
            for rec in recs:
                if rec.data.ndim != 3 or rec.data.shape[:2] != (small.height, small.width):
                    raise DataError(
                        f"keyframe {kf.seq}: embedding target shape {rec.data.shape} "
                        f"does not match the {small.width}x{small.height} supervision camera"
                    )
            self.targets[kf.seq] = recs
            if self.field is None:
                self._build_field(recs[0].dim)

        depth = kf.depth.data[:, :, 0]
        ii, jj = np.nonzero(depth > 0)
        added = 0
        if ii.size == 0:
            log.warning("keyframe %d has no valid depth; no Gaussians added", kf.seq)
        else:
            n = min(self.cfg.init_samples, ii.size)
            pick = self.rng.choice(ii.size, size=n, replace=False)
            uv_all = np.stack([jj + 0.5, ii + 0.5], axis=1).astype(np.float64)
            z_all = depth[ii, jj].astype(np.float64)
            cloud_points = deproject(kf.cam, kf.pose, uv_all, z_all)
            points = cloud_points[pick]
            colors = kf.image.data[ii[pick], jj[pick], :3]
            sigma = self._neighbor_spacing(points, cloud_points)
            new = GaussianCloud(
                means=points.astype(np.float32),
                log_scales=np.log(sigma)[:, None].repeat(3, axis=1).astype(np.float32),
                rotations=np.tile(np.array([1.0, 0, 0, 0], np.float32), (n, 1)),
                opacity_logits=np.full(
                    n, math.log(self.cfg.init_opacity / (1.0 - self.cfg.init_opacity)), np.float32
                ),
                colors=colors.astype(np.float32),
                anchors=np.full(n, kf.seq, np.int64),
            )
            self._grow_bounds(points)
            self.cloud = self.cloud.concat(new)
            self._extend_rows(n)
            added = n
        self._enforce_cap()
        return added

    def _neighbor_spacing(self, points: np.ndarray, cloud_points: np.ndarray) -> np.ndarray:
        """Mean distance to the 3 nearest observed points around each sample.

        Queried against the keyframe's full deprojected depth map, so the
        estimate tracks the local surface sampling density (roughly one pixel
        footprint) rather than the spacing of the random subsample.
        """
        n = len(points)
        if len(cloud_points) < 2:
            return np.full(n, 0.1)
        k = min(4, len(cloud_points))
        dist, _ = cKDTree(cloud_points).query(points, k=k)
        spacing = dist[:, 1:].mean(axis=1)
        return np.maximum(spacing, 1e-4)

    def _build_field(self, out_dim: int) -> None:
        cfg = self.cfg
        if cfg.field_bounds_lo is not None and cfg.field_bounds_hi is not None:
            lo = np.asarray(cfg.field_bounds_lo, np.float64)
            hi = np.asarray(cfg.field_bounds_hi, np.float64)
        else:
            # current scene box plus margin; the hash wraps outside anyway
            center = 0.5 * (self.bounds_lo + self.bounds_hi)
            half = np.maximum(0.5 * (self.bounds_hi - self.bounds_lo), 0.5) * 1.5
            lo, hi = center - half, center + half
        self.field = LanguageField(
            out_dim=out_dim,
            bounds_lo=lo,
            bounds_hi=hi,
            levels=cfg.field_levels,
            table_size=cfg.field_table_size,
            features_per_level=cfg.field_features,
            res_min=cfg.field_res_min,
            res_max=cfg.field_res_max,
            hidden=cfg.field_hidden,
            rng=np.random.default_rng(cfg.seed + 7919),  # never touches the loop RNG
        )

    def _extend_rows(self, n_new: int) -> None:
        for group in GAUSSIAN_GROUPS:
            m, v = self.moments[group]
            zeros = self._zero_moments(group, n_new)
            self.moments[group] = [
                np.concatenate([m, zeros[0]], axis=0),
                np.concatenate([v, zeros[1]], axis=0),
            ]
        self.densify_accum = np.concatenate([self.densify_accum, np.zeros(n_new, np.float32)])
        self.densify_count = np.concatenate([self.densify_count, np.zeros(n_new, np.int64)])

    def _select_rows(self, keep: np.ndarray, n_new: int) -> None:
        for group in GAUSSIAN_GROUPS:
            m, v = self.moments[group]
            zeros = self._zero_moments(group, n_new)
            self.moments[group] = [
                np.concatenate([m[keep], zeros[0]], axis=0),
                np.concatenate([v[keep], zeros[1]], axis=0),
            ]
        self.densify_accum = np.zeros(len(self.cloud), np.float32)
        self.densify_count = np.zeros(len(self.cloud), np.int64)

    def _enforce_cap(self) -> None:
        n = len(self.cloud)
        if n <= self.cfg.max_gaussians:
            return
        order = np.argsort(self.cloud.opacity_logits, kind="stable")
        keep = np.ones(n, bool)
        keep[order[: n - self.cfg.max_gaussians]] = False
        self.cloud = self.cloud.keep(keep)
        for group in GAUSSIAN_GROUPS:
            m, v = self.moments[group]
            self.moments[group] = [m[keep], v[keep]]
        self.densify_accum = self.densify_accum[keep]
        self.densify_count = self.densify_count[keep]

    # -- training ------------------------------------------------------------

    def train_step(self) -> dict:
        """One optimization step plus any scheduled maintenance.

        Draw order: keyframe index, then (language term only) scale level,
        then any densify split offsets on scheduled iterations.
        """
        if not self.keyframes:
            raise DataError("cannot train before the first keyframe")
        if self._unhydrated:
            raise DataError("checkpoint keyframes lack image data; attach the stream first")
        cfg = self.cfg
        t_start = time.perf_counter()
        kf = self.keyframes[int(self.rng.integers(len(self.keyframes)))]

        out = render(self.cloud, kf.cam, kf.pose, mode="color")
        loss_rgb, g_img, parts = rgb_loss(
            out.image, kf.image.data.astype(np.float64), cfg.lambda_ssim
        )
        grads = render_backward(out, g_img)
        g_means = grads.means
        g_ls = grads.log_scales
        g_rot = grads.rotations
        g_op = grads.opacity_logits
        g_col = grads.colors
        screen = grads.screen_grad_norm

        lang_loss = 0.0
        if self.field is not None and cfg.lambda_lang > 0 and kf.seq in self.targets:
            recs = self.targets[kf.seq]
            rec = recs[int(self.rng.integers(len(recs)))]
            small = kf.cam.scaled(1.0 / cfg.lang_downscale)
            vis = project_cloud(self.cloud, small, kf.pose).valid
            feats, ctx = self.field.batch_features(
                self.cloud.means[vis].astype(np.float64), float(rec.scale)
            )
            fm = np.zeros((len(self.cloud), self.field.out_dim), np.float32)
            fm[vis] = feats
            self.cloud.features = fm
            fout = render(self.cloud, small, kf.pose, mode="feature")
            self.cloud.features = None
            mask = fout.transmittance < SUPERVISED_TRANSMITTANCE
            lang_loss, g_feat = cosine_feature_loss(
                fout.image, rec.data.astype(np.float64), mask
            )
            fgrads = render_backward(fout, cfg.lambda_lang * g_feat)
            g_means = g_means + fgrads.means
            g_ls = g_ls + fgrads.log_scales
            g_rot = g_rot + fgrads.rotations
            g_op = g_op + fgrads.opacity_logits
            g_col = g_col + fgrads.colors
            screen = screen + fgrads.screen_grad_norm
            fieldg = self.field.batch_features_backward(ctx, fgrads.features[vis])
            self._adam("field.tables", self.field.tables, fieldg.tables, cfg.lr_field)
            for i, ((w, b), (dw, db)) in enumerate(zip(self.field.weights, fieldg.weights)):
                self._adam(f"field.w{i}", w, dw, cfg.lr_field)
                self._adam(f"field.b{i}", b, db, cfg.lr_field)

        self.densify_accum += screen.astype(np.float32)
        self.densify_count += screen > 0

        decay = cfg.lr_means_final_frac ** (min(self.iteration / cfg.iterations, 1.0))
        self._adam("means", self.cloud.means, g_means, cfg.lr_means * self.scene_extent * decay)
        self._adam("log_scales", self.cloud.log_scales, g_ls, cfg.lr_log_scales)
        self._adam("rotations", self.cloud.rotations, g_rot, cfg.lr_rotations)
        self._adam("opacity_logits", self.cloud.opacity_logits, g_op, cfg.lr_opacity)
        self._adam("colors", self.cloud.colors, g_col, cfg.lr_colors)

        self.iteration += 1
        it = self.iteration
        if cfg.densify_start <= it <= cfg.densify_end and it % cfg.densify_interval == 0:
            self.densify_and_prune()
        if cfg.nan_check_interval and it % cfg.nan_check_interval == 0:
            self._check_finite()

        record = {
            "iteration": it,
            "loss": float(loss_rgb + cfg.lambda_lang * lang_loss),
            "rgb": float(loss_rgb),
            "l1": float(parts["l1"]),
            "ssim": float(parts["ssim"]),
            "lang": float(lang_loss),
            "gaussians": len(self.cloud),
            "psnr": None,
        }
        if cfg.eval_interval and it % cfg.eval_interval == 0 and self.holdouts:
            record["psnr"] = self.holdout_psnr()
        if self.metrics_sink is not None:
            self.metrics_sink.write(json.dumps(record, sort_keys=True) + "\n")
        if self.timings_sink is not None:
            self.timings_sink.write(
                json.dumps({"iteration": it, "seconds": time.perf_counter() - t_start}) + "\n"
            )
        if cfg.snapshot_interval and it % cfg.snapshot_interval == 0:
            self.publish_snapshot()
        return record

    def advance(self, n: int) -> None:
        for _ in range(max(n, 0)):
            self.train_step()

    def _check_finite(self) -> None:
        arrays = {
            "means": self.cloud.means,
            "log_scales": self.cloud.log_scales,
            "rotations": self.cloud.rotations,
            "opacity_logits": self.cloud.opacity_logits,
            "colors": self.cloud.colors,
        }
        if self.field is not None:
            arrays.update(self.field.state_arrays())
        for name, arr in arrays.items():
            if not np.all(np.isfinite(arr)):
                raise NumericalError(
                    f"non-finite values in {name} at iteration {self.iteration}"
                )

    def holdout_psnr(self) -> float | None:
        views = [kf for kf in self.holdouts if kf.seq not in self._unhydrated]
        if not views or len(self.cloud) == 0:
            return None
        vals = [
            psnr(render(self.cloud, kf.cam, kf.pose).image, kf.image.data) for kf in views
        ]
        return float(np.mean(vals))

    def publish_snapshot(self) -> SceneSnapshot:
        field_cfg = None
        field_state = None
        if self.field is not None:
            field_cfg = field_config_dict(self.field)
            field_state = {k: v.copy() for k, v in self.field.state_arrays().items()}
        self.snapshot = SceneSnapshot(
            iteration=self.iteration,
            cloud=self.cloud.copy(),
            field_config=field_cfg,
            field_state=field_state,
        )
        return self.snapshot

    # -- density control -----------------------------------------------------

    def densify_and_prune(self) -> dict:
        """Clone/split high-gradient Gaussians, drop near-transparent ones."""
        cloud = self.cloud
        n = len(cloud)
        if n == 0:
            return {"cloned": 0, "split": 0, "pruned": 0, "count": 0}
        mean_grad = self.densify_accum / np.maximum(self.densify_count, 1)
        sigma_max = np.exp(cloud.log_scales.astype(np.float64)).max(axis=1)
        over = mean_grad > self.cfg.tau_pos
        big = sigma_max > self.cfg.split_extent_frac * self.scene_extent
        prune = _sigmoid(cloud.opacity_logits.astype(np.float64)) < self.cfg.prune_opacity
        clone_src = over & ~big & ~prune
        split_src = over & big & ~prune

        n_split = int(split_src.sum())
        children = None
        if n_split:
            eps = self.rng.standard_normal((n_split, 2, 3))
            src = cloud.keep(split_src)
            cov = covariance_of(src.log_scales.astype(np.float64), src.rotations.astype(np.float64))
            chol = np.linalg.cholesky(cov)
            offsets = np.einsum("nij,nkj->nki", chol, eps)
            child_means = (src.means.astype(np.float64)[:, None, :] + offsets).reshape(-1, 3)
            child_ls = (src.log_scales - np.float32(math.log(self.cfg.split_sigma_ratio)))
            children = GaussianCloud(
                means=child_means.astype(np.float32),
                log_scales=np.repeat(child_ls, 2, axis=0),
                rotations=np.repeat(src.rotations, 2, axis=0),
                opacity_logits=np.repeat(src.opacity_logits, 2, axis=0),
                colors=np.repeat(src.colors, 2, axis=0),
                anchors=np.repeat(src.anchors, 2, axis=0),
            )

        clones = cloud.keep(clone_src) if clone_src.any() else None
        keep = ~(prune | split_src)
        new_cloud = cloud.keep(keep)
        n_new = 0
        if clones is not None:
            new_cloud = new_cloud.concat(clones)
            n_new += len(clones)
        if children is not None:
            new_cloud = new_cloud.concat(children)
            n_new += len(children)
        self.cloud = new_cloud
        self._select_rows(keep, n_new)
        self._enforce_cap()
        return {
            "cloned": 0 if clones is None else len(clones),
            "split": n_split,
            "pruned": int(prune.sum()),
            "count": len(self.cloud),
        }

    # -- pose corrections ----------------------------------------------------

    def apply_pose_update(self, event: PoseUpdateEvent, rebase_gaussians: bool = False) -> None:
        """Replace keyframe poses; optionally move anchored Gaussians along.

        Rejected atomically if any referenced keyframe is unknown.
        """
        unknown = [seq for seq, _ in event.corrections if seq not in self.kf_by_seq]
        if unknown:
            raise DataError(
                f"pose update references unknown keyframes {unknown}; event rejected"
            )
        for seq, new_pose in event.corrections:
            slot = self.kf_by_seq[seq]
            old_pose = slot.pose
            slot.pose = new_pose
            if rebase_gaussians:
                delta = new_pose.compose(old_pose.inverse())
                rows = self.cloud.anchors == seq
                if rows.any():
                    moved = delta.apply(self.cloud.means[rows].astype(np.float64))
                    self.cloud.means[rows] = moved.astype(np.float32)
                    rotated = quat_multiply(
                        delta.q[None, :], self.cloud.rotations[rows].astype(np.float64)
                    )
                    self.cloud.rotations[rows] = rotated.astype(np.float32)

    # -- checkpointing -------------------------------------------------------

    def save_checkpoint(self, path) -> None:
        sections: dict = {}
        sections["config"] = dataclasses.asdict(self.cfg)
        sections["meta"] = {
            "iteration": self.iteration,
            "adam_t": self.adam_t,
            "rng_state": _encode_rng_state(self.rng),
            "bounds_lo": self.bounds_lo.tolist(),
            "bounds_hi": self.bounds_hi.tolist(),
        }
        sections["keyframes"] = [
            {
                "seq": kf.seq,
                "camera_id": kf.camera_id,
                "timestamp": kf.timestamp,
                "pose": pose_to_json(kf.pose),
                "intrinsics": cam_to_json(kf.cam),
                "holdout": kf.holdout,
                "targets_path": kf.targets_path,
            }
            for kf in sorted(self.kf_by_seq.values(), key=lambda k: k.seq)
        ]
        sections["means"] = self.cloud.means
        sections["log_scales"] = self.cloud.log_scales
        sections["rotations"] = self.cloud.rotations
        sections["opacity_logits"] = self.cloud.opacity_logits
        sections["colors"] = self.cloud.colors
        sections["anchors"] = self.cloud.anchors
        sections["densify_accum"] = self.densify_accum
        sections["densify_count"] = self.densify_count
        for group in GAUSSIAN_GROUPS:
            m, v = self.moments[group]
            sections[f"opt.{group}.m"] = m
            sections[f"opt.{group}.v"] = v
        if self.field is not None:
            sections["field_config"] = field_config_dict(self.field)
            for name, arr in self.field.state_arrays().items():
                sections[f"field.{name}"] = arr
            for name in list(self.moments):
                if name.startswith("field."):
                    sections[f"opt.{name}.m"] = self.moments[name][0]
                    sections[f"opt.{name}.v"] = self.moments[name][1]
        write_sections(path, sections)

    @classmethod
    def from_checkpoint(cls, path, metrics_sink=None, timings_sink=None) -> "Trainer":
        """Rebuild full optimizer state; keyframe images need re-attachment
        from the stream before training can continue (queries work as-is)."""
        sections = read_sections(path)
        cfg = TrainConfig(**_tupleize(sections["config"]))
        trainer = cls(cfg, metrics_sink=metrics_sink, timings_sink=timings_sink)
        meta = sections["meta"]
        trainer.iteration = int(meta["iteration"])
        trainer.adam_t = {k: int(v) for k, v in meta["adam_t"].items()}
        trainer.rng = _decode_rng_state(meta["rng_state"])
        trainer.bounds_lo = np.array(meta["bounds_lo"], np.float64)
        trainer.bounds_hi = np.array(meta["bounds_hi"], np.float64)
        trainer.cloud = GaussianCloud(
            means=sections["means"],
            log_scales=sections["log_scales"],
            rotations=sections["rotations"],
            opacity_logits=sections["opacity_logits"],
            colors=sections["colors"],
            anchors=sections["anchors"],
        )
        trainer.densify_accum = sections["densify_accum"]
        trainer.densify_count = sections["densify_count"]
        for group in GAUSSIAN_GROUPS:
            trainer.moments[group] = [sections[f"opt.{group}.m"], sections[f"opt.{group}.v"]]
        if "field_config" in sections:
            state = {
                name[len("field."):]: arr
                for name, arr in sections.items()
                if name.startswith("field.") and not name.startswith("field_config")
            }
            trainer.field = field_from_config(sections["field_config"], state)
            for name in sections:
                if name.startswith("opt.field.") and name.endswith(".m"):
                    group = name[len("opt."):-len(".m")]
                    trainer.moments[group] = [sections[name], sections[f"opt.{group}.v"]]
        for spec in sections["keyframes"]:
            cam = cam_from_json(spec["intrinsics"])
            kf = Keyframe(
                seq=int(spec["seq"]),
                camera_id=spec["camera_id"],
                timestamp=float(spec["timestamp"]),
                image=_placeholder_image(cam, 3),
                depth=_placeholder_image(cam, 1),
                pose=pose_from_json(spec["pose"]),
                cam=cam,
                targets_path=spec["targets_path"],
                holdout=bool(spec["holdout"]),
            )
            trainer.kf_by_seq[kf.seq] = kf
            (trainer.holdouts if kf.holdout else trainer.keyframes).append(kf)
            trainer._unhydrated.add(kf.seq)
        return trainer

    def attach_keyframe_data(self, kf: Keyframe, targets: list | None = None) -> None:
        """Fill a checkpoint-restored keyframe with its stream images.

        The checkpoint pose wins over the stream pose (it may carry later
        corrections).
        """
        slot = self.kf_by_seq.get(kf.seq)
        if slot is None:
            raise DataError(f"stream keyframe {kf.seq} is not in the checkpoint")
        slot.image = kf.image
        slot.depth = kf.depth
        self._unhydrated.discard(kf.seq)
        if targets is not None and self.cfg.lambda_lang > 0 and not slot.holdout:
            self.targets[kf.seq] = sorted(targets, key=lambda r: r.scale)


def _placeholder_image(cam: PinholeCamera, channels: int) -> Image:
    return Image(np.zeros((cam.height, cam.width, channels), np.float32))


def _encode_rng_state(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    return json.loads(json.dumps(state))  # plain ints/strs only


def _decode_rng_state(state: dict) -> np.random.Generator:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = state
    return rng


def _tupleize(cfg: dict) -> dict:
    out = dict(cfg)
    for key in ("field_bounds_lo", "field_bounds_hi"):
        if out.get(key) is not None:
            out[key] = tuple(out[key])
    return out


# ---------------------------------------------------------------------------
# stream sessions
# ---------------------------------------------------------------------------


def load_targets(root, kf: Keyframe):
    if kf.targets_path is None:
        return None
    return read_embeddings(Path(root) / kf.targets_path)


def run_stream(
    stream_root,
    cfg: TrainConfig,
    out_dir,
    mode: str = "follow",
    rebase_gaussians: bool = False,
    use_prefetch: bool = True,
) -> Trainer:
    """Train on a stream end to end; writes metrics, timings, and a checkpoint.

    follow: interleave ingestion with training, iters_per_keyframe steps per
    train keyframe, then spend the rest of the budget after the stream ends.
    batch: ingest the whole stream (applying pose events in order) before any
    training.
    """
    if mode not in ("follow", "batch"):
        raise ConfigError(f"unknown training mode {mode!r}")
    root = Path(stream_root)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    source = prefetch_stream(root) if use_prefetch else read_stream(root)

    with open(out / "metrics.jsonl", "w") as metrics, open(out / "timings.jsonl", "w") as timings:
        trainer = Trainer(cfg, metrics_sink=metrics, timings_sink=timings)
        for record in source:
            if isinstance(record, PoseUpdateEvent):
                trainer.apply_pose_update(record, rebase_gaussians=rebase_gaussians)
                continue
            targets = load_targets(root, record) if cfg.lambda_lang > 0 else None
            trainer.ingest_keyframe(record, targets=targets)
            if mode == "follow" and not record.holdout:
                trainer.advance(
                    min(cfg.iters_per_keyframe, cfg.iterations - trainer.iteration)
                )
        trainer.advance(cfg.iterations - trainer.iteration)
        trainer.publish_snapshot()
        trainer.save_checkpoint(out / CHECKPOINT_NAME)
    return trainer

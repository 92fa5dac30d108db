"""Scale-conditioned language feature field.

Maps a 3D point plus a physical query scale to a unit-norm feature vector:
a multi-resolution hash-grid encoding of the (box-normalized) position is
concatenated with the normalized scale and pushed through a small ReLU MLP,
then L2-normalized.

The hash tables are the bulk of the trainable state; gradients reach them
through a trilinear scatter. Positions receive no gradient: the field is
queried at Gaussian means but never moves them.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np
from numba import njit, prange

HASH_PRIMES = (1, 2654435761, 805459861)
SCALE_MIN = 0.05
SCALE_MAX = 2.0
NORM_EPS = 1e-8


@njit(parallel=True, cache=True)
def _encode_kernel(pts, tables, resolutions, out):
    levels, size, feat = tables.shape
    n = pts.shape[0]
    mask = np.uint64(size - 1)
    p1 = np.uint64(HASH_PRIMES[1])
    p2 = np.uint64(HASH_PRIMES[2])
    m32 = np.uint64(0xFFFFFFFF)
    for lv in prange(levels):
        res = resolutions[lv]
        base = lv * feat
        for i in range(n):
            x = pts[i, 0] * res
            y = pts[i, 1] * res
            z = pts[i, 2] * res
            x0 = math.floor(x)
            y0 = math.floor(y)
            z0 = math.floor(z)
            wx = x - x0
            wy = y - y0
            wz = z - z0
            ix = np.uint64(np.int64(x0)) & m32
            iy = np.uint64(np.int64(y0)) & m32
            iz = np.uint64(np.int64(z0)) & m32
            for corner in range(8):
                dx = corner & 1
                dy = (corner >> 1) & 1
                dz = corner >> 2
                cx = (ix + np.uint64(dx)) & m32
                cy = (iy + np.uint64(dy)) & m32
                cz = (iz + np.uint64(dz)) & m32
                h = (cx ^ ((cy * p1) & m32) ^ ((cz * p2) & m32)) & mask
                w = (wx if dx == 1 else 1.0 - wx)
                w *= (wy if dy == 1 else 1.0 - wy)
                w *= (wz if dz == 1 else 1.0 - wz)
                for f in range(feat):
                    out[i, base + f] += w * tables[lv, np.int64(h), f]


@njit(parallel=True, cache=True)
def _encode_backward_kernel(pts, d_enc, tables_shape0, tables_shape1, tables_shape2, resolutions, d_tables):
    levels, size, feat = tables_shape0, tables_shape1, tables_shape2
    n = pts.shape[0]
    mask = np.uint64(size - 1)
    p1 = np.uint64(HASH_PRIMES[1])
    p2 = np.uint64(HASH_PRIMES[2])
    m32 = np.uint64(0xFFFFFFFF)
    # levels own disjoint tables, so parallel scatter stays deterministic
    for lv in prange(levels):
        res = resolutions[lv]
        base = lv * feat
        for i in range(n):
            x = pts[i, 0] * res
            y = pts[i, 1] * res
            z = pts[i, 2] * res
            x0 = math.floor(x)
            y0 = math.floor(y)
            z0 = math.floor(z)
            wx = x - x0
            wy = y - y0
            wz = z - z0
            ix = np.uint64(np.int64(x0)) & m32
            iy = np.uint64(np.int64(y0)) & m32
            iz = np.uint64(np.int64(z0)) & m32
            for corner in range(8):
                dx = corner & 1
                dy = (corner >> 1) & 1
                dz = corner >> 2
                cx = (ix + np.uint64(dx)) & m32
                cy = (iy + np.uint64(dy)) & m32
                cz = (iz + np.uint64(dz)) & m32
                h = (cx ^ ((cy * p1) & m32) ^ ((cz * p2) & m32)) & mask
                w = (wx if dx == 1 else 1.0 - wx)
                w *= (wy if dy == 1 else 1.0 - wy)
                w *= (wz if dz == 1 else 1.0 - wz)
                for f in range(feat):
                    d_tables[lv, np.int64(h), f] += w * d_enc[i, base + f]


def _relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


@dataclasses.dataclass
class FieldContext:
    """Saved activations for batch_features_backward."""

    points_norm: np.ndarray
    activations: list
    pre_norm: np.ndarray
    safe_norm: np.ndarray


@dataclasses.dataclass
class FieldGradients:
    tables: np.ndarray
    weights: list  # [(dW, db), ...] matching LanguageField.weights


class LanguageField:
    """Hash-grid encoder plus scale-conditioned MLP head."""

    def __init__(
        self,
        out_dim: int,
        bounds_lo: np.ndarray,
        bounds_hi: np.ndarray,
        levels: int = 8,
        table_size: int = 2 ** 19,
        features_per_level: int = 4,
        res_min: int = 16,
        res_max: int = 512,
        hidden: int = 64,
        rng: np.random.Generator | None = None,
        dtype=np.float32,
    ):
        if table_size & (table_size - 1) != 0:
            raise ValueError("table_size must be a power of two")
        if levels < 2:
            raise ValueError("need at least two hash levels")
        rng = rng or np.random.default_rng(0)
        self.out_dim = out_dim
        self.bounds_lo = np.asarray(bounds_lo, np.float64).copy()
        self.bounds_hi = np.asarray(bounds_hi, np.float64).copy()
        if np.any(self.bounds_hi <= self.bounds_lo):
            raise ValueError("bounds_hi must exceed bounds_lo on every axis")
        self.levels = levels
        self.table_size = table_size
        self.features_per_level = features_per_level
        self.res_min = res_min
        self.res_max = res_max
        self.hidden = hidden
        self.dtype = np.dtype(dtype)

        # geometric schedule; evaluated so the end levels land exactly on
        # res_min and res_max instead of one below after floor
        ratio = res_max / res_min
        self.resolutions = np.array(
            [int(math.floor(res_min * ratio ** (lv / (levels - 1)))) for lv in range(levels)],
            np.int64,
        )
        self.tables = rng.uniform(-1e-4, 1e-4, (levels, table_size, features_per_level)).astype(self.dtype)

        enc_dim = levels * features_per_level
        dims = [enc_dim + 1, hidden, hidden, hidden, out_dim]
        self.weights = []
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            limit = math.sqrt(6.0 / d_in)
            w = rng.uniform(-limit, limit, (d_in, d_out)).astype(self.dtype)
            b = np.zeros(d_out, self.dtype)
            self.weights.append((w, b))

        self.out_of_range_scales = 0

    @property
    def enc_dim(self) -> int:
        return self.levels * self.features_per_level

    def normalized(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, np.float64) - self.bounds_lo) / (self.bounds_hi - self.bounds_lo)

    def encode(self, points: np.ndarray) -> np.ndarray:
        """Hash-grid encoding only, (N, levels * features_per_level)."""
        x = self.normalized(points)
        out = np.zeros((x.shape[0], self.enc_dim), self.tables.dtype)
        _encode_kernel(x, self.tables, self.resolutions, out)
        return out

    def _clamp_scale(self, scale: float) -> float:
        s = float(scale)
        if s < SCALE_MIN or s > SCALE_MAX:
            self.out_of_range_scales += 1
            s = min(max(s, SCALE_MIN), SCALE_MAX)
        return s

    def batch_features(self, points: np.ndarray, scale: float):
        """Unit-norm features for all points at one query scale.

        Returns (features (N, out_dim), context for the backward pass).
        """
        s = self._clamp_scale(scale)
        s_n = (s - SCALE_MIN) / (SCALE_MAX - SCALE_MIN)
        x = self.normalized(points)
        n = x.shape[0]
        enc = np.zeros((n, self.enc_dim), self.tables.dtype)
        if n:
            _encode_kernel(x, self.tables, self.resolutions, enc)

        inp = np.concatenate([enc, np.full((n, 1), s_n, self.tables.dtype)], axis=1)
        acts = [inp]
        h = inp
        for w, b in self.weights[:-1]:
            h = _relu(h @ w + b)
            acts.append(h)
        w, b = self.weights[-1]
        y = h @ w + b

        norm = np.linalg.norm(y.astype(np.float64), axis=1)
        safe = np.maximum(norm, NORM_EPS)
        feat = (y / safe[:, None].astype(y.dtype)).astype(y.dtype)
        return feat, FieldContext(points_norm=x, activations=acts, pre_norm=y, safe_norm=safe)

    def batch_features_backward(self, ctx: FieldContext, d_feat: np.ndarray) -> FieldGradients:
        """Gradients for tables and MLP weights; positions get none."""
        y = ctx.pre_norm.astype(np.float64)
        safe = ctx.safe_norm
        d = d_feat.astype(np.float64)
        f = y / safe[:, None]
        # y / max(|y|, eps): below eps the map is plain scaling by 1/eps
        scaled = np.where(
            (np.linalg.norm(y, axis=1) > NORM_EPS)[:, None],
            (d - np.sum(d * f, axis=1)[:, None] * f),
            d,
        )
        dy = (scaled / safe[:, None]).astype(self.tables.dtype)

        w_grads: list = [None] * len(self.weights)
        grad = dy
        for li in range(len(self.weights) - 1, -1, -1):
            w, b = self.weights[li]
            a_in = ctx.activations[li]
            dw = a_in.T @ grad
            db = grad.sum(axis=0)
            w_grads[li] = (dw, db)
            grad = grad @ w.T
            if li > 0:
                grad = grad * (ctx.activations[li] > 0)

        d_enc = np.ascontiguousarray(grad[:, : self.enc_dim], self.tables.dtype)
        d_tables = np.zeros_like(self.tables)
        if ctx.points_norm.shape[0]:
            _encode_backward_kernel(
                ctx.points_norm, d_enc,
                self.levels, self.table_size, self.features_per_level,
                self.resolutions, d_tables,
            )
        return FieldGradients(tables=d_tables, weights=w_grads)

    def state_arrays(self) -> dict:
        """Flat named arrays for checkpointing, in a stable order."""
        out = {"tables": self.tables}
        for i, (w, b) in enumerate(self.weights):
            out[f"w{i}"] = w
            out[f"b{i}"] = b
        return out

    def load_state_arrays(self, arrays: dict) -> None:
        if arrays["tables"].shape != self.tables.shape:
            raise ValueError("checkpoint table shape does not match field configuration")
        self.tables = arrays["tables"].astype(self.dtype)
        ws = []
        for i, (w, b) in enumerate(self.weights):
            nw = arrays[f"w{i}"].astype(self.dtype)
            nb = arrays[f"b{i}"].astype(self.dtype)
            if nw.shape != w.shape or nb.shape != b.shape:
                raise ValueError("checkpoint MLP shape does not match field configuration")
            ws.append((nw, nb))
        self.weights = ws

"""Differentiable tile-based rasterizer for 3D Gaussians.

Forward: EWA projection of each Gaussian to a 2D splat, binning into 16x16
pixel tiles by the 3-sigma screen bounding box, then front-to-back alpha
compositing per pixel (depth order, ties broken by Gaussian index).

A splat contributes to a pixel iff the pixel center lies inside its 3-sigma
bounding square and its alpha' = sigmoid(opacity_logit) * exp(-d^T conic d / 2)
is at least 1/255. alpha' is clamped to 0.99; blending stops once transmittance
drops below 1e-4.

Backward: analytic gradients for means, log_scales, rotations, opacity
logits, colors and feature rows, plus the per-Gaussian screen-space positional
gradient norm used by densification.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import _raster_kernels as _k
from .geometry import NEAR_PLANE, GaussianCloud, PinholeCamera, Se3Pose, quat_to_matrix

TILE = _k.TILE
ALPHA_SKIP = _k.ALPHA_SKIP
ALPHA_MAX = _k.ALPHA_MAX
TRANSMITTANCE_MIN = _k.TRANSMITTANCE_MIN
COV2D_BLUR = 0.3

RENDER_MODES = ("color", "feature", "depth")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclasses.dataclass
class Splat2D:
    """A single projected Gaussian, for inspection and tests."""

    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    radius: float
    alpha: float


@dataclasses.dataclass
class ProjectedSplats:
    """Vectorized projection state (float64), one row per Gaussian."""

    valid: np.ndarray
    mean2d: np.ndarray
    z: np.ndarray
    p_cam: np.ndarray
    cov2d: np.ndarray  # (N, 3) as (a, b, c) of [[a, b], [b, c]]
    conic: np.ndarray  # (N, 3) inverse, same packing
    radius: np.ndarray
    alpha: np.ndarray
    pmax: np.ndarray


def project_cloud(cloud: GaussianCloud, cam: PinholeCamera, pose: Se3Pose) -> ProjectedSplats:
    """Project all Gaussians; `valid` is False for culled ones.

    Culling: camera-frame depth at or below the near plane (0.01 m), opacity
    too small to ever pass the 1/255 test, or 3-sigma box outside the image.
    """
    n = len(cloud)
    w_rot = pose.rotation_matrix().T  # world-to-camera rotation
    means = cloud.means.astype(np.float64)
    p_cam = (means - pose.t) @ w_rot.T
    z = p_cam[:, 2]
    valid = z > NEAR_PLANE

    zs = np.where(valid, z, 1.0)
    u = p_cam[:, 0] / zs * cam.fx + cam.cx
    v = p_cam[:, 1] / zs * cam.fy + cam.cy
    mean2d = np.stack([u, v], axis=1)

    sigma = _covariance64(cloud)
    jw = _jacobian(cam, p_cam, zs) @ w_rot  # (N, 2, 3)
    cov = np.einsum("nij,njk,nlk->nil", jw, sigma, jw)
    a = cov[:, 0, 0] + COV2D_BLUR
    b = cov[:, 0, 1]
    c = cov[:, 1, 1] + COV2D_BLUR

    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    lam_max = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    radius = 3.0 * np.sqrt(lam_max)

    alpha = _sigmoid(cloud.opacity_logits.astype(np.float64))
    valid &= alpha > _k.ALPHA_SKIP
    pmax = np.where(valid, 2.0 * np.log(np.maximum(255.0 * alpha, 1e-12)) + _k.PMAX_MARGIN, -1.0)

    # frustum: 3-sigma box must overlap the image rectangle
    valid &= (u + radius >= 0.0) & (u - radius <= cam.width)
    valid &= (v + radius >= 0.0) & (v - radius <= cam.height)

    return ProjectedSplats(
        valid=valid,
        mean2d=mean2d,
        z=z,
        p_cam=p_cam,
        cov2d=np.stack([a, b, c], axis=1),
        conic=conic,
        radius=radius,
        alpha=alpha,
        pmax=pmax,
    )


def project_gaussian(cloud: GaussianCloud, index: int, cam: PinholeCamera, pose: Se3Pose) -> Splat2D | None:
    """Project one Gaussian; None if culled."""
    sub = cloud.keep(np.arange(len(cloud)) == index)
    sp = project_cloud(sub, cam, pose)
    if not sp.valid[0]:
        return None
    a, b, c = sp.cov2d[0]
    return Splat2D(
        mean2d=sp.mean2d[0],
        cov2d=np.array([[a, b], [b, c]]),
        depth=float(sp.z[0]),
        radius=float(sp.radius[0]),
        alpha=float(sp.alpha[0]),
    )


def _covariance64(cloud: GaussianCloud) -> np.ndarray:
    q = cloud.rotations.astype(np.float64)
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    r = quat_to_matrix(q)
    s2 = np.exp(2.0 * cloud.log_scales.astype(np.float64))
    return np.einsum("nij,nj,nkj->nik", r, s2, r)


def _jacobian(cam: PinholeCamera, p_cam: np.ndarray, zs: np.ndarray) -> np.ndarray:
    n = p_cam.shape[0]
    j = np.zeros((n, 2, 3))
    inv_z = 1.0 / zs
    j[:, 0, 0] = cam.fx * inv_z
    j[:, 1, 1] = cam.fy * inv_z
    j[:, 0, 2] = -cam.fx * p_cam[:, 0] * inv_z ** 2
    j[:, 1, 2] = -cam.fy * p_cam[:, 1] * inv_z ** 2
    return j


def _bin_tiles(sp: ProjectedSplats, width: int, height: int):
    """CSR tile lists sorted by (tile, depth, Gaussian index)."""
    ntx = (width + TILE - 1) // TILE
    nty = (height + TILE - 1) // TILE
    ids = np.flatnonzero(sp.valid)
    if ids.size == 0:
        empty = np.zeros(0, np.int64)
        return empty, np.zeros(1, np.int64), empty, ntx

    u = sp.mean2d[ids, 0]
    v = sp.mean2d[ids, 1]
    r = sp.radius[ids]
    j_lo = np.clip(np.ceil(u - r - 0.5), 0, width - 1).astype(np.int64)
    j_hi = np.clip(np.floor(u + r - 0.5), 0, width - 1).astype(np.int64)
    i_lo = np.clip(np.ceil(v - r - 0.5), 0, height - 1).astype(np.int64)
    i_hi = np.clip(np.floor(v + r - 0.5), 0, height - 1).astype(np.int64)
    tx0, tx1 = j_lo // TILE, j_hi // TILE
    ty0, ty1 = i_lo // TILE, i_hi // TILE
    wx = tx1 - tx0 + 1
    wy = ty1 - ty0 + 1
    counts = wx * wy

    gid = np.repeat(ids, counts)
    wx_r = np.repeat(wx, counts)
    tx0_r = np.repeat(tx0, counts)
    ty0_r = np.repeat(ty0, counts)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    local = np.arange(gid.size) - np.repeat(starts, counts)
    tile = (ty0_r + local // wx_r) * ntx + (tx0_r + local % wx_r)

    order = np.lexsort((gid, sp.z[gid], tile))
    gid_sorted = gid[order]
    tile_sorted = tile[order]
    cut = np.flatnonzero(np.diff(tile_sorted)) + 1
    offsets = np.concatenate([[0], cut, [gid_sorted.size]]).astype(np.int64)
    tile_ids = tile_sorted[np.concatenate([[0], cut])].astype(np.int64)
    return gid_sorted, offsets, tile_ids, ntx


@dataclasses.dataclass
class RenderOutput:
    """Forward result plus the context render_backward needs."""

    image: np.ndarray          # (H, W, C) float64
    transmittance: np.ndarray  # (H, W) float64, final T per pixel
    contributors: np.ndarray   # (H, W) int32, blended splat count per pixel
    mode: str
    _ctx: dict = dataclasses.field(repr=False, default_factory=dict)


@dataclasses.dataclass
class RasterGradients:
    """Per-Gaussian parameter gradients (float64; zero rows for culled)."""

    means: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    features: np.ndarray | None
    screen_grad_norm: np.ndarray


def _values_for_mode(cloud: GaussianCloud, sp: ProjectedSplats, mode: str) -> np.ndarray:
    if mode == "color":
        return cloud.colors.astype(np.float64)
    if mode == "feature":
        if cloud.features is None:
            raise ValueError("feature render requested but cloud has no features")
        return cloud.features.astype(np.float64)
    if mode == "depth":
        return sp.z[:, None].copy()
    raise ValueError(f"unknown render mode {mode!r}")


def render(
    cloud: GaussianCloud,
    cam: PinholeCamera,
    pose: Se3Pose,
    mode: str = "color",
    background: np.ndarray | None = None,
) -> RenderOutput:
    """Composite the cloud into an image.

    color: (H, W, 3) with `background` (default zeros) behind everything.
    feature: (H, W, D) feature blend over a zero background.
    depth: (H, W, 1) expected depth from the same blending weights.
    """
    sp = project_cloud(cloud, cam, pose)
    values = _values_for_mode(cloud, sp, mode)
    C = values.shape[1]
    if background is None:
        bg = np.zeros(C)
    else:
        bg = np.asarray(background, dtype=np.float64).reshape(-1)
        if bg.shape[0] != C:
            raise ValueError(f"background has {bg.shape[0]} channels, expected {C}")

    H, W = cam.height, cam.width
    img = np.empty((H, W, C), np.float64)
    t_final = np.empty((H, W), np.float64)
    n_contrib = np.empty((H, W), np.int32)
    last_contrib = np.empty((H, W), np.int64)

    gid_sorted, offsets, tile_ids, ntx = _bin_tiles(sp, W, H)
    if gid_sorted.size == 0:
        img[:] = bg
        t_final[:] = 1.0
        n_contrib[:] = 0
        last_contrib[:] = -1
    else:
        _k.forward_tiles(
            sp.mean2d, sp.conic, sp.alpha, sp.pmax, sp.radius, values,
            gid_sorted, offsets, tile_ids, H, W, ntx, bg,
            img, t_final, n_contrib, last_contrib,
        )
        # tiles with no candidates are never visited by the kernel
        covered = np.zeros((H + TILE - 1) // TILE * ntx, bool)
        covered[tile_ids] = True
        if not covered.all():
            for t in np.flatnonzero(~covered):
                ty, tx = divmod(t, ntx)
                ys = slice(ty * TILE, min((ty + 1) * TILE, H))
                xs = slice(tx * TILE, min((tx + 1) * TILE, W))
                img[ys, xs] = bg
                t_final[ys, xs] = 1.0
                n_contrib[ys, xs] = 0
                last_contrib[ys, xs] = -1

    ctx = {
        "cloud": cloud, "cam": cam, "pose": pose, "sp": sp, "values": values,
        "gid_sorted": gid_sorted, "offsets": offsets, "tile_ids": tile_ids,
        "ntx": ntx, "bg": bg, "t_final": t_final, "last_contrib": last_contrib,
    }
    return RenderOutput(image=img, transmittance=t_final, contributors=n_contrib, mode=mode, _ctx=ctx)


def render_backward(out: RenderOutput, grad_image: np.ndarray) -> RasterGradients:
    """Gradients of a scalar loss wrt Gaussian parameters, given dL/dimage.

    Per-candidate gradients are accumulated tile by tile into disjoint slots,
    then reduced to Gaussians in tile-major CSR order, so the result does not
    depend on thread scheduling.
    """
    ctx = out._ctx
    cloud: GaussianCloud = ctx["cloud"]
    cam: PinholeCamera = ctx["cam"]
    pose: Se3Pose = ctx["pose"]
    sp: ProjectedSplats = ctx["sp"]
    values: np.ndarray = ctx["values"]
    gid_sorted = ctx["gid_sorted"]
    n = len(cloud)
    C = values.shape[1]

    g_mean2d = np.zeros((n, 2))
    g_conic = np.zeros((n, 3))
    g_opacity = np.zeros(n)
    g_values = np.zeros((n, C))

    if gid_sorted.size > 0:
        inst = np.zeros((gid_sorted.size, 6 + C))
        _k.backward_tiles(
            sp.mean2d, sp.conic, sp.alpha, sp.pmax, sp.radius, values,
            gid_sorted, ctx["offsets"], ctx["tile_ids"],
            cam.height, cam.width, ctx["ntx"], ctx["bg"],
            np.ascontiguousarray(grad_image, dtype=np.float64),
            ctx["t_final"], ctx["last_contrib"], inst,
        )
        np.add.at(g_mean2d, gid_sorted, inst[:, 0:2])
        np.add.at(g_conic, gid_sorted, inst[:, 2:5])
        np.add.at(g_opacity, gid_sorted, inst[:, 5])
        np.add.at(g_values, gid_sorted, inst[:, 6:])

    grads = _chain_to_parameters(cloud, cam, pose, sp, out.mode, g_mean2d, g_conic, g_opacity, g_values)
    return grads


def _chain_to_parameters(
    cloud: GaussianCloud,
    cam: PinholeCamera,
    pose: Se3Pose,
    sp: ProjectedSplats,
    mode: str,
    g_mean2d: np.ndarray,
    g_conic: np.ndarray,
    g_opacity: np.ndarray,
    g_values: np.ndarray,
) -> RasterGradients:
    n = len(cloud)
    live = sp.valid
    w_rot = pose.rotation_matrix().T

    d_means = np.zeros((n, 3))
    d_ls = np.zeros((n, 3))
    d_rot = np.zeros((n, 4))
    d_op = np.zeros(n)
    d_col = np.zeros((n, 3))
    d_feat = None

    if mode == "color":
        d_col = g_values
    elif mode == "feature":
        d_feat = g_values

    if not np.any(live):
        return RasterGradients(d_means, d_ls, d_rot, d_op, d_col, d_feat,
                               np.linalg.norm(g_mean2d, axis=1))

    idx = np.flatnonzero(live)
    p_cam = sp.p_cam[idx]
    z = p_cam[:, 2]
    inv_z = 1.0 / z
    x, y = p_cam[:, 0], p_cam[:, 1]

    # conic -> cov2d: P = A^-1, dL/dA = -P G_P P with symmetric matrix forms
    gc = g_conic[idx]
    g_p = np.empty((idx.size, 2, 2))
    g_p[:, 0, 0] = gc[:, 0]
    g_p[:, 0, 1] = g_p[:, 1, 0] = 0.5 * gc[:, 1]
    g_p[:, 1, 1] = gc[:, 2]
    pmat = np.empty((idx.size, 2, 2))
    pmat[:, 0, 0] = sp.conic[idx, 0]
    pmat[:, 0, 1] = pmat[:, 1, 0] = sp.conic[idx, 1]
    pmat[:, 1, 1] = sp.conic[idx, 2]
    g_a = -np.einsum("nij,njk,nkl->nil", pmat, g_p, pmat)

    # cov2d = (J W) Sigma (J W)^T + blur
    q = cloud.rotations.astype(np.float64)[idx]
    nq = np.linalg.norm(q, axis=1, keepdims=True)
    qn = q / nq
    r_n = quat_to_matrix(qn)
    s = np.exp(cloud.log_scales.astype(np.float64)[idx])
    sigma = np.einsum("nij,nj,nkj->nik", r_n, s * s, r_n)
    j = _jacobian(cam, p_cam, z)
    m = j @ w_rot

    g_sigma = np.einsum("nai,nab,nbj->nij", m, g_a, m)
    n3 = r_n * s[:, None, :]
    g_n3 = 2.0 * np.einsum("nij,njk->nik", g_sigma, n3)
    g_s = np.einsum("nji,njk->nik", r_n, g_n3)
    d_ls[idx] = np.einsum("nii->ni", g_s) * s

    g_rn = g_n3 * s[:, None, :]
    dr = _rotation_basis(qn)                      # (N, 4, 3, 3)
    g_qn = np.einsum("nab,njab->nj", g_rn, dr)
    g_q = (g_qn - np.einsum("nj,nj->n", g_qn, qn)[:, None] * qn) / nq
    d_rot[idx] = g_q

    # positional gradient: projection path + J dependence of cov2d
    gm = g_mean2d[idx]
    g_pc = np.zeros((idx.size, 3))
    g_pc[:, 0] = cam.fx * inv_z * gm[:, 0]
    g_pc[:, 1] = cam.fy * inv_z * gm[:, 1]
    g_pc[:, 2] = -cam.fx * x * inv_z ** 2 * gm[:, 0] - cam.fy * y * inv_z ** 2 * gm[:, 1]

    qmat = np.einsum("ij,njk,lk->nil", w_rot, sigma, w_rot)
    qjt = np.einsum("nij,nkj->nik", qmat, j)      # (N, 3, 2)
    fx_z2 = cam.fx * inv_z ** 2
    fy_z2 = cam.fy * inv_z ** 2
    g_pc[:, 0] += 2.0 * np.einsum("nb,nb->n", g_a[:, 0, :], -fx_z2[:, None] * qjt[:, 2, :])
    g_pc[:, 1] += 2.0 * np.einsum("nb,nb->n", g_a[:, 1, :], -fy_z2[:, None] * qjt[:, 2, :])
    g_pc[:, 2] += 2.0 * np.einsum(
        "nb,nb->n", g_a[:, 0, :],
        -fx_z2[:, None] * qjt[:, 0, :] + (2.0 * cam.fx * x * inv_z ** 3)[:, None] * qjt[:, 2, :],
    )
    g_pc[:, 2] += 2.0 * np.einsum(
        "nb,nb->n", g_a[:, 1, :],
        -fy_z2[:, None] * qjt[:, 1, :] + (2.0 * cam.fy * y * inv_z ** 3)[:, None] * qjt[:, 2, :],
    )

    if mode == "depth":
        g_pc[:, 2] += g_values[idx, 0]

    d_means[idx] = g_pc @ w_rot
    d_op[idx] = g_opacity[idx]

    return RasterGradients(
        means=d_means,
        log_scales=d_ls,
        rotations=d_rot,
        opacity_logits=d_op,
        colors=d_col,
        features=d_feat,
        screen_grad_norm=np.linalg.norm(g_mean2d, axis=1),
    )


def bruteforce_render(
    cloud: GaussianCloud,
    cam: PinholeCamera,
    pose: Se3Pose,
    mode: str = "color",
    background: np.ndarray | None = None,
):
    """Reference renderer with identical semantics and no tiling.

    Blends depth-sorted splats into every pixel at once, so each pixel sees
    the same candidate sequence as the tiled kernel but through an
    independent code path. Intended for small scenes and tests.

    Returns (image, transmittance, contributors).
    """
    sp = project_cloud(cloud, cam, pose)
    values = _values_for_mode(cloud, sp, mode)
    C = values.shape[1]
    bg = np.zeros(C) if background is None else np.asarray(background, np.float64).reshape(-1)

    H, W = cam.height, cam.width
    px = np.arange(W) + 0.5
    py = np.arange(H) + 0.5
    gx, gy = np.meshgrid(px, py)

    ids = np.flatnonzero(sp.valid)
    order = ids[np.lexsort((ids, sp.z[ids]))]

    acc = np.zeros((H, W, C))
    T = np.ones((H, W))
    cnt = np.zeros((H, W), np.int32)
    for g in order:
        dx = gx - sp.mean2d[g, 0]
        dy = gy - sp.mean2d[g, 1]
        r = sp.radius[g]
        ca, cb, cc = sp.conic[g]
        p = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
        a = sp.alpha[g] * np.exp(-0.5 * p)
        inside = (np.abs(dx) <= r) & (np.abs(dy) <= r) & (a >= _k.ALPHA_SKIP)
        blend = inside & (T >= _k.TRANSMITTANCE_MIN)
        a = np.minimum(a, _k.ALPHA_MAX)
        w = np.where(blend, T * a, 0.0)
        acc += w[:, :, None] * values[g]
        T = np.where(blend, T * (1.0 - a), T)
        cnt += blend
    img = acc + T[:, :, None] * bg
    return img, T, cnt


def _rotation_basis(qn: np.ndarray) -> np.ndarray:
    """Partials of the rotation matrix wrt the four (unit) quaternion entries."""
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    n = qn.shape[0]
    d = np.zeros((n, 4, 3, 3))
    zero = np.zeros(n)
    d[:, 0] = 2.0 * np.stack([
        np.stack([zero, -z, y], 1),
        np.stack([z, zero, -x], 1),
        np.stack([-y, x, zero], 1),
    ], 1)
    d[:, 1] = 2.0 * np.stack([
        np.stack([zero, y, z], 1),
        np.stack([y, -2.0 * x, -w], 1),
        np.stack([z, w, -2.0 * x], 1),
    ], 1)
    d[:, 2] = 2.0 * np.stack([
        np.stack([-2.0 * y, x, w], 1),
        np.stack([x, zero, z], 1),
        np.stack([-w, z, -2.0 * y], 1),
    ], 1)
    d[:, 3] = 2.0 * np.stack([
        np.stack([-2.0 * z, -w, x], 1),
        np.stack([w, -2.0 * z, y], 1),
        np.stack([x, y, zero], 1),
    ], 1)
    return d

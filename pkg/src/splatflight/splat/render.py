"""Forward gaussian-splat rasterization.

Two renderers share one contract:

* :func:`render` — production path: bulk projection, global front-to-back
  depth sort (stable, ties broken by input order), 16x16-pixel tile binning,
  and a compiled per-tile blend loop that parallelizes across tiles.
* :func:`render_reference` — brute-force oracle: per-gaussian projection via
  the scalar :func:`project_gaussian`, whole-image blending with no tiling,
  no bounding boxes, and no culling beyond the near plane.

Blend rule (identical in both): splats sorted front to back; per pixel,
``alpha = opacity · exp(-½ dᵀ cov2d⁻¹ d)`` clamped to 0.99, contributions with
alpha < 1/255 skipped, and a pixel stops accumulating once its transmittance
falls below 1/255. The final color composites over the scene background.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import numpy.typing as npt
from numba import njit

from ..geom import CameraIntrinsics, Quat, RigidTransform, Vector3, body_camera_pose
from .scene import Gaussian3D, SplatScene

TILE = 16
NEAR_PLANE = 0.01
ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.99
TRANSMITTANCE_MIN = 1.0 / 255.0
DILATION = 0.3

DoubleMatrix = npt.NDArray[np.float64]


@dataclass(frozen=True)
class Splat2D:
    """A gaussian projected to the image plane (EWA approximation)."""

    mean2d: DoubleMatrix
    cov2d: DoubleMatrix
    depth: float
    opacity: float
    color: DoubleMatrix


@dataclass(frozen=True)
class Image:
    width: int
    height: int
    pixels: npt.NDArray[np.uint8]  # (height, width, 3), row-major RGB

    def __post_init__(self) -> None:
        if self.pixels.shape != (self.height, self.width, 3) or self.pixels.dtype != np.uint8:
            raise ValueError("pixels must be (height, width, 3) uint8")

    def save(self, path: str | os.PathLike) -> None:
        path = Path(path)
        if path.suffix.lower() == ".ppm":
            with open(path, "wb") as fh:
                fh.write(f"P6\n{self.width} {self.height}\n255\n".encode("ascii"))
                fh.write(self.pixels.tobytes())
        else:
            from PIL import Image as PILImage

            PILImage.fromarray(self.pixels, mode="RGB").save(path)


def project_gaussian(
    gaussian: Gaussian3D,
    camera: RigidTransform,
    intrinsics: CameraIntrinsics,
    near: float = NEAR_PLANE,
) -> Optional[Splat2D]:
    """EWA projection of one gaussian given the camera pose (camera frame -> gaussian frame).

    Returns None when the mean is at or behind the near plane.
    """
    r_wc = camera.rotation.to_matrix()  # camera -> world axes
    w_mat = r_wc.T  # world -> camera
    p_cam = w_mat @ (gaussian.mean - camera.translation)
    x, y, z = p_cam
    if z <= near:
        return None
    k = intrinsics
    jac = np.array(
        [
            [k.fx / z, 0.0, -k.fx * x / (z * z)],
            [0.0, k.fy / z, -k.fy * y / (z * z)],
        ]
    )
    cov_cam = w_mat @ gaussian.covariance() @ w_mat.T
    cov2d = jac @ cov_cam @ jac.T + DILATION * np.eye(2)
    mean2d = np.array([k.fx * x / z + k.cx, k.fy * y / z + k.cy])
    return Splat2D(mean2d, cov2d, float(z), gaussian.opacity, gaussian.color.copy())


# ---------------------------------------------------------------------------
# Compiled tiled pipeline
# ---------------------------------------------------------------------------


@njit(cache=True, nogil=True)
def _project_kernel(means, scales, rots, opacities, r_cw, cam_pos, fx, fy, cx, cy, width, height, near):
    m = means.shape[0]
    mean2d = np.empty((m, 2))
    conic = np.empty((m, 3))
    depth = np.empty(m)
    bbox = np.empty((m, 4), np.int32)
    ok = np.zeros(m, np.bool_)
    for i in range(m):
        dx = means[i, 0] - cam_pos[0]
        dy = means[i, 1] - cam_pos[1]
        dz = means[i, 2] - cam_pos[2]
        x = r_cw[0, 0] * dx + r_cw[0, 1] * dy + r_cw[0, 2] * dz
        y = r_cw[1, 0] * dx + r_cw[1, 1] * dy + r_cw[1, 2] * dz
        z = r_cw[2, 0] * dx + r_cw[2, 1] * dy + r_cw[2, 2] * dz
        if z <= near:
            continue
        op = opacities[i]
        if op * 255.0 <= 1.0:
            continue
        qx, qy, qz, qw = rots[i, 0], rots[i, 1], rots[i, 2], rots[i, 3]
        sx, sy, sz = scales[i, 0], scales[i, 1], scales[i, 2]
        # Rotation matrix columns scaled per-axis: M = R diag(s).
        m00 = (1.0 - 2.0 * (qy * qy + qz * qz)) * sx
        m10 = (2.0 * (qx * qy + qz * qw)) * sx
        m20 = (2.0 * (qx * qz - qy * qw)) * sx
        m01 = (2.0 * (qx * qy - qz * qw)) * sy
        m11 = (1.0 - 2.0 * (qx * qx + qz * qz)) * sy
        m21 = (2.0 * (qy * qz + qx * qw)) * sy
        m02 = (2.0 * (qx * qz + qy * qw)) * sz
        m12 = (2.0 * (qy * qz - qx * qw)) * sz
        m22 = (1.0 - 2.0 * (qx * qx + qy * qy)) * sz
        # V = W M maps gaussian-local unit axes into camera coordinates.
        v00 = r_cw[0, 0] * m00 + r_cw[0, 1] * m10 + r_cw[0, 2] * m20
        v01 = r_cw[0, 0] * m01 + r_cw[0, 1] * m11 + r_cw[0, 2] * m21
        v02 = r_cw[0, 0] * m02 + r_cw[0, 1] * m12 + r_cw[0, 2] * m22
        v10 = r_cw[1, 0] * m00 + r_cw[1, 1] * m10 + r_cw[1, 2] * m20
        v11 = r_cw[1, 0] * m01 + r_cw[1, 1] * m11 + r_cw[1, 2] * m21
        v12 = r_cw[1, 0] * m02 + r_cw[1, 1] * m12 + r_cw[1, 2] * m22
        v20 = r_cw[2, 0] * m00 + r_cw[2, 1] * m10 + r_cw[2, 2] * m20
        v21 = r_cw[2, 0] * m01 + r_cw[2, 1] * m11 + r_cw[2, 2] * m21
        v22 = r_cw[2, 0] * m02 + r_cw[2, 1] * m12 + r_cw[2, 2] * m22
        # Perspective Jacobian rows applied to V (cov2d = (J V)(J V)ᵀ + dilation).
        j0x = fx / z
        j0z = -fx * x / (z * z)
        j1y = fy / z
        j1z = -fy * y / (z * z)
        u0 = j0x * v00 + j0z * v20
        u1 = j0x * v01 + j0z * v21
        u2 = j0x * v02 + j0z * v22
        w0 = j1y * v10 + j1z * v20
        w1 = j1y * v11 + j1z * v21
        w2 = j1y * v12 + j1z * v22
        a = u0 * u0 + u1 * u1 + u2 * u2 + DILATION
        c = w0 * w0 + w1 * w1 + w2 * w2 + DILATION
        b = u0 * w0 + u1 * w1 + u2 * w2
        det = a * c - b * b
        if det <= 0.0:
            continue
        mx = fx * x / z + cx
        my = fy * y / z + cy
        lam_max = 0.5 * (a + c) + 0.5 * math.sqrt((a - c) * (a - c) + 4.0 * b * b)
        radius = math.sqrt(2.0 * math.log(255.0 * op) * lam_max)
        x0 = int(math.floor(mx - radius))
        x1 = int(math.ceil(mx + radius))
        y0 = int(math.floor(my - radius))
        y1 = int(math.ceil(my + radius))
        if x1 < 0 or y1 < 0 or x0 > width - 1 or y0 > height - 1:
            continue
        if x0 < 0:
            x0 = 0
        if y0 < 0:
            y0 = 0
        if x1 > width - 1:
            x1 = width - 1
        if y1 > height - 1:
            y1 = height - 1
        mean2d[i, 0] = mx
        mean2d[i, 1] = my
        inv_det = 1.0 / det
        conic[i, 0] = c * inv_det
        conic[i, 1] = -b * inv_det
        conic[i, 2] = a * inv_det
        depth[i] = z
        bbox[i, 0] = x0
        bbox[i, 1] = x1
        bbox[i, 2] = y0
        bbox[i, 3] = y1
        ok[i] = True
    return mean2d, conic, depth, bbox, ok


@njit(cache=True, nogil=True)
def _bin_tiles(bbox, tiles_x, tiles_y):
    n = bbox.shape[0]
    n_tiles = tiles_x * tiles_y
    counts = np.zeros(n_tiles + 1, np.int64)
    for i in range(n):
        tx0 = bbox[i, 0] // TILE
        tx1 = bbox[i, 1] // TILE
        ty0 = bbox[i, 2] // TILE
        ty1 = bbox[i, 3] // TILE
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                counts[ty * tiles_x + tx + 1] += 1
    offsets = np.cumsum(counts)
    items = np.empty(offsets[-1], np.int64)
    cursor = offsets[:-1].copy()
    for i in range(n):
        tx0 = bbox[i, 0] // TILE
        tx1 = bbox[i, 1] // TILE
        ty0 = bbox[i, 2] // TILE
        ty1 = bbox[i, 3] // TILE
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                t = ty * tiles_x + tx
                items[cursor[t]] = i
                cursor[t] += 1
    return offsets, items


@njit(cache=True, nogil=True)
def _raster_tile_range(
    t_begin, t_end, tiles_x, offsets, items, mean2d, conic, opacities, colors, bbox, bg, out, width, height
):
    for t in range(t_begin, t_end):
        ty = t // tiles_x
        tx = t % tiles_x
        px0 = tx * TILE
        py0 = ty * TILE
        pw = min(TILE, width - px0)
        ph = min(TILE, height - py0)
        trans = np.ones((ph, pw))
        cbuf = np.zeros((ph, pw, 3))
        n_pix = ph * pw
        saturated = 0
        for idx in range(offsets[t], offsets[t + 1]):
            if saturated == n_pix:
                break
            i = items[idx]
            x0 = max(bbox[i, 0], px0)
            x1 = min(bbox[i, 1], px0 + pw - 1)
            y0 = max(bbox[i, 2], py0)
            y1 = min(bbox[i, 3], py0 + ph - 1)
            ca = conic[i, 0]
            cb = conic[i, 1]
            cc = conic[i, 2]
            mx = mean2d[i, 0]
            my = mean2d[i, 1]
            op = opacities[i]
            r = colors[i, 0]
            g = colors[i, 1]
            b = colors[i, 2]
            for py in range(y0, y1 + 1):
                ly = py - py0
                dy = py - my
                for px in range(x0, x1 + 1):
                    lx = px - px0
                    t_cur = trans[ly, lx]
                    if t_cur < TRANSMITTANCE_MIN:
                        continue
                    dx = px - mx
                    rho = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
                    if rho < 0.0:
                        rho = 0.0
                    alpha = op * math.exp(-0.5 * rho)
                    if alpha < ALPHA_MIN:
                        continue
                    if alpha > ALPHA_MAX:
                        alpha = ALPHA_MAX
                    weight = t_cur * alpha
                    cbuf[ly, lx, 0] += weight * r
                    cbuf[ly, lx, 1] += weight * g
                    cbuf[ly, lx, 2] += weight * b
                    t_new = t_cur * (1.0 - alpha)
                    trans[ly, lx] = t_new
                    if t_new < TRANSMITTANCE_MIN:
                        saturated += 1
        for ly in range(ph):
            for lx in range(pw):
                t_rem = trans[ly, lx]
                out[py0 + ly, px0 + lx, 0] = cbuf[ly, lx, 0] + t_rem * bg[0]
                out[py0 + ly, px0 + lx, 1] = cbuf[ly, lx, 1] + t_rem * bg[1]
                out[py0 + ly, px0 + lx, 2] = cbuf[ly, lx, 2] + t_rem * bg[2]


def _quantize(buf: DoubleMatrix) -> npt.NDArray[np.uint8]:
    return np.clip(np.rint(buf * 255.0), 0.0, 255.0).astype(np.uint8)


def _camera_in_scene_frame(scene: SplatScene, body_pose: RigidTransform, cam_from_body: RigidTransform):
    """Camera pose expressed in the gaussians' frame, plus the scaled near plane."""
    cam_world = body_camera_pose(body_pose, cam_from_body)
    cam_scene = scene.alignment.apply_pose(cam_world)
    return cam_scene, NEAR_PLANE * scene.alignment.scale


def render(
    scene: SplatScene,
    body_pose: RigidTransform,
    cam_from_body: RigidTransform,
    intrinsics: CameraIntrinsics,
    workers: int | None = None,
) -> Image:
    """Rasterize the scene from the camera mounted on ``body_pose``.

    ``workers`` caps the tile-level thread parallelism (default: all cores).
    Output is bit-identical for any worker count: tiles own disjoint pixels
    and the blend order within each pixel is the global depth order.
    """
    k = intrinsics
    cam_scene, near = _camera_in_scene_frame(scene, body_pose, cam_from_body)
    out = np.empty((k.height, k.width, 3), dtype=np.float64)

    if len(scene) == 0:
        out[:] = scene.background
        return Image(k.width, k.height, _quantize(out))

    r_cw = np.ascontiguousarray(cam_scene.rotation.to_matrix().T)
    mean2d, conic, depth, bbox, ok = _project_kernel(
        scene.means, scene.scales, scene.rotations, scene.opacities,
        r_cw, cam_scene.translation, k.fx, k.fy, k.cx, k.cy, k.width, k.height, near,
    )
    visible = np.nonzero(ok)[0]
    if visible.size == 0:
        out[:] = scene.background
        return Image(k.width, k.height, _quantize(out))
    order = visible[np.argsort(depth[visible], kind="stable")]

    mean2d_s = np.ascontiguousarray(mean2d[order])
    conic_s = np.ascontiguousarray(conic[order])
    op_s = np.ascontiguousarray(scene.opacities[order])
    col_s = np.ascontiguousarray(scene.colors[order])
    bbox_s = np.ascontiguousarray(bbox[order])

    tiles_x = (k.width + TILE - 1) // TILE
    tiles_y = (k.height + TILE - 1) // TILE
    offsets, items = _bin_tiles(bbox_s, tiles_x, tiles_y)

    n_tiles = tiles_x * tiles_y
    if workers is None:
        workers = os.cpu_count() or 1
    workers = max(1, min(workers, n_tiles))
    bg = scene.background
    if workers == 1:
        _raster_tile_range(
            0, n_tiles, tiles_x, offsets, items, mean2d_s, conic_s, op_s, col_s, bbox_s, bg, out, k.width, k.height
        )
    else:
        bounds = np.linspace(0, n_tiles, workers * 4 + 1).astype(np.int64)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(
                    _raster_tile_range,
                    int(b0), int(b1), tiles_x, offsets, items,
                    mean2d_s, conic_s, op_s, col_s, bbox_s, bg, out, k.width, k.height,
                )
                for b0, b1 in zip(bounds[:-1], bounds[1:])
                if b1 > b0
            ]
            for fut in futures:
                fut.result()
    return Image(k.width, k.height, _quantize(out))


def render_reference(
    scene: SplatScene,
    body_pose: RigidTransform,
    cam_from_body: RigidTransform,
    intrinsics: CameraIntrinsics,
) -> Image:
    """Per-pixel brute-force renderer: same blend contract, no tiling, no culling."""
    k = intrinsics
    cam_scene, near = _camera_in_scene_frame(scene, body_pose, cam_from_body)

    splats: list[tuple[int, Splat2D]] = []
    for i in range(len(scene)):
        s = project_gaussian(scene.gaussian(i), cam_scene, k, near=near)
        if s is not None:
            splats.append((i, s))
    splats.sort(key=lambda pair: pair[1].depth)  # stable: ties keep input order

    xs = np.arange(k.width, dtype=np.float64)[None, :]
    ys = np.arange(k.height, dtype=np.float64)[:, None]
    color = np.zeros((k.height, k.width, 3))
    trans = np.ones((k.height, k.width))
    for _, s in splats:
        if trans.max() < TRANSMITTANCE_MIN:
            break
        inv = np.linalg.inv(s.cov2d)
        dx = xs - s.mean2d[0]
        dy = ys - s.mean2d[1]
        rho = inv[0, 0] * dx * dx + 2.0 * inv[0, 1] * dx * dy + inv[1, 1] * dy * dy
        alpha = np.minimum(s.opacity * np.exp(-0.5 * rho), ALPHA_MAX)
        alpha[(alpha < ALPHA_MIN) | (trans < TRANSMITTANCE_MIN)] = 0.0
        color += (trans * alpha)[:, :, None] * s.color
        trans *= 1.0 - alpha
    color += trans[:, :, None] * scene.background
    return Image(k.width, k.height, _quantize(color))

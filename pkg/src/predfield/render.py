"""Pinhole rays, depth sampling and the volume-rendering quadrature.

Cameras follow the OpenCV convention (x right, y down, z forward). Pixel
``(u, v)`` is column ``u``, row ``v``; its center sits at ``(u + 0.5, v + 0.5)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from PIL import Image

from . import autodiff as ad
from .autodiff import Tensor
from .nets import FieldBundle, embed_weights, motion_query, spacetime_query


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray  # camera-to-world, columns are camera axes in world
    translation: np.ndarray  # camera center in world

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        R = self.rotation
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-5 or abs(np.linalg.det(R) - 1.0) > 1e-5:
            raise ValueError("camera rotation must be orthonormal with determinant +1")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")

    @property
    def matrix_3x4(self) -> np.ndarray:
        return np.concatenate([self.rotation, self.translation[:, None]], axis=1)

    def project(self, points: np.ndarray) -> np.ndarray:
        """World points (N, 3) to continuous pixel indices (N, 2) as (u, v)."""
        cam = (np.asarray(points, dtype=np.float64) - self.translation) @ self.rotation
        z = cam[:, 2]
        u = self.fx * cam[:, 0] / z + self.cx - 0.5
        v = self.fy * cam[:, 1] / z + self.cy - 0.5
        return np.stack([u, v], axis=-1)


def look_at(eye, target, up, fx: float, width: int, height: int) -> Camera:
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    up = np.asarray(up, dtype=np.float64)
    y = -(up - (up @ z) * z)
    y /= np.linalg.norm(y)
    x = np.cross(y, z)
    return Camera(fx, fx, width / 2.0, height / 2.0, width, height, np.stack([x, y, z], axis=1), eye)


@dataclass
class RayBatch:
    origins: np.ndarray  # (R, 3)
    directions: np.ndarray  # (R, 3), unit length
    near: np.ndarray  # (R,)
    far: np.ndarray  # (R,)
    time: float
    targets: np.ndarray | None = None  # (R, 3)

    def __len__(self) -> int:
        return len(self.origins)

    def subset(self, idx) -> "RayBatch":
        return RayBatch(self.origins[idx], self.directions[idx], self.near[idx], self.far[idx], self.time,
                        None if self.targets is None else self.targets[idx])


def ray_box_bounds(origins: np.ndarray, directions: np.ndarray, lo, hi, min_near: float = 1e-3):
    """Slab-test entry/exit distances; rays missing the box get a tiny interval at closest approach."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / directions
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    tmin = np.nanmax(np.minimum(t0, t1), axis=-1)
    tmax = np.nanmin(np.maximum(t0, t1), axis=-1)
    near = np.maximum(tmin, min_near)
    far = tmax
    miss = far <= near + 1e-6
    if miss.any():
        center = (lo + hi) / 2
        closest = np.maximum(((center - origins[miss]) * directions[miss]).sum(-1), min_near)
        near[miss] = closest
        far[miss] = closest + 1e-3
    return near, far


def generate_rays(camera: Camera, pixels, t: float, bounds: tuple) -> RayBatch:
    """Back-project pixels; ``pixels`` is (K, 2) as (u, v).

    Integer entries hit pixel centers. Fractional entries are allowed and are
    measured in the same units, so ``u = 0.5`` lies halfway between the first
    two centers.
    """
    pix = np.asarray(pixels)
    if pix.ndim != 2 or pix.shape[1] != 2:
        raise ValueError("pixels must have shape (K, 2)")
    u, v = pix[:, 0], pix[:, 1]
    if (u < 0).any() or (u > camera.width - 1).any() or (v < 0).any() or (v > camera.height - 1).any():
        raise ValueError(f"pixel index outside {camera.width}x{camera.height} image")
    dirs_cam = np.stack([(u + 0.5 - camera.cx) / camera.fx, (v + 0.5 - camera.cy) / camera.fy,
                         np.ones(len(u))], axis=-1)
    dirs = dirs_cam @ camera.rotation.T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(camera.translation, dirs.shape).copy()
    near, far = ray_box_bounds(origins, dirs, bounds[0], bounds[1])
    return RayBatch(origins, dirs, near, far, float(t))


def bilinear(image: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Interpolate ``image`` (H, W, C) between pixel centers at continuous (u, v)."""
    H, W = image.shape[:2]
    u = np.clip(np.asarray(u, dtype=np.float64), 0, W - 1)
    v = np.clip(np.asarray(v, dtype=np.float64), 0, H - 1)
    u0 = np.minimum(np.floor(u).astype(int), W - 2) if W > 1 else np.zeros(u.shape, int)
    v0 = np.minimum(np.floor(v).astype(int), H - 2) if H > 1 else np.zeros(v.shape, int)
    fu = (u - u0)[:, None]
    fv = (v - v0)[:, None]
    u1 = np.minimum(u0 + 1, W - 1)
    v1 = np.minimum(v0 + 1, H - 1)
    top = image[v0, u0] * (1 - fu) + image[v0, u1] * fu
    bottom = image[v1, u0] * (1 - fu) + image[v1, u1] * fu
    return top * (1 - fv) + bottom * fv


def all_pixels(camera: Camera) -> np.ndarray:
    v, u = np.mgrid[0:camera.height, 0:camera.width]
    return np.stack([u.ravel(), v.ravel()], axis=-1)


def sample_points(rays: RayBatch, num_samples: int, stratified: bool, rng=None) -> np.ndarray:
    """Depths (R, S) splitting [near, far] into equal bins.

    Without stratification the bin midpoints are used; otherwise one uniform
    draw per bin. ``rng`` may be a seed or a ``numpy.random.Generator``.
    """
    if num_samples < 2:
        raise ValueError("num_samples must be >= 2")
    edges = np.linspace(0.0, 1.0, num_samples + 1)
    lo, width = edges[:-1], 1.0 / num_samples
    if stratified:
        gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        frac = lo + width * gen.random((len(rays), num_samples))
    else:
        frac = np.broadcast_to(lo + width / 2, (len(rays), num_samples))
    return rays.near[:, None] + (rays.far - rays.near)[:, None] * frac


def _check_depths(depths: np.ndarray) -> None:
    if depths.shape[1] > 1 and not np.all(np.diff(depths, axis=1) > 0):
        raise ValueError("render: sample depths must be strictly increasing along each ray")


def composite(sigma: Tensor, color: Tensor, depths: np.ndarray, far: np.ndarray):
    """alpha_i = 1 - exp(-sigma_i delta_i), T_i = exp(-sum_{j<i} sigma_j delta_j).

    Returns (rgb (R, 3), opacity (R,), weights (R, S)). The final interval runs
    to the far bound.
    """
    dtype = sigma.dtype
    delta = np.concatenate([np.diff(depths, axis=1), (far - depths[:, -1])[:, None]], axis=1).astype(dtype)
    sd = ad.mul(sigma, delta)
    alpha = ad.sub(1.0, ad.exp(ad.neg(sd)))
    trans = ad.exp(ad.neg(ad.cumsum_exclusive(sd)))
    weights = ad.mul(trans, alpha)
    rgb = ad.sum_(ad.mul(ad.expand_last(weights, 3), color), axis=1)
    # 1 - exp(-total) telescopes the weights and stays <= 1 in floating point
    opacity = ad.sub(1.0, ad.exp(ad.neg(ad.sum_(sd, axis=1))))
    return rgb, opacity, weights


QueryFn = Callable[[np.ndarray], tuple]


def render_field(query: Callable, rays: RayBatch, depths: np.ndarray):
    """Composite an arbitrary field. ``query(points (N, 3))`` returns (sigma (N,), rgb (N, 3))."""
    depths = np.asarray(depths)
    _check_depths(depths)
    R, S = depths.shape
    pts = rays.origins[:, None, :] + rays.directions[:, None, :] * depths[..., None]
    sigma, color = query(pts.reshape(R * S, 3))
    sigma = ad.reshape(sigma, (R, S))
    color = ad.reshape(color, (R, S, 3))
    return composite(sigma, color, depths, rays.far)


def render_rays(bundle: FieldBundle, rays: RayBatch, depths: np.ndarray, time: float | None = None):
    """Render with the space-time field queried at the rays' own time."""
    t = rays.time if time is None else time

    def query(p):
        s = spacetime_query(bundle, p, t)
        return s.density, s.color

    rgb, opacity, _ = render_field(query, rays, depths)
    return rgb, opacity


def render_rays_with_motion(bundle: FieldBundle, rays: RayBatch, depths: np.ndarray, transition: int | None = None,
                            weights: Tensor | None = None, omega: Tensor | None = None):
    """Render frame t by advecting samples into frame t + dt.

    Each sample p is moved to p + M(p, omega) and F is evaluated there at time
    t + dt. The embedding comes from ``omega`` if given, else from ``weights``
    combined with the basis, else from the stored code of ``transition``.
    """
    if omega is None:
        if weights is not None:
            omega = embed_weights(bundle.basis, weights)
        elif transition is not None:
            omega = bundle.embedding(transition)
        else:
            raise ValueError("render_rays_with_motion: need a transition, weights or embedding")
    t_next = rays.time + bundle.frame_step

    def query(p):
        pt = ad.as_tensor(p)
        moved = ad.add(pt, motion_query(bundle, pt, omega))
        s = spacetime_query(bundle, moved, t_next)
        return s.density, s.color

    rgb, opacity, _ = render_field(query, rays, depths)
    return rgb, opacity


def render_image(bundle: FieldBundle, camera: Camera, t: float, num_samples: int = 64, chunk: int = 2048,
                 stratified: bool = False, seed: int = 0, with_opacity: bool = False):
    """Full (H, W, 3) image rendered in chunks without recording a graph."""
    bounds = (bundle.cfg.bounds_min, bundle.cfg.bounds_max)
    rays = generate_rays(camera, all_pixels(camera), t, bounds)
    rng = np.random.default_rng(seed)
    out = np.zeros((len(rays), 3))
    acc = np.zeros(len(rays))
    with ad.no_grad():
        for lo in range(0, len(rays), chunk):
            sub = rays.subset(slice(lo, lo + chunk))
            depths = sample_points(sub, num_samples, stratified, rng)
            rgb, opacity = render_rays(bundle, sub, depths)
            out[lo:lo + chunk] = rgb.data
            acc[lo:lo + chunk] = opacity.data
    img = out.reshape(camera.height, camera.width, 3)
    if with_opacity:
        return img, acc.reshape(camera.height, camera.width)
    return img


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(path, image: np.ndarray) -> None:
    Image.fromarray(to_uint8(image), mode="RGB").save(path)


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    return float("inf") if mse == 0 else -10.0 * np.log10(mse)

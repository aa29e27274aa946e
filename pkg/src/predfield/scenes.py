"""Procedural dynamic scenes with exact ground truth, the 2D toy, and dataset IO.

Ground-truth images are produced with the same quadrature used in training
(``render.render_field``), evaluated against the analytic density and color
of rigidly moving spheres and boxes.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .render import Camera, all_pixels, bilinear, generate_rays, load_png, look_at, render_field, sample_points, save_png

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


class DatasetError(ValueError):
    pass


# --- trajectories and primitives ------------------------------------------------


@dataclass
class Trajectory:
    """Time-parameterised translation offset (world units) as a function of frame index.

    kind: ``static``, ``linear`` (velocity per frame), ``sinusoid``
    (amplitude * sin(2 pi frame / period + phase)) or ``orbit`` (circle of
    ``radius`` in the plane spanned by ``axis_a`` and ``axis_b``).
    """

    kind: str = "static"
    velocity: tuple = (0.0, 0.0, 0.0)
    amplitude: tuple = (0.0, 0.0, 0.0)
    period: float = 12.0
    phase: float = 0.0
    radius: float = 0.0
    axis_a: tuple = (1.0, 0.0, 0.0)
    axis_b: tuple = (0.0, 1.0, 0.0)

    def offset(self, frame) -> np.ndarray:
        f = np.asarray(frame, dtype=np.float64)
        if self.kind == "static":
            return np.zeros(f.shape + (3,))
        if self.kind == "linear":
            return f[..., None] * np.asarray(self.velocity)
        if self.kind == "sinusoid":
            s = np.sin(2 * math.pi * f / self.period + self.phase)
            return s[..., None] * np.asarray(self.amplitude)
        if self.kind == "orbit":
            ang = 2 * math.pi * f / self.period + self.phase
            a, b = np.asarray(self.axis_a), np.asarray(self.axis_b)
            base = self.radius * (math.cos(self.phase) * a + math.sin(self.phase) * b)
            return self.radius * (np.cos(ang)[..., None] * a + np.sin(ang)[..., None] * b) - base
        raise ValueError(f"unknown trajectory kind {self.kind!r}")


@dataclass
class Primitive:
    shape: str  # "sphere" or "box"
    center: tuple
    size: tuple  # radius for spheres (first entry), half extents for boxes
    color: tuple
    extinction: float = 40.0
    trajectory: Trajectory = field(default_factory=Trajectory)
    appear_frame: int = 0
    num_keypoints: int = 12

    def position(self, frame) -> np.ndarray:
        return np.asarray(self.center) + self.trajectory.offset(frame)

    def signed_distance(self, p: np.ndarray, frame: float) -> np.ndarray:
        q = p - self.position(frame)
        if self.shape == "sphere":
            return np.linalg.norm(q, axis=-1) - self.size[0]
        if self.shape == "box":
            d = np.abs(q) - np.asarray(self.size)
            outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
            inside = np.minimum(d.max(axis=-1), 0.0)
            return outside + inside
        raise ValueError(f"unknown primitive shape {self.shape!r}")

    def bounding_radius(self, falloff: float) -> float:
        r = self.size[0] if self.shape == "sphere" else float(np.linalg.norm(self.size))
        return r + falloff / 2 + 1e-9

    def inner_extent(self) -> float:
        return self.size[0] if self.shape == "sphere" else float(min(self.size))

    def keypoint_offsets(self) -> np.ndarray:
        """Fixed body-frame offsets on a Fibonacci spiral at 80% of the extent."""
        k = self.num_keypoints
        i = np.arange(k) + 0.5
        phi = np.arccos(1 - 2 * i / k)
        theta = math.pi * (1 + 5 ** 0.5) * i
        dirs = np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=-1)
        if self.shape == "sphere":
            return 0.8 * self.size[0] * dirs
        return 0.8 * dirs / np.abs(dirs).max(axis=-1, keepdims=True) * np.asarray(self.size)


def smooth_occupancy(sd: np.ndarray, width: float) -> np.ndarray:
    """1 inside, 0 outside, smoothstep across a band of ``width`` centred on the surface."""
    if width <= 0:
        return (sd <= 0).astype(np.float64)
    x = np.clip(0.5 - sd / width, 0.0, 1.0)
    return x * x * (3 - 2 * x)


@dataclass
class SceneSpec:
    primitives: list = field(default_factory=list)
    frame_count: int = 25
    num_cameras: int = 6
    image_size: int = 64
    ring_radius: float = 3.0
    ring_height: float = 0.8
    focal: float = 100.0
    bounds_min: tuple = (-1.0, -1.0, -1.0)
    bounds_max: tuple = (1.0, 1.0, 1.0)
    falloff: float = 0.04
    gt_samples: int = 256
    name: str = "scene"

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scene keys: {sorted(unknown)}")
        prims = []
        for i, p in enumerate(d.pop("primitives", [])):
            p = dict(p)
            extra = set(p) - set(Primitive.__dataclass_fields__)
            if extra:
                raise ValueError(f"primitives[{i}]: unknown keys {sorted(extra)}")
            traj = p.pop("trajectory", {}) or {}
            extra = set(traj) - set(Trajectory.__dataclass_fields__)
            if extra:
                raise ValueError(f"primitives[{i}].trajectory: unknown keys {sorted(extra)}")
            traj = {k: tuple(v) if isinstance(v, list) else v for k, v in traj.items()}
            p = {k: tuple(v) if isinstance(v, list) else v for k, v in p.items()}
            prims.append(Primitive(trajectory=Trajectory(**traj), **p))
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(primitives=prims, **d)

    def to_dict(self) -> dict:
        return asdict(self)


def analytic_field(spec: SceneSpec, p: np.ndarray, frame: float):
    """Exact (sigma (N,), rgb (N, 3)) of the scene at integer or fractional frame.

    Overlapping primitives add their densities; color is the density-weighted
    mean.
    """
    p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
    sigma = np.zeros(len(p))
    weighted = np.zeros((len(p), 3))
    for prim in spec.primitives:
        if frame < prim.appear_frame:
            continue
        near = np.flatnonzero(np.abs(p - prim.position(frame)).max(axis=-1) <= prim.bounding_radius(spec.falloff))
        if len(near) == 0:
            continue
        s = prim.extinction * smooth_occupancy(prim.signed_distance(p[near], frame), spec.falloff)
        sigma[near] += s
        weighted[near] += s[:, None] * np.asarray(prim.color)
    color = np.where(sigma[:, None] > 0, weighted / np.maximum(sigma[:, None], 1e-12), 0.0)
    return sigma, color


# --- scene sequences ----------------------------------------------------------------


@dataclass
class SceneSequence:
    cameras: list
    frames: np.ndarray  # (frames, cameras, H, W, 3), values on the 8-bit grid
    keypoints: np.ndarray  # (frames, J, 3)
    keypoint_owner: np.ndarray  # (J,) primitive index
    bounds: tuple  # ((3,), (3,))
    frame_count: int
    seed: int = 0
    spec: SceneSpec | None = None

    @property
    def num_cameras(self) -> int:
        return len(self.cameras)

    @property
    def diameter(self) -> float:
        lo, hi = np.asarray(self.bounds[0]), np.asarray(self.bounds[1])
        return float(np.linalg.norm(hi - lo))

    def frame_time(self, frame: int) -> float:
        return frame / (self.frame_count - 1)


def camera_ring(spec: SceneSpec) -> list[Camera]:
    cams = []
    for k in range(spec.num_cameras):
        ang = 2 * math.pi * k / spec.num_cameras
        eye = (spec.ring_radius * math.cos(ang), spec.ring_radius * math.sin(ang), spec.ring_height)
        cams.append(look_at(eye, (0.0, 0.0, 0.0), (0.0, 0.0, 1.0), spec.focal, spec.image_size, spec.image_size))
    return cams


def render_gt(spec: SceneSpec, camera: Camera, frame: float, num_samples: int | None = None,
              chunk: int = 4096) -> np.ndarray:
    """Ground-truth image via the training quadrature at midpoint depths."""
    n = num_samples or spec.gt_samples
    rays = generate_rays(camera, all_pixels(camera), 0.0, (spec.bounds_min, spec.bounds_max))
    out = np.zeros((len(rays), 3))
    # rays missing every primitive's bounding sphere see zero density: exactly black
    hit = np.zeros(len(rays), dtype=bool)
    for prim in spec.primitives:
        if frame < prim.appear_frame:
            continue
        c = prim.position(frame)
        along = ((c - rays.origins) * rays.directions).sum(-1)
        closest = rays.origins + along[:, None] * rays.directions
        hit |= np.linalg.norm(closest - c, axis=-1) <= prim.bounding_radius(spec.falloff)
    idx = np.flatnonzero(hit)
    rays = rays.subset(idx)

    def query(pts):
        s, c = analytic_field(spec, pts, frame)
        return ad.Tensor(s, dtype=np.float64), ad.Tensor(c, dtype=np.float64)

    with ad.no_grad():
        for lo in range(0, len(rays), chunk):
            sub = rays.subset(slice(lo, lo + chunk))
            rgb, _, _ = render_field(query, sub, sample_points(sub, n, False))
            out[idx[lo:lo + chunk]] = rgb.data
    return out.reshape(camera.height, camera.width, 3)


def quantize(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0, 1) * 255.0) / 255.0


def make_scene(spec: SceneSpec, seed: int = 0, render: bool = True) -> SceneSequence:
    """Build cameras, GT frames and keypoint tracks. Rejects primitives leaving the bounds."""
    if spec.frame_count < 2:
        raise ValueError("frame_count must be >= 2")
    lo, hi = np.asarray(spec.bounds_min), np.asarray(spec.bounds_max)
    frames_idx = np.arange(spec.frame_count)
    kps, owners = [], []
    for i, prim in enumerate(spec.primitives):
        centers = prim.position(frames_idx)
        ext = prim.size[0] if prim.shape == "sphere" else np.asarray(prim.size)
        if np.any(centers - ext < lo) or np.any(centers + ext > hi):
            raise ValueError(f"primitive {i} ({prim.shape}) leaves the scene bounds")
        offs = prim.keypoint_offsets()
        kps.append(centers[:, None, :] + offs[None, :, :])
        owners.extend([i] * len(offs))
    keypoints = np.concatenate(kps, axis=1) if kps else np.zeros((spec.frame_count, 0, 3))
    cams = camera_ring(spec)
    frames = np.zeros((spec.frame_count, len(cams), spec.image_size, spec.image_size, 3))
    if render:
        for f in range(spec.frame_count):
            for k, cam in enumerate(cams):
                frames[f, k] = quantize(render_gt(spec, cam, f))
    # the seed only labels the sequence; scene content is fully specified
    return SceneSequence(cams, frames, keypoints, np.asarray(owners, dtype=int),
                         (tuple(map(float, lo)), tuple(map(float, hi))), spec.frame_count, seed, spec)


def default_sphere_spec(kind: str = "linear", frame_count: int = 25, image_size: int = 64,
                        num_cameras: int = 6, gt_samples: int = 256) -> SceneSpec:
    """Single colored sphere: ``static``, ``linear`` (translating) or ``sinusoid`` (periodic)."""
    if kind == "static":
        traj = Trajectory()
        center = (0.0, 0.0, 0.0)
    elif kind == "linear":
        traj = Trajectory("linear", velocity=(0.03, 0.0, 0.0))
        center = (-0.36, 0.0, 0.0)
    elif kind == "sinusoid":
        traj = Trajectory("sinusoid", amplitude=(0.12, 0.0, 0.0), period=8.0)
        center = (0.0, 0.0, 0.0)
    else:
        raise ValueError(f"unknown sphere scene kind {kind!r}")
    body = Primitive("sphere", center, (0.3,), (0.9, 0.2, 0.15), extinction=30.0, trajectory=traj)
    # colored markers riding on the body break the symmetry of a uniform sphere
    markers = []
    marker_colors = [(0.1, 0.8, 0.2), (0.15, 0.3, 0.95), (0.95, 0.9, 0.1), (0.9, 0.9, 0.9)]
    marker_dirs = [(0.0, -1.0, 0.3), (0.0, 1.0, 0.3), (1.0, 0.0, 0.5), (-1.0, 0.0, 0.5)]
    for col, d in zip(marker_colors, marker_dirs):
        d = np.asarray(d) / np.linalg.norm(d)
        c = tuple(float(x) for x in np.asarray(center) + 0.3 * d)
        markers.append(Primitive("sphere", c, (0.1,), col, extinction=30.0, trajectory=traj, num_keypoints=8))
    return SceneSpec([body] + markers, frame_count=frame_count, image_size=image_size, num_cameras=num_cameras,
                     gt_samples=gt_samples, name=f"sphere_{kind}")


# --- 2D toy ---------------------------------------------------------------------------


@dataclass
class Warp2D:
    """Smooth displacement field on [-1, 1]^2.

    ``shear``: dx = a sin(pi f y), dy = 0. ``swirl``: rotation by
    a exp(-r^2 / s^2) radians about the origin, minus the identity.
    """

    kind: str
    amplitude: float
    frequency: float = 1.0
    spread: float = 0.6

    def displacement(self, p: np.ndarray) -> np.ndarray:
        x, y = p[..., 0], p[..., 1]
        if self.kind == "shear":
            return np.stack([self.amplitude * np.sin(math.pi * self.frequency * y), np.zeros_like(y)], axis=-1)
        if self.kind == "swirl":
            ang = self.amplitude * np.exp(-(x * x + y * y) / self.spread ** 2)
            c, s = np.cos(ang), np.sin(ang)
            return np.stack([c * x - s * y - x, s * x + c * y - y], axis=-1)
        raise ValueError(f"unknown warp kind {self.kind!r}")

    def apply(self, p: np.ndarray) -> np.ndarray:
        return p + self.displacement(p)

    def inverse(self, q: np.ndarray, iters: int = 100) -> np.ndarray:
        """Solve p + D(p) = q by fixed-point iteration (contractive for small amplitude)."""
        p = q.copy()
        for _ in range(iters):
            p_new = q - self.displacement(p)
            if np.abs(p_new - p).max() < 1e-13:
                return p_new
            p = p_new
        return p

    def _jacobians(self, n: int):
        g = np.linspace(-1, 1, n)
        X, Y = np.meshgrid(g, g)
        p = np.stack([X, Y], axis=-1)
        h = 1e-5
        ex = (self.displacement(p + [h, 0]) - self.displacement(p - [h, 0])) / (2 * h)
        ey = (self.displacement(p + [0, h]) - self.displacement(p - [0, h])) / (2 * h)
        return np.stack([ex, ey], axis=-1)  # (n, n, 2, 2), d D_i / d p_j

    def min_jacobian_det(self, n: int = 201) -> float:
        J = self._jacobians(n) + np.eye(2)
        return float(np.linalg.det(J).min())

    def lipschitz(self, n: int = 201) -> float:
        """Largest spectral norm of the displacement Jacobian; < 1 makes ``inverse`` converge."""
        return float(np.linalg.norm(self._jacobians(n), ord=2, axis=(-2, -1)).max())


@dataclass
class ToySpec:
    resolution: int = 32
    frame_count: int = 8
    warp_a: Warp2D = field(default_factory=lambda: Warp2D("shear", 0.12, 1.0))
    warp_b: Warp2D = field(default_factory=lambda: Warp2D("swirl", 0.5, spread=0.6))
    num_blobs: int = 20
    blob_scale: float = 0.15
    # std of Gaussian observation noise added to every frame; GT motion is unaffected
    noise: float = 0.05

    @classmethod
    def from_dict(cls, d: dict) -> "ToySpec":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown toy keys: {sorted(unknown)}")
        for key in ("warp_a", "warp_b"):
            if key in d and isinstance(d[key], dict):
                extra = set(d[key]) - set(Warp2D.__dataclass_fields__)
                if extra:
                    raise ValueError(f"{key}: unknown keys {sorted(extra)}")
                d[key] = Warp2D(**d[key])
        return cls(**d)


@dataclass
class ToySequence2D:
    frames: np.ndarray  # (T, H, W, 3)
    motion: np.ndarray  # (T - 1, H, W, 2) displacement of each frame-t pixel into frame t+1
    pattern: list  # per transition, "A" or "B"
    coords: np.ndarray  # (H, W, 2) pixel centers in [-1, 1]^2, (x, y)
    spec: ToySpec
    seed: int = 0

    @property
    def frame_count(self) -> int:
        return len(self.frames)

    @property
    def num_transitions(self) -> int:
        return len(self.motion)

    def sample(self, frame: int, points: np.ndarray) -> np.ndarray:
        """Bilinear color of ``frame`` at continuous points (N, 2) in [-1, 1]^2."""
        H, W = self.frames.shape[1:3]
        p = np.asarray(points, dtype=np.float64)
        return bilinear(self.frames[frame], (p[:, 0] + 1) / 2 * W - 0.5, (p[:, 1] + 1) / 2 * H - 0.5)


def toy_texture(seed: int, num_blobs: int, scale: float):
    """Random sum of colored Gaussian blobs on a dark background, as a callable."""
    rng = np.random.default_rng(seed)
    centers = rng.uniform(-0.8, 0.8, (num_blobs, 2))
    colors = rng.uniform(0.2, 1.0, (num_blobs, 3))
    scales = scale * rng.uniform(0.6, 1.4, num_blobs)

    def tex(p: np.ndarray) -> np.ndarray:
        d2 = ((p[..., None, :] - centers) ** 2).sum(-1)
        w = np.exp(-d2 / (2 * scales ** 2))
        return np.clip(w @ colors, 0.0, 1.0)

    return tex


def pixel_grid(resolution: int) -> np.ndarray:
    g = (np.arange(resolution) + 0.5) / resolution * 2 - 1
    X, Y = np.meshgrid(g, g)
    return np.stack([X, Y], axis=-1)


def make_toy2d(spec: ToySpec, seed: int = 0) -> ToySequence2D:
    """Frames alternate warp A, warp B, ... applied cumulatively to a blob texture.

    Transition k moves every point p of frame k to p + D_k(p); so
    frame_{k+1}(q) = frame_k(W_k^{-1}(q)), and the texture is evaluated
    analytically after pulling q back through all previous inverse warps.
    """
    for w in (spec.warp_a, spec.warp_b):
        if w.min_jacobian_det() <= 0.05:
            raise ValueError(f"warp {w.kind} with amplitude {w.amplitude} folds over")
        if w.lipschitz() >= 0.9:
            raise ValueError(f"warp {w.kind} with amplitude {w.amplitude} is too strong to invert reliably")
    if spec.frame_count < 2:
        raise ValueError("frame_count must be >= 2")
    if spec.noise < 0:
        raise ValueError("noise must be >= 0")
    tex = toy_texture(seed, spec.num_blobs, spec.blob_scale)
    coords = pixel_grid(spec.resolution)
    warps = [spec.warp_a if k % 2 == 0 else spec.warp_b for k in range(spec.frame_count - 1)]
    frames = []
    for f in range(spec.frame_count):
        q = coords
        for w in reversed(warps[:f]):
            q = w.inverse(q)
        frames.append(tex(q))
    frames = np.stack(frames)
    if spec.noise > 0:
        noise_rng = np.random.default_rng([seed, 1])
        frames = np.clip(frames + noise_rng.normal(0.0, spec.noise, frames.shape), 0.0, 1.0)
    motion = np.stack([w.displacement(coords) for w in warps])
    pattern = ["A" if k % 2 == 0 else "B" for k in range(spec.frame_count - 1)]
    return ToySequence2D(frames, motion, pattern, coords, spec, seed)


# --- dataset IO -------------------------------------------------------------------------


def save_dataset(seq: SceneSequence, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    with open(path / "cameras.txt", "w") as fh:
        for cam in seq.cameras:
            vals = [cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height] + list(cam.matrix_3x4.ravel())
            fh.write(" ".join(repr(float(v)) for v in vals) + "\n")
    for k in range(seq.num_cameras):
        (path / "frames" / f"cam{k}").mkdir(parents=True, exist_ok=True)
        for t in range(seq.frame_count):
            save_png(path / "frames" / f"cam{k}" / f"f{t}.png", seq.frames[t, k])
    with open(path / "keypoints.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "point_id", "x", "y", "z"])
        for t in range(seq.frame_count):
            for j, p in enumerate(seq.keypoints[t]):
                w.writerow([t, j] + [repr(float(v)) for v in p])
    with open(path / "bounds.txt", "w") as fh:
        fh.write(" ".join(repr(float(v)) for v in seq.bounds[0]) + "\n")
        fh.write(" ".join(repr(float(v)) for v in seq.bounds[1]) + "\n")
    with open(path / "meta.txt", "w") as fh:
        fh.write(f"format_version {FORMAT_VERSION}\nframe_count {seq.frame_count}\nseed {seq.seed}\n")
        fh.write("keypoint_owner " + " ".join(str(int(o)) for o in seq.keypoint_owner) + "\n")
    return path


def _read_floats(file: Path, line_no: int, line: str, expected: int) -> list[float]:
    parts = line.split()
    if len(parts) != expected:
        raise DatasetError(f"{file.name}: line {line_no} has {len(parts)} values, expected {expected}")
    try:
        return [float(x) for x in parts]
    except ValueError as exc:
        raise DatasetError(f"{file.name}: line {line_no}: {exc}") from None


def load_dataset(path) -> SceneSequence:
    path = Path(path)
    meta_file = path / "meta.txt"
    if not meta_file.exists():
        raise DatasetError(f"meta.txt missing in {path}")
    meta = {}
    for line in meta_file.read_text().splitlines():
        if line.strip():
            key, _, val = line.partition(" ")
            meta[key] = val.strip()
    for key in ("format_version", "frame_count", "seed"):
        if key not in meta:
            raise DatasetError(f"meta.txt: missing field {key}")
    if int(meta["format_version"]) != FORMAT_VERSION:
        raise DatasetError(f"meta.txt: format_version {meta['format_version']} != {FORMAT_VERSION}")
    frame_count = int(meta["frame_count"])

    cam_file = path / "cameras.txt"
    if not cam_file.exists():
        raise DatasetError("cameras.txt missing")
    cams = []
    for i, line in enumerate(cam_file.read_text().splitlines(), 1):
        if not line.strip():
            continue
        v = _read_floats(cam_file, i, line, 18)
        m = np.asarray(v[6:]).reshape(3, 4)
        try:
            cams.append(Camera(v[0], v[1], v[2], v[3], int(v[4]), int(v[5]), m[:, :3], m[:, 3]))
        except ValueError as exc:
            raise DatasetError(f"cameras.txt: line {i}: {exc}") from None
    if not cams:
        raise DatasetError("cameras.txt: no cameras")

    bounds_file = path / "bounds.txt"
    if not bounds_file.exists():
        raise DatasetError("bounds.txt missing")
    blines = [l for l in bounds_file.read_text().splitlines() if l.strip()]
    if len(blines) != 2:
        raise DatasetError("bounds.txt: expected two lines (min, max)")
    bounds = tuple(tuple(_read_floats(bounds_file, i + 1, l, 3)) for i, l in enumerate(blines))

    kp_file = path / "keypoints.csv"
    if not kp_file.exists():
        raise DatasetError("keypoints.csv missing")
    rows = []
    with open(kp_file, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["frame", "point_id", "x", "y", "z"]:
            raise DatasetError(f"keypoints.csv: bad header {header}")
        for i, row in enumerate(reader, 2):
            if len(row) != 5:
                raise DatasetError(f"keypoints.csv: line {i} has {len(row)} fields")
            rows.append((int(row[0]), int(row[1]), float(row[2]), float(row[3]), float(row[4])))
    num_j = 1 + max((r[1] for r in rows), default=-1)
    keypoints = np.zeros((frame_count, num_j, 3))
    for t, j, x, y, z in rows:
        keypoints[t, j] = (x, y, z)
    owners = np.asarray([int(x) for x in meta.get("keypoint_owner", "").split()], dtype=int)

    frames = None
    for k, cam in enumerate(cams):
        for t in range(frame_count):
            f = path / "frames" / f"cam{k}" / f"f{t}.png"
            if not f.exists():
                raise DatasetError(f"missing frame {f.relative_to(path)}")
            try:
                img = load_png(f)
            except Exception as exc:  # PIL raises several types for broken files
                raise DatasetError(f"{f.relative_to(path)}: unreadable PNG ({exc})") from None
            if frames is None:
                frames = np.zeros((frame_count, len(cams)) + img.shape)
            if img.shape != (cam.height, cam.width, 3):
                raise DatasetError(f"{f.relative_to(path)}: size {img.shape[:2]} != camera {cam.height}x{cam.width}")
            frames[t, k] = img
    return SceneSequence(cams, frames, keypoints, owners, bounds, frame_count, int(meta["seed"]))


def dataset_hash(path) -> str:
    """SHA-256 over relative file names and contents, in sorted order."""
    path = Path(path)
    h = hashlib.sha256()
    for f in sorted(p for p in path.rglob("*") if p.is_file()):
        h.update(str(f.relative_to(path)).encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def save_toy(toy: ToySequence2D, path) -> Path:
    path = Path(path)
    (path / "frames").mkdir(parents=True, exist_ok=True)
    for t, img in enumerate(toy.frames):
        save_png(path / "frames" / f"f{t}.png", img)
    np.savez(path / "toy.npz", frames=toy.frames, motion=toy.motion, coords=toy.coords,
             pattern=np.asarray(toy.pattern))
    with open(path / "meta.txt", "w") as fh:
        fh.write(f"format_version {FORMAT_VERSION}\nkind toy2d\nframe_count {toy.frame_count}\nseed {toy.seed}\n")
        fh.write(f"resolution {toy.spec.resolution}\n")
        fh.write(f"spec {json.dumps(asdict(toy.spec), sort_keys=True)}\n")
    return path


def load_toy(path) -> ToySequence2D:
    path = Path(path)
    f = path / "toy.npz"
    if not f.exists():
        raise DatasetError(f"toy.npz missing in {path}")
    meta_file = path / "meta.txt"
    if not meta_file.exists():
        raise DatasetError(f"meta.txt missing in {path}")
    meta = dict(l.split(" ", 1) for l in meta_file.read_text().splitlines() if l.strip())
    for key in ("frame_count", "seed", "resolution"):
        if key not in meta:
            raise DatasetError(f"meta.txt: missing field {key!r}")
    if "spec" in meta:
        spec = ToySpec.from_dict(json.loads(meta["spec"]))
    else:
        spec = ToySpec(resolution=int(meta["resolution"]), frame_count=int(meta["frame_count"]))
    with np.load(f) as z:
        return ToySequence2D(z["frames"], z["motion"], [str(x) for x in z["pattern"]], z["coords"], spec,
                             int(meta["seed"]))


def is_toy_dataset(path) -> bool:
    meta = Path(path) / "meta.txt"
    return meta.exists() and "kind toy2d" in meta.read_text()

"""Losses, the windowed joint optimisation, learning-rate schedule and checkpoints.

Each step samples one window of ``history + 1`` consecutive frames. Every
frame in the window is reconstructed directly, ``F(p, t)``, and every frame
whose successor is also in the window is reconstructed through the motion
field, ``F(p + M(p, omega_t), t + dt)``. The predictability term compares
the predictor's output for the window's last transition with the stored
code of that transition.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, DecaySchedule, Tensor
from .nets import FieldBundle, NetConfig, PositionalEncoderSpec, predict_weights, spacetime_query, motion_query
from .render import RayBatch, bilinear, generate_rays, psnr, render_rays, render_rays_with_motion, sample_points
from .scenes import SceneSequence, ToySequence2D

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"PREF"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    gamma: float = 0.01
    rays_per_batch: int = 1024
    history: int = 3
    num_basis: int = 5
    embed_dim: int = 32
    lr_start: float = 5e-4
    lr_end: float = 5e-6
    decay_span: int = 50_000
    iterations: int = 5000
    samples_per_ray: int = 64
    interval_length: int = 25
    interval_start: int = 0
    field_width: int = 128
    field_depth: int = 6
    field_skip: int | None = 4
    motion_width: int = 128
    motion_depth: int = 6
    motion_skip: int | None = 4
    predictor_width: int = 128
    predictor_layers: int = 5
    pos_frequencies: int = 10
    time_frequencies: int = 6
    motion_frequencies: int | None = None
    motion_out_scale: float = 0.1
    seed: int = 0
    deterministic: bool = True
    strict: bool = False
    pred_grad_mode: str = "joint"
    freeze_predictor: bool = False
    embedding: str = "basis"
    stratified: bool = True
    subpixel: bool = True
    log_every: int = 100
    checkpoint_every: int = 0
    eval_rays: int = 512

    def validate(self) -> None:
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.history < 1:
            raise ValueError("history must be >= 1")
        if self.interval_length <= self.history + 1:
            raise ValueError(f"interval_length {self.interval_length} must exceed history + 1 = {self.history + 1}")
        if self.pred_grad_mode not in ("joint", "predictor_only"):
            raise ValueError(f"pred_grad_mode must be 'joint' or 'predictor_only', got {self.pred_grad_mode!r}")
        if self.embedding not in ("basis", "per_frame"):
            raise ValueError(f"embedding must be 'basis' or 'per_frame', got {self.embedding!r}")
        if self.rays_per_batch < self.history + 1:
            raise ValueError("rays_per_batch must cover every frame of the window")
        if self.samples_per_ray < 2:
            raise ValueError("samples_per_ray must be >= 2")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        DecaySchedule(self.lr_start, self.lr_end, self.decay_span)

    def schedule(self) -> DecaySchedule:
        return DecaySchedule(self.lr_start, self.lr_end, self.decay_span)

    def net_config(self, spatial_dim: int, bounds) -> NetConfig:
        return NetConfig(
            spatial_dim=spatial_dim,
            field_width=self.field_width, field_depth=self.field_depth, field_skip=self.field_skip,
            motion_width=self.motion_width, motion_depth=self.motion_depth, motion_skip=self.motion_skip,
            predictor_width=self.predictor_width, predictor_layers=self.predictor_layers,
            num_basis=self.num_basis, embed_dim=self.embed_dim, history=self.history,
            num_transitions=self.interval_length - 1, embedding=self.embedding,
            encoder=PositionalEncoderSpec(self.pos_frequencies, self.time_frequencies, True, self.motion_frequencies),
            motion_out_scale=self.motion_out_scale,
            bounds_min=tuple(float(x) for x in bounds[0]), bounds_max=tuple(float(x) for x in bounds[1]),
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


# --- losses -----------------------------------------------------------------------------


def mse(pred: Tensor, target: np.ndarray) -> Tensor:
    return ad.mean(ad.sqdiff(pred, target.astype(pred.dtype, copy=False)))


def loss_rec(bundle: FieldBundle, rays: RayBatch, depths: np.ndarray, mode: str = "direct",
             transition: int | None = None, weights: Tensor | None = None) -> Tensor:
    """Mean squared color error over rays and channels."""
    if rays.targets is None:
        raise ValueError("loss_rec: rays carry no target colors")
    if mode == "direct":
        rgb, _ = render_rays(bundle, rays, depths)
    elif mode == "motion":
        if transition is None and weights is None:
            raise ValueError("loss_rec: motion mode needs a transition or weight vector")
        rgb, _ = render_rays_with_motion(bundle, rays, depths, transition=transition, weights=weights)
    else:
        raise ValueError(f"loss_rec: unknown mode {mode!r}")
    return mse(rgb, rays.targets)


def loss_pred(bundle: FieldBundle, transition: int, mode: str = "joint") -> Tensor:
    """||P(codes[j - tau : j]) - codes[j]||^2 using the current stored codes as target.

    In ``predictor_only`` mode the codes are constants, so only P is updated
    by this term.
    """
    tau = bundle.cfg.history
    if transition < tau:
        raise ValueError(f"loss_pred: transition {transition} has fewer than {tau} predecessors")
    if transition >= bundle.num_transitions:
        raise ValueError(f"loss_pred: transition {transition} outside interval")
    if mode == "joint":
        codes = bundle.codes
    elif mode == "predictor_only":
        codes = bundle.codes.detach()
    else:
        raise ValueError(f"loss_pred: unknown mode {mode!r}")
    history = [codes[transition - tau + i] for i in range(tau)]
    pred = predict_weights(bundle, history)
    return ad.sum_(ad.sqdiff(pred, codes[transition]))


# --- trainers ---------------------------------------------------------------------------


@dataclass
class StepReport:
    iteration: int
    lr: float
    loss_rec: float
    loss_pred: float
    loss_total: float
    window_start: int


class NumericalAbort(ad.NonFiniteError):
    def __init__(self, msg: str, checkpoint: Path | None = None):
        super().__init__(msg)
        self.checkpoint = checkpoint


class Trainer:
    """Owns a bundle, its optimiser state and the sampling RNG for one interval."""

    kind = "scene"
    spatial_dim = 3

    def __init__(self, data, config: TrainConfig, bundle: FieldBundle | None = None):
        config.validate()
        self.cfg = config
        self.data = data
        self._check_data()
        self.bundle = bundle or FieldBundle(config.net_config(self.spatial_dim, self.bounds), config.seed)
        self.adam = AdamState(learning_rate=config.lr_start)
        self.rng = np.random.default_rng(config.seed + 1)
        self.iteration = 0
        self.trace: list[dict] = []
        self._setup()

    # data-specific hooks ----------------------------------------------------------
    @property
    def bounds(self):
        return self.data.bounds

    def _check_data(self) -> None:
        seq: SceneSequence = self.data
        if self.cfg.interval_start + self.cfg.interval_length > seq.frame_count:
            raise ValueError(f"interval [{self.cfg.interval_start}, +{self.cfg.interval_length}) exceeds "
                             f"{seq.frame_count} frames")

    def _setup(self) -> None:
        seq: SceneSequence = self.data
        n = seq.num_cameras
        self.heldout = [n - 1] if n >= 4 else []
        self.train_cams = [k for k in range(n) if k not in self.heldout]
        self._eval = self._make_eval_rays(self.heldout or self.train_cams, np.random.default_rng(self.cfg.seed + 2))

    def frame_time(self, local_frame: int) -> float:
        return local_frame * self.bundle.frame_step

    def _rays_for(self, local_frame: int, cam_idx: int, count: int, rng, subpixel: bool = False) -> RayBatch:
        seq: SceneSequence = self.data
        cam = seq.cameras[cam_idx]
        image = seq.frames[self.cfg.interval_start + local_frame, cam_idx]
        if subpixel:
            # continuous positions keep F from fitting frames only on the pixel lattice,
            # where a shifted motion term could be satisfied off-lattice for free
            u = rng.uniform(0, cam.width - 1, count)
            v = rng.uniform(0, cam.height - 1, count)
            targets = bilinear(image, u, v)
        else:
            u = rng.integers(0, cam.width, count)
            v = rng.integers(0, cam.height, count)
            targets = image[v, u]
        rays = generate_rays(cam, np.stack([u, v], -1), self.frame_time(local_frame), seq.bounds)
        rays.targets = targets
        return rays

    def _make_eval_rays(self, cams, rng) -> list[RayBatch]:
        out = []
        per = max(1, self.cfg.eval_rays // 4)
        for _ in range(4):
            frame = int(rng.integers(0, self.cfg.interval_length))
            cam = int(cams[int(rng.integers(0, len(cams)))])
            out.append(self._rays_for(frame, cam, per, rng))
        return out

    def frame_terms(self, local_frame: int, count: int, with_motion: bool):
        """Reconstruction MSE terms for one frame of the window."""
        cam = self.train_cams[int(self.rng.integers(0, len(self.train_cams)))]
        rays = self._rays_for(local_frame, cam, count, self.rng, self.cfg.subpixel)
        depths = sample_points(rays, self.cfg.samples_per_ray, self.cfg.stratified, self.rng)
        terms = [loss_rec(self.bundle, rays, depths, "direct")]
        if with_motion:
            terms.append(loss_rec(self.bundle, rays, depths, "motion", transition=local_frame))
        return terms

    def evaluate_psnr(self) -> float:
        preds, targets = [], []
        with ad.no_grad():
            for rays in self._eval:
                depths = sample_points(rays, self.cfg.samples_per_ray, False)
                rgb, _ = render_rays(self.bundle, rays, depths)
                preds.append(rgb.data)
                targets.append(rays.targets)
        return psnr(np.concatenate(preds), np.concatenate(targets))

    # optimisation ------------------------------------------------------------------
    def trainable(self) -> list[Tensor]:
        params = self.bundle.field_parameters() + self.bundle.motion_parameters()
        if self.cfg.gamma > 0 and not self.cfg.freeze_predictor:
            params += self.bundle.predictor_parameters()
        return params

    def step(self) -> StepReport:
        cfg = self.cfg
        tau = cfg.history
        lr = ad.set_learning_rate(self.adam, self.iteration, cfg.schedule())
        start = int(self.rng.integers(0, cfg.interval_length - tau))
        window = list(range(start, start + tau + 1))
        per_frame = cfg.rays_per_batch // len(window)
        terms = []
        for k in window:
            terms += self.frame_terms(k, per_frame, with_motion=k < window[-1])
        l_rec = terms[0]
        for t in terms[1:]:
            l_rec = ad.add(l_rec, t)
        l_rec = ad.scale(l_rec, 1.0 / len(terms))
        total = l_rec
        pred_value = 0.0
        last = window[-1] - 1
        if cfg.gamma > 0 and last >= tau:
            l_pred = loss_pred(self.bundle, last, cfg.pred_grad_mode)
            pred_value = float(l_pred.data)
            total = ad.add(l_rec, ad.scale(l_pred, cfg.gamma))
        rec_value = float(l_rec.data)
        total_value = float(total.data)
        ad.check_finite_loss(total_value, f"loss at iteration {self.iteration}")
        if not np.isfinite(total_value):
            # non-strict mode: drop this update
            for p in self.bundle.parameters():
                p.grad = None
        else:
            ad.backward(total)
            params = self.trainable()
            for p in params:
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
            ad.adam_step(params, self.adam)
            for p in self.bundle.parameters():
                p.grad = None
        report = StepReport(self.iteration, lr, rec_value, pred_value, total_value, start)
        self.iteration += 1
        return report

    def run(self, iterations: int | None = None, out_dir: Path | None = None, callback=None) -> list[dict]:
        """Train until ``iterations`` total steps; returns the metrics trace."""
        target = self.cfg.iterations if iterations is None else iterations
        out_dir = Path(out_dir) if out_dir is not None else None
        while self.iteration < target:
            try:
                report = self.step()
            except ad.NonFiniteError as exc:
                ckpt = None
                if out_dir is not None:
                    ckpt = out_dir / "abort.ckpt"
                    save_checkpoint(self, ckpt)
                raise NumericalAbort(str(exc), ckpt) from exc
            it = self.iteration
            if self.cfg.log_every and (it % self.cfg.log_every == 0 or it == target):
                row = {"iteration": it, "lr": report.lr, "loss_rec": report.loss_rec,
                       "loss_pred": report.loss_pred, "psnr": self.evaluate_psnr()}
                self.trace.append(row)
                logger.info("it %d lr %.2e rec %.5f pred %.5f psnr %.2f", it, row["lr"], row["loss_rec"],
                            row["loss_pred"], row["psnr"])
            if callback is not None:
                callback(self, report)
            if out_dir is not None and self.cfg.checkpoint_every and it % self.cfg.checkpoint_every == 0:
                save_checkpoint(self, out_dir / f"ckpt_{it:07d}.ckpt")
        return self.trace


class ToyTrainer(Trainer):
    """The same optimisation on a 2D image sequence: F(uv, t) -> rgb, M(uv, omega) -> duv."""

    kind = "toy"
    spatial_dim = 2

    @property
    def bounds(self):
        return ((-1.0, -1.0), (1.0, 1.0))

    def _check_data(self) -> None:
        toy: ToySequence2D = self.data
        if self.cfg.interval_start + self.cfg.interval_length > toy.frame_count:
            raise ValueError(f"interval exceeds {toy.frame_count} toy frames")

    def _setup(self) -> None:
        toy: ToySequence2D = self.data
        self._pix = toy.coords.reshape(-1, 2)
        self._flat = toy.frames.reshape(toy.frame_count, -1, 3)
        self._lo, self._hi = float(self._pix.min()), float(self._pix.max())

    def frame_terms(self, local_frame: int, count: int, with_motion: bool):
        frame = self.cfg.interval_start + local_frame
        if self.cfg.subpixel:
            p = self.rng.uniform(self._lo, self._hi, (count, 2))
            target = self.data.sample(frame, p)
        else:
            idx = self.rng.integers(0, len(self._pix), count)
            p = self._pix[idx]
            target = self._flat[frame][idx]
        t = self.frame_time(local_frame)
        terms = [mse(spacetime_query(self.bundle, p, t).color, target)]
        if with_motion:
            pt = ad.as_tensor(p)
            moved = ad.add(pt, motion_query(self.bundle, pt, self.bundle.embedding(local_frame)))
            terms.append(mse(spacetime_query(self.bundle, moved, t + self.bundle.frame_step).color, target))
        return terms

    def evaluate_psnr(self) -> float:
        toy: ToySequence2D = self.data
        with ad.no_grad():
            k = self.cfg.interval_length // 2
            pred = spacetime_query(self.bundle, self._pix, self.frame_time(k)).color.data
        return psnr(pred, self._flat[self.cfg.interval_start + k])

    def estimated_motion(self) -> np.ndarray:
        """(T - 1, H, W, 2) displacement predicted for every pixel and transition."""
        toy: ToySequence2D = self.data
        H, W = toy.coords.shape[:2]
        out = []
        with ad.no_grad():
            for j in range(self.bundle.num_transitions):
                out.append(motion_query(self.bundle, self._pix, self.bundle.embedding(j)).data.reshape(H, W, 2))
        return np.stack(out)


def make_trainer(data, config: TrainConfig, bundle: FieldBundle | None = None) -> Trainer:
    if isinstance(data, ToySequence2D):
        return ToyTrainer(data, config, bundle)
    return Trainer(data, config, bundle)


def train_step(trainer: Trainer) -> StepReport:
    return trainer.step()


def train_loop(data, config: TrainConfig, bundle: FieldBundle | None = None, out_dir=None, callback=None):
    """Train from scratch (or from ``bundle``); returns (trainer, trace)."""
    with ad.strict_mode(config.strict):
        trainer = make_trainer(data, config, bundle)
        trace = trainer.run(out_dir=out_dir, callback=callback)
    return trainer, trace


def write_trace(trace: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["iteration", "lr", "loss_rec", "loss_pred", "psnr"])
        w.writeheader()
        for row in trace:
            w.writerow({k: repr(float(v)) if k != "iteration" else int(v) for k, v in row.items()})


# --- checkpoints -------------------------------------------------------------------------


def _pack_array(name: str, arr: np.ndarray) -> bytes:
    nb = name.encode("utf-8")
    a = np.ascontiguousarray(arr, dtype="<f4")
    head = struct.pack("<I", len(nb)) + nb + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.tobytes()


def save_checkpoint(trainer: Trainer, path) -> Path:
    """Binary layout: magic, u32 version, u32 length + metadata text, then named float32 arrays."""
    path = Path(path)
    meta = {
        "kind": trainer.kind,
        "iteration": trainer.iteration,
        "config": trainer.cfg.to_dict(),
        "bounds": [list(map(float, b)) for b in trainer.bounds],
        "adam": {"step_count": trainer.adam.step_count, "beta1": trainer.adam.beta1,
                 "beta2": trainer.adam.beta2, "epsilon": trainer.adam.epsilon,
                 "learning_rate": trainer.adam.learning_rate},
        "rng_state": trainer.rng.bit_generator.state,
        "param_count": trainer.bundle.parameter_count(),
    }
    text = "".join(f"{k}={json.dumps(v, sort_keys=True)}\n" for k, v in meta.items()).encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), struct.pack("<I", len(text)), text]
    for name, arr in trainer.bundle.named_arrays().items():
        chunks.append(_pack_array(name, arr))
    for name, arr in sorted(trainer.adam.first_moment.items()):
        chunks.append(_pack_array(f"adam.m/{name}", arr))
    for name, arr in sorted(trainer.adam.second_moment.items()):
        chunks.append(_pack_array(f"adam.v/{name}", arr))
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)
    return path


@dataclass
class Checkpoint:
    version: int
    meta: dict
    arrays: dict

    @property
    def config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.meta["config"])

    def parameter_count(self) -> int:
        return sum(a.size for n, a in self.arrays.items() if not n.startswith("adam."))


def read_checkpoint(path) -> Checkpoint:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path.name}: bad magic bytes {raw[:4]!r}")
    if len(raw) < 12:
        raise CheckpointError(f"{path.name}: truncated header")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path.name}: format version {version} != {CHECKPOINT_VERSION}")
    (mlen,) = struct.unpack_from("<I", raw, 8)
    pos = 12 + mlen
    if pos > len(raw):
        raise CheckpointError(f"{path.name}: truncated metadata block")
    meta = {}
    for line in raw[12:pos].decode("utf-8").splitlines():
        key, _, val = line.partition("=")
        meta[key] = json.loads(val)
    arrays = {}
    while pos < len(raw):
        try:
            (nlen,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
        except struct.error:
            raise CheckpointError(f"{path.name}: truncated array header at byte {pos}") from None
        count = int(np.prod(dims)) if rank else 1
        end = pos + 4 * count
        if end > len(raw):
            raise CheckpointError(f"{path.name}: array {name!r} truncated")
        arrays[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(dims).astype(np.float32)
        pos = end
    return Checkpoint(version, meta, arrays)


def load_bundle(ckpt: Checkpoint) -> FieldBundle:
    cfg = ckpt.config
    spatial = 2 if ckpt.meta["kind"] == "toy" else 3
    with ad.precision(np.float32):
        bundle = FieldBundle(cfg.net_config(spatial, ckpt.meta["bounds"]), cfg.seed)
    for p in bundle.parameters():
        if p.name not in ckpt.arrays:
            raise CheckpointError(f"checkpoint lacks array {p.name!r}")
        arr = ckpt.arrays[p.name]
        if arr.shape != p.shape:
            raise CheckpointError(f"array {p.name!r} has shape {arr.shape}, expected {p.shape}")
        p.data = arr.copy()
    return bundle


def load_checkpoint(path, data) -> Trainer:
    """Rebuild a trainer (bundle, optimiser, RNG, iteration) to resume on ``data``."""
    ckpt = read_checkpoint(path)
    bundle = load_bundle(ckpt)
    trainer = make_trainer(data, ckpt.config, bundle)
    if trainer.kind != ckpt.meta["kind"]:
        raise CheckpointError(f"checkpoint is for {ckpt.meta['kind']} data, got {trainer.kind}")
    trainer.iteration = int(ckpt.meta["iteration"])
    a = ckpt.meta["adam"]
    trainer.adam = AdamState(learning_rate=a["learning_rate"], beta1=a["beta1"], beta2=a["beta2"],
                             epsilon=a["epsilon"], step_count=a["step_count"])
    names = {p.name: p for p in bundle.parameters()}
    for key, arr in ckpt.arrays.items():
        if key.startswith("adam."):
            kind, name = key[5], key.split("/", 1)[1]
            if name not in names or names[name].shape != arr.shape:
                raise CheckpointError(f"optimiser array {key!r} does not match parameter shapes")
            (trainer.adam.first_moment if kind == "m" else trainer.adam.second_moment)[name] = arr.copy()
    trainer.rng.bit_generator.state = ckpt.meta["rng_state"]
    return trainer

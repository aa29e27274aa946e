"""Coordinate networks and motion embeddings.

A :class:`FieldBundle` holds the three jointly trained networks (space-time
field, motion field, predictor) together with the shared motion basis and the
per-transition combination weights. Motion embeddings are ``w @ basis``; in
the per-frame ablation the bundle instead stores one free embedding per
transition and the predictor works on those directly.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PositionalEncoderSpec:
    num_frequencies_position: int = 10
    num_frequencies_time: int = 6
    include_input: bool = True
    # bands for the motion field's position input; None shares the field's count
    num_frequencies_motion: int | None = None

    @property
    def motion_frequencies(self) -> int:
        m = self.num_frequencies_motion
        return self.num_frequencies_position if m is None else m

    def dim(self, input_dim: int, num_frequencies: int) -> int:
        return input_dim * (int(self.include_input) + 2 * num_frequencies)


def positional_encode(x, num_frequencies: int, include_input: bool = True) -> Tensor:
    """[x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(L-1) pi x), cos(2^(L-1) pi x)].

    Works on the last axis; the output groups all coordinates per band.
    """
    x = ad.as_tensor(x)
    if not np.all(np.isfinite(x.data)):
        raise ValueError("positional_encode: non-finite input")
    parts = [x] if include_input else []
    for k in range(num_frequencies):
        scaled = ad.scale(x, (2.0 ** k) * math.pi)
        parts.append(ad.sin(scaled))
        parts.append(ad.cos(scaled))
    if not parts:
        raise ValueError("positional_encode: empty encoding")
    return ad.concat(parts, axis=-1) if len(parts) > 1 else parts[0]


@dataclass(frozen=True)
class MlpSpec:
    in_dim: int
    widths: tuple
    out_dim: int
    skip: int | None = None

    def __post_init__(self):
        if self.skip is not None and not 0 < self.skip < len(self.widths):
            raise ValueError(f"skip index {self.skip} must lie strictly inside {len(self.widths)} layers")


class Mlp:
    """ReLU MLP; the input is re-concatenated to the activation feeding layer ``skip``."""

    def __init__(self, spec: MlpSpec, rng: np.random.Generator, prefix: str,
                 out_scale: float = 1.0):
        self.spec = spec
        self.prefix = prefix
        self.layers: list[tuple[Tensor, Tensor]] = []
        dtype = ad.get_default_dtype()
        fan_in = spec.in_dim
        dims = list(spec.widths) + [spec.out_dim]
        for i, width in enumerate(dims):
            if spec.skip is not None and i == spec.skip:
                fan_in += spec.in_dim
            last = i == len(dims) - 1
            bound = math.sqrt(6.0 / fan_in) if not last else math.sqrt(3.0 / fan_in) * out_scale
            W = rng.uniform(-bound, bound, size=(fan_in, width)).astype(dtype)
            b = np.zeros(width, dtype=dtype)
            self.layers.append((Tensor(W, True, f"{prefix}.{i}.W"), Tensor(b, True, f"{prefix}.{i}.b")))
            fan_in = width

    def parameters(self) -> list[Tensor]:
        return [t for layer in self.layers for t in layer]

    def __call__(self, x: Tensor) -> Tensor:
        h = x
        n = len(self.layers)
        for i, (W, b) in enumerate(self.layers):
            if self.spec.skip is not None and i == self.spec.skip:
                h = ad.concat([x, h], axis=-1)
            h = ad.add(ad.matmul(h, W), b)
            if i < n - 1:
                h = ad.relu(h)
        return h

    def zero_output(self) -> None:
        W, b = self.layers[-1]
        W.data[...] = 0
        b.data[...] = 0


@dataclass
class NetConfig:
    """Architecture of one bundle; see ``TrainConfig`` for the training knobs."""

    spatial_dim: int = 3
    field_width: int = 128
    field_depth: int = 6
    field_skip: int | None = 4
    motion_width: int = 128
    motion_depth: int = 6
    motion_skip: int | None = 4
    predictor_width: int = 128
    predictor_layers: int = 5
    num_basis: int = 5
    embed_dim: int = 32
    history: int = 3
    num_transitions: int = 24
    embedding: str = "basis"
    encoder: PositionalEncoderSpec = field(default_factory=PositionalEncoderSpec)
    motion_out_scale: float = 0.1
    # world-space box mapped onto [-1, 1]^d before encoding
    bounds_min: tuple = (-1.0, -1.0, -1.0)
    bounds_max: tuple = (1.0, 1.0, 1.0)

    def validate(self) -> None:
        if self.spatial_dim not in (2, 3):
            raise ValueError("spatial_dim must be 2 or 3")
        if self.embedding not in ("basis", "per_frame"):
            raise ValueError(f"unknown embedding scheme {self.embedding!r}")
        if self.history < 1:
            raise ValueError("history must be >= 1")
        if self.num_transitions < 1:
            raise ValueError("need at least one transition")
        if len(self.bounds_min) != self.spatial_dim or len(self.bounds_max) != self.spatial_dim:
            raise ValueError("bounds must match spatial_dim")
        if self.predictor_layers < 2:
            raise ValueError("predictor needs at least 2 layers")
        for depth, skip in ((self.field_depth, self.field_skip), (self.motion_depth, self.motion_skip)):
            if skip is not None and not 0 < skip < depth:
                raise ValueError(f"skip index {skip} outside layer stack of depth {depth}")

    @property
    def code_dim(self) -> int:
        """Dimension of what the predictor consumes and emits."""
        return self.num_basis if self.embedding == "basis" else self.embed_dim


@dataclass
class SpacetimeSample:
    color: Tensor
    density: Tensor | None


class FieldBundle:
    """All trainable state: networks F, M, P, the basis and per-transition codes."""

    def __init__(self, cfg: NetConfig, seed: int):
        cfg.validate()
        self.cfg = cfg
        self.seed = seed
        rng = np.random.default_rng(seed)
        dtype = ad.get_default_dtype()
        enc = cfg.encoder
        d = cfg.spatial_dim
        pos_dim = enc.dim(d, enc.num_frequencies_position)
        motion_pos_dim = enc.dim(d, enc.motion_frequencies)
        time_dim = enc.dim(1, enc.num_frequencies_time)
        # 3D fields emit density + rgb, the 2D toy field emits rgb only
        f_out = 4 if d == 3 else 3
        self.F = Mlp(MlpSpec(pos_dim + time_dim, (cfg.field_width,) * cfg.field_depth, f_out, cfg.field_skip),
                     rng, "F")
        self.M = Mlp(MlpSpec(motion_pos_dim + cfg.embed_dim, (cfg.motion_width,) * cfg.motion_depth, d, cfg.motion_skip),
                     rng, "M", out_scale=cfg.motion_out_scale)
        k = cfg.code_dim
        self.P = Mlp(MlpSpec(cfg.history * k, (cfg.predictor_width,) * (cfg.predictor_layers - 1), k, None),
                     rng, "P")
        std = 0.1 / math.sqrt(cfg.embed_dim)
        if cfg.embedding == "basis":
            self.basis: Tensor | None = Tensor(rng.normal(0, std, (cfg.num_basis, cfg.embed_dim)).astype(dtype),
                                               True, "basis")
            self.codes = Tensor(rng.normal(0, std, (cfg.num_transitions, cfg.num_basis)).astype(dtype),
                                True, "weights")
        else:
            self.basis = None
            self.codes = Tensor(rng.normal(0, std, (cfg.num_transitions, cfg.embed_dim)).astype(dtype),
                                True, "embeddings")

    # parameter groups ---------------------------------------------------------
    def field_parameters(self) -> list[Tensor]:
        return self.F.parameters()

    def motion_parameters(self) -> list[Tensor]:
        out = self.M.parameters() + [self.codes]
        if self.basis is not None:
            out.append(self.basis)
        return out

    def predictor_parameters(self) -> list[Tensor]:
        return self.P.parameters()

    def parameters(self) -> list[Tensor]:
        return self.field_parameters() + self.motion_parameters() + self.predictor_parameters()

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {p.name: p.data for p in self.parameters()}

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    @property
    def num_transitions(self) -> int:
        return self.cfg.num_transitions

    @property
    def frame_step(self) -> float:
        """Normalised time between adjacent frames."""
        return 1.0 / self.cfg.num_transitions

    def frame_time(self, frame: int) -> float:
        return frame * self.frame_step

    # queries -------------------------------------------------------------------
    def normalize(self, p) -> Tensor:
        lo = np.asarray(self.cfg.bounds_min, dtype=np.float64)
        hi = np.asarray(self.cfg.bounds_max, dtype=np.float64)
        dtype = ad.get_default_dtype()
        center = ((lo + hi) / 2).astype(dtype)
        inv_half = (2.0 / (hi - lo)).astype(dtype)
        return ad.mul(ad.sub(p, center), inv_half)

    def encode_position(self, p, num_frequencies: int | None = None) -> Tensor:
        p = self.normalize(p)
        n = self.cfg.encoder.num_frequencies_position if num_frequencies is None else num_frequencies
        return positional_encode(p, n, self.cfg.encoder.include_input)

    def encode_time(self, t, n: int) -> Tensor:
        tt = np.full((n, 1), t, dtype=ad.get_default_dtype()) if np.ndim(t) == 0 else np.asarray(t).reshape(n, 1)
        return positional_encode(tt, self.cfg.encoder.num_frequencies_time, self.cfg.encoder.include_input)

    def transition_code(self, index: int) -> Tensor:
        """The per-transition code (weights in basis mode, embedding otherwise)."""
        if not 0 <= index < self.num_transitions:
            raise IndexError(f"transition {index} outside [0, {self.num_transitions})")
        return self.codes[index]

    def embedding(self, index: int) -> Tensor:
        code = self.transition_code(index)
        if self.basis is None:
            return code
        return embed_weights(self.basis, code)


def embed_weights(basis: Tensor, w) -> Tensor:
    """omega = sum_i w_i * b_i, i.e. ``w @ basis``."""
    w = ad.as_tensor(w)
    if w.ndim != 1 or w.shape[0] != basis.shape[0]:
        raise ValueError(f"embed_weights: weight length {w.shape} does not match basis {basis.shape}")
    return ad.matmul(w, basis)


def spacetime_query(bundle: FieldBundle, p, t) -> SpacetimeSample:
    """Evaluate F at points ``p`` (N, d) and time ``t`` (scalar or (N,)).

    Density goes through ReLU and color through a sigmoid. Points outside the
    scene box are clamped onto it.
    """
    if bundle is None or not isinstance(bundle, FieldBundle):
        raise ValueError("spacetime_query: bundle is not initialised")
    p = _clamp_to_bounds(bundle, ad.as_tensor(p))
    n = p.shape[0]
    x = ad.concat([bundle.encode_position(p), bundle.encode_time(t, n)], axis=-1)
    raw = bundle.F(x)
    if bundle.cfg.spatial_dim == 2:
        return SpacetimeSample(ad.sigmoid(raw), None)
    return SpacetimeSample(ad.sigmoid(raw[:, 1:4]), ad.relu(raw[:, 0]))


def _clamp_to_bounds(bundle: FieldBundle, p: Tensor) -> Tensor:
    lo = np.asarray(bundle.cfg.bounds_min, dtype=p.dtype)
    hi = np.asarray(bundle.cfg.bounds_max, dtype=p.dtype)
    inside = (p.data >= lo) & (p.data <= hi)
    if inside.all():
        return p
    logger.debug("clamping %d coordinates to the scene box", int((~inside).sum()))
    return ad.custom_op("clamp", lambda a: np.clip(a, lo, hi), lambda g, a: (g * inside,), p)


def motion_query(bundle: FieldBundle, p, omega) -> Tensor:
    """Displacement M(p, omega) for points ``p`` (N, d); omega is shared by all points."""
    p = ad.as_tensor(p)
    omega = ad.as_tensor(omega)
    if omega.ndim != 1 or omega.shape[0] != bundle.cfg.embed_dim:
        raise ValueError(f"motion_query: embedding shape {omega.shape}, expected ({bundle.cfg.embed_dim},)")
    n = p.shape[0]
    om = ad.add(np.zeros((n, bundle.cfg.embed_dim), dtype=p.dtype), omega)
    x = ad.concat([bundle.encode_position(p, bundle.cfg.encoder.motion_frequencies), om], axis=-1)
    return bundle.M(x)


def predict_weights(bundle: FieldBundle, history) -> Tensor:
    """P applied to the concatenation of the previous ``history`` codes."""
    hist = [ad.as_tensor(h) for h in history]
    k = bundle.cfg.code_dim
    if len(hist) != bundle.cfg.history:
        raise ValueError(f"predict_weights: need {bundle.cfg.history} history vectors, got {len(hist)}")
    for h in hist:
        if h.shape != (k,):
            raise ValueError(f"predict_weights: history vector shape {h.shape}, expected ({k},)")
    x = ad.reshape(ad.concat(hist, axis=-1), (1, bundle.cfg.history * k))
    return ad.reshape(bundle.P(x), (k,))


def init_bundle(cfg, seed: int, spatial_dim: int = 3, bounds=((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))) -> FieldBundle:
    """Build a bundle from a ``NetConfig`` or from a training config plus the data's geometry."""
    if hasattr(cfg, "net_config"):
        cfg = cfg.net_config(spatial_dim, bounds)
    return FieldBundle(cfg, seed)


def mlp_parameter_count(in_dim: int, widths, out_dim: int, skip: int | None) -> int:
    """Closed-form parameter count of :class:`Mlp` (used as a cross-check)."""
    total = 0
    prev = in_dim
    for i, width in enumerate(list(widths) + [out_dim]):
        fan = prev + (in_dim if skip is not None and i == skip else 0)
        total += fan * width + width
        prev = width
    return total

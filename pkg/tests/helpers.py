"""Shared fixtures and independent oracles for the test suite."""

from __future__ import annotations

import contextlib

import numpy as np

from predfield import autodiff as ad
from predfield.nets import FieldBundle, NetConfig, PositionalEncoderSpec


def tiny_net_config(spatial_dim: int = 3, embedding: str = "basis", **kw) -> NetConfig:
    base = dict(
        spatial_dim=spatial_dim, field_width=6, field_depth=3, field_skip=1, motion_width=6, motion_depth=3,
        motion_skip=1, predictor_width=6, predictor_layers=3, num_basis=3, embed_dim=4, history=2,
        num_transitions=5, embedding=embedding, encoder=PositionalEncoderSpec(2, 1, True),
        bounds_min=(-1.0,) * spatial_dim, bounds_max=(1.0,) * spatial_dim,
    )
    base.update(kw)
    return NetConfig(**base)


def randomize(bundle: FieldBundle, rng: np.random.Generator, scale: float = 0.6) -> None:
    """Replace every parameter (biases and codes included) with random values."""
    for p in bundle.parameters():
        p.data = rng.normal(0.0, scale, p.shape).astype(p.dtype)


@contextlib.contextmanager
def relu_margin():
    """Record the smallest |input| seen by ReLU while the block runs.

    Central differences are only meaningful away from the kink, so gradient
    checks discard instances whose pre-activations come too close to zero.
    """
    seen = [np.inf]
    original = ad.relu

    def spy(x):
        x = ad.as_tensor(x)
        if x.size:
            seen[0] = min(seen[0], float(np.abs(x.data).min()))
        return original(x)

    ad.relu = spy
    try:
        yield seen
    finally:
        ad.relu = original


def mmpjpe_bruteforce(est: dict, gt: np.ndarray, K: int) -> float:
    """Double loop over start frames and horizons with explicit per-joint norms."""
    n, J = gt.shape[0], gt.shape[1]
    starts = []
    for u in range(n):
        if u + K > n - 1:
            continue
        horizon = []
        for v in range(u + 1, u + K + 1):
            total = 0.0
            for j in range(J):
                total += float(np.sqrt(sum((est[u][v - u][j][c] - gt[v][j][c]) ** 2 for c in range(gt.shape[2]))))
            horizon.append(total / J)
        starts.append(sum(horizon) / len(horizon))
    return sum(starts) / len(starts)


def homogeneous_color(c0, sigma0: float, length: float):
    """Closed-form color of a constant medium seen over a segment of ``length``."""
    return np.asarray(c0) * (1.0 - np.exp(-sigma0 * length))


def _shape(rng, ndim_max=2, size_max=4):
    return tuple(int(d) for d in rng.integers(1, size_max + 1, int(rng.integers(1, ndim_max + 1))))


def _param(rng, shape, name, low=None, high=None, away_from_zero=0.0):
    if low is not None:
        x = rng.uniform(low, high, shape)
    else:
        x = rng.normal(0.0, 1.0, shape)
    if away_from_zero:
        x = np.where(np.abs(x) < away_from_zero, np.sign(x + 1e-12) * away_from_zero, x)
    return ad.Tensor(x, True, name, dtype=np.float64)


def primitive_instance(kind: str, rng: np.random.Generator):
    """A random scalar test function exercising one primitive, and its parameters.

    The primitive output is contracted with fixed random weights so every
    output entry contributes to the checked gradient.
    """
    if kind in ("add", "sub", "mul", "div", "sqdiff"):
        shape = _shape(rng)
        a = _param(rng, shape, "a")
        # the second operand is broadcast over the leading axis half of the time
        bshape = shape[1:] if len(shape) > 1 and rng.random() < 0.5 else shape
        b = _param(rng, bshape, "b", away_from_zero=0.3) if kind == "div" else _param(rng, bshape, "b")
        inputs, params = (a, b), [a, b]
    elif kind == "log":
        a = _param(rng, _shape(rng), "a", 0.2, 3.0)
        inputs, params = (a,), [a]
    elif kind == "relu":
        a = _param(rng, _shape(rng), "a", away_from_zero=0.05)
        inputs, params = (a,), [a]
    elif kind in ("neg", "exp", "sin", "cos", "sigmoid", "cumsum_exclusive"):
        shape = _shape(rng) if kind != "cumsum_exclusive" else (int(rng.integers(1, 4)), int(rng.integers(1, 6)))
        a = _param(rng, shape, "a")
        inputs, params = (a,), [a]
    elif kind == "matmul":
        n, k, m = (int(v) for v in rng.integers(1, 5, 3))
        a = _param(rng, (n, k) if rng.random() < 0.7 else (k,), "a")
        b = _param(rng, (k, m), "b")
        inputs, params = (a, b), [a, b]
    elif kind == "concat":
        rows = int(rng.integers(1, 4))
        parts = [_param(rng, (rows, int(rng.integers(1, 4))), f"x{i}") for i in range(int(rng.integers(2, 4)))]
        out = ad.PRIMITIVES["concat"]
        w = rng.normal(size=(rows, sum(p.shape[1] for p in parts)))
        return (lambda: ad.sum_(ad.mul(out(*parts, axis=-1), w))), parts
    elif kind == "slice":
        a = _param(rng, (int(rng.integers(2, 6)), int(rng.integers(1, 4))), "a")
        idx = [int(rng.integers(0, a.shape[0])), slice(0, int(rng.integers(1, a.shape[0] + 1)))][int(rng.integers(0, 2))]
        inputs, params = (a, idx), [a]
    elif kind in ("sum", "mean"):
        a = _param(rng, _shape(rng), "a")
        axis = None if a.ndim == 1 or rng.random() < 0.5 else int(rng.integers(0, a.ndim))
        op = ad.PRIMITIVES[kind]
        probe = op(a.detach(), axis=axis)
        w = rng.normal(size=probe.shape)
        return (lambda: ad.sum_(ad.mul(op(a, axis=axis), w))), [a]
    elif kind == "expand_last":
        a = _param(rng, _shape(rng), "a")
        inputs, params = (a, int(rng.integers(1, 4))), [a]
    elif kind == "reshape":
        a = _param(rng, (2, 3), "a")
        inputs, params = (a, (3, 2)), [a]
    else:
        raise KeyError(kind)
    op = ad.PRIMITIVES[kind]
    probe = op(*[x.detach() if isinstance(x, ad.Tensor) else x for x in inputs])
    w = rng.normal(size=probe.shape)
    return (lambda: ad.sum_(ad.mul(op(*inputs), w))), params


PRIMITIVE_KINDS = tuple(sorted(ad.PRIMITIVES))

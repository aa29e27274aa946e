"""Tracking through the motion field, mMPJPE_K, rollouts, toy error and ablation runs."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .nets import FieldBundle, embed_weights, motion_query, predict_weights
from .scenes import ToySequence2D

logger = logging.getLogger(__name__)


@dataclass
class Trajectory:
    point_id: int
    positions: np.ndarray  # (frames, d)
    origin: int


def track_points(bundle: FieldBundle, seeds: np.ndarray, u: int, v: int) -> np.ndarray:
    """Chain adjacent-frame displacements from frame ``u`` to ``v`` (interval-local indices).

    Returns positions of shape (v - u + 1, J, d); row 0 is ``seeds`` unchanged.
    """
    if not 0 <= u <= v <= bundle.num_transitions:
        raise ValueError(f"track_points: need 0 <= u <= v <= {bundle.num_transitions}, got u={u}, v={v}")
    seeds = np.asarray(seeds, dtype=np.float64)
    out = [seeds.copy()]
    cur = seeds.astype(ad.get_default_dtype())
    with ad.no_grad():
        for j in range(u, v):
            cur = cur + motion_query(bundle, cur, bundle.embedding(j)).data
            out.append(cur.astype(np.float64))
    return np.stack(out)


def as_trajectories(positions: np.ndarray, origin: int) -> list[Trajectory]:
    return [Trajectory(j, positions[:, j], origin) for j in range(positions.shape[1])]


def track_all_starts(bundle: FieldBundle, gt: np.ndarray, K: int) -> dict[int, np.ndarray]:
    """Tracks seeded from the GT positions at every start frame, each K frames long (clipped at the end)."""
    n = len(gt)
    return {u: track_points(bundle, gt[u], u, min(u + K, n - 1)) for u in range(n - 1)}


def mpjpe(est: np.ndarray, gt: np.ndarray) -> float:
    if est.shape != gt.shape:
        raise ValueError(f"mpjpe: joint arrays differ in shape {est.shape} vs {gt.shape}")
    return float(np.linalg.norm(est - gt, axis=-1).mean())


def mmpjpe(estimates: dict[int, np.ndarray], gt: np.ndarray, K: int) -> float:
    """Mean over start frames u and horizons v = u+1..u+K of MPJPE(P_{u->v}, P_v^gt).

    ``estimates[u][k]`` is the estimate for frame ``u + k``. Start frames whose
    window would run past the last frame are left out of the average.
    """
    if K < 1:
        raise ValueError("mmpjpe: K must be >= 1")
    gt = np.asarray(gt, dtype=np.float64)
    if gt.ndim != 3 or gt.shape[1] == 0:
        raise ValueError(f"mmpjpe: ground truth must be (frames, joints>0, d), got {gt.shape}")
    n = len(gt)
    per_start = []
    for u in range(n):
        if u + K > n - 1:
            continue
        if u not in estimates:
            raise ValueError(f"mmpjpe: no estimate for start frame {u}")
        est = np.asarray(estimates[u])
        if len(est) < K + 1:
            raise ValueError(f"mmpjpe: estimate from frame {u} covers {len(est) - 1} steps, need {K}")
        if est.shape[1:] != gt.shape[1:]:
            raise ValueError(f"mmpjpe: joint count mismatch {est.shape[1:]} vs {gt.shape[1:]}")
        per_start.append(np.mean([mpjpe(est[v - u], gt[v]) for v in range(u + 1, u + K + 1)]))
    if not per_start:
        raise ValueError(f"mmpjpe: sequence of {n} frames too short for K={K}")
    return float(np.mean(per_start))


def code_to_embedding(bundle: FieldBundle, code) -> ad.Tensor:
    code = ad.as_tensor(code)
    return code if bundle.basis is None else embed_weights(bundle.basis, code)


@dataclass
class Rollout:
    codes: np.ndarray  # (steps, k)
    positions: np.ndarray | None = None  # (steps + 1, J, d)


def rollout_predict(bundle: FieldBundle, history: np.ndarray, steps: int, seeds: np.ndarray | None = None) -> Rollout:
    """Autoregressive prediction: each predicted code is appended to the history."""
    if steps < 1:
        raise ValueError("rollout_predict: steps must be >= 1")
    hist = [np.asarray(h, dtype=ad.get_default_dtype()) for h in history]
    tau = bundle.cfg.history
    if len(hist) != tau:
        raise ValueError(f"rollout_predict: need {tau} history vectors, got {len(hist)}")
    preds = []
    pos = None
    with ad.no_grad():
        for _ in range(steps):
            nxt = predict_weights(bundle, hist[-tau:]).data
            preds.append(nxt)
            hist.append(nxt)
        if seeds is not None:
            cur = np.asarray(seeds, dtype=ad.get_default_dtype())
            pos = [np.asarray(seeds, dtype=np.float64)]
            for code in preds:
                cur = cur + motion_query(bundle, cur, code_to_embedding(bundle, code)).data
                pos.append(cur.astype(np.float64))
            pos = np.stack(pos)
    return Rollout(np.stack(preds), pos)


def predictor_loss(bundle: FieldBundle) -> float:
    """Mean over eligible transitions of ||P(previous codes) - stored code||^2."""
    tau = bundle.cfg.history
    codes = bundle.codes.data
    vals = []
    with ad.no_grad():
        for j in range(tau, bundle.num_transitions):
            p = predict_weights(bundle, [codes[j - tau + i] for i in range(tau)]).data
            vals.append(float(((p - codes[j]) ** 2).sum()))
    return float(np.mean(vals)) if vals else 0.0


def toy_abs_err(estimated: np.ndarray, toy: ToySequence2D) -> float:
    """Mean absolute per-pixel, per-axis displacement error over all transitions."""
    est = np.asarray(estimated, dtype=np.float64)
    if est.shape != toy.motion.shape:
        raise ValueError(f"toy_abs_err: estimated motion shape {est.shape} != ground truth {toy.motion.shape}")
    return float(np.abs(est - toy.motion).mean())


# --- ablations -----------------------------------------------------------------------


@dataclass
class AblationReport:
    metric: str
    labels: tuple
    seeds: list
    values: dict = field(default_factory=dict)  # label -> list per seed

    def mean(self, label: str) -> float:
        return float(np.mean(self.values[label]))

    def wins(self) -> int:
        """Seeds where the first arm scores strictly lower than the second."""
        a, b = self.labels
        return sum(x < y for x, y in zip(self.values[a], self.values[b]))

    @property
    def verdict(self) -> bool:
        return self.wins() == len(self.seeds)

    def write_csv(self, path) -> None:
        a, b = self.labels
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["seed", f"{self.metric}_{a}", f"{self.metric}_{b}", "first_lower"])
            for s, x, y in zip(self.seeds, self.values[a], self.values[b]):
                w.writerow([s, f"{x:.6g}", f"{y:.6g}", int(x < y)])
            w.writerow(["mean", f"{self.mean(a):.6g}", f"{self.mean(b):.6g}", int(self.verdict)])


def evaluate_metric(trainer, metric: str, K: int = 5) -> float:
    if metric == "toy_abs_err":
        return toy_abs_err(trainer.estimated_motion(), trainer.data)
    if metric == "loss_pred":
        return predictor_loss(trainer.bundle)
    if metric == "mmpjpe":
        seq = trainer.data
        lo = trainer.cfg.interval_start
        gt = seq.keypoints[lo:lo + trainer.cfg.interval_length]
        return mmpjpe(track_all_starts(trainer.bundle, gt, K), gt, K)
    raise ValueError(f"unknown metric {metric!r}")


def compare_ablation(data, arms: dict, seeds: Sequence[int], metric: str, K: int = 5,
                     csv_path=None, on_result: Callable | None = None) -> AblationReport:
    """Train each arm for every seed and evaluate ``metric``.

    ``arms`` maps a label to a ``TrainConfig``; the configs' seeds are
    replaced by each entry of ``seeds``. ``data`` is a dataset or a callable
    ``seed -> dataset``. The verdict asks whether the first arm is lower on
    every seed.
    """
    from dataclasses import replace

    from .train import train_loop

    if len(arms) != 2:
        raise ValueError("compare_ablation: exactly two arms are required")
    labels = tuple(arms)
    report = AblationReport(metric, labels, list(seeds), {k: [] for k in labels})
    for s in seeds:
        d = data(s) if callable(data) else data
        for label in labels:
            cfg = replace(arms[label], seed=s)
            trainer, _ = train_loop(d, cfg)
            val = evaluate_metric(trainer, metric, K)
            report.values[label].append(val)
            logger.info("ablation %s seed %d %s=%.6g", label, s, metric, val)
            if on_result is not None:
                on_result(label, s, val, trainer)
    if csv_path is not None:
        report.write_csv(csv_path)
    return report


# --- exports ---------------------------------------------------------------------------


def write_trajectories_csv(path, positions: np.ndarray, start_frame: int = 0) -> None:
    """frame,point_id,x,y,z with 6 significant digits."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        dims = ["x", "y", "z"][:positions.shape[-1]]
        w.writerow(["frame", "point_id"] + dims)
        for k, frame_pos in enumerate(positions):
            for j, p in enumerate(frame_pos):
                w.writerow([start_frame + k, j] + [f"{float(c):.6g}" for c in p])


def read_points_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Read ``frame,point_id,x,y[,z]`` rows; returns (frames, points)."""
    frames, pts = [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        dims = [c for c in ("x", "y", "z") if c in fields]
        if "frame" not in fields or dims not in (["x", "y"], ["x", "y", "z"]):
            raise ValueError(f"{path}: header must be frame,point_id,x,y[,z], got {fields}")
        for line, row in enumerate(reader, 2):
            try:
                frames.append(int(row["frame"]))
                pts.append([float(row[c]) for c in dims])
            except (TypeError, ValueError):
                raise ValueError(f"{path}: line {line}: cannot parse {row}") from None
    return np.asarray(frames, dtype=int), np.asarray(pts).reshape(-1, len(dims))


def overlay_points(image: np.ndarray, camera, points: np.ndarray, color=(0.0, 1.0, 0.0), radius: int = 1) -> np.ndarray:
    """Draw projected points as small squares on a copy of ``image``."""
    out = np.array(image, dtype=np.float64, copy=True)
    uv = np.round(camera.project(points)).astype(int)
    H, W = out.shape[:2]
    for u, v in uv:
        out[max(v - radius, 0):min(v + radius + 1, H), max(u - radius, 0):min(u + radius + 1, W)] = color
    return out

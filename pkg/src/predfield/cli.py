"""Command-line entry point: ``predfield {gen,train,render,track,predict,eval}``.

Every command writes into one output directory together with a
``manifest.json`` that records the fully resolved configuration. Values
given on the command line override the config file.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import re
import shutil
import sys
import time
from pathlib import Path

import numpy as np
import yaml
from threadpoolctl import threadpool_limits

from . import __version__
from . import autodiff as ad
from .evaluate import (compare_ablation, mmpjpe, predictor_loss, read_points_csv, rollout_predict,
                       toy_abs_err, track_all_starts, track_points, write_trajectories_csv)
from .render import psnr, render_image, save_png
from .scenes import (DatasetError, SceneSpec, ToySpec, default_sphere_spec, is_toy_dataset, load_dataset, load_toy,
                     make_scene, make_toy2d, save_dataset, save_toy)
from .train import (CheckpointError, NumericalAbort, TrainConfig, load_bundle, load_checkpoint, make_trainer,
                    read_checkpoint, save_checkpoint, write_trace)

logger = logging.getLogger("predfield")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERICAL = 3
MANIFEST_VERSION = 1
SCENE_PRESETS = ("sphere_static", "sphere_linear", "sphere_sinusoid")
CONFIG_SECTIONS = {"seed", "deterministic", "scene", "toy", "train", "eval", "render"}
EVAL_KEYS = {"metric", "k"}
RENDER_KEYS = {"samples", "chunk"}


class UsageError(Exception):
    """Bad arguments, config or inputs; reported with exit code 2."""


class _ConfigLoader(yaml.SafeLoader):
    """SafeLoader that also reads exponent floats without a dot (``5e-6``), as YAML 1.2 does."""


_ConfigLoader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^[-+]?(?:[0-9][0-9_]*(?:\.[0-9_]*)?(?:[eE][-+]?[0-9]+)?|\.[0-9_]+(?:[eE][-+]?[0-9]+)?"""
               r"""|[-+]?\.(?:inf|Inf|INF)|\.(?:nan|NaN|NAN))$"""),
    list("-+0123456789."),
)


# --- config -------------------------------------------------------------------------------


def load_config(path) -> dict:
    """Read a YAML (or JSON) config, or the ``config`` block of a run manifest."""
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file {path} not found")
    try:
        if path.suffix == ".json":
            raw = json.loads(path.read_text()) or {}
        else:
            raw = yaml.load(path.read_text(), Loader=_ConfigLoader) or {}
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise UsageError(f"{path}: cannot parse: {exc}") from None
    if not isinstance(raw, dict):
        raise UsageError(f"{path}: top level must be a mapping")
    if "manifest_version" in raw:
        raw = raw.get("config", {})
    unknown = set(raw) - CONFIG_SECTIONS
    if unknown:
        raise UsageError(f"{path}: unknown config keys {sorted(unknown)}; allowed: {sorted(CONFIG_SECTIONS)}")
    for key, allowed in (("eval", EVAL_KEYS), ("render", RENDER_KEYS)):
        extra = set(raw.get(key) or {}) - allowed
        if extra:
            raise UsageError(f"{path}: unknown keys in '{key}': {sorted(extra)}")
    return raw


def resolve_train_config(cfg: dict, args, frame_count: int | None = None) -> TrainConfig:
    section = dict(cfg.get("train") or {})
    if "seed" in cfg and "seed" not in section:
        section["seed"] = cfg["seed"]
    if "deterministic" in cfg and "deterministic" not in section:
        section["deterministic"] = cfg["deterministic"]
    overrides = {
        "seed": args.seed,
        "deterministic": args.deterministic,
        "iterations": getattr(args, "iterations", None),
        "gamma": getattr(args, "gamma", None),
        "pred_grad_mode": getattr(args, "pred_grad_mode", None),
    }
    if getattr(args, "freeze_predictor", False):
        overrides["freeze_predictor"] = True
    if getattr(args, "strict", False):
        overrides["strict"] = True
    section.update({k: v for k, v in overrides.items() if v is not None})
    # short sequences (the toy) default to using every frame
    if frame_count is not None and "interval_length" not in section:
        start = int(section.get("interval_start", 0))
        section["interval_length"] = min(TrainConfig.interval_length, frame_count - start)
    try:
        config = TrainConfig.from_dict(section)
        config.validate()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"train config: {exc}") from None
    return config


# --- run directories and manifests ----------------------------------------------------------


def prepare_out_dir(out, force: bool, inputs=()) -> Path:
    if out is None:
        raise UsageError("--out is required")
    out = Path(out)
    for src in inputs:
        if src is None:
            continue
        src = Path(src).resolve()
        if src == out.resolve() or out.resolve() in src.parents:
            raise UsageError(f"output directory {out} contains input {src}; refusing to overwrite inputs")
    if out.exists() and any(out.iterdir()):
        if not force:
            raise UsageError(f"output directory {out} exists and is not empty (use --force to replace it)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


@dataclasses.dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    artifacts: dict
    argv: list
    tool_version: str = __version__
    started: float = 0.0
    finished: float = 0.0
    inputs: dict = dataclasses.field(default_factory=dict)

    def write(self, out: Path) -> Path:
        d = dataclasses.asdict(self)
        d = {"manifest_version": MANIFEST_VERSION, **d}
        d["started_iso"] = time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(self.started))
        d["wall_seconds"] = round(self.finished - self.started, 3)
        path = out / "manifest.json"
        path.write_text(json.dumps(d, indent=2, sort_keys=True, default=_json_default) + "\n")
        return path


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (tuple, set)):
        return list(obj)
    raise TypeError(f"not JSON serializable: {type(obj)}")


def _finish(args, out: Path, command: str, config: dict, seed: int, artifacts: dict, inputs: dict) -> None:
    manifest = RunManifest(command, config, seed, {k: str(v) for k, v in artifacts.items()},
                           list(sys.argv[1:]), started=args._started, finished=time.time(),
                           inputs={k: str(v) for k, v in inputs.items()})
    manifest.write(out)


# --- data loading ---------------------------------------------------------------------------


def load_data(path):
    path = Path(path)
    if not path.is_dir():
        raise UsageError(f"dataset directory {path} not found")
    try:
        return load_toy(path) if is_toy_dataset(path) else load_dataset(path)
    except DatasetError as exc:
        raise UsageError(f"dataset {path}: {exc}") from None


def _checkpoint(path):
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"checkpoint {path} not found")
    try:
        return read_checkpoint(path)
    except CheckpointError as exc:
        raise UsageError(str(exc)) from None


def _data_for_checkpoint(args, ckpt_path):
    """Dataset from ``--data``, else the one recorded by the training run's manifest."""
    if getattr(args, "data", None):
        return load_data(args.data), Path(args.data)
    manifest = Path(ckpt_path).parent / "manifest.json"
    if manifest.exists():
        recorded = json.loads(manifest.read_text()).get("inputs", {}).get("dataset")
        if recorded:
            return load_data(recorded), Path(recorded)
    raise UsageError("no dataset given (--data) and none recorded next to the checkpoint")


def _interval_frame(ckpt, frame: int) -> int:
    cfg = ckpt.config
    local = frame - cfg.interval_start
    if not 0 <= local < cfg.interval_length:
        raise UsageError(f"frame {frame} outside trained interval [{cfg.interval_start}, "
                         f"{cfg.interval_start + cfg.interval_length - 1}]")
    return local


# --- commands -------------------------------------------------------------------------------


def cmd_gen(args, cfg: dict) -> int:
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    scene_cfg = dict(cfg.get("scene") or {})
    preset = scene_cfg.pop("preset", None)
    kind = args.kind
    if kind is None:
        if "toy" in cfg:
            kind = "toy2d"
        elif "primitives" in scene_cfg:
            kind = "custom"
        else:
            kind = preset or "sphere_linear"
    if kind not in SCENE_PRESETS + ("toy2d", "custom"):
        raise UsageError(f"scene.preset must be one of {list(SCENE_PRESETS)}, got {kind!r}")
    out = prepare_out_dir(args.out, args.force)
    if kind == "toy2d":
        try:
            spec = ToySpec.from_dict(cfg.get("toy") or {})
            toy = make_toy2d(spec, seed)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"toy spec: {exc}") from None
        save_toy(toy, out / "data")
        resolved = {"toy": dataclasses.asdict(spec)}
        info = f"toy2d: {toy.frame_count} frames {spec.resolution}x{spec.resolution}"
    else:
        try:
            if kind == "custom":
                spec = SceneSpec.from_dict(scene_cfg)
            else:
                # preset primitives, with any other scene keys overriding the preset's values
                preset_dict = default_sphere_spec(kind.split("_", 1)[1]).to_dict()
                preset_dict.update(scene_cfg)
                spec = SceneSpec.from_dict(preset_dict)
            seq = make_scene(spec, seed)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"scene spec: {exc}") from None
        save_dataset(seq, out / "data")
        resolved = {"scene": spec.to_dict()}
        info = f"{spec.name}: {seq.num_cameras} cameras x {seq.frame_count} frames, {spec.image_size}x{spec.image_size}"
    resolved["seed"] = seed
    _finish(args, out, "gen", resolved, seed, {"dataset": out / "data"}, {})
    print(f"wrote {out / 'data'} ({info})")
    return EXIT_OK


def cmd_train(args, cfg: dict) -> int:
    data = load_data(args.dataset)
    config = resolve_train_config(cfg, args, data.frame_count if not hasattr(data, "cameras") else None)
    inputs = {"dataset": Path(args.dataset).resolve()}
    init_bundle = None
    if args.init_from:
        ckpt = _checkpoint(args.init_from)
        inputs["init_from"] = Path(args.init_from).resolve()
        init_bundle = load_bundle(ckpt)
    out = prepare_out_dir(args.out, args.force, [args.dataset, args.init_from, args.resume])
    try:
        if args.resume:
            trainer = load_checkpoint(args.resume, data)
            inputs["resume"] = Path(args.resume).resolve()
            trainer.cfg.iterations = config.iterations
            config = trainer.cfg
        else:
            trainer = make_trainer(data, config, None)
            if init_bundle is not None:
                _copy_parameters(init_bundle, trainer.bundle)
    except (ValueError, CheckpointError) as exc:
        raise UsageError(str(exc)) from None
    logger.info("training %s for %d iterations (gamma=%g, %d parameters)", trainer.kind, config.iterations,
                config.gamma, trainer.bundle.parameter_count())
    try:
        with ad.strict_mode(config.strict):
            trace = trainer.run(config.iterations, out_dir=out)
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}; state dumped to {exc.checkpoint}", file=sys.stderr)
        _finish(args, out, "train", {"train": config.to_dict()}, config.seed,
                {"abort_checkpoint": exc.checkpoint}, inputs)
        return EXIT_NUMERICAL
    final = save_checkpoint(trainer, out / "final.ckpt")
    write_trace(trace, out / "metrics.csv")
    _finish(args, out, "train", {"train": config.to_dict(), "seed": config.seed}, config.seed,
            {"checkpoint": final, "metrics": out / "metrics.csv"}, inputs)
    last = trace[-1] if trace else {}
    print(f"wrote {final}" + (f" (psnr {last['psnr']:.2f} dB)" if last else ""))
    return EXIT_OK


def _copy_parameters(src, dst) -> None:
    src_arrays = src.named_arrays()
    for p in dst.parameters():
        if p.name not in src_arrays:
            raise CheckpointError(f"--init-from: checkpoint lacks {p.name!r}")
        if src_arrays[p.name].shape != p.shape:
            raise CheckpointError(f"--init-from: {p.name!r} has shape {src_arrays[p.name].shape}, "
                                  f"configured network needs {p.shape}")
        p.data = src_arrays[p.name].astype(p.dtype).copy()


def cmd_render(args, cfg: dict) -> int:
    ckpt = _checkpoint(args.checkpoint)
    data, data_path = _data_for_checkpoint(args, args.checkpoint)
    local = _interval_frame(ckpt, args.frame)
    out = prepare_out_dir(args.out, args.force, [args.checkpoint, data_path])
    bundle = load_bundle(ckpt)
    samples = args.samples or int((cfg.get("render") or {}).get("samples", ckpt.config.samples_per_ray))
    t = local * bundle.frame_step
    if ckpt.meta["kind"] == "toy":
        from .nets import spacetime_query
        with ad.no_grad():
            img = spacetime_query(bundle, data.coords.reshape(-1, 2), t).color.data.reshape(data.frames.shape[1:])
        gt = data.frames[args.frame]
        name = f"render_f{args.frame}.png"
    else:
        if not 0 <= args.camera < data.num_cameras:
            raise UsageError(f"camera {args.camera} not in dataset (has {data.num_cameras})")
        img = render_image(bundle, data.cameras[args.camera], t, num_samples=samples)
        gt = data.frames[args.frame, args.camera]
        name = f"render_cam{args.camera}_f{args.frame}.png"
    save_png(out / name, img)
    value = psnr(img, gt)
    _finish(args, out, "render", {"render": {"samples": samples}, "frame": args.frame, "camera": args.camera},
            ckpt.config.seed, {"image": out / name}, {"checkpoint": Path(args.checkpoint).resolve()})
    print(f"psnr {value:.4f} dB -> {out / name}")
    return EXIT_OK


def _read_points(path):
    if not Path(path).is_file():
        raise UsageError(f"points file {path} not found")
    try:
        return read_points_csv(path)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _seed_points(args, ckpt, data):
    if args.points:
        frames, pts = _read_points(args.points)
        if len(pts) == 0:
            raise UsageError(f"{args.points}: no points")
        start = int(frames[0]) if args.start is None else args.start
        pts = pts[frames == start]
        if len(pts) == 0:
            raise UsageError(f"{args.points}: no points at frame {start}")
        return start, pts
    if not hasattr(data, "keypoints"):
        raise UsageError("toy datasets have no keypoints; pass --points")
    start = ckpt.config.interval_start if args.start is None else args.start
    if not 0 <= start < data.frame_count:
        raise UsageError(f"frame {start} outside dataset")
    return start, data.keypoints[start]


def cmd_track(args, cfg: dict) -> int:
    ckpt = _checkpoint(args.checkpoint)
    data, data_path = _data_for_checkpoint(args, args.checkpoint)
    start, seeds = _seed_points(args, ckpt, data)
    if seeds.shape[1] != (2 if ckpt.meta["kind"] == "toy" else 3):
        raise UsageError("point dimension does not match the checkpoint")
    last = ckpt.config.interval_start + ckpt.config.interval_length - 1
    end = last if args.end is None else args.end
    u, v = _interval_frame(ckpt, start), _interval_frame(ckpt, end)
    if v < u:
        raise UsageError(f"--end {end} precedes start frame {start}")
    out = prepare_out_dir(args.out, args.force, [args.checkpoint, data_path])
    bundle = load_bundle(ckpt)
    positions = track_points(bundle, seeds, u, v)
    write_trajectories_csv(out / "trajectories.csv", positions, start)
    _finish(args, out, "track", {"start": start, "end": end}, ckpt.config.seed,
            {"trajectories": out / "trajectories.csv"}, {"checkpoint": Path(args.checkpoint).resolve()})
    print(f"tracked {positions.shape[1]} points over frames {start}..{end} -> {out / 'trajectories.csv'}")
    return EXIT_OK


def cmd_predict(args, cfg: dict) -> int:
    ckpt = _checkpoint(args.checkpoint)
    bundle = load_bundle(ckpt)
    tau = bundle.cfg.history
    n = bundle.num_transitions
    # predictions start after transition `from_transition - 1`
    begin = n if args.from_transition is None else args.from_transition
    if not tau <= begin <= n:
        raise UsageError(f"--from-transition must lie in [{tau}, {n}], got {begin}")
    history = bundle.codes.data[begin - tau:begin]
    seeds = None
    data_path = None
    if args.points:
        data_path = Path(args.points)
        frames, seeds = _read_points(args.points)
        if len(seeds) == 0:
            raise UsageError(f"{args.points}: no points")
        if seeds.shape[1] != bundle.cfg.spatial_dim:
            raise UsageError("point dimension does not match the checkpoint")
        seeds = seeds[frames == frames[0]]
    out = prepare_out_dir(args.out, args.force, [args.checkpoint, data_path])
    roll = rollout_predict(bundle, history, args.steps, seeds)
    with open(out / "rollout.csv", "w") as fh:
        fh.write("step,transition," + ",".join(f"c{i}" for i in range(roll.codes.shape[1])) + "\n")
        for s, code in enumerate(roll.codes):
            fh.write(f"{s + 1},{begin + s}," + ",".join(f"{float(c):.6g}" for c in code) + "\n")
    artifacts = {"rollout": out / "rollout.csv"}
    if roll.positions is not None:
        write_trajectories_csv(out / "trajectories.csv", roll.positions, ckpt.config.interval_start + begin)
        artifacts["trajectories"] = out / "trajectories.csv"
    _finish(args, out, "predict", {"steps": args.steps, "from_transition": begin}, ckpt.config.seed, artifacts,
            {"checkpoint": Path(args.checkpoint).resolve()})
    print(f"predicted {args.steps} codes after transition {begin - 1} -> {out / 'rollout.csv'}")
    return EXIT_OK


def cmd_eval(args, cfg: dict) -> int:
    ev = cfg.get("eval") or {}
    metric = args.metric or ev.get("metric", "mmpjpe")
    K = args.k if args.k is not None else int(ev.get("k", 5))
    if metric not in ("mmpjpe", "toy_abs_err", "loss_pred"):
        raise UsageError(f"unknown metric {metric!r}")
    if args.ablate_gamma is not None:
        return _eval_ablation(args, cfg, metric, K)
    if args.checkpoint is None:
        raise UsageError("eval needs a checkpoint (or --ablate-gamma)")
    ckpt = _checkpoint(args.checkpoint)
    data, data_path = _data_for_checkpoint(args, args.checkpoint)
    out = prepare_out_dir(args.out, args.force, [args.checkpoint, data_path])
    bundle = load_bundle(ckpt)
    if metric == "loss_pred":
        value = predictor_loss(bundle)
    elif metric == "toy_abs_err":
        if ckpt.meta["kind"] != "toy":
            raise UsageError("toy_abs_err needs a toy checkpoint")
        trainer = make_trainer(data, ckpt.config, bundle)
        value = toy_abs_err(trainer.estimated_motion(), data)
    else:
        if ckpt.meta["kind"] == "toy":
            raise UsageError("mmpjpe needs a 3D scene checkpoint")
        lo = ckpt.config.interval_start
        gt = data.keypoints[lo:lo + ckpt.config.interval_length]
        if K >= len(gt):
            raise UsageError(f"--k {K} too large for an interval of {len(gt)} frames")
        value = mmpjpe(track_all_starts(bundle, gt, K), gt, K)
    report = {"metric": metric, "value": value, "k": K if metric == "mmpjpe" else None}
    (out / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    _finish(args, out, "eval", {"eval": {"metric": metric, "k": K}}, ckpt.config.seed,
            {"report": out / "report.json"}, {"checkpoint": Path(args.checkpoint).resolve()})
    print(f"{metric} {value:.6g}")
    return EXIT_OK


def _eval_ablation(args, cfg, metric, K) -> int:
    if not args.data:
        raise UsageError("--ablate-gamma needs --data")
    data = load_data(args.data)
    out = prepare_out_dir(args.out, args.force, [args.data])
    config = resolve_train_config(cfg, args, data.frame_count if not hasattr(data, "cameras") else None)
    g_on, g_off = args.ablate_gamma
    arms = {f"gamma={g_on:g}": dataclasses.replace(config, gamma=g_on),
            f"gamma={g_off:g}": dataclasses.replace(config, gamma=g_off)}
    seeds = args.seeds or [0, 1, 2]
    with ad.strict_mode(config.strict):
        report = compare_ablation(data, arms, seeds, metric, K, csv_path=out / "ablation.csv")
    a, b = report.labels
    _finish(args, out, "eval", {"train": config.to_dict(), "eval": {"metric": metric, "k": K},
                                "ablate_gamma": [g_on, g_off], "seeds": seeds},
            config.seed, {"ablation": out / "ablation.csv"}, {"dataset": Path(args.data).resolve()})
    print(f"{metric}: {a} mean {report.mean(a):.6g}, {b} mean {report.mean(b):.6g}; "
          f"{a} lower on {report.wins()}/{len(seeds)} seeds")
    return EXIT_OK


# --- argument parsing ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("global options")
    g.add_argument("--config", help="YAML config file (or a run manifest.json)")
    g.add_argument("--seed", type=int, help="random seed (overrides the config)")
    g.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None,
                   help="single-threaded, reproducible numerics (default on)")
    g.add_argument("--out", help="output directory for this run")
    g.add_argument("--force", action="store_true", help="replace an existing output directory")
    g.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="predfield", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--kind", choices=SCENE_PRESETS + ("toy2d",),
                   help="scene preset; default from the config's scene/toy section, else sphere_linear")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", parents=[common], help="fit fields, motion codes and predictor")
    p.add_argument("dataset")
    p.add_argument("--iterations", type=int)
    p.add_argument("--gamma", type=float, help="weight of the predictability loss")
    p.add_argument("--pred-grad-mode", choices=("joint", "predictor_only"))
    p.add_argument("--freeze-predictor", action="store_true")
    p.add_argument("--init-from", help="initialise all parameters from this checkpoint")
    p.add_argument("--resume", help="continue a run from its checkpoint (optimizer and RNG included)")
    p.add_argument("--strict", action="store_true", help="abort on non-finite losses")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", parents=[common], help="render a trained field")
    p.add_argument("checkpoint")
    p.add_argument("--data", help="dataset (default: the one recorded by the training run)")
    p.add_argument("--camera", type=int, default=0)
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--samples", type=int)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("track", parents=[common], help="track points through the motion field")
    p.add_argument("checkpoint")
    p.add_argument("--data")
    p.add_argument("--points", help="CSV frame,point_id,x,y,z; default: GT keypoints")
    p.add_argument("--start", type=int, help="start frame (default: first frame of --points or interval)")
    p.add_argument("--end", type=int, help="last frame (default: end of the interval)")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("predict", parents=[common], help="roll the predictor forward")
    p.add_argument("checkpoint")
    p.add_argument("--steps", type=int, default=5)
    p.add_argument("--from-transition", type=int,
                   help="index of the first predicted transition (default: just past the interval)")
    p.add_argument("--points", help="optional CSV of points to advect with the predicted motion")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", parents=[common], help="compute a metric or run a gamma ablation")
    p.add_argument("checkpoint", nargs="?")
    p.add_argument("--data")
    p.add_argument("--metric", choices=("mmpjpe", "toy_abs_err", "loss_pred"))
    p.add_argument("--k", type=int)
    p.add_argument("--ablate-gamma", type=float, nargs=2, metavar=("WITH", "WITHOUT"),
                   help="train two arms on --data and compare them")
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--iterations", type=int)
    p.set_defaults(func=cmd_eval)
    return parser


def _thread_cap(deterministic: bool) -> int | None:
    """BLAS thread limit: 1 in deterministic mode, else ``PREF_THREADS`` if set."""
    env = os.environ.get("PREF_THREADS", "").strip()
    try:
        cap = int(env) if env else None
    except ValueError:
        raise UsageError(f"PREF_THREADS must be an integer, got {env!r}") from None
    if cap is not None and cap < 1:
        raise UsageError("PREF_THREADS must be >= 1")
    return 1 if deterministic else cap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args._started = time.time()
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        deterministic = args.deterministic
        if deterministic is None:
            deterministic = bool(cfg.get("deterministic", (cfg.get("train") or {}).get("deterministic", True)))
        args.deterministic = deterministic
        threads = _thread_cap(deterministic)
        with threadpool_limits(limits=threads):
            return args.func(args, cfg)
    except UsageError as exc:
        print(f"predfield {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ad.NonFiniteError as exc:
        print(f"predfield {args.command}: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())

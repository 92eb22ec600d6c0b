"""Command-line interface: ``elastoreg {generate,register,train,infer,eval}``.

Exit codes: 0 success, 2 input error, 3 checkpoint version error,
4 numerical failure. Every command writes ``manifest.json`` next to its
outputs.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import shutil
import sys
import tempfile
import time
from contextlib import contextmanager, nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from . import engine, synthdata
from .geometry import (LandmarkPair, PointSet, read_landmarks, read_pointset, read_vectors,
                       write_landmarks, write_pointset, write_vectors)
from .network import (CheckpointVersionError, init_model, load_checkpoint, save_model)

log = logging.getLogger("elastoreg")

EXIT_OK, EXIT_INPUT, EXIT_VERSION, EXIT_NUMERIC = 0, 2, 3, 4


class InputError(ValueError):
    pass


# --- helpers -------------------------------------------------------------------

def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n",
                    encoding="utf-8")


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, float) and not np.isfinite(x):
        return None
    return x


@contextmanager
def _staging(out_dir: Path):
    """Collect outputs in a scratch directory; move them into place on success."""
    out_dir = Path(out_dir)
    parent = out_dir.parent if out_dir.parent != Path("") else Path(".")
    try:
        parent.mkdir(parents=True, exist_ok=True)
        tmp = Path(tempfile.mkdtemp(prefix=".elastoreg-", dir=parent))
    except OSError as exc:
        raise InputError(f"cannot write to {out_dir}: {exc}") from None
    try:
        yield tmp
        out_dir.mkdir(parents=True, exist_ok=True)
        for item in sorted(tmp.iterdir()):
            dest = out_dir / item.name
            if dest.exists():
                dest.unlink()
            shutil.move(str(item), str(dest))
    finally:
        shutil.rmtree(tmp, ignore_errors=True)


def _write_manifest(stage: Path, out_dir: Path, command: str, config: dict, seed,
                    started: float) -> None:
    paths = sorted(str(Path(out_dir) / p.name) for p in stage.iterdir())
    paths.append(str(Path(out_dir) / "manifest.json"))
    _dump_json(stage / "manifest.json", {
        "command": command,
        "config": config,
        "config_hash": config_hash(config),
        "seed": seed,
        "artifact_paths": paths,
        "wall_time": time.perf_counter() - started,
        "version": __version__,
    })


def _thread_limit():
    raw = os.environ.get("ELASTOREG_THREADS")
    if not raw:
        return nullcontext()
    try:
        n = max(1, int(raw))
    except ValueError:
        raise InputError(f"ELASTOREG_THREADS must be an integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def _train_config(args) -> engine.TrainConfig:
    cfg = engine.TrainConfig.load(args.config) if getattr(args, "config", None) else \
        engine.TrainConfig()
    over = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "w", None) is not None:
        over["weight_w"] = args.w
    for key in ("steps", "epochs", "lr"):
        if getattr(args, key, None) is not None:
            over[key] = getattr(args, key)
    if os.environ.get("ELASTOREG_THREADS"):
        over["workers"] = engine.default_workers()
    d = cfg.to_dict()
    d.update(over)
    cfg = engine.TrainConfig.from_dict(d)
    if getattr(args, "no_pinn", False):
        cfg = cfg.without_physics()
    return cfg


def _read_truth(path, source: PointSet) -> np.ndarray:
    pts, vec = read_vectors(path)
    if pts.shape != source.points.shape:
        raise InputError(f"{path}: {len(pts)} rows but the source has {len(source)} points")
    if not np.allclose(pts, source.points, rtol=0, atol=1e-9):
        raise InputError(f"{path}: truth rows are not aligned with the source points")
    return vec


def _write_outputs(stage: Path, result: engine.RegistrationResult, source: PointSet) -> None:
    write_pointset(stage / "warped.csv", result.warped_points)
    write_vectors(stage / "displacement.csv", source.points, result.displacement_field)
    _dump_json(stage / "metrics.json", _jsonable(result.metrics))


def _loss_record(step: int, lb: engine.LossBreakdown) -> str:
    return json.dumps({"step": step, **_jsonable(lb.to_dict())}, allow_nan=False)


# --- commands ------------------------------------------------------------------

def cmd_generate(args) -> int:
    started = time.perf_counter()
    if args.scenario and args.preset:
        raise InputError("give either a scenario file or --preset, not both")
    if args.scenario:
        scenario = synthdata.Scenario.load(args.scenario)
    elif args.preset:
        scenario = synthdata.preset(args.preset)
    elif getattr(args, "config", None):
        scenario = synthdata.Scenario.load(args.config)
    else:
        raise InputError("generate needs a scenario JSON file or --preset")
    if getattr(args, "seed", None) is not None:
        scenario = synthdata.Scenario.from_dict({**scenario.to_dict(), "seed": args.seed})
    source, target, truth = synthdata.generate(scenario)
    out = Path(args.out)
    with _staging(out) as stage:
        write_pointset(stage / "source.csv", source)
        write_pointset(stage / "target.csv", target)
        write_vectors(stage / "truth.csv", source.points, truth.displacement_field)
        write_landmarks(stage / "landmarks.csv", truth.landmark_pairs)
        _dump_json(stage / "scenario.json", scenario.to_dict())
        _write_manifest(stage, out, "generate", scenario.to_dict(), scenario.seed, started)
    return EXIT_OK


def _load_pair(args) -> tuple[PointSet, PointSet, list[LandmarkPair] | None]:
    source = read_pointset(args.source, subject_id="source")
    target = read_pointset(args.target, subject_id="target")
    landmarks = read_landmarks(args.landmarks) if args.landmarks else None
    return source, target, landmarks


def cmd_register(args) -> int:
    started = time.perf_counter()
    cfg = _train_config(args)
    source, target, landmarks = _load_pair(args)
    truth = _read_truth(args.truth, source) if args.truth else None
    if cfg.supervised and truth is None:
        raise InputError("a supervised config needs --truth")
    out = Path(args.out)
    with _staging(out) as stage:
        with open(stage / "loss_history.jsonl", "w", encoding="utf-8") as hist:
            def record(step, lb):
                hist.write(_loss_record(step, lb) + "\n")
                if args.verbose and step % 100 == 0:
                    log.info("step %d total %.6g", step, lb.total)

            result = engine.train_single_pair(
                source, target, cfg, ground_truth=truth if cfg.supervised else None,
                landmarks=landmarks, truth=truth, callback=record)
        _write_outputs(stage, result, source)
        if args.save_model:
            save_model(result.model, stage / "model.json")
        _write_manifest(stage, out, "register", cfg.to_dict(), cfg.seed, started)
    return EXIT_OK


def _discover_subjects(root: Path) -> list[tuple[str, engine.Subject]]:
    if not root.is_dir():
        raise InputError(f"{root}: not a directory")
    subjects = []
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        if (sub / "source.csv").exists() and (sub / "target.csv").exists():
            src = read_pointset(sub / "source.csv", subject_id=sub.name)
            tgt = read_pointset(sub / "target.csv", subject_id=sub.name)
            subjects.append((sub.name, engine.Subject(src, tgt)))
    if len(subjects) < 2:
        raise InputError(f"{root}: found {len(subjects)} subject(s); population training "
                         "needs at least 2 subdirectories with source.csv and target.csv")
    return subjects


def _resume_hash(cfg: engine.TrainConfig) -> str:
    """Hash of everything except the epoch budget, which a resume may extend."""
    d = cfg.to_dict()
    d.pop("epochs")
    return config_hash(d)


def cmd_train(args) -> int:
    started = time.perf_counter()
    cfg = _train_config(args)
    named = _discover_subjects(Path(args.population))
    subjects = [s for _, s in named]
    model, opt_state, start_epoch = None, None, 0
    history_prefix: list[str] = []
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        extra = ckpt["extra"]
        if extra.get("resume_hash") not in (None, _resume_hash(cfg)):
            raise InputError("resume checkpoint was trained with a different config")
        model, opt_state = ckpt["model"], ckpt["optimizer"]
        start_epoch = int(extra.get("epochs_done", 0))
        prev = Path(args.resume).with_name("epoch_loss.jsonl")
        if prev.exists():
            history_prefix = prev.read_text(encoding="utf-8").splitlines()[:start_epoch]
    out = Path(args.out)
    with _staging(out) as stage:
        with open(stage / "epoch_loss.jsonl", "w", encoding="utf-8") as hist:
            for line in history_prefix:
                hist.write(line + "\n")

            def record(epoch, rec):
                hist.write(json.dumps(_jsonable(rec), allow_nan=False) + "\n")
                if args.verbose:
                    log.info("epoch %d loss %.6g", epoch, rec["loss"])

            res = engine.train_population(subjects, cfg, model=model,
                                          optimizer_state=opt_state,
                                          start_epoch=start_epoch, callback=record)
        save_model(res.model, stage / "model.json", optimizer_state=res.optimizer_state,
                   extra={"epochs_done": res.epochs_done,
                          "config_hash": config_hash(cfg.to_dict()),
                          "resume_hash": _resume_hash(cfg),
                          "subjects": [name for name, _ in named]})
        _write_manifest(stage, out, "train", cfg.to_dict(), cfg.seed, started)
    return EXIT_OK


def cmd_infer(args) -> int:
    started = time.perf_counter()
    cfg = _train_config(args)
    if args.model == "zero":
        model = init_model(cfg.seed, cfg.arch, zero_heads=True)
    else:
        model = load_checkpoint(args.model)["model"]
    cfg = engine.TrainConfig.from_dict({**cfg.to_dict(), "arch": model.arch.to_dict()})
    source, target, landmarks = _load_pair(args)
    truth = _read_truth(args.truth, source) if args.truth else None
    result = engine.register(model, source, target, cfg, landmarks, truth)
    out = Path(args.out)
    with _staging(out) as stage:
        _write_outputs(stage, result, source)
        manifest_cfg = {**cfg.to_dict(), "model": str(args.model)}
        _write_manifest(stage, out, "infer", manifest_cfg, cfg.seed, started)
    return EXIT_OK


def cmd_eval(args) -> int:
    """Metrics for an existing warped cloud, or a side-by-side of metrics files."""
    started = time.perf_counter()
    out = Path(args.out)
    if args.compare:
        table = {}
        for path in args.compare:
            try:
                table[str(path)] = json.loads(Path(path).read_text(encoding="utf-8"))
            except json.JSONDecodeError as exc:
                raise InputError(f"{path}: malformed JSON ({exc})") from None
        with _staging(out) as stage:
            _dump_json(stage / "comparison.json", table)
            _write_manifest(stage, out, "eval", {"compare": list(map(str, args.compare))},
                            None, started)
        return EXIT_OK
    if not (args.source and args.target and args.warped):
        raise InputError("eval needs --source, --target and --warped (or --compare)")
    source, target, landmarks = _load_pair(args)
    warped = read_pointset(args.warped)
    if len(warped) != len(source):
        raise InputError("warped cloud must be row-aligned with the source")
    truth = _read_truth(args.truth, source) if args.truth else None
    warp = None
    if landmarks:
        from .geometry import nearest_neighbors
        disp = warped.points - source.points

        def warp(points):
            idx, _ = nearest_neighbors(points, source.points)
            return points + disp[idx]
    metrics = engine.evaluate(source, warped.points, target, landmarks, warp, truth)
    with _staging(out) as stage:
        _dump_json(stage / "metrics.json", _jsonable(metrics))
        _write_manifest(stage, out, "eval", {"source": str(args.source),
                                             "target": str(args.target),
                                             "warped": str(args.warped)}, None, started)
    return EXIT_OK


# --- parser --------------------------------------------------------------------

def _common(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--seed", type=int, default=d, help="random seed override")
    parser.add_argument("--config", default=d, help="JSON config file")
    parser.add_argument("--out", default=d, help="output directory")
    parser.add_argument("--no-pinn", dest="no_pinn", action="store_true",
                        default=argparse.SUPPRESS if suppress else False,
                        help="zero the three PDE loss weights")
    parser.add_argument("--w", type=float, default=d, help="registration loss weight")
    parser.add_argument("-v", "--verbose", action="store_true",
                        default=argparse.SUPPRESS if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="elastoreg",
                                description="Physics-informed point-set registration.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _common(p, suppress=False)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_)
        _common(sp, suppress=True)
        return sp

    g = add("generate", "write a synthetic source/target pair with ground truth")
    g.add_argument("scenario", nargs="?", help="scenario JSON file")
    g.add_argument("--preset", help="built-in scenario name (S1..S5)")
    g.set_defaults(func=cmd_generate)

    r = add("register", "fit a fresh model to one pair")
    r.add_argument("source")
    r.add_argument("target")
    r.add_argument("--landmarks")
    r.add_argument("--truth", help="ground-truth displacement CSV (x,y,z,dx,dy,dz)")
    r.add_argument("--steps", type=int)
    r.add_argument("--lr", type=float)
    r.add_argument("--save-model", action="store_true")
    r.set_defaults(func=cmd_register)

    t = add("train", "amortised training over a directory of subjects")
    t.add_argument("population", help="directory whose subdirectories hold source/target CSVs")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    i = add("infer", "register a pair with a trained checkpoint (forward pass only)")
    i.add_argument("model", help="checkpoint path, or 'zero' for a zero-initialised model")
    i.add_argument("source")
    i.add_argument("target")
    i.add_argument("--landmarks")
    i.add_argument("--truth")
    i.set_defaults(func=cmd_infer)

    e = add("eval", "metrics for a warped cloud, or compare metrics files")
    e.add_argument("--source")
    e.add_argument("--target")
    e.add_argument("--warped")
    e.add_argument("--landmarks")
    e.add_argument("--truth")
    e.add_argument("--compare", nargs="+", help="metrics.json files to tabulate")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if not args.out:
        print("elastoreg: error: --out is required", file=sys.stderr)
        return EXIT_INPUT
    try:
        with _thread_limit():
            return args.func(args)
    except CheckpointVersionError as exc:
        print(f"elastoreg: version error: {exc}", file=sys.stderr)
        return EXIT_VERSION
    except FloatingPointError as exc:
        print(f"elastoreg: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError, KeyError, json.JSONDecodeError, engine.ContractError) as exc:
        print(f"elastoreg: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())

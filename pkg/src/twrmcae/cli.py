"""``twrmcae`` command line: one subcommand per pipeline stage.

Every command writes a run manifest (``<out>.manifest.json`` for file outputs,
``<dir>/manifest.json`` for directory outputs).  Failures print exactly one
line ``error: <kind>: <message>`` to stderr and exit non-zero.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from importlib import metadata
from pathlib import Path

import numpy as np

from .core import (
    RadarConfig,
    ShapeError,
    config_hash,
    dump_json,
    make_rng,
    png_export,
    tensor_io_read,
    tensor_io_write,
    worker_count,
)

SUBSPACE_SUFFIX = {"target": "ta", "wall": "wa", "noise": "no"}


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def _load_json(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValueError(f"config {path} is not valid JSON: {exc.msg} (line {exc.lineno})") from exc


def _radar_from(cfg: dict) -> RadarConfig:
    if "radar" in cfg:
        return RadarConfig.from_dict(cfg["radar"])
    fields = set(RadarConfig.__dataclass_fields__)
    return RadarConfig.from_dict({k: v for k, v in cfg.items() if k in fields})


class Run:
    """Collects manifest fields while a command executes."""

    def __init__(self, command: str, args, config: dict):
        self.command = command
        self.seed = getattr(args, "seed", None)
        self.config = config
        self.inputs: list[str] = []
        self.outputs: list[str] = []
        self.t0 = time.perf_counter()

    def wrote(self, *paths):
        self.outputs.extend(str(p) for p in paths)

    def read(self, *paths):
        self.inputs.extend(str(p) for p in paths)

    def finish(self, manifest_path: Path, extra: dict | None = None):
        manifest = {
            "command": self.command,
            "config_hash": config_hash(self.config),
            "seed": self.seed,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "tool_version": _version(),
            "threads": worker_count(),
            "started": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
            "duration_s": round(time.perf_counter() - self.t0, 6),
        }
        if extra:
            manifest.update(extra)
        dump_json(manifest, manifest_path)


def _file_manifest(path) -> Path:
    return Path(str(path) + ".manifest.json")


# --------------------------------------------------------------------------- commands


def cmd_simulate(args):
    from .sim import make_scene, synthesize_echo, clean_target

    cfg = _load_json(args.config)
    radar = _radar_from(cfg)
    wall = args.wall if args.wall is not None else cfg.get("wall_amplitude", 10.0)
    snr = args.snr if args.snr is not None else cfg.get("snr_db", math.inf)
    run = Run("simulate", args, {"radar": radar.to_dict(), "wall": wall, "snr": snr, "state": args.state})
    rng = make_rng(args.seed, 0)
    scene = make_scene(args.state, radar, rng, float(wall), float(snr))
    echo = synthesize_echo(scene, radar, rng)
    tensor_io_write(echo, args.out)
    scene_path = Path(str(args.out) + ".scene.json")
    dump_json({"radar": radar.to_dict(), "scene": scene.to_dict()}, scene_path)
    run.wrote(args.out, scene_path)
    if args.clean:
        tensor_io_write(clean_target(scene, radar), args.clean)
        run.wrote(args.clean)
    run.finish(_file_manifest(args.out))


def cmd_dataset(args):
    from .pipeline import DatasetConfig, make_dataset, write_dataset

    cfg = _load_json(args.config)
    if args.states:
        cfg["states"] = [s.strip() for s in args.states.split(",") if s.strip()]
    if args.frames is not None:
        cfg["frames_per_state"] = args.frames
    if args.snr is not None:
        cfg["snr_db"] = args.snr
    cfg["seed"] = args.seed
    dcfg = DatasetConfig.from_dict(cfg)
    run = Run("dataset", args, dcfg.to_dict())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    frames = make_dataset(dcfg)
    written = write_dataset(frames, out)
    dump_json(dcfg.to_dict(), out / "config.json")
    dump_json({f.frame_id: f.report for f in frames}, out / "subspace_reports.json")
    run.wrote(*written, out / "config.json", out / "subspace_reports.json")
    run.finish(out / "manifest.json", {"frames": len(frames)})


def cmd_preprocess(args):
    from .pipeline import process_echo
    from .preprocess import mti, range_profile

    cfg = _load_json(args.config)
    radar = _radar_from(cfg)
    run = Run("preprocess", args, {"radar": radar.to_dict(), "alpha": args.alpha})
    run.read(args.inp)
    echo = tensor_io_read(args.inp)
    images, _ = process_echo(echo, radar)
    outs = {"rtm": args.rtm, "dtm": args.dtm}
    for key, path in outs.items():
        if path:
            tensor_io_write(images[key], path)
            run.wrote(path)
    if args.phi:
        tensor_io_write(mti(range_profile(echo, radar)), args.phi)
        run.wrote(args.phi)
    if args.png_dir:
        d = Path(args.png_dir)
        d.mkdir(parents=True, exist_ok=True)
        for key in ("rtm", "dtm"):
            png_export(images[key], d / f"{key}.png")
            run.wrote(d / f"{key}.png")
    first = next((p for p in (args.rtm, args.dtm, args.phi) if p), None)
    if first is None:
        raise ValueError("nothing to write: give --rtm, --dtm or --phi")
    run.finish(_file_manifest(first))


def cmd_separate(args):
    from .subspace import SeparationParams, svd_separate

    params = SeparationParams(args.alpha, args.max_rank)
    run = Run("separate", args, {"alpha": args.alpha, "max_rank": args.max_rank})
    run.read(args.inp)
    m = tensor_io_read(args.inp)
    if m.ndim != 2:
        raise ShapeError(f"separate needs a 2-D matrix, got shape {m.shape}")
    triple = svd_separate(m, params)
    prefix = args.out_prefix
    for name, suffix in SUBSPACE_SUFFIX.items():
        p = Path(f"{prefix}{suffix}.twrt")
        tensor_io_write(getattr(triple, name), p)
        run.wrote(p)
    rep = Path(f"{prefix}report.json")
    dump_json(triple.report(), rep)
    run.wrote(rep)
    run.finish(Path(f"{prefix}manifest.json"))


def _train_configs(cfg: dict, args):
    from .trainer import ModelConfig, TrainConfig

    tcfg = dict(cfg.get("train", {}))
    if args.epochs is not None:
        tcfg["epochs"] = args.epochs
    tcfg["seed"] = args.seed
    return ModelConfig.from_dict(cfg.get("model", {})), TrainConfig.from_dict(tcfg)


def cmd_train(args):
    from .pipeline import load_images
    from .trainer import TrainData, init_model, save_model, train

    cfg = _load_json(args.config)
    mcfg, tcfg = _train_configs(cfg, args)
    run = Run("train", args, {"model": mcfg.to_dict(), "train": tcfg.__dict__, "kind": args.kind})
    _, _, sub, clean = load_images(args.data, args.kind, "train")
    try:
        _, _, vsub, vclean = load_images(args.data, args.kind, "val")
        val = TrainData(vsub, vclean)
    except ValueError:
        val = None
    run.read(args.data)
    model = init_model(mcfg, seed=args.seed, map_kind=args.kind)
    log = (lambda s: print(s, file=sys.stderr)) if args.verbose else None
    model, hist = train(model, TrainData(sub, clean), tcfg, val, log)
    save_model(model, args.out, created=os.environ.get("SOURCE_DATE_EPOCH"))
    hist_path = Path(str(args.out) + ".history.json")
    dump_json(hist, hist_path)
    run.wrote(args.out, hist_path)
    run.finish(_file_manifest(args.out), {"final_epoch_loss": hist["epoch_loss"][-1]})


def cmd_augment(args):
    from .pipeline import load_images, process_echo, read_labels
    from .trainer import augment, load_model

    model = load_model(args.model)
    kind = args.kind or model.map_kind
    run = Run("augment", args, {"kind": kind, "model": str(args.model)})
    run.read(args.model)
    if args.data:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        rows, _, sub, _ = load_images(args.data, kind)
        enhanced = augment([sub[:, k] for k in range(3)], model, kind)
        for r, img in zip(rows, enhanced):
            p = out / f"{r['frame_id']}.twrt"
            tensor_io_write(img, p)
            run.wrote(p)
        run.read(args.data)
        run.finish(out / "manifest.json", {"frames": len(rows)})
        return
    if not args.frame:
        raise ValueError("give --frame or --data")
    run.read(args.frame)
    x = tensor_io_read(args.frame)
    if np.iscomplexobj(x):
        radar = _radar_from(_load_json(args.config))
        images, _ = process_echo(x, radar)
        sub = images[f"{kind}_sub"]
    elif x.ndim == 4 and x.shape[0] == 3:
        if not args.kind:
            raise ValueError("subspace-image input needs --kind to check against the model")
        sub = x
    else:
        raise ShapeError(f"frame must be a complex echo matrix or a (3, C, H, W) image stack, got {x.shape}")
    tensor_io_write(augment(list(sub), model, kind), args.out)
    run.wrote(args.out)
    run.finish(_file_manifest(args.out))


def cmd_evaluate(args):
    from .evaluation import (
        convergence_epochs,
        image_features,
        knn_classify,
        psnr,
        softmax_probe,
    )
    from .pipeline import load_images

    run = Run("evaluate", args, {"kind": args.kind, "k": args.k, "probe_epochs": args.probe_epochs})
    rows, raw, _, clean = load_images(args.target, args.kind)
    pred_dir = Path(args.pred)
    aug = np.stack([tensor_io_read(pred_dir / f"{r['frame_id']}.twrt") for r in rows])
    run.read(args.target, args.pred)
    frames = []
    for r, a, b, c in zip(rows, raw, aug, clean):
        frames.append(
            {
                "frame_id": r["frame_id"],
                "state": r["state"],
                "split": r["split"],
                "psnr_raw_to_clean": _num(psnr(a, c)),
                "psnr_augmented_to_clean": _num(psnr(b, c)),
                "psnr_augmented_to_raw": _num(psnr(b, a)),
            }
        )
    labels = np.array([r["label"] for r in rows])
    tr = np.array([r["split"] == "train" for r in rows])
    va = ~tr
    held = [f for f in frames if f["split"] == "val"] or frames
    report = {
        "kind": args.kind,
        "frames": frames,
        "aggregate": {
            key: {
                "median": _num(float(np.median([_den(f[key]) for f in held]))),
                "mean": _num(float(np.mean([_den(f[key]) for f in held]))),
            }
            for key in ("psnr_raw_to_clean", "psnr_augmented_to_clean", "psnr_augmented_to_raw")
        },
    }
    if tr.any() and va.any():
        acc = {}
        conv = {}
        for name, imgs in (("raw", raw), ("augmented", aug)):
            pred = knn_classify(imgs[tr], labels[tr], imgs[va], args.k)
            acc[name] = float(np.mean(pred == labels[va]))
            curve = softmax_probe(
                image_features(imgs[tr]), labels[tr], image_features(imgs[va]), labels[va],
                int(labels.max()) + 1, epochs=args.probe_epochs, seed=args.seed,
            )
            conv[name] = {"curve": curve, "convergence_epochs": convergence_epochs(curve)}
        report["knn_accuracy"] = acc
        report["probe"] = conv
    dump_json(report, args.report)
    run.wrote(args.report)
    run.finish(_file_manifest(args.report))


def _num(x: float):
    return "inf" if math.isinf(x) else x


def _den(x):
    return math.inf if x == "inf" else x


def cmd_gradcheck(args):
    from .trainer import grad_check_model, gradcheck_fixture

    run = Run("gradcheck", args, {"profile": args.profile, "layers": args.layers, "eps": args.eps})
    model, xs, target, margins = gradcheck_fixture(args.layers, args.size, seed=args.seed, profile=args.profile)
    rep = grad_check_model(model, xs, target, eps=args.eps, coords_per_group=args.coords, seed=args.seed)
    rep["kink_margins"] = margins
    rep["pass"] = rep["worst"] < args.tol
    dump_json(rep, args.out)
    run.wrote(args.out)
    run.finish(_file_manifest(args.out), {"worst": rep["worst"]})
    print(f"worst relative error {rep['worst']:.3e} ({'pass' if rep['pass'] else 'FAIL'} at {args.tol:g})")
    if not rep["pass"]:
        raise ArithmeticError(f"gradient check failed: worst relative error {rep['worst']:.3e}")


def cmd_report(args):
    from .pipeline import load_images

    ev = _load_json(args.eval)
    if not ev.get("frames"):
        raise ValueError(f"{args.eval} has no frames")
    out = Path(args.out)
    (out / "png").mkdir(parents=True, exist_ok=True)
    run = Run("report", args, {"eval": str(args.eval)})
    run.read(args.eval, args.data, args.pred)
    kind = ev["kind"]
    rows, raw, sub, clean = load_images(args.data, kind)
    index = {r["frame_id"]: i for i, r in enumerate(rows)}
    lines = [f"# Augmentation report ({kind})", "", "| frame | state | split | PSNR raw->clean | PSNR aug->clean | PSNR aug->raw |", "|---|---|---|---|---|---|"]
    for f in ev["frames"]:
        fid = f["frame_id"]
        if fid not in index:
            raise ValueError(f"frame {fid} from the evaluation is not in {args.data}")
        i = index[fid]
        aug = tensor_io_read(Path(args.pred) / f"{fid}.twrt")
        gap = np.ones((3, raw.shape[2], 2))
        strip = np.concatenate([raw[i], gap, sub[i, 0], gap, sub[i, 1], gap, sub[i, 2], gap, aug, gap, clean[i]], axis=2)
        png = out / "png" / f"{fid}.png"
        png_export(strip, png)
        run.wrote(png)
        lines.append(
            f"| {fid} | {f['state']} | {f['split']} | {f['psnr_raw_to_clean']} | {f['psnr_augmented_to_clean']} | {f['psnr_augmented_to_raw']} |"
        )
    lines += ["", "Strips: raw | target | wall | noise | augmented | clean.", ""]
    if "knn_accuracy" in ev:
        lines += ["| features | k-NN accuracy | probe convergence epochs |", "|---|---|---|"]
        for name in ("raw", "augmented"):
            lines.append(f"| {name} | {ev['knn_accuracy'][name]} | {ev['probe'][name]['convergence_epochs']} |")
    md = out / "report.md"
    md.write_text("\n".join(lines) + "\n")
    run.wrote(md)
    run.finish(out / "manifest.json")


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="twrmcae", description="Through-wall radar image augmentation pipeline")
    p.add_argument("--version", action="version", version=_version())
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--config", default=None, help="JSON config file")
        sp.add_argument("--out", required=out_required)
        return sp

    s = common(sub.add_parser("simulate", help="simulate one echo frame"))
    s.add_argument("--state", required=True)
    s.add_argument("--clean", default=None, help="also write the clean target echo")
    s.add_argument("--snr", type=float, default=None, help="SNR in dB (default: noise off)")
    s.add_argument("--wall", type=float, default=None, help="wall amplitude")
    s.set_defaults(fn=cmd_simulate)

    s = common(sub.add_parser("dataset", help="generate a labelled dataset directory"))
    s.add_argument("--states", default=None, help="comma-separated motion states")
    s.add_argument("--frames", type=int, default=None, help="frames per state")
    s.add_argument("--snr", type=float, default=None)
    s.set_defaults(fn=cmd_dataset)

    s = sub.add_parser("preprocess", help="echo frame -> RTM / DTM images")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--config", default=None)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--rtm", default=None)
    s.add_argument("--dtm", default=None)
    s.add_argument("--phi", default=None, help="also write the MTI matrix")
    s.add_argument("--png-dir", default=None)
    s.add_argument("--alpha", type=float, default=1.0)
    s.set_defaults(fn=cmd_preprocess)

    s = sub.add_parser("separate", help="SVD subspace split of a matrix")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--alpha", type=float, default=1.0)
    s.add_argument("--max-rank", type=int, default=None)
    s.add_argument("--out-prefix", required=True)
    s.set_defaults(fn=cmd_separate)

    s = common(sub.add_parser("train", help="train a fusion model on a dataset"))
    s.add_argument("--data", required=True)
    s.add_argument("--kind", choices=("rtm", "dtm"), default="rtm")
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--verbose", action="store_true")
    s.set_defaults(fn=cmd_train)

    s = common(sub.add_parser("augment", help="run a trained model on a frame or a dataset"))
    s.add_argument("--model", required=True)
    s.add_argument("--frame", default=None, help="echo TWRT or (3, C, H, W) subspace image stack")
    s.add_argument("--data", default=None, help="dataset directory (writes one TWRT per frame)")
    s.add_argument("--kind", choices=("rtm", "dtm"), default=None)
    s.set_defaults(fn=cmd_augment)

    s = sub.add_parser("evaluate", help="PSNR and classifier metrics")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--pred", required=True, help="directory of augmented images")
    s.add_argument("--target", required=True, help="dataset directory")
    s.add_argument("--report", required=True)
    s.add_argument("--kind", choices=("rtm", "dtm"), default="rtm")
    s.add_argument("--k", type=int, default=5)
    s.add_argument("--probe-epochs", type=int, default=100)
    s.set_defaults(fn=cmd_evaluate)

    s = common(sub.add_parser("gradcheck", help="finite-difference check of the whole model"))
    s.add_argument("--profile", default="desk64")
    s.add_argument("--layers", type=int, default=2)
    s.add_argument("--size", type=int, default=16)
    s.add_argument("--eps", type=float, default=1e-5)
    s.add_argument("--coords", type=int, default=3)
    s.add_argument("--tol", type=float, default=1e-4)
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("report", help="markdown + PNG summary of an evaluation")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--eval", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--pred", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        from threadpoolctl import threadpool_limits

        # BLAS stays single-threaded so results cannot depend on the worker count
        with threadpool_limits(limits=1):
            args.fn(args)
    except (OSError, ValueError, ArithmeticError, np.linalg.LinAlgError, KeyError) as exc:
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``logocap <subcommand> [options]``.

Exit codes: 0 success, 1 validation failure, 2 missing input, 3 numerical
failure.  Any option can also come from a JSON file given with
``--config``; explicit flags win over the file, which wins over defaults.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path

from .cmp import load_checkpoint, save_checkpoint
from .core import COCO_SKELETON, PoseSet
from .errors import LogocapError, NumericalError
from .io import load_coco_keypoints, load_results, save_results, write_json_atomic
from .losses import LossWeights
from .metrics import LARGE_RANGE, MEDIUM_RANGE, evaluate_ap, mean_oks
from .refine import RefineConfig, refine_poses
from .synth import SceneConfig, read_scene_dir, sample_scene, write_scene_dir
from .train import TrainConfig, evaluate_scenes, initial_poses, map_ordered, train_toy

log = logging.getLogger("logocap")

EXIT_OK, EXIT_INVALID, EXIT_MISSING, EXIT_NUMERICAL = 0, 1, 2, 3


class CliError(Exception):
    def __init__(self, message, code=EXIT_INVALID):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(f"{self.prog}: {message}", EXIT_INVALID)


# -- helpers --------------------------------------------------------------------

def _require(path, what="input") -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError(f"missing {what}: {p}", EXIT_MISSING)
    return p


def _threads(args) -> int:
    env = os.environ.get("LOGOCAP_THREADS")
    if env:
        try:
            return max(int(env), 1)
        except ValueError:
            raise CliError(f"LOGOCAP_THREADS must be an integer, got {env!r}")
    return max(int(args.threads), 1)


def _persons(text):
    lo, _, hi = str(text).partition("-")
    try:
        lo_i = int(lo)
        hi_i = int(hi) if hi else lo_i
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N or LO-HI, got {text!r}")
    return [lo_i, hi_i]


def _effective(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config")}


def _echo_dir(args, directory):
    write_json_atomic(_effective(args), Path(directory) / "config.json")


def _echo_file(args, path):
    p = Path(path)
    write_json_atomic(_effective(args), p.with_name(p.stem + ".config.json"))


def _refine_config(args, k=None) -> RefineConfig:
    k = args.k if k is None else k
    return RefineConfig(k=11 if k is None else k, a=args.a, factor=args.factor, lam=args.top1_lambda, sigma=args.sigma,
                        global_scaled=args.global_scaled, method=args.method)


def _scene_config(args) -> SceneConfig:
    return SceneConfig(seed=args.seed, height=args.height, width=args.width, persons=tuple(args.persons),
                       keypoint_jitter=args.jitter, offset_noise=args.offset_noise,
                       heatmap_noise=args.heatmap_noise, feat_channels=args.feat_channels,
                       feature_mode=args.feature_mode)


def _scenes(path):
    d = _require(path, "scene directory")
    _require(d / "gt.json", "scene ground truth")
    return read_scene_dir(d)


def _resolve_checkpoint(path) -> Path:
    p = _require(path, "checkpoint")
    if (p / "checkpoint" / "manifest.json").exists():
        p = p / "checkpoint"
    _require(p / "manifest.json", "checkpoint manifest")
    return p


def _load_params(args):
    params, manifest = load_checkpoint(_resolve_checkpoint(args.checkpoint))
    checks = (("d", args.d, params.config.d), ("norm", args.norm, params.config.norm),
              ("k", args.k, manifest.get("window", 11)))
    for name, wanted, have in checks:
        if wanted is not None and wanted != have:
            raise CliError(f"checkpoint/config mismatch: {name}={wanted} requested, checkpoint has {have}")
    return params, manifest.get("window", 11)


# -- subcommands ----------------------------------------------------------------

def cmd_synth(args):
    cfg = _scene_config(args)
    out = Path(args.out)
    if out.exists() and (not out.is_dir() or any(out.iterdir())):
        raise CliError(f"output path {out} exists and is not an empty directory")
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    except OSError as exc:
        raise CliError(f"cannot write to {out}: {exc}")
    try:
        scenes = (sample_scene(cfg, args.first + i) for i in range(args.count))
        write_scene_dir(scenes, tmp, cfg, args.dtype)
        _echo_dir(args, tmp)
        if out.exists():
            out.rmdir()
        tmp.rename(out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    print(f"wrote {args.count} scenes to {out}")


def _initial(args, image_id, maps):
    return initial_poses(maps, image_id, args.perturb, args.seed, args.max_n, args.threshold)


def cmd_decode(args):
    scenes = _scenes(args.scenes)
    per_image = [(image_id, _initial(args, image_id, maps)) for image_id, _, maps in scenes]
    save_results(per_image, args.out)
    _echo_file(args, args.out)
    print(f"decoded {len(per_image)} images into {args.out}")


def cmd_refine(args):
    scenes = _scenes(args.scenes)
    params, k = _load_params(args) if not args.baseline else (None, None)
    rc = _refine_config(args, k)

    def run(item):
        image_id, _, maps = item
        base = _initial(args, image_id, maps)
        return image_id, base if params is None else refine_poses(maps, base, params, rc, COCO_SKELETON)

    per_image = map_ordered(run, list(scenes), _threads(args))
    save_results(per_image, args.out)
    _echo_file(args, args.out)
    print(f"{'decoded' if args.baseline else 'refined'} {len(per_image)} images into {args.out}")


def _train_config(args):
    weights = LossWeights(lambda_total=args.lambda_total, top1_lambda=args.top1_lambda,
                          area_exponent=args.area_exponent, clamp_target=not args.raw_target)
    return TrainConfig(seed=args.seed, d=args.d, norm=args.norm, positional=not args.no_positional, lr=args.lr,
                       epochs=args.epochs, max_steps=args.max_steps, perturb=args.perturb,
                       refine=_refine_config(args), weights=weights, max_n=args.max_n, threshold=args.threshold)


def cmd_train_toy(args):
    if args.synth is not None:
        if args.synth < 1:
            raise CliError("--synth needs at least one scene")
        sc = SceneConfig(seed=args.synth_seed)
        scenes = ((s.image_id, s.gts, s.maps) for s in (sample_scene(sc, i) for i in range(args.synth)))
    elif args.scenes:
        scenes = _scenes(args.scenes)
    else:
        raise CliError("train-toy needs --scenes DIR or --synth N")
    cfg = _train_config(args)
    try:
        result = train_toy(scenes, cfg)
    except ValueError as exc:
        raise CliError(str(exc))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.params, out / "checkpoint", {"window": cfg.refine.k})
    (out / "loss.csv").write_text(result.loss_csv())
    summary = {"steps": len(result.log), "initial_loss": result.initial_loss, "final_loss": result.final_loss,
               "reduction": 1.0 - result.final_loss / result.initial_loss if result.initial_loss else 0.0}
    write_json_atomic(summary, out / "summary.json")
    _echo_dir(args, out)
    print(json.dumps(summary, sort_keys=True))


_AREAS = {"all": None, "medium": MEDIUM_RANGE, "large": LARGE_RANGE}


def cmd_eval(args):
    gt = dict(load_coco_keypoints(_require(args.gt, "ground truth")))
    res = load_results(_require(args.results, "results"))
    ids = sorted(gt)
    preds = [res.get(i) for i in ids]
    preds = [p if p is not None else PoseSet.empty() for p in preds]
    gts = [gt[i] for i in ids]
    report = evaluate_ap(preds, gts, COCO_SKELETON, _AREAS[args.area])
    report.extra["mean_oks"] = mean_oks(preds, gts, COCO_SKELETON)
    text = report.to_csv()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
        _echo_file(args, args.out)
    sys.stdout.write(text)


def cmd_bound(args):
    scenes = _scenes(args.scenes)
    params, k = _load_params(args) if args.checkpoint else (None, None)
    cfg = TrainConfig(seed=args.seed, perturb=args.perturb, refine=_refine_config(args, k),
                      max_n=args.max_n, threshold=args.threshold)
    summary, _ = evaluate_scenes(scenes, params, cfg, COCO_SKELETON, _threads(args))
    summary["gap_oks"] = summary["oracle_oks"] - summary["baseline_oks"]
    summary["gap_ap"] = summary["oracle_ap"] - summary["baseline_ap"]
    text = json.dumps(summary, indent=2, sort_keys=True)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_json_atomic(summary, out / "bound.json")
        lines = ["method,mean_oks,ap"]
        for key in ("baseline", "refined", "oracle"):
            if f"{key}_oks" in summary:
                lines.append(f"{key},{summary[key + '_oks']!r},{summary[key + '_ap']!r}")
        (out / "triple.csv").write_text("\n".join(lines) + "\n")
        _echo_dir(args, out)
    print(text)


def cmd_gradcheck(args):
    from .gradcheck import format_table, run_all
    results, seconds = run_all(args.seed)
    print(format_table(results))
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in {seconds:.1f}s")
    return EXIT_INVALID if failed else EXIT_OK


def cmd_plot(args):
    from .plotting import plot_losses, plot_triple, read_loss_csv
    if not args.loss and not args.bound:
        raise CliError("plot needs --loss and/or --bound")
    out = Path(args.out)
    written = []
    if args.loss:
        written.append(plot_losses(read_loss_csv(_require(args.loss, "loss CSV")), out / "loss.svg"))
    if args.bound:
        src = _require(args.bound, "bound report")
        if src.is_dir():
            src = _require(src / "bound.json", "bound report")
        summary = json.loads(src.read_text())
        vals = {k: summary[f"{k}_oks"] for k in ("baseline", "refined", "oracle") if f"{k}_oks" in summary}
        written.append(plot_triple(vals, out / "triple.svg"))
    _echo_dir(args, out)
    for p in written:
        print(f"wrote {p}")


# -- parser ---------------------------------------------------------------------

def _add_decode_opts(p, perturb=0.0):
    p.add_argument("--seed", type=int, default=0, help="seed for pose perturbation")
    p.add_argument("--perturb", type=float, default=perturb, help="uniform keypoint perturbation (px)")
    p.add_argument("--max-n", type=int, default=30)
    p.add_argument("--threshold", type=float, default=0.01)


def _add_refine_opts(p):
    p.add_argument("--k", type=int, default=None, help="local window size (default 11)")
    p.add_argument("--a", type=int, default=97, help="global window size")
    p.add_argument("--factor", type=int, default=4, help="heatmap upsampling factor")
    p.add_argument("--top1-lambda", type=float, default=0.75)
    p.add_argument("--sigma", type=float, default=None, help="reweighing std (default (a-1)/6)")
    p.add_argument("--global-scaled", action="store_true", help="scale global lattice per keypoint type")
    p.add_argument("--method", choices=("direct", "fft"), default="direct")
    p.add_argument("--d", type=int, default=None)
    p.add_argument("--norm", choices=("recal", "plain"), default=None)
    p.add_argument("--threads", type=int, default=1)


def _add_train_opts(p):
    p.add_argument("--lambda-total", type=float, default=0.01)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--no-positional", action="store_true")
    p.add_argument("--area-exponent", type=float, default=1.0)
    p.add_argument("--raw-target", action="store_true", help="regress KAMs on unclamped similarities")


def build_parser():
    parser = _Parser(prog="logocap", description="Pose refinement with learned keypoint attraction maps.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    subs = {}

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON file of option defaults")
        p.set_defaults(func=func)
        subs[name] = p
        return p

    p = add("synth", cmd_synth, "generate a synthetic scene directory")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--first", type=int, default=0, help="index of the first scene")
    p.add_argument("--persons", type=_persons, default=[2, 3], help="N or LO-HI")
    p.add_argument("--height", type=int, default=256)
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--jitter", type=float, default=1.0)
    p.add_argument("--offset-noise", type=float, default=0.0)
    p.add_argument("--heatmap-noise", type=float, default=0.02)
    p.add_argument("--feat-channels", type=int, default=17)
    p.add_argument("--feature-mode", choices=("gaussian-encoding", "random-smooth"), default="gaussian-encoding")
    p.add_argument("--dtype", choices=("f32", "f64"), default="f64")

    p = add("decode", cmd_decode, "center/offset decoding into a results JSON")
    p.add_argument("--scenes", required=True)
    p.add_argument("--out", required=True)
    _add_decode_opts(p)

    p = add("refine", cmd_refine, "refine decoded poses with a checkpoint")
    p.add_argument("--scenes", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--baseline", action="store_true", help="stop after the initial decode")
    _add_decode_opts(p)
    _add_refine_opts(p)

    p = add("train-toy", cmd_train_toy, "train the refinement head on synthetic scenes")
    p.add_argument("--scenes")
    p.add_argument("--synth", type=int, default=None, help="generate N scenes in memory instead")
    p.add_argument("--synth-seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_decode_opts(p, perturb=4.0)
    _add_refine_opts(p)
    _add_train_opts(p)
    p.set_defaults(method="fft", d=16, norm="recal", k=11)

    p = add("eval", cmd_eval, "AP report of a results JSON against ground truth")
    p.add_argument("--results", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--area", choices=tuple(_AREAS), default="all")
    p.add_argument("--out")

    p = add("bound", cmd_bound, "baseline vs oracle (and refined) mean OKS / AP")
    p.add_argument("--scenes", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--out")
    _add_decode_opts(p)
    _add_refine_opts(p)

    p = add("gradcheck", cmd_gradcheck, "finite-difference gradient checks")
    p.add_argument("--seed", type=int, default=0)

    p = add("plot", cmd_plot, "SVG charts of a loss CSV and a bound report")
    p.add_argument("--loss")
    p.add_argument("--bound", help="bound.json or a bound output directory")
    p.add_argument("--out", required=True)
    return parser, subs


def parse_args(argv):
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        path = _require(args.config, "config file")
        try:
            cfg = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise CliError(f"{path}: invalid JSON ({exc})")
        if not isinstance(cfg, dict):
            raise CliError(f"{path}: config must be a JSON object")
        sp = subs[args.command]
        known = {a.dest for a in sp._actions} - {"help", "config"}
        unknown = sorted(set(k.replace("-", "_") for k in cfg) - known)
        if unknown:
            raise CliError(f"{path}: unknown option(s) {', '.join(unknown)}")
        sp.set_defaults(**{k.replace("-", "_"): v for k, v in cfg.items()})
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        code = args.func(args)
        return EXIT_OK if code is None else code
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except FileNotFoundError as exc:
        print(f"error: missing input: {exc.filename or exc}", file=sys.stderr)
        return EXIT_MISSING
    except NumericalError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (LogocapError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: synth, occlude, train, eval, stats.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric error.
"""
import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import evaluation as E
from . import geometry as geo
from . import model as M
from . import occlusion as occ
from . import skeleton as sk
from . import training as T
from .errors import NumericError, SoarError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _bool(text):
    if text.lower() in ("true", "1", "yes"):
        return True
    if text.lower() in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true or false, got '{text}'")


def _ids(text):
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated class ids, got '{text}'") from None


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise SoarError(f"cannot read {path}: {exc}") from exc


# subcommands

def cmd_synth(args):
    ds = sk.synth_dataset(args.classes, args.per_class, args.cameras, args.frames, args.joints, args.seed)
    sk.save_dataset(ds, args.out)
    print(f"wrote {len(ds)} samples ({args.classes} classes x {args.per_class} x {args.cameras} cameras) to {args.out}")


def _to_2d(sample):
    """3D camera-frame samples are projected to the image plane first."""
    if sample.shape[2] == 2:
        return sample
    t, j, _ = sample.shape
    visible = ~sample.mask.reshape(-1)
    flat = np.zeros((t * j, 2))
    flat[visible] = geo.perspective_project(sample.data.reshape(-1, 3)[visible])
    return sk.SkeletonSequence(flat.reshape(t, j, 2), sample.mask, sample.label, sample.camera_id,
                               sample.group_id, sample.subject_id, dict(sample.meta))


def cmd_occlude(args):
    ds = sk.load_dataset(args.inp)
    rng = np.random.default_rng(args.seed)
    accepted = None
    if args.mode == "re3d":
        library = occ.load_library(args.occluders) if args.occluders else occ.default_library()
        cfg = occ.OcclusionConfig(snr_range=(args.snr_min, args.snr_max), seed=args.seed)
        samples, results = occ.occlude_dataset_3d(ds.samples, geo.calibrate_cameras(ds), library, cfg, rng)
        accepted = {s.group_id: r.accepted for r in results for s in r.samples}
    elif args.mode == "re2d":
        library = occ.load_library(args.occluders) if args.occluders else occ.default_library()
        samples = [occ.occlude_realistic_2d(_to_2d(s), library[rng.integers(len(library))], rng)[0]
                   for s in ds]
    elif args.mode == "random":
        samples = [occ.occlude_random(s, args.gamma, rng) for s in ds]
    elif args.mode == "temporal":
        samples = [occ.occlude_temporal(s, args.frames, rng) for s in ds]
    else:
        samples = [occ.occlude_spatial(s, args.joints, rng) for s in ds]
    sk.save_dataset(ds.with_samples(samples), args.out)
    if args.stats:
        with open(args.stats, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "group_id", "camera_id", "label", "snr", "accepted"])
            for i, s in enumerate(samples):
                ok = "" if accepted is None else int(accepted[s.group_id])
                w.writerow([i, s.group_id, s.camera_id, s.label, repr(occ.snr_of(s.mask)), ok])
    mean = np.mean([occ.snr_of(s.mask) for s in samples]) if samples else 0.0
    print(f"occluded {len(samples)} samples ({args.mode}), mean occlusion ratio {mean:.4f}")


def _model_config(path, num_classes):
    raw = dict(_read_json(path)) if path else {"preset": "toy"}
    name = raw.pop("preset", None)
    raw.setdefault("num_classes", num_classes)
    if name is not None:
        return M.preset(name, **raw)
    return M.ModelConfig.from_dict(raw)


def _default_novel(ds):
    classes = sorted({s.label for s in ds})
    return classes[-max(1, len(classes) // 5):]


def cmd_train(args):
    ds = sk.load_dataset(args.data)
    classes = sorted({s.label for s in ds})
    novel = args.novel if args.novel is not None else _default_novel(ds)
    base = [c for c in classes if c not in set(novel)]
    split = sk.make_one_shot_split(ds, base, novel, args.seed)
    tcfg = T.load_json_config(T.TrainConfig, args.train_config)
    mcfg = _model_config(args.config, len(base))
    with ad.precision(np.dtype(tcfg.dtype).type):
        net = M.SkeletonTransformer(mcfg, seed=tcfg.seed)

    def report(epoch, model, bank, data):
        print(f"epoch {epoch + 1}/{tcfg.epochs} {tcfg.phase(epoch)}", flush=True)

    res = T.train(net, split, ds.topology, tcfg, log_path=args.log, checkpoint_dir=args.out,
                  on_epoch_end=report)
    last = res.log[-1]
    print(f"final loss {last['total']:.4f} (tpl {last['L_TPL']:.4f} cls {last['L_CLS']:.4f} "
          f"lsc {last['L_LSC']:.4f}); checkpoint in {args.out}")


def cmd_eval(args):
    ds = sk.load_dataset(args.data)
    net, base = T.load_model(args.checkpoint)
    novel = sorted({s.label for s in ds} - set(base))
    if not novel:
        raise SoarError("dataset has no classes outside the checkpoint's base classes")
    split = sk.make_one_shot_split(ds, [], novel, args.seed)
    if args.sweep:
        grid = _read_json(args.sweep)
        if not isinstance(grid, list):
            raise SoarError("sweep grid must be a JSON list of {\"mode\": ..., params} cells")
        rows = E.occlusion_sweep(net, split, ds.topology, grid, seed=args.seed, occval=args.occval,
                                 calibrations=geo.calibrate_cameras(ds))
    elif args.noise_sigma > 0:
        m = E.gaussian_noise_eval(net, split, ds.topology, args.noise_sigma, seed=args.seed,
                                  noisy_support=args.occval)
        rows = [{"condition": f"noise(sigma={args.noise_sigma})", **m, "n_test": len(split.test)}]
    else:
        m = E.evaluate(net, split.support, split.test, ds.topology).metrics
        rows = [{"condition": "clean", **m, "n_test": len(split.test)}]
    for r in rows:
        print(f"{r['condition']}: acc {r['accuracy']:.4f} f1 {r['f1']:.4f} "
              f"precision {r['precision']:.4f} recall {r['recall']:.4f} (n={r['n_test']})")
    if args.metrics:
        E.write_metrics(rows, args.metrics)


def cmd_stats(args):
    ds = sk.load_dataset(args.data)
    edges = np.linspace(0.0, 1.0, args.bins + 1)
    counts = occ.snr_histogram(ds.samples, edges)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi", "count"])
        for lo, hi, n in zip(edges[:-1], edges[1:], counts):
            w.writerow([repr(float(lo)), repr(float(hi)), int(n)])
    print(f"{len(ds)} samples, histogram of occlusion ratio in {args.bins} bins written to {args.out}")


def build_parser():
    p = Parser(prog="soar", description="One-shot skeleton action recognition under occlusion.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    s = sub.add_parser("synth", help="generate a synthetic multi-view skeleton dataset")
    s.add_argument("--classes", type=int, default=10)
    s.add_argument("--per-class", type=int, default=20)
    s.add_argument("--cameras", type=int, default=3)
    s.add_argument("--frames", type=int, default=32)
    s.add_argument("--joints", type=int, default=12)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("occlude", help="apply an occlusion operator to a dataset")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--mode", required=True, choices=["re3d", "re2d", "random", "temporal", "spatial"])
    s.add_argument("--snr-min", type=float, default=0.05)
    s.add_argument("--snr-max", type=float, default=0.2)
    s.add_argument("--gamma", type=float, default=0.1)
    s.add_argument("--frames", type=int, default=10)
    s.add_argument("--joints", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--occluders", help="directory of text meshes (default: built-in library)")
    s.add_argument("--stats", help="per-sample occlusion ratio CSV")
    s.set_defaults(fn=cmd_occlude)

    s = sub.add_parser("train", help="train on the base classes of a dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--config", help="model JSON (ModelConfig fields, or {\"preset\": name, ...})")
    s.add_argument("--train-config", help="training JSON (TrainConfig fields)")
    s.add_argument("--out", required=True, help="checkpoint directory")
    s.add_argument("--log", help="per-epoch loss CSV")
    s.add_argument("--novel", type=_ids, help="held-out class ids (default: last fifth)")
    s.add_argument("--seed", type=int, default=0, help="split seed")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="one-shot evaluation on classes unseen in training")
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--noise-sigma", type=float, default=0.0)
    s.add_argument("--occval", type=_bool, default=False, help="also corrupt the support set")
    s.add_argument("--sweep", help="grid JSON: list of {\"mode\": ..., params}")
    s.add_argument("--metrics", help="metrics CSV")
    s.add_argument("--seed", type=int, default=0, help="support selection and corruption seed")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("stats", help="histogram of per-sample occlusion ratios")
    s.add_argument("--data", required=True)
    s.add_argument("--bins", type=int, default=20)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_stats)
    return p


def _validate(args):
    for name in ("classes", "per_class", "cameras", "frames", "joints", "bins"):
        if getattr(args, name, 1) is not None and getattr(args, name, 1) < 0:
            raise UsageError(f"--{name.replace('_', '-')} must be non-negative")
    if getattr(args, "bins", 1) == 0:
        raise UsageError("--bins must be positive")
    if getattr(args, "noise_sigma", 0.0) < 0:
        raise UsageError("--noise-sigma must be non-negative")


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        _validate(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    try:
        args.fn(args)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (SoarError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

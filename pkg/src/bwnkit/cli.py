"""Command-line front end: data generation, teacher training, student
distillation under the three regimes, evaluation, export, size reports, and
the gradient-check harness.

Exit codes: 0 success, 2 usage or configuration error, 3 I/O error,
4 numerical failure.  Output directories are append-only: an existing path is
refused unless ``--force`` is given.  Every command is deterministic given
its config and seeds; reruns produce byte-identical artifacts.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .binarize import binarize_filter, ste_backward
from .config import ConfigError, RunConfig, load_config, render_config
from .datasynth import (
    CLASS_NAMES,
    Dataset,
    DatasetFormatError,
    SceneConfig,
    class_histogram,
    generate,
    load_dataset,
    save_dataset,
)
from .detect import decode, dump_detections, nms
from .kttrain import (
    CURRICULUM_MODES,
    KTConfig,
    TrainingDiverged,
    evaluate,
    rows_to_csv,
    run_curriculum,
    train_teacher,
)
from .network import (
    ModelFormatError,
    build_minidark,
    default_schedule,
    forward,
    load_model,
    save_model,
    size_report,
)
from .tensor import Tape, Tensor, batch_norm_train, concat_channels, conv2d, \
    finite_diff_check, leaky_relu, max_pool2, mul, reorg2, sum_all, take_range

GRADCHECK_TOL = 1e-6
GRADCHECK_EPS = 1e-5


def _fail(code: int, message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _prepare_out_dir(path: str, force: bool) -> int | None:
    if os.path.exists(path):
        if not force:
            return _fail(3, f"output path {path} exists (use --force to replace)")
        if not os.path.isdir(path):
            return _fail(3, f"output path {path} exists and is not a directory")
    os.makedirs(path, exist_ok=True)
    return None


def _load_run_config(args) -> RunConfig:
    if getattr(args, "config", None):
        return load_config(args.config)
    return RunConfig()


def _scene_config(cfg: RunConfig, count=None, seed=None) -> SceneConfig:
    d = cfg.data
    return SceneConfig(size=d.image_size, min_objects=d.min_objects,
                       max_objects=d.max_objects, min_size=d.min_size,
                       max_size=d.max_size, noise=d.noise,
                       seed=d.seed if seed is None else seed)


def _kt_config(cfg: RunConfig) -> KTConfig:
    kt_layers = None if cfg.kt.kt_layers == "auto" \
        else tuple(s.strip() for s in cfg.kt.kt_layers.split(",") if s.strip())
    return KTConfig(lambda1=cfg.kt.lambda1, lambda2=cfg.kt.lambda2,
                    lambda3=cfg.kt.lambda3, kt_layers=kt_layers,
                    lr=cfg.train.lr, batch_size=cfg.train.batch_size,
                    epochs=cfg.train.epochs, seed=cfg.train.seed,
                    normalize_l2=cfg.kt.normalize_l2,
                    reset_optimizer_at_stage=cfg.schedule.reset_optimizer,
                    kt_stagewise=cfg.kt.kt_stagewise)


def _echo_config(cfg: RunConfig, out_dir: str) -> None:
    with open(os.path.join(out_dir, "effective_config.ini"), "w") as fh:
        fh.write(render_config(cfg))


def _load_split(data_dir: str) -> tuple[Dataset, Dataset]:
    return (load_dataset(os.path.join(data_dir, "train")),
            load_dataset(os.path.join(data_dir, "val")))


def cmd_gen_data(args) -> int:
    cfg = _load_run_config(args)
    if args.count is not None:
        cfg.data.count = args.count
    if args.seed is not None:
        cfg.data.seed = args.seed
    if cfg.data.count < 1:
        return _fail(2, f"--count must be at least 1, got {cfg.data.count}")
    err = _prepare_out_dir(args.out, args.force)
    if err is not None:
        return err
    scene = _scene_config(cfg)
    full = generate(scene, cfg.data.count + cfg.data.val_count)
    train = Dataset(images=full.images[:cfg.data.count],
                    gts=full.gts[:cfg.data.count])
    val = Dataset(images=full.images[cfg.data.count:],
                  gts=full.gts[cfg.data.count:])
    save_dataset(train, os.path.join(args.out, "train"))
    save_dataset(val, os.path.join(args.out, "val"))
    _echo_config(cfg, args.out)
    hist = [a + b for a, b in zip(class_histogram(train), class_histogram(val))]
    print(f"generated {len(train)} train / {len(val)} val images "
          f"(seed {cfg.data.seed})")
    for name, count in zip(CLASS_NAMES, hist):
        print(f"  {name}: {count}")
    print(f"total objects: {sum(hist)}")
    return 0


def cmd_train_teacher(args) -> int:
    cfg = _load_run_config(args)
    err = _prepare_out_dir(args.out, args.force)
    if err is not None:
        return err
    train, val = _load_split(args.data)
    model = build_minidark(cfg.model.classes, anchors=cfg.model.anchors,
                           seed=cfg.model.seed)
    if model.input_size != cfg.data.image_size:
        return _fail(2, f"model expects {model.input_size}px inputs, config "
                        f"says {cfg.data.image_size}")
    kt_cfg = _kt_config(cfg)
    model, rows = train_teacher(model, train, kt_cfg, val=val)
    save_model(model, os.path.join(args.out, "teacher.bwnm"))
    with open(os.path.join(args.out, "metrics.csv"), "w") as fh:
        fh.write(rows_to_csv(rows))
    _echo_config(cfg, args.out)
    final = rows[-1].val_map if rows else float("nan")
    print(f"teacher trained for {len(rows)} epochs, final val mAP {final:.4f}")
    return 0


def cmd_distill(args) -> int:
    cfg = _load_run_config(args)
    err = _prepare_out_dir(args.out, args.force)
    if err is not None:
        return err
    teacher = load_model(args.teacher)
    if teacher.binarized_layers():
        return _fail(2, f"teacher {args.teacher} has binarized layers "
                        f"({teacher.binarized_layers()}); need full precision")
    train, val = _load_split(args.data)
    schedule = default_schedule(cfg.schedule.m0_epochs, cfg.schedule.m1_epochs,
                                cfg.schedule.m2_epochs)
    kt_cfg = _kt_config(cfg)
    student, rows = run_curriculum(teacher, train, val, schedule, kt_cfg,
                                   mode=args.mode)
    save_model(student, os.path.join(args.out, "student.bwnm"))
    with open(os.path.join(args.out, "metrics.csv"), "w") as fh:
        fh.write(rows_to_csv(rows))
    with open(os.path.join(args.out, "run_metadata.json"), "w") as fh:
        json.dump({"mode": args.mode, "seed": kt_cfg.seed,
                   "binarized_layers": student.binarized_layers()},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    _echo_config(cfg, args.out)
    final = rows[-1].val_map if rows else float("nan")
    print(f"distilled ({args.mode}) for {len(rows)} epochs, "
          f"final val mAP {final:.4f}")
    return 0


def cmd_eval(args) -> int:
    model = load_model(args.model)
    if not os.path.isdir(args.data) or \
            not any(f.endswith(".bwdi") for f in os.listdir(args.data)):
        return _fail(2, f"dataset {args.data} is empty or missing")
    ds = load_dataset(args.data)
    max_class = max((g.class_id for img in ds.gts for g in img), default=-1)
    if max_class >= model.classes:
        return _fail(2, f"dataset has class ids up to {max_class} but the "
                        f"model predicts {model.classes} classes")
    map_value, per_class = evaluate(model, ds)
    rows = []
    for i in range(len(ds)):
        res = forward(model, Tensor(ds.images[i]))
        for det in nms(decode(res.head.data, anchors=model.anchors,
                              classes=model.classes)):
            rows.append((i, det))
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(dump_detections(rows))
    for c, ap in enumerate(per_class):
        name = CLASS_NAMES[c] if c < len(CLASS_NAMES) else f"class{c}"
        print(f"AP[{name}] = {ap:.4f}")
    print(f"mAP = {map_value:.4f}")
    return 0


def cmd_size_report(args) -> int:
    model = load_model(args.model)
    print(size_report(model).render())
    return 0


def cmd_export(args) -> int:
    model = load_model(args.model)
    if os.path.exists(args.out) and not args.force:
        return _fail(3, f"output path {args.out} exists (use --force to replace)")
    save_model(model, args.out)
    rep = size_report(model)
    print(f"exported {rep.expected_file_bytes} bytes "
          f"({rep.whole_model_ratio:.2f}x vs full precision)")
    return 0


# --- gradient-check harness -------------------------------------------------

def _random_checkable_net(rng: np.random.Generator):
    """A small random full-precision net whose loss is safely differentiable.

    Returns (lossfn, flat_point) or None when the draw lands too close to a
    leaky-ReLU kink or a pooling tie, where central differences would cross a
    non-smooth point.
    """
    c_in = int(rng.integers(1, 4))
    h = int(rng.choice([4, 6]))
    depth = int(rng.integers(1, 4))
    use_bn = bool(rng.integers(0, 2))
    tail = rng.choice(["none", "pool", "reorg", "reorg-concat"])
    x = rng.normal(size=(c_in, h, h))

    shapes = []
    c_prev = c_in
    for _ in range(depth):
        c_next = int(rng.integers(1, 5))
        shapes.append((c_next, c_prev, 3, 3))
        c_prev = c_next
    param_sizes = [int(np.prod(s)) for s in shapes]
    bn_sizes = [2 * s[0] for s in shapes] if use_bn else [0] * depth
    flat = rng.normal(size=sum(param_sizes) + sum(bn_sizes)) * 0.6

    def lossfn(theta, tape, record=None):
        pos = 0
        hid = Tensor(x)
        for li, shp in enumerate(shapes):
            w = take_range(theta, pos, shp, tape)
            pos2 = pos + param_sizes[li]
            hid = conv2d(hid, w, None, stride=1, pad=1, tape=tape)
            if use_bn:
                gamma = take_range(theta, pos2, (shp[0],), tape)
                beta = take_range(theta, pos2 + shp[0], (shp[0],), tape)
                hid, _, _ = batch_norm_train(hid, gamma, beta, 1e-5, tape)
            if record is not None:
                record.append(hid.data)
            hid = leaky_relu(hid, 0.1, tape)
            pos = pos2 + bn_sizes[li]
        if tail == "pool":
            if record is not None:
                record.append(np.asarray([_pool_top2_gap(hid.data)]))
            hid = max_pool2(hid, tape)
        elif tail == "reorg":
            hid = reorg2(hid, tape)
        elif tail == "reorg-concat":
            hid = concat_channels(reorg2(hid, tape), reorg2(hid, tape), tape)
        return sum_all(mul(hid, hid, tape), tape)

    preacts: list[np.ndarray] = []
    lossfn(Tensor(flat), None, record=preacts)
    if any(np.min(np.abs(p)) < 5e-3 for p in preacts[:depth]):
        return None
    if tail == "pool" and preacts[-1][0] < 5e-3:
        return None
    return lossfn, Tensor(flat)


def _pool_top2_gap(arr: np.ndarray) -> float:
    c, h, w = arr.shape
    windows = (arr.reshape(c, h // 2, 2, w // 2, 2)
                  .transpose(0, 1, 3, 2, 4).reshape(c, h // 2, w // 2, 4))
    ordered = np.sort(windows, axis=-1)
    return float(np.min(ordered[..., 3] - ordered[..., 2]))


def run_gradcheck(seed: int, n_networks: int = 50) -> tuple[float, float]:
    """Finite-difference the tape over random nets; returns (max FP error,
    max straight-through formula error)."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    built = 0
    while built < n_networks:
        net = _random_checkable_net(rng)
        if net is None:
            continue
        lossfn, point = net
        worst = max(worst, finite_diff_check(lossfn, point, eps=GRADCHECK_EPS))
        built += 1

    ste_worst = 0.0
    for _ in range(200):
        n = int(rng.integers(1, 30))
        w = rng.normal(size=n) * 1.5
        g = rng.normal(size=n)
        f = binarize_filter(w)
        got = ste_backward(g, w, f)
        want = np.array([g[i] * (1.0 / n + (1.0 if abs(w[i]) <= 1.0 else 0.0)
                                 * f.alpha) for i in range(n)])
        ste_worst = max(ste_worst, float(np.max(np.abs(got - want))))
    return worst, ste_worst


def cmd_gradcheck(args) -> int:
    fp_err, ste_err = run_gradcheck(args.seed, args.networks)
    print(f"full-precision network gradcheck: max relative error "
          f"{fp_err:.3e} (tolerance {GRADCHECK_TOL:.0e})")
    print(f"straight-through backward vs formula oracle: max |diff| "
          f"{ste_err:.3e} (must be exact)")
    if fp_err <= GRADCHECK_TOL and ste_err == 0.0:
        return 0
    return _fail(4, "gradient check outside tolerance")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bwnkit",
        description="Binary-weight detector training toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-teacher", help="train the full-precision teacher")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("distill", help="train a binary-weight student")
    p.add_argument("--config")
    p.add_argument("--teacher", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", required=True, choices=CURRICULUM_MODES)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("eval", help="evaluate a model on a dataset directory")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="detection dump CSV path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("size-report", help="per-layer byte accounting")
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_size_report)

    p = sub.add_parser("export", help="re-serialize a model file")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("gradcheck", help="finite-difference the gradient engine")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--networks", type=int, default=50)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail(2, str(exc))
    except (ModelFormatError, DatasetFormatError, OSError) as exc:
        return _fail(3, str(exc))
    except TrainingDiverged as exc:
        return _fail(4, str(exc))


if __name__ == "__main__":
    sys.exit(main())

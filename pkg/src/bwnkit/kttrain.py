"""Training loops: full-precision teacher training, plain binary-weight
fine-tuning, and feature-transfer training against a frozen teacher.

Every step re-binarizes the flagged layers from their latent real weights,
runs the forward pass on the scaled binary weights, and maps the resulting
weight gradients back onto the latents through the straight-through rule
before the optimizer update; full-precision layers update normally.

Feature transfer adds, for each matched layer, the squared difference between
the student's and the frozen teacher's post-activation responses.  The total
objective is ``lambda1 * l_cls + lambda2 * l_loc + lambda3 * sum(l2)``; with
``lambda3 = 0`` the transfer path is skipped entirely and the step is
bit-identical to plain fine-tuning.

All loops are deterministic given the config seed: batch order comes from a
PCG64 generator owned by the run.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .binarize import ste_backward_layer
from .datasynth import Dataset
from .detect import EVAL_CONF_THRESH, NMS_IOU_THRESH, decode, detection_loss, \
    mean_ap, nms
from .network import BN_MOMENTUM, BinarizationSchedule, Model, apply_stage, \
    forward, init_student_from_teacher
from .tensor import Tape, Tensor, TensorError, add, scale

__all__ = [
    "KTConfig",
    "LossBreakdown",
    "OptimizerState",
    "TrainingDiverged",
    "TrainLogRow",
    "feature_l2",
    "composite_loss",
    "adam_step",
    "train_teacher",
    "bwn_finetune_step",
    "kt_train_step",
    "run_curriculum",
    "evaluate",
    "rows_to_csv",
    "CURRICULUM_MODES",
]

log = logging.getLogger(__name__)

CURRICULUM_MODES = ("stage", "nonstage", "kt")


@dataclass(frozen=True)
class KTConfig:
    """Loss weights, matched layer set, and the shared training knobs."""

    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    kt_layers: tuple[str, ...] | None = None  # None: all binarized conv outputs
    lr: float = 1e-4
    batch_size: int = 8
    epochs: int = 10
    seed: int = 0
    normalize_l2: bool = True
    reset_optimizer_at_stage: bool = True
    kt_stagewise: bool = False  # transfer-train through every stage, not M0->final

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.lambda1 == 0 and self.lambda2 == 0:
            raise ValueError("detection supervision cannot be fully removed "
                             "(lambda1 and lambda2 both zero)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("need batch_size >= 1 and epochs >= 0")


@dataclass(frozen=True)
class LossBreakdown:
    """One step's loss components; ``total`` recomputes exactly from them."""

    l_cls: float
    l_loc: float
    l2_per_layer: dict[str, float]
    total: float

    @property
    def l2_sum(self) -> float:
        return sum(self.l2_per_layer.values())

    def recompute_total(self, cfg: KTConfig) -> float:
        return cfg.lambda1 * self.l_cls + cfg.lambda2 * self.l_loc \
            + cfg.lambda3 * sum(self.l2_per_layer.values())


def composite_loss(l_cls: float, l_loc: float, l2_terms, cfg: KTConfig) -> LossBreakdown:
    """Combine detection and transfer components under the configured weights."""
    if isinstance(l2_terms, dict):
        l2_map = dict(l2_terms)
    else:
        l2_map = {str(i): float(v) for i, v in enumerate(l2_terms)}
    for label, value in [("l_cls", l_cls), ("l_loc", l_loc), *l2_map.items()]:
        if not math.isfinite(value) or value < 0:
            raise ValueError(f"loss component {label} must be finite and "
                             f"non-negative, got {value}")
    total = cfg.lambda1 * l_cls + cfg.lambda2 * l_loc \
        + cfg.lambda3 * sum(l2_map.values())
    return LossBreakdown(l_cls=l_cls, l_loc=l_loc, l2_per_layer=l2_map, total=total)


def feature_l2(f_teacher: Tensor, f_student: Tensor, normalize: bool = True,
               tape: Tape | None = None) -> Tensor:
    """Sum of squared differences between two same-shape feature maps.

    With ``normalize`` the sum is divided by the element count so layers of
    different sizes weigh comparably.  Gradients flow to the student side
    only; the teacher response is a fixed target.
    """
    if f_teacher.shape != f_student.shape:
        raise TensorError(
            f"teacher/student feature shapes differ: {f_teacher.shape} vs "
            f"{f_student.shape} (architecture drift)")
    diff = f_student.data.astype(np.float64) - f_teacher.data
    denom = diff.size if normalize else 1
    out = Tensor(np.asarray((diff * diff).sum() / denom))
    if tape is not None:
        def backward(g):
            return (np.asarray(float(g) * 2.0 * diff / denom,
                               dtype=f_student.dtype),)
        tape.record("feature_l2", (f_student,), (out,), backward)
    return out


@dataclass
class OptimizerState:
    """ADAM accumulators keyed by parameter name."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def reset_moments(self) -> None:
        self.m.clear()
        self.v.clear()
        self.step = 0


def adam_step(state: OptimizerState, params: dict[str, np.ndarray],
              grads: dict[str, np.ndarray]) -> bool:
    """Bias-corrected ADAM update, in place on the parameter arrays.

    Non-finite gradients skip the whole update (logged) rather than abort:
    binary-weight training is jumpy enough that one bad step should not kill
    a run.  Returns whether the update was applied.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            log.warning("skipping optimizer step %d: non-finite gradient in %s",
                        state.step + 1, name)
            return False
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m += (1.0 - state.beta1) * (g - m)
        v += (1.0 - state.beta2) * (g * g - v)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return True


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, detail: str = ""):
        super().__init__(f"training diverged at epoch {epoch}{': ' + detail if detail else ''}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainLogRow:
    epoch: int
    stage: str
    l_cls: float
    l_loc: float
    l2_sum: float
    total: float
    val_map: float


def rows_to_csv(rows: list[TrainLogRow]) -> str:
    lines = ["epoch,stage,l_cls,l_loc,l2_sum,total,val_mAP"]
    for r in rows:
        lines.append(f"{r.epoch},{r.stage},{r.l_cls:.6f},{r.l_loc:.6f},"
                     f"{r.l2_sum:.6f},{r.total:.6f},{r.val_map:.6f}")
    return "\n".join(lines) + "\n"


def _resolve_kt_layers(student: Model, cfg: KTConfig) -> tuple[str, ...]:
    binarized = set(student.binarized_layers())
    if cfg.kt_layers is None:
        return tuple(name for name in
                     (s.name for s in student.layers) if name in binarized)
    for name in cfg.kt_layers:
        if name not in binarized:
            raise ValueError(
                f"matched layer {name} is not a binarized conv layer of the "
                f"current stage (binarized: {sorted(binarized)})")
    return tuple(cfg.kt_layers)


def _train_step(model: Model, batch, cfg: KTConfig, opt: OptimizerState,
                teacher: Model | None = None,
                kt_layers: tuple[str, ...] = ()) -> LossBreakdown:
    """One optimizer step; the shared core of all training modes."""
    images, gts = batch
    tape = Tape()
    x = Tensor(np.asarray(images, dtype=np.float32))
    with_kt = teacher is not None and cfg.lambda3 > 0 and len(kt_layers) > 0
    res = forward(model, x, tape=tape, training=True, want_acts=with_kt)
    t_cls, t_loc = detection_loss(res.head, gts=gts, anchors=model.anchors,
                                  classes=model.classes, tape=tape)
    loss = add(scale(t_cls, cfg.lambda1, tape), scale(t_loc, cfg.lambda2, tape), tape)

    l2_map: dict[str, float] = {}
    if with_kt:
        t_res = forward(teacher, x, tape=None, training=False, want_acts=True)
        l2_total = None
        for name in kt_layers:
            term = feature_l2(t_res.acts[name], res.acts[name],
                              cfg.normalize_l2, tape)
            l2_map[name] = term.item()
            l2_total = term if l2_total is None else add(l2_total, term, tape)
        loss = add(loss, scale(l2_total, cfg.lambda3, tape), tape)

    breakdown = composite_loss(t_cls.item(), t_loc.item(), l2_map, cfg)

    sources = []
    names = []
    for lname, tensors in res.param_tensors.items():
        for key, tensor in tensors.items():
            sources.append(tensor)
            names.append((lname, key))
    grads_by_tensor = tape.gradients(loss, sources)

    flat_params: dict[str, np.ndarray] = {}
    flat_grads: dict[str, np.ndarray] = {}
    for (lname, key), tensor in zip(names, sources):
        g = grads_by_tensor[tensor]
        pname = f"{lname}/{key}"
        if key == "weight" and lname in res.bin_scales:
            latent = model.params[lname]["weight"]
            g = ste_backward_layer(g.astype(latent.dtype), latent,
                                   res.bin_scales[lname])
        flat_params[pname] = model.params[lname][key]
        flat_grads[pname] = g.astype(np.float32)
    adam_step(opt, flat_params, flat_grads)

    for lname, (bmean, bvar) in res.new_bn_stats.items():
        entry = model.params[lname]
        entry["running_mean"] = (BN_MOMENTUM * entry["running_mean"]
                                 + (1.0 - BN_MOMENTUM) * bmean).astype(np.float32)
        entry["running_var"] = (BN_MOMENTUM * entry["running_var"]
                                + (1.0 - BN_MOMENTUM) * bvar).astype(np.float32)
    return breakdown


def bwn_finetune_step(model: Model, batch, cfg: KTConfig,
                      opt: OptimizerState) -> LossBreakdown:
    """One plain fine-tuning step of a (partially) binarized model."""
    if not model.binarized_layers():
        raise ValueError("fine-tuning expects at least one binarized layer")
    return _train_step(model, batch, cfg, opt)


def kt_train_step(teacher: Model, student: Model, batch, cfg: KTConfig,
                  opt: OptimizerState) -> LossBreakdown:
    """One transfer step: match student features to the frozen teacher's.

    The teacher runs forward only (no tape) and its parameters are never
    touched.  With ``lambda3 = 0`` this degenerates to ``bwn_finetune_step``
    bit for bit.
    """
    if any(s.binarized for s in teacher.layers):
        raise ValueError("teacher must be full precision")
    if not student.binarized_layers():
        raise ValueError("student must be at the first binarization stage or later")
    if cfg.lambda3 == 0:
        return _train_step(student, batch, cfg, opt)
    kt_layers = _resolve_kt_layers(student, cfg)
    return _train_step(student, batch, cfg, opt, teacher=teacher,
                       kt_layers=kt_layers)


def evaluate(model: Model, ds: Dataset, conf_thresh: float = EVAL_CONF_THRESH,
             nms_thresh: float = NMS_IOU_THRESH, eval_batch: int = 25,
             top_k: int = 100) -> tuple[float, list[float]]:
    """Validation mAP of a model over a dataset (inference-mode forward).

    Only the ``top_k`` highest-scoring raw boxes per image enter suppression;
    the low evaluation threshold still yields deep ranked lists.
    """
    all_dets = []
    for start in range(0, len(ds), eval_batch):
        chunk = ds.images[start:start + eval_batch]
        res = forward(model, Tensor(chunk), tape=None, training=False)
        heads = res.head.data
        for i in range(heads.shape[0]):
            boxes = decode(heads[i], anchors=model.anchors,
                           conf_thresh=conf_thresh, classes=model.classes)
            if len(boxes) > top_k:
                boxes = sorted(boxes, key=lambda b: -b.score)[:top_k]
            all_dets.append(nms(boxes, nms_thresh))
    return mean_ap(all_dets, ds.gts, classes=model.classes)


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _run_epochs(model: Model, train: Dataset, val: Dataset | None,
                cfg: KTConfig, opt: OptimizerState, n_epochs: int,
                stage_name: str, rng: np.random.Generator,
                rows: list[TrainLogRow], teacher: Model | None = None,
                kt_layers: tuple[str, ...] = ()) -> None:
    for _ in range(n_epochs):
        epoch = len(rows)
        sums = np.zeros(4)
        count = 0
        for idx in _epoch_batches(len(train), cfg.batch_size, rng):
            batch = (train.images[idx], [train.gts[i] for i in idx])
            try:
                bd = _train_step(model, batch, cfg, opt, teacher=teacher,
                                 kt_layers=kt_layers)
            except (TensorError, ValueError) as exc:
                raise TrainingDiverged(epoch, str(exc)) from exc
            if not math.isfinite(bd.total):
                raise TrainingDiverged(epoch, "loss is not finite")
            sums += (bd.l_cls, bd.l_loc, bd.l2_sum, bd.total)
            count += 1
        val_map = evaluate(model, val)[0] if val is not None else float("nan")
        means = sums / max(count, 1)
        rows.append(TrainLogRow(epoch=epoch, stage=stage_name,
                                l_cls=float(means[0]), l_loc=float(means[1]),
                                l2_sum=float(means[2]), total=float(means[3]),
                                val_map=val_map))


def train_teacher(model: Model, train: Dataset, cfg: KTConfig,
                  val: Dataset | None = None) -> tuple[Model, list[TrainLogRow]]:
    """Train a full-precision model with the detection loss only."""
    if model.binarized_layers():
        raise ValueError("teacher training expects a full-precision model")
    rows: list[TrainLogRow] = []
    rng = np.random.default_rng(cfg.seed)
    opt = OptimizerState(lr=cfg.lr)
    _run_epochs(model, train, val, cfg, opt, cfg.epochs, "FP", rng, rows)
    return model, rows


def run_curriculum(teacher: Model, train: Dataset, val: Dataset | None,
                   schedule: BinarizationSchedule, cfg: KTConfig,
                   mode: str) -> tuple[Model, list[TrainLogRow]]:
    """Binarize a student under one of the three training regimes.

    ``stage`` walks the schedule, fine-tuning plainly at each stage;
    ``nonstage`` applies the final stage immediately and fine-tunes for the
    same total epoch budget; ``kt`` fine-tunes the first stage plainly, then
    jumps to the final binarization level and trains against the frozen
    teacher's features for the remaining budget.
    """
    if mode not in CURRICULUM_MODES:
        raise ValueError(f"mode must be one of {CURRICULUM_MODES}, got {mode!r}")
    student = init_student_from_teacher(teacher)
    rng = np.random.default_rng(cfg.seed)
    opt = OptimizerState(lr=cfg.lr)
    rows: list[TrainLogRow] = []
    stages = schedule.stages
    total_epochs = sum(s.epochs for s in stages)

    def stage_boundary():
        if cfg.reset_optimizer_at_stage:
            opt.reset_moments()

    if mode == "stage":
        for k, stage in enumerate(stages):
            apply_stage(student, schedule, k)
            stage_boundary()
            _run_epochs(student, train, val, cfg, opt, stage.epochs,
                        stage.name, rng, rows)
    elif mode == "nonstage":
        apply_stage(student, schedule, len(stages) - 1)
        _run_epochs(student, train, val, cfg, opt, total_epochs,
                    stages[-1].name, rng, rows)
    else:  # kt
        apply_stage(student, schedule, 0)
        _run_epochs(student, train, val, cfg, opt, stages[0].epochs,
                    stages[0].name, rng, rows)
        if cfg.kt_stagewise:
            plan = [(k, stages[k].epochs) for k in range(1, len(stages))]
        else:
            plan = [(len(stages) - 1, total_epochs - stages[0].epochs)]
        for k, epochs in plan:
            apply_stage(student, schedule, k)
            stage_boundary()
            kt_layers = _resolve_kt_layers(student, cfg)
            _run_epochs(student, train, val, cfg, opt, epochs,
                        f"{stages[k].name}-kt", rng, rows,
                        teacher=teacher, kt_layers=kt_layers)
    return student, rows

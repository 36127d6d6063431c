"""Grid-detector head semantics: target assignment, detection loss, decoding,
NMS, and VOC-style average precision.

The head tensor has ``anchors * (5 + classes)`` channels on an SxS grid; per
anchor the channel block is (tx, ty, tw, th, t_obj, class logits...).  Box
centers decode as ``(sigmoid(t) + cell)/S`` and sizes as ``anchor * exp(t)``
in unit image coordinates.

The detection loss splits into a localization term (squared errors on the
sigmoid cell offsets and the log-space sizes of assigned anchors) and a
classification term (squared-error objectness, rescored against the IoU of
the decoded box with its ground truth, plus squared error on the softmax
class scores of assigned anchors).  Unassigned objectness is pulled to zero
with weight 0.1.  The IoU rescore target is treated as a constant in the
backward pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tape, Tensor, TensorError

__all__ = [
    "DetectionBox",
    "GroundTruth",
    "assign_targets",
    "detection_loss",
    "decode",
    "iou",
    "nms",
    "average_precision",
    "mean_ap",
    "dump_detections",
    "parse_detections",
    "DEFAULT_ANCHORS",
    "NMS_IOU_THRESH",
    "EVAL_CONF_THRESH",
    "QUALITATIVE_CONF_THRESH",
]

DEFAULT_ANCHORS: tuple[tuple[float, float], ...] = (
    (0.14, 0.14), (0.20, 0.20), (0.27, 0.27), (0.35, 0.35), (0.44, 0.44))
NMS_IOU_THRESH = 0.45
EVAL_CONF_THRESH = 0.005
QUALITATIVE_CONF_THRESH = 0.25
NOOBJ_WEIGHT = 0.1


@dataclass(frozen=True)
class DetectionBox:
    """One scored prediction in unit image coordinates."""

    class_id: int
    score: float
    cx: float
    cy: float
    w: float
    h: float

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2,
                self.cx + self.w / 2, self.cy + self.h / 2)


@dataclass(frozen=True)
class GroundTruth:
    """One labeled object in unit image coordinates."""

    class_id: int
    cx: float
    cy: float
    w: float
    h: float

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2,
                self.cx + self.w / 2, self.cy + self.h / 2)


def _corners_iou(a, b) -> float:
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    if union <= 0:
        return 0.0
    return inter / union


def iou(a, b) -> float:
    """Intersection over union of two boxes; 0 for a degenerate union."""
    return _corners_iou(a.corners(), b.corners())


def _wh_iou(w1, h1, w2, h2) -> float:
    inter = min(w1, w2) * min(h1, h2)
    union = w1 * h1 + w2 * h2 - inter
    return inter / union if union > 0 else 0.0


def assign_targets(gts: list[GroundTruth], grid: int,
                   anchors) -> dict[tuple[int, int, int], int]:
    """Map (row, col, anchor) cells to ground-truth indices.

    Each object lands in the grid cell containing its center and the anchor
    whose (w, h) has highest IoU with the object's at a shared origin; the
    first ground truth in input order keeps a contested cell.
    """
    assignment: dict[tuple[int, int, int], int] = {}
    for gi, gt in enumerate(gts):
        col = min(int(gt.cx * grid), grid - 1)
        row = min(int(gt.cy * grid), grid - 1)
        best_a, best_iou = 0, -1.0
        for ai, (aw, ah) in enumerate(anchors):
            v = _wh_iou(gt.w, gt.h, aw, ah)
            if v > best_iou:
                best_a, best_iou = ai, v
        key = (row, col, best_a)
        if key not in assignment:
            assignment[key] = gi
    return assignment


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _softmax(z):
    e = np.exp(z - z.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)


def _loss_single(head: np.ndarray, assignment, gts, anchors, classes: int):
    """Forward pass of the detection loss for one image.

    Returns (l_cls, l_loc, grad) where grad is d(l_cls, l_loc)/d(head) stored
    as a pair of arrays.
    """
    n_anchors = len(anchors)
    grid = head.shape[-1]
    g_cls = np.zeros_like(head)
    g_loc = np.zeros_like(head)
    l_loc = 0.0
    l_obj = 0.0
    l_class = 0.0

    # unassigned objectness: 0.1 * sigmoid(t)^2 everywhere, corrected below
    for a in range(n_anchors):
        base = a * (5 + classes)
        tobj = head[base + 4]
        s = _sigmoid(tobj)
        l_obj += NOOBJ_WEIGHT * float((s * s).sum())
        g_cls[base + 4] += NOOBJ_WEIGHT * 2.0 * s * s * (1.0 - s)

    for (row, col, a), gi in assignment.items():
        gt = gts[gi]
        base = a * (5 + classes)
        tx, ty, tw, th = (float(head[base + k, row, col]) for k in range(4))
        tobj = float(head[base + 4, row, col])
        aw, ah = anchors[a]

        # localization: sigmoid offsets within the cell, log-space sizes
        sx, sy = _sigmoid(tx), _sigmoid(ty)
        targ_x = gt.cx * grid - col
        targ_y = gt.cy * grid - row
        targ_w = math.log(gt.w / aw)
        targ_h = math.log(gt.h / ah)
        l_loc += (sx - targ_x) ** 2 + (sy - targ_y) ** 2 \
            + (tw - targ_w) ** 2 + (th - targ_h) ** 2
        g_loc[base + 0, row, col] += 2.0 * (sx - targ_x) * sx * (1.0 - sx)
        g_loc[base + 1, row, col] += 2.0 * (sy - targ_y) * sy * (1.0 - sy)
        g_loc[base + 2, row, col] += 2.0 * (tw - targ_w)
        g_loc[base + 3, row, col] += 2.0 * (th - targ_h)

        # objectness rescore: target is the IoU of the decoded box (constant)
        pred = DetectionBox(gt.class_id, 1.0,
                            (sx + col) / grid, (sy + row) / grid,
                            aw * math.exp(tw), ah * math.exp(th))
        iou_t = iou(pred, gt)
        s = _sigmoid(tobj)
        l_obj += (s - iou_t) ** 2 - NOOBJ_WEIGHT * s * s
        g_cls[base + 4, row, col] += 2.0 * (s - iou_t) * s * (1.0 - s) \
            - NOOBJ_WEIGHT * 2.0 * s * s * (1.0 - s)

        # class scores: squared error on softmax probabilities
        z = head[base + 5:base + 5 + classes, row, col]
        p = _softmax(z)
        y = np.zeros(classes)
        y[gt.class_id] = 1.0
        diff = p - y
        l_class += float(diff @ diff)
        e = 2.0 * diff
        gz = p * e - p * float(p @ e)
        g_cls[base + 5:base + 5 + classes, row, col] += gz

    return float(l_obj + l_class), float(l_loc), g_cls, g_loc


def detection_loss(head_out, assignment=None, gts=None, anchors=DEFAULT_ANCHORS,
                   classes: int | None = None, tape: Tape | None = None):
    """Detection loss of a head tensor: returns (l_cls, l_loc).

    ``head_out`` may be a single [A*(5+C), S, S] image with ``gts`` a list of
    ground truths, or a [B, A*(5+C), S, S] batch with ``gts`` a list of lists
    (losses then averaged over the batch).  Pass a tape to obtain scalar
    tensors differentiable with respect to the head; otherwise plain floats
    are returned.
    """
    arr = head_out.data if isinstance(head_out, Tensor) else np.asarray(head_out)
    if not np.all(np.isfinite(arr)):
        raise TensorError("detection loss requires a finite head tensor")
    batched = arr.ndim == 4
    n_anchors = len(anchors)
    if classes is None:
        classes = arr.shape[-3] // n_anchors - 5
    if arr.shape[-3] != n_anchors * (5 + classes):
        raise TensorError(
            f"head has {arr.shape[-3]} channels, expected {n_anchors * (5 + classes)}")

    heads = arr if batched else arr[None]
    gts_list = gts if batched else [gts if gts is not None else []]
    b = heads.shape[0]
    total_cls, total_loc = 0.0, 0.0
    g_cls = np.zeros_like(heads)
    g_loc = np.zeros_like(heads)
    for i in range(b):
        img_gts = gts_list[i]
        asn = assignment if (not batched and assignment is not None) \
            else assign_targets(img_gts, heads.shape[-1], anchors)
        lc, ll, gc, gl = _loss_single(heads[i], asn, img_gts, anchors, classes)
        total_cls += lc
        total_loc += ll
        g_cls[i] = gc
        g_loc[i] = gl
    l_cls = total_cls / b
    l_loc = total_loc / b

    if tape is None or not isinstance(head_out, Tensor):
        return l_cls, l_loc

    t_cls = Tensor(np.asarray(l_cls))
    t_loc = Tensor(np.asarray(l_loc))

    def backward(gc_up, gl_up):
        g = (float(gc_up) * g_cls + float(gl_up) * g_loc) / b
        g = g.astype(arr.dtype)
        return ((g if batched else g[0]),)

    tape.record("detection_loss", (head_out,), (t_cls, t_loc), backward)
    return t_cls, t_loc


def decode(head_out, anchors=DEFAULT_ANCHORS, conf_thresh: float = EVAL_CONF_THRESH,
           classes: int | None = None) -> list[DetectionBox]:
    """Decode one head tensor [A*(5+C), S, S] into scored boxes.

    Emits a box for every (cell, anchor, class) whose combined score
    ``sigmoid(t_obj) * softmax(class)_k`` reaches ``conf_thresh``; boxes are
    clipped to the unit square.  Ordering is (anchor, row, col, class).
    """
    if not 0.0 <= conf_thresh <= 1.0:
        raise ValueError(f"conf_thresh must lie in [0, 1], got {conf_thresh}")
    arr = head_out.data if isinstance(head_out, Tensor) else np.asarray(head_out)
    n_anchors = len(anchors)
    grid = arr.shape[-1]
    if classes is None:
        classes = arr.shape[0] // n_anchors - 5
    blocks = arr.reshape(n_anchors, 5 + classes, grid, grid).astype(np.float64)
    cols = np.arange(grid)[None, None, :]
    rows = np.arange(grid)[None, :, None]
    cx = (_sigmoid(blocks[:, 0]) + cols) / grid
    cy = (_sigmoid(blocks[:, 1]) + rows) / grid
    wh = np.exp(blocks[:, 2:4])
    aw = np.asarray([a[0] for a in anchors])[:, None, None]
    ah = np.asarray([a[1] for a in anchors])[:, None, None]
    w, h = wh[:, 0] * aw, wh[:, 1] * ah
    x0 = np.maximum(0.0, cx - w / 2)
    y0 = np.maximum(0.0, cy - h / 2)
    x1 = np.minimum(1.0, cx + w / 2)
    y1 = np.minimum(1.0, cy + h / 2)
    obj = _sigmoid(blocks[:, 4])
    z = blocks[:, 5:]
    e = np.exp(z - z.max(axis=1, keepdims=True))
    probs = e / e.sum(axis=1, keepdims=True)
    scores = obj[:, None] * probs  # [A, C, S, S]

    valid = (scores >= conf_thresh) & (x1 > x0)[:, None] & (y1 > y0)[:, None]
    out: list[DetectionBox] = []
    # argwhere over [A, S, S, C] keeps the (anchor, row, col, class) order
    for a, row, col, k in np.argwhere(valid.transpose(0, 2, 3, 1)):
        ax0, ay0 = x0[a, row, col], y0[a, row, col]
        ax1, ay1 = x1[a, row, col], y1[a, row, col]
        out.append(DetectionBox(int(k), float(scores[a, k, row, col]),
                                (ax0 + ax1) / 2, (ay0 + ay1) / 2,
                                ax1 - ax0, ay1 - ay0))
    return out


def nms(boxes: list[DetectionBox], iou_thresh: float = NMS_IOU_THRESH) -> list[DetectionBox]:
    """Greedy per-class suppression: keep the highest score, drop same-class
    boxes overlapping a kept box beyond ``iou_thresh``.  Output is ordered by
    descending score, ties by input order."""
    if not 0.0 < iou_thresh <= 1.0:
        raise ValueError(f"iou_thresh must lie in (0, 1], got {iou_thresh}")
    if not boxes:
        return []
    order = sorted(range(len(boxes)), key=lambda i: (-boxes[i].score, i))
    corners = np.array([boxes[i].corners() for i in order])
    cls = np.array([boxes[i].class_id for i in order])
    areas = (corners[:, 2] - corners[:, 0]) * (corners[:, 3] - corners[:, 1])
    alive = np.ones(len(order), dtype=bool)
    kept: list[DetectionBox] = []
    for i in range(len(order)):
        if not alive[i]:
            continue
        kept.append(boxes[order[i]])
        rest = alive.copy()
        rest[:i + 1] = False
        rest &= cls == cls[i]
        if not rest.any():
            continue
        iw = np.minimum(corners[rest, 2], corners[i, 2]) \
            - np.maximum(corners[rest, 0], corners[i, 0])
        ih = np.minimum(corners[rest, 3], corners[i, 3]) \
            - np.maximum(corners[rest, 1], corners[i, 1])
        inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
        inter[(iw <= 0) | (ih <= 0)] = 0.0
        union = areas[rest] + areas[i] - inter
        ious = np.divide(inter, union, out=np.zeros_like(inter),
                         where=union > 0)
        drop_local = np.nonzero(rest)[0][ious > iou_thresh]
        alive[drop_local] = False
    return kept


def _eleven_point_ap(points: list[tuple[float, float]]) -> float:
    """Mean over recall thresholds {0, 0.1, ..., 1} of the max precision at
    recall >= threshold, from (recall, precision) points."""
    total = 0.0
    for t in np.linspace(0.0, 1.0, 11):
        feasible = [p for r, p in points if r >= t - 1e-12]
        total += max(feasible) if feasible else 0.0
    return total / 11.0


def average_precision(dets: list[DetectionBox], gts: list[GroundTruth],
                      iou_thresh: float = 0.5, class_id: int | None = None) -> float:
    """VOC2007 11-point interpolated AP for one class over one detection pool.

    Detections match greedily in descending score order; a ground truth can
    match at most once.  ``dets``/``gts`` may also be lists of per-image lists
    (image identity then scopes matching).  With no ground truth, the AP is 1
    when there are also no detections and 0 otherwise.
    """
    per_image = bool(dets) and isinstance(dets[0], list) or \
        bool(gts) and isinstance(gts[0], list)
    det_pool: list[tuple[int, DetectionBox]] = []
    gt_pool: list[list[GroundTruth]] = []
    if per_image:
        for img, img_dets in enumerate(dets):
            det_pool.extend((img, d) for d in img_dets)
        gt_pool = [list(g) for g in gts]
    else:
        det_pool = [(0, d) for d in dets]
        gt_pool = [list(gts)]
    if class_id is not None:
        det_pool = [(i, d) for i, d in det_pool if d.class_id == class_id]
        gt_pool = [[g for g in img if g.class_id == class_id] for img in gt_pool]

    n_gt = sum(len(img) for img in gt_pool)
    if n_gt == 0:
        return 1.0 if not det_pool else 0.0
    if not det_pool:
        return 0.0

    order = sorted(range(len(det_pool)), key=lambda i: (-det_pool[i][1].score, i))
    matched = [[False] * len(img) for img in gt_pool]
    tp = 0
    points: list[tuple[float, float]] = []
    for rank, i in enumerate(order, start=1):
        img, det = det_pool[i]
        best_j, best_v = -1, iou_thresh
        for j, gt in enumerate(gt_pool[img]):
            if matched[img][j]:
                continue
            v = iou(det, gt)
            if v >= best_v:
                best_j, best_v = j, v + 0.0
        if best_j >= 0:
            matched[img][best_j] = True
            tp += 1
        points.append((tp / n_gt, tp / rank))
    return _eleven_point_ap(points)


def mean_ap(dets, gts, classes: int, iou_thresh: float = 0.5
            ) -> tuple[float, list[float]]:
    """Unweighted mean AP over the classes with at least one ground truth.

    ``dets`` and ``gts`` are per-image lists.  Classes absent from the ground
    truth are reported with AP 1 when also never predicted but excluded from
    the mean.
    """
    aps = []
    populated = []
    for c in range(classes):
        ap = average_precision(dets, gts, iou_thresh, class_id=c)
        aps.append(ap)
        if any(g.class_id == c for img in gts for g in img):
            populated.append(ap)
    if not populated:
        return 0.0, aps
    return sum(populated) / len(populated), aps


def dump_detections(rows: list[tuple[int, DetectionBox]]) -> str:
    """CSV dump: one ``image_id, class_id, score, cx, cy, w, h`` line per box."""
    lines = ["image_id,class_id,score,cx,cy,w,h"]
    for image_id, d in rows:
        lines.append(f"{image_id},{d.class_id},{d.score:.9f},"
                     f"{d.cx:.9f},{d.cy:.9f},{d.w:.9f},{d.h:.9f}")
    return "\n".join(lines) + "\n"


def parse_detections(text: str) -> list[tuple[int, DetectionBox]]:
    rows = []
    for line in text.strip().splitlines()[1:]:
        img, cid, score, cx, cy, w, h = line.split(",")
        rows.append((int(img), DetectionBox(int(cid), float(score), float(cx),
                                            float(cy), float(w), float(h))))
    return rows

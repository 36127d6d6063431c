"""Miniature grid-detector model: layer graph, stage-wise binarization
schedule, teacher copy, serialization, and size accounting.

Topology (input 3x96x96, output grid 6x6):

    conv1 (FIRST, 3->16) -> pool1
    conv2, conv3 (group A, ->32, ->32) -> pool2
    conv4, conv5 (group B, ->64, ->64) -> pool3      <- skip tap
    conv6, conv7 (group C, ->128, ->128) -> pool4
    concat(reorg(pool3), pool4) -> conv8 (group C, 384->128)
    pred (LAST, 1x1 -> anchors*(5+classes))

Every conv except ``pred`` is conv -> batch norm -> leaky ReLU (slope 0.1)
with no conv bias (the norm's shift absorbs it); ``pred`` is a plain biased
1x1 conv.  Layers in groups FIRST and LAST are never binarized.

Model file format "BWNM" (little endian throughout):

    magic "BWNM" | u16 version=1 | u16 layer count |
    u16 classes | u16 input size | u8 anchor count | anchors as f32 pairs |
    per-layer records | u32 CRC-32 (zlib) of all bytes after the magic

Each record: u16 name length + name | u8 kind | u8 group | u8 flags
(bit0 binarized, bit1 bias, bit2 batch norm) | u8 ndims + dims as u32 |
u8 input count + (u16 length + name) each | u32 weight payload length +
payload | u32 aux payload length + payload.  A full-precision weight payload
is the raw float32 weights; a binarized payload is one float32 scale per
output filter followed by that filter's sign bits packed MSB-first (latent
real weights are never written).  The aux payload carries bias and batch-norm
gamma/beta/mean/var as float32.
"""

from __future__ import annotations

import copy
import hashlib
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .binarize import binarize_layer, pack_bits, unpack_bits
from .tensor import Tape, Tensor, batch_norm_infer, batch_norm_train, \
    concat_channels, conv2d, leaky_relu, max_pool2, reorg2

__all__ = [
    "LayerSpec",
    "Model",
    "Stage",
    "BinarizationSchedule",
    "ModelFormatError",
    "build_minidark",
    "default_schedule",
    "apply_stage",
    "init_student_from_teacher",
    "forward",
    "ForwardResult",
    "save_model",
    "load_model",
    "size_report",
    "SizeReport",
    "param_count",
    "params_hash",
    "check_first_last",
    "BN_EPS",
    "BN_MOMENTUM",
    "LEAKY_SLOPE",
]

BN_EPS = 1e-5
BN_MOMENTUM = 0.99
LEAKY_SLOPE = 0.1

KIND_TAGS = {"conv-fp": 0, "conv-bin": 1, "maxpool": 2, "reorg": 3,
             "concat": 4, "detect-head": 5}
TAG_KINDS = {v: k for k, v in KIND_TAGS.items()}
GROUP_TAGS = {"FIRST": 0, "A": 1, "B": 2, "C": 3, "LAST": 4, None: 255}
TAG_GROUPS = {v: k for k, v in GROUP_TAGS.items()}

CONV_KINDS = ("conv-fp", "conv-bin", "detect-head")


class ModelFormatError(ValueError):
    """Raised on malformed, truncated, or corrupted model files."""


@dataclass
class LayerSpec:
    """One node of the layer graph."""

    name: str
    kind: str
    inputs: tuple[str, ...]
    group: str | None = None
    filter_shape: tuple[int, ...] = ()  # (c_out, c_in, kh, kw) for convs
    binarized: bool = False
    has_bias: bool = False
    has_bn: bool = False

    @property
    def is_conv(self) -> bool:
        return self.kind in CONV_KINDS

    def conv_pad(self) -> int:
        return (self.filter_shape[2] - 1) // 2


@dataclass
class Model:
    """Ordered layer graph plus its parameter store.

    ``params[name]`` maps parameter keys (weight, bias, gamma, beta,
    running_mean, running_var) to float32 arrays.  For binarized layers loaded
    from disk, ``snapshots[name]`` holds the exact (alphas, packed bits) pair
    so re-serialization is bit identical; layers with latent weights
    re-binarize from them instead.
    """

    layers: list[LayerSpec]
    params: dict[str, dict[str, np.ndarray]]
    classes: int
    anchors: list[tuple[float, float]]
    input_size: int = 96
    stage_index: int = -1
    snapshots: dict[str, tuple[np.ndarray, list[bytes]]] = field(default_factory=dict)

    def layer(self, name: str) -> LayerSpec:
        for spec in self.layers:
            if spec.name == name:
                return spec
        raise KeyError(name)

    def binarized_layers(self) -> list[str]:
        return [s.name for s in self.layers if s.binarized]

    def conv_layers(self) -> list[LayerSpec]:
        return [s for s in self.layers if s.is_conv]


def _validate_graph(model: Model) -> None:
    out_channels: dict[str, int] = {"input": 3}
    for spec in model.layers:
        for inp in spec.inputs:
            if inp not in out_channels:
                raise ValueError(f"layer {spec.name} consumes unknown tensor {inp}")
        if spec.is_conv:
            c_in = out_channels[spec.inputs[0]]
            if c_in != spec.filter_shape[1]:
                raise ValueError(
                    f"layer {spec.name} expects {spec.filter_shape[1]} channels "
                    f"but its input provides {c_in}")
            out_channels[spec.name] = spec.filter_shape[0]
        elif spec.kind == "maxpool":
            out_channels[spec.name] = out_channels[spec.inputs[0]]
        elif spec.kind == "reorg":
            out_channels[spec.name] = 4 * out_channels[spec.inputs[0]]
        elif spec.kind == "concat":
            out_channels[spec.name] = sum(out_channels[i] for i in spec.inputs)
        else:
            raise ValueError(f"unknown layer kind {spec.kind}")


def build_minidark(classes: int, anchors=None, seed: int = 0) -> Model:
    """Construct the fixed miniature detector with freshly initialized weights.

    Conv weights are uniform in +/- sqrt(2 / fan_in); batch-norm scales start
    at 1 with zeroed shifts and unit running variance.
    """
    if classes < 1:
        raise ValueError(f"need at least one class, got {classes}")
    if anchors is None:
        from .detect import DEFAULT_ANCHORS
        anchors = list(DEFAULT_ANCHORS)
    anchors = [(float(w), float(h)) for w, h in anchors]
    if not anchors:
        raise ValueError("need at least one anchor")

    head_channels = len(anchors) * (5 + classes)
    convs = [
        ("conv1", "FIRST", 3, 16, 3, "input"),
        ("conv2", "A", 16, 32, 3, "pool1"),
        ("conv3", "A", 32, 32, 3, "conv2"),
        ("conv4", "B", 32, 64, 3, "pool2"),
        ("conv5", "B", 64, 64, 3, "conv4"),
        ("conv6", "C", 64, 128, 3, "pool3"),
        ("conv7", "C", 128, 128, 3, "conv6"),
        ("conv8", "C", 384, 128, 3, "concat1"),
        ("pred", "LAST", 128, head_channels, 1, "conv8"),
    ]
    pools = {"pool1": "conv1", "pool2": "conv3", "pool3": "conv5", "pool4": "conv7"}

    layers: list[LayerSpec] = []
    order = ["conv1", "pool1", "conv2", "conv3", "pool2", "conv4", "conv5",
             "pool3", "conv6", "conv7", "pool4", "reorg1", "concat1", "conv8",
             "pred"]
    conv_map = {c[0]: c for c in convs}
    for name in order:
        if name in conv_map:
            _, group, c_in, c_out, k, inp = conv_map[name]
            layers.append(LayerSpec(
                name=name,
                kind="detect-head" if name == "pred" else "conv-fp",
                inputs=(inp,),
                group=group,
                filter_shape=(c_out, c_in, k, k),
                has_bias=(name == "pred"),
                has_bn=(name != "pred"),
            ))
        elif name in pools:
            layers.append(LayerSpec(name=name, kind="maxpool", inputs=(pools[name],)))
        elif name == "reorg1":
            layers.append(LayerSpec(name="reorg1", kind="reorg", inputs=("pool3",)))
        elif name == "concat1":
            layers.append(LayerSpec(name="concat1", kind="concat",
                                    inputs=("reorg1", "pool4")))

    rng = np.random.default_rng(seed)
    params: dict[str, dict[str, np.ndarray]] = {}
    for spec in layers:
        if not spec.is_conv:
            continue
        c_out, c_in, kh, kw = spec.filter_shape
        bound = np.sqrt(2.0 / (c_in * kh * kw))
        entry = {"weight": rng.uniform(-bound, bound,
                                       spec.filter_shape).astype(np.float32)}
        if spec.has_bias:
            entry["bias"] = np.zeros(c_out, dtype=np.float32)
        if spec.has_bn:
            entry["gamma"] = np.ones(c_out, dtype=np.float32)
            entry["beta"] = np.zeros(c_out, dtype=np.float32)
            entry["running_mean"] = np.zeros(c_out, dtype=np.float32)
            entry["running_var"] = np.ones(c_out, dtype=np.float32)
        params[spec.name] = entry

    model = Model(layers=layers, params=params, classes=classes, anchors=anchors)
    _validate_graph(model)
    return model


@dataclass(frozen=True)
class Stage:
    name: str
    groups: frozenset[str]
    epochs: int


@dataclass(frozen=True)
class BinarizationSchedule:
    """Cumulative stages binarizing layer groups in reverse network depth."""

    stages: tuple[Stage, ...]

    def __post_init__(self):
        depth_rank = {"C": 0, "B": 1, "A": 2}
        prev: frozenset[str] = frozenset()
        max_rank = -1
        for stage in self.stages:
            if not stage.groups > prev:
                raise ValueError(
                    f"stage {stage.name} must strictly extend the previous stage")
            for g in stage.groups - prev:
                if g not in depth_rank:
                    raise ValueError(f"stage {stage.name} names invalid group {g}")
                if depth_rank[g] < max_rank:
                    raise ValueError("stages must binarize groups from last to first")
                max_rank = max(max_rank, depth_rank[g])
            prev = stage.groups


def default_schedule(m0_epochs: int = 2, m1_epochs: int = 15,
                     m2_epochs: int = 30) -> BinarizationSchedule:
    """M0 binarizes the last group, M1 adds the middle, M2 adds the early one;
    first and last layers always stay full precision."""
    return BinarizationSchedule(stages=(
        Stage("M0", frozenset({"C"}), m0_epochs),
        Stage("M1", frozenset({"C", "B"}), m1_epochs),
        Stage("M2", frozenset({"C", "B", "A"}), m2_epochs),
    ))


def check_first_last(model: Model) -> None:
    for spec in model.layers:
        if spec.group in ("FIRST", "LAST") and spec.binarized:
            raise AssertionError(f"layer {spec.name} ({spec.group}) was binarized")


def apply_stage(model: Model, schedule: BinarizationSchedule,
                stage_index: int) -> Model:
    """Mark exactly the cumulative stage's groups binarized (in place).

    Latent weights are untouched; stage order must be non-decreasing over the
    model's lifetime.
    """
    if not 0 <= stage_index < len(schedule.stages):
        raise ValueError(f"stage index {stage_index} out of range")
    if stage_index < model.stage_index:
        raise ValueError(
            f"stage order must be non-decreasing: at {model.stage_index}, "
            f"got {stage_index}")
    groups = schedule.stages[stage_index].groups
    for spec in model.layers:
        if spec.kind in ("conv-fp", "conv-bin"):
            flag = spec.group in groups
            spec.binarized = flag
            spec.kind = "conv-bin" if flag else "conv-fp"
    model.stage_index = stage_index
    check_first_last(model)
    return model


def init_student_from_teacher(teacher: Model) -> Model:
    """Deep copy of a full-precision teacher; forward behavior is identical
    until a stage is applied."""
    if any(s.binarized for s in teacher.layers):
        raise ValueError("teacher must be full precision (no binarized layers)")
    student = copy.deepcopy(teacher)
    student.stage_index = -1
    return student


@dataclass
class ForwardResult:
    head: Tensor
    acts: dict[str, Tensor]
    param_tensors: dict[str, dict[str, Tensor]]
    bin_scales: dict[str, np.ndarray]
    new_bn_stats: dict[str, tuple[np.ndarray, np.ndarray]]


def _effective_weight(model: Model, spec: LayerSpec) -> tuple[np.ndarray, np.ndarray]:
    """Scaled binary weights for a binarized conv, recomputed from latents."""
    w = model.params[spec.name]["weight"]
    if spec.name in model.snapshots:
        return w, model.snapshots[spec.name][0]
    alphas, signs = binarize_layer(w)
    expand = (slice(None),) + (None,) * (w.ndim - 1)
    return signs * alphas[expand], alphas


def forward(model: Model, x: Tensor, tape: Tape | None = None,
            training: bool = False, want_acts: bool = False) -> ForwardResult:
    """Run the layer graph on ``x`` ([3,h,w] or [b,3,h,w]).

    Binarized convolutions run on their scaled binary weights, recomputed from
    the latent weights on every call.  In training mode batch norm uses batch
    statistics and the result carries the fresh statistics for the caller to
    fold into the running averages; in inference mode the stored running
    statistics are used.
    """
    values: dict[str, Tensor] = {"input": x}
    acts: dict[str, Tensor] = {}
    param_tensors: dict[str, dict[str, Tensor]] = {}
    bin_scales: dict[str, np.ndarray] = {}
    new_stats: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    for spec in model.layers:
        if spec.is_conv:
            entry = model.params[spec.name]
            if spec.binarized:
                eff, alphas = _effective_weight(model, spec)
                wt = Tensor(eff)
                bin_scales[spec.name] = alphas
            else:
                wt = Tensor(entry["weight"])
            tensors = {"weight": wt}
            bias = None
            if spec.has_bias:
                bias = Tensor(entry["bias"])
                tensors["bias"] = bias
            h = conv2d(values[spec.inputs[0]], wt, bias,
                       stride=1, pad=spec.conv_pad(), tape=tape)
            if spec.has_bn:
                gamma = Tensor(entry["gamma"])
                beta = Tensor(entry["beta"])
                tensors["gamma"] = gamma
                tensors["beta"] = beta
                if training:
                    h, bmean, bvar = batch_norm_train(h, gamma, beta, BN_EPS, tape)
                    new_stats[spec.name] = (bmean, bvar)
                else:
                    h = batch_norm_infer(h, Tensor(entry["running_mean"]),
                                         Tensor(entry["running_var"]),
                                         gamma, beta, BN_EPS, tape)
            if spec.kind != "detect-head":
                h = leaky_relu(h, LEAKY_SLOPE, tape)
            param_tensors[spec.name] = tensors
            if want_acts:
                acts[spec.name] = h
        elif spec.kind == "maxpool":
            h = max_pool2(values[spec.inputs[0]], tape)
        elif spec.kind == "reorg":
            h = reorg2(values[spec.inputs[0]], tape)
        elif spec.kind == "concat":
            h = concat_channels(values[spec.inputs[0]], values[spec.inputs[1]], tape)
        values[spec.name] = h

    return ForwardResult(head=values[model.layers[-1].name], acts=acts,
                         param_tensors=param_tensors, bin_scales=bin_scales,
                         new_bn_stats=new_stats)


def param_count(model: Model) -> int:
    return sum(arr.size for entry in model.params.values() for arr in entry.values())


def params_hash(model: Model) -> str:
    """SHA-256 over every parameter array, in a canonical order."""
    digest = hashlib.sha256()
    for name in sorted(model.params):
        for key in sorted(model.params[name]):
            digest.update(name.encode())
            digest.update(key.encode())
            digest.update(model.params[name][key].tobytes())
    return digest.hexdigest()


# --- serialization ---------------------------------------------------------

_AUX_KEYS = ("bias", "gamma", "beta", "running_mean", "running_var")


def _layer_payload_sizes(spec: LayerSpec) -> tuple[int, int, int]:
    """(weight bytes, aux bytes, full-precision-equivalent weight bytes)."""
    if not spec.is_conv:
        return 0, 0, 0
    c_out = spec.filter_shape[0]
    n = int(np.prod(spec.filter_shape[1:]))
    fp_weight = 4 * c_out * n
    if spec.binarized:
        weight = c_out * 4 + c_out * ((n + 7) // 8)
    else:
        weight = fp_weight
    aux = (4 * c_out if spec.has_bias else 0) + (16 * c_out if spec.has_bn else 0)
    return weight, aux, fp_weight


def _weight_payload(model: Model, spec: LayerSpec) -> bytes:
    entry = model.params[spec.name]
    if not spec.binarized:
        return entry["weight"].astype("<f4").tobytes()
    if spec.name in model.snapshots:
        alphas, bits = model.snapshots[spec.name]
        return alphas.astype("<f4").tobytes() + b"".join(bits)
    alphas, signs = binarize_layer(entry["weight"])
    c_out = spec.filter_shape[0]
    packed = [pack_bits(signs[i].reshape(-1)) for i in range(c_out)]
    return alphas.astype("<f4").tobytes() + b"".join(packed)


def save_model(model: Model, path) -> None:
    """Write the bit-exact "BWNM" file described in the module docstring."""
    body = bytearray()
    body += struct.pack("<HH", 1, len(model.layers))
    body += struct.pack("<HHB", model.classes, model.input_size, len(model.anchors))
    for aw, ah in model.anchors:
        body += struct.pack("<ff", aw, ah)
    for spec in model.layers:
        name = spec.name.encode()
        flags = (1 if spec.binarized else 0) | (2 if spec.has_bias else 0) \
            | (4 if spec.has_bn else 0)
        body += struct.pack("<H", len(name)) + name
        body += struct.pack("<BBB", KIND_TAGS[spec.kind],
                            GROUP_TAGS[spec.group], flags)
        dims = spec.filter_shape
        body += struct.pack("<B", len(dims))
        for d in dims:
            body += struct.pack("<I", d)
        body += struct.pack("<B", len(spec.inputs))
        for inp in spec.inputs:
            enc = inp.encode()
            body += struct.pack("<H", len(enc)) + enc
        if spec.is_conv:
            wp = _weight_payload(model, spec)
            aux = b"".join(model.params[spec.name][k].astype("<f4").tobytes()
                           for k in _AUX_KEYS if k in model.params[spec.name])
        else:
            wp, aux = b"", b""
        body += struct.pack("<I", len(wp)) + wp
        body += struct.pack("<I", len(aux)) + aux
    blob = b"BWNM" + bytes(body) + struct.pack("<I", zlib.crc32(bytes(body)))
    with open(path, "wb") as fh:
        fh.write(blob)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise ModelFormatError(
                f"truncated model file: wanted {n} bytes at offset {self.pos}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_model(path) -> Model:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8 or blob[:4] != b"BWNM":
        raise ModelFormatError("bad magic: not a BWNM model file")
    body, stored_crc = blob[4:-4], struct.unpack("<I", blob[-4:])[0]
    actual = zlib.crc32(body)
    if actual != stored_crc:
        raise ModelFormatError(
            f"CRC mismatch: stored {stored_crc:#010x}, computed {actual:#010x}")
    r = _Reader(body)
    version, n_layers = r.unpack("<HH")
    if version != 1:
        raise ModelFormatError(f"unsupported model format version {version}")
    classes, input_size, n_anchors = r.unpack("<HHB")
    anchors = [r.unpack("<ff") for _ in range(n_anchors)]

    layers: list[LayerSpec] = []
    params: dict[str, dict[str, np.ndarray]] = {}
    snapshots: dict[str, tuple[np.ndarray, list[bytes]]] = {}
    for _ in range(n_layers):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        kind_tag, group_tag, flags = r.unpack("<BBB")
        if kind_tag not in TAG_KINDS or group_tag not in TAG_GROUPS:
            raise ModelFormatError(f"layer {name}: unknown kind/group tag")
        (ndims,) = r.unpack("<B")
        dims = tuple(r.unpack("<I")[0] for _ in range(ndims))
        (n_inputs,) = r.unpack("<B")
        inputs = []
        for _ in range(n_inputs):
            (ln,) = r.unpack("<H")
            inputs.append(r.take(ln).decode())
        spec = LayerSpec(name=name, kind=TAG_KINDS[kind_tag],
                         inputs=tuple(inputs), group=TAG_GROUPS[group_tag],
                         filter_shape=dims, binarized=bool(flags & 1),
                         has_bias=bool(flags & 2), has_bn=bool(flags & 4))
        (wlen,) = r.unpack("<I")
        wp = r.take(wlen)
        (auxlen,) = r.unpack("<I")
        aux = r.take(auxlen)
        layers.append(spec)
        if not spec.is_conv:
            continue
        c_out = dims[0]
        n = int(np.prod(dims[1:]))
        want_w, want_aux, _ = _layer_payload_sizes(spec)
        if wlen != want_w or auxlen != want_aux:
            raise ModelFormatError(
                f"layer {name}: payload sizes {wlen}/{auxlen} do not match "
                f"declared shape (expected {want_w}/{want_aux})")
        entry: dict[str, np.ndarray] = {}
        if spec.binarized:
            alphas = np.frombuffer(wp[:4 * c_out], dtype="<f4").copy()
            per = (n + 7) // 8
            bits = [wp[4 * c_out + i * per:4 * c_out + (i + 1) * per]
                    for i in range(c_out)]
            signs = np.stack([unpack_bits(b, n) for b in bits]).astype(np.float32)
            entry["weight"] = (signs * alphas[:, None]).reshape(dims)
            snapshots[name] = (alphas, bits)
        else:
            entry["weight"] = np.frombuffer(wp, dtype="<f4").reshape(dims).copy()
        off = 0
        if spec.has_bias:
            entry["bias"] = np.frombuffer(aux[off:off + 4 * c_out], dtype="<f4").copy()
            off += 4 * c_out
        if spec.has_bn:
            for key in ("gamma", "beta", "running_mean", "running_var"):
                entry[key] = np.frombuffer(aux[off:off + 4 * c_out], dtype="<f4").copy()
                off += 4 * c_out
        params[name] = entry

    if r.pos != len(body):
        raise ModelFormatError(f"{len(body) - r.pos} trailing bytes after last record")
    model = Model(layers=layers, params=params, classes=classes,
                  anchors=anchors, input_size=input_size, snapshots=snapshots)
    _validate_graph(model)
    return model


@dataclass
class SizeReport:
    """Exact byte accounting of a model's serialized parameters."""

    rows: list[dict]
    total_weight_bytes: int
    total_aux_bytes: int
    fp_equivalent_bytes: int
    whole_model_ratio: float
    binarized_ratio: float | None
    expected_file_bytes: int

    @property
    def total_param_bytes(self) -> int:
        return self.total_weight_bytes + self.total_aux_bytes

    def render(self) -> str:
        lines = [f"{'layer':<10}{'kind':<14}{'weight B':>12}{'aux B':>9}"
                 f"{'fp-equiv B':>12}{'ratio':>8}"]
        for row in self.rows:
            ratio = f"{row['ratio']:.2f}" if row["ratio"] else "-"
            lines.append(f"{row['name']:<10}{row['kind']:<14}"
                         f"{row['weight_bytes']:>12}{row['aux_bytes']:>9}"
                         f"{row['fp_weight_bytes']:>12}{ratio:>8}")
        lines.append(f"total parameter bytes: {self.total_param_bytes}")
        lines.append(f"full-precision equivalent: "
                     f"{self.fp_equivalent_bytes}")
        lines.append(f"whole-model compression ratio: {self.whole_model_ratio:.2f}x")
        if self.binarized_ratio is not None:
            lines.append("binarized-layer weight compression: "
                         f"{self.binarized_ratio:.2f}x")
        lines.append(f"expected file size: {self.expected_file_bytes} bytes")
        return "\n".join(lines)


def size_report(model: Model) -> SizeReport:
    """Per-layer and total byte counts, plus compression ratios.

    Per-layer ratios compare weight payloads with their full-precision
    equivalents; the whole-model ratio includes every parameter byte (bias
    and batch-norm state are never compressed).  The binarized ratio
    aggregates weight payloads over the binarized layers only.
    """
    rows = []
    tot_w = tot_aux = tot_fp_w = 0
    bin_w = bin_fp = 0
    file_bytes = 4 + 2 + 2 + 5 + 8 * len(model.anchors) + 4
    for spec in model.layers:
        w, aux, fp_w = _layer_payload_sizes(spec)
        file_bytes += 2 + len(spec.name.encode()) + 3 + 1 + 4 * len(spec.filter_shape)
        file_bytes += 1 + sum(2 + len(i.encode()) for i in spec.inputs)
        file_bytes += 4 + w + 4 + aux
        rows.append({
            "name": spec.name, "kind": spec.kind, "binarized": spec.binarized,
            "weight_bytes": w, "aux_bytes": aux, "fp_weight_bytes": fp_w,
            "ratio": (fp_w / w) if w else 0.0,
        })
        tot_w += w
        tot_aux += aux
        tot_fp_w += fp_w
        if spec.binarized:
            bin_w += w
            bin_fp += fp_w
    fp_total = tot_fp_w + tot_aux
    actual_total = tot_w + tot_aux
    return SizeReport(
        rows=rows,
        total_weight_bytes=tot_w,
        total_aux_bytes=tot_aux,
        fp_equivalent_bytes=fp_total,
        whole_model_ratio=fp_total / actual_total if actual_total else 1.0,
        binarized_ratio=(bin_fp / bin_w) if bin_w else None,
        expected_file_bytes=file_bytes,
    )

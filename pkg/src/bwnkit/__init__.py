"""Binary-weight detector training toolkit.

Modules: ``tensor`` (dense tensors and the gradient tape), ``binarize``
(per-filter sign/scale quantization), ``network`` (the miniature detector,
stage schedule, and serialization), ``detect`` (head semantics and VOC-style
evaluation), ``kttrain`` (training loops, including transfer from a frozen
teacher), ``datasynth`` (deterministic synthetic scenes), and ``cli``.
"""

from .binarize import BinarizedFilter, binarize_filter, brute_force_binarize, \
    pack_bits, quantization_error, ste_backward, unpack_bits
from .config import ConfigError, RunConfig, parse_config, render_config
from .datasynth import Dataset, SceneConfig, generate, load_dataset, save_dataset
from .detect import DetectionBox, GroundTruth, assign_targets, \
    average_precision, decode, detection_loss, iou, mean_ap, nms
from .kttrain import KTConfig, LossBreakdown, OptimizerState, adam_step, \
    bwn_finetune_step, composite_loss, evaluate, feature_l2, kt_train_step, \
    run_curriculum, train_teacher
from .network import BinarizationSchedule, LayerSpec, Model, apply_stage, \
    build_minidark, default_schedule, forward, init_student_from_teacher, \
    load_model, param_count, params_hash, save_model, size_report
from .tensor import Tape, Tensor, TensorError, conv2d, finite_diff_check

__version__ = "0.1.0"

import math

import numpy as np
import pytest

from bwnkit.datasynth import Dataset, SceneConfig, generate
from bwnkit.kttrain import (
    KTConfig,
    LossBreakdown,
    OptimizerState,
    TrainingDiverged,
    adam_step,
    bwn_finetune_step,
    composite_loss,
    evaluate,
    feature_l2,
    kt_train_step,
    rows_to_csv,
    run_curriculum,
    train_teacher,
)
from bwnkit.network import (
    apply_stage,
    build_minidark,
    default_schedule,
    forward,
    init_student_from_teacher,
    params_hash,
)
from bwnkit.tensor import Tape, Tensor, TensorError


@pytest.fixture(scope="module")
def tiny_data():
    full = generate(SceneConfig(seed=31), 20)
    return (Dataset(images=full.images[:16], gts=full.gts[:16]),
            Dataset(images=full.images[16:], gts=full.gts[16:]))


def fresh_model(seed=0):
    return build_minidark(classes=3, seed=seed)


class TestFeatureL2:
    def test_identical_zero(self):
        x = Tensor(np.random.default_rng(0).normal(size=(4, 5, 5)))
        assert feature_l2(x, Tensor(x.data.copy())).item() == 0.0

    def test_hand_value(self):
        t = Tensor(np.array([0.0, 0.0]))
        s = Tensor(np.array([1.0, 2.0]))
        assert feature_l2(t, s, normalize=False).item() == 5.0
        assert feature_l2(t, s, normalize=True).item() == 2.5

    def test_elementwise_oracle(self):
        rng = np.random.default_rng(5)
        t = rng.normal(size=(3, 4, 4))
        s = rng.normal(size=(3, 4, 4))
        got = feature_l2(Tensor(t), Tensor(s), normalize=False).item()
        want = 0.0
        for i in range(3):
            for j in range(4):
                for k in range(4):
                    want += (s[i, j, k] - t[i, j, k]) ** 2
        assert got == pytest.approx(want, rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(TensorError, match="drift"):
            feature_l2(Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 3))))

    def test_gradient_student_side_only(self):
        tape = Tape()
        t = Tensor(np.array([1.0, 1.0]))
        s = Tensor(np.array([2.0, 3.0]))
        out = feature_l2(t, s, normalize=False, tape=tape)
        grads = tape.gradients(out, [s, t])
        np.testing.assert_allclose(grads[s], [2.0, 4.0])
        np.testing.assert_array_equal(grads[t], [0.0, 0.0])


class TestCompositeLoss:
    def test_hand_arithmetic(self):
        cfg = KTConfig(lambda1=1.0, lambda2=1.0, lambda3=0.1)
        bd = composite_loss(2.0, 3.0, [4.0, 6.0], cfg)
        assert bd.total == pytest.approx(6.0)

    def test_lambda3_zero_reduces_to_detection(self):
        cfg = KTConfig(lambda3=0.0)
        bd = composite_loss(2.0, 3.0, [100.0], cfg)
        assert bd.total == 5.0

    def test_missing_detection_supervision_rejected(self):
        with pytest.raises(ValueError):
            KTConfig(lambda1=0.0, lambda2=0.0)

    def test_negative_component_rejected(self):
        with pytest.raises(ValueError):
            composite_loss(-1.0, 0.0, [], KTConfig())

    def test_total_recomputes_exactly(self):
        rng = np.random.default_rng(3)
        cfg = KTConfig(lambda1=0.7, lambda2=1.3, lambda3=0.25)
        for _ in range(50):
            bd = composite_loss(float(rng.uniform(0, 5)), float(rng.uniform(0, 5)),
                                {f"l{i}": float(rng.uniform(0, 2)) for i in range(4)},
                                cfg)
            assert bd.total == bd.recompute_total(cfg)


class TestAdam:
    def test_first_step_magnitude(self):
        state = OptimizerState(lr=0.1)
        p = {"x": np.array([1.0], dtype=np.float32)}
        adam_step(state, p, {"x": np.array([1.0], dtype=np.float32)})
        assert p["x"][0] == pytest.approx(1.0 - 0.1, abs=1e-7)
        assert state.step == 1

    def test_zero_gradient(self):
        state = OptimizerState(lr=0.1)
        p = {"x": np.array([2.0], dtype=np.float32)}
        adam_step(state, p, {"x": np.zeros(1, dtype=np.float32)})
        assert p["x"][0] == 2.0
        assert state.step == 1

    def test_descends_quadratic(self):
        state = OptimizerState(lr=0.1)
        p = {"x": np.array([1.0], dtype=np.float32)}
        values = [1.0]
        for _ in range(5):
            g = 2.0 * p["x"]
            adam_step(state, p, {"x": g.astype(np.float32)})
            values.append(float(p["x"][0]))
        assert all(b < a for a, b in zip(values, values[1:]))

    def test_nonfinite_gradient_skipped(self):
        state = OptimizerState(lr=0.1)
        p = {"x": np.array([1.0], dtype=np.float32)}
        applied = adam_step(state, p, {"x": np.array([np.nan], dtype=np.float32)})
        assert not applied
        assert p["x"][0] == 1.0
        assert state.step == 0


def dataset_detection_loss(model, ds):
    from bwnkit.detect import detection_loss
    res = forward(model, Tensor(ds.images))
    l_cls, l_loc = detection_loss(res.head, gts=ds.gts, anchors=model.anchors,
                                  classes=model.classes)
    return l_cls + l_loc


class TestTrainTeacher:
    def test_one_epoch_reduces_loss(self, tiny_data):
        train, _ = tiny_data
        model = fresh_model()
        before = dataset_detection_loss(model, train)
        cfg = KTConfig(lr=1e-3, batch_size=8, epochs=1, seed=0)
        _, rows = train_teacher(model, train, cfg)
        assert dataset_detection_loss(model, train) < before

    def test_seed_determinism(self, tiny_data):
        train, _ = tiny_data
        cfg = KTConfig(lr=1e-3, batch_size=8, epochs=1, seed=5)
        m1, _ = train_teacher(fresh_model(), train, cfg)
        m2, _ = train_teacher(fresh_model(), train, cfg)
        assert params_hash(m1) == params_hash(m2)

    def test_zero_epochs_unchanged(self, tiny_data):
        train, _ = tiny_data
        model = fresh_model()
        before = params_hash(model)
        _, rows = train_teacher(model, train, KTConfig(epochs=0))
        assert params_hash(model) == before
        assert rows == []

    def test_binarized_model_rejected(self, tiny_data):
        train, _ = tiny_data
        model = fresh_model()
        apply_stage(model, default_schedule(), 0)
        with pytest.raises(ValueError):
            train_teacher(model, train, KTConfig())


class TestFinetuneStep:
    def test_requires_binarized_layer(self, tiny_data):
        train, _ = tiny_data
        batch = (train.images[:2], train.gts[:2])
        with pytest.raises(ValueError):
            bwn_finetune_step(fresh_model(), batch, KTConfig(), OptimizerState())

    def test_zero_lr_is_noop_and_repeatable(self, tiny_data):
        train, _ = tiny_data
        model = fresh_model()
        apply_stage(model, default_schedule(), 0)
        cfg = KTConfig(batch_size=2)
        opt = OptimizerState(lr=0.0)
        batch = (train.images[:2], train.gts[:2])
        # batch-norm running stats may still move; latent weights must not
        learned = {(n, k): arr.copy() for n, entry in model.params.items()
                   for k, arr in entry.items()
                   if k in ("weight", "bias", "gamma", "beta")}
        bd1 = bwn_finetune_step(model, batch, cfg, opt)
        bd2 = bwn_finetune_step(model, batch, cfg, opt)
        for (n, k), arr in learned.items():
            np.testing.assert_array_equal(model.params[n][k], arr)
        assert bd1 == bd2

    def test_effective_weights_two_values_per_filter(self, tiny_data):
        train, _ = tiny_data
        model = fresh_model()
        apply_stage(model, default_schedule(), 0)
        res = forward(model, Tensor(train.images[:1]))
        for name in model.binarized_layers():
            alphas = res.bin_scales[name]
            w = model.params[name]["weight"]
            from bwnkit.binarize import binarize_layer
            a2, signs = binarize_layer(w)
            eff = signs * a2[:, None, None, None]
            for i in range(eff.shape[0]):
                vals = np.unique(np.abs(eff[i]))
                assert vals.size == 1 and vals[0] == alphas[i]

    def test_overfits_fixed_batch(self, tiny_data):
        train, _ = tiny_data
        model = fresh_model()
        # a short warmup makes the detection loss well-posed, then M0
        cfg = KTConfig(lr=1e-3, batch_size=4, epochs=0, seed=0)
        apply_stage(model, default_schedule(), 0)
        opt = OptimizerState(lr=1e-3)
        batch = (train.images[:4], train.gts[:4])
        first = bwn_finetune_step(model, batch, cfg, opt)
        last = first
        for _ in range(199):
            last = bwn_finetune_step(model, batch, cfg, opt)
        det_first = first.l_cls + first.l_loc
        det_last = last.l_cls + last.l_loc
        assert det_last <= 0.5 * det_first


class TestKtStep:
    def test_identical_copies_have_zero_feature_gap(self, tiny_data):
        train, _ = tiny_data
        teacher = fresh_model()
        student = init_student_from_teacher(teacher)
        x = Tensor(train.images[:2])
        t_res = forward(teacher, x, want_acts=True)
        s_res = forward(student, x, want_acts=True)
        for name in t_res.acts:
            assert feature_l2(t_res.acts[name], s_res.acts[name]).item() == 0.0

    def test_teacher_hash_constant(self, tiny_data):
        train, _ = tiny_data
        teacher = fresh_model()
        student = init_student_from_teacher(teacher)
        apply_stage(student, default_schedule(), 0)
        cfg = KTConfig(lr=1e-3, batch_size=2)
        opt = OptimizerState(lr=1e-3)
        before = params_hash(teacher)
        batch = (train.images[:2], train.gts[:2])
        for _ in range(20):
            kt_train_step(teacher, student, batch, cfg, opt)
        assert params_hash(teacher) == before

    def test_rejects_binarized_teacher(self, tiny_data):
        train, _ = tiny_data
        teacher = fresh_model()
        apply_stage(teacher, default_schedule(), 0)
        student = fresh_model()
        apply_stage(student, default_schedule(), 0)
        with pytest.raises(ValueError):
            kt_train_step(teacher, student, (train.images[:1], train.gts[:1]),
                          KTConfig(), OptimizerState())

    def test_rejects_unknown_matched_layer(self, tiny_data):
        train, _ = tiny_data
        teacher = fresh_model()
        student = init_student_from_teacher(teacher)
        apply_stage(student, default_schedule(), 0)
        cfg = KTConfig(kt_layers=("conv2",))  # binarized only at M2
        with pytest.raises(ValueError, match="conv2"):
            kt_train_step(teacher, student, (train.images[:1], train.gts[:1]),
                          cfg, OptimizerState())

    def test_feature_gap_shrinks_with_training(self, tiny_data):
        train, _ = tiny_data
        teacher = fresh_model()
        student = init_student_from_teacher(teacher)
        apply_stage(student, default_schedule(), 0)
        cfg = KTConfig(lr=1e-3, lambda3=1.0, batch_size=2, seed=0)
        opt = OptimizerState(lr=1e-3)
        batch = (train.images[:2], train.gts[:2])
        first = kt_train_step(teacher, student, batch, cfg, opt)
        last = first
        for _ in range(199):
            last = kt_train_step(teacher, student, batch, cfg, opt)
        assert last.l2_sum < first.l2_sum

    def test_lambda3_zero_matches_plain_finetune_bitwise(self, tiny_data):
        train, _ = tiny_data
        teacher = fresh_model()
        cfg = KTConfig(lr=1e-3, lambda3=0.0, batch_size=2, seed=0)
        batch = (train.images[:2], train.gts[:2])

        s1 = init_student_from_teacher(teacher)
        apply_stage(s1, default_schedule(), 0)
        o1 = OptimizerState(lr=1e-3)
        for _ in range(10):
            kt_train_step(teacher, s1, batch, cfg, o1)

        s2 = init_student_from_teacher(teacher)
        apply_stage(s2, default_schedule(), 0)
        o2 = OptimizerState(lr=1e-3)
        for _ in range(10):
            bwn_finetune_step(s2, batch, cfg, o2)

        assert params_hash(s1) == params_hash(s2)

    def test_upstream_layers_receive_transfer_gradient(self, tiny_data):
        # conv1 stays full precision; its update must change when the
        # feature-matching path turns on
        train, _ = tiny_data
        teacher = fresh_model()
        batch = (train.images[:2], train.gts[:2])
        students = []
        for lam3 in (0.0, 5.0):
            s = init_student_from_teacher(teacher)
            apply_stage(s, default_schedule(), 0)
            cfg = KTConfig(lr=1e-3, lambda3=lam3, batch_size=2, seed=0)
            kt_train_step(teacher, s, batch, cfg, OptimizerState(lr=1e-3))
            students.append(s.params["conv1"]["weight"].copy())
        assert not np.array_equal(students[0], students[1])


class TestCurriculum:
    @pytest.fixture(scope="class")
    def trained_teacher(self, tiny_data):
        train, val = tiny_data
        model = fresh_model()
        cfg = KTConfig(lr=1e-3, batch_size=8, epochs=2, seed=0)
        model, _ = train_teacher(model, train, cfg, val=val)
        return model

    def test_stage_mode_boundaries(self, tiny_data, trained_teacher):
        train, val = tiny_data
        from bwnkit.network import default_schedule
        sched = default_schedule(1, 1, 1)
        cfg = KTConfig(lr=1e-3, batch_size=8, seed=0)
        student, rows = run_curriculum(trained_teacher, train, val, sched, cfg,
                                       mode="stage")
        assert [r.stage for r in rows] == ["M0", "M1", "M2"]
        assert len(rows) == 3
        assert student.binarized_layers() == \
            ["conv2", "conv3", "conv4", "conv5", "conv6", "conv7", "conv8"]
        assert all(r.l2_sum == 0.0 for r in rows)

    def test_nonstage_mode(self, tiny_data, trained_teacher):
        train, val = tiny_data
        sched = default_schedule(1, 1, 1)
        cfg = KTConfig(lr=1e-3, batch_size=8, seed=0)
        student, rows = run_curriculum(trained_teacher, train, val, sched, cfg,
                                       mode="nonstage")
        assert [r.stage for r in rows] == ["M2", "M2", "M2"]
        assert len(student.binarized_layers()) == 7

    def test_kt_mode(self, tiny_data, trained_teacher):
        train, val = tiny_data
        sched = default_schedule(1, 1, 1)
        cfg = KTConfig(lr=1e-3, batch_size=8, seed=0)
        student, rows = run_curriculum(trained_teacher, train, val, sched, cfg,
                                       mode="kt")
        assert [r.stage for r in rows] == ["M0", "M2-kt", "M2-kt"]
        assert len(student.binarized_layers()) == 7
        assert rows[0].l2_sum == 0.0
        assert rows[1].l2_sum > 0.0

    def test_epoch_log_length(self, tiny_data, trained_teacher):
        train, val = tiny_data
        sched = default_schedule(2, 1, 1)
        cfg = KTConfig(lr=1e-3, batch_size=8, seed=0)
        for mode in ("stage", "nonstage", "kt"):
            _, rows = run_curriculum(trained_teacher, train, val, sched, cfg,
                                     mode=mode)
            assert len(rows) == 4
            assert [r.epoch for r in rows] == [0, 1, 2, 3]

    def test_invalid_mode(self, tiny_data, trained_teacher):
        train, val = tiny_data
        with pytest.raises(ValueError):
            run_curriculum(trained_teacher, train, val, default_schedule(1, 1, 1),
                           KTConfig(), mode="bogus")

    def test_csv_schema(self, tiny_data, trained_teacher):
        train, val = tiny_data
        sched = default_schedule(1, 1, 1)
        cfg = KTConfig(lr=1e-3, batch_size=8, seed=0)
        _, rows = run_curriculum(trained_teacher, train, val, sched, cfg,
                                 mode="stage")
        csv = rows_to_csv(rows)
        header = csv.splitlines()[0]
        assert header == "epoch,stage,l_cls,l_loc,l2_sum,total,val_mAP"
        assert len(csv.splitlines()) == len(rows) + 1


class TestEvaluate:
    def test_range_and_shape(self, tiny_data):
        _, val = tiny_data
        model = fresh_model()
        m, per_class = evaluate(model, val)
        assert 0.0 <= m <= 1.0
        assert len(per_class) == 3

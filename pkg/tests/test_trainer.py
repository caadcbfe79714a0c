import numpy as np
import pytest

from lrds.data import BlobSpec, Dataset, circle_centers, gen_blobs
from lrds.errors import InvalidArgument, NumericalError
from lrds.influence import SplitPlan, rank_and_split
from lrds.losses import LossSpec
from lrds.model import MLP, ModelSpec
from lrds.numcore import make_rng
from lrds.revision import EtaMode
from lrds.trainer import (DistillConfig, MomentumState, TrainLog, distill, evaluate, lr_schedule,
                          make_combined_batches, prepare_supervision, sgd_step, train_teacher)


@pytest.fixture(scope="module")
def small_data():
    return gen_blobs(BlobSpec(3, 30, circle_centers(3, 2.0), 1.0, 0.1, seed=11))


def test_sgd_step_plain_and_momentum():
    g = np.array([1.0, -2.0])
    p, s = sgd_step(np.zeros(2), g, MomentumState.zeros(2), 0.1, 0.0)
    np.testing.assert_array_equal(p, -0.1 * g)
    p1, s1 = sgd_step(np.zeros(2), g, MomentumState.zeros(2), 1.0, 0.9)
    p2, _ = sgd_step(p1, g, s1, 1.0, 0.9)
    np.testing.assert_allclose(p2, -2.9 * g, rtol=1e-15)
    state = MomentumState(np.array([1.0, 1.0]))
    for k in range(1, 4):
        _, state = sgd_step(np.zeros(2), np.zeros(2), state, 0.1, 0.5)
        np.testing.assert_allclose(state.velocity, 0.5 ** k)
    with pytest.raises(InvalidArgument):
        sgd_step(np.zeros(2), np.zeros(3), MomentumState.zeros(2), 0.1, 0.9)


def test_lr_schedule():
    cfg = DistillConfig(lr0=0.05, lr_decay_epochs=(150, 180, 210), epochs=240)
    assert lr_schedule(0, cfg) == 0.05
    assert lr_schedule(200, cfg) == pytest.approx(0.0005, rel=1e-12)
    assert lr_schedule(240, cfg) == pytest.approx(0.00005, rel=1e-12)
    rates = [lr_schedule(e, cfg) for e in range(240)]
    assert all(a >= b for a, b in zip(rates, rates[1:]))


def test_combined_batches_proportional():
    rng = make_rng(0)
    batches = make_combined_batches([0, 1, 2, 3], [4], 5, rng)
    assert len(batches) == 1
    idx, mask = batches[0]
    assert int(mask.sum()) == 4 and sorted(idx.tolist()) == [0, 1, 2, 3, 4]
    assert sorted(idx[~mask].tolist()) == [4]
    for idx, mask in make_combined_batches(np.arange(7), [], 3, rng):
        assert mask.all()
    with pytest.raises(InvalidArgument):
        make_combined_batches([], [], 3, rng)


def test_combined_batches_cover_each_sample_once():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(1, 80))
        perm = rng.permutation(n)
        k = int(rng.integers(0, n + 1))
        bs = int(rng.integers(1, 20))
        batches = make_combined_batches(perm[:k], perm[k:], bs, make_rng(int(rng.integers(100))))
        seen = np.concatenate([b[0] for b in batches])
        assert sorted(seen.tolist()) == list(range(n))
        assert all(0 < len(b[0]) <= bs for b in batches)
        teacher_side = np.concatenate([b[0][b[1]] for b in batches])
        assert set(teacher_side.tolist()) == set(perm[:k].tolist())


def test_train_teacher_zero_epochs_and_determinism(small_data):
    spec = ModelSpec((2, 6, 3), seed=4)
    from lrds.model import init_model
    init = init_model(spec)
    t0 = train_teacher(spec, small_data, DistillConfig(epochs=0))
    assert t0.flat_params().tobytes() == init.flat_params().tobytes()
    cfg = DistillConfig(epochs=3, batch_size=8, seed=5)
    a = train_teacher(spec, small_data, cfg)
    b = train_teacher(spec, small_data, cfg)
    assert a.flat_params().tobytes() == b.flat_params().tobytes()
    c = train_teacher(spec, small_data, DistillConfig(epochs=3, batch_size=8, seed=6))
    assert c.flat_params().tobytes() != a.flat_params().tobytes()


def test_train_teacher_checks_dims(small_data):
    with pytest.raises(InvalidArgument):
        train_teacher(ModelSpec((2, 4)), small_data, DistillConfig(epochs=1))


def test_reduction_to_ce_training(small_data):
    spec = ModelSpec((2, 5, 3), seed=9)
    loss = LossSpec(kind="lrds", lambda1=0.0, lambda2=0.0)
    cfg = DistillConfig(loss=loss, epochs=4, batch_size=7, seed=2, lr_decay_epochs=(2,))
    teacher = train_teacher(ModelSpec((2, 8, 3), seed=1), small_data, DistillConfig(epochs=2, seed=3))
    plan = rank_and_split(np.zeros(len(small_data)), 0.0)
    steps_ce, steps_kd = [], []
    train_teacher(spec, small_data, cfg, callback=lambda **kw: steps_ce.append(kw["model"].flat_params()))
    distill(teacher, spec, small_data, plan, cfg,
            callback=lambda **kw: steps_kd.append(kw["model"].flat_params()))
    assert len(steps_ce) == len(steps_kd) > 0
    assert all(a.tobytes() == b.tobytes() for a, b in zip(steps_ce, steps_kd))


def test_supervision_roles(small_data):
    teacher = train_teacher(ModelSpec((2, 8, 3), seed=1), small_data, DistillConfig(epochs=3, seed=3))
    plan = rank_and_split(np.arange(len(small_data), dtype=float), 0.5)
    sup = prepare_supervision(teacher, small_data, plan, DistillConfig())
    dt = set(plan.dt_indices.tolist())
    assert set(sup.right.tolist()) | set(sup.wrong.tolist()) == dt
    pred = np.argmax(sup.teacher_logits, axis=1)
    assert all(pred[i] != small_data.labels[i] for i in sup.wrong)
    for i in sup.wrong:
        assert np.argmax(sup.soft_targets[i]) == small_data.labels[i]
    off = prepare_supervision(teacher, small_data, plan, DistillConfig(revise=False))
    assert off.wrong.size == 0 and set(off.right.tolist()) == dt


def test_distill_logs_and_rejects_mismatch(small_data):
    teacher = train_teacher(ModelSpec((2, 8, 3), seed=1), small_data, DistillConfig(epochs=2, seed=3))
    plan = rank_and_split(np.arange(len(small_data), dtype=float), 0.8)
    cfg = DistillConfig(epochs=3, batch_size=16, eta_mode=EtaMode("teacher_max_prob"))
    student, log = distill(teacher, ModelSpec((2, 4, 3)), small_data, plan, cfg, test=small_data)
    assert len(log) == 3
    for rec in log.records:
        assert all(np.isfinite(v) for k, v in rec.items() if k != "test_acc")
        assert 0.0 <= rec["test_acc"] <= 1.0
    with pytest.raises(InvalidArgument):
        distill(teacher, ModelSpec((2, 4, 4)), small_data, plan, cfg)


def test_trainlog_csv(tmp_path):
    log = TrainLog()
    log.append(epoch=0, lr=0.1, loss_total=1.0, loss_ce_ds=0.5, loss_ce_right=0.25, loss_distill_right=0.0,
               loss_mse_wrong=0.25, test_acc=None)
    log.write_csv(tmp_path / "log.csv", "# config_hash=x\n")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "# config_hash=x"
    assert lines[1] == "epoch,lr,loss_total,loss_ce_ds,loss_ce_right,loss_distill_right,loss_mse_wrong,test_acc"
    assert lines[2] == "0,0.1,1.0,0.5,0.25,0.0,0.25,"


def test_divergence_raises(small_data):
    cfg = DistillConfig(epochs=5, lr0=1e300, momentum=0.0, batch_size=90)
    with pytest.raises(NumericalError, match="epoch"):
        train_teacher(ModelSpec((2, 4, 3), init_scale=1.0), small_data, cfg)


def test_evaluate():
    data = Dataset(np.eye(4), [0, 1, 2, 3], 4)
    const = MLP(ModelSpec((4, 4)), [np.zeros((4, 4))], [np.zeros(4)])
    assert evaluate(const, data) == 0.25
    perfect = MLP(ModelSpec((4, 4)), [np.eye(4)], [np.zeros(4)])
    assert evaluate(perfect, data) == 1.0
    assert evaluate(perfect, data.subset([3, 1, 0, 2])) == 1.0
    with pytest.raises(InvalidArgument):
        evaluate(perfect, Dataset(np.ones((2, 3)), [0, 1], 4))

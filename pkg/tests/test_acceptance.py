"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""

import glob
import json
import time

import numpy as np
import pytest
from scipy.stats import spearmanr

from lrds.data import BlobSpec, Dataset, circle_centers, gen_blobs, round_half_up
from lrds.harness import main, parse_config, run_ablation, write_summary_csv
from lrds.influence import (InfluenceConfig, InverseHessian, inverse_hvp, param_influence, rank_and_split,
                            read_split_json, score_dataset)
from lrds.losses import Batch, LossSpec, vanilla_kd_loss
from lrds.model import MLP, MeanModel, ModelSpec, exact_hessian, hvp, init_model
from lrds.numcore import argmax
from lrds.revision import EtaMode, revise_label
from lrds.trainer import DistillConfig, distill, evaluate, newton_fit, train_teacher

from .conftest import fd_gradient, max_rel_error, record_criterion

DESK_DATASET = {"source": "blobs", "class_count": 3, "samples_per_class": 200, "test_samples_per_class": 100,
                "radius": 2.0, "spread": 1.0, "label_noise_rate": 0.05}


def desk_config(**distill):
    raw = {"seed": 0, "dataset": DESK_DATASET, "teacher": {"layer_dims": [2, 64, 64, 3]},
           "student": {"layer_dims": [2, 8, 3]}, "distill": distill,
           "influence": {"max_exact_params": 5000}}
    return raw


def test_criterion_1_worked_example():
    r = revise_label([0.1, 0.1, 0.5, 0.3], 3, EtaMode("fixed", 0.9))
    err = max(abs(r.beta - 0.75), float(np.max(np.abs(r.p - [0.075, 0.075, 0.375, 0.475]))))
    ok = record_criterion(1, err <= 1e-9, f"beta={r.beta!r}, max error {err:.1e}")
    assert ok


def test_criterion_2_argmax_correction():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    fixed = order_kept = sums_ok = 0
    n = 10_000
    for _ in range(n):
        c = int(rng.integers(2, 11))
        p = rng.dirichlet(np.ones(c))
        top = argmax(p)
        target = int(rng.choice([k for k in range(c) if k != top]))
        r = revise_label(p, target, EtaMode("fixed", float(rng.uniform(0.01, 0.99))))
        fixed += argmax(r.p) == target
        sums_ok += abs(r.p.sum() - 1.0) <= 1e-9
        others = [k for k in range(c) if k != target]
        order_kept += np.array_equal(np.argsort(p[others], kind="stable"), np.argsort(r.p[others], kind="stable"))
    elapsed = time.perf_counter() - start
    ok = fixed == n and sums_ok == n and order_kept == n and elapsed < 5
    record_criterion(2, ok, f"argmax {fixed}/{n}, sums {sums_ok}/{n}, order {order_kept}/{n}, {elapsed:.1f}s")
    assert ok


def test_criterion_3_gradient_fidelity():
    rng = np.random.default_rng(3)
    start = time.perf_counter()
    kinds = ["ce", "vanilla_kd", "lrds", "kl_distill", "mse_logits", "mse_probs"]
    worst = 0.0
    for i in range(20):
        while True:
            dims = tuple(int(v) for v in rng.integers(2, 6, size=int(rng.integers(2, 5))))
            spec = ModelSpec(dims, seed=i)
            if spec.n_params <= 300:
                break
        model = init_model(spec).with_params(rng.normal(size=spec.n_params))
        n, c = 7, dims[-1]
        role = rng.integers(0, 3, size=n)
        soft = rng.dirichlet(np.ones(c), size=n)
        batch = Batch(rng.normal(size=(n, dims[0])), rng.integers(c, size=n), rng.normal(size=(n, c)) * 2,
                      soft, role)
        loss = LossSpec(kind=kinds[i % len(kinds)], tau=float(rng.uniform(1, 5)),
                        lambda1=float(rng.uniform(0, 2)), lambda2=float(rng.uniform(0, 2)),
                        right_part_loss="kl_distill" if i % 3 else "mse_logits")
        _, g = model.loss_and_grad(batch, loss)
        # fourth-order stencil: roundoff stays well under the 1e-6 floor of the metric
        num = fd_gradient(lambda t: model.with_params(t).loss_and_grad(batch, loss)[0], model.flat_params(),
                          h=1e-4, points=5)
        worst = max(worst, max_rel_error(g, num))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-4 and elapsed < 30
    record_criterion(3, ok, f"max relative error {worst:.2e} over 20 models, {elapsed:.1f}s")
    assert ok


def test_criterion_4_hessian_machinery():
    rng = np.random.default_rng(4)
    start = time.perf_counter()
    worst_hvp = 0.0
    for dims in [(3, 6, 3), (4, 8, 5, 3), (2, 10, 10, 4)]:
        spec = ModelSpec(dims, seed=1)
        assert spec.n_params <= 200
        model = init_model(spec).with_params(0.5 * rng.normal(size=spec.n_params))
        batch = Batch(rng.normal(size=(15, dims[0])), rng.integers(dims[-1], size=15))
        loss = LossSpec(kind="ce")
        H = exact_hessian(model, batch, loss)
        for _ in range(3):
            v = rng.normal(size=spec.n_params)
            worst_hvp = max(worst_hvp, float(np.max(np.abs(hvp(model, batch, v, loss) - H @ v))))
    x = rng.normal(size=(80, 6))
    y = np.argmax(x[:, :3] + 0.5 * rng.normal(size=(80, 3)), axis=1)
    batch = Batch(x, y)
    logistic = newton_fit(init_model(ModelSpec((6, 3), seed=2)), batch, LossSpec(kind="ce", l2=0.01), tol=1e-9)
    worst_cg = 0.0
    for _ in range(3):
        v = rng.normal(size=logistic.n_params)
        u_exact = inverse_hvp(logistic, batch, v, InfluenceConfig(solver="exact", l2=0.01))
        u_cg = inverse_hvp(logistic, batch, v, InfluenceConfig(solver="conjugate_gradient", l2=0.01))
        worst_cg = max(worst_cg, float(np.max(np.abs(u_exact - u_cg))))
    elapsed = time.perf_counter() - start
    ok = worst_hvp < 1e-5 and worst_cg < 1e-4 and elapsed < 30
    record_criterion(4, ok, f"hvp diff {worst_hvp:.1e}, exact vs CG {worst_cg:.1e}, {elapsed:.1f}s")
    assert ok


def test_criterion_5_influence_vs_leave_one_out():
    start = time.perf_counter()
    data = gen_blobs(BlobSpec(3, 14, circle_centers(3, 1.0), 1.0, 0.0, seed=5)).subset(range(40))
    batch = Batch(data.features, data.labels)
    l2 = 1e-2
    fit_loss = LossSpec(kind="ce", l2=l2)
    theta = newton_fit(init_model(ModelSpec((2, 3), seed=0)), batch, fit_loss, tol=1e-10)
    grad_norm = float(np.linalg.norm(theta.loss_and_grad(batch, fit_loss)[1]))
    report = score_dataset(theta, batch, InfluenceConfig(scalarization="self_influence", l2=l2))
    sample_loss = LossSpec(kind="ce")
    deltas = []
    for i in range(len(data)):
        keep = [j for j in range(len(data)) if j != i]
        loo = newton_fit(theta, batch.subset(keep), fit_loss, tol=1e-10)
        one = batch.subset([i])
        deltas.append(loo.loss_and_grad(one, sample_loss)[0] - theta.loss_and_grad(one, sample_loss)[0])
    rho = float(spearmanr(report.scores, deltas).statistic)
    elapsed = time.perf_counter() - start
    ok = grad_norm < 1e-8 and rho >= 0.8 and elapsed < 120
    record_criterion(5, ok, f"spearman {rho:.4f}, fit grad norm {grad_norm:.1e}, {elapsed:.1f}s")
    assert ok


def test_criterion_6_closed_form_influence():
    data = Batch(np.array([[1.0], [2.0], [3.0]]), [0, 0, 0])
    theta = MeanModel.fit(data.x)
    cfg = InfluenceConfig(damping=0.0)
    got = [float(param_influence(theta, data, ([x], 0), cfg)[0]) for x in (1.0, 2.0, 3.0)]
    err = float(np.max(np.abs(np.array(got) - [-1.0, 0.0, 1.0])))
    ok = record_criterion(6, err <= 1e-8, f"influences {got}, max error {err:.1e}")
    assert ok


def _perfect_teacher_data():
    centers = circle_centers(3, 4.0)
    data = gen_blobs(BlobSpec(3, 30, centers, 0.4, 0.0, seed=7))
    # nearest-centroid linear classifier: logits_k = 2 c_k.x - |c_k|^2
    teacher = MLP(ModelSpec((2, 3)), [2 * centers], [-np.sum(centers ** 2, axis=1)])
    return data, teacher


def test_criterion_7_reductions():
    start = time.perf_counter()
    data = gen_blobs(BlobSpec(3, 30, circle_centers(3, 2.0), 1.0, 0.1, seed=12))
    spec = ModelSpec((2, 6, 3), seed=13)
    cfg = DistillConfig(loss=LossSpec(kind="lrds", lambda1=0.0, lambda2=0.0), epochs=6, batch_size=16,
                        lr_decay_epochs=(3, 5), seed=14)
    teacher = train_teacher(ModelSpec((2, 16, 3), seed=15), data, DistillConfig(epochs=5, seed=16))
    ce_steps, kd_steps = [], []
    final_ce = train_teacher(spec, data, cfg, callback=lambda **kw: ce_steps.append(kw["model"].flat_params()))
    final_kd, _ = distill(teacher, spec, data, rank_and_split(np.zeros(len(data)), 0.0), cfg,
                          callback=lambda **kw: kd_steps.append(kw["model"].flat_params()))
    ce_steps.append(final_ce.flat_params())
    kd_steps.append(final_kd.flat_params())
    identical = len(ce_steps) == len(kd_steps) and all(a.tobytes() == b.tobytes()
                                                       for a, b in zip(ce_steps, kd_steps))

    pdata, perfect = _perfect_teacher_data()
    assert evaluate(perfect, pdata) == 1.0
    loss = LossSpec(kind="lrds", tau=4.0, lambda1=1.0, lambda2=1.0, right_part_loss="kl_distill")
    kcfg = DistillConfig(loss=loss, epochs=5, batch_size=16, lr_decay_epochs=(3,), seed=17)
    t_logits = perfect.forward(pdata.features)
    worst = [0.0]

    def compare(indices, loss, logits, **_):
        ref = np.mean([vanilla_kd_loss(logits[k], t_logits[i], pdata.labels[i], kcfg.loss)
                       for k, i in enumerate(indices)])
        worst[0] = max(worst[0], abs(loss - ref))

    distill(perfect, ModelSpec((2, 5, 3), seed=18), pdata, rank_and_split(np.zeros(len(pdata)), 1.0), kcfg,
            callback=compare)
    elapsed = time.perf_counter() - start
    ok = identical and worst[0] <= 1e-12 and elapsed < 60
    record_criterion(7, ok, f"(a) {len(ce_steps)} parameter states bit-identical={identical}; "
                            f"(b) max batch-loss gap {worst[0]:.1e}; {elapsed:.1f}s")
    assert ok


@pytest.mark.slow
def test_criterion_8_desk_scale_end_to_end(tmp_path):
    start = time.perf_counter()
    cfg = parse_config(desk_config(), tmp_path)
    doc = {"parameter": "method", "values": ["ce", "kd", "lr", "ds", "lrds"], "seeds": [0, 1, 2, 3, 4],
           "share_teacher": False}
    rows = run_ablation(cfg, doc, tmp_path)
    write_summary_csv(tmp_path / "ablation_summary.csv", rows, cfg.header)
    summary = {r["value"]: r for r in rows if r["row_type"] == "summary"}
    names = {"ce": "CE-only", "kd": "vanilla KD", "lr": "LR only", "ds": "DS only", "lrds": "LR+DS"}
    table = ["    method comparison, mean +- std test accuracy over 5 seeds"]
    for key, label in names.items():
        r = summary[key]
        table.append(f"    {label:<11} {r['test_acc']:.4f} +- {r['test_acc_std']:.4f}")
    assert not any(r["error"] for r in rows)
    lrds, ce, kd = summary["lrds"]["test_acc"], summary["ce"]["test_acc"], summary["kd"]["test_acc"]
    elapsed = time.perf_counter() - start
    beats_ce = lrds >= ce
    near_kd = lrds >= kd - 0.005
    ok = beats_ce and near_kd and elapsed < 600
    record_criterion(8, ok, f"LR+DS {lrds:.4f} vs CE-only {ce:.4f} ({'ok' if beats_ce else 'below'}), "
                            f"vs vanilla KD {kd:.4f} - 0.005 ({'ok' if near_kd else 'below'}); {elapsed:.0f}s", table)
    assert ok


@pytest.mark.slow
def test_criterion_9_split_grid(tmp_path):
    start = time.perf_counter()
    config = tmp_path / "exp.json"
    config.write_text(json.dumps(desk_config()))
    grid = tmp_path / "grid.json"
    grid.write_text(json.dumps({"grid": {"pct": [0.2, 0.5, 0.8],
                                         "order": ["highest_first", "lowest_first", "random"]},
                                "seeds": [0]}))
    code = main(["ablate", "--config", str(config), "--ablation", str(grid), "--out", str(tmp_path / "out")])
    splits = sorted(glob.glob(str(tmp_path / "out/runs/*/seed_0/split.json")))
    n = 3 * DESK_DATASET["samples_per_class"]
    cells, counts_ok = set(), True
    for path in splits:
        plan = read_split_json(path)
        cells.add((plan.pct, plan.order))
        counts_ok &= len(plan.dt_indices) == round_half_up(plan.pct * n)
        counts_ok &= sorted(np.concatenate([plan.dt_indices, plan.ds_indices]).tolist()) == list(range(n))
    lines = (tmp_path / "out/ablation_summary.csv").read_text().splitlines()
    n_summary = sum(line.startswith("summary,") for line in lines)
    elapsed = time.perf_counter() - start
    ok = code == 0 and len(cells) == 9 and len(splits) == 9 and n_summary == 9 and counts_ok and elapsed < 900
    record_criterion(9, ok, f"{len(cells)} grid cells, |D^t| counts correct={counts_ok}, {elapsed:.0f}s")
    assert ok

"""Acceptance criteria 1-8, each reported as one CRITERION line.

Run alone with ``pytest tests/test_acceptance.py -s``; the lines are also
repeated in the pytest terminal summary.
"""

import math
import statistics
import time

import numpy as np

from ccl_fsod import bounds, counterfactual as cf, knowledge, toymodel, trainer
from ccl_fsod.bank import PrototypeBank
from ccl_fsod.bounds import BoundInputs
from ccl_fsod.cli import main
from ccl_fsod.knowledge import AttributeLabelVector, CategoryEmbeddingSet
from ccl_fsod.losses import ccl_grad, ccl_loss, ccl_loss_and_grad
from ccl_fsod.trainer import TrainConfig
from oracles import (
    central_difference,
    clamp01,
    gradient_relative_error,
    lemma1_terms,
    naive_ccl,
    prop1_terms,
    scalar_cosine,
    theorem1_terms,
    theorem2_terms,
)


def _random_table(rng, C, n_attr):
    bits = rng.integers(0, 2, (C, n_attr))
    for i in range(C):
        if not bits[i].any():
            bits[i, rng.integers(n_attr)] = 1
    return bits


def _ccl_instance(rng, n_max, d, C=5):
    N, M = int(rng.integers(1, n_max + 1)), int(rng.integers(1, n_max + 1))
    y_p = rng.integers(0, C, M)
    y_f = np.where(rng.random(N) < 0.8, y_p[rng.integers(0, M, N)], rng.integers(0, C, N))
    Z = np.triu(rng.random((C, C)), 1)
    return rng.normal(size=(N, d)), y_f, rng.normal(size=(M, d)), y_p, Z + Z.T + np.eye(C)


def test_criterion_1_knowledge_matrices(report):
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    invariant_fail = worst = 0.0
    for _ in range(200):
        C = int(rng.integers(2, 9))
        bits = _random_table(rng, C, int(rng.integers(3, 10)))
        labels = {i: AttributeLabelVector(i, bits[i]) for i in range(C)}
        n_base = int(rng.integers(1, C + 1))
        sets = {i: CategoryEmbeddingSet(i, rng.normal(size=(6, 4)) + rng.normal(size=4)) for i in range(n_base)}
        K = int(rng.integers(1, 4))
        for case in (2, 3):
            z = knowledge.build_knowledge_matrix(case, C, base_set=range(n_base), embedding_sets=sets,
                                                 labels=labels, K=K, seed=7).values
            ok = np.array_equal(z, z.T) and np.all(np.diag(z) == 1.0) and np.all((z >= 0) & (z <= 1))
            invariant_fail += not ok
            centers = {c: knowledge.cluster_category_embeddings(sets[c], K, 7) for c in sets} if case == 3 else {}
            for i in range(C):
                for j in range(i + 1, C):
                    if case == 3 and i < n_base and j < n_base:
                        vals = [scalar_cosine(a, b) for a in centers[i] for b in centers[j]]
                        expected = clamp01(sum(vals) / len(vals))
                    else:
                        expected = clamp01(scalar_cosine(bits[i], bits[j]))
                    worst = max(worst, abs(z[i, j] - expected))
    elapsed = time.perf_counter() - start
    ok = invariant_fail == 0 and worst <= 1e-12 and elapsed < 5.0
    report(1, ok, f"invariant failures={int(invariant_fail)} max entry error={worst:.2e} runtime={elapsed:.2f}s")
    assert ok


def test_criterion_2_ccl_oracle(report):
    rng = np.random.default_rng(202)
    worst, reduction_exact, reduction_err = 0.0, True, 0.0
    for _ in range(500):
        F, y_f, P, y_p, zeta = _ccl_instance(rng, 16, 128)
        worst = max(worst, abs(ccl_loss(F, y_f, P, y_p, zeta) - naive_ccl(F, y_f, P, y_p, zeta, 0.2)))
        ones = np.ones_like(zeta)
        unweighted = naive_ccl(F, y_f, P, y_p, None, 0.2, use_zeta=False)
        reduction_exact &= naive_ccl(F, y_f, P, y_p, ones, 0.2) == unweighted
        reduction_err = max(reduction_err, abs(ccl_loss(F, y_f, P, y_p, ones) - unweighted))
    ok = worst <= 1e-12 and reduction_exact and reduction_err <= 1e-12
    report(2, ok, f"max |loss - oracle|={worst:.2e} ones-reduction exact={reduction_exact} "
                  f"package vs unweighted={reduction_err:.2e}")
    assert ok


def test_criterion_3_gradients(report):
    rng = np.random.default_rng(303)
    start = time.perf_counter()
    ccl_worst, p_grad_zero = 0.0, True
    for n in range(100):
        F, y_f, P, y_p, zeta = _ccl_instance(rng, 6, 8)
        normalize = n % 2 == 0
        f = lambda: ccl_loss(F, y_f, P, y_p, zeta, 0.2, normalize)
        g = ccl_grad(F, y_f, P, y_p, zeta, 0.2, normalize)
        ccl_worst = max(ccl_worst, gradient_relative_error(g, central_difference(f, F, h=1e-5)))
        p_grad_zero &= bool(np.all(ccl_loss_and_grad(F, y_f, P, y_p, zeta).grad_prototypes == 0))
    model_worst = 0.0
    for n in range(100):
        C = int(rng.integers(2, 5))
        p = toymodel.init_params(C, channels=(2, 3), seed=n)
        for name in ("conv1_b", "conv2_b", "cls_b"):
            getattr(p, name)[:] = rng.normal(0, 0.1, getattr(p, name).shape)
        img = rng.integers(0, 256, (8, 8, 3))
        target = int(rng.integers(C))
        grads = toymodel.backward(p, img, target)
        f = lambda: float(toymodel.forward(p, img).class_scores[0, target])
        for name in ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "cls_w", "cls_b"):
            num = central_difference(f, getattr(p, name), h=1e-5)
            model_worst = max(model_worst, gradient_relative_error(grads[name], num))
    elapsed = time.perf_counter() - start
    ok = ccl_worst < 1e-4 and model_worst < 1e-4 and p_grad_zero and elapsed < 60.0
    report(3, ok, f"ccl rel err={ccl_worst:.2e} model rel err={model_worst:.2e} "
                  f"P-grad zero={p_grad_zero} runtime={elapsed:.1f}s")
    assert ok


def test_criterion_4_bank(report):
    rng = np.random.default_rng(404)
    violations, mean_err = 0, 0.0
    for seq in range(10_000):
        C, k, d = int(rng.integers(1, 4)), int(rng.integers(1, 5)), 2
        bank = PrototypeBank(C, d, k)
        replay = {c: [] for c in range(C)}
        for _ in range(int(rng.integers(0, 25))):
            c, aug = int(rng.integers(C)), bool(rng.random() < 0.3)
            e = rng.normal(size=d)
            bank.push(c, e, is_augmented=aug)
            if not aug:
                replay[c] = (replay[c] + [e])[-2 * k:]
            violations += bank.count(c) > 2 * k
        for c in range(C):
            stored = bank.entries(c)
            violations += len(stored) != len(replay[c]) or not all(
                np.array_equal(a, b) for a, b in zip(stored, replay[c]))
        if seq % 10 == 0:
            got = bank.centers(1)
            for row, c in zip(got.centers, got.labels):
                expected = [math.fsum(e[j] for e in replay[c]) / len(replay[c]) for j in range(d)]
                mean_err = max(mean_err, float(np.max(np.abs(row - expected))))
            violations += sorted(got.labels.tolist()) != [c for c in range(C) if replay[c]]
    ok = violations == 0 and mean_err <= 1e-12
    report(4, ok, f"sequences=10000 violations={violations} centers(1) max error={mean_err:.2e}")
    assert ok


def test_criterion_5_counterfactual(report):
    rng = np.random.default_rng(505)
    argmax_bad = mask_bad = pixel_bad = 0
    for _ in range(1000):
        shape = (int(rng.integers(1, 9)), int(rng.integers(1, 9)))
        A_c = rng.random(shape) * rng.integers(0, 2, shape)
        A_x = np.round(rng.random(shape) * 4) / 4  # ties in the counter map
        out = cf.counterfactual_map(A_c, A_x)
        argmax_bad += int(np.any(out[A_x == A_x.max()] != 0))
        t = float(rng.uniform(0.01, 0.99))
        A = rng.random(shape)
        H = cf.erase_mask(A, t)
        mask_bad += int(not np.array_equal(H, np.where(A >= t, 0, 1)))
        img = rng.integers(0, 256, (*shape, 3)).astype(np.uint8)
        aug = cf.apply_mask(img, H, int(rng.integers(1 << 31))).image
        keep = H.astype(bool)
        pixel_bad += int(aug[keep].tobytes() != img[keep].tobytes())
    cam_worst = 0.0
    for n in range(100):
        C = int(rng.integers(2, 6))
        p = toymodel.init_params(C, channels=(3, 4), seed=n)
        p.conv2_b[:] = rng.normal(0, 0.1, 4)
        p.cls_w[:] = rng.normal(size=p.cls_w.shape)
        img = rng.integers(0, 256, (12, 12, 3))
        c = int(rng.integers(C))
        A = cf.attribution(p, img, c)
        fmap = toymodel.forward(p, img).feature_map[0]
        h, w, k = fmap.shape
        oracle = np.zeros((h, w))
        for i in range(h):
            for j in range(w):
                oracle[i, j] = max(sum(p.cls_w[c, q] / (h * w) * fmap[i, j, q] for q in range(k)), 0.0)
        if oracle.max() == 0:
            cam_worst = max(cam_worst, float(A.max()))
        else:
            cam_worst = max(cam_worst, float(np.max(np.abs(A / A.max() - oracle / oracle.max()))))
    ok = argmax_bad == mask_bad == pixel_bad == 0 and cam_worst <= 1e-6
    report(5, ok, f"argmax nonzero={argmax_bad} mask rule violations={mask_bad} "
                  f"pixel changes={pixel_bad} grad-cam max error={cam_worst:.2e}")
    assert ok


def test_criterion_6_bounds(report):
    start = time.perf_counter()
    grid = {
        "lambda_c": [0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 0.99, 0.2, 0.4, 0.6],
        "gamma_gap": [0.0, 0.01, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 0.3, 0.03],
        "N_n": [1, 5, 10, 50, 100, 500, 1000, 5000, 20, 200],
        "k_e": [1.5, 2, 3, 4, 5, 6, 8, 10, 20, 100],
    }
    base = BoundInputs(lambda_g=0.4, rademacher_novel=0.2, empirical_risk=0.03)
    points = list(bounds.grid_points(base, grid))
    worst = 0.0
    for p in points:
        with_, without = theorem2_terms(p)
        r = bounds.theorem2_compare(p)
        worst = max(worst,
                    abs(bounds.lemma1_bound(p) - lemma1_terms(p)),
                    abs(bounds.theorem1_approx(p) - theorem1_terms(p)),
                    abs(bounds.proposition1_bound(p) - prop1_terms(p)),
                    abs(r.sup_with - with_), abs(r.sup_without - without))
    affine = 0.0
    for p in points[::50]:
        f = [bounds.theorem1_approx(p.replace(lambda_c=lc)) for lc in (0.0, 0.25, 0.5, 0.75)]
        affine = max(affine, abs(f[1] - f[0] - (f[2] - f[1])), abs(f[3] - f[2] - (f[1] - f[0])),
                     abs((f[1] - f[0]) / 0.25 - bounds.theorem1_slope(p)))
    thm2 = bounds.sweep("thm2", BoundInputs(), bounds.DEFAULT_THM2_GRID)
    thm2_ok = len(thm2) == 63 and all(r["holds"] and r["sup_with"] < r["sup_without"] for r in thm2)
    mono_grid = {"gamma_gap": np.linspace(0, 2, 21).tolist(), "rademacher_novel": [0.0, 0.1, 0.5],
                 "N_n": [10, 100, 1000], "delta": [0.01, 0.05]}
    m1 = bounds.monotonicity_check("thm1-lambda_c", BoundInputs(), mono_grid)
    expected_inside = sum(bounds.theorem1_slope(p) > 0 for p in bounds.grid_points(BoundInputs(), mono_grid))
    m2 = bounds.monotonicity_check("prop1-k_e", BoundInputs(), {"lambda_g": [0.0, 0.2, 0.5, 0.9],
                                                                "N_r": [10, 100, 1000]})
    elapsed = time.perf_counter() - start
    ok = (len(points) == 10_000 and worst <= 1e-12 and affine <= 1e-12 and thm2_ok
          and not m1.counterexamples and not m2.counterexamples and m1.inside_condition == expected_inside
          and elapsed < 10.0)
    report(6, ok, f"grid={len(points)} max diff={worst:.2e} affine err={affine:.2e} thm2 holds={thm2_ok} "
                  f"counterexamples={len(m1.counterexamples) + len(m2.counterexamples)} inside={m1.inside_condition}/{m1.points} runtime={elapsed:.2f}s")
    assert ok


def test_criterion_7_end_to_end(report):
    start = time.perf_counter()
    full, baseline = [], []
    for seed in range(5):
        ds = toymodel.generate_dataset(toymodel.DatasetConfig(seed=seed))
        cfg = TrainConfig(knowledge_case=2, seed_data=seed, seed_augment=seed + 1, seed_init=seed + 2)
        params = trainer.train_base(cfg, ds)
        zeta = trainer.toy_knowledge_matrix(cfg, ds)
        _, m_full = trainer.fine_tune(params, cfg, ds, zeta)
        no_ccl = TrainConfig(**{**cfg.to_dict(), "use_ccl": False, "use_counterfactual": False})
        _, m_base = trainer.fine_tune(params, no_ccl, ds, zeta)
        full.append(m_full.novel_accuracy)
        baseline.append(m_base.novel_accuracy)
    elapsed = time.perf_counter() - start
    mf, mb = statistics.fmean(full), statistics.fmean(baseline)
    pooled_sd = math.sqrt((statistics.variance(full) + statistics.variance(baseline)) / 2)
    pooled_se = pooled_sd * math.sqrt(2 / 5)
    not_worse = mf >= mb - pooled_se
    exceeds = mf > mb
    ok = not_worse and exceeds and elapsed < 600.0
    report(7, ok, f"full={mf:.4f} baseline={mb:.4f} pooled SE={pooled_se:.4f} within SE={not_worse} "
                  f"exceeds={exceeds} runtime={elapsed:.0f}s full per seed={[round(v, 3) for v in full]} "
                  f"baseline per seed={[round(v, 3) for v in baseline]}")
    assert ok


def test_criterion_8_determinism(report, tmp_path):
    label_file = tmp_path / "labels.json"
    label_file.write_text('{"a": [1, 1, 0], "b": [0, 1, 1], "c": [1, 0, 1]}')
    grid_file = tmp_path / "grid.json"
    grid_file.write_text('{"k_e": [2, 3], "N_r": [10, 100]}')
    out = tmp_path / "run"
    steps = [
        ["dataset", "--base-per-class", "10", "--test-per-class", "4", "--seed", "5", "--out", str(out / "ds")],
        ["train-base", "--dataset", str(out / "ds"), "--base-epochs", "2", "--seed", "5", "--out", str(out / "base")],
        ["fine-tune", "--dataset", str(out / "ds"), "--params", str(out / "base" / "params"), "--iterations", "20",
         "--epsilon", "0.5", "--seed", "5", "--out", str(out / "ft")],
        ["knowledge", "--case", "2", "--labels", str(label_file), "--out", str(out / "k")],
        ["bounds", "sweep", "--formula", "thm2", "--grid", str(grid_file), "--out", str(out / "b")],
    ]
    snapshots = []
    for _ in range(2):
        for argv in steps:
            assert main(argv) == 0, argv
        snapshots.append({str(p.relative_to(out)): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()})
    first, second = snapshots
    differing = sorted(k for k in first if first[k] != second.get(k))
    ok = first.keys() == second.keys() and len(first) > 10 and not differing
    report(8, ok, f"files compared={len(first)} (metrics, matrices, params, manifests) differing={differing}")
    assert ok

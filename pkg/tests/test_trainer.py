import dataclasses
import math

import numpy as np
import pytest
from scipy.stats import binomtest

from ccl_fsod import knowledge, toymodel, trainer
from ccl_fsod.knowledge import KnowledgeMatrix
from ccl_fsod.trainer import TrainConfig, TrainError


def quick(**kw):
    return TrainConfig(**{"iterations": 15, **kw})


def same_params(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a.as_dict().values(), b.as_dict().values()))


# -- configuration --------------------------------------------------------------


def test_defaults():
    c = TrainConfig()
    assert (c.tau, c.lambda1, c.lambda2, c.lambda3) == (0.2, 1.0, 1.0, 1.0)
    assert (c.epsilon, c.threshold, c.k_e, c.n_k, c.knowledge_case, c.K) == (0.05, 0.8, 3, 1, 3, 5)
    assert c.use_ccl and c.use_knowledge_matrix and c.use_clustering and c.use_counterfactual
    assert not c.use_random_mask_baseline


@pytest.mark.parametrize(
    "kw, match",
    [
        ({"lambda3": -1}, "nonnegative"),
        ({"epsilon": 1.5}, "epsilon"),
        ({"tau": 0}, "tau"),
        ({"threshold": 1.0}, "threshold"),
        ({"stage": "other"}, "stage"),
        ({"knowledge_case": 7}, "knowledge_case"),
        ({"k_shot": 0}, "positive"),
    ],
)
def test_config_validation(kw, match):
    with pytest.raises(TrainError, match=match):
        TrainConfig(**kw)


def test_config_dict_round_trip():
    c = TrainConfig(tau=0.5, channels=(4, 6))
    assert TrainConfig.from_dict(c.to_dict()) == c
    with pytest.raises(TrainError, match="bogus"):
        TrainConfig.from_dict({"bogus": 1})


# -- base training ----------------------------------------------------------------


def test_single_category_base_set_is_learned():
    cfg = toymodel.DatasetConfig(C_base=1, C_novel=1, attribute_table={"a": [1, 0, 0], "b": [0, 1, 1]},
                                 base_per_class=10, test_per_class=2)
    ds = toymodel.generate_dataset(cfg)
    params = trainer.train_base(TrainConfig(base_epochs=2), ds)
    m = trainer.evaluate(params, ds, split="base")
    assert m.base_accuracy >= 0.99


def test_base_training_is_reproducible_and_finite(small_dataset):
    cfg = TrainConfig(base_epochs=2)
    h1, h2 = [], []
    a = trainer.train_base(cfg, small_dataset, h1)
    b = trainer.train_base(cfg, small_dataset, h2)
    assert same_params(a, b)
    assert h1 == h2 and all(math.isfinite(v) for v in h1)
    # novel classes never receive gradient in the base stage
    init = toymodel.init_params(small_dataset.C, cfg.channels, seed=cfg.seed_init)
    assert np.array_equal(a.cls_w[small_dataset.C_base:], init.cls_w[small_dataset.C_base:])


def test_memorized_set_scores_perfectly():
    cfg = toymodel.DatasetConfig(C_base=2, C_novel=0, attribute_table={"a": [1, 0, 0, 0], "b": [0, 0, 1, 1]},
                                 base_per_class=4, test_per_class=1, noise=5, part_dropout=0.0)
    ds = toymodel.generate_dataset(cfg)
    params = trainer.train_base(TrainConfig(base_epochs=30, base_batch=8), ds)
    m = trainer.evaluate(params, ds, split="base")
    assert m.base_accuracy == 1.0


def test_empty_base_split_is_an_error(small_dataset):
    ds = dataclasses.replace(small_dataset, split=np.full(len(small_dataset.split), "test"))
    with pytest.raises(TrainError, match="base split"):
        trainer.train_base(TrainConfig(), ds)


# -- few-shot set and knowledge -------------------------------------------------


def test_few_shot_set(small_dataset):
    X, y = trainer.few_shot_set(small_dataset, 3, np.random.default_rng(0))
    assert np.bincount(y).tolist() == [3] * small_dataset.C
    novel_imgs, novel_labels = small_dataset.subset("novel")
    first = novel_imgs[np.flatnonzero(novel_labels == small_dataset.C_base)[:3]]
    assert np.array_equal(X[y == small_dataset.C_base], first)
    with pytest.raises(TrainError, match="need"):
        trainer.few_shot_set(small_dataset, small_dataset.k_shot + 1, np.random.default_rng(0))


def test_toy_knowledge_matrix(small_dataset, small_params, small_zeta):
    z2 = trainer.toy_knowledge_matrix(TrainConfig(knowledge_case=2), small_dataset)
    assert np.array_equal(z2.values, small_zeta.values)
    z3 = trainer.toy_knowledge_matrix(TrainConfig(knowledge_case=3), small_dataset, small_params)
    nb = small_dataset.C_base
    assert np.array_equal(z3.values[nb:, :], small_zeta.values[nb:, :])
    assert z3.C == small_dataset.C
    with pytest.raises(TrainError, match="word vectors"):
        trainer.toy_knowledge_matrix(TrainConfig(knowledge_case=4), small_dataset)
    with pytest.raises(TrainError, match="parameters"):
        trainer.toy_knowledge_matrix(TrainConfig(knowledge_case=3), small_dataset)


# -- fine-tuning ------------------------------------------------------------------


def test_stream_length_and_records(small_params, small_dataset, small_zeta):
    _, m = trainer.fine_tune(small_params, quick(iterations=7), small_dataset, small_zeta)
    assert [r["iteration"] for r in m.stream] == list(range(7))
    assert all(set(r) >= {"cls", "ccl", "total", "rpn", "reg"} for r in m.stream)
    assert 0 <= m.novel_accuracy <= 1 and 0 <= m.base_accuracy <= 1
    lines = m.to_jsonl().splitlines()
    assert len(lines) == 8 and '"final"' in lines[-1]


def test_disabled_ccl_equals_zero_weight(small_params, small_dataset, small_zeta):
    a, ma = trainer.fine_tune(small_params, quick(use_ccl=False), small_dataset, small_zeta)
    b, mb = trainer.fine_tune(small_params, quick(lambda3=0.0), small_dataset, small_zeta)
    for name in ("conv1_w", "conv2_w", "conv2_b", "cls_w", "cls_b"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
    assert ma.per_class_accuracy == mb.per_class_accuracy
    assert all(r["ccl"] == 0.0 for r in ma.stream)


def test_epsilon_zero_never_augments(small_params, small_dataset, small_zeta):
    _, m = trainer.fine_tune(small_params, quick(epsilon=0.0), small_dataset, small_zeta)
    assert all(r["n_augmented"] == 0 for r in m.stream)


def test_bank_never_receives_augmented_samples(small_params, small_dataset, small_zeta):
    _, m = trainer.fine_tune(small_params, quick(epsilon=0.5), small_dataset, small_zeta)
    assert sum(r["n_augmented"] for r in m.stream) > 0
    assert m.bank_received_augmented == 0


def test_identity_augmentation_matches_no_augmentation(small_params, small_dataset, small_zeta):
    kw = dict(use_ccl=False, threshold=1 - 1e-12)
    a, ma = trainer.fine_tune(small_params, quick(epsilon=1.0, **kw), small_dataset, small_zeta)
    b, mb = trainer.fine_tune(small_params, quick(epsilon=0.0, **kw), small_dataset, small_zeta)
    assert all(r["n_augmented"] == small_dataset.C for r in ma.stream)
    assert same_params(a, b)
    assert [r["cls"] for r in ma.stream] == [r["cls"] for r in mb.stream]
    assert ma.final() == mb.final()


def test_no_knowledge_matrix_equals_explicit_ones(small_params, small_dataset, small_zeta):
    a, ma = trainer.fine_tune(small_params, quick(use_knowledge_matrix=False), small_dataset, small_zeta)
    ones = KnowledgeMatrix.ones(small_dataset.C, small_zeta.category_names)
    b, mb = trainer.fine_tune(small_params, quick(), small_dataset, ones)
    assert same_params(a, b)
    assert ma.to_jsonl() == mb.to_jsonl()


def test_fine_tune_is_deterministic_and_leaves_input_alone(small_params, small_dataset, small_zeta):
    before = small_params.copy()
    a, ma = trainer.fine_tune(small_params, quick(epsilon=0.3), small_dataset, small_zeta)
    b, mb = trainer.fine_tune(small_params, quick(epsilon=0.3), small_dataset, small_zeta)
    assert same_params(a, b) and ma.to_jsonl() == mb.to_jsonl()
    assert same_params(small_params, before)


def test_conv1_frozen_and_conv2_policy(small_params, small_dataset, small_zeta):
    a, _ = trainer.fine_tune(small_params, quick(), small_dataset, small_zeta)
    assert np.array_equal(a.conv1_w, small_params.conv1_w)
    assert not np.array_equal(a.conv2_w, small_params.conv2_w)
    b, _ = trainer.fine_tune(small_params, quick(train_conv2=False), small_dataset, small_zeta)
    assert np.array_equal(b.conv2_w, small_params.conv2_w)


def test_ablation_switches_run(small_params, small_dataset, small_zeta):
    for kw in ({"use_clustering": False}, {"n_k": 2}, {"use_random_mask_baseline": True, "epsilon": 0.5},
               {"normalize_embeddings": False}):
        _, m = trainer.fine_tune(small_params, quick(iterations=5, **kw), small_dataset, small_zeta)
        assert len(m.stream) == 5


def test_zeta_dimension_mismatch(small_params, small_dataset):
    with pytest.raises(TrainError, match="covers 3"):
        trainer.fine_tune(small_params, quick(), small_dataset, KnowledgeMatrix.ones(3))


# -- evaluation ------------------------------------------------------------------


def test_random_init_is_at_chance(small_dataset):
    X, y = small_dataset.subset("test")
    novel = np.flatnonzero(y >= small_dataset.C_base)
    rng = np.random.default_rng(0)
    hits, n = 0, 600
    for seed in range(n):
        i = novel[rng.integers(len(novel))]
        p = toymodel.init_params(small_dataset.C, seed=10_000 + seed)
        hits += int(toymodel.forward(p, X[i]).class_scores[0].argmax() == y[i])
    assert binomtest(hits, n, 1 / small_dataset.C).pvalue > 0.001


def test_separability_matches_loop_oracle(rng):
    Z = rng.normal(size=(7, 4))
    y = np.array([0, 1, 0, 2, 1, 1, 0])
    Zn = Z / np.linalg.norm(Z, axis=1, keepdims=True)
    intra, inter = [], []
    for i in range(7):
        for j in range(7):
            if i == j:
                continue
            (intra if y[i] == y[j] else inter).append(sum(Zn[i, k] * Zn[j, k] for k in range(4)))
    expected = sum(intra) / len(intra) - sum(inter) / len(inter)
    assert trainer.separability_margin(Z, y) == pytest.approx(expected, abs=1e-12)
    assert math.isnan(trainer.separability_margin(Z[:2], [0, 1]))

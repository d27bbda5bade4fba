"""Two-stage training at toy scale: base training, then few-shot fine-tuning
with the contextual contrastive loss, the prototype bank and counterfactual
augmentation.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import toymodel
from .bank import PrototypeBank
from .counterfactual import augment
from .knowledge import CategoryEmbeddingSet, KnowledgeMatrix, build_knowledge_matrix
from .losses import ccl_loss_and_grad, project, project_backward, total_loss


class TrainError(ValueError):
    pass


@dataclass
class TrainConfig:
    stage: str = "finetune"
    k_shot: int = 5
    tau: float = 0.2
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    epsilon: float = 0.05
    threshold: float = 0.8
    k_e: int = 3
    n_k: int = 1
    knowledge_case: int = 3
    K: int = 5
    seed_data: int = 0
    seed_augment: int = 1
    seed_init: int = 2
    lr: float = 0.05
    iterations: int = 300
    base_lr: float = 0.5
    base_epochs: int = 40
    base_batch: int = 32
    channels: tuple = (8, 16)
    train_conv2: bool = True
    normalize_embeddings: bool = True
    use_ccl: bool = True
    use_knowledge_matrix: bool = True
    use_clustering: bool = True
    use_counterfactual: bool = True
    use_random_mask_baseline: bool = False

    def __post_init__(self):
        if self.stage not in ("base", "finetune"):
            raise TrainError(f"stage must be 'base' or 'finetune', got {self.stage!r}")
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise TrainError("loss weights must be nonnegative")
        if not 0.0 <= self.epsilon <= 1.0:
            raise TrainError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if not 0.0 < self.threshold < 1.0:
            raise TrainError(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.knowledge_case not in (1, 2, 3, 4, 5):
            raise TrainError(f"knowledge_case must be 1..5, got {self.knowledge_case}")
        if not self.tau > 0:
            raise TrainError(f"tau must be positive, got {self.tau}")
        if self.k_shot < 1 or self.k_e < 1 or self.n_k < 1 or self.iterations < 0:
            raise TrainError("k_shot, k_e and n_k must be positive; iterations nonnegative")
        self.channels = tuple(self.channels)

    @property
    def lambdas(self) -> tuple:
        return (self.lambda1, self.lambda2, self.lambda3)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise TrainError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)


@dataclass
class RunMetrics:
    stream: list = field(default_factory=list)
    per_class_accuracy: list = field(default_factory=list)
    base_accuracy: float = float("nan")
    novel_accuracy: float = float("nan")
    separability: float = float("nan")
    bank_received_augmented: int = 0

    def final(self) -> dict:
        return {
            "per_class_accuracy": self.per_class_accuracy,
            "base_accuracy": self.base_accuracy,
            "novel_accuracy": self.novel_accuracy,
            "separability": self.separability,
        }

    def to_jsonl(self) -> str:
        lines = [json.dumps(rec, sort_keys=True) for rec in self.stream]
        lines.append(json.dumps({"final": self.final()}, sort_keys=True))
        return "\n".join(lines) + "\n"


def _sgd(params: toymodel.ToyModelParams, grads: dict, lr: float, names) -> None:
    for name in names:
        getattr(params, name)[...] -= lr * grads[name]


def train_base(config: TrainConfig, dataset: toymodel.ToyDataset, history: list | None = None):
    """Plain cross-entropy training on the base split (softmax over base classes)."""
    images, labels = dataset.subset("base")
    if len(images) == 0:
        raise TrainError("dataset has no base split")
    params = toymodel.init_params(dataset.C, config.channels, seed=config.seed_init)
    rng = np.random.default_rng(config.seed_data)
    base = dataset.base_classes
    names = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "cls_w", "cls_b")
    for _ in range(config.base_epochs):
        order = rng.permutation(len(images))
        for start in range(0, len(order), config.base_batch):
            idx = order[start:start + config.base_batch]
            fwd = toymodel.forward(params, images[idx])
            loss, d_scores = toymodel.softmax_cross_entropy(fwd.class_scores, labels[idx], allowed=base)
            if history is not None:
                history.append(loss)
            grads = toymodel.backprop(params, fwd, d_scores)
            _sgd(params, grads, config.base_lr, names)
    return params


def toy_knowledge_matrix(config: TrainConfig, dataset: toymodel.ToyDataset, params=None) -> KnowledgeMatrix:
    """Build zeta for the synthetic task from its own side information.

    Case 2 reads the attribute table. Cases 1 and 3 cluster pooled features
    of ``params`` (base split for base classes, novel shots otherwise).
    Cases 4 and 5 need word vectors, which the toy task does not have.
    """
    case = config.knowledge_case
    labels = dataset.attribute_labels()
    names = tuple(dataset.category_names)
    if case == 2:
        return build_knowledge_matrix(2, dataset.C, labels=labels, category_names=names)
    if case in (1, 3):
        if params is None:
            raise TrainError(f"knowledge case {case} needs base-trained parameters")
        sets = {}
        for split in ("base", "novel"):
            images, y = dataset.subset(split)
            if len(images) == 0:
                continue
            pooled = toymodel.forward(params, images).pooled
            for c in np.unique(y):
                sets[int(c)] = CategoryEmbeddingSet(int(c), pooled[y == c])
        return build_knowledge_matrix(
            case, dataset.C, base_set=dataset.base_classes, embedding_sets=sets, labels=labels,
            K=config.K, seed=config.seed_init, category_names=names,
        )
    raise TrainError(f"knowledge case {case} needs word vectors; pass a matrix file instead")


def few_shot_set(dataset: toymodel.ToyDataset, k: int, rng: np.random.Generator):
    """``k`` training images per class: sampled from the base split for base classes, the novel split otherwise."""
    pool_images, pool_labels = [], []
    base_images, base_labels = dataset.subset("base")
    novel_images, novel_labels = dataset.subset("novel")
    for c in range(dataset.C):
        src_img, src_lab = (base_images, base_labels) if c < dataset.C_base else (novel_images, novel_labels)
        idx = np.flatnonzero(src_lab == c)
        if len(idx) < k:
            raise TrainError(f"class {c} has {len(idx)} training images, need {k}")
        chosen = np.sort(rng.choice(idx, size=k, replace=False)) if c < dataset.C_base else idx[:k]
        pool_images.append(src_img[chosen])
        pool_labels.append(np.full(k, c))
    return np.concatenate(pool_images), np.concatenate(pool_labels)


def fine_tune(params: toymodel.ToyModelParams, config: TrainConfig, dataset: toymodel.ToyDataset, zeta: KnowledgeMatrix):
    """Fine-tune on ``k`` shots per class; returns (params, RunMetrics).

    Per iteration: one image per class is drawn, each is replaced by its
    counterfactual augmentation with probability ``epsilon``, non-augmented
    pooled features enter the bank, prototypes are refreshed, and one SGD
    step is taken on ``lambda1 * cls + lambda3 * ccl``. conv1 stays frozen.
    """
    if zeta.C != dataset.C:
        raise TrainError(f"knowledge matrix covers {zeta.C} classes, dataset has {dataset.C}")
    if not config.use_knowledge_matrix:
        zeta = KnowledgeMatrix.ones(dataset.C, zeta.category_names)
    params = params.copy()
    rng_data = np.random.default_rng(config.seed_data)
    rng_aug = np.random.default_rng(config.seed_augment)
    shots, shot_labels = few_shot_set(dataset, config.k_shot, rng_data)
    bank = PrototypeBank(dataset.C, params.d, config.k_shot)
    metrics = RunMetrics()

    trainable = ["cls_w", "cls_b", "proj_w"] + (["conv2_w", "conv2_b"] if config.train_conv2 else [])
    per_class = [np.flatnonzero(shot_labels == c) for c in range(dataset.C)]
    do_augment = config.use_counterfactual or config.use_random_mask_baseline

    for it in range(config.iterations):
        idx = np.array([p[rng_data.integers(len(p))] for p in per_class])
        batch = shots[idx].copy()
        labels = shot_labels[idx]
        flags = np.zeros(len(idx), dtype=bool)
        draws = rng_aug.random(len(idx))
        if do_augment:
            for b in np.flatnonzero(draws < config.epsilon):
                sample = augment(
                    batch[b], int(labels[b]), params, zeta, config.k_e, config.threshold,
                    rng_aug, random_mask=config.use_random_mask_baseline,
                )
                batch[b] = sample.image
                flags[b] = sample.is_augmented

        fwd = toymodel.forward(params, batch)
        for b in range(len(idx)):
            before = bank.count(int(labels[b]))
            bank.push(int(labels[b]), fwd.pooled[b], is_augmented=bool(flags[b]))
            if flags[b] and bank.count(int(labels[b])) != before:
                metrics.bank_received_augmented += 1

        cls, d_scores = toymodel.softmax_cross_entropy(fwd.class_scores, labels)
        d_scores = config.lambda1 * d_scores
        ccl_value, d_pooled, d_proj, n_inc = 0.0, None, np.zeros_like(params.proj_w), 0
        if config.use_ccl:
            protos = bank.centers(config.n_k, seed=config.seed_data) if config.use_clustering else bank.raw()
            F = project(params.proj_w, fwd.pooled)
            P = project(params.proj_w, protos.centers) if len(protos) else np.empty((0, F.shape[1]))
            res = ccl_loss_and_grad(F, labels, P, protos.labels, zeta, config.tau, config.normalize_embeddings)
            ccl_value, n_inc = res.loss, res.n_included
            if not res.empty:
                d_proj, d_pooled = project_backward(params.proj_w, fwd.pooled, config.lambda3 * res.grad_features)

        grads = toymodel.backprop(params, fwd, d_scores, d_pooled, through_conv=config.train_conv2)
        grads["proj_w"] = d_proj
        breakdown = total_loss(0.0, cls, 0.0, ccl_value, config.lambdas)
        if not math.isfinite(breakdown.total):
            raise TrainError(f"non-finite loss at iteration {it}")
        _sgd(params, grads, config.lr, trainable)

        rec = {"iteration": it, **breakdown.as_dict(), "n_augmented": int(flags.sum()), "ccl_included": n_inc}
        metrics.stream.append(rec)

    final = evaluate(params, dataset)
    metrics.per_class_accuracy = final.per_class_accuracy
    metrics.base_accuracy = final.base_accuracy
    metrics.novel_accuracy = final.novel_accuracy
    metrics.separability = final.separability
    return params, metrics


def accuracy_per_class(params, images, labels, C: int) -> list:
    preds = toymodel.forward(params, images).class_scores.argmax(axis=1)
    out = []
    for c in range(C):
        sel = labels == c
        out.append(float((preds[sel] == c).mean()) if sel.any() else float("nan"))
    return out


def separability_margin(Z, labels) -> float:
    """Mean same-class cosine minus mean different-class cosine over all pairs."""
    Z = np.asarray(Z, dtype=np.float64)
    Z = Z / np.linalg.norm(Z, axis=1, keepdims=True)
    S = Z @ Z.T
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    off = ~np.eye(len(Z), dtype=bool)
    intra = S[same & off]
    inter = S[~same]
    if intra.size == 0 or inter.size == 0:
        return float("nan")
    return float(intra.mean() - inter.mean())


def evaluate(params, dataset: toymodel.ToyDataset, split: str = "test") -> RunMetrics:
    images, labels = dataset.subset(split)
    per_class = accuracy_per_class(params, images, labels, dataset.C)
    preds = toymodel.forward(params, images).class_scores.argmax(axis=1)
    base_sel = labels < dataset.C_base
    novel_sel = ~base_sel
    m = RunMetrics()
    m.per_class_accuracy = per_class
    m.base_accuracy = float((preds[base_sel] == labels[base_sel]).mean()) if base_sel.any() else float("nan")
    m.novel_accuracy = float((preds[novel_sel] == labels[novel_sel]).mean()) if novel_sel.any() else float("nan")
    pooled = toymodel.forward(params, images).pooled
    if np.all(np.linalg.norm(pooled @ params.proj_w.T, axis=1) > 0):
        m.separability = separability_margin(project(params.proj_w, pooled), labels)
    return m

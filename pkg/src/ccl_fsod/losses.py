"""Projection head and contrastive objectives.

The contextual contrastive loss compares each proposal embedding with the
class prototypes; negatives are weighted by the knowledge matrix ``zeta``
inside the softmax denominator::

    loss_i = -log( sum_j [y_i == p_j] exp(F_i.P_j / tau)
                   / sum_j exp(zeta[y_i, p_j] F_i.P_j / tau) )

averaged over proposals whose class has at least one prototype. Prototypes
are constants for differentiation.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.special import logsumexp

PROJECTION_DIM = 128
DEFAULT_TAU = 0.2


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class ProjectedEmbedding:
    vector: np.ndarray
    label: int
    is_augmented: bool = False


def _zeta_values(zeta) -> np.ndarray:
    return np.asarray(getattr(zeta, "values", zeta), dtype=np.float64)


def _normalize_rows(X: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise LossError(f"{what} row {int(np.flatnonzero(norms[:, 0] == 0)[0])} has zero norm")
    return X / norms, norms


# -- projection head ---------------------------------------------------------


def project(weights, features) -> np.ndarray:
    """Linear map ``features @ weights.T`` followed by per-row L2 normalization."""
    W = np.asarray(weights, dtype=np.float64)
    X = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if W.shape[1] != X.shape[1]:
        raise LossError(f"weights expect {W.shape[1]} input dims, features have {X.shape[1]}")
    Z, _ = _normalize_rows(X @ W.T, "projection")
    return Z


def project_backward(weights, features, grad_out):
    """Gradients of a scalar through :func:`project`.

    Args:
        grad_out: dL/dZ for the normalized outputs, shape (N, out_dim).

    Returns:
        (dL/dweights, dL/dfeatures)
    """
    W = np.asarray(weights, dtype=np.float64)
    X = np.atleast_2d(np.asarray(features, dtype=np.float64))
    U = X @ W.T
    Z, norms = _normalize_rows(U, "projection")
    G = np.asarray(grad_out, dtype=np.float64)
    # d normalize(u) = (I - z z^T) / |u|
    dU = (G - Z * (G * Z).sum(axis=1, keepdims=True)) / norms
    return dU.T @ X, dU @ W


def project_embeddings(weights, features, labels, is_augmented=None) -> list[ProjectedEmbedding]:
    Z = project(weights, features)
    if is_augmented is None:
        is_augmented = [False] * len(Z)
    return [ProjectedEmbedding(z, int(y), bool(a)) for z, y, a in zip(Z, labels, is_augmented)]


# -- contextual contrastive loss --------------------------------------------


class CCLResult(NamedTuple):
    loss: float
    grad_features: np.ndarray
    grad_prototypes: np.ndarray
    n_included: int
    empty: bool


def ccl_loss_and_grad(F, y_f, P, y_p, zeta, tau: float = DEFAULT_TAU, normalize: bool = True) -> CCLResult:
    """Loss value plus gradient with respect to ``F``.

    ``grad_prototypes`` is identically zero: prototypes are stop-gradient
    inputs. Proposals whose class has no prototype are left out of the
    average; if none remain the loss is 0 and ``empty`` is set.
    """
    if not tau > 0:
        raise LossError(f"tau must be positive, got {tau}")
    F = np.atleast_2d(np.asarray(F, dtype=np.float64))
    P = np.atleast_2d(np.asarray(P, dtype=np.float64)).reshape(-1, F.shape[1])
    y_f = np.asarray(y_f, dtype=np.int64).reshape(-1)
    y_p = np.asarray(y_p, dtype=np.int64).reshape(-1)
    Z = _zeta_values(zeta)
    if len(y_f) != len(F) or len(y_p) != len(P):
        raise LossError("label counts do not match embedding rows")

    grad_F = np.zeros_like(F)
    grad_P = np.zeros_like(P)
    if len(P) == 0:
        warnings.warn("no prototypes available; contrastive loss set to 0", RuntimeWarning, stacklevel=2)
        return CCLResult(0.0, grad_F, grad_P, 0, True)

    pos = y_f[:, None] == y_p[None, :]
    keep = pos.any(axis=1)
    n_inc = int(keep.sum())
    if n_inc == 0:
        warnings.warn("no proposal has a prototype of its class; contrastive loss set to 0", RuntimeWarning, stacklevel=2)
        return CCLResult(0.0, grad_F, grad_P, 0, True)

    if normalize:
        Fn, f_norms = _normalize_rows(F, "F")
        Pn, _ = _normalize_rows(P, "P")
    else:
        Fn, Pn = F, P
    S = Fn[keep] @ Pn.T / tau
    W = Z[np.ix_(y_f[keep], y_p)]
    pos_k = pos[keep]

    pos_logits = np.where(pos_k, S, -np.inf)
    neg_logits = W * S
    lse_pos = logsumexp(pos_logits, axis=1)
    lse_all = logsumexp(neg_logits, axis=1)
    loss = float(np.mean(lse_all - lse_pos))

    # d/dF_i: (sum_j q_ij zeta_ij P_j - sum_j p_ij P_j) / tau, q/p the two softmaxes
    p_pos = np.where(pos_k, np.exp(pos_logits - lse_pos[:, None]), 0.0)
    q_all = np.exp(neg_logits - lse_all[:, None])
    g = ((q_all * W - p_pos) @ Pn) / (tau * n_inc)
    if normalize:
        fk = Fn[keep]
        g = (g - fk * (g * fk).sum(axis=1, keepdims=True)) / f_norms[keep]
    grad_F[keep] = g
    return CCLResult(loss, grad_F, grad_P, n_inc, False)


def ccl_loss(F, y_f, P, y_p, zeta, tau: float = DEFAULT_TAU, normalize: bool = True) -> float:
    return ccl_loss_and_grad(F, y_f, P, y_p, zeta, tau, normalize).loss


def ccl_grad(F, y_f, P, y_p, zeta, tau: float = DEFAULT_TAU, normalize: bool = True) -> np.ndarray:
    return ccl_loss_and_grad(F, y_f, P, y_p, zeta, tau, normalize).grad_features


# -- CPE baseline -------------------------------------------------------------


def cpe_loss(F, y_f, iou, tau: float = DEFAULT_TAU, normalize: bool = True) -> float:
    """Proposal-vs-proposal contrastive loss with IoU weights.

    Proposals whose label occurs only once contribute nothing; the average
    still runs over all ``N`` proposals.
    """
    if not tau > 0:
        raise LossError(f"tau must be positive, got {tau}")
    F = np.atleast_2d(np.asarray(F, dtype=np.float64))
    y = np.asarray(y_f).reshape(-1)
    u = np.asarray(iou, dtype=np.float64).reshape(-1)
    N = len(F)
    if N < 2:
        raise LossError("CPE loss needs at least two proposals")
    if normalize:
        F, _ = _normalize_rows(F, "F")
    S = F @ F.T / tau
    np.fill_diagonal(S, -np.inf)
    log_prob = S - logsumexp(S, axis=1, keepdims=True)
    same = (y[:, None] == y[None, :]) & ~np.eye(N, dtype=bool)
    counts = same.sum(axis=1)
    per = np.where(same, log_prob, 0.0).sum(axis=1)
    contrib = np.where(counts > 0, u * per / np.maximum(counts, 1), 0.0)
    return float(-contrib.sum() / N)


# -- joint objective ----------------------------------------------------------


@dataclass(frozen=True)
class LossBreakdown:
    rpn_loss: float
    cls_loss: float
    reg_loss: float
    ccl_loss: float
    total: float
    lambdas: tuple = field(default=(1.0, 1.0, 1.0))

    def as_dict(self) -> dict:
        return {
            "rpn": self.rpn_loss,
            "cls": self.cls_loss,
            "reg": self.reg_loss,
            "ccl": self.ccl_loss,
            "total": self.total,
        }


def total_loss(rpn=0.0, cls=0.0, reg=0.0, ccl=0.0, lambdas=(1.0, 1.0, 1.0)) -> LossBreakdown:
    parts = {"rpn": rpn, "cls": cls, "reg": reg, "ccl": ccl}
    for name, value in parts.items():
        if not math.isfinite(value):
            raise LossError(f"{name} loss is not finite: {value}")
    l1, l2, l3 = (float(x) for x in lambdas)
    total = float(rpn) + l1 * float(cls) + l2 * float(reg) + l3 * float(ccl)
    return LossBreakdown(float(rpn), float(cls), float(reg), float(ccl), total, (l1, l2, l3))

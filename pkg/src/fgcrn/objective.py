"""Training objective: cross-entropy, the cluster-distance compactness loss,
their weighted combination, and the shared Mahalanobis distance primitive.

Cluster means/covariances are constants for differentiation; gradients flow
only through the sample features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DataError, NumericError
from .net import autodiff as ad
from .net.autodiff import Tensor


@dataclass
class LossConfig:
    lambda_dist: float = 0.1
    d0: float = 1e-12
    eps_reg_rel: float = 1e-3
    eps_reg_abs: float = 1e-6

    def __post_init__(self):
        if self.lambda_dist < 0 or self.d0 < 0:
            raise DataError("lambda_dist and d0 must be nonnegative")
        if self.eps_reg_rel <= 0 or self.eps_reg_abs <= 0:
            raise DataError("covariance regularizer must be positive")


@dataclass
class LossBreakdown:
    L1: float
    L2: float
    L: float
    n_correct: int


def regularizer_eps(sigma: np.ndarray, cfg: LossConfig) -> float:
    """Ridge added to a covariance before factorization."""
    h = sigma.shape[0]
    return max(cfg.eps_reg_rel * float(np.trace(sigma)) / h, cfg.eps_reg_abs)


def regularized_cholesky(sigma: np.ndarray, cfg: LossConfig) -> tuple[np.ndarray, float]:
    """Lower factor L with L L^T = sigma + eps*I."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
        raise DataError(f"covariance must be square, got {sigma.shape}")
    eps = regularizer_eps(sigma, cfg)
    try:
        chol = np.linalg.cholesky(sigma + eps * np.eye(sigma.shape[0]))
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"covariance factorization failed: {exc}") from None
    return chol, eps


def mahalanobis_from_chol(r: np.ndarray, mu: np.ndarray, chol: np.ndarray,
                          d0: float = 0.0) -> np.ndarray:
    """sqrt(max((r-mu)^T (LL^T)^-1 (r-mu), d0)) for one vector or rows of r."""
    r = np.asarray(r, dtype=np.float64)
    single = r.ndim == 1
    diff = (np.atleast_2d(r) - mu[None, :]).T
    z = solve_triangular(chol, diff, lower=True)
    qf = np.maximum((z * z).sum(axis=0), d0)
    d = np.sqrt(qf)
    return float(d[0]) if single else d


def mahalanobis(r: np.ndarray, mu: np.ndarray, sigma: np.ndarray,
                cfg: LossConfig | None = None) -> np.ndarray:
    """Mahalanobis distance with ridge regularization and a distance floor."""
    cfg = cfg or LossConfig()
    chol, _ = regularized_cholesky(sigma, cfg)
    return mahalanobis_from_chol(r, np.asarray(mu, dtype=np.float64), chol, d0=cfg.d0)


def cross_entropy(logits, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood from logits (log-sum-exp stabilized)."""
    logits = ad.as_tensor(logits)
    labels = np.asarray(labels)
    B, k = logits.shape
    if labels.shape != (B,):
        raise DataError(f"labels shape {labels.shape} does not match batch {B}")
    if labels.min() < 0 or labels.max() >= k:
        raise DataError(f"label out of range for {k} classes")
    onehot = np.zeros((B, k))
    onehot[np.arange(B), labels] = 1.0
    logp = ad.log_softmax(logits)
    return -ad.tmean(ad.tsum(logp * onehot, axis=1))


def cross_entropy_from_probs(probs: np.ndarray, labels: np.ndarray) -> float:
    """Oracle-side cross entropy from explicit probabilities."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= probs.shape[1]:
        raise DataError("label out of range")
    return float(-np.mean(np.log(probs[np.arange(len(labels)), labels])))


def distance_loss(features, labels: np.ndarray, predictions: np.ndarray,
                  clusters, cfg: LossConfig) -> tuple[Tensor, int]:
    """Mean floored Mahalanobis distance of correctly classified samples to
    the nearest cluster center of their true class.

    `clusters` is a fitted fine-grained model exposing ``class_clusters`` and
    ``nearest_cluster``. Returns (loss tensor, number of correct samples);
    the loss is 0 when nothing is classified correctly.
    """
    features = ad.as_tensor(features)
    labels = np.asarray(labels)
    predictions = np.asarray(predictions)
    correct = np.nonzero(predictions == labels)[0]
    if len(correct) == 0:
        return Tensor(0.0), 0

    feats_np = features.data
    terms = []
    for c in np.unique(labels[correct]):
        rows = correct[labels[correct] == c]
        if not clusters.has_class(int(c)):
            raise DataError(f"no cluster model for class {int(c)} with correct samples")
        assign, _ = clusters.nearest_cluster(feats_np[rows], int(c))
        stats = clusters.class_clusters(int(c))
        for m in np.unique(assign):
            members = rows[assign == m]
            sub = ad.take_rows(features, members)
            qf = ad.mahalanobis_sq(sub, stats[m].mu, stats[m].chol)
            terms.append(ad.sqrt(ad.maximum_const(qf, cfg.d0)))
    total = ad.tsum(ad.concat(terms, axis=0))
    return total * (1.0 / len(correct)), int(len(correct))


def total_loss(L1, L2, cfg: LossConfig) -> Tensor:
    """L = L1 + lambda * L2."""
    return ad.add(L1, ad.mul(L2, cfg.lambda_dist))

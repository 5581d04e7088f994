"""Reference open-set scoring baselines over the trained model's logits and
features: MSP, MaxLogit, GEN, KL-Match, OpenMax and ViM, with a shared
validation-coverage thresholding protocol.

Every score is oriented so that higher means "more likely known"; samples
scoring below the calibrated threshold are rejected as unknown.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .finegrain import (UNKNOWN, FineGrainConfig, WeibullTail,
                        fit_weibull_tail, rejection_probability)
from .net.layers import softmax_rows

METHODS = ("msp", "maxlogit", "gen", "klmatch", "openmax", "vim")


@dataclass
class BaselineConfig:
    gen_gamma: float = 0.1
    gen_topk: int = 10
    openmax_tail: int = 20
    openmax_revise: int = 10
    vim_dim_divisor: int = 4


@dataclass
class BaselineCalibration:
    method: str
    hyperparams: dict = field(default_factory=dict)
    templates: np.ndarray | None = None          # klmatch: (k, k) mean posteriors
    mavs: np.ndarray | None = None               # openmax: (k, k) mean logits
    tails: list[WeibullTail] | None = None       # openmax: per-class Weibull
    center: np.ndarray | None = None             # vim
    basis: np.ndarray | None = None              # vim: (H, d) orthonormal
    alpha_vim: float | None = None


def vim_residual_norms(features: np.ndarray, center: np.ndarray,
                       basis: np.ndarray) -> np.ndarray:
    """Norm of the feature component outside the principal subspace."""
    centered = features - center[None, :]
    inside = centered @ basis
    residual = centered - inside @ basis.T
    return np.linalg.norm(residual, axis=1)


def calibrate_baseline(method: str, train_logits: np.ndarray,
                       train_features: np.ndarray, train_labels: np.ndarray,
                       cfg: BaselineConfig | None = None) -> BaselineCalibration:
    cfg = cfg or BaselineConfig()
    if method not in METHODS:
        raise DataError(f"unknown baseline method {method!r}")
    if method == "msp":
        return BaselineCalibration(method)
    if method == "maxlogit":
        return BaselineCalibration(method)
    if method == "gen":
        return BaselineCalibration(method, hyperparams={
            "gamma": cfg.gen_gamma, "topk": cfg.gen_topk})

    if len(train_logits) == 0:
        raise DataError(f"method {method!r} needs training outputs to calibrate")
    train_labels = np.asarray(train_labels)
    k = train_logits.shape[1]
    probs = softmax_rows(train_logits)
    predictions = np.argmax(train_logits, axis=1)
    correct = predictions == train_labels

    if method == "klmatch":
        templates = np.zeros((k, k))
        for c in range(k):
            sel = correct & (train_labels == c)
            if not np.any(sel):
                raise DataError(f"no correctly classified samples for class {c}")
            templates[c] = probs[sel].mean(axis=0)
        return BaselineCalibration(method, templates=templates)

    if method == "openmax":
        mavs = np.zeros((k, k))
        tails = []
        fg_cfg = FineGrainConfig(min_tail_count=min(cfg.openmax_tail, 20))
        for c in range(k):
            sel = correct & (train_labels == c)
            if not np.any(sel):
                raise DataError(f"no correctly classified samples for class {c}")
            mavs[c] = train_logits[sel].mean(axis=0)
            dists = np.linalg.norm(train_logits[sel] - mavs[c][None, :], axis=1)
            tails.append(fit_weibull_tail(dists, alpha=1.0, cfg=fg_cfg,
                                          tail_count=min(cfg.openmax_tail, len(dists))))
        return BaselineCalibration(
            method, mavs=mavs, tails=tails,
            hyperparams={"tail": cfg.openmax_tail,
                         "revise": min(k, cfg.openmax_revise)})

    # vim
    if len(train_features) == 0:
        raise DataError("ViM needs training features to calibrate")
    h = train_features.shape[1]
    d = max(1, h // cfg.vim_dim_divisor)
    center = train_features.mean(axis=0)
    centered = train_features - center[None, :]
    cov = centered.T @ centered / len(centered)
    eigvals, eigvecs = np.linalg.eigh(cov)
    basis = eigvecs[:, -d:]
    residuals = vim_residual_norms(train_features, center, basis)
    mean_res = float(residuals.mean())
    alpha = float(train_logits.max(axis=1).mean()) / max(mean_res, 1e-12)
    return BaselineCalibration(method, center=center, basis=basis,
                               alpha_vim=alpha,
                               hyperparams={"subspace_dim": d})


def _kl_rows(template: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """KL(template || p) for every row p."""
    p = np.clip(probs, 1e-12, None)
    t = template[None, :]
    terms = np.where(t > 0, t * (np.log(np.clip(t, 1e-300, None)) - np.log(p)), 0.0)
    return terms.sum(axis=1)


def score_samples(method: str, calibration: BaselineCalibration,
                  logits: np.ndarray, features: np.ndarray | None = None,
                  cfg: BaselineConfig | None = None) -> np.ndarray:
    cfg = cfg or BaselineConfig()
    if calibration.method != method:
        raise DataError(f"calibration is for {calibration.method!r}, not {method!r}")
    logits = np.asarray(logits, dtype=np.float64)

    if method == "msp":
        return softmax_rows(logits).max(axis=1)
    if method == "maxlogit":
        return logits.max(axis=1)
    if method == "gen":
        gamma = calibration.hyperparams.get("gamma", cfg.gen_gamma)
        topk = calibration.hyperparams.get("topk", cfg.gen_topk)
        p = np.sort(softmax_rows(logits), axis=1)[:, ::-1][:, :topk]
        return -np.sum(p ** gamma * (1.0 - p) ** gamma, axis=1)
    if method == "klmatch":
        probs = softmax_rows(logits)
        kls = np.stack([_kl_rows(t, probs) for t in calibration.templates], axis=1)
        return -kls.min(axis=1)
    if method == "openmax":
        probs = softmax_rows(logits)
        k = logits.shape[1]
        revise = calibration.hyperparams.get("revise", min(k, cfg.openmax_revise))
        scores = np.empty(len(logits))
        for i, (lv, pv) in enumerate(zip(logits, probs)):
            ranked = np.argsort(-lv)[:revise]
            unknown_mass = 0.0
            for rank, c in enumerate(ranked):
                dist = float(np.linalg.norm(lv - calibration.mavs[c]))
                q = rejection_probability(dist, calibration.tails[c])
                unknown_mass += pv[c] * ((revise - rank) / revise) * q
            scores[i] = 1.0 - unknown_mass
        return scores
    if method == "vim":
        if features is None:
            raise DataError("ViM scoring needs features")
        res = vim_residual_norms(np.asarray(features, dtype=np.float64),
                                 calibration.center, calibration.basis)
        vlogit = calibration.alpha_vim * res
        ext = np.concatenate([logits, vlogit[:, None]], axis=1)
        return 1.0 - softmax_rows(ext)[:, -1]
    raise DataError(f"unknown baseline method {method!r}")


def threshold_scores(scores_val_known, coverage: float) -> float:
    """Score threshold keeping `coverage` of known validation samples."""
    s = np.sort(np.asarray(scores_val_known, dtype=np.float64))
    if len(s) == 0:
        raise DataError("cannot threshold on an empty validation score set")
    idx = min(max(int(math.floor((1.0 - coverage) * len(s))), 0), len(s) - 1)
    return float(s[idx])


def decide(scores: np.ndarray, logits: np.ndarray, threshold: float) -> np.ndarray:
    """Argmax class when the score clears the threshold, else UNKNOWN."""
    pred = np.argmax(logits, axis=1)
    return np.where(scores >= threshold, pred, UNKNOWN)

"""Per-class fine-grained representation: K-means++ clustering, cluster
statistics, Weibull tail models of Mahalanobis distances, and the open-set
rejection rule built on them.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, NumericError
from .objective import (LossConfig, mahalanobis_from_chol, regularized_cholesky)
from .seeding import rng_from

UNKNOWN = -1


@dataclass
class FineGrainConfig:
    tail_fraction: float = 0.1
    min_tail_count: int = 20
    restarts: int = 4
    max_iter: int = 100
    loss: LossConfig = field(default_factory=LossConfig)


def min_cluster_size(feature_dim: int) -> int:
    """Smallest member count for which a per-cluster covariance is trusted."""
    return math.ceil(feature_dim / 2)


# ---------------------------------------------------------------------------
# K-means++

def d2_weights(points: np.ndarray, centers: list[np.ndarray]) -> np.ndarray:
    """Squared distance of every point to its nearest chosen center."""
    d2 = np.full(len(points), np.inf)
    for c in centers:
        d2 = np.minimum(d2, ((points - c[None, :]) ** 2).sum(axis=1))
    return d2


def kmeanspp_init(points: np.ndarray, k: int, seed) -> np.ndarray:
    """Seeded D^2-weighted center initialization; returns (k, H) centers."""
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if n < k:
        raise DataError(f"cannot place {k} centers on {n} points")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    chosen = [int(rng.integers(n))]
    while len(chosen) < k:
        d2 = d2_weights(points, [points[i] for i in chosen])
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            # all duplicates of existing centers: uniform among the rest
            remaining = np.setdiff1d(np.arange(n), np.array(chosen))
            idx = int(rng.choice(remaining))
        chosen.append(idx)
    return points[np.array(chosen)].copy()


def _lloyd(points: np.ndarray, centers: np.ndarray, max_iter: int):
    n, k = len(points), len(centers)
    assign = np.full(n, -1)
    for _ in range(max_iter):
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assign = np.argmin(d2, axis=1)

        # an emptied cluster is reseeded at the point farthest from its
        # nearest center; capped so all-duplicate inputs cannot spin
        for _attempt in range(k):
            counts = np.bincount(new_assign, minlength=k)
            empties = np.nonzero(counts == 0)[0]
            if len(empties) == 0:
                break
            nearest = d2[np.arange(n), new_assign]
            far = int(np.argmax(nearest))
            if nearest[far] == 0.0:
                break
            centers[empties[0]] = points[far]
            d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
            new_assign = np.argmin(d2, axis=1)

        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            members = points[assign == j]
            if len(members):
                centers[j] = members.mean(axis=0)
    d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    assign = np.argmin(d2, axis=1)
    wcss = float(d2[np.arange(n), assign].sum())
    return centers, assign, wcss


def kmeans_fit(points: np.ndarray, k: int, seed,
               restarts: int = 4, max_iter: int = 100):
    """Best-of-restarts Lloyd iterations with D^2 seeding.

    Returns (centers (k, H), assignments (n,)); deterministic for a fixed
    (seed, restarts).
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise DataError(f"points must be 2-D, got shape {points.shape}")
    if len(points) < k:
        raise DataError(f"cannot fit {k} clusters on {len(points)} points")
    best = None
    for r in range(restarts):
        rng = rng_from(*np.atleast_1d(seed), r)
        centers = kmeanspp_init(points, k, rng)
        centers, assign, wcss = _lloyd(points, centers, max_iter)
        if best is None or wcss < best[2]:
            best = (centers, assign, wcss)
    return best[0], best[1]


# ---------------------------------------------------------------------------
# Weibull tail model

@dataclass
class WeibullTail:
    tau: float
    scale: float
    shape: float
    tail_fraction: float
    tail_count: int


def _weibull_mle(x: np.ndarray, max_iter: int = 200, tol: float = 1e-10):
    """2-parameter Weibull MLE via Newton iterations on the profile shape
    equation, with a bisection safeguard. x must be positive."""
    x = np.asarray(x, dtype=np.float64)
    scale0 = x.max()
    xs = x / scale0
    ln = np.log(xs)
    mean_ln = ln.mean()

    def profile(kappa):
        w = xs ** kappa
        s0 = w.sum()
        s1 = (w * ln).sum()
        s2 = (w * ln * ln).sum()
        f = s1 / s0 - 1.0 / kappa - mean_ln
        fp = (s2 * s0 - s1 * s1) / (s0 * s0) + 1.0 / kappa ** 2
        return f, fp

    sd = ln.std()
    kappa = 1.2 / sd if sd > 0 else 1.0
    lo, hi = 1e-8, kappa
    f_hi, _ = profile(hi)
    grow = 0
    while f_hi < 0 and grow < 200:
        lo = hi
        hi *= 2.0
        f_hi, _ = profile(hi)
        grow += 1
    if f_hi < 0:
        raise NumericError("Weibull shape bracket not found (profile stays negative)")

    converged = False
    for _ in range(max_iter):
        f, fp = profile(kappa)
        if f > 0:
            hi = min(hi, kappa)
        else:
            lo = max(lo, kappa)
        step = f / fp
        new = kappa - step
        if not (lo < new < hi):
            new = 0.5 * (lo + hi)
        if abs(new - kappa) <= tol * max(1.0, abs(kappa)):
            kappa = new
            converged = True
            break
        kappa = new
    if not converged:
        raise NumericError(
            f"Weibull MLE did not converge after {max_iter} iterations "
            f"(kappa={kappa:.6g}, bracket=({lo:.6g}, {hi:.6g}))")
    lam = float(np.mean(xs ** kappa) ** (1.0 / kappa) * scale0)
    return float(kappa), lam


def fit_weibull_tail(distances, alpha: float, cfg: FineGrainConfig,
                     tail_count: int | None = None) -> WeibullTail:
    """Fit a Weibull model to the largest ceil(alpha * n) distances.

    The location tau is the empirical tail minimum (slightly shrunk so all
    excesses are positive); shape and scale come from maximum likelihood.
    """
    d = np.sort(np.asarray(distances, dtype=np.float64))
    n = len(d)
    tc = tail_count if tail_count is not None else math.ceil(alpha * n)
    if tc > n:
        raise DataError(f"tail of {tc} requested from {n} distances")
    if tc < cfg.min_tail_count:
        raise DataError(f"tail of {tc} below the minimum of {cfg.min_tail_count}")
    tail = d[-tc:]
    if tail[-1] <= tail[0]:
        raise DataError("zero-variance tail cannot be fitted")
    if tail[0] <= 0:
        raise NumericError("tail contains non-positive distances")
    tau = tail[0] * (1.0 - 1e-9)
    kappa, lam = _weibull_mle(tail - tau)
    if not (kappa > 0 and lam > 0):
        raise NumericError(f"degenerate Weibull fit (shape={kappa}, scale={lam})")
    return WeibullTail(tau=float(tau), scale=lam, shape=kappa,
                       tail_fraction=alpha, tail_count=int(tc))


def rejection_probability(d, tail: WeibullTail):
    """Weibull CDF of the distance excess; 0 at or below the location tau."""
    d = np.asarray(d, dtype=np.float64)
    excess = np.maximum(d - tail.tau, 0.0)
    with np.errstate(over="ignore"):
        q = 1.0 - np.exp(-((excess / tail.scale) ** tail.shape))
    return float(q) if q.ndim == 0 else q


# ---------------------------------------------------------------------------
# Fine-grained model

@dataclass
class ClusterStat:
    mu: np.ndarray
    sigma: np.ndarray
    chol: np.ndarray
    eps: float
    count: int


class FineGrainedModel:
    """Per known class: M cluster statistics and M Weibull tail models."""

    def __init__(self, stats: dict[int, list[ClusterStat]],
                 tails: dict[int, list[WeibullTail]],
                 n_clusters: int, cfg: FineGrainConfig, config_hash: str = ""):
        self.stats = stats
        self.tails = tails
        self.n_clusters = n_clusters
        self.cfg = cfg
        self.config_hash = config_hash

    @property
    def classes(self) -> list[int]:
        return sorted(self.stats)

    def has_class(self, c: int) -> bool:
        return c in self.stats

    def class_clusters(self, c: int) -> list[ClusterStat]:
        if c not in self.stats:
            raise DataError(f"unknown class id {c}")
        return self.stats[c]

    def class_tails(self, c: int) -> list[WeibullTail]:
        if c not in self.tails:
            raise DataError(f"unknown class id {c}")
        return self.tails[c]

    def nearest_cluster(self, features: np.ndarray, c: int):
        """Assign rows of `features` to the closest cluster of class c.

        Returns (cluster indices, floored Mahalanobis distances); ties go to
        the lowest cluster index.
        """
        stats = self.class_clusters(c)
        feats = np.atleast_2d(np.asarray(features, dtype=np.float64))
        dists = np.stack([
            mahalanobis_from_chol(feats, s.mu, s.chol, d0=self.cfg.loss.d0)
            for s in stats], axis=1)
        assign = np.argmin(dists, axis=1)
        return assign, dists[np.arange(len(feats)), assign]


def assign_cluster(r: np.ndarray, c: int, model: FineGrainedModel):
    """Nearest cluster of class c for a single feature vector."""
    assign, dist = model.nearest_cluster(np.atleast_2d(r), c)
    return int(assign[0]), float(dist[0])


def _degenerate_tail(distances: np.ndarray, alpha: float) -> WeibullTail:
    dmax = float(distances.max())
    return WeibullTail(tau=dmax * (1.0 - 1e-9) if dmax > 0 else 0.0,
                       scale=max(dmax * 1e-3, 1e-6), shape=1.0,
                       tail_fraction=alpha, tail_count=len(distances))


def build_fine_grained_model(features: np.ndarray, labels: np.ndarray,
                             predictions: np.ndarray, n_clusters: int,
                             cfg: FineGrainConfig, seed: int = 0,
                             classes=None, strict: bool = True,
                             config_hash: str = "") -> FineGrainedModel:
    """Cluster the correctly classified features of every class and fit one
    Weibull tail per cluster.

    With strict=True, a class without at least M * min_cluster_size correct
    samples is an error. With strict=False (the in-training path) the class
    degrades gracefully: fewer clusters, pooled class covariance for small
    clusters, whole-class features when nothing is classified correctly.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    predictions = np.asarray(predictions)
    H = features.shape[1]
    mcs = min_cluster_size(H)
    if classes is None:
        classes = sorted(np.unique(labels).tolist())

    correct = predictions == labels
    short = []
    for c in classes:
        n_c = int(np.sum(correct & (labels == c)))
        if n_c < n_clusters * mcs:
            short.append((int(c), n_c))
    if short and strict:
        listing = ", ".join(f"class {c}: {n}" for c, n in short)
        raise DataError(
            f"insufficient correctly classified samples for {n_clusters} "
            f"clusters of >= {mcs} members ({listing})")

    seed_parts = [int(s) for s in np.atleast_1d(seed)]
    stats: dict[int, list[ClusterStat]] = {}
    tails: dict[int, list[WeibullTail]] = {}
    for c in classes:
        mask = correct & (labels == c)
        feats = features[mask]
        if len(feats) == 0:
            feats = features[labels == c]
            if len(feats) == 0:
                raise DataError(f"no samples at all for class {int(c)}")
            warnings.warn(f"class {int(c)} has no correctly classified samples; "
                          "clustering all of its samples instead")
        k_c = min(n_clusters, len(feats))
        centers, assign = kmeans_fit(feats, k_c, seed=seed_parts + [int(c)],
                                     restarts=cfg.restarts, max_iter=cfg.max_iter)

        pooled = np.cov(feats, rowvar=False, bias=True) if len(feats) > 1 \
            else np.zeros((H, H))
        pooled = np.atleast_2d(pooled)
        cl_stats, cl_tails = [], []
        for m in range(k_c):
            members = feats[assign == m]
            mu = members.mean(axis=0)
            if len(members) >= mcs:
                sigma = np.cov(members, rowvar=False, bias=True)
            else:
                sigma = pooled
            sigma = np.atleast_2d(sigma)
            chol, eps = regularized_cholesky(sigma, cfg.loss)
            dists = mahalanobis_from_chol(members, mu, chol, d0=cfg.loss.d0)
            try:
                tail = fit_weibull_tail(dists, cfg.tail_fraction, cfg)
            except (DataError, NumericError):
                if strict:
                    raise
                want = max(cfg.min_tail_count,
                           math.ceil(cfg.tail_fraction * len(dists)))
                tc = min(len(dists), want)
                try:
                    tail = fit_weibull_tail(dists, cfg.tail_fraction, cfg, tail_count=tc) \
                        if tc >= 2 else _degenerate_tail(dists, cfg.tail_fraction)
                except (DataError, NumericError):
                    tail = _degenerate_tail(dists, cfg.tail_fraction)
            cl_stats.append(ClusterStat(mu=mu, sigma=sigma, chol=chol,
                                        eps=eps, count=int(len(members))))
            cl_tails.append(tail)
        stats[int(c)] = cl_stats
        tails[int(c)] = cl_tails
    return FineGrainedModel(stats, tails, n_clusters, cfg, config_hash)


# ---------------------------------------------------------------------------
# Open-set decision rule

@dataclass
class OpenSetPrediction:
    class_or_unknown: int
    softmax_class: int
    cluster: int
    distance: float
    rejection_prob: float


def rejection_scores(features: np.ndarray, softmax_classes: np.ndarray,
                     model: FineGrainedModel):
    """Cluster assignment, distance and rejection probability per sample."""
    n = len(features)
    clusters = np.zeros(n, dtype=int)
    dists = np.zeros(n)
    q = np.zeros(n)
    for c in np.unique(softmax_classes):
        rows = np.nonzero(softmax_classes == c)[0]
        assign, dist = model.nearest_cluster(features[rows], int(c))
        tails = model.class_tails(int(c))
        clusters[rows] = assign
        dists[rows] = dist
        for m in np.unique(assign):
            sub = rows[assign == m]
            q[sub] = rejection_probability(dists[sub], tails[m])
    return clusters, dists, q


def predict_open_set_batch(features: np.ndarray, probs: np.ndarray,
                           model: FineGrainedModel, threshold: float):
    """Vectorized open-set decisions for precomputed features/probabilities."""
    softmax_classes = np.argmax(probs, axis=1)
    clusters, dists, q = rejection_scores(features, softmax_classes, model)
    decisions = np.where(q > threshold, UNKNOWN, softmax_classes)
    return decisions, softmax_classes, clusters, dists, q


def predict_open_set(x: np.ndarray, network, model: FineGrainedModel,
                     threshold: float) -> OpenSetPrediction:
    """Classify one standardized window or reject it as unknown."""
    x = np.asarray(x, dtype=np.float64)
    feats, _, probs = network.infer(x[None, :, :])
    decisions, sm, clusters, dists, q = predict_open_set_batch(
        feats, probs, model, threshold)
    return OpenSetPrediction(class_or_unknown=int(decisions[0]),
                             softmax_class=int(sm[0]), cluster=int(clusters[0]),
                             distance=float(dists[0]), rejection_prob=float(q[0]))


def calibrate_threshold(val_rejection_probs, target_frr: float) -> float:
    """(1 - target_frr) quantile of validation rejection probabilities."""
    q = np.sort(np.asarray(val_rejection_probs, dtype=np.float64))
    if len(q) == 0:
        raise DataError("cannot calibrate a threshold on an empty validation set")
    idx = min(max(math.ceil((1.0 - target_frr) * len(q)) - 1, 0), len(q) - 1)
    return float(q[idx])


# ---------------------------------------------------------------------------
# Cluster-count selection

def _silhouette(points: np.ndarray, assign: np.ndarray) -> float:
    from sklearn.metrics import silhouette_score
    if len(np.unique(assign)) < 2 or len(points) < 3:
        return -1.0
    return float(silhouette_score(points, assign))


def select_cluster_count(features: np.ndarray, labels: np.ndarray,
                         predictions: np.ndarray, cfg: FineGrainConfig,
                         seed: int = 0, candidates=(1, 2, 3, 4, 5),
                         subsample: int = 500) -> int:
    """Pick the cluster count maximizing the mean per-class silhouette.

    A single cluster scores 0, so M=1 wins only when every multi-cluster
    candidate scores negative.
    """
    correct = predictions == labels
    per_class = []
    for c in sorted(np.unique(labels).tolist()):
        feats = features[correct & (labels == c)]
        if len(feats) < 3:
            continue
        if len(feats) > subsample:
            rng = rng_from(seed, int(c))
            feats = feats[rng.choice(len(feats), subsample, replace=False)]
        per_class.append(feats)
    if not per_class:
        return 1

    best_m, best_score = 1, 0.0
    for m in candidates:
        if m == 1:
            score = 0.0
        else:
            scores = []
            for ci, feats in enumerate(per_class):
                if len(feats) <= m:
                    continue
                _, assign = kmeans_fit(feats, m, seed=[seed, 997, ci],
                                       restarts=cfg.restarts, max_iter=cfg.max_iter)
                scores.append(_silhouette(feats, assign))
            if not scores:
                continue
            score = float(np.mean(scores))
        if score > best_score:
            best_m, best_score = m, score
    return best_m


# ---------------------------------------------------------------------------
# Serialization

FINEGRAINED_VERSION = 1


def save_finegrained(path, model: FineGrainedModel):
    arrays = {}
    tail_meta = {}
    for c in model.classes:
        for m, (st, tl) in enumerate(zip(model.stats[c], model.tails[c])):
            prefix = f"class{c}/cluster{m}"
            arrays[f"{prefix}/mu"] = st.mu
            arrays[f"{prefix}/sigma"] = st.sigma
            arrays[f"{prefix}/chol"] = st.chol
            tail_meta[prefix] = {"eps": st.eps, "count": st.count,
                                 "tau": tl.tau, "scale": tl.scale,
                                 "shape": tl.shape,
                                 "tail_fraction": tl.tail_fraction,
                                 "tail_count": tl.tail_count}
    meta = {
        "version": FINEGRAINED_VERSION,
        "n_clusters": model.n_clusters,
        "classes": [int(c) for c in model.classes],
        "cluster_counts": {str(c): len(model.stats[c]) for c in model.classes},
        "config_hash": model.config_hash,
        "cfg": {"tail_fraction": model.cfg.tail_fraction,
                "min_tail_count": model.cfg.min_tail_count,
                "restarts": model.cfg.restarts,
                "max_iter": model.cfg.max_iter,
                "d0": model.cfg.loss.d0,
                "eps_reg_rel": model.cfg.loss.eps_reg_rel,
                "eps_reg_abs": model.cfg.loss.eps_reg_abs,
                "lambda_dist": model.cfg.loss.lambda_dist},
        "tails": tail_meta,
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(),
                                   dtype=np.uint8)
    np.savez(path, **arrays)


def load_finegrained(path) -> FineGrainedModel:
    with np.load(path) as data:
        arrays = {k: data[k] for k in data.files}
    if "meta" not in arrays:
        raise DataError(f"{path} is not a fine-grained model file")
    meta = json.loads(bytes(arrays["meta"].tobytes()).decode())
    if meta.get("version") != FINEGRAINED_VERSION:
        raise DataError(f"unsupported fine-grained model version {meta.get('version')!r}")
    c = meta["cfg"]
    cfg = FineGrainConfig(tail_fraction=c["tail_fraction"],
                          min_tail_count=c["min_tail_count"],
                          restarts=c["restarts"], max_iter=c["max_iter"],
                          loss=LossConfig(lambda_dist=c["lambda_dist"], d0=c["d0"],
                                          eps_reg_rel=c["eps_reg_rel"],
                                          eps_reg_abs=c["eps_reg_abs"]))
    stats: dict[int, list[ClusterStat]] = {}
    tails: dict[int, list[WeibullTail]] = {}
    for cls in meta["classes"]:
        n_m = meta["cluster_counts"][str(cls)]
        stats[cls], tails[cls] = [], []
        for m in range(n_m):
            prefix = f"class{cls}/cluster{m}"
            tm = meta["tails"][prefix]
            stats[cls].append(ClusterStat(
                mu=arrays[f"{prefix}/mu"], sigma=arrays[f"{prefix}/sigma"],
                chol=arrays[f"{prefix}/chol"], eps=tm["eps"], count=tm["count"]))
            tails[cls].append(WeibullTail(
                tau=tm["tau"], scale=tm["scale"], shape=tm["shape"],
                tail_fraction=tm["tail_fraction"], tail_count=tm["tail_count"]))
    return FineGrainedModel(stats, tails, meta["n_clusters"], cfg,
                            meta["config_hash"])

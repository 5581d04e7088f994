"""End-to-end workflow: simulate a dataset, train with per-epoch refits of
the fine-grained model, evaluate against the baselines, and export 2-D
feature projections."""

from __future__ import annotations

import json
import os
import time

import numpy as np

from . import baselines as bl
from . import finegrain as fg
from . import metrics as mt
from . import objective as obj
from .config import RunConfig
from .data.cstr import CHANNELS, simulate_cstr
from .data.dataset_io import (Dataset, SimulationTask, read_dataset,
                              write_dataset)
from .data.windows import (Standardizer, fit_standardizer_from_array,
                           make_windows, split_open_set, standardize_array)
from .errors import ConfigError, DataError, NumericError
from .net import AdamState, Network, adam_step, load_checkpoint, save_checkpoint
from .net.autodiff import Tensor
from .seeding import rng_from

FGCRN_METHOD = "fgcrn"
ALL_METHODS = bl.METHODS + (FGCRN_METHOD,)


# ---------------------------------------------------------------------------
# Dataset generation

def simulate_dataset(task: SimulationTask, out_dir: str) -> dict:
    """Simulate every configured health state over all modes, window, split
    and write the dataset directory. Returns the manifest."""
    windows = []
    for fault in task.faults:
        series = simulate_cstr(task.scenario_for(fault))
        windows.extend(make_windows(series, task.window, task.stride))
    split = split_open_set(windows, known=task.known_ids, unknown=task.unknown_ids,
                           ratios=task.ratios, seed=task.seed)
    std = fit_standardizer_from_array(
        np.stack([w.x for w in split.train], axis=0))
    write_dataset(out_dir, split, std, window_len=task.window, stride=task.stride,
                  seed=task.seed, channels=CHANNELS,
                  n_modes=len(task.mode_setpoints),
                  extra={"mode_setpoints": list(task.mode_setpoints),
                         "faults": list(task.faults),
                         "noise_std": task.noise_std,
                         "fault_start_min": task.fault_start_min,
                         "duration_min": task.duration_min})
    with open(os.path.join(out_dir, "manifest.json"), "r", encoding="utf-8") as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# Training

def _batches(n: int, batch: int, rng) -> list[np.ndarray]:
    idx = np.arange(n)
    rng.shuffle(idx)
    chunks = [idx[s:s + batch] for s in range(0, n, batch)]
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        # batch normalization cannot train on a single sample
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


def _fine_grain_config(cfg: RunConfig) -> fg.FineGrainConfig:
    return fg.FineGrainConfig(
        tail_fraction=cfg.tail_fraction, min_tail_count=cfg.min_tail_count,
        restarts=cfg.kmeans_restarts, max_iter=cfg.kmeans_max_iter,
        loss=obj.LossConfig(lambda_dist=cfg.lambda_dist, d0=cfg.d0,
                            eps_reg_rel=cfg.eps_reg_rel,
                            eps_reg_abs=cfg.eps_reg_abs))


def _resolve_cluster_count(cfg: RunConfig, dataset: Dataset,
                           features, labels, predictions, fg_cfg) -> int:
    if cfg.cluster_count is not None:
        return cfg.cluster_count
    if dataset.n_modes >= 1:
        return dataset.n_modes
    return fg.select_cluster_count(features, labels, predictions, fg_cfg,
                                   seed=cfg.seed)


def train(data_dir: str, cfg: RunConfig, out_dir: str, quiet: bool = False) -> dict:
    """Full training run; writes checkpoint, fine-grained model, threshold,
    training log and resolved config into out_dir. Returns summary metadata."""
    t_start = time.time()
    dataset = read_dataset(data_dir)
    known = sorted(dataset.known_labels)
    label_to_class = {c: i for i, c in enumerate(known)}
    k = len(known)
    if k < 2:
        raise DataError("training needs at least two known classes")

    std = fit_standardizer_from_array(dataset.train.x, cfg.std_floor)
    x_train = standardize_array(std, dataset.train.x)
    x_val = standardize_array(std, dataset.val.x)
    y_train = np.array([label_to_class[c] for c in dataset.train.y])
    y_val = np.array([label_to_class[c] for c in dataset.val.y])

    v, t_len = x_train.shape[1], x_train.shape[2]
    net = Network(n_vars=v, window_len=t_len, hidden=cfg.hidden, n_classes=k,
                  seed=cfg.seed, norm=cfg.norm, use_tam=cfg.use_tam,
                  bidirectional=cfg.bidirectional)
    adam = AdamState(net.params)
    fg_cfg = _fine_grain_config(cfg)
    loss_cfg = fg_cfg.loss

    fg_model = None
    n_clusters = None
    log_rows = []
    best = {"val_acc": -1.0, "epoch": -1, "params": None, "bn": None}

    for epoch in range(cfg.epochs):
        lr = cfg.learning_rate(epoch)
        rng = rng_from(cfg.seed, 1000 + epoch)
        sum_l = sum_l1 = sum_l2 = 0.0
        n_seen = 0
        for batch_idx in _batches(len(x_train), cfg.batch, rng):
            xb, yb = x_train[batch_idx], y_train[batch_idx]
            trace = net.forward(xb, training=True)
            l1 = obj.cross_entropy(trace.logits, yb)
            if fg_model is not None and cfg.lambda_dist > 0:
                l2, _ = obj.distance_loss(trace.features, yb, trace.predictions,
                                          fg_model, loss_cfg)
            else:
                l2 = Tensor(0.0)
            loss = obj.total_loss(l1, l2, loss_cfg)
            if not np.isfinite(loss.data):
                raise NumericError(
                    f"training loss diverged at epoch {epoch} "
                    f"(L1={l1.data:.4g}, L2={l2.data:.4g}, lr={lr:.4g})")
            net.check_trace(trace)
            net.zero_grad()
            loss.backward()
            adam_step(net.params, adam, lr)
            net.bump_version()
            b = len(batch_idx)
            sum_l += float(loss.data) * b
            sum_l1 += float(l1.data) * b
            sum_l2 += float(l2.data) * b
            n_seen += b

        feats_tr, _, probs_tr = net.infer(x_train, batch=cfg.batch)
        preds_tr = np.argmax(probs_tr, axis=1)
        train_acc = float(np.mean(preds_tr == y_train))
        if n_clusters is None:
            n_clusters = _resolve_cluster_count(cfg, dataset, feats_tr, y_train,
                                                preds_tr, fg_cfg)
        fg_model = fg.build_fine_grained_model(
            feats_tr, y_train, preds_tr, n_clusters, fg_cfg,
            seed=[cfg.seed, 2000 + epoch], classes=list(range(k)), strict=False)

        _, _, probs_val = net.infer(x_val, batch=cfg.batch)
        val_acc = float(np.mean(np.argmax(probs_val, axis=1) == y_val))
        row = {"epoch": epoch, "L": sum_l / n_seen, "L1": sum_l1 / n_seen,
               "L2": sum_l2 / n_seen, "lr": lr, "train_acc": train_acc,
               "val_acc": val_acc, "wall": time.time() - t_start}
        log_rows.append(row)
        if not quiet:
            print(f"epoch {epoch:3d}  L={row['L']:.4f} L1={row['L1']:.4f} "
                  f"L2={row['L2']:.4f} lr={lr:.5f} acc={train_acc:.4f}/{val_acc:.4f}",
                  flush=True)
        if val_acc > best["val_acc"]:
            best.update(val_acc=val_acc, epoch=epoch,
                        params={n: p.data.copy() for n, p in net.params.items()},
                        bn={kk: (b.running_mean.copy(), b.running_var.copy())
                            for kk, b in net.batch_norms().items()})

    # restore the best-validation checkpoint and refit the fine-grained model
    for name, p in net.params.items():
        p.data = best["params"][name]
    for key, bn in net.batch_norms().items():
        bn.running_mean, bn.running_var = best["bn"][key]
    net.bump_version()

    feats_tr, _, probs_tr = net.infer(x_train, batch=cfg.batch)
    preds_tr = np.argmax(probs_tr, axis=1)
    fg_model = fg.build_fine_grained_model(
        feats_tr, y_train, preds_tr, n_clusters, fg_cfg,
        seed=[cfg.seed, 3000], classes=list(range(k)), strict=False,
        config_hash=cfg.hash())

    feats_val, _, probs_val = net.infer(x_val, batch=cfg.batch)
    _, _, q_val = fg.rejection_scores(feats_val, np.argmax(probs_val, axis=1),
                                      fg_model)
    threshold = fg.calibrate_threshold(q_val, cfg.target_frr)

    os.makedirs(out_dir, exist_ok=True)
    save_checkpoint(os.path.join(out_dir, "checkpoint.npz"), net, adam,
                    epoch=best["epoch"], config_hash=cfg.hash(),
                    std_mean=std.mean, std_std=std.std, known_labels=known,
                    extra_meta={"std_floor": std.std_floor})
    fg.save_finegrained(os.path.join(out_dir, "finegrained.npz"), fg_model)
    meta = {"config_hash": cfg.hash(), "best_epoch": best["epoch"],
            "best_val_acc": best["val_acc"], "threshold": threshold,
            "n_clusters": n_clusters, "known_labels": known,
            "unknown_labels": sorted(dataset.unknown_labels)}
    with open(os.path.join(out_dir, "model_meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True, indent=1)
        fh.write("\n")
    with open(os.path.join(out_dir, "training_log.csv"), "w", encoding="utf-8") as fh:
        fh.write("epoch,L,L1,L2,lr,train_acc,val_acc,wall\n")
        for row in log_rows:
            fh.write(f"{row['epoch']},{row['L']!r},{row['L1']!r},{row['L2']!r},"
                     f"{row['lr']!r},{row['train_acc']!r},{row['val_acc']!r},"
                     f"{row['wall']:.3f}\n")
    with open(os.path.join(out_dir, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(cfg.to_text())
    return meta


# ---------------------------------------------------------------------------
# Evaluation

def _load_model_dir(model_dir: str):
    net, _, ckpt_meta, std_mean, std_std = load_checkpoint(
        os.path.join(model_dir, "checkpoint.npz"))
    fg_model = fg.load_finegrained(os.path.join(model_dir, "finegrained.npz"))
    if fg_model.config_hash != ckpt_meta["config_hash"]:
        raise ConfigError("checkpoint and fine-grained model come from "
                          "different configurations (hash mismatch)")
    with open(os.path.join(model_dir, "model_meta.json"), "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    floor = ckpt_meta.get("extra", {}).get("std_floor", 1e-8)
    std = Standardizer(mean=std_mean, std=std_std, std_floor=floor)
    return net, fg_model, meta, std


def _map_real_labels(y: np.ndarray, known: list[int]) -> np.ndarray:
    """Known raw labels -> class indices; unknown raw labels -> ids >= k."""
    label_to_class = {c: i for i, c in enumerate(known)}
    unknown_ids = sorted(set(int(v) for v in np.unique(y)) - set(known))
    mapping = dict(label_to_class)
    for j, u in enumerate(unknown_ids):
        mapping[u] = len(known) + j
    return np.array([mapping[int(v)] for v in y])


def evaluate(model_dir: str, data_dir: str, methods, report_path: str,
             cfg: RunConfig | None = None) -> dict:
    """Score the test split with the trained model and all requested methods;
    writes the report as JSON plus a CSV mirror."""
    cfg = cfg or RunConfig()
    methods = list(methods)
    for m in methods:
        if m not in ALL_METHODS:
            raise ConfigError(f"unknown method {m!r}; choose from {ALL_METHODS}")
    net, fg_model, meta, std = _load_model_dir(model_dir)
    dataset = read_dataset(data_dir)
    known = meta["known_labels"]
    k = len(known)
    label_to_class = {c: i for i, c in enumerate(known)}

    x_train = standardize_array(std, dataset.train.x)
    x_val = standardize_array(std, dataset.val.x)
    x_test = standardize_array(std, dataset.test.x)
    y_train = np.array([label_to_class[c] for c in dataset.train.y])
    real_test = _map_real_labels(dataset.test.y, known)

    feats_tr, logits_tr, _ = net.infer(x_train, batch=cfg.batch)
    feats_val, logits_val, _ = net.infer(x_val, batch=cfg.batch)
    feats_te, logits_te, probs_te = net.infer(x_test, batch=cfg.batch)

    bl_cfg = bl.BaselineConfig(gen_gamma=cfg.gen_gamma, gen_topk=cfg.gen_topk,
                               openmax_tail=cfg.openmax_tail,
                               openmax_revise=cfg.openmax_revise,
                               vim_dim_divisor=cfg.vim_dim_divisor)
    rows = []
    for method in methods:
        if method == FGCRN_METHOD:
            threshold = float(meta["threshold"])
            decisions, _, _, _, _ = fg.predict_open_set_batch(
                feats_te, probs_te, fg_model, threshold)
            hyper = {"n_clusters": fg_model.n_clusters,
                     "tail_fraction": fg_model.cfg.tail_fraction,
                     "target_frr": cfg.target_frr}
        else:
            calib = bl.calibrate_baseline(method, logits_tr, feats_tr,
                                          y_train, bl_cfg)
            scores_val = bl.score_samples(method, calib, logits_val, feats_val, bl_cfg)
            threshold = bl.threshold_scores(scores_val, cfg.coverage)
            scores_te = bl.score_samples(method, calib, logits_te, feats_te, bl_cfg)
            decisions = bl.decide(scores_te, logits_te, threshold)
            hyper = dict(calib.hyperparams)
            hyper["coverage"] = cfg.coverage
        counts = mt.tally(real_test, decisions, known_classes=range(k))
        acc = mt.accuracy_open(counts)
        far, frr = mt.far_frr(counts)
        recalls = counts.per_class_recall()
        rows.append({"method": method, "acc": acc, "far": far, "frr": frr,
                     "threshold": threshold,
                     "per_class_recall": {str(known[c]): recalls[c] for c in recalls},
                     "hyperparams": hyper})

    report = {"config_hash": meta["config_hash"], "model_dir": model_dir,
              "data_dir": data_dir, "known_labels": known,
              "unknown_labels": meta.get("unknown_labels", []),
              "rows": rows}
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, sort_keys=True, indent=1)
        fh.write("\n")
    csv_path = os.path.splitext(report_path)[0] + ".csv"
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("method,acc,far,frr,threshold\n")
        for row in rows:
            fh.write(f"{row['method']},{row['acc']!r},{row['far']!r},"
                     f"{row['frr']!r},{row['threshold']!r}\n")
    return report


# ---------------------------------------------------------------------------
# 2-D projection export

def export_projection(model_dir: str, data_dir: str, out_path: str,
                      cfg: RunConfig | None = None) -> int:
    """Project test features (and cluster centers) onto the top-2 principal
    components of the training features; writes ``label,mode,pc1,pc2`` rows.
    Center rows are marked by mode = -(cluster index + 1)."""
    cfg = cfg or RunConfig()
    net, fg_model, meta, std = _load_model_dir(model_dir)
    dataset = read_dataset(data_dir)
    known = meta["known_labels"]

    x_train = standardize_array(std, dataset.train.x)
    x_test = standardize_array(std, dataset.test.x)
    feats_tr, _, _ = net.infer(x_train, batch=cfg.batch)
    feats_te, _, _ = net.infer(x_test, batch=cfg.batch)
    if len(feats_tr) < 3:
        raise DataError("projection needs at least 3 training samples")

    center = feats_tr.mean(axis=0)
    centered = feats_tr - center[None, :]
    cov = centered.T @ centered / len(centered)
    eigvals, eigvecs = np.linalg.eigh(cov)
    basis = eigvecs[:, ::-1][:, :2]
    # deterministic orientation: dominant loading positive per component
    for j in range(basis.shape[1]):
        lead = np.argmax(np.abs(basis[:, j]))
        if basis[lead, j] < 0:
            basis[:, j] = -basis[:, j]

    proj_te = (feats_te - center[None, :]) @ basis
    n_rows = 0
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write("label,mode,pc1,pc2\n")
        for (label, mode, p) in zip(dataset.test.y, dataset.test.mode, proj_te):
            fh.write(f"{label},{mode},{p[0]:.17g},{p[1]:.17g}\n")
            n_rows += 1
        for c in fg_model.classes:
            raw = known[c] if c < len(known) else c
            for m, stat in enumerate(fg_model.class_clusters(c)):
                p = (stat.mu - center) @ basis
                fh.write(f"{raw},{-(m + 1)},{p[0]:.17g},{p[1]:.17g}\n")
                n_rows += 1
    return n_rows

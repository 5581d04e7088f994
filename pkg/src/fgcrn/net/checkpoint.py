"""Self-describing checkpoint container (npz) for network, optimizer and
standardization state. Arrays round-trip bit-exactly."""

from __future__ import annotations

import json

import numpy as np

from ..errors import DataError
from .adam import AdamState
from .model import Network

CHECKPOINT_VERSION = 1


def save_checkpoint(path, network: Network, adam_state: AdamState | None,
                    epoch: int, config_hash: str,
                    std_mean: np.ndarray, std_std: np.ndarray,
                    known_labels: list[int], extra_meta: dict | None = None):
    arrays: dict[str, np.ndarray] = {}
    shapes = {}
    for name, p in network.params.items():
        arrays[f"param/{name}"] = p.data
        shapes[name] = list(p.data.shape)
    for key, bn in network.batch_norms().items():
        arrays[f"bn/{key}/running_mean"] = bn.running_mean
        arrays[f"bn/{key}/running_var"] = bn.running_var
    if adam_state is not None:
        for name in network.params:
            arrays[f"opt/m/{name}"] = adam_state.m[name]
            arrays[f"opt/v/{name}"] = adam_state.v[name]
    arrays["std/mean"] = np.asarray(std_mean, dtype=np.float64)
    arrays["std/std"] = np.asarray(std_std, dtype=np.float64)

    meta = {
        "version": CHECKPOINT_VERSION,
        "epoch": epoch,
        "config_hash": config_hash,
        "arch": network.arch,
        "shapes": shapes,
        "known_labels": [int(c) for c in known_labels],
        "opt": None if adam_state is None else {
            "t": adam_state.t, "beta1": adam_state.beta1,
            "beta2": adam_state.beta2, "eps": adam_state.eps},
    }
    if extra_meta:
        meta["extra"] = extra_meta
    arrays["meta"] = np.frombuffer(
        json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    np.savez(path, **arrays)


def load_checkpoint(path):
    """Returns (network, adam_state_or_None, meta, std_mean, std_std)."""
    with np.load(path) as data:
        arrays = {k: data[k] for k in data.files}
    if "meta" not in arrays:
        raise DataError(f"{path} is not a checkpoint (missing meta header)")
    meta = json.loads(bytes(arrays["meta"].tobytes()).decode())
    if meta.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {meta.get('version')!r}")

    arch = meta["arch"]
    network = Network(n_vars=arch["n_vars"], window_len=arch["window_len"],
                      hidden=arch["hidden"], n_classes=arch["n_classes"],
                      seed=0, norm=arch["norm"], use_tam=arch["use_tam"],
                      bidirectional=arch["bidirectional"])
    for name, p in network.params.items():
        key = f"param/{name}"
        if key not in arrays:
            raise DataError(f"checkpoint missing parameter {name!r}")
        if arrays[key].shape != p.data.shape:
            raise DataError(f"shape mismatch for {name!r}: "
                            f"{arrays[key].shape} vs {p.data.shape}")
        p.data = arrays[key].astype(np.float64)
    for key, bn in network.batch_norms().items():
        bn.running_mean = arrays[f"bn/{key}/running_mean"].astype(np.float64)
        bn.running_var = arrays[f"bn/{key}/running_var"].astype(np.float64)

    adam_state = None
    if meta.get("opt") is not None:
        opt = meta["opt"]
        adam_state = AdamState(network.params, beta1=opt["beta1"],
                               beta2=opt["beta2"], eps=opt["eps"])
        adam_state.t = opt["t"]
        for name in network.params:
            adam_state.m[name] = arrays[f"opt/m/{name}"].astype(np.float64)
            adam_state.v[name] = arrays[f"opt/v/{name}"].astype(np.float64)

    return network, adam_state, meta, arrays["std/mean"], arrays["std/std"]

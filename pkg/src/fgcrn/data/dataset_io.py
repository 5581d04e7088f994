"""Dataset directory layout: train/val/test CSVs plus a JSON manifest.

Each CSV row is one time step of one window: ``label,mode,t,<channels...>``
in row-major window order (t restarts at 0 for every window). The manifest
records window geometry, label sets, the training standardizer and the seed,
so externally produced data can be ingested the same way.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from ..config import parse_key_values
from ..errors import ConfigError, DataError
from .cstr import FAULT_IDS, CstrScenario, PlantParams
from .windows import OpenSetTask, Standardizer, Window, stack_windows

MANIFEST_VERSION = 1
SPLITS = ("train", "val", "test")


@dataclass
class DatasetSplit:
    x: np.ndarray        # (n, V, T)
    y: np.ndarray        # (n,)
    mode: np.ndarray     # (n,)

    def __len__(self):
        return len(self.y)


@dataclass
class Dataset:
    train: DatasetSplit
    val: DatasetSplit
    test: DatasetSplit
    manifest: dict

    @property
    def known_labels(self) -> list[int]:
        return list(self.manifest["known_labels"])

    @property
    def unknown_labels(self) -> list[int]:
        return list(self.manifest["unknown_labels"])

    @property
    def n_modes(self) -> int:
        return int(self.manifest.get("n_modes", 0))

    def standardizer(self) -> Standardizer:
        s = self.manifest["standardizer"]
        return Standardizer(mean=np.array(s["mean"]), std=np.array(s["std"]),
                            std_floor=s["std_floor"])


def _write_split_csv(path: str, windows: list[Window], channels) -> None:
    v = len(channels)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("label,mode,t," + ",".join(channels) + "\n")
        for w in windows:
            T = w.x.shape[1]
            for t in range(T):
                row = [str(w.y), str(w.mode), str(t)]
                row += [f"{w.x[j, t]:.17g}" for j in range(v)]
                fh.write(",".join(row) + "\n")


def write_dataset(out_dir: str, task: OpenSetTask, standardizer: Standardizer,
                  window_len: int, stride: int, seed: int,
                  channels=None, n_modes: int | None = None,
                  extra: dict | None = None) -> None:
    os.makedirs(out_dir, exist_ok=True)
    some = task.train or task.val or task.test
    v = some[0].x.shape[0]
    channels = list(channels) if channels else [f"var_{i + 1}" for i in range(v)]
    if len(channels) != v:
        raise DataError(f"{len(channels)} channel names for {v} variables")

    for split, windows in (("train", task.train), ("val", task.val), ("test", task.test)):
        _write_split_csv(os.path.join(out_dir, f"{split}.csv"), windows, channels)

    modes = sorted({w.mode for w in task.train + task.val + task.test})
    manifest = {
        "version": MANIFEST_VERSION,
        "n_vars": v,
        "window": window_len,
        "stride": stride,
        "seed": seed,
        "channels": channels,
        "known_labels": [int(c) for c in task.known_labels],
        "unknown_labels": [int(c) for c in task.unknown_labels],
        "n_modes": n_modes if n_modes is not None else len(modes),
        "counts": {"train": len(task.train), "val": len(task.val),
                   "test": len(task.test)},
        "standardizer": {"mean": standardizer.mean.tolist(),
                         "std": standardizer.std.tolist(),
                         "std_floor": standardizer.std_floor},
    }
    if extra:
        manifest["extra"] = extra
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _read_split_csv(path: str, window_len: int) -> DatasetSplit:
    df = pd.read_csv(path)
    if list(df.columns[:3]) != ["label", "mode", "t"]:
        raise DataError(f"{path}: expected columns label,mode,t,<channels>")
    n_rows = len(df)
    if n_rows % window_len != 0:
        raise DataError(f"{path}: {n_rows} rows is not a multiple of the "
                        f"window length {window_len}")
    n = n_rows // window_len
    values = df.iloc[:, 3:].to_numpy(dtype=np.float64)
    labels = df["label"].to_numpy(dtype=np.int64)
    modes = df["mode"].to_numpy(dtype=np.int64)
    t_col = df["t"].to_numpy(dtype=np.int64)

    if n and not np.array_equal(t_col, np.tile(np.arange(window_len), n)):
        raise DataError(f"{path}: per-window t column must run 0..{window_len - 1}")
    x = values.reshape(n, window_len, -1).transpose(0, 2, 1)
    y = labels.reshape(n, window_len)
    m = modes.reshape(n, window_len)
    if n and (np.any(y != y[:, :1]) or np.any(m != m[:, :1])):
        raise DataError(f"{path}: labels/modes vary inside a window")
    return DatasetSplit(x=x, y=y[:, 0] if n else np.zeros(0, dtype=np.int64),
                        mode=m[:, 0] if n else np.zeros(0, dtype=np.int64))


def read_dataset(data_dir: str) -> Dataset:
    manifest_path = os.path.join(data_dir, "manifest.json")
    if not os.path.exists(manifest_path):
        raise DataError(f"no manifest.json in {data_dir}")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("version") != MANIFEST_VERSION:
        raise DataError(f"unsupported dataset version {manifest.get('version')!r}")
    window_len = int(manifest["window"])
    splits = {}
    for split in SPLITS:
        path = os.path.join(data_dir, f"{split}.csv")
        if not os.path.exists(path):
            raise DataError(f"missing {split}.csv in {data_dir}")
        splits[split] = _read_split_csv(path, window_len)
    ds = Dataset(train=splits["train"], val=splits["val"], test=splits["test"],
                 manifest=manifest)
    known = set(ds.known_labels)
    for name in ("train", "val"):
        labels = getattr(ds, name).y
        if len(labels) and not np.all(np.isin(labels, sorted(known))):
            raise DataError(f"{name} split contains labels outside the known set")
    return ds


# ---------------------------------------------------------------------------
# Scenario (simulation task) files

@dataclass
class SimulationTask:
    """A scenario file describes the per-fault simulation settings plus the
    task-level windowing/split assignment used to emit a dataset directory."""

    mode_setpoints: tuple[float, ...] = (350.0, 355.0)
    faults: tuple[str, ...] = ("N", "F1", "F2", "F3", "F4", "F5", "F6", "F7", "F8", "F9")
    known: tuple[str, ...] = ("N", "F1", "F2", "F3", "F4", "F5", "F6", "F7")
    unknown: tuple[str, ...] = ("F8", "F9")
    duration_min: int = 1200
    fault_start_min: int = 200
    noise_std: float = 0.003
    seed: int = 0
    window: int = 20
    stride: int = 1
    ratios: tuple[int, int, int] = (8, 1, 1)
    plant: PlantParams = field(default_factory=PlantParams)

    def __post_init__(self):
        for f in self.faults + self.known + self.unknown:
            if f not in FAULT_IDS:
                raise ConfigError(f"unknown health state {f!r}")
        if set(self.known) & set(self.unknown):
            raise ConfigError("known and unknown fault sets overlap")
        missing = set(self.known + self.unknown) - set(self.faults)
        if missing:
            raise ConfigError(f"states {sorted(missing)} are assigned but not simulated")
        stray = set(self.faults) - set(self.known) - set(self.unknown)
        if stray:
            raise ConfigError(f"simulated states {sorted(stray)} are neither known nor unknown")

    def scenario_for(self, fault: str) -> CstrScenario:
        return CstrScenario(mode_setpoints=self.mode_setpoints, fault_id=fault,
                            duration_min=self.duration_min,
                            fault_start_min=self.fault_start_min,
                            noise_std=self.noise_std, seed=self.seed,
                            plant=self.plant)

    @property
    def known_ids(self) -> list[int]:
        return sorted(FAULT_IDS[f] for f in self.known)

    @property
    def unknown_ids(self) -> list[int]:
        return sorted(FAULT_IDS[f] for f in self.unknown)


def _parse_tuple(raw: str, conv):
    return tuple(conv(part.strip()) for part in raw.split(",") if part.strip())


def load_simulation_task(path: str) -> SimulationTask:
    with open(path, "r", encoding="utf-8") as fh:
        raw = parse_key_values(fh.read())
    kwargs = {}
    for key, value in raw.items():
        if key == "mode_setpoints":
            kwargs[key] = _parse_tuple(value, float)
        elif key in ("faults", "known", "unknown"):
            kwargs[key] = _parse_tuple(value, str)
        elif key in ("duration_min", "fault_start_min", "seed", "window", "stride"):
            kwargs[key] = int(value)
        elif key == "noise_std":
            kwargs[key] = float(value)
        elif key == "ratios":
            r = _parse_tuple(value, int)
            if len(r) != 3:
                raise ConfigError("ratios must be three integers")
            kwargs[key] = r
        else:
            raise ConfigError(f"unknown scenario key {key!r}")
    return SimulationTask(**kwargs)

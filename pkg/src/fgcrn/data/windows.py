"""Raw multivariate series, sliding windows, z-score standardization and
open-set train/val/test splitting."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DataError
from ..seeding import rng_from

DEFAULT_STD_FLOOR = 1e-8


@dataclass
class RawSeries:
    """A recorded multivariate stream with per-step health-state labels and
    operating-mode ids (mode ids are metadata only, never model input)."""

    values: np.ndarray          # (V, N)
    labels: np.ndarray          # (N,) health-state ids, 0 = normal
    modes: np.ndarray           # (N,) operating-mode ids
    sample_period: float        # seconds per step
    channel_names: tuple = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.modes = np.asarray(self.modes, dtype=np.int64)
        if self.values.ndim != 2:
            raise DataError(f"values must be (V, N), got {self.values.shape}")
        n = self.values.shape[1]
        if self.labels.shape != (n,) or self.modes.shape != (n,):
            raise DataError("labels and modes must match the number of time steps")
        if not np.all(np.isfinite(self.values)):
            raise DataError("series contains non-finite values")
        if np.any(self.labels < 0):
            raise DataError("labels must be nonnegative ids")

    @property
    def n_vars(self) -> int:
        return self.values.shape[0]

    def __len__(self) -> int:
        return self.values.shape[1]


def concat_series(parts: list[RawSeries]) -> RawSeries:
    if not parts:
        raise DataError("nothing to concatenate")
    period = parts[0].sample_period
    names = parts[0].channel_names
    for p in parts[1:]:
        if p.sample_period != period or p.n_vars != parts[0].n_vars:
            raise DataError("series parts disagree on sampling or variables")
    return RawSeries(values=np.concatenate([p.values for p in parts], axis=1),
                     labels=np.concatenate([p.labels for p in parts]),
                     modes=np.concatenate([p.modes for p in parts]),
                     sample_period=period, channel_names=names,
                     meta={"parts": [p.meta for p in parts]})


@dataclass
class Window:
    """One model input: x is (V, T); the label is the health state at the
    window's last step; the mode id is metadata only."""

    x: np.ndarray
    y: int
    mode: int

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim != 2:
            raise DataError(f"window must be (V, T), got {self.x.shape}")


def make_windows(series: RawSeries, window_len: int, stride: int = 1) -> list[Window]:
    """Cut sliding windows; a window is dropped when its steps straddle a
    label change (and, likewise, a mode change: concatenated sub-series are
    not physically continuous across the seam)."""
    if window_len < 1 or stride < 1:
        raise DataError("window length and stride must be >= 1")
    n = len(series)
    if n < window_len:
        raise DataError(f"series of {n} steps is shorter than the window ({window_len})")
    out = []
    labels, modes = series.labels, series.modes
    for start in range(0, n - window_len + 1, stride):
        end = start + window_len
        if not np.all(labels[start:end] == labels[end - 1]):
            continue
        if not np.all(modes[start:end] == modes[end - 1]):
            continue
        out.append(Window(x=series.values[:, start:end].copy(),
                          y=int(labels[end - 1]), mode=int(modes[end - 1])))
    return out


def stack_windows(windows: list[Window]):
    """(n, V, T) inputs plus label and mode vectors."""
    if not windows:
        raise DataError("empty window list")
    x = np.stack([w.x for w in windows], axis=0)
    y = np.array([w.y for w in windows], dtype=np.int64)
    modes = np.array([w.mode for w in windows], dtype=np.int64)
    return x, y, modes


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray
    std_floor: float = DEFAULT_STD_FLOOR

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if np.any(self.std < self.std_floor):
            raise DataError("standardizer std below its floor")


def fit_standardizer_from_array(x: np.ndarray,
                                std_floor: float = DEFAULT_STD_FLOOR) -> Standardizer:
    """Per-variable mean/std over stacked windows (n, V, T)."""
    if len(x) == 0:
        raise DataError("cannot fit a standardizer on no windows")
    flat = x.transpose(1, 0, 2).reshape(x.shape[1], -1)
    mean = flat.mean(axis=1)
    std = np.maximum(flat.std(axis=1), std_floor)
    return Standardizer(mean=mean, std=std, std_floor=std_floor)


def fit_standardizer(train: list[Window], std_floor: float = DEFAULT_STD_FLOOR) -> Standardizer:
    """Per-variable mean/std over all training windows and time steps."""
    if not train:
        raise DataError("cannot fit a standardizer on no windows")
    x, _, _ = stack_windows(train)          # (n, V, T)
    return fit_standardizer_from_array(x, std_floor)


def apply_standardizer(s: Standardizer, w: Window) -> Window:
    if w.x.shape[0] != len(s.mean):
        raise DataError(f"window has {w.x.shape[0]} variables, standardizer has {len(s.mean)}")
    return Window(x=(w.x - s.mean[:, None]) / s.std[:, None], y=w.y, mode=w.mode)


def standardize_array(s: Standardizer, x: np.ndarray) -> np.ndarray:
    """Vectorized form of apply_standardizer for stacked windows (n, V, T)."""
    if x.shape[1] != len(s.mean):
        raise DataError(f"array has {x.shape[1]} variables, standardizer has {len(s.mean)}")
    return (x - s.mean[None, :, None]) / s.std[None, :, None]


@dataclass
class OpenSetTask:
    train: list[Window]
    val: list[Window]
    test: list[Window]
    known_labels: list[int]
    unknown_labels: list[int]

    def __post_init__(self):
        known = set(self.known_labels)
        unknown = set(self.unknown_labels)
        if known & unknown:
            raise DataError("known and unknown label sets overlap")
        for name, split in (("train", self.train), ("val", self.val)):
            bad = {w.y for w in split} - known
            if bad:
                raise DataError(f"unknown labels {sorted(bad)} leaked into {name}")


def split_open_set(windows: list[Window], known, unknown,
                   ratios=(8, 1, 1), seed: int = 0) -> OpenSetTask:
    """Stratified (label, mode) split of known windows by the given ratios;
    every unknown-label window goes to test. Deterministic under seed."""
    known = sorted(int(c) for c in known)
    unknown = sorted(int(c) for c in unknown)
    if set(known) & set(unknown):
        raise DataError("known and unknown label sets overlap")
    labels_present = {w.y for w in windows}
    stray = labels_present - set(known) - set(unknown)
    if stray:
        raise DataError(f"labels {sorted(stray)} are in neither the known nor unknown set")

    counts = {c: sum(1 for w in windows if w.y == c) for c in known}
    too_small = [c for c, n in counts.items() if n < sum(ratios)]
    if too_small:
        raise DataError(f"known labels {too_small} have fewer than {sum(ratios)} "
                        "windows; stratified split impossible")

    total = sum(ratios)
    frac_val = ratios[1] / total
    frac_test = ratios[2] / total
    rng = rng_from(seed)

    train: list[Window] = []
    val: list[Window] = []
    test: list[Window] = [w for w in windows if w.y in unknown]

    groups: dict[tuple[int, int], list[int]] = {}
    for i, w in enumerate(windows):
        if w.y in known:
            groups.setdefault((w.y, w.mode), []).append(i)
    for key in sorted(groups):
        idx = np.array(groups[key])
        rng.shuffle(idx)
        n = len(idx)
        n_val = int(np.floor(n * frac_val))
        n_test = int(np.floor(n * frac_test))
        val.extend(windows[i] for i in idx[:n_val])
        test.extend(windows[i] for i in idx[n_val:n_val + n_test])
        train.extend(windows[i] for i in idx[n_val + n_test:])
    return OpenSetTask(train=train, val=val, test=test,
                       known_labels=known, unknown_labels=unknown)

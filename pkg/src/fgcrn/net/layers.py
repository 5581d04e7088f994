"""Network building blocks: multiscale depthwise convolution with batch /
self-adaptive instance normalization, bidirectional GRU, temporal attention,
and the linear classifier head.

All forward functions operate on autodiff Tensors so gradients for every
learnable array come out of a single backward pass.
"""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError, NumericError
from . import autodiff as ad
from .autodiff import Tensor, parameter

EPS_NORM = 1e-5
BN_MOMENTUM = 0.1
KERNEL_SIZES = (3, 5, 7, 9)
TAM_REDUCTION = 4


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def orthogonal_init(rng: np.random.Generator, n: int) -> np.ndarray:
    a = rng.standard_normal((n, n))
    q, r = np.linalg.qr(a)
    return q * np.sign(np.diag(r))


class BatchNormParams:
    """Per-channel batch normalization with running statistics."""

    def __init__(self, rng, channels: int, name: str):
        self.gamma = parameter(np.ones(channels), f"{name}.gamma")
        self.beta = parameter(np.zeros(channels), f"{name}.beta")
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def tensors(self):
        return [self.gamma, self.beta]

    def state(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}


def batch_norm(x, p: BatchNormParams, training: bool, update_running: bool = True):
    """Normalize (B, V, T) per channel over batch and time."""
    if training:
        if x.shape[0] < 2:
            raise NumericError("batch normalization requires batch size >= 2 in training mode")
        mu = ad.tmean(x, axis=(0, 2), keepdims=True)
        var = ad.tmean((x - mu) * (x - mu), axis=(0, 2), keepdims=True)
        if update_running:
            m = BN_MOMENTUM
            p.running_mean = (1 - m) * p.running_mean + m * mu.data.reshape(-1)
            p.running_var = (1 - m) * p.running_var + m * var.data.reshape(-1)
    else:
        mu = Tensor(p.running_mean.reshape(1, -1, 1))
        var = Tensor(p.running_var.reshape(1, -1, 1))
    norm = (x - mu) / ad.sqrt(var + EPS_NORM)
    gamma = ad.reshape(p.gamma, (1, -1, 1))
    beta = ad.reshape(p.beta, (1, -1, 1))
    return gamma * norm + beta


class SainParams:
    """Instance normalization whose affine terms are generated from the
    per-sample channel statistics themselves (two-layer maps per term)."""

    def __init__(self, rng, channels: int, name: str):
        v = channels
        self.scale_w1 = parameter(uniform_init(rng, (v, v), v), f"{name}.scale_w1")
        self.scale_b1 = parameter(np.zeros(v), f"{name}.scale_b1")
        self.scale_w2 = parameter(uniform_init(rng, (v, v), v), f"{name}.scale_w2")
        # output bias 1 so the generated scale starts near identity
        self.scale_b2 = parameter(np.ones(v), f"{name}.scale_b2")
        self.shift_w1 = parameter(uniform_init(rng, (v, v), v), f"{name}.shift_w1")
        self.shift_b1 = parameter(np.zeros(v), f"{name}.shift_b1")
        self.shift_w2 = parameter(uniform_init(rng, (v, v), v), f"{name}.shift_w2")
        self.shift_b2 = parameter(np.zeros(v), f"{name}.shift_b2")

    def tensors(self):
        return [self.scale_w1, self.scale_b1, self.scale_w2, self.scale_b2,
                self.shift_w1, self.shift_b1, self.shift_w2, self.shift_b2]


def sain(x, p: SainParams):
    """Self-adaptive instance normalization of (B, V, T) over the time axis.

    Identical in training and inference; statistics are per sample.
    """
    if x.shape[2] < 2:
        raise NumericError("instance normalization requires at least 2 time steps")
    mu = ad.tmean(x, axis=2, keepdims=True)              # (B, V, 1)
    var = ad.tmean((x - mu) * (x - mu), axis=2, keepdims=True)
    std = ad.sqrt(var + EPS_NORM)
    norm = (x - mu) / std

    mu_flat = ad.reshape(mu, (x.shape[0], x.shape[1]))   # (B, V)
    std_flat = ad.reshape(std, (x.shape[0], x.shape[1]))
    gamma = ad.relu(mu_flat @ p.scale_w1 + p.scale_b1) @ p.scale_w2 + p.scale_b2
    beta = ad.relu(std_flat @ p.shift_w1 + p.shift_b1) @ p.shift_w2 + p.shift_b2
    gamma = ad.reshape(gamma, (x.shape[0], x.shape[1], 1))
    beta = ad.reshape(beta, (x.shape[0], x.shape[1], 1))
    return gamma * norm + beta


class MultiscaleConvParams:
    """Four depthwise kernel banks (sizes 3/5/7/9) with a normalizer per branch."""

    def __init__(self, rng, channels: int, norm_mode: str = "both"):
        if norm_mode == "both":
            branch_norms = ("bn", "bn", "sain", "sain")
        elif norm_mode in ("bn", "sain"):
            branch_norms = (norm_mode,) * 4
        else:
            raise ConfigError(f"unknown norm mode {norm_mode!r}")
        self.branch_norms = branch_norms
        self.banks = []
        self.norms = []
        for size, kind in zip(KERNEL_SIZES, branch_norms):
            bank = parameter(uniform_init(rng, (channels, size), size), f"msdc.bank{size}")
            self.banks.append(bank)
            name = f"msdc.{kind}{size}"
            self.norms.append(BatchNormParams(rng, channels, name) if kind == "bn"
                              else SainParams(rng, channels, name))

    def tensors(self):
        out = list(self.banks)
        for n in self.norms:
            out.extend(n.tensors())
        return out


def msdc_forward(x, p: MultiscaleConvParams, training: bool, update_running: bool = True):
    """(B, V, T) -> (B, 4V, T): per-branch depthwise conv, normalize, concat, ReLU."""
    branches = []
    for bank, norm, kind in zip(p.banks, p.norms, p.branch_norms):
        f = ad.depthwise_conv1d(x, bank)
        if kind == "bn":
            f = batch_norm(f, norm, training, update_running)
        else:
            f = sain(f, norm)
        branches.append(f)
    return ad.relu(ad.concat(branches, axis=1))


class GruDirectionParams:
    """Gate weights for one recurrence direction."""

    def __init__(self, rng, input_dim: int, hidden: int, name: str):
        self.W_r = parameter(uniform_init(rng, (input_dim, hidden), input_dim), f"{name}.W_r")
        self.W_z = parameter(uniform_init(rng, (input_dim, hidden), input_dim), f"{name}.W_z")
        self.W_h = parameter(uniform_init(rng, (input_dim, hidden), input_dim), f"{name}.W_h")
        self.U_r = parameter(orthogonal_init(rng, hidden), f"{name}.U_r")
        self.U_z = parameter(orthogonal_init(rng, hidden), f"{name}.U_z")
        self.U_h = parameter(orthogonal_init(rng, hidden), f"{name}.U_h")
        self.b_r = parameter(np.zeros(hidden), f"{name}.b_r")
        self.b_z = parameter(np.zeros(hidden), f"{name}.b_z")
        self.b_h = parameter(np.zeros(hidden), f"{name}.b_h")
        self.hidden = hidden

    def tensors(self):
        return [self.W_r, self.W_z, self.W_h, self.U_r, self.U_z, self.U_h,
                self.b_r, self.b_z, self.b_h]


class BiGruParams:
    def __init__(self, rng, input_dim: int, hidden: int, bidirectional: bool = True):
        self.forward = GruDirectionParams(rng, input_dim, hidden, "gru.fwd")
        self.backward = (GruDirectionParams(rng, input_dim, hidden, "gru.bwd")
                         if bidirectional else None)
        self.hidden = hidden
        self.bidirectional = bidirectional

    def tensors(self):
        out = self.forward.tensors()
        if self.backward is not None:
            out.extend(self.backward.tensors())
        return out


def _gru_step(x_t, h_prev, d: GruDirectionParams):
    r = ad.sigmoid(x_t @ d.W_r + h_prev @ d.U_r + d.b_r)
    z = ad.sigmoid(x_t @ d.W_z + h_prev @ d.U_z + d.b_z)
    h_cand = ad.tanh(x_t @ d.W_h + (r * h_prev) @ d.U_h + d.b_h)
    return (1.0 - z) * h_prev + z * h_cand


def bigru_forward(f, p: BiGruParams):
    """(B, T, F) -> (B, 2T, H): forward then backward states, concatenated
    along the time axis (forward only when unidirectional)."""
    B, T, F = f.shape
    steps = [ad.select(f, t, axis=1) for t in range(T)]

    h = Tensor(np.zeros((B, p.hidden)))
    states = []
    for t in range(T):
        h = _gru_step(steps[t], h, p.forward)
        states.append(h)

    if p.backward is not None:
        h = Tensor(np.zeros((B, p.hidden)))
        rev = []
        for t in range(T - 1, -1, -1):
            h = _gru_step(steps[t], h, p.backward)
            rev.append(h)
        states.extend(reversed(rev))
    return ad.stack(states, axis=1)


class TemporalAttentionParams:
    """Scalar per-step attention built from channel-average and channel-std
    branches, each with a bottleneck over the time axis, merged by a short
    convolution over time."""

    def __init__(self, rng, time_len: int, reduction: int = TAM_REDUCTION,
                 merge_kernel: int = 3):
        L = time_len
        Lr = max(1, L // reduction)
        self.avg_w1 = parameter(uniform_init(rng, (L, Lr), L), "tam.avg_w1")
        self.avg_b1 = parameter(np.zeros(Lr), "tam.avg_b1")
        self.avg_w2 = parameter(uniform_init(rng, (Lr, L), Lr), "tam.avg_w2")
        self.avg_b2 = parameter(np.zeros(L), "tam.avg_b2")
        self.std_w1 = parameter(uniform_init(rng, (L, Lr), L), "tam.std_w1")
        self.std_b1 = parameter(np.zeros(Lr), "tam.std_b1")
        self.std_w2 = parameter(uniform_init(rng, (Lr, L), Lr), "tam.std_w2")
        self.std_b2 = parameter(np.zeros(L), "tam.std_b2")
        self.merge_w = parameter(uniform_init(rng, (2, merge_kernel), 2 * merge_kernel),
                                 "tam.merge_w")
        # bias 1 so attention starts near uniform weighting
        self.merge_b = parameter(np.ones(()), "tam.merge_b")
        self.time_len = L
        self.merge_kernel = merge_kernel

    def tensors(self):
        return [self.avg_w1, self.avg_b1, self.avg_w2, self.avg_b2,
                self.std_w1, self.std_b1, self.std_w2, self.std_b2,
                self.merge_w, self.merge_b]


def tam_forward(h, p: TemporalAttentionParams):
    """(B, L, H) -> (B, H): attention-weighted sum over the time axis."""
    B, L, H = h.shape
    if L != p.time_len:
        raise NumericError(f"attention was built for {p.time_len} steps, got {L}")
    avg = ad.tmean(h, axis=2)                                  # (B, L)
    mu = ad.tmean(h, axis=2, keepdims=True)
    var = ad.tmean((h - mu) * (h - mu), axis=2)
    std = ad.sqrt(var + 1e-12)                                 # (B, L)

    a1 = ad.relu(avg @ p.avg_w1 + p.avg_b1) @ p.avg_w2 + p.avg_b2
    a2 = ad.relu(std @ p.std_w1 + p.std_b1) @ p.std_w2 + p.std_b2

    stacked = ad.stack([a1, a2], axis=1)                       # (B, 2, L)
    pad = (p.merge_kernel - 1) // 2
    padded = ad.pad_last(stacked, pad, pad)                    # (B, 2, L+2*pad)
    conv = None
    for c in range(2):
        channel = ad.select(padded, c, axis=1)                 # (B, L+2*pad)
        for k in range(p.merge_kernel):
            w_ck = ad.select(ad.select(p.merge_w, c, axis=0), k, axis=0)
            term = ad.narrow(channel, 1, k, L) * w_ck
            conv = term if conv is None else conv + term
    a = ad.relu(conv + p.merge_b)                              # (B, L)
    weights = ad.reshape(a, (B, L, 1))
    return ad.tsum(h * weights, axis=1)


class ClassifierParams:
    def __init__(self, rng, hidden: int, n_classes: int):
        self.W = parameter(uniform_init(rng, (hidden, n_classes), hidden), "cls.W")
        self.b = parameter(np.zeros(n_classes), "cls.b")

    def tensors(self):
        return [self.W, self.b]


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Numerically stable row-wise softmax (plain numpy)."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def classifier_forward(r, p: ClassifierParams):
    """Features (B, H) -> (logits tensor (B, k), probabilities ndarray)."""
    if not np.all(np.isfinite(r.data)):
        raise NumericError("non-finite features entering the classifier")
    logits = r @ p.W + p.b
    return logits, softmax_rows(logits.data)

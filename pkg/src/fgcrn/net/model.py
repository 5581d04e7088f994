"""The full network: multiscale depthwise conv front end, (bi)directional GRU,
temporal attention pooling, and a linear classifier head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import NumericError
from . import autodiff as ad
from .autodiff import Tensor
from .layers import (BatchNormParams, BiGruParams, ClassifierParams,
                     MultiscaleConvParams, TemporalAttentionParams,
                     bigru_forward, classifier_forward, msdc_forward,
                     softmax_rows, tam_forward)


@dataclass
class Trace:
    """Activations of one forward pass, sufficient to run backward once."""

    features: Tensor          # (B, H)
    logits: Tensor            # (B, k)
    probs: np.ndarray         # (B, k)
    predictions: np.ndarray   # (B,)
    version: int


class Network:
    def __init__(self, n_vars: int, window_len: int, hidden: int, n_classes: int,
                 seed: int = 0, norm: str = "both", use_tam: bool = True,
                 bidirectional: bool = True):
        rng = np.random.default_rng(seed)
        self.n_vars = n_vars
        self.window_len = window_len
        self.hidden = hidden
        self.n_classes = n_classes
        self.norm = norm
        self.use_tam = use_tam
        self.bidirectional = bidirectional

        self.msdc = MultiscaleConvParams(rng, n_vars, norm_mode=norm)
        self.gru = BiGruParams(rng, 4 * n_vars, hidden, bidirectional=bidirectional)
        self.out_steps = 2 * window_len if bidirectional else window_len
        self.tam = TemporalAttentionParams(rng, self.out_steps) if use_tam else None
        self.classifier = ClassifierParams(rng, hidden, n_classes)

        self.params: dict[str, Tensor] = {}
        blocks = [self.msdc, self.gru] + ([self.tam] if self.tam else []) + [self.classifier]
        for block in blocks:
            for t in block.tensors():
                self.params[t.name] = t
        self.version = 0

    @property
    def arch(self) -> dict:
        return {"n_vars": self.n_vars, "window_len": self.window_len,
                "hidden": self.hidden, "n_classes": self.n_classes,
                "norm": self.norm, "use_tam": self.use_tam,
                "bidirectional": self.bidirectional}

    def batch_norms(self) -> dict[str, BatchNormParams]:
        out = {}
        for size, norm in zip((3, 5, 7, 9), self.msdc.norms):
            if isinstance(norm, BatchNormParams):
                out[f"bn{size}"] = norm
        return out

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def forward(self, x: np.ndarray, training: bool, update_running: bool | None = None) -> Trace:
        """x: (B, V, T) standardized windows."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3 or x.shape[1] != self.n_vars or x.shape[2] != self.window_len:
            raise NumericError(
                f"expected input (B, {self.n_vars}, {self.window_len}), got {x.shape}")
        if update_running is None:
            update_running = training
        xt = Tensor(x)
        f = msdc_forward(xt, self.msdc, training, update_running)   # (B, 4V, T)
        f = ad.transpose(f, (0, 2, 1))                              # (B, T, 4V)
        h = bigru_forward(f, self.gru)                              # (B, L, H)
        if self.tam is not None:
            r = tam_forward(h, self.tam)                            # (B, H)
        else:
            r = ad.tsum(h, axis=1)
        logits, probs = classifier_forward(r, self.classifier)
        return Trace(features=r, logits=logits, probs=probs,
                     predictions=np.argmax(probs, axis=1), version=self.version)

    def check_trace(self, trace: Trace):
        if trace.version != self.version:
            raise NumericError("stale trace: parameters changed since this forward pass")

    def bump_version(self):
        self.version += 1

    def infer(self, x: np.ndarray, batch: int = 512):
        """Inference over an array of windows; returns (features, logits, probs)."""
        feats, logits = [], []
        with ad.no_grad():
            for start in range(0, len(x), batch):
                trace = self.forward(x[start:start + batch], training=False)
                feats.append(trace.features.data)
                logits.append(trace.logits.data)
        features = np.concatenate(feats, axis=0)
        logit_arr = np.concatenate(logits, axis=0)
        return features, logit_arr, softmax_rows(logit_arr)

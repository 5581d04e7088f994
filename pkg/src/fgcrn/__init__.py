"""Open-set fault diagnosis for multimode processes: compact recurrent-conv
feature extraction, per-class fine-grained cluster + Weibull-tail rejection,
reference baselines, and a built-in multimode CSTR simulator."""

__version__ = "0.1.0"

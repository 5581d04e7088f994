from .cstr import CHANNELS, FAULT_IDS, FAULT_NAMES, CstrScenario, PlantParams, simulate_cstr, steady_state
from .windows import (OpenSetTask, RawSeries, Standardizer, Window,
                      apply_standardizer, concat_series, fit_standardizer,
                      make_windows, split_open_set, stack_windows,
                      standardize_array)

__all__ = ["CHANNELS", "FAULT_IDS", "FAULT_NAMES", "CstrScenario", "PlantParams",
           "simulate_cstr", "steady_state", "OpenSetTask", "RawSeries",
           "Standardizer", "Window", "apply_standardizer", "concat_series",
           "fit_standardizer", "make_windows", "split_open_set",
           "stack_windows", "standardize_array"]

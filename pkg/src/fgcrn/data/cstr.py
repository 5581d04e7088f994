"""Multimode CSTR simulator: a 3-state jacketed reactor (concentration,
reactor temperature, jacket temperature) with Arrhenius kinetics and a PI
controller on the coolant flow, integrated with fixed-step RK4 at a 1 s
internal step and sampled once per minute.

Plant constants are repository defaults chosen so that every mode setpoint
has a distinct, stable closed-loop steady state and so that every fault
trajectory stays in the explicit integrator's stability region.

Measured channels (V = 7): C_i, T_i, C, T, Q_c, T_ci, T_c. Actuator/input
faults (F1, F2, F5, F6, F8, F9) enter the plant dynamics; sensor faults
(F3, F4, F7) perturb the recorded measurements only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, NumericError
from ..seeding import rng_from
from .windows import RawSeries, concat_series

CHANNELS = ("C_i", "T_i", "C", "T", "Q_c", "T_ci", "T_c")
N_CHANNELS = len(CHANNELS)

FAULT_IDS = {"N": 0, "F1": 1, "F2": 2, "F3": 3, "F4": 4,
             "F5": 5, "F6": 6, "F7": 7, "F8": 8, "F9": 9}
FAULT_NAMES = {v: k for k, v in FAULT_IDS.items()}

# drift slopes per minute since injection (fault law table)
RAMP_C_I = 0.001    # F1 on inlet concentration
RAMP_T_I = 0.05     # F2 on inlet temperature
RAMP_C_MEAS = 0.001  # F3 on measured reactor concentration
RAMP_T_MEAS = 0.05   # F4 on measured reactor temperature
RAMP_Q_C = 0.1      # F5 on coolant flow (downward)
RAMP_T_CI = 0.05    # F6 on coolant inlet temperature
RAMP_T_C_MEAS = 0.05  # F7 on measured jacket temperature
DECAY_A = 0.0005    # F8 heat-transfer fouling exponent
DECAY_B = 0.001     # F9 catalyst-activity decay exponent


@dataclass
class PlantParams:
    flow: float = 100.0                  # feed flow (L/min)
    volume: float = 100.0                # reactor volume (L)
    feed_conc: float = 1.0               # inlet concentration C_i0 (mol/L)
    feed_temp: float = 350.0             # inlet temperature T_i0 (K)
    coolant_inlet_temp: float = 293.0    # T_ci0 (K)
    jacket_volume: float = 20.0          # (L)
    rate_const: float = 9.2e4            # Arrhenius prefactor (1/min)
    activation_temp: float = 4000.0      # E/R (K)
    reaction_heat: float = 5.0e4         # -dH (J/mol), exothermic
    heat_capacity: float = 239.0         # rho*cp, reactor side (J/(L K))
    coolant_heat_capacity: float = 4180.0  # rho*cp, coolant side (J/(L K))
    heat_transfer: float = 47000.0       # UA (J/(min K))
    coolant_max: float = 400.0           # actuator clamp (L/min)
    pi_gain: float = 30.0                # (L/min)/K, direct acting
    pi_reset_min: float = 2.0            # integral time (min)
    internal_step_s: float = 1.0
    sample_period_s: float = 60.0


@dataclass
class CstrScenario:
    mode_setpoints: tuple[float, ...] = (350.0, 355.0)
    fault_id: str = "N"
    duration_min: int = 1200
    fault_start_min: int = 200
    noise_std: float = 0.003
    seed: int = 0
    plant: PlantParams = field(default_factory=PlantParams)

    def __post_init__(self):
        self.mode_setpoints = tuple(float(t) for t in self.mode_setpoints)
        if len(self.mode_setpoints) == 0:
            raise ConfigError("at least one mode setpoint is required")
        if self.fault_id not in FAULT_IDS:
            raise ConfigError(f"unknown fault id {self.fault_id!r}")
        if not (0 <= self.fault_start_min < self.duration_min):
            raise ConfigError("fault_start_min must lie inside the run duration")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be nonnegative")

    @property
    def fault_code(self) -> int:
        return FAULT_IDS[self.fault_id]


def steady_state(pp: PlantParams, setpoint: float):
    """Closed-form closed-loop steady state (C, T_c, Q_c) at a temperature
    setpoint; raises ConfigError when the cooling duty is infeasible."""
    q_v = pp.flow / pp.volume
    k = pp.rate_const * math.exp(-pp.activation_temp / setpoint)
    c_ss = q_v * pp.feed_conc / (q_v + k)
    heat_per_conc = pp.reaction_heat / pp.heat_capacity       # K per (mol/L)/min
    ua_r = pp.heat_transfer / (pp.heat_capacity * pp.volume)  # 1/min
    # reactor energy balance solved for the jacket temperature
    tc_ss = setpoint - (q_v * (pp.feed_temp - setpoint) + heat_per_conc * k * c_ss) / ua_r
    if tc_ss <= pp.coolant_inlet_temp:
        raise ConfigError(
            f"setpoint {setpoint} K needs a jacket at {tc_ss:.1f} K, below the "
            f"coolant inlet ({pp.coolant_inlet_temp} K); infeasible cooling duty")
    if tc_ss >= setpoint:
        raise ConfigError(
            f"setpoint {setpoint} K needs no cooling (jacket {tc_ss:.1f} K); "
            "outside the plant's intended operating envelope")
    qc_ss = pp.heat_transfer * (setpoint - tc_ss) / (
        pp.coolant_heat_capacity * (tc_ss - pp.coolant_inlet_temp))
    if not (0.0 < qc_ss < pp.coolant_max):
        raise ConfigError(
            f"steady coolant flow {qc_ss:.1f} L/min at setpoint {setpoint} K "
            f"is outside (0, {pp.coolant_max})")
    return c_ss, tc_ss, qc_ss


def _derivs(c, t, tc, c_in, t_in, t_cin, qc, a, b, pp: PlantParams):
    q_v = pp.flow / pp.volume
    k = pp.rate_const * b * math.exp(-pp.activation_temp / t)
    heat_per_conc = pp.reaction_heat / pp.heat_capacity
    ua_r = a * pp.heat_transfer / (pp.heat_capacity * pp.volume)
    ua_c = a * pp.heat_transfer / (pp.coolant_heat_capacity * pp.jacket_volume)
    dc = q_v * (c_in - c) - k * c
    dt = q_v * (t_in - t) + heat_per_conc * k * c - ua_r * (t - tc)
    dtc = (qc / pp.jacket_volume) * (t_cin - tc) + ua_c * (t - tc)
    return dc, dt, dtc


def _rk4_step(state, inputs, pp: PlantParams, h_min: float):
    c, t, tc = state
    k1 = _derivs(c, t, tc, *inputs, pp)
    k2 = _derivs(c + 0.5 * h_min * k1[0], t + 0.5 * h_min * k1[1],
                 tc + 0.5 * h_min * k1[2], *inputs, pp)
    k3 = _derivs(c + 0.5 * h_min * k2[0], t + 0.5 * h_min * k2[1],
                 tc + 0.5 * h_min * k2[2], *inputs, pp)
    k4 = _derivs(c + h_min * k3[0], t + h_min * k3[1],
                 tc + h_min * k3[2], *inputs, pp)
    return (c + h_min / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0]),
            t + h_min / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1]),
            tc + h_min / 6.0 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2]))


def _check_stability(pp: PlantParams, setpoint: float, ss, probe_min: float = 30.0,
                     offset_k: float = 1.0, tol_k: float = 0.1):
    """Kick the loop 1 K off its steady state and require it to settle back."""
    c_ss, tc_ss, qc_ss = ss
    state = (c_ss, setpoint + offset_k, tc_ss)
    integral = 0.0
    h_min = pp.internal_step_s / 60.0
    ki = pp.pi_gain / pp.pi_reset_min
    steps = int(round(probe_min / h_min))
    for _ in range(steps):
        err = state[1] - setpoint
        qc = qc_ss + pp.pi_gain * err + ki * integral
        if 0.0 < qc < pp.coolant_max:
            integral += err * h_min
        qc = min(max(qc, 0.0), pp.coolant_max)
        inputs = (pp.feed_conc, pp.feed_temp, pp.coolant_inlet_temp, qc, 1.0, 1.0)
        state = _rk4_step(state, inputs, pp, h_min)
        if not all(math.isfinite(s) for s in state):
            raise ConfigError(f"closed loop diverges near setpoint {setpoint} K")
    if abs(state[1] - setpoint) > tol_k:
        raise ConfigError(
            f"controller does not settle at setpoint {setpoint} K "
            f"(off by {abs(state[1] - setpoint):.3f} K after {probe_min:.0f} min)")


def _simulate_mode(scn: CstrScenario, mode_idx: int, setpoint: float):
    pp = scn.plant
    ss = steady_state(pp, setpoint)
    _check_stability(pp, setpoint, ss)
    c_ss, tc_ss, qc_ss = ss
    fault = scn.fault_code
    h_min = pp.internal_step_s / 60.0
    steps_per_sample = int(round(pp.sample_period_s / pp.internal_step_s))
    ki = pp.pi_gain / pp.pi_reset_min

    n = scn.duration_min
    values = np.zeros((N_CHANNELS, n))
    labels = np.zeros(n, dtype=np.int64)
    a_trace = np.ones(n)
    b_trace = np.ones(n)

    state = (c_ss, setpoint, tc_ss)
    integral = 0.0
    qc_frozen = None  # commanded coolant flow at F5 injection

    for minute in range(n):
        t_f = minute - scn.fault_start_min  # minutes since injection
        active = fault != 0 and t_f >= 0

        c_in = pp.feed_conc + (RAMP_C_I * t_f if active and fault == 1 else 0.0)
        t_in = pp.feed_temp + (RAMP_T_I * t_f if active and fault == 2 else 0.0)
        t_cin = pp.coolant_inlet_temp + (RAMP_T_CI * t_f if active and fault == 6 else 0.0)
        a = math.exp(-DECAY_A * t_f) if active and fault == 8 else 1.0
        b = math.exp(-DECAY_B * t_f) if active and fault == 9 else 1.0

        err = state[1] - setpoint
        commanded = qc_ss + pp.pi_gain * err + ki * integral
        commanded = min(max(commanded, 0.0), pp.coolant_max)
        if active and fault == 5:
            if qc_frozen is None:
                qc_frozen = commanded
            qc = min(max(qc_frozen - RAMP_Q_C * t_f, 0.0), pp.coolant_max)
        else:
            qc = commanded

        c, t, tc = state
        values[0, minute] = c_in
        values[1, minute] = t_in
        values[2, minute] = c + (RAMP_C_MEAS * t_f if active and fault == 3 else 0.0)
        values[3, minute] = t + (RAMP_T_MEAS * t_f if active and fault == 4 else 0.0)
        values[4, minute] = qc
        values[5, minute] = t_cin
        values[6, minute] = tc + (RAMP_T_C_MEAS * t_f if active and fault == 7 else 0.0)
        labels[minute] = fault if active else 0
        a_trace[minute] = a
        b_trace[minute] = b

        for sub in range(steps_per_sample):
            t_f_sub = (minute + sub * h_min) - scn.fault_start_min
            sub_active = fault != 0 and t_f_sub >= 0
            c_in = pp.feed_conc + (RAMP_C_I * t_f_sub if sub_active and fault == 1 else 0.0)
            t_in = pp.feed_temp + (RAMP_T_I * t_f_sub if sub_active and fault == 2 else 0.0)
            t_cin = pp.coolant_inlet_temp + (
                RAMP_T_CI * t_f_sub if sub_active and fault == 6 else 0.0)
            a = math.exp(-DECAY_A * t_f_sub) if sub_active and fault == 8 else 1.0
            b = math.exp(-DECAY_B * t_f_sub) if sub_active and fault == 9 else 1.0

            err = state[1] - setpoint
            commanded = qc_ss + pp.pi_gain * err + ki * integral
            saturated = commanded <= 0.0 or commanded >= pp.coolant_max
            if not saturated:
                integral += err * h_min
            commanded = min(max(commanded, 0.0), pp.coolant_max)
            if sub_active and fault == 5:
                if qc_frozen is None:
                    qc_frozen = commanded
                qc = min(max(qc_frozen - RAMP_Q_C * t_f_sub, 0.0), pp.coolant_max)
            else:
                qc = commanded

            state = _rk4_step(state, (c_in, t_in, t_cin, qc, a, b), pp, h_min)
            if not all(math.isfinite(s) for s in state):
                raise NumericError(
                    f"simulation diverged at minute {minute} (internal step {sub}, "
                    f"mode index {mode_idx}, fault {scn.fault_id})")

    if scn.noise_std > 0:
        rng = rng_from(scn.seed, scn.fault_code, mode_idx)
        scales = scn.noise_std * np.abs(np.array(
            [pp.feed_conc, pp.feed_temp, c_ss, setpoint, qc_ss,
             pp.coolant_inlet_temp, tc_ss]))
        values += rng.standard_normal(values.shape) * scales[:, None]

    meta = {"mode_index": mode_idx, "setpoint": setpoint, "fault": scn.fault_id,
            "steady": {"C": c_ss, "T": setpoint, "T_c": tc_ss, "Q_c": qc_ss},
            "param_trace": {"a": a_trace, "b": b_trace}}
    return RawSeries(values=values, labels=labels,
                     modes=np.full(n, mode_idx, dtype=np.int64),
                     sample_period=pp.sample_period_s,
                     channel_names=CHANNELS, meta=meta)


def simulate_cstr(scenario: CstrScenario) -> RawSeries:
    """One sub-series per mode setpoint, concatenated with per-step mode ids.

    Deterministic: identical (scenario, seed) produces bit-identical output.
    """
    parts = [_simulate_mode(scenario, i, sp)
             for i, sp in enumerate(scenario.mode_setpoints)]
    if len(parts) == 1:
        return parts[0]
    return concat_series(parts)

"""Synchronous generator with DC1A exciter and TGOV1 governor.

Nine differential states per machine, in this order::

    delta, d_omega, e_d_t, e_q_t, p_sv, p_m, E_fd, R_f, V_R

The stator is algebraic: the dq current follows from the transient EMFs and
the terminal phasor (v, theta) through a 2x2 linear system, and is rotated
into the common network frame and rescaled from machine to system base.

Every function takes the state as anything convertible to a length-9 float
array and returns plain numpy arrays; ``GeneratorState`` is a named view for
callers that prefer attribute access.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import NamedTuple

import numpy as np

from .errors import InvalidParametersError

N_STATES = 9
STATE_NAMES = ("delta", "d_omega", "e_d_t", "e_q_t", "p_sv", "p_m", "E_fd", "R_f", "V_R")
DELTA, D_OMEGA, E_D, E_Q, P_SV, P_M, E_FD, R_F, V_R = range(N_STATES)


@dataclass(frozen=True)
class GeneratorParams:
    """Machine, exciter and governor constants (machine base unless noted)."""

    H: float
    D: float
    x_d: float
    x_q: float
    x_d_t: float
    x_q_t: float
    T_d0_t: float
    T_q0_t: float
    r_s: float = 0.0
    S_n: float = 1.0
    K_E: float = 1.0
    T_E: float = 0.314
    K_F: float = 0.063
    T_F: float = 0.35
    K_A: float = 20.0
    T_A: float = 0.2
    T_1: float = 0.5
    T_2: float = 1.0
    T_3: float = 2.0
    R_droop: float = 0.05
    omega_n: float = 100.0 * np.pi

    def __post_init__(self):
        positive = ("H", "T_d0_t", "T_q0_t", "T_E", "T_F", "T_A", "T_1", "T_3",
                    "R_droop", "S_n", "omega_n")
        for name in positive:
            if not getattr(self, name) > 0:
                raise InvalidParametersError(f"{name} must be positive, got {getattr(self, name)}")
        if not self.x_d >= self.x_d_t > 0:
            raise InvalidParametersError("require x_d >= x_d_t > 0")
        if not self.x_q >= self.x_q_t > 0:
            raise InvalidParametersError("require x_q >= x_q_t > 0")
        if self.r_s < 0:
            raise InvalidParametersError("r_s must be nonnegative")
        if self.r_s ** 2 + self.x_d_t * self.x_q_t <= 0:
            raise InvalidParametersError("stator matrix is singular")

    @classmethod
    def from_dict(cls, data: dict) -> "GeneratorParams":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidParametersError(f"unknown generator parameters: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in data.items()})

    def scaled(self, **factors: float) -> "GeneratorParams":
        """Copy with selected parameters multiplied by the given factors."""
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        for name, factor in factors.items():
            values[name] = values[name] * factor
        return GeneratorParams(**values)


@dataclass(frozen=True)
class GeneratorSetpoints:
    p_ref: float
    v_ref: float

    def __post_init__(self):
        if not self.v_ref > 0:
            raise InvalidParametersError("v_ref must be positive")


class GeneratorState(NamedTuple):
    delta: float
    d_omega: float
    e_d_t: float
    e_q_t: float
    p_sv: float
    p_m: float
    E_fd: float
    R_f: float
    V_R: float

    @classmethod
    def from_array(cls, x) -> "GeneratorState":
        return cls(*(float(a) for a in np.asarray(x, dtype=float).reshape(N_STATES)))


class DqCurrent(NamedTuple):
    i_d: float
    i_q: float


class DQCurrent(NamedTuple):
    i_D: float
    i_Q: float


def stator_matrix(p: GeneratorParams) -> np.ndarray:
    """Coefficient matrix A of the stator equations ``A @ [i_d, i_q] = rhs``.

    Generator convention (current leaving the machine), so the transient
    reactances carry the inductive sign: ``v_d = e_d_t - r_s i_d + x_q_t i_q``
    and ``v_q = e_q_t - r_s i_q - x_d_t i_d``.
    """
    return np.array([[p.r_s, -p.x_q_t], [p.x_d_t, p.r_s]])


def _stator_inverse(p: GeneratorParams) -> np.ndarray:
    det = p.r_s ** 2 + p.x_d_t * p.x_q_t
    if det <= 0:
        raise InvalidParametersError("stator matrix is singular")
    return np.array([[p.r_s, p.x_q_t], [-p.x_d_t, p.r_s]]) / det


def _rotation(delta: float) -> np.ndarray:
    s, c = np.sin(delta), np.cos(delta)
    return np.array([[s, c], [-c, s]])


def _rotation_derivative(delta: float) -> np.ndarray:
    s, c = np.sin(delta), np.cos(delta)
    return np.array([[c, -s], [s, c]])


def _as_state(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (N_STATES,):
        raise ValueError(f"generator state must have {N_STATES} entries, got shape {x.shape}")
    return x


def dq_current(x, v: float, theta: float, p: GeneratorParams) -> DqCurrent:
    """Machine-frame stator current for state ``x`` at terminal phasor (v, theta)."""
    x = _as_state(x)
    ang = theta - x[DELTA]
    rhs = np.array([v * np.sin(ang) + x[E_D], -v * np.cos(ang) + x[E_Q]])
    i = _stator_inverse(p) @ rhs
    return DqCurrent(float(i[0]), float(i[1]))


def electric_power(x, c: DqCurrent, p: GeneratorParams) -> float:
    """Air-gap power; equals terminal power plus ``r_s |i|^2``."""
    x = _as_state(x)
    i_d, i_q = c
    return float(x[E_Q] * i_q + x[E_D] * i_d + (p.x_q_t - p.x_d_t) * i_d * i_q)


def machine_to_network(c: DqCurrent, delta: float, S_n: float, S_b: float) -> DQCurrent:
    """Rotate a dq current into the network frame and rescale it to system base."""
    if not (S_n > 0 and S_b > 0):
        raise InvalidParametersError("base powers must be positive")
    out = (S_n / S_b) * (_rotation(delta) @ np.asarray(c, dtype=float))
    return DQCurrent(float(out[0]), float(out[1]))


def generator_injection(x, v: float, theta: float, p: GeneratorParams, S_b: float) -> DQCurrent:
    x = _as_state(x)
    return machine_to_network(dq_current(x, v, theta, p), x[DELTA], p.S_n, S_b)


def sg_derivatives(x, v: float, theta: float, p: GeneratorParams,
                   sp: GeneratorSetpoints) -> np.ndarray:
    """Right-hand side of the nine machine/exciter/governor ODEs.

    The q-axis transient EMF equation uses the textbook form
    ``(E_fd - e_q_t - (x_d - x_d_t) i_d) / T_d0_t``.
    """
    x = _as_state(x)
    c = dq_current(x, v, theta, p)
    i_d, i_q = c
    p_e = electric_power(x, c, p)
    governor_in = sp.p_ref - x[D_OMEGA] / p.R_droop - x[P_SV]
    kf_tf = p.K_F / p.T_F
    return np.array([
        p.omega_n * x[D_OMEGA],
        (x[P_M] - p_e - p.D * x[D_OMEGA]) / (2.0 * p.H),
        (-x[E_D] + (p.x_q - p.x_q_t) * i_q) / p.T_q0_t,
        (x[E_FD] - x[E_Q] - (p.x_d - p.x_d_t) * i_d) / p.T_d0_t,
        governor_in / p.T_1,
        ((p.T_2 / p.T_1) * governor_in + x[P_SV] - x[P_M]) / p.T_3,
        (-p.K_E * x[E_FD] + x[V_R]) / p.T_E,
        (-x[R_F] + kf_tf * x[E_FD]) / p.T_F,
        (-x[V_R] + p.K_A * x[R_F] - p.K_A * kf_tf * x[E_FD] + p.K_A * (sp.v_ref - v)) / p.T_A,
    ])


def euler_step(x, v: float, theta: float, p: GeneratorParams, sp: GeneratorSetpoints,
               dt: float) -> np.ndarray:
    """One forward-Euler step with the terminal phasor frozen over the step."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    x = _as_state(x)
    return x + dt * sg_derivatives(x, v, theta, p, sp)


# --- analytic Jacobians -----------------------------------------------------

def _current_and_partials(x: np.ndarray, v: float, theta: float, p: GeneratorParams):
    """dq current and its partials w.r.t. (x[0..8], v, theta) as a 2x11 array."""
    ang = theta - x[DELTA]
    s, c = np.sin(ang), np.cos(ang)
    Ainv = _stator_inverse(p)
    rhs = np.array([v * s + x[E_D], -v * c + x[E_Q]])
    i = Ainv @ rhs
    drhs = np.zeros((2, N_STATES + 2))
    drhs[:, DELTA] = [-v * c, -v * s]
    drhs[:, E_D] = [1.0, 0.0]
    drhs[:, E_Q] = [0.0, 1.0]
    drhs[:, N_STATES] = [s, -c]
    drhs[:, N_STATES + 1] = [v * c, v * s]
    return i, Ainv @ drhs


def sg_jacobian(x, v: float, theta: float, p: GeneratorParams,
                sp: GeneratorSetpoints) -> np.ndarray:
    """Jacobian of :func:`sg_derivatives` w.r.t. (x, v, theta); shape (9, 11)."""
    x = _as_state(x)
    i, di = _current_and_partials(x, v, theta, p)
    i_d, i_q = i
    dx_diff = p.x_q_t - p.x_d_t
    dpe = (x[E_D] + dx_diff * i_q) * di[0] + (x[E_Q] + dx_diff * i_d) * di[1]
    dpe[E_D] += i_d
    dpe[E_Q] += i_q

    J = np.zeros((N_STATES, N_STATES + 2))
    J[DELTA, D_OMEGA] = p.omega_n

    J[D_OMEGA] = -dpe / (2.0 * p.H)
    J[D_OMEGA, P_M] += 1.0 / (2.0 * p.H)
    J[D_OMEGA, D_OMEGA] += -p.D / (2.0 * p.H)

    J[E_D] = (p.x_q - p.x_q_t) * di[1] / p.T_q0_t
    J[E_D, E_D] += -1.0 / p.T_q0_t

    J[E_Q] = -(p.x_d - p.x_d_t) * di[0] / p.T_d0_t
    J[E_Q, E_FD] += 1.0 / p.T_d0_t
    J[E_Q, E_Q] += -1.0 / p.T_d0_t

    J[P_SV, D_OMEGA] = -1.0 / (p.R_droop * p.T_1)
    J[P_SV, P_SV] = -1.0 / p.T_1

    lead = p.T_2 / p.T_1
    J[P_M, D_OMEGA] = -lead / (p.R_droop * p.T_3)
    J[P_M, P_SV] = (1.0 - lead) / p.T_3
    J[P_M, P_M] = -1.0 / p.T_3

    J[E_FD, E_FD] = -p.K_E / p.T_E
    J[E_FD, V_R] = 1.0 / p.T_E

    J[R_F, R_F] = -1.0 / p.T_F
    J[R_F, E_FD] = p.K_F / p.T_F ** 2

    J[V_R, V_R] = -1.0 / p.T_A
    J[V_R, R_F] = p.K_A / p.T_A
    J[V_R, E_FD] = -p.K_A * p.K_F / (p.T_F * p.T_A)
    J[V_R, N_STATES] = -p.K_A / p.T_A
    return J


def injection_jacobian(x, v: float, theta: float, p: GeneratorParams, S_b: float) -> np.ndarray:
    """Jacobian of :func:`generator_injection` w.r.t. (x, v, theta); shape (2, 11)."""
    x = _as_state(x)
    i, di = _current_and_partials(x, v, theta, p)
    scale = p.S_n / S_b
    J = scale * (_rotation(x[DELTA]) @ di)
    J[:, DELTA] += scale * (_rotation_derivative(x[DELTA]) @ i)
    return J


def euler_jacobian(x, v: float, theta: float, p: GeneratorParams, sp: GeneratorSetpoints,
                   dt: float) -> np.ndarray:
    """Jacobian of :func:`euler_step` w.r.t. (x, v, theta); shape (9, 11)."""
    J = dt * sg_jacobian(x, v, theta, p, sp)
    J[:, :N_STATES] += np.eye(N_STATES)
    return J

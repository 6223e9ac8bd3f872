"""Ground-truth generation: power flow, generator initialization, DAE
integration, and PMU data synthesis."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import genmodel as gm
from .errors import ConvergenceError
from .network import (MeasurementSpec, NetworkModel, NetworkState, admittance_matrix,
                      channel_labels, injection_jacobian, injections, measurement_model)

log = logging.getLogger(__name__)

SLACK, PV, PQ = "slack", "pv", "pq"


@dataclass(frozen=True)
class Generator:
    """A machine model attached to a network node."""

    node: int
    params: gm.GeneratorParams
    setpoints: gm.GeneratorSetpoints | None = None


@dataclass(frozen=True)
class BusSchedule:
    """Power-flow data for one node. P and Q are net injections (generation - load)."""

    kind: str = PQ
    P: float = 0.0
    Q: float = 0.0
    v: float = 1.0
    theta: float = 0.0

    def __post_init__(self):
        if self.kind not in (SLACK, PV, PQ):
            raise ValueError(f"unknown bus type {self.kind!r}")


# --- steady state -------------------------------------------------------------

def power_flow(net: NetworkModel, schedule: Sequence[BusSchedule], tol: float = 1e-10,
               max_iter: int = 50) -> NetworkState:
    """Newton-Raphson power flow in polar coordinates."""
    n = net.n
    if len(schedule) != n:
        raise ValueError("schedule must have one entry per node")
    kinds = [b.kind for b in schedule]
    if kinds.count(SLACK) != 1:
        raise ValueError("power flow needs exactly one slack node")
    Y = admittance_matrix(net)
    vm = np.array([b.v if b.kind in (SLACK, PV) else 1.0 for b in schedule])
    va = np.full(n, schedule[kinds.index(SLACK)].theta)
    P = np.array([b.P for b in schedule])
    Q = np.array([b.Q for b in schedule])
    pvpq = [i for i, k in enumerate(kinds) if k != SLACK]
    pq = [i for i, k in enumerate(kinds) if k == PQ]

    def mismatch(V):
        S = V * np.conj(Y @ V)
        return np.concatenate([S.real[pvpq] - P[pvpq], S.imag[pq] - Q[pq]])

    V = vm * np.exp(1j * va)
    F = mismatch(V)
    for it in range(max_iter + 1):
        err = np.max(np.abs(F)) if F.size else 0.0
        if err <= tol:
            return NetworkState(np.abs(V), np.angle(V) if n else va)
        if it == max_iter:
            break
        Ibus = Y @ V
        diagV = np.diag(V)
        dS_dVa = 1j * diagV @ np.conj(np.diag(Ibus) - Y @ diagV)
        dS_dVm = diagV @ np.conj(Y @ np.diag(V / np.abs(V))) + np.conj(np.diag(Ibus)) @ np.diag(V / np.abs(V))
        J = np.block([
            [dS_dVa.real[np.ix_(pvpq, pvpq)], dS_dVm.real[np.ix_(pvpq, pq)]],
            [dS_dVa.imag[np.ix_(pq, pvpq)], dS_dVm.imag[np.ix_(pq, pq)]],
        ])
        dx = np.linalg.solve(J, -F)
        va = np.angle(V)
        vm = np.abs(V)
        va[pvpq] += dx[:len(pvpq)]
        vm[pq] += dx[len(pvpq):]
        V = vm * np.exp(1j * va)
        F = mismatch(V)
    raise ConvergenceError(f"power flow did not converge in {max_iter} iterations "
                           f"(max mismatch {err:.3e})", mismatch=float(err))


def power_injection(s: NetworkState, net: NetworkModel) -> np.ndarray:
    """Complex power S = V conj(I) injected at every node."""
    I = injections(s, net)
    return s.phasors * np.conj(I[:, 0] + 1j * I[:, 1])


def init_generator(p: gm.GeneratorParams, v: float, theta: float, P: float, Q: float,
                   S_b: float) -> tuple[np.ndarray, gm.GeneratorSetpoints]:
    """Equilibrium state and setpoints delivering (P, Q) at terminal phasor v∠theta.

    The rotor angle is that of ``V + (r_s + j x_q) I``, which lies on the
    q axis once e_d_t sits at its steady-state value.
    """
    V = v * np.exp(1j * theta)
    I = np.conj((P + 1j * Q) / V) * S_b / p.S_n
    E = V + (p.r_s + 1j * p.x_q) * I
    if abs(E) < 1e-12:
        raise ConvergenceError("generator back-solve is singular (no q-axis direction)")
    delta = float(np.angle(E))
    idq = I * np.exp(-1j * (delta - np.pi / 2))
    i_d, i_q = idq.real, idq.imag
    e_d = (p.x_q - p.x_q_t) * i_q
    e_q = v * np.cos(theta - delta) + p.r_s * i_q + p.x_d_t * i_d
    E_fd = e_q + (p.x_d - p.x_d_t) * i_d
    p_e = e_q * i_q + e_d * i_d + (p.x_q_t - p.x_d_t) * i_d * i_q
    V_R = p.K_E * E_fd
    R_f = p.K_F / p.T_F * E_fd
    x = np.array([delta, 0.0, e_d, e_q, p_e, p_e, E_fd, R_f, V_R])
    return x, gm.GeneratorSetpoints(p_ref=float(p_e), v_ref=float(v + V_R / p.K_A))


def initialize(net: NetworkModel, gens: Sequence[Generator], schedule: Sequence[BusSchedule],
               loads: dict | None = None):
    """Power flow plus generator back-solve.

    ``loads`` maps node -> (P, Q) consumed; those loads are returned as constant
    shunt admittances at the solved voltage so the network can carry them.
    Returns ``(state, x0 (G, 9), generators with setpoints, shunt dict)``.
    """
    s = power_flow(net, schedule)
    S = power_injection(s, net)
    x0 = []
    out = []
    for g in gens:
        x, sp = init_generator(g.params, s.v[g.node], s.theta[g.node],
                               S[g.node].real, S[g.node].imag, net.S_b)
        x0.append(x)
        out.append(replace(g, setpoints=sp))
    shunts = {}
    for node, (Pl, Ql) in (loads or {}).items():
        shunts[node] = (Pl / s.v[node] ** 2, -Ql / s.v[node] ** 2)
    return s, np.array(x0).reshape(len(gens), gm.N_STATES), out, shunts


# --- scenarios and trajectories ------------------------------------------------------

@dataclass(frozen=True)
class Event:
    """A disturbance. ``kind`` is ``load_step`` (node, d_g, d_b) or
    ``setpoint_step`` (gen index into the generator list, d_p_ref, d_v_ref)."""

    time: float
    kind: str
    target: int
    d1: float = 0.0
    d2: float = 0.0

    def __post_init__(self):
        if self.kind not in ("load_step", "setpoint_step"):
            raise ValueError(f"unknown event kind {self.kind!r}")


@dataclass(frozen=True)
class BadData:
    channel: int
    value: float
    t_start: float


@dataclass(frozen=True)
class Scenario:
    duration: float
    dt_sim: float = 1e-3
    F_s: float = 100.0
    disturbances: tuple = ()
    noise_seed: int = 0
    bad_data: BadData | None = None
    mismatch: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (self.dt_sim > 0 and self.F_s > 0 and self.duration >= 0):
            raise ValueError("duration, dt_sim and F_s must be positive")
        ratio = 1.0 / (self.F_s * self.dt_sim)
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ValueError("1/F_s must be an integer multiple of dt_sim")
        for ev in self.disturbances:
            if not 0 <= ev.time <= self.duration:
                raise ValueError(f"event at t={ev.time} outside [0, {self.duration}]")

    @property
    def steps_per_sample(self) -> int:
        return int(round(1.0 / (self.F_s * self.dt_sim)))


@dataclass(frozen=True, eq=False)
class Trajectory:
    """States stored on the PMU grid. ``x`` has shape (K, G, 9)."""

    times: np.ndarray
    x: np.ndarray
    v: np.ndarray
    theta: np.ndarray
    gen_nodes: tuple = ()

    def __len__(self):
        return self.times.size

    def network_state(self, k: int) -> NetworkState:
        return NetworkState(self.v[k], self.theta[k])

    def gen_state(self, k: int, g: int) -> gm.GeneratorState:
        return gm.GeneratorState.from_array(self.x[k, g])


@dataclass(frozen=True, eq=False)
class MeasurementFrame:
    t: float
    values: np.ndarray
    valid: np.ndarray

    @classmethod
    def of(cls, t: float, values) -> "MeasurementFrame":
        values = np.array(values, dtype=float)
        return cls(float(t), values, np.ones(values.size, dtype=bool))

    def with_invalid(self, channel: int) -> "MeasurementFrame":
        valid = self.valid.copy()
        valid[channel] = False
        return MeasurementFrame(self.t, self.values, valid)


class _DAE:
    """Generator ODEs coupled to the network current balance at every node."""

    def __init__(self, net: NetworkModel, gens: Sequence[Generator]):
        self.net = net
        self.gens = list(gens)
        self.ng = len(self.gens)
        self.nx = gm.N_STATES * self.ng

    def split(self, z):
        return z[:self.nx].reshape(self.ng, gm.N_STATES), NetworkState.from_vector(z[self.nx:])

    def f(self, z):
        x, s = self.split(z)
        out = np.empty(self.nx)
        for k, g in enumerate(self.gens):
            out[9 * k:9 * k + 9] = gm.sg_derivatives(x[k], s.v[g.node], s.theta[g.node],
                                                     g.params, g.setpoints)
        return out

    def f_jac(self, z):
        x, s = self.split(z)
        n = self.net.n
        J = np.zeros((self.nx, self.nx + 2 * n))
        for k, g in enumerate(self.gens):
            Jg = gm.sg_jacobian(x[k], s.v[g.node], s.theta[g.node], g.params, g.setpoints)
            J[9 * k:9 * k + 9, 9 * k:9 * k + 9] = Jg[:, :9]
            J[9 * k:9 * k + 9, self.nx + g.node] = Jg[:, 9]
            J[9 * k:9 * k + 9, self.nx + n + g.node] = Jg[:, 10]
        return J

    def g(self, z):
        x, s = self.split(z)
        res = injections(s, self.net).copy()
        for k, gen in enumerate(self.gens):
            res[gen.node] -= gm.generator_injection(x[k], s.v[gen.node], s.theta[gen.node],
                                                     gen.params, self.net.S_b)
        return res.ravel()

    def g_jac(self, z):
        x, s = self.split(z)
        n = self.net.n
        J = np.zeros((2 * n, self.nx + 2 * n))
        J[:, self.nx:] = injection_jacobian(s, self.net)
        for k, gen in enumerate(self.gens):
            Jg = gm.injection_jacobian(x[k], s.v[gen.node], s.theta[gen.node], gen.params, self.net.S_b)
            rows = slice(2 * gen.node, 2 * gen.node + 2)
            J[rows, 9 * k:9 * k + 9] -= Jg[:, :9]
            J[rows, self.nx + gen.node] -= Jg[:, 9]
            J[rows, self.nx + n + gen.node] -= Jg[:, 10]
        return J

    def solve_algebraic(self, z, tol=1e-12, max_iter=30):
        z = z.copy()
        for _ in range(max_iter):
            r = self.g(z)
            if np.max(np.abs(r)) <= tol:
                return z
            J = self.g_jac(z)[:, self.nx:]
            z[self.nx:] -= np.linalg.solve(J, r)
        raise ConvergenceError("network re-initialization did not converge",
                               mismatch=float(np.max(np.abs(self.g(z)))))


def _newton(residual, jacobian, z0, tol, max_iter, step):
    z = z0.copy()
    for _ in range(max_iter):
        r = residual(z)
        dz = np.linalg.solve(jacobian(z), -r)
        z += dz
        if np.max(np.abs(dz)) <= tol:
            return z
    err = float(np.max(np.abs(residual(z))))
    if err <= 1e-10:
        return z
    raise ConvergenceError(f"Newton corrector diverged at step {step} (residual {err:.3e})",
                           mismatch=err, step=step)


def simulate(net: NetworkModel, gens: Sequence[Generator], x0: np.ndarray, s0: NetworkState,
             sc: Scenario, method: str = "trapezoid", dt: float | None = None) -> Trajectory:
    """Integrate the power-system DAE and sample it on the 1/F_s grid.

    ``net`` must carry every load as a shunt: all non-generator nodes are
    treated as zero-injection in the truth model. ``method`` is ``trapezoid``
    (simultaneous implicit trapezoidal rule) or ``euler`` (forward Euler on the
    machines with the network solved exactly at each instant, i.e. the
    estimator's own discrete model).
    """
    if method not in ("trapezoid", "euler"):
        raise ValueError(f"unknown integration method {method!r}")
    dt = sc.dt_sim if dt is None else dt
    per_sample = int(round(1.0 / (sc.F_s * dt)))
    if abs(per_sample * dt * sc.F_s - 1.0) > 1e-9:
        raise ValueError("1/F_s must be an integer multiple of the step")
    n_steps = int(round(sc.duration / dt))
    events: dict[int, list[Event]] = {}
    for ev in sc.disturbances:
        events.setdefault(int(round(ev.time / dt)), []).append(ev)

    gens = list(gens)
    dae = _DAE(net, gens)
    z = np.concatenate([np.asarray(x0, dtype=float).ravel(), s0.as_vector()])
    nx = dae.nx
    if 0 in events:
        dae, gens = _apply_events(dae, gens, events[0])
        z = dae.solve_algebraic(z)

    times, xs, ys = [], [], []

    def store(step, z):
        times.append(step * dt)
        xs.append(z[:nx].reshape(len(gens), gm.N_STATES).copy())
        ys.append(z[nx:].copy())

    store(0, z)
    f_prev = dae.f(z)
    eye = np.eye(nx)
    for step in range(1, n_steps + 1):
        if method == "trapezoid":
            z_prev = z

            def residual(zn):
                return np.concatenate([zn[:nx] - z_prev[:nx] - 0.5 * dt * (dae.f(zn) + f_prev),
                                       dae.g(zn)])

            def jacobian(zn):
                Jf = dae.f_jac(zn)
                top = -0.5 * dt * Jf
                top[:, :nx] += eye
                return np.vstack([top, dae.g_jac(zn)])

            z = _newton(residual, jacobian, z_prev + np.concatenate([dt * f_prev, np.zeros(z.size - nx)]),
                        tol=1e-11, max_iter=25, step=step)
        else:
            z = z.copy()
            z[:nx] += dt * f_prev
            z = dae.solve_algebraic(z)
        if step in events:
            dae, gens = _apply_events(dae, gens, events[step])
            z = dae.solve_algebraic(z)
        f_prev = dae.f(z)
        if step % per_sample == 0:
            store(step, z)

    n = net.n
    Y = np.array(ys)
    return Trajectory(np.round(np.array(times), 9), np.array(xs), Y[:, :n], Y[:, n:],
                      tuple(g.node for g in gens))


def _apply_events(dae: _DAE, gens: list, evs: Sequence[Event]):
    net = dae.net
    gens = list(gens)
    for ev in evs:
        if ev.kind == "load_step":
            net = net.with_shunt_change(ev.target, ev.d1, ev.d2)
        else:
            g = gens[ev.target]
            sp = gm.GeneratorSetpoints(g.setpoints.p_ref + ev.d1, g.setpoints.v_ref + ev.d2)
            gens[ev.target] = replace(g, setpoints=sp)
        log.debug("applied %s at t=%.4f", ev.kind, ev.time)
    return _DAE(net, gens), gens


# --- PMU synthesis --------------------------------------------------------------------

def synthesize_pmu(tr: Trajectory, net: NetworkModel, specs: Sequence[MeasurementSpec],
                   seed: int) -> list[MeasurementFrame]:
    """Noisy PMU frames from a truth trajectory.

    ``net`` is the measurement network (without unknown load admittances), so
    injection channels report the current delivered by the attached device.
    Magnitude and phase get independent zero-mean Gaussian noise of the
    channel's variance.
    """
    for spec in specs:
        spec.validate(net)
    rng = np.random.default_rng(seed)
    std = np.repeat(np.sqrt([s.variance for s in specs]), 2)
    noise = rng.standard_normal((len(tr), 2 * len(specs))) * std
    frames = []
    for k in range(len(tr)):
        values, _, _ = measurement_model(tr.network_state(k), net, specs)
        frames.append(MeasurementFrame.of(tr.times[k], values + noise[k]))
    return frames


def inject_bad_data(frames: Sequence[MeasurementFrame], channel: int, value: float,
                    t_start: float) -> list[MeasurementFrame]:
    """Overwrite one scalar channel with a constant from ``t_start`` on."""
    if frames and not 0 <= channel < frames[0].values.size:
        raise IndexError(f"unknown channel {channel}")
    out = []
    for fr in frames:
        if fr.t >= t_start - 1e-9:
            values = fr.values.copy()
            values[channel] = value
            fr = MeasurementFrame(fr.t, values, fr.valid)
        out.append(fr)
    return out


# --- CSV output -------------------------------------------------------------------------

def write_trajectory_csv(path, tr: Trajectory):
    """Columns: t, then per generator (1-based node label) its nine states,
    then v1..vn, theta1..thetan."""
    n = tr.v.shape[1]
    header = ["t"]
    for node in tr.gen_nodes:
        header += [f"G{node + 1}.{name}" for name in gm.STATE_NAMES]
    header += [f"v{i + 1}" for i in range(n)] + [f"theta{i + 1}" for i in range(n)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for k in range(len(tr)):
            row = [f"{tr.times[k]:.6f}"]
            row += [repr(float(a)) for a in tr.x[k].ravel()]
            row += [repr(float(a)) for a in tr.v[k]] + [repr(float(a)) for a in tr.theta[k]]
            w.writerow(row)


def write_frames_csv(path, frames: Sequence[MeasurementFrame], specs: Sequence[MeasurementSpec]):
    """Columns: t, then (magnitude, phase) per channel in configuration order."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + channel_labels(specs))
        for fr in frames:
            w.writerow([f"{fr.t:.6f}"] + [repr(float(a)) for a in fr.values])

"""Moving-horizon estimation of generator states and nodal voltages.

The decision vector groups variables by time instant. Each of the L instants
contributes ``9 * G`` generator states (generator by generator) followed by
the network state ``[v_0..v_{n-1}, theta_0..theta_{n-1}]``.

Residual rows are stacked in a fixed order:

1. arrival cost ``x_first - x_bar``;
2. PMU residuals ``y_k - h(v_k, theta_k)`` frame by frame, with phases wrapped
   to (-pi, pi];
3. process residuals ``x_{k+1} - f(x_k, v_k, theta_k)`` step by step, generator
   by generator;
4. coupling residuals ``g_n,i(v_k, theta_k) - g_g(x_ik, v_ik, theta_ik)``,
   instant by instant, generator by generator.

Constraint rows are the zero-injection currents, instant by instant and then
node by node in ascending order. Weights are inverse-variance-like, so a
larger weight means a more trusted residual.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg as sla

from . import genmodel as gm
from .errors import SingularKKTError, UnobservableError
from .network import (VOLTAGE, MeasurementSpec, NetworkModel, NetworkState, channel_labels,
                      injection_jacobian, injections, measurement_model, wrap_angle)
from .simulator import Generator, MeasurementFrame, Trajectory

log = logging.getLogger(__name__)

FAST_STATES = (gm.DELTA, gm.D_OMEGA, gm.E_D, gm.E_Q)
RCOND_LIMIT = 1e-13


def _default_process_weights() -> np.ndarray:
    w = np.full(gm.N_STATES, 1e4)
    w[list(FAST_STATES)] = 1e6
    return w


@dataclass
class MHEConfig:
    """Tuning knobs. Scalars broadcast; per-state weights take nine entries.

    ``W_meas`` of ``None`` means ``1 / variance`` of each PMU channel.
    """

    L: int = 3
    W_arrival: float | Sequence[float] = 1e2
    W_meas: float | None = None
    W_process: float | Sequence[float] = field(default_factory=_default_process_weights)
    W_coupling: float = 1e4
    max_iter: int = 20
    tol: float = 1e-8
    dt: float = 0.01
    damping: bool = True

    def __post_init__(self):
        if self.L < 1:
            raise ValueError("horizon length must be at least 1")
        if not (self.tol > 0 and self.dt > 0 and self.max_iter >= 1):
            raise ValueError("tol, dt and max_iter must be positive")
        self.W_arrival = self._per_state(self.W_arrival, "W_arrival")
        self.W_process = self._per_state(self.W_process, "W_process")
        if not self.W_coupling > 0 or (self.W_meas is not None and not self.W_meas > 0):
            raise ValueError("weights must be strictly positive")

    @staticmethod
    def _per_state(w, name) -> np.ndarray:
        w = np.broadcast_to(np.asarray(w, dtype=float), (gm.N_STATES,)).copy()
        if np.any(w <= 0):
            raise ValueError(f"{name} must be strictly positive")
        return w


@dataclass(frozen=True, eq=False)
class Prior:
    x_bar: np.ndarray


@dataclass(eq=False)
class EstimationProblem:
    """Residuals, constraints, Jacobians and weights at one iterate."""

    h: np.ndarray
    c: np.ndarray
    H: np.ndarray
    C: np.ndarray
    w: np.ndarray
    blocks: dict
    pmu_index: np.ndarray  # (rows, 2): (frame in window, scalar channel)

    @property
    def cost(self) -> float:
        return float(np.sum(self.w * self.h ** 2))


@dataclass(frozen=True, eq=False)
class KKTSolution:
    dX: np.ndarray
    lam: np.ndarray
    rcond: float


@dataclass(eq=False)
class Estimate:
    times: np.ndarray
    x: np.ndarray  # (L, G, 9)
    v: np.ndarray  # (L, n)
    theta: np.ndarray  # (L, n)
    X: np.ndarray
    lam: np.ndarray
    converged: bool
    iterations: int
    problem: EstimationProblem
    window: list
    history: list = field(default_factory=list)

    @property
    def cost(self) -> float:
        return self.problem.cost

    @property
    def constraint_violation(self) -> float:
        return float(np.max(np.abs(self.problem.c))) if self.problem.c.size else 0.0

    def network_state(self, k: int = -1) -> NetworkState:
        return NetworkState(self.v[k], self.theta[k])


# --- linear algebra ----------------------------------------------------------------

def _kkt_matrix(H, C, w, mu=0.0):
    N = H.T @ (w[:, None] * H) if H.size else np.zeros((H.shape[1], H.shape[1]))
    if mu:
        N = N + mu * np.eye(N.shape[0])
    p = C.shape[0]
    K = np.zeros((N.shape[0] + p, N.shape[0] + p))
    K[:N.shape[0], :N.shape[0]] = N
    K[N.shape[0]:, :N.shape[0]] = C
    K[:N.shape[0], N.shape[0]:] = C.T
    return K


class KKTFactor:
    """LU factorization of the symmetrically equilibrated KKT matrix.

    Raises :class:`SingularKKTError` when the reciprocal condition estimate
    of the scaled matrix falls below ``RCOND_LIMIT``.
    """

    def __init__(self, H, C, w, mu=0.0):
        H = np.atleast_2d(H)
        self.n = H.shape[1]
        K = _kkt_matrix(H, C, w, mu)
        if K.shape[0] == 0:
            raise SingularKKTError("empty KKT system")
        scale = np.max(np.abs(K), axis=1)
        if np.any(scale == 0):
            raise SingularKKTError("KKT matrix has a zero row", condition=np.inf)
        self.s = 1.0 / np.sqrt(scale)
        Ks = self.s[:, None] * K * self.s[None, :]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", sla.LinAlgWarning)
            self.lu = sla.lu_factor(Ks, check_finite=True)
        anorm = np.max(np.sum(np.abs(Ks), axis=0))
        rcond, _ = sla.lapack.dgecon(self.lu[0], anorm, norm="1")
        self.rcond = float(rcond)
        if not rcond > RCOND_LIMIT:
            raise SingularKKTError(f"KKT matrix is singular (rcond {rcond:.2e})",
                                   condition=1.0 / rcond if rcond > 0 else np.inf)

    def solve(self, rhs):
        rhs = np.asarray(rhs, dtype=float)
        s = self.s if rhs.ndim == 1 else self.s[:, None]
        return s * sla.lu_solve(self.lu, s * rhs)


def gauss_newton_step(h, c, H, C, w, mu: float = 0.0) -> KKTSolution:
    """One constrained Gauss-Newton step.

    With ``H = dh/dX`` this solves::

        [H'WH + mu I  C'] [ dX ]   [-H'W h]
        [C            0 ] [-lam] = [-c    ]

    so that at a stationary point ``H'W h = C' lam``.
    """
    h = np.asarray(h, dtype=float)
    c = np.asarray(c, dtype=float)
    H = np.asarray(H, dtype=float).reshape(h.size, -1)
    C = np.asarray(C, dtype=float).reshape(c.size, H.shape[1])
    w = np.asarray(w, dtype=float)
    fac = KKTFactor(H, C, w, mu)
    sol = fac.solve(np.concatenate([-(H.T @ (w * h)), -c]))
    return KKTSolution(sol[:fac.n], -sol[fac.n:], fac.rcond)


# --- the estimator -------------------------------------------------------------------

class MovingHorizonEstimator:
    """Sliding-window constrained least-squares estimator.

    ``gens`` are the generator models known to the estimator (possibly none);
    their nodes get coupling residuals. Zero-injection nodes of ``net`` give
    hard constraints; every other node's current balance is left out.
    ``setpoints`` optionally maps a timestamp to the list of generator
    setpoints in force at that instant.
    """

    def __init__(self, net: NetworkModel, gens: Sequence[Generator], specs: Sequence[MeasurementSpec],
                 cfg: MHEConfig, setpoints: Callable[[float], Sequence[gm.GeneratorSetpoints]] | None = None):
        self.net = net
        self.gens = list(gens)
        self.specs = list(specs)
        self.cfg = cfg
        self.setpoints = setpoints
        for spec in self.specs:
            spec.validate(net)
        for g in self.gens:
            if g.setpoints is None and setpoints is None:
                raise ValueError(f"generator at node {g.node} has no setpoints")
        self.G = len(self.gens)
        self.n = net.n
        self.m = len(self.specs)
        self.zero_nodes = sorted(net.zero_nodes)
        self.nxg = gm.N_STATES * self.G
        self.nk = self.nxg + 2 * self.n
        if self.m:
            var = np.array([s.variance for s in self.specs])
            if cfg.W_meas is None and np.any(var <= 0):
                raise ValueError("zero-variance channels need an explicit W_meas")
            self.w_meas = np.repeat(1.0 / var if cfg.W_meas is None else np.full(self.m, cfg.W_meas), 2)
        else:
            self.w_meas = np.zeros(0)

    @property
    def dim(self) -> int:
        return self.cfg.L * self.nk

    # index helpers
    def x_slice(self, k: int, g: int) -> slice:
        a = k * self.nk + gm.N_STATES * g
        return slice(a, a + gm.N_STATES)

    def y_slice(self, k: int) -> slice:
        a = k * self.nk + self.nxg
        return slice(a, a + 2 * self.n)

    def pack(self, xs: np.ndarray, states: Sequence[NetworkState]) -> np.ndarray:
        """Decision vector from per-instant generator states (L, G, 9) and network states."""
        L = len(states)
        X = np.zeros(L * self.nk)
        xs = np.asarray(xs, dtype=float).reshape(L, self.G, gm.N_STATES)
        for k in range(L):
            for g in range(self.G):
                X[self.x_slice(k, g)] = xs[k, g]
            X[self.y_slice(k)] = states[k].as_vector()
        return X

    def unpack(self, X: np.ndarray):
        L = X.size // self.nk
        xs = np.zeros((L, self.G, gm.N_STATES))
        v = np.zeros((L, self.n))
        th = np.zeros((L, self.n))
        for k in range(L):
            for g in range(self.G):
                xs[k, g] = X[self.x_slice(k, g)]
            y = X[self.y_slice(k)]
            v[k], th[k] = y[:self.n], y[self.n:]
        return xs, v, th

    def residual_index(self) -> list[dict]:
        """Row-by-row description of the stacked residual and constraint vectors.

        Instants are window positions (0 = oldest); nodes are 1-based labels.
        """
        L, rows = self.cfg.L, []
        labels = channel_labels(self.specs)
        for g, gen in enumerate(self.gens):
            for name in gm.STATE_NAMES:
                rows.append(dict(block="arrival", instant=0, item=f"G{gen.node + 1}.{name}"))
        for k in range(L):
            rows += [dict(block="pmu", instant=k, item=lab) for lab in labels]
        for k in range(L - 1):
            for gen in self.gens:
                rows += [dict(block="process", instant=k, item=f"G{gen.node + 1}.{name}")
                         for name in gm.STATE_NAMES]
        for k in range(L):
            for gen in self.gens:
                rows += [dict(block="coupling", instant=k, item=f"G{gen.node + 1}.{ax}") for ax in "DQ"]
        cons = []
        for k in range(L):
            for z in self.zero_nodes:
                cons += [dict(block="zero_injection", instant=k, item=f"N{z + 1}.{ax}") for ax in "DQ"]
        for i, r in enumerate(rows):
            r["row"] = i
        for i, r in enumerate(cons):
            r["row"] = i
        return rows + cons

    def _admissible(self, X: np.ndarray) -> bool:
        v = np.concatenate([X[self.y_slice(k)][:self.n] for k in range(X.size // self.nk)])
        return bool(np.all(np.isfinite(X)) and np.all(v > 0))

    def _setpoints_at(self, t: float):
        if self.setpoints is not None:
            return list(self.setpoints(t))
        return [g.setpoints for g in self.gens]

    def check_window(self, window: Sequence[MeasurementFrame]):
        if len(window) != self.cfg.L:
            raise ValueError(f"window has {len(window)} frames, horizon is {self.cfg.L}")
        for fr in window:
            if fr.values.size != 2 * self.m:
                raise ValueError("frame length does not match the measurement configuration")
        t = np.array([fr.t for fr in window])
        if t.size > 1 and np.any(np.abs(np.diff(t) - self.cfg.dt) > 1e-6):
            raise ValueError(f"window timestamps are not contiguous on the {self.cfg.dt} s grid: {t}")

    def assemble(self, window: Sequence[MeasurementFrame], prior: Prior, X: np.ndarray) -> EstimationProblem:
        """Residuals, constraints and their exact Jacobians at iterate ``X``."""
        L, G, n, m = self.cfg.L, self.G, self.n, self.m
        if X.size != self.dim:
            raise ValueError(f"decision vector has {X.size} entries, expected {self.dim}")
        self.check_window(window)
        nxg = self.nxg
        n_arr = nxg
        n_pmu = L * 2 * m
        n_proc = (L - 1) * nxg
        n_coup = L * 2 * G
        rows = n_arr + n_pmu + n_proc + n_coup
        h = np.zeros(rows)
        H = np.zeros((rows, self.dim))
        w = np.zeros(rows)
        blocks = {
            "arrival": slice(0, n_arr),
            "pmu": slice(n_arr, n_arr + n_pmu),
            "process": slice(n_arr + n_pmu, n_arr + n_pmu + n_proc),
            "coupling": slice(n_arr + n_pmu + n_proc, rows),
        }
        nz = len(self.zero_nodes)
        c = np.zeros(L * 2 * nz)
        C = np.zeros((c.size, self.dim))

        xs, v, th = self.unpack(X)
        states = [NetworkState(v[k], th[k]) for k in range(L)]

        # arrival
        for g in range(G):
            r = slice(9 * g, 9 * g + 9)
            h[r] = xs[0, g] - prior.x_bar[9 * g:9 * g + 9]
            H[r, self.x_slice(0, g)] = np.eye(gm.N_STATES)
            w[r] = self.cfg.W_arrival

        # PMU
        pmu_index = np.zeros((n_pmu, 2), dtype=int)
        row = n_arr
        for k, fr in enumerate(window):
            if m == 0:
                continue
            hv, Hm, degenerate = measurement_model(states[k], self.net, self.specs)
            r = slice(row, row + 2 * m)
            res = fr.values - hv
            res[1::2] = wrap_angle(res[1::2])
            h[r] = res
            H[r, self.y_slice(k)] = -Hm
            wk = self.w_meas * fr.valid
            measured_mag = fr.values[0::2]
            current = np.array([s.kind != "voltage_phasor" for s in self.specs])
            tiny = degenerate | (current & (np.abs(measured_mag) < 1e-9))
            wk[1::2][tiny] = 0.0
            w[r] = wk
            pmu_index[row - n_arr:row - n_arr + 2 * m, 0] = k
            pmu_index[row - n_arr:row - n_arr + 2 * m, 1] = np.arange(2 * m)
            row += 2 * m

        # process
        sps = [self._setpoints_at(fr.t) for fr in window]
        row = blocks["process"].start
        for k in range(L - 1):
            for g, gen in enumerate(self.gens):
                i = gen.node
                f = gm.euler_step(xs[k, g], v[k, i], th[k, i], gen.params, sps[k][g], self.cfg.dt)
                Jf = gm.euler_jacobian(xs[k, g], v[k, i], th[k, i], gen.params, sps[k][g], self.cfg.dt)
                r = slice(row, row + 9)
                h[r] = xs[k + 1, g] - f
                H[r, self.x_slice(k + 1, g)] = np.eye(gm.N_STATES)
                H[r, self.x_slice(k, g)] -= Jf[:, :9]
                ys = self.y_slice(k)
                H[r, ys.start + i] -= Jf[:, 9]
                H[r, ys.start + n + i] -= Jf[:, 10]
                w[r] = self.cfg.W_process
                row += 9

        # coupling and zero-injection constraints
        crow = 0
        for k in range(L):
            need = G > 0 or nz > 0
            if not need:
                continue
            inj = injections(states[k], self.net)
            Jn = injection_jacobian(states[k], self.net)
            ys = self.y_slice(k)
            for g, gen in enumerate(self.gens):
                i = gen.node
                gg = gm.generator_injection(xs[k, g], v[k, i], th[k, i], gen.params, self.net.S_b)
                Jg = gm.injection_jacobian(xs[k, g], v[k, i], th[k, i], gen.params, self.net.S_b)
                r = slice(row, row + 2)
                h[r] = inj[i] - np.asarray(gg)
                H[r, ys] = Jn[2 * i:2 * i + 2]
                H[r, self.x_slice(k, g)] -= Jg[:, :9]
                H[r, ys.start + i] -= Jg[:, 9]
                H[r, ys.start + n + i] -= Jg[:, 10]
                w[r] = self.cfg.W_coupling
                row += 2
            for z in self.zero_nodes:
                c[crow:crow + 2] = inj[z]
                C[crow:crow + 2, ys] = Jn[2 * z:2 * z + 2]
                crow += 2
        return EstimationProblem(h, c, H, C, w, blocks, pmu_index)

    def solve(self, window: Sequence[MeasurementFrame], prior: Prior, X0: np.ndarray,
              damping: bool | None = None) -> Estimate:
        """Iterate Gauss-Newton steps from ``X0`` until ``max|dX| <= tol``.

        With damping enabled, a singular KKT system or a cost increase on the
        feasible set switches to Levenberg regularization ``mu I``.
        """
        cfg = self.cfg
        damping = cfg.damping if damping is None else damping
        window = list(window)
        X = np.array(X0, dtype=float)
        prob = self.assemble(window, prior, X)
        lam = np.zeros(prob.c.size)
        mu = 0.0
        converged = False
        iterations = 0
        history = [(prob.cost, _inf_norm(prob.c))]
        rejects = 0
        while iterations < cfg.max_iter:
            try:
                step = gauss_newton_step(prob.h, prob.c, prob.H, prob.C, prob.w, mu)
            except SingularKKTError:
                if not damping:
                    raise
                mu = max(10.0 * mu, _mu0(prob))
                rejects += 1
                if rejects > 12:
                    raise
                continue
            dX = step.dX
            for _ in range(40):
                if self._admissible(X + dX):
                    break
                dX = 0.5 * dX  # keep magnitudes positive
            X_new = X + dX
            prob_new = self.assemble(window, prior, X_new)
            if damping and _worse(prob, prob_new) and rejects <= 12:
                mu = max(10.0 * mu, _mu0(prob))
                rejects += 1
                continue
            iterations += 1
            rejects = 0
            mu = 0.0
            X, prob, lam = X_new, prob_new, step.lam
            history.append((prob.cost, _inf_norm(prob.c)))
            if _inf_norm(dX) <= cfg.tol:
                converged = True
                break
        if not converged:
            log.warning("MHE did not converge in %d iterations at t=%.3f", cfg.max_iter, window[-1].t)
        xs, v, th = self.unpack(X)
        return Estimate(np.array([fr.t for fr in window]), xs, v, th, X, lam, converged,
                        iterations, prob, window, history)

    def predict(self, x_last: np.ndarray, v: np.ndarray, th: np.ndarray, t: float) -> np.ndarray:
        """One Euler step for every generator from the given instant."""
        sps = self._setpoints_at(t)
        out = np.zeros((self.G, gm.N_STATES))
        for g, gen in enumerate(self.gens):
            out[g] = gm.euler_step(x_last[g], v[gen.node], th[gen.node], gen.params, sps[g], self.cfg.dt)
        return out

    def slide(self, prev: Estimate, frame: MeasurementFrame):
        """Shift the window by one frame: new window, arrival prior and warm start."""
        L = self.cfg.L
        window = list(prev.window[1:]) + [frame]
        x_pred = self.predict(prev.x[-1], prev.v[-1], prev.theta[-1], prev.times[-1])
        if L > 1:
            x_bar = prev.x[1].ravel().copy()
            xs = np.concatenate([prev.x[1:], x_pred[None]], axis=0)
            states = [NetworkState(prev.v[k], prev.theta[k]) for k in range(1, L)]
        else:
            x_bar = x_pred.ravel().copy()
            xs = x_pred[None]
            states = []
        states.append(NetworkState(prev.v[-1], prev.theta[-1]))
        return window, Prior(x_bar), self.pack(xs, states)

    def cold_start(self, x0: np.ndarray, s0: NetworkState):
        """Prior and initial iterate that repeat a best-guess state over the window."""
        x0 = np.asarray(x0, dtype=float).reshape(self.G, gm.N_STATES)
        L = self.cfg.L
        return Prior(x0.ravel().copy()), self.pack(np.repeat(x0[None], L, axis=0), [s0] * L)


def _inf_norm(a) -> float:
    return float(np.max(np.abs(a))) if np.size(a) else 0.0


def _mu0(prob: EstimationProblem) -> float:
    diag = np.sum(prob.w[:, None] * prob.H ** 2, axis=0)
    return 1e-8 * float(np.sum(diag)) / max(diag.size, 1)


def _worse(old: EstimationProblem, new: EstimationProblem) -> bool:
    """Cost went up while already feasible (a genuine ascent, not a feasibility repair)."""
    feas = max(_inf_norm(old.c), _inf_norm(new.c)) <= 1e-8
    return feas and new.cost > old.cost * (1.0 + 1e-9) + 1e-12


# --- static estimation and metrics ---------------------------------------------------------

def sse_estimator(net: NetworkModel, specs: Sequence[MeasurementSpec],
                  cfg: MHEConfig | None = None) -> MovingHorizonEstimator:
    """The static estimator as a one-instant, generator-free window."""
    cfg = MHEConfig(L=1, W_meas=None if cfg is None else cfg.W_meas,
                    max_iter=20 if cfg is None else cfg.max_iter,
                    tol=1e-8 if cfg is None else cfg.tol,
                    dt=0.01 if cfg is None else cfg.dt, damping=False)
    return MovingHorizonEstimator(net.with_node_sets(gen_nodes=()), [], specs, cfg)


def solve_sse(frame: MeasurementFrame, net: NetworkModel, specs: Sequence[MeasurementSpec],
              cfg: MHEConfig | None = None, X0: NetworkState | None = None) -> Estimate:
    """Static estimate from one frame: the L=1, generator-free special case."""
    est = sse_estimator(net, specs, cfg)
    if X0 is None:
        X0 = measured_start(frame, net, specs)
    try:
        return est.solve([frame], Prior(np.zeros(0)), X0.as_vector())
    except SingularKKTError as exc:
        raise UnobservableError("network is not statically observable from this measurement set",
                                condition=exc.condition) from exc


def measured_start(frame: MeasurementFrame, net: NetworkModel,
                   specs: Sequence[MeasurementSpec]) -> NetworkState:
    # flat start, overwritten by any voltage phasors in the frame; a purely flat
    # start makes measured flows vanish and their phases undefined
    s = NetworkState.flat(net.n)
    v, theta = s.v.copy(), s.theta.copy()
    for j, sp in enumerate(specs):
        if sp.kind == VOLTAGE and frame.valid[2 * j] and frame.valid[2 * j + 1]:
            v[sp.at[0]] = frame.values[2 * j]
            theta[sp.at[0]] = frame.values[2 * j + 1]
    return NetworkState(v, theta)


def mse(times, v_est, theta_est, truth: Trajectory) -> np.ndarray:
    """Per-node mean square error of magnitudes and (wrapped) phases."""
    times = np.asarray(times, dtype=float)
    lookup = {round(float(t), 6): k for k, t in enumerate(truth.times)}
    try:
        idx = np.array([lookup[round(float(t), 6)] for t in times], dtype=int)
    except KeyError as exc:
        raise ValueError(f"estimate at t={exc.args[0]} has no truth instant") from None
    if idx.size == 0:
        raise ValueError("no estimates to score")
    dv = np.asarray(v_est) - truth.v[idx]
    dth = wrap_angle(np.asarray(theta_est) - truth.theta[idx])
    return np.sum(dv ** 2 + dth ** 2, axis=0) / (2.0 * idx.size)

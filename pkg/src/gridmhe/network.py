"""Static network model, nodal current injections and PMU measurement functions.

Nodes are 0-based in code; configuration files and reports use 1-based labels.
A network state vector is laid out as ``[v_0 .. v_{n-1}, theta_0 .. theta_{n-1}]``
and current Jacobian rows are interleaved ``(i_D, i_Q)`` per node.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, NamedTuple

import numpy as np

from .genmodel import DQCurrent

DEGENERATE_CURRENT = 1e-9

VOLTAGE = "voltage_phasor"
FLOW = "current_flow"
INJECTION = "current_injection"
KINDS = (VOLTAGE, FLOW, INJECTION)


class Branch(NamedTuple):
    i: int
    j: int
    g: float
    b: float


@dataclass(frozen=True, eq=False)
class NetworkModel:
    """Series branches plus per-node shunts, all in p.u. on ``S_b``.

    Line charging has to be folded into ``shunt_b`` by the caller; branches
    carry only their series admittance ``g + jb``.
    """

    n: int
    branches: tuple[Branch, ...]
    shunt_g: np.ndarray
    shunt_b: np.ndarray
    gen_nodes: frozenset = frozenset()
    zero_nodes: frozenset = frozenset()
    S_b: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "branches", tuple(Branch(int(i), int(j), float(g), float(b))
                                                   for i, j, g, b in self.branches))
        sg = np.zeros(self.n) if self.shunt_g is None else np.asarray(self.shunt_g, dtype=float)
        sb = np.zeros(self.n) if self.shunt_b is None else np.asarray(self.shunt_b, dtype=float)
        sg.setflags(write=False)
        sb.setflags(write=False)
        object.__setattr__(self, "shunt_g", sg)
        object.__setattr__(self, "shunt_b", sb)
        object.__setattr__(self, "gen_nodes", frozenset(int(i) for i in self.gen_nodes))
        object.__setattr__(self, "zero_nodes", frozenset(int(i) for i in self.zero_nodes))
        if self.n < 1:
            raise ValueError("network needs at least one node")
        if sg.shape != (self.n,) or sb.shape != (self.n,):
            raise ValueError("shunt vectors must have one entry per node")
        if not self.S_b > 0:
            raise ValueError("S_b must be positive")
        if self.gen_nodes & self.zero_nodes:
            raise ValueError("generator and zero-injection node sets overlap")
        for k in self.gen_nodes | self.zero_nodes:
            self._check_node(k)
        seen = set()
        for br in self.branches:
            self._check_node(br.i)
            self._check_node(br.j)
            if br.i == br.j:
                raise ValueError(f"branch endpoints must differ: {br}")
            key = frozenset((br.i, br.j))
            if key in seen:
                raise ValueError(f"duplicate branch between {br.i} and {br.j}")
            seen.add(key)

    def _check_node(self, i: int):
        if not 0 <= i < self.n:
            raise IndexError(f"node {i} out of range for a {self.n}-node network")

    @cached_property
    def neighbors(self) -> tuple[frozenset, ...]:
        nb = [set() for _ in range(self.n)]
        for br in self.branches:
            nb[br.i].add(br.j)
            nb[br.j].add(br.i)
        return tuple(frozenset(s) for s in nb)

    @cached_property
    def _branch_index(self) -> dict:
        out = {}
        for br in self.branches:
            out[(br.i, br.j)] = (br.g, br.b)
            out[(br.j, br.i)] = (br.g, br.b)
        return out

    def branch_admittance(self, i: int, j: int) -> tuple[float, float]:
        try:
            return self._branch_index[(i, j)]
        except KeyError:
            raise KeyError(f"no branch between nodes {i} and {j}") from None

    @cached_property
    def injection_matrix(self) -> np.ndarray:
        """Real matrix M with interleaved injections = M @ [e; f] (e = v cos, f = v sin)."""
        n = self.n
        M = np.zeros((2 * n, 2 * n))
        for i, j, g, b in self.branches:
            for a, o in ((i, j), (j, i)):
                M[2 * a, a] += g
                M[2 * a, o] -= g
                M[2 * a, n + a] -= b
                M[2 * a, n + o] += b
                M[2 * a + 1, a] += b
                M[2 * a + 1, o] -= b
                M[2 * a + 1, n + a] += g
                M[2 * a + 1, n + o] -= g
        idx = np.arange(n)
        M[2 * idx, idx] += self.shunt_g
        M[2 * idx, n + idx] -= self.shunt_b
        M[2 * idx + 1, idx] += self.shunt_b
        M[2 * idx + 1, n + idx] += self.shunt_g
        M.setflags(write=False)
        return M

    def with_shunt_change(self, node: int, d_g: float, d_b: float) -> "NetworkModel":
        sg = self.shunt_g.copy()
        sb = self.shunt_b.copy()
        sg[node] += d_g
        sb[node] += d_b
        return NetworkModel(self.n, self.branches, sg, sb, self.gen_nodes, self.zero_nodes, self.S_b)

    def with_node_sets(self, gen_nodes: Iterable[int] | None = None,
                       zero_nodes: Iterable[int] | None = None) -> "NetworkModel":
        return NetworkModel(self.n, self.branches, self.shunt_g, self.shunt_b,
                            self.gen_nodes if gen_nodes is None else frozenset(gen_nodes),
                            self.zero_nodes if zero_nodes is None else frozenset(zero_nodes),
                            self.S_b)


@dataclass(frozen=True, eq=False)
class NetworkState:
    v: np.ndarray
    theta: np.ndarray

    def __post_init__(self):
        v = np.array(self.v, dtype=float)
        th = np.array(self.theta, dtype=float)
        if v.shape != th.shape or v.ndim != 1:
            raise ValueError("v and theta must be 1-D arrays of equal length")
        if not np.all(np.isfinite(v)) or np.any(v <= 0):
            raise ValueError("voltage magnitudes must be finite and positive")
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "theta", th)

    @classmethod
    def flat(cls, n: int) -> "NetworkState":
        return cls(np.ones(n), np.zeros(n))

    @classmethod
    def from_vector(cls, y) -> "NetworkState":
        y = np.asarray(y, dtype=float)
        n = y.size // 2
        return cls(y[:n], y[n:])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.v, self.theta])

    @property
    def phasors(self) -> np.ndarray:
        return self.v * np.exp(1j * self.theta)


@dataclass(frozen=True)
class MeasurementSpec:
    """One PMU channel: a phasor reported as (magnitude, phase).

    ``at`` is ``(node,)`` for voltage and injection channels and ``(from, to)``
    for branch flows; flows are measured at the 'from' end, positive toward 'to'.
    """

    kind: str
    at: tuple
    variance: float = 1e-6

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown measurement kind {self.kind!r}")
        at = tuple(int(a) for a in self.at)
        if len(at) != (2 if self.kind == FLOW else 1):
            raise ValueError(f"{self.kind} expects {'two nodes' if self.kind == FLOW else 'one node'}")
        if not self.variance >= 0:
            raise ValueError("variance must be nonnegative")
        object.__setattr__(self, "at", at)

    @classmethod
    def voltage(cls, node: int, variance: float = 1e-6) -> "MeasurementSpec":
        return cls(VOLTAGE, (node,), variance)

    @classmethod
    def flow(cls, frm: int, to: int, variance: float = 1e-6) -> "MeasurementSpec":
        return cls(FLOW, (frm, to), variance)

    @classmethod
    def injection(cls, node: int, variance: float = 1e-6) -> "MeasurementSpec":
        return cls(INJECTION, (node,), variance)

    @property
    def label(self) -> str:
        """1-based human label, e.g. ``V3`` or ``I4-5``."""
        if self.kind == VOLTAGE:
            return f"V{self.at[0] + 1}"
        if self.kind == FLOW:
            return f"I{self.at[0] + 1}-{self.at[1] + 1}"
        return f"Iinj{self.at[0] + 1}"

    def validate(self, net: NetworkModel):
        for a in self.at:
            net._check_node(a)
        if self.kind == FLOW:
            net.branch_admittance(*self.at)


def channel_labels(specs) -> list[str]:
    """Scalar channel names in frame order: ``V3.mag, V3.ang, ...``."""
    return [f"{s.label}.{part}" for s in specs for part in ("mag", "ang")]


# --- current equations --------------------------------------------------------

def _rect(s: NetworkState):
    return s.v * np.cos(s.theta), s.v * np.sin(s.theta)


def nodal_injection(s: NetworkState, net: NetworkModel, i: int) -> DQCurrent:
    """Net current injected at node ``i``, summed branch by branch plus the shunt."""
    net._check_node(i)
    e, f = _rect(s)
    i_D = e[i] * net.shunt_g[i] - f[i] * net.shunt_b[i]
    i_Q = f[i] * net.shunt_g[i] + e[i] * net.shunt_b[i]
    for j in net.neighbors[i]:
        g, b = net.branch_admittance(i, j)
        de, df = e[i] - e[j], f[i] - f[j]
        i_D += de * g - df * b
        i_Q += de * b + df * g
    return DQCurrent(float(i_D), float(i_Q))


def injections(s: NetworkState, net: NetworkModel) -> np.ndarray:
    """All nodal injections as an (n, 2) array of (i_D, i_Q)."""
    e, f = _rect(s)
    return (net.injection_matrix @ np.concatenate([e, f])).reshape(net.n, 2)


def _rect_jacobian(s: NetworkState) -> np.ndarray:
    """d[e; f]/d[v; theta] (block-diagonal structure, dense 2n x 2n)."""
    n = s.v.size
    c, sn = np.cos(s.theta), np.sin(s.theta)
    J = np.zeros((2 * n, 2 * n))
    idx = np.arange(n)
    J[idx, idx] = c
    J[idx, n + idx] = -s.v * sn
    J[n + idx, idx] = sn
    J[n + idx, n + idx] = s.v * c
    return J


def injection_jacobian(s: NetworkState, net: NetworkModel) -> np.ndarray:
    """d(interleaved injections)/d[v; theta], shape (2n, 2n)."""
    return net.injection_matrix @ _rect_jacobian(s)


def branch_current(s: NetworkState, net: NetworkModel, frm: int, to: int) -> DQCurrent:
    """Series current leaving ``frm`` toward ``to``."""
    g, b = net.branch_admittance(frm, to)
    e, f = _rect(s)
    de, df = e[frm] - e[to], f[frm] - f[to]
    return DQCurrent(float(de * g - df * b), float(de * b + df * g))


def _branch_current_jacobian(s: NetworkState, net: NetworkModel, frm: int, to: int) -> np.ndarray:
    g, b = net.branch_admittance(frm, to)
    n = net.n
    R = _rect_jacobian(s)
    d_de = R[frm] - R[to]
    d_df = R[n + frm] - R[n + to]
    return np.vstack([g * d_de - b * d_df, b * d_de + g * d_df])


# --- PMU measurement functions ----------------------------------------------------

def _current_of(s: NetworkState, net: NetworkModel, spec: MeasurementSpec) -> DQCurrent:
    if spec.kind == FLOW:
        return branch_current(s, net, *spec.at)
    return nodal_injection(s, net, spec.at[0])


def measure(s: NetworkState, net: NetworkModel, spec: MeasurementSpec) -> tuple[float, float]:
    """Noise-free (magnitude, phase) of one PMU channel.

    Currents below ``DEGENERATE_CURRENT`` report phase ``atan2`` of the raw
    components, which is 0 at the origin; see :func:`measurement_model` for
    the degeneracy flag.
    """
    if spec.kind == VOLTAGE:
        i = spec.at[0]
        return float(s.v[i]), float(s.theta[i])
    i_D, i_Q = _current_of(s, net, spec)
    return float(np.hypot(i_D, i_Q)), float(np.arctan2(i_Q, i_D))


def measurement_model(s: NetworkState, net: NetworkModel, specs) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stacked measurement values, their Jacobian w.r.t. [v; theta], and degeneracy flags.

    Returns ``(values (2m,), jacobian (2m, 2n), degenerate (m,) bool)``.
    """
    m, n = len(specs), net.n
    values = np.zeros(2 * m)
    jac = np.zeros((2 * m, 2 * n))
    degenerate = np.zeros(m, dtype=bool)
    for k, spec in enumerate(specs):
        if spec.kind == VOLTAGE:
            i = spec.at[0]
            values[2 * k] = s.v[i]
            values[2 * k + 1] = s.theta[i]
            jac[2 * k, i] = 1.0
            jac[2 * k + 1, n + i] = 1.0
            continue
        if spec.kind == FLOW:
            i_D, i_Q = branch_current(s, net, *spec.at)
            dI = _branch_current_jacobian(s, net, *spec.at)
        else:
            node = spec.at[0]
            i_D, i_Q = nodal_injection(s, net, node)
            dI = injection_jacobian(s, net)[2 * node:2 * node + 2]
        mag = np.hypot(i_D, i_Q)
        values[2 * k] = mag
        values[2 * k + 1] = np.arctan2(i_Q, i_D)
        if mag < DEGENERATE_CURRENT:
            degenerate[k] = True
            continue
        jac[2 * k] = (i_D * dI[0] + i_Q * dI[1]) / mag
        jac[2 * k + 1] = (i_D * dI[1] - i_Q * dI[0]) / mag ** 2
    return values, jac, degenerate


def admittance_matrix(net: NetworkModel) -> np.ndarray:
    """Complex bus admittance matrix (I = Y V)."""
    Y = np.zeros((net.n, net.n), dtype=complex)
    for i, j, g, b in net.branches:
        y = g + 1j * b
        Y[i, i] += y
        Y[j, j] += y
        Y[i, j] -= y
        Y[j, i] -= y
    Y[np.diag_indices(net.n)] += net.shunt_g + 1j * net.shunt_b
    return Y


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    w = np.mod(a + np.pi, 2.0 * np.pi) - np.pi
    return np.where(w == -np.pi, np.pi, w)

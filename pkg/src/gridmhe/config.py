"""TOML run configuration: system description, scenario and estimator settings.

Node numbers in files are 1-based, as in one-line diagrams; everything is
converted to 0-based indices on load. A run file names its system file
(resolved relative to the run file, then among the bundled data files).

System file::

    S_b = 100.0
    nodes = 5
    zero_injection = [4, 5]

    [[branch]]           # series r + jx (or g + jb), optional total charging b_ch
    from = 1
    to = 4
    x = 0.0576

    [[generator]]        # GeneratorParams fields, machine base
    node = 1
    H = 3.2
    ...

    [[bus]]              # power-flow data for slack / pv nodes
    node = 1
    kind = "slack"
    v = 1.04

    [[load]]             # consumed power, simulated as a shunt admittance
    node = 3
    P = 2.0
    Q = 0.6

Run file: ``system``, ``seed``, ``[scenario]`` (with ``[[scenario.event]]``,
optional ``[scenario.bad_data]`` and ``[scenario.mismatch]``),
``[[measurement]]`` entries and ``[estimator]``; see the bundled test cases.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import genmodel as gm
from .errors import ConfigError
from .estimator import FAST_STATES, MHEConfig
from .network import FLOW, INJECTION, VOLTAGE, MeasurementSpec, NetworkModel, channel_labels
from .simulator import PQ, PV, SLACK, BadData, BusSchedule, Event, Generator, Scenario

ESTIMATORS = ("mhe", "sse", "both")
_KINDS = {"voltage": VOLTAGE, "flow": FLOW, "injection": INJECTION}


@dataclass(frozen=True, eq=False)
class SystemConfig:
    net: NetworkModel
    gens: tuple
    schedule: tuple
    loads: dict  # 0-based node -> (P, Q) consumed
    name: str = ""


@dataclass(frozen=True)
class EstimatorSettings:
    kind: str = "both"
    L: int = 3
    W_arrival: tuple = (1e2,)
    W_meas: float | None = None
    W_process: tuple = ()
    W_coupling: float = 1e4
    max_iter: int = 20
    tol: float = 1e-8
    lnr: bool = False
    threshold: float = 3.0

    def mhe_config(self, dt: float) -> MHEConfig:
        kw = dict(L=self.L, W_arrival=np.array(self.W_arrival), W_meas=self.W_meas,
                  W_coupling=self.W_coupling, max_iter=self.max_iter, tol=self.tol, dt=dt)
        if self.W_process:
            kw["W_process"] = np.array(self.W_process)
        return MHEConfig(**kw)


@dataclass(frozen=True)
class EventSpec:
    """A disturbance as written in the file. A ``relative`` load step scales the
    load's shunt admittance, which is only known after the power flow."""

    time: float
    kind: str
    target: int
    d1: float = 0.0
    d2: float = 0.0
    relative: bool = False

    def resolve(self, shunts: dict) -> Event:
        if self.relative:
            g, b = shunts[self.target]
            return Event(self.time, self.kind, self.target, self.d1 * g, self.d1 * b)
        return Event(self.time, self.kind, self.target, self.d1, self.d2)


@dataclass(frozen=True, eq=False)
class RunConfig:
    source: Path
    system: SystemConfig
    scenario: Scenario
    specs: tuple
    estimator: EstimatorSettings
    events: tuple = ()
    seed: int = 0

    def with_overrides(self, seed=None, estimator=None, lnr=None, horizon=None) -> "RunConfig":
        est = self.estimator
        if estimator is not None:
            if estimator not in ESTIMATORS:
                raise ConfigError(f"estimator must be one of {ESTIMATORS}, got {estimator!r}")
            est = replace(est, kind=estimator)
        if lnr is not None:
            est = replace(est, lnr=bool(lnr))
        if horizon is not None:
            if horizon < 1:
                raise ConfigError("horizon must be at least 1")
            est = replace(est, L=int(horizon))
        out = replace(self, estimator=est)
        if seed is not None:
            out = replace(out, seed=int(seed), scenario=replace(out.scenario, noise_seed=int(seed)))
        return out

    def without_bad_data(self) -> "RunConfig":
        return replace(self, scenario=replace(self.scenario, bad_data=None))


# --- reading ------------------------------------------------------------------------

def bundled(name: str) -> Path:
    """Path of a bundled data file; ``name`` may omit the ``.toml`` suffix."""
    if not name.endswith(".toml"):
        name += ".toml"
    return Path(str(resources.files("gridmhe") / "data" / name))


def resolve(path, relative_to: Path | None = None) -> Path:
    p = Path(path)
    candidates = [p] if p.is_absolute() else ([relative_to / p] if relative_to else []) + [p]
    candidates.append(bundled(p.name))
    for c in candidates:
        if c.is_file():
            return c
    raise ConfigError(f"configuration file not found: {path}")


def _read(path: Path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


class _Table:
    """Dict wrapper that tracks field paths for error messages."""

    def __init__(self, data: dict, where: str):
        if not isinstance(data, dict):
            raise ConfigError(f"{where}: expected a table")
        self.data = data
        self.where = where
        self.used = set()

    def get(self, key, default=None, kind=float, required=False):
        self.used.add(key)
        if key not in self.data:
            if required:
                raise ConfigError(f"{self.where}: missing field '{key}'")
            return default
        val = self.data[key]
        try:
            if kind is bool:
                if not isinstance(val, bool):
                    raise TypeError
                return val
            if kind is int and isinstance(val, float) and not val.is_integer():
                raise TypeError
            return kind(val)
        except (TypeError, ValueError):
            raise ConfigError(f"{self.where}.{key}: expected {kind.__name__}, got {val!r}") from None

    def sub(self, key, required=False):
        self.used.add(key)
        if key not in self.data:
            if required:
                raise ConfigError(f"{self.where}: missing table '{key}'")
            return None
        return _Table(self.data[key], f"{self.where}.{key}")

    def items(self, key):
        self.used.add(key)
        vals = self.data.get(key, [])
        if not isinstance(vals, list):
            raise ConfigError(f"{self.where}.{key}: expected an array of tables")
        return [_Table(v, f"{self.where}.{key}[{k}]") for k, v in enumerate(vals)]

    def finish(self):
        extra = set(self.data) - self.used
        if extra:
            raise ConfigError(f"{self.where}: unknown field(s) {sorted(extra)}")


def _node(t: _Table, key: str, n: int) -> int:
    i = t.get(key, kind=int, required=True)
    if not 1 <= i <= n:
        raise ConfigError(f"{t.where}.{key}: node {i} outside 1..{n}")
    return i - 1


def load_system(path) -> SystemConfig:
    path = Path(path)
    t = _Table(_read(path), path.name)
    n = t.get("nodes", kind=int, required=True)
    if n < 1:
        raise ConfigError(f"{path.name}.nodes: must be positive")
    S_b = t.get("S_b", 1.0)
    name = t.get("name", "", kind=str)
    zero = t.get("zero_injection", [], kind=list)
    for z in zero:
        if not (isinstance(z, int) and 1 <= z <= n):
            raise ConfigError(f"{path.name}.zero_injection: bad node {z!r}")
    sh_g = np.zeros(n)
    sh_b = np.zeros(n)
    branches = []
    for b in t.items("branch"):
        i, j = _node(b, "from", n), _node(b, "to", n)
        if "x" in b.data or "r" in b.data:
            r, x = b.get("r", 0.0), b.get("x", 0.0)
            if r == 0 and x == 0:
                raise ConfigError(f"{b.where}: zero series impedance")
            y = 1.0 / complex(r, x)
            g, bb = y.real, y.imag
        else:
            g, bb = b.get("g", required=True), b.get("b", required=True)
        b_ch = b.get("b_ch", 0.0)
        sh_b[i] += 0.5 * b_ch
        sh_b[j] += 0.5 * b_ch
        b.finish()
        branches.append((i, j, g, bb))
    for s in t.items("shunt"):
        i = _node(s, "node", n)
        sh_g[i] += s.get("g", 0.0)
        sh_b[i] += s.get("b", 0.0)
        s.finish()
    gens = []
    for g in t.items("generator"):
        node = _node(g, "node", n)
        g.used.update(g.data)
        data = {k: v for k, v in g.data.items() if k != "node"}
        try:
            gens.append(Generator(node, gm.GeneratorParams.from_dict(data)))
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{g.where}: {exc}") from None
    sched = [BusSchedule() for _ in range(n)]
    for b in t.items("bus"):
        i = _node(b, "node", n)
        kind = b.get("kind", required=True, kind=str)
        if kind not in (SLACK, PV, PQ):
            raise ConfigError(f"{b.where}.kind: unknown bus type {kind!r}")
        sched[i] = BusSchedule(kind, P=b.get("P", 0.0), Q=b.get("Q", 0.0),
                               v=b.get("v", 1.0), theta=b.get("theta", 0.0))
        b.finish()
    loads = {}
    for ld in t.items("load"):
        i = _node(ld, "node", n)
        P, Q = ld.get("P", 0.0), ld.get("Q", 0.0)
        ld.finish()
        loads[i] = (P, Q)
        s = sched[i]
        if s.kind == PQ:
            sched[i] = replace(s, P=s.P - P, Q=s.Q - Q)
    t.finish()
    if sum(s.kind == SLACK for s in sched) != 1:
        raise ConfigError(f"{path.name}: exactly one slack bus is required")
    gen_nodes = {g.node for g in gens}
    zero_nodes = {z - 1 for z in zero}
    try:
        net = NetworkModel(n, branches, sh_g, sh_b, gen_nodes, zero_nodes, S_b)
    except (ValueError, IndexError) as exc:
        raise ConfigError(f"{path.name}: {exc}") from None
    if set(loads) & zero_nodes:
        raise ConfigError(f"{path.name}: a load sits on a zero-injection node")
    return SystemConfig(net, tuple(gens), tuple(sched), loads, name)


def _measurements(t: _Table, n: int) -> list[MeasurementSpec]:
    specs = []
    for m in t.items("measurement"):
        kind = m.get("kind", required=True, kind=str)
        if kind not in _KINDS:
            raise ConfigError(f"{m.where}.kind: expected one of {sorted(_KINDS)}, got {kind!r}")
        var = m.get("variance", 1e-6)
        if kind == "flow":
            at = (_node(m, "from", n), _node(m, "to", n))
        else:
            at = (_node(m, "node", n),)
        m.finish()
        specs.append(MeasurementSpec(_KINDS[kind], at, var))
    return specs


def _events(sc: _Table, system: SystemConfig) -> list[EventSpec]:
    out = []
    n = system.net.n
    gen_at = {g.node: k for k, g in enumerate(system.gens)}
    for e in sc.items("event"):
        time = e.get("time", required=True)
        kind = e.get("kind", required=True, kind=str)
        if kind == "load_step":
            node = _node(e, "node", n)
            if "fraction" in e.data:
                if node not in system.loads:
                    raise ConfigError(f"{e.where}.fraction: node {node + 1} has no load")
                out.append(EventSpec(time, kind, node, e.get("fraction"), relative=True))
            else:
                out.append(EventSpec(time, kind, node, e.get("dg", 0.0), e.get("db", 0.0)))
        elif kind == "setpoint_step":
            node = _node(e, "node", n)
            if node not in gen_at:
                raise ConfigError(f"{e.where}.node: no generator at node {node + 1}")
            out.append(EventSpec(time, kind, gen_at[node], e.get("dp_ref", 0.0), e.get("dv_ref", 0.0)))
        else:
            raise ConfigError(f"{e.where}.kind: unknown event kind {kind!r}")
        e.finish()
    return out


def load_run(path) -> RunConfig:
    path = resolve(path)
    t = _Table(_read(path), path.name)
    system = load_system(resolve(t.get("system", required=True, kind=str), path.parent))
    n = system.net.n
    seed = t.get("seed", 0, kind=int)
    specs = _measurements(t, n)
    for s in specs:
        try:
            s.validate(system.net)
        except (ValueError, KeyError, IndexError) as exc:
            raise ConfigError(f"{path.name}.measurement: {exc}") from None

    sc = t.sub("scenario", required=True)
    events = _events(sc, system)
    bad = None
    bt = sc.sub("bad_data")
    if bt is not None:
        label = bt.get("channel", required=True, kind=str)
        labels = channel_labels(specs)
        if label not in labels:
            raise ConfigError(f"{bt.where}.channel: {label!r} is not one of {labels}")
        bad = BadData(labels.index(label), bt.get("value", required=True), bt.get("t_start", 0.0))
        bt.finish()
    mismatch = {}
    mt = sc.sub("mismatch")
    if mt is not None:
        names = {f for f in gm.GeneratorParams.__dataclass_fields__}
        for k in mt.data:
            if k not in names:
                raise ConfigError(f"{mt.where}: unknown generator parameter {k!r}")
            mismatch[k] = mt.get(k)
    try:
        scenario = Scenario(duration=sc.get("duration", required=True),
                            dt_sim=sc.get("dt_sim", 1e-3), F_s=sc.get("F_s", 100.0),
                            noise_seed=seed, bad_data=bad,
                            mismatch=mismatch)
    except ValueError as exc:
        raise ConfigError(f"{sc.where}: {exc}") from None
    for ev in events:
        if not 0 <= ev.time <= scenario.duration:
            raise ConfigError(f"{sc.where}.event: time {ev.time} outside [0, {scenario.duration}]")
    sc.finish()

    et = t.sub("estimator") or _Table({}, f"{path.name}.estimator")
    kind = et.get("kind", "both", kind=str)
    if kind not in ESTIMATORS:
        raise ConfigError(f"{et.where}.kind: expected one of {ESTIMATORS}, got {kind!r}")
    w_proc = _process_weights(et)
    w_arr = et.get("W_arrival", 1e2, kind=_float_or_list)
    est = EstimatorSettings(kind=kind, L=et.get("horizon", 3, kind=int), W_arrival=w_arr,
                            W_meas=et.get("W_meas", None), W_process=w_proc,
                            W_coupling=et.get("W_coupling", 1e4), max_iter=et.get("max_iter", 20, kind=int),
                            tol=et.get("tol", 1e-8), lnr=et.get("lnr", False, kind=bool),
                            threshold=et.get("threshold", 3.0))
    et.finish()
    try:
        est.mhe_config(1.0 / scenario.F_s)
    except ValueError as exc:
        raise ConfigError(f"{et.where}: {exc}") from None
    t.finish()
    return RunConfig(path, system, scenario, tuple(specs), est, tuple(events), seed)


def _float_or_list(v) -> tuple:
    vals = v if isinstance(v, list) else [v]
    if len(vals) not in (1, gm.N_STATES):
        raise ValueError
    return tuple(float(a) for a in vals)


def _process_weights(et: _Table) -> tuple:
    if "W_process" in et.data:
        return et.get("W_process", kind=_float_or_list)
    fast = et.get("W_process_fast", None)
    slow = et.get("W_process_slow", None)
    if fast is None and slow is None:
        return ()
    w = np.full(gm.N_STATES, 1e4 if slow is None else slow)
    w[list(FAST_STATES)] = 1e6 if fast is None else fast
    return tuple(float(a) for a in w)

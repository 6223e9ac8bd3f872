"""Simulate, synthesize PMU data, estimate and score one configured scenario."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import genmodel as gm
from .baddata import lnr_loop
from .config import RunConfig
from .errors import SingularKKTError, UnobservableError
from .estimator import (Estimate, MovingHorizonEstimator, Prior, measured_start, mse,
                        sse_estimator)
from .network import NetworkState, channel_labels
from .simulator import (Generator, Trajectory, initialize, inject_bad_data,
                        simulate, synthesize_pmu, write_frames_csv, write_trajectory_csv)

log = logging.getLogger(__name__)


class EstimationFailure(RuntimeError):
    """An estimator could not produce estimates for the configured run."""


@dataclass
class Truth:
    trajectory: Trajectory
    frames: list
    s0: NetworkState  # nominal power-flow state, the estimators' best guess
    x0: np.ndarray
    gens: list  # estimator-side generators with nominal setpoints
    setpoint_events: list


@dataclass
class Series:
    """Newest-instant estimates of one estimator over a run."""

    name: str
    times: list = field(default_factory=list)
    x: list = field(default_factory=list)
    v: list = field(default_factory=list)
    theta: list = field(default_factory=list)
    iterations: list = field(default_factory=list)
    converged: list = field(default_factory=list)
    cost: list = field(default_factory=list)
    violation: list = field(default_factory=list)
    removals: list = field(default_factory=list)  # (t_window, t_frame, scalar channel, r_norm)

    def add(self, e: Estimate, removed=()):
        self.times.append(float(e.times[-1]))
        self.x.append(e.x[-1])
        self.v.append(e.v[-1])
        self.theta.append(e.theta[-1])
        self.iterations.append(e.iterations)
        self.converged.append(e.converged)
        self.cost.append(e.cost)
        self.violation.append(e.constraint_violation)
        self.removals += [(float(e.times[-1]), t, ch, r) for t, ch, r in removed]

    def trajectory(self, gen_nodes) -> Trajectory:
        K, n = len(self.times), len(self.v[0]) if self.v else 0
        x = np.array(self.x).reshape(K, len(gen_nodes), gm.N_STATES)
        return Trajectory(np.array(self.times), x, np.array(self.v).reshape(K, n),
                          np.array(self.theta).reshape(K, n), tuple(gen_nodes))

    @property
    def mean_iterations(self) -> float:
        return float(np.mean(self.iterations)) if self.iterations else float("nan")


@dataclass
class RunResult:
    cfg: RunConfig
    truth: Truth
    mhe: Series | None = None
    sse: Series | None = None
    sse_error: str | None = None
    mse: dict = field(default_factory=dict)
    residual_index: list = field(default_factory=list)


def make_truth(cfg: RunConfig) -> Truth:
    sys_ = cfg.system
    net = sys_.net
    s0, x0, gens, shunts = initialize(net, sys_.gens, sys_.schedule, sys_.loads)
    if cfg.scenario.mismatch:
        factors = {k: 1.0 + v for k, v in cfg.scenario.mismatch.items()}
        true_gens = [replace(g, params=g.params.scaled(**factors)) for g in sys_.gens]
        st, xt, true_gens, _ = initialize(net, true_gens, sys_.schedule, sys_.loads)
    else:
        st, xt, true_gens = s0, x0, gens
    tnet = net
    for node, (g, b) in shunts.items():
        tnet = tnet.with_shunt_change(node, g, b)
    events = tuple(ev.resolve(shunts) for ev in cfg.events)
    sc = replace(cfg.scenario, disturbances=events)
    log.info("simulating %.2f s at dt=%g", sc.duration, sc.dt_sim)
    tr = simulate(tnet, true_gens, xt, st, sc)
    frames = synthesize_pmu(tr, net, cfg.specs, sc.noise_seed)
    if sc.bad_data is not None:
        bd = sc.bad_data
        frames = inject_bad_data(frames, bd.channel, bd.value, bd.t_start)
    sp_events = [ev for ev in events if ev.kind == "setpoint_step"]
    return Truth(tr, frames, s0, x0, gens, sp_events)


def _setpoint_schedule(gens: list[Generator], events):
    if not events:
        return None

    def at(t):
        sps = [g.setpoints for g in gens]
        for ev in events:
            if ev.time <= t + 1e-9:
                sp = sps[ev.target]
                sps[ev.target] = gm.GeneratorSetpoints(sp.p_ref + ev.d1, sp.v_ref + ev.d2)
        return sps

    return at


def run_mhe(cfg: RunConfig, truth: Truth) -> tuple[Series, MovingHorizonEstimator]:
    dt = 1.0 / cfg.scenario.F_s
    mcfg = cfg.estimator.mhe_config(dt)
    est = MovingHorizonEstimator(cfg.system.net, truth.gens, cfg.specs, mcfg,
                                 setpoints=_setpoint_schedule(truth.gens, truth.setpoint_events))
    frames = truth.frames
    L = mcfg.L
    if len(frames) < L:
        raise EstimationFailure(f"only {len(frames)} frames for a horizon of {L}")
    out = Series("mhe")
    prior, X0 = est.cold_start(truth.x0, truth.s0)
    window = frames[:L]
    e = None
    for k in range(L - 1, len(frames)):
        if k > L - 1:
            window, prior, X0 = est.slide(e, frames[k])
        try:
            if cfg.estimator.lnr:
                e, removed, _ = lnr_loop(est, window, prior, X0, cfg.estimator.threshold)
            else:
                e, removed = est.solve(window, prior, X0), []
        except SingularKKTError as exc:
            raise EstimationFailure(f"MHE failed at t={frames[k].t:.3f}: {exc}") from exc
        out.add(e, removed)
    return out, est


def run_sse(cfg: RunConfig, truth: Truth) -> Series:
    """Static estimates on the same instants as the MHE, warm-started frame to frame."""
    est = sse_estimator(cfg.system.net, cfg.specs, cfg.estimator.mhe_config(1.0 / cfg.scenario.F_s))
    out = Series("sse")
    prev = truth.s0
    empty = Prior(np.zeros(0))
    for fr in truth.frames[cfg.estimator.L - 1:]:
        try:
            if cfg.estimator.lnr:
                e, removed, _ = lnr_loop(est, [fr], empty, prev.as_vector(), cfg.estimator.threshold)
            else:
                e, removed = est.solve([fr], empty, prev.as_vector()), []
        except SingularKKTError as exc:
            raise UnobservableError(f"SSE unobservable at t={fr.t:.3f}: {exc}",
                                    condition=exc.condition) from exc
        if not e.converged:
            # a poor warm start; retry once from the measured voltages
            e2 = est.solve([fr], empty, measured_start(fr, cfg.system.net, cfg.specs).as_vector())
            e = e2 if e2.converged else e
        out.add(e, removed)
        prev = e.network_state()
    return out


def run(cfg: RunConfig) -> RunResult:
    truth = make_truth(cfg)
    res = RunResult(cfg, truth)
    kind = cfg.estimator.kind
    tr = truth.trajectory
    if kind in ("mhe", "both"):
        res.mhe, est = run_mhe(cfg, truth)
        res.residual_index = est.residual_index()
        res.mse["mhe"] = mse(res.mhe.times, res.mhe.v, res.mhe.theta, tr)
    if kind in ("sse", "both"):
        try:
            res.sse = run_sse(cfg, truth)
            res.mse["sse"] = mse(res.sse.times, res.sse.v, res.sse.theta, tr)
        except UnobservableError as exc:
            if kind == "sse":
                raise
            res.sse_error = str(exc)
            log.warning("%s", exc)
    return res


# --- output -------------------------------------------------------------------------

def _fmt(a) -> str:
    return repr(float(a))


def write_outputs(res: RunResult, out: Path) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = res.cfg
    tr = res.truth.trajectory
    labels = channel_labels(cfg.specs)
    write_trajectory_csv(out / "truth.csv", tr)
    write_frames_csv(out / "frames.csv", res.truth.frames, cfg.specs)
    gen_nodes = [g.node for g in res.truth.gens]
    for s in (res.mhe, res.sse):
        if s is None:
            continue
        write_trajectory_csv(out / f"{s.name}_estimates.csv", s.trajectory(gen_nodes if s.name == "mhe" else []))
        with open(out / f"{s.name}_windows.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "iterations", "converged", "cost", "constraint_violation"])
            for row in zip(s.times, s.iterations, s.converged, s.cost, s.violation):
                w.writerow([f"{row[0]:.6f}", row[1], int(row[2]), _fmt(row[3]), _fmt(row[4])])
    with open(out / "mse.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        cols = [k for k in ("mhe", "sse") if k in res.mse]
        w.writerow(["node"] + [f"mse_{k}" for k in cols])
        for i in range(tr.v.shape[1]):
            w.writerow([i + 1] + [_fmt(res.mse[k][i]) for k in cols])
    with open(out / "baddata.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["estimator", "t_window", "t_frame", "channel", "r_norm", "action"])
        for s in (res.mhe, res.sse):
            for tw, tf, ch, rn in (s.removals if s else []):
                w.writerow([s.name, f"{tw:.6f}", f"{tf:.6f}", labels[ch], _fmt(rn), "removed"])
    if res.residual_index:
        with open(out / "residual_index.json", "w") as fh:
            json.dump(res.residual_index, fh, indent=1)
            fh.write("\n")
    summary = summarize(res)
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary


def summarize(res: RunResult) -> dict:
    cfg = res.cfg
    labels = channel_labels(cfg.specs)
    out = {
        "config": cfg.source.name,
        "seed": cfg.seed,
        "estimator": cfg.estimator.kind,
        "horizon": cfg.estimator.L,
        "lnr": cfg.estimator.lnr,
        "nodes": int(cfg.system.net.n),
        "mse": {k: [float(a) for a in v] for k, v in res.mse.items()},
        "sse_status": None,
        "estimators": {},
    }
    if cfg.estimator.kind in ("sse", "both"):
        out["sse_status"] = "unobservable" if res.sse_error else "ok"
        if res.sse_error:
            out["sse_error"] = res.sse_error
    for s in (res.mhe, res.sse):
        if s is None:
            continue
        out["estimators"][s.name] = {
            "windows": len(s.times),
            "mean_iterations": s.mean_iterations,
            "max_iterations": int(max(s.iterations)),
            "nonconverged": int(sum(not c for c in s.converged)),
            "removals": len(s.removals),
            "removed_channels": sorted({labels[ch] for _, _, ch, _ in s.removals}),
        }
    return out

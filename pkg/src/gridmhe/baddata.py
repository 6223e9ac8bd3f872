"""Largest-normalized-residual bad-data identification for the constrained estimator.

Residual covariance of the equality-constrained problem is
``Omega = W^-1 - H E H'`` where ``E`` is the upper-left block of the inverse
KKT matrix. Only its diagonal is formed, one KKT solve per requested row.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import SingularKKTError, UnobservableError
from .estimator import EstimationProblem, KKTFactor, MovingHorizonEstimator, Prior

log = logging.getLogger(__name__)

OMEGA_FLOOR = 1e-10
DEFAULT_THRESHOLD = 3.0


@dataclass
class ResidualDiagnostics:
    """Normalized residuals over the PMU rows of one solved window.

    Rows follow the estimator's PMU block: ``channels[j] = (frame, scalar)``.
    ``r_norm`` is NaN where the row is removed or critical.
    """

    r: np.ndarray
    omega_diag: np.ndarray
    r_norm: np.ndarray
    channels: np.ndarray
    removed: list = field(default_factory=list)

    @property
    def worst(self) -> tuple[int, float] | None:
        if not np.any(np.isfinite(self.r_norm)):
            return None
        j = int(np.nanargmax(self.r_norm))
        return j, float(self.r_norm[j])


def residual_covariance(H, C, w, rows=None) -> np.ndarray:
    """Diagonal of the residual covariance for the selected rows of ``H``.

    Rows with zero weight carry no information and get NaN.
    """
    H = np.atleast_2d(np.asarray(H, dtype=float))
    w = np.asarray(w, dtype=float)
    C = np.asarray(C, dtype=float).reshape(-1, H.shape[1])
    rows = np.arange(H.shape[0]) if rows is None else np.asarray(rows, dtype=int)
    out = np.full(rows.size, np.nan)
    live = w[rows] > 0
    if not np.any(live):
        return out
    fac = KKTFactor(H, C, w)
    sel = rows[live]
    Ht = H[sel].T
    rhs = np.vstack([Ht, np.zeros((C.shape[0], sel.size))])
    Z = fac.solve(rhs)[:H.shape[1]]
    out[live] = 1.0 / w[sel] - np.einsum("ij,ji->i", H[sel], Z)
    return out


def diagnose(prob: EstimationProblem, removed=()) -> ResidualDiagnostics:
    rows = np.arange(prob.blocks["pmu"].start, prob.blocks["pmu"].stop)
    r = prob.h[rows].copy()
    omega = residual_covariance(prob.H, prob.C, prob.w, rows)
    r_norm = np.full(rows.size, np.nan)
    ok = omega > OMEGA_FLOOR
    r_norm[ok] = np.abs(r[ok]) / np.sqrt(omega[ok])
    return ResidualDiagnostics(r, omega, r_norm, prob.pmu_index.copy(), list(removed))


def lnr_identify(diag: ResidualDiagnostics, threshold: float = DEFAULT_THRESHOLD) -> int | None:
    """Row with the largest normalized residual above ``threshold``, if any.

    Critical rows (``omega_diag <= 1e-10``) cannot be tested and are skipped.
    """
    r_norm = np.where(np.asarray(diag.omega_diag) > OMEGA_FLOOR, diag.r_norm, np.nan)
    if not np.any(np.isfinite(r_norm)):
        return None
    j = int(np.nanargmax(r_norm))
    return j if r_norm[j] > threshold else None


def lnr_loop(est: MovingHorizonEstimator, window, prior: Prior, X0,
             threshold: float = DEFAULT_THRESHOLD, max_removals: int | None = None):
    """Solve, test, drop the worst channel, re-solve; until nothing is flagged.

    Removal zeroes the channel's weight by marking it invalid in its frame,
    so the returned estimate's window carries the removal into later windows.
    Returns ``(estimate, removed, diagnostics)``; ``removed`` lists
    ``(t, scalar_channel, r_norm)`` for this call only.
    """
    window = list(window)
    e = est.solve(window, prior, X0)
    removed = []
    cap = len(window) * 2 * est.m if max_removals is None else max_removals
    while True:
        diag = diagnose(e.problem, removed)
        j = lnr_identify(diag, threshold)
        if j is None:
            return e, removed, diag
        if len(removed) >= cap:
            log.warning("bad-data removal cap reached at t=%.3f", window[-1].t)
            return e, removed, diag
        k, ch = (int(a) for a in diag.channels[j])
        removed.append((window[k].t, ch, float(diag.r_norm[j])))
        window[k] = window[k].with_invalid(ch)
        log.info("removed channel %d at t=%.3f (r_N=%.1f)", ch, window[k].t, diag.r_norm[j])
        try:
            e = est.solve(window, prior, e.X)
        except SingularKKTError as exc:
            chans = ", ".join(f"{c}@{t:.3f}" for t, c, _ in removed)
            raise UnobservableError(f"bad-data removals made the window unobservable: {chans}",
                                    condition=exc.condition) from exc

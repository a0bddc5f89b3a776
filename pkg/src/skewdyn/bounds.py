"""Empirical audits of the vertical-derivative lower bounds.

Each audit scans sampled orbits for the (start, n) pairs satisfying a
statement's hypotheses, strips the statement's right-hand side from the
observed derivative, and reports the minimum leftover ratio as the fitted
constant.  Statements asserting constant 1 additionally count how often
the ratio dips below 1 (allowing 1e-9 relative rounding slack).

Statement tags:
  eq_1dim_der  |Df0^n(w)| >= C lam0^n min_{j<n} |f0^j(w)|^{d-1}
  prop21i      orbit stays >= delta through n  -> kappa lam0^n
  prop21ii     dip below delta, first return to <= delta  -> constant 1
  prop21iii    |f0^j(w)| >= |f0^n(w)| for j < n  -> kappa0 lam0^n
  thm12_main   tame orbit  -> C lam0^n min_{i<n} |w_i|^{d-1}
  thm12_min    tame + |w_n| minimal  -> C lam0^n
  lem31/lem32  two-dimensional delta-floor variants of prop21i/iii
  lem33        one-dimensional small-return variant (constant 1)
  lem34        tame small-return bound (constant 1)
  lem25        departure from the critical value at rate delta^{-(d-1)}
  lem26        minimal return time to the critical ball (Przytycki floor)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import mc
from .binding import binding_time, mu_constants
from .core import OrbitTrace, SkewProductMap, find_attracting_cycles, iterate_block
from .errors import (
    AttractingCyclePresent,
    EmptyGrid,
    PreconditionViolated,
)
from .fiber import FiberMap

REL_SLACK = 1e-9
_LOG_FLOOR = math.log1p(-REL_SLACK)
_ABS_CAP = 1e50  # orbits past this stop contributing (ratios uncompetitive)


@dataclass
class BoundAudit:
    """Outcome of one statement's scan over a sample batch."""

    statement: str
    lambda0: float
    delta: float | None
    samples: int
    fitted_constant: float
    min_ratio_location: dict | None
    violations: int
    passed: bool
    per_start_min: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def to_json(self) -> dict:
        return {
            "statement": self.statement,
            "lambda0": self.lambda0,
            "delta": self.delta,
            "samples": self.samples,
            "fitted_constant": self.fitted_constant,
            "min_ratio_location": self.min_ratio_location,
            "violations": self.violations,
        }


class _Acc:
    """Running minimum over recorded (start, n) ratios, in log scale."""

    def __init__(self, statement: str, lambda0: float, delta: float | None,
                 constant_one: bool = False):
        self.statement = statement
        self.lambda0 = lambda0
        self.delta = delta
        self.constant_one = constant_one
        self.count = 0
        self.violations = 0
        self.min_log = math.inf
        self.loc: dict | None = None
        self.start_mins: list[float] = []

    def add(self, start_idx: int, ns: np.ndarray, ratio_logs: np.ndarray) -> None:
        # exact critical hits make both sides vanish; drop those pairs
        ok = np.isfinite(ratio_logs) | np.isposinf(ratio_logs)
        if not np.all(ok):
            ns, ratio_logs = ns[ok], ratio_logs[ok]
        if len(ns) == 0:
            return
        self.count += len(ns)
        i = int(np.argmin(ratio_logs))
        lo = float(ratio_logs[i])
        self.start_mins.append(lo)
        if lo < self.min_log:
            self.min_log = lo
            self.loc = {"start": start_idx, "n": int(ns[i])}
        if self.constant_one:
            self.violations += int(np.count_nonzero(ratio_logs < _LOG_FLOOR))

    def to_audit(self) -> BoundAudit:
        fitted = math.exp(self.min_log) if self.count else math.nan
        passed = self.count > 0 and math.isfinite(fitted) and fitted > 0
        return BoundAudit(
            statement=self.statement,
            lambda0=self.lambda0,
            delta=self.delta,
            samples=self.count,
            fitted_constant=fitted,
            min_ratio_location=self.loc,
            violations=self.violations,
            passed=passed,
            per_start_min=np.exp(np.array(self.start_mins)),
        )


def _check_lambda0(lambda0: float, lam: complex | None = None) -> None:
    if not 0.0 < lambda0 < 1.0:
        raise PreconditionViolated(f"lambda0 must lie in (0, 1), got {lambda0}")
    if lam is not None and abs(lam) >= lambda0:
        raise PreconditionViolated(
            f"need |lambda| < lambda0, got |lambda|={abs(lam)} vs lambda0={lambda0}"
        )


# ---------------------------------------------------------------------------
# one-dimensional audits


def audit_onedim(
    f0: FiberMap,
    samples,
    n_max: int,
    lambda0: float,
    delta: float,
) -> dict[str, BoundAudit]:
    """Audit the four one-dimensional lower bounds along fiber orbits.

    Returns {statement: audit} for eq_1dim_der, prop21i, prop21ii,
    prop21iii.  Orbits that blow past the working cap stop contributing;
    their ratios grow without bound and never attain the minimum.
    """
    _check_lambda0(lambda0)
    if delta <= 0:
        raise PreconditionViolated(f"delta must be positive, got {delta}")
    if f0.attracting_cycles():
        raise AttractingCyclePresent("fiber polynomial has an attracting cycle")

    w0 = np.asarray(samples, dtype=complex).ravel()
    m = len(w0)
    d = f0.degree
    log_l0 = math.log(lambda0)
    log_delta = math.log(delta)

    accs = {
        "eq_1dim_der": _Acc("eq_1dim_der", lambda0, None),
        "prop21i": _Acc("prop21i", lambda0, delta),
        "prop21ii": _Acc("prop21ii", lambda0, delta, constant_one=True),
        "prop21iii": _Acc("prop21iii", lambda0, delta),
    }

    # orbit histories: log |w_j| and cumulative log |Df0^j|
    logw = np.full((n_max + 1, m), np.nan)
    logd = np.full((n_max + 1, m), np.nan)
    alive = np.zeros((n_max + 1, m), dtype=bool)
    cur = w0.copy()
    with np.errstate(divide="ignore"):
        logw[0] = np.log(np.abs(cur))
    logd[0] = 0.0
    alive[0] = True
    live = np.isfinite(cur) & (np.abs(cur) <= _ABS_CAP)
    for j in range(n_max):
        dv = f0.deriv(cur[live])
        with np.errstate(divide="ignore"):
            step_log = np.log(np.abs(dv))
        logd[j + 1, live] = logd[j, live] + step_log
        cur[live] = f0(cur[live])
        with np.errstate(divide="ignore", invalid="ignore"):
            logw[j + 1, live] = np.log(np.abs(cur[live]))
        live = live & np.isfinite(cur) & (np.abs(cur) <= _ABS_CAP)
        alive[j + 1] = live

    # prefix minima of log|w_j| over j < n (and over 1 <= j < n)
    prefmin0 = np.minimum.accumulate(logw, axis=0)
    prefmin1 = np.full_like(logw, np.inf)
    if n_max >= 1:
        prefmin1[1:] = np.minimum.accumulate(
            np.where(np.isnan(logw[1:]), np.inf, logw[1:]), axis=0
        )

    for idx in range(m):
        ns_alive = np.nonzero(alive[1:, idx])[0] + 1
        if len(ns_alive) == 0:
            continue
        ns = ns_alive
        ld = logd[ns, idx]
        lw_n = logw[ns, idx]
        pm0 = prefmin0[ns - 1, idx]  # min over j < n
        base = ld - ns * log_l0

        accs["eq_1dim_der"].add(idx, ns, base - (d - 1) * pm0)

        sel = pm0 >= log_delta
        accs["prop21i"].add(idx, ns[sel], base[sel])

        sel = pm0 >= lw_n
        accs["prop21iii"].add(idx, ns[sel], base[sel])

        # dip-and-return: |w| < delta, middles > delta, |f0^n(w)| <= delta
        if logw[0, idx] < log_delta:
            mids = np.where(ns > 1, prefmin1[ns - 1, idx], np.inf)
            sel = (lw_n <= log_delta) & (mids > log_delta)
            clamp = (d - 1) * np.minimum(0.0, logw[0, idx] - lw_n[sel])
            accs["prop21ii"].add(idx, ns[sel], base[sel] - clamp)

    return {k: a.to_audit() for k, a in accs.items()}


# ---------------------------------------------------------------------------
# trace scans (two-dimensional statements)


def _trace_arrays(trace: OrbitTrace):
    """Per-trace log data and the tame prefix length."""
    with np.errstate(divide="ignore"):
        logw = np.log(np.abs(trace.ws))
    logd = trace.log_vder
    flags = np.asarray(trace.tame_flags, dtype=bool)
    not_tame = np.nonzero(~flags)[0]
    tame_len = int(not_tame[0]) if len(not_tame) else len(flags)
    return logw, logd, tame_len


def audit_tame(
    map: SkewProductMap,
    traces,
    lambda0: float,
) -> tuple[BoundAudit, BoundAudit]:
    """Audit the two tame-orbit lower bounds over maximal tame prefixes.

    Returns (thm12_main, thm12_min); the latter restricts to steps whose
    fiber magnitude is minimal over the segment so the bound is a clean
    exponential floor.
    """
    _check_lambda0(lambda0, map.lam)
    if find_attracting_cycles(map):
        raise AttractingCyclePresent("fiber polynomial has an attracting cycle")
    log_l0 = math.log(lambda0)
    d = map.degree
    main = _Acc("thm12_main", lambda0, None)
    amin = _Acc("thm12_min", lambda0, None)
    for idx, trace in enumerate(traces):
        if abs(trace.z0) >= map.r0:
            continue
        logw, logd, tame_len = _trace_arrays(trace)
        if tame_len < 1 or len(trace) < 2:
            continue
        n_hi = min(tame_len, len(trace) - 1)
        ns = np.arange(1, n_hi + 1)
        pm0 = np.minimum.accumulate(logw)[ns - 1]
        base = logd[ns] - ns * log_l0
        main.add(idx, ns, base - (d - 1) * pm0)
        sel = logw[ns] <= pm0
        amin.add(idx, ns[sel], base[sel])
    return main.to_audit(), amin.to_audit()


def audit_return(
    map: SkewProductMap,
    traces,
    lambda0: float,
    delta0: float,
    eta0: float | None = None,
) -> BoundAudit:
    """Audit the tame small-return bound (constant 1).

    Hypotheses per (trace, n): tame through n, |z0| < eta0 (default r0/10),
    |w0| <= delta0, |w_n| <= delta0, and |w_j| >= |w_n| for 0 < j < n.
    """
    _check_lambda0(lambda0, map.lam)
    if delta0 <= 0:
        raise PreconditionViolated(f"delta0 must be positive, got {delta0}")
    if eta0 is None:
        eta0 = map.r0 / 10.0
    log_l0 = math.log(lambda0)
    log_d0 = math.log(delta0)
    d = map.degree
    acc = _Acc("lem34", lambda0, delta0, constant_one=True)
    for idx, trace in enumerate(traces):
        if abs(trace.z0) >= eta0:
            continue
        logw, logd, tame_len = _trace_arrays(trace)
        if logw[0] > log_d0 or tame_len < 1 or len(trace) < 2:
            continue
        n_hi = min(tame_len, len(trace) - 1)
        ns = np.arange(1, n_hi + 1)
        lw_n = logw[ns]
        mids = np.full(len(ns), np.inf)
        if len(ns) > 1:
            mids[1:] = np.minimum.accumulate(logw[1:n_hi])
        sel = (lw_n <= log_d0) & (mids >= lw_n)
        if not np.any(sel):
            continue
        base = logd[ns[sel]] - ns[sel] * log_l0
        clamp = (d - 1) * np.minimum(0.0, logw[0] - lw_n[sel])
        acc.add(idx, ns[sel], base - clamp)
    return acc.to_audit()


def audit_side_lemmas(
    map: SkewProductMap,
    traces,
    lambda0: float,
    delta: float,
    eta: float | None = None,
) -> dict[str, BoundAudit]:
    """Delta-floor and small-return variants emitted from the tame scan.

    lem31: tame, |z0| < eta, |w_j| >= delta for j < n  -> kappa lam0^n.
    lem32: lem31 plus |w_n| <= delta                   -> kappa0 lam0^n.
    lem33: invariant-line traces only; |w_0| < 2 delta, |w_n| < 2 delta,
           middles > delta/2 -> lam0^n min(1, (|w0|/|w_n|)^{d-1}), constant 1.
    """
    _check_lambda0(lambda0, map.lam)
    if delta <= 0:
        raise PreconditionViolated(f"delta must be positive, got {delta}")
    if eta is None:
        eta = map.r0 / 10.0
    log_l0 = math.log(lambda0)
    log_delta = math.log(delta)
    d = map.degree
    a31 = _Acc("lem31", lambda0, delta)
    a32 = _Acc("lem32", lambda0, delta)
    a33 = _Acc("lem33", lambda0, delta, constant_one=True)
    for idx, trace in enumerate(traces):
        logw, logd, tame_len = _trace_arrays(trace)
        if tame_len < 1 or len(trace) < 2:
            continue
        n_hi = min(tame_len, len(trace) - 1)
        ns = np.arange(1, n_hi + 1)
        pm0 = np.minimum.accumulate(logw)[ns - 1]
        lw_n = logw[ns]
        base = logd[ns] - ns * log_l0
        if abs(trace.z0) < eta:
            sel = pm0 >= log_delta
            a31.add(idx, ns[sel], base[sel])
            sel2 = sel & (lw_n <= log_delta)
            a32.add(idx, ns[sel2], base[sel2])
        if trace.z0 == 0 and logw[0] < log_delta + math.log(2.0):
            mids = np.full(len(ns), np.inf)
            if len(ns) > 1:
                mids[1:] = np.minimum.accumulate(logw[1:n_hi])
            sel = (lw_n < log_delta + math.log(2.0)) & (mids > log_delta - math.log(2.0))
            clamp = (d - 1) * np.minimum(0.0, logw[0] - lw_n[sel])
            a33.add(idx, ns[sel], base[sel] - clamp)
    return {a.statement: a.to_audit() for a in (a31, a32, a33)}


# ---------------------------------------------------------------------------
# critical-value departure and return floors


def audit_critical_value_departure(
    map: SkewProductMap,
    starts,
    lambda0: float,
    mu: float | None = None,
    horizon: int = 1000,
) -> BoundAudit:
    """For starts near the critical value, find the step achieving the
    departure bound |Df^n(v)| >= lam0^n delta^{-(d-1)}.

    delta = max(|w1 - c(0)|, |z1|^k)^{1/d}; starts with delta = 0 or
    delta >= 0.05 are excluded.  A sample fails only if no n up to its
    binding time against the critical value reaches ratio >= 1 - 1e-9.
    """
    _check_lambda0(lambda0, map.lam)
    if mu is None:
        mu = mu_constants(map.degree)[0]
    c0 = map.c0_origin
    d = map.degree
    log_l0 = math.log(lambda0)
    acc = _Acc("lem25", lambda0, 0.05, constant_one=True)
    for idx, (z1, w1) in enumerate(starts):
        z1, w1 = complex(z1), complex(w1)
        delta = max(abs(w1 - c0), abs(z1) ** map.k) ** (1.0 / d)
        if delta == 0.0 or delta >= 0.05:
            continue
        rec = binding_time(map, (z1, w1), (0.0, c0), mu, horizon=horizon)
        n_hi = rec.n_last if rec.binding_time is None else rec.binding_time
        found = None
        for n in range(1, min(n_hi, len(rec.log_vder_x) - 1) + 1):
            ratio_log = rec.log_vder_x[n] - n * log_l0 + (d - 1) * math.log(delta)
            if ratio_log >= _LOG_FLOOR:
                found = (n, ratio_log)
                break
        if found is None:
            acc.count += 1
            acc.violations += 1
            acc.start_mins.append(-math.inf)
        else:
            acc.add(idx, np.array([found[0]]), np.array([found[1]]))
    return acc.to_audit()


@dataclass
class ReturnReport:
    """Minimal return time of admissible starts to the critical ball."""

    statement: str
    epsilon: float
    horizon: int
    grid_size: int
    admitted: int
    n_min: int | None
    location: dict | None
    fitted_constant: float | None

    def to_json(self) -> dict:
        # same wire shape as BoundAudit; epsilon rides in the delta slot
        return {
            "statement": self.statement,
            "lambda0": None,
            "delta": self.epsilon,
            "samples": self.admitted,
            "fitted_constant": self.fitted_constant,
            "min_ratio_location": self.location,
            "violations": 0,
        }


def przytycki_return(
    map: SkewProductMap,
    epsilon: float,
    grid,
    horizon: int = 1000,
) -> ReturnReport:
    """Scan starts with |z0|^k <= eps, |w0| <= eps for the earliest n >= 1
    with |xi_n| <= eps; fitted constant is n_min / log(1/eps)."""
    if not 0.0 < epsilon <= 0.1:
        raise PreconditionViolated(f"epsilon must lie in (0, 0.1], got {epsilon}")
    if find_attracting_cycles(map):
        raise AttractingCyclePresent("fiber polynomial has an attracting cycle")
    pts = [(complex(z), complex(w)) for z, w in grid]
    sel = [(z, w) for z, w in pts if abs(z) ** map.k <= epsilon and abs(w) <= epsilon]
    if not sel:
        raise EmptyGrid("no grid start satisfies the smallness hypotheses")
    z0s = np.array([z for z, _ in sel])
    w0s = np.array([w for _, w in sel])

    first = np.full(len(sel), -1, dtype=int)
    z, w = z0s.copy(), w0s.copy()
    active = np.ones(len(sel), dtype=bool)
    for n in range(1, horizon + 1):
        if not active.any():
            break
        w[active] = map.fiber_value(z[active], w[active])
        z[active] = map.lam * z[active]
        hit = active & (np.abs(w) <= epsilon)
        first[hit] = n
        active &= ~hit
        active &= np.abs(w) <= max(map.escape_radius * 10.0, 100.0)

    hits = first[first > 0]
    if len(hits) == 0:
        return ReturnReport(
            statement="lem26", epsilon=epsilon, horizon=horizon,
            grid_size=len(pts), admitted=len(sel),
            n_min=None, location=None, fitted_constant=None,
        )
    n_min = int(hits.min())
    at = int(np.nonzero(first == n_min)[0][0])
    return ReturnReport(
        statement="lem26", epsilon=epsilon, horizon=horizon,
        grid_size=len(pts), admitted=len(sel),
        n_min=n_min,
        location={"start": at, "n": n_min},
        fitted_constant=n_min / math.log(1.0 / epsilon),
    )


def critical_ball_grid(map: SkewProductMap, epsilon: float, per_axis: int = 100):
    """Real lattice inside {|z|^k <= eps} x {|w| <= eps}, centers included.

    Returns stay concentrated near the real locus (off-axis orbits escape
    before re-entering the critical ball), so a real grid probes the
    minimal return time far more efficiently than a complex cloud.
    """
    rz = epsilon ** (1.0 / map.k)
    zs = np.linspace(-rz, rz, per_axis)
    ws = np.linspace(-epsilon, epsilon, per_axis)
    return [(z, w) for z in zs for w in ws]


# ---------------------------------------------------------------------------
# assembly helpers


def sample_traces(
    map: SkewProductMap,
    count: int,
    n: int,
    seed: int,
    z_radius: float | None = None,
    w_radius: float | None = None,
    threads: int = 1,
) -> list[OrbitTrace]:
    """Deterministic random starts iterated to depth n, as traces."""
    if z_radius is None:
        z_radius = 0.9 * map.r0
    if w_radius is None:
        w_radius = 0.9 * map.escape_radius

    def draw(gen: np.random.Generator, m: int) -> np.ndarray:
        return np.column_stack([
            mc.uniform_disk(gen, m, z_radius),
            mc.uniform_disk(gen, m, w_radius),
        ])

    cols = mc.draw_blocks(seed, "trace_starts", count, draw, threads=threads)
    block = iterate_block(map, cols[:, 0], cols[:, 1], n)
    return list(block.to_traces(map))


def merge_audits(a: BoundAudit, b: BoundAudit) -> BoundAudit:
    """Componentwise merge: same statement, minimum fitted constant."""
    if a.statement != b.statement:
        raise ValueError(f"cannot merge {a.statement} with {b.statement}")
    if a.samples == 0:
        keep, other = b, a
    elif b.samples == 0:
        keep, other = a, b
    else:
        keep, other = (a, b) if a.fitted_constant <= b.fitted_constant else (b, a)
    fitted = keep.fitted_constant
    samples = a.samples + b.samples
    return BoundAudit(
        statement=a.statement,
        lambda0=a.lambda0,
        delta=a.delta,
        samples=samples,
        fitted_constant=fitted,
        min_ratio_location=keep.min_ratio_location,
        violations=a.violations + b.violations,
        passed=samples > 0 and math.isfinite(fitted) and fitted > 0,
        per_start_min=np.concatenate([a.per_start_min, b.per_start_min]),
    )

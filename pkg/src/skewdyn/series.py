"""Truncated series criteria along the critical orbit.

Four evaluations share one report shape: the unit-disk series F built from
reciprocal orbit derivatives, the base-contraction constant X0, the lower
Lyapunov estimate at a critical value, and the multicritical nondegeneracy
series.  Tail estimates extrapolate the last decade's term ratio
geometrically; near-zero verdicts compare the value against ten times that
tail, so the margin is scale-free.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass, field

from .core import SkewProductMap, find_attracting_cycles
from .errors import (
    AttractingCyclePresent,
    CriticalOrbitDegenerate,
    PreconditionViolated,
    RootFindingFailed,
)
from .fatou import classify_point
from .fiber import FiberMap

DEFAULT_TERMS = 60
_MARGIN = 10.0  # verdicts need the value to clear this multiple of the tail


@dataclass
class SeriesEvaluation:
    """One truncated series with its provenance and verdict."""

    kind: str
    n_terms: int
    value: complex
    tail_estimate: float
    verdict: str
    partial_sums: list = field(default_factory=list)
    term_logs: list = field(default_factory=list)  # log magnitudes, term 1..N
    points: list | None = None
    per_point: list | None = None
    n_range: tuple[int, int] | None = None

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "N": self.n_terms,
            "value_re": self.value.real,
            "value_im": self.value.imag,
            "tail_estimate": self.tail_estimate,
            "verdict": self.verdict,
            "per_point": self.per_point or [],
        }


def geometric_tail(term_logs: list[float]) -> float:
    """Remaining mass extrapolated from the last decade's mean term ratio.

    Returns +inf when the recent ratio is >= 1 (no geometric control) and 0
    when the terms have underflowed to nothing.
    """
    n = len(term_logs)
    if n < 2:
        return 0.0 if n == 0 or term_logs[-1] == -math.inf else math.inf
    last = term_logs[-1]
    if last == -math.inf:
        return 0.0
    lo = min(n - 2, max(0, n - 1 - max(1, n // 10)))
    if term_logs[lo] == -math.inf:
        return math.inf  # a vanished term followed by mass: no clean ratio
    log_ratio = (last - term_logs[lo]) / (n - 1 - lo)
    if log_ratio >= 0.0:
        return math.inf
    ratio = math.exp(log_ratio)
    return math.exp(last) * ratio / (1.0 - ratio)


def _require_unicritical_fiber(f0: FiberMap) -> None:
    if any(c != 0 for c in f0.coeffs[1:]):
        raise PreconditionViolated(
            "this series needs the unicritical fiber normal form w^d + c")


def _reciprocal_derivative_terms(f0: FiberMap, c: complex, n_terms: int,
                                 weight: complex):
    """Terms weight^n / (f0^n)'(c) for n = 1..n_terms, with log magnitudes.

    Raises CriticalOrbitDegenerate when the orbit of c runs through a zero
    of f0' (the reciprocal is undefined from that step on).
    """
    terms: list[complex] = []
    logs: list[float] = []
    w = complex(c)
    inv = 1.0 + 0.0j  # 1 / (f0^n)'(c), accumulated stepwise
    log_mag = 0.0
    lw = math.log(abs(weight)) if weight != 0 else -math.inf
    for n in range(1, n_terms + 1):
        der = f0.deriv(w)
        if der == 0:
            raise CriticalOrbitDegenerate(
                f"(f0^{n})'({c!r}) vanishes: orbit step {n - 1} is critical")
        inv /= der
        log_mag -= math.log(abs(der))
        w = f0(w)
        if weight == 0:
            terms.append(0.0 + 0.0j)
            logs.append(-math.inf)
        else:
            terms.append(weight**n * inv)
            logs.append(n * lw + log_mag)
    return terms, logs


def levin_series(f0: FiberMap, points, n_terms: int = DEFAULT_TERMS) -> SeriesEvaluation:
    """F(z) = 1 + sum_n z^n / (f0^n)'(c) at each sample point, c = f0(0).

    The series converges on the open unit disk when the fiber has no
    attracting cycle; the verdict certifies nonvanishing on the samples
    only, with a tenfold tail margin.
    """
    _require_unicritical_fiber(f0)
    if f0.attracting_cycles():
        raise AttractingCyclePresent(
            "fiber map has an attracting cycle; the series has no unit "
            "radius of convergence")
    pts = [complex(p) for p in points]
    if not pts:
        raise PreconditionViolated("need at least one evaluation point")
    if any(abs(p) > 0.95 for p in pts):
        raise PreconditionViolated("evaluation points must satisfy |z| <= 0.95")

    c = f0(0.0 + 0.0j)
    per_point = []
    best = None  # (|F|, value, sums, logs, tail, point)
    for p in pts:
        terms, logs = _reciprocal_derivative_terms(f0, c, n_terms, p)
        sums = [1.0 + 0.0j]
        for t in terms:
            sums.append(sums[-1] + t)
        tail = geometric_tail(logs)
        value = sums[-1]
        per_point.append({
            "point_re": p.real, "point_im": p.imag,
            "value_re": value.real, "value_im": value.imag,
            "tail_estimate": tail,
        })
        if best is None or abs(value) < abs(best[1]):
            best = (p, value, sums, logs, tail)
    min_mod = abs(best[1])
    worst_tail = max(pp["tail_estimate"] for pp in per_point)
    verdict = ("nonvanishing on samples" if min_mod > _MARGIN * worst_tail
               else "possibly vanishing")
    return SeriesEvaluation(
        kind="F_series",
        n_terms=n_terms,
        value=best[1],
        tail_estimate=worst_tail,
        verdict=verdict,
        partial_sums=best[2],
        term_logs=best[3],
        points=pts,
        per_point=per_point,
    )


def x0_constant(map: SkewProductMap, n_terms: int = DEFAULT_TERMS) -> SeriesEvaluation:
    """X0 = sum_i (lambda^k)^i / (f0^i)'(c(0)), the i = 0 term being 1."""
    if map.mode != "unicritical":
        raise PreconditionViolated("X0 is defined for unicritical maps")
    if find_attracting_cycles(map):
        raise AttractingCyclePresent(
            "fiber map has an attracting cycle; X0 presupposes a cycle-free "
            "fiber")
    f0 = map.f0()
    c = f0(0.0 + 0.0j)
    weight = map.lam**map.k
    terms, logs = _reciprocal_derivative_terms(f0, c, n_terms, weight)
    sums = [1.0 + 0.0j]
    for t in terms:
        sums.append(sums[-1] + t)
    tail = geometric_tail(logs)
    value = sums[-1]
    verdict = "nonzero" if abs(value) > _MARGIN * tail else "near-zero"
    return SeriesEvaluation(
        kind="X0",
        n_terms=n_terms,
        value=value,
        tail_estimate=tail,
        verdict=verdict,
        partial_sums=sums,
        term_logs=logs,
    )


def lyapunov_lower(f0: FiberMap, c: complex, horizon: int = 400) -> SeriesEvaluation:
    """Lower Lyapunov estimate at c: min over n in [horizon/2, horizon] of
    (1/n) log |(f0^n)'(c)|.

    No cycle gate: the estimate is meaningful (and honestly negative or
    drifting) for parabolic or attracting fibers too.
    """
    if horizon < 2:
        raise PreconditionViolated(f"need horizon >= 2, got {horizon}")
    w = complex(c)
    log_der = 0.0
    step_logs: list[float] = []
    estimates: list[float] = []  # (1/n) log |(f0^n)'(c)| for n = 1..horizon
    for n in range(1, horizon + 1):
        der = f0.deriv(w)
        if der == 0:
            raise CriticalOrbitDegenerate(
                f"(f0^{n})'({c!r}) vanishes: orbit step {n - 1} is critical")
        step = math.log(abs(der))
        step_logs.append(step)
        log_der += step
        estimates.append(log_der / n)
        w = f0(w)
    lo = max(1, horizon // 2)
    window_min = min(estimates[lo - 1:])
    return SeriesEvaluation(
        kind="lyapunov",
        n_terms=horizon,
        value=complex(window_min),
        tail_estimate=0.0,
        verdict="positive" if window_min > 0 else "nonpositive",
        partial_sums=estimates,
        term_logs=step_logs,
        n_range=(lo, horizon),
    )


# ---------------------------------------------------------------------------
# multicritical nondegeneracy


def _poly_eval(coeffs, w):
    acc = 0.0 + 0.0j
    for c in reversed(coeffs):
        acc = acc * w + c
    return acc


def _poly_deriv(coeffs):
    return [i * c for i, c in enumerate(coeffs)][1:]


def _newton_root(coeffs, start, iters=80):
    der = _poly_deriv(coeffs)
    w = complex(start)
    for _ in range(iters):
        pv = _poly_eval(coeffs, w)
        dv = _poly_eval(der, w)
        if dv == 0:
            return None
        step = pv / dv
        w -= step
        if abs(step) < 1e-15 * max(1.0, abs(w)):
            break
    return w


def _deflate(coeffs, root):
    # synthetic division by (w - root); coeffs low-to-high
    out = [0.0j] * (len(coeffs) - 1)
    carry = coeffs[-1]
    for i in range(len(coeffs) - 2, -1, -1):
        out[i] = carry
        carry = coeffs[i] + carry * root
    return out


def _roots_by_deflation(coeffs) -> list[complex]:
    """All roots of the low-to-high polynomial by Newton plus deflation,
    each polished on the undeflated polynomial to 1e-12 residual."""
    work = [complex(c) for c in coeffs]
    while len(work) > 1 and work[-1] == 0:
        work.pop()
    scale = max(abs(c) for c in work)
    if scale == 0 or len(work) <= 1:
        return []
    roots = []
    current = list(work)
    while len(current) > 1:
        found = None
        for attempt in range(64):
            # deterministic spiral of starts
            radius = 0.3 * 1.25 ** (attempt // 8)
            angle = 2.0 * math.pi * (attempt * 0.381966)
            cand = _newton_root(current, radius * cmath.exp(1j * angle))
            if cand is None:
                continue
            if abs(_poly_eval(current, cand)) < 1e-10 * max(abs(c) for c in current):
                found = cand
                break
        if found is None:
            raise RootFindingFailed(
                "Newton with deflation stalled on the critical polynomial")
        roots.append(found)
        current = _deflate(current, found)
    polished = []
    for r in roots:
        p = _newton_root(work, r)
        r = p if p is not None else r
        if abs(_poly_eval(work, r)) > 1e-12 * scale * max(1.0, abs(r)) ** (len(work) - 1):
            raise RootFindingFailed(
                f"root polish left residual {abs(_poly_eval(work, r)):.3e} at {r!r}")
        polished.append(r)
    return polished


def nondegeneracy(map: SkewProductMap, n_terms: int = DEFAULT_TERMS,
                  horizon: int = 1000) -> list[SeriesEvaluation]:
    """Per-critical-value series G(c) + sum_i lambda^i G(f0^i(c))/(f0^i)'(c),
    where G collects the base derivatives of the fiber coefficients at 0.

    Each critical value of f0 gets one report.  The series is evaluated only
    for values the point classifier leaves undecided on the invariant line
    (values inside a basin get verdict "not_on_julia"); a fiber whose
    coefficients do not depend on the base at all has G identically zero and
    every report flagged "degenerate".  Transversality of the critical set
    against the invariant line rides along as the simple-root margin of each
    critical point.
    """
    if map.mode != "general":
        raise PreconditionViolated("nondegeneracy runs on general-mode maps")
    d = map.degree
    f0 = map.f0()
    # dF/dw(0, w), low to high in w
    dfdw = [complex(i) * f0.coeffs[i] for i in range(1, d)] + [complex(d)]
    crit_pts = _roots_by_deflation(dfdw)
    second = _poly_deriv(dfdw)
    g_coeffs = [map.coeff_deriv_at(i, 0.0 + 0.0j) for i in range(d)]
    g_zero = all(c == 0 for c in g_coeffs)

    def g(w):
        return _poly_eval(g_coeffs, w)

    out: list[SeriesEvaluation] = []
    for root in crit_pts:
        cval = f0(root)
        margin = abs(_poly_eval(second, root))
        label = classify_point(map, (0.0, cval), horizon=horizon)
        record = [{
            "root_re": root.real, "root_im": root.imag,
            "critical_value_re": cval.real, "critical_value_im": cval.imag,
            "simple_root_margin": margin,
            "line_label": label,
        }]
        if label != "undecided":
            out.append(SeriesEvaluation(
                kind="nondegeneracy", n_terms=0, value=0.0 + 0.0j,
                tail_estimate=math.inf, verdict="not_on_julia",
                per_point=record))
            continue
        sums = [g(cval)]
        logs: list[float] = []
        w = complex(cval)
        inv = 1.0 + 0.0j
        log_inv = 0.0
        for i in range(1, n_terms + 1):
            der = f0.deriv(w)
            if der == 0:
                raise CriticalOrbitDegenerate(
                    f"(f0^{i})'({cval!r}) vanishes: orbit step {i - 1} is critical")
            inv /= der
            log_inv -= math.log(abs(der))
            w = f0(w)
            gval = g(w)
            term = map.lam**i * gval * inv
            sums.append(sums[-1] + term)
            mag = abs(map.lam) ** i * abs(gval)
            logs.append(math.log(mag) + log_inv if mag > 0 else -math.inf)
        value = sums[-1]
        tail = geometric_tail(logs)
        if g_zero:
            verdict = "degenerate"
        elif abs(value) > _MARGIN * tail:
            verdict = "nonzero"
        else:
            verdict = "near-zero"
        out.append(SeriesEvaluation(
            kind="nondegeneracy",
            n_terms=n_terms,
            value=value,
            tail_estimate=tail,
            verdict=verdict,
            partial_sums=sums,
            term_logs=logs,
            per_point=record,
        ))
    return out

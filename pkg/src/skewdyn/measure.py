"""Monte Carlo estimates of slow-approach statistics and exclusion sets.

Three samplers share one report shape: the fraction of points whose fiber
coordinate stays above the e^(-alpha*n) floor, the area of the sublevel
sets {|xi_n| < e^(-alpha*n)} on a fixed vertical line, and the annulus
fraction excluded at each first-failure index, with log-linear decay fits
over the populated cells.  A separate deterministic report compares the
base derivative of the fiber coordinate against its expected leading term.

All sampling runs through the block-keyed generator in `mc`, so estimates
depend only on (seed, samples), never on thread count.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass

import numpy as np

from .core import SkewProductMap
from .errors import (
    BaseOutsideDomain,
    CriticalHit,
    EmptySample,
    OriginPeriodic,
    PreconditionViolated,
    RateTooLarge,
    ZeroBase,
)
from .mc import draw_blocks, uniform_annulus, uniform_disk
from .series import x0_constant

MEMBERSHIP_HORIZON = 1000  # first-failure search cap; later failures count as none
_PERIODIC_STEPS = 1000
_PERIODIC_TOL = 1e-10


@dataclass
class EstimateReport:
    """One Monte Carlo estimate (or fit) with its provenance.

    quantity is one of slow_fraction, E_area, K_area, decay_fit, xl_ratio.
    For indicator estimates std_error is the sample standard deviation over
    sqrt(samples); for decay_fit rows estimate mirrors fitted_exponent
    (0.0 when no fit was possible) and std_error is the slope's standard
    error.
    """

    quantity: str
    parameters: dict
    samples: int
    estimate: float
    std_error: float
    fitted_exponent: float | None
    seed: int

    def to_json(self) -> dict:
        return {
            "quantity": self.quantity,
            "parameters": self.parameters,
            "samples": self.samples,
            "estimate": self.estimate,
            "std_error": self.std_error,
            "fitted_exponent": self.fitted_exponent,
            "seed": self.seed,
        }


def _indicator_se(hits: float, total: int) -> float:
    if total < 2:
        return 0.0
    p = hits / total
    return math.sqrt(p * (1.0 - p) / (total - 1))


def _fit_decay(xs, log_ys):
    """Least-squares slope of log_ys against xs; returns (-slope, r2, se)."""
    x = np.asarray(xs, dtype=float)
    y = np.asarray(log_ys, dtype=float)
    slope, intercept = np.polyfit(x, y, 1)
    pred = slope * x + intercept
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - np.mean(y)) ** 2))
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    dof = len(x) - 2
    sxx = float(np.sum((x - np.mean(x)) ** 2))
    se = math.sqrt(ss_res / dof / sxx) if dof > 0 and sxx > 0 else 0.0
    return -float(slope), r2, se


def _origin_periodic(map: SkewProductMap) -> bool:
    # the base coordinate of (0,0) stays 0, so return means |w_n| small
    w = 0.0 + 0.0j
    for _ in range(_PERIODIC_STEPS):
        w = map.fiber_value(0.0, w)
        if abs(w) < _PERIODIC_TOL:
            return True
        if abs(w) > map.escape_radius:
            return False
    return False


def slow_approach_stats(map: SkewProductMap, alpha: float, burn_in: int,
                        horizon: int, samples: int, seed: int,
                        threads: int = 1) -> EstimateReport:
    """Fraction of non-escaping starts with |w_n| >= e^(-alpha*n) for every
    n in [burn_in, horizon].

    Starts are uniform in B(0, r0) x B(0, escape_radius); orbits that
    escape within the horizon are discarded before the fraction is taken.
    """
    if alpha <= 0:
        raise PreconditionViolated(f"need alpha > 0, got {alpha}")
    if not 0 <= burn_in < horizon:
        raise PreconditionViolated(
            f"need 0 <= burn_in < horizon, got {burn_in}, {horizon}")
    if samples <= 0:
        raise EmptySample(f"need samples > 0, got {samples}")
    if _origin_periodic(map):
        raise OriginPeriodic(
            "(0,0) returns to itself within tolerance; slow-approach "
            "statistics are undefined")

    def draw(gen: np.random.Generator, count: int) -> np.ndarray:
        z = uniform_disk(gen, count, map.r0)
        w = uniform_disk(gen, count, map.escape_radius)
        return np.stack([z, w], axis=1)

    pts = draw_blocks(seed, "slow", samples, draw, threads)
    z = pts[:, 0].copy()
    w = pts[:, 1].copy()
    escaped = np.zeros(samples, dtype=bool)
    ok = np.ones(samples, dtype=bool)
    for n in range(1, horizon + 1):
        active = ~escaped
        w[active] = map.fiber_value(z[active], w[active])
        z = z * map.lam
        escaped |= np.abs(w) > map.escape_radius
        if n >= burn_in:
            bad = ~escaped & (np.abs(w) < math.exp(-alpha * n))
            ok &= ~bad
    retained = ~escaped
    kept = int(np.sum(retained))
    if kept == 0:
        raise EmptySample("every sampled orbit escaped within the horizon")
    frac = float(np.mean(ok[retained]))
    return EstimateReport(
        quantity="slow_fraction",
        parameters={"alpha": alpha, "burn_in": burn_in, "horizon": horizon,
                    "requested_samples": samples},
        samples=kept,
        estimate=frac,
        std_error=_indicator_se(frac * kept, kept),
        fitted_exponent=None,
        seed=seed,
    )


def _normalize_grid(ns, name: str, minimum: int) -> list[int]:
    if isinstance(ns, (int, np.integer)):
        ns = [int(ns)]
    grid = sorted({int(n) for n in ns})
    if not grid:
        raise PreconditionViolated(f"{name} grid is empty")
    if grid[0] < minimum:
        raise PreconditionViolated(f"{name} values must be >= {minimum}, got {grid[0]}")
    return grid


def e_set_area(map: SkewProductMap, z: complex, alpha: float, ns,
               samples: int, seed: int, threads: int = 1) -> list[EstimateReport]:
    """Area fraction of {w in B(0,R) : |xi_n(z,w)| < e^(-alpha*n)} for each
    n on the grid, plus a trailing decay-fit row.

    One batch of w-draws is classified at every grid n.  The fit regresses
    log-fraction on n over the cells with at least one hit; with fewer than
    two such cells the fit row carries fitted_exponent None.
    """
    z = complex(z)
    if abs(z) >= map.r0:
        raise BaseOutsideDomain(f"|z| = {abs(z):.6g} >= r0 = {map.r0:.6g}")
    if alpha < 0:
        raise PreconditionViolated(f"need alpha >= 0, got {alpha}")
    if samples <= 0:
        raise EmptySample(f"need samples > 0, got {samples}")
    grid = _normalize_grid(ns, "n", 0)

    def draw(gen: np.random.Generator, count: int) -> np.ndarray:
        return uniform_disk(gen, count, map.escape_radius)

    w = draw_blocks(seed, "eset", samples, draw, threads).copy()
    zc = np.full(samples, z, dtype=complex)
    escaped = np.zeros(samples, dtype=bool)
    grid_set = set(grid)
    fractions: dict[int, float] = {}
    if grid[0] == 0:
        fractions[0] = float(np.mean(np.abs(w) < 1.0))
    for n in range(1, grid[-1] + 1):
        active = ~escaped
        w[active] = map.fiber_value(zc[active], w[active])
        zc = zc * map.lam
        escaped |= np.abs(w) > map.escape_radius
        if n in grid_set:
            hit = ~escaped & (np.abs(w) < math.exp(-alpha * n))
            fractions[n] = float(np.mean(hit))

    reports = []
    for n in grid:
        frac = fractions[n]
        reports.append(EstimateReport(
            quantity="E_area",
            parameters={"alpha": alpha, "n": n, "z_re": z.real, "z_im": z.imag},
            samples=samples,
            estimate=frac,
            std_error=_indicator_se(frac * samples, samples),
            fitted_exponent=None,
            seed=seed,
        ))
    populated = [(n, fractions[n]) for n in grid if fractions[n] > 0]
    fit_params = {"alpha": alpha, "z_re": z.real, "z_im": z.imag,
                  "cells": len(grid), "nonzero_cells": len(populated)}
    if len(populated) >= 2:
        gamma, r2, se = _fit_decay([n for n, _ in populated],
                                   [math.log(f) for _, f in populated])
        fit_params["r_squared"] = r2
        fitted, fit_se = gamma, se
    else:
        fit_params["r_squared"] = None
        fitted, fit_se = None, 0.0
    reports.append(EstimateReport(
        quantity="decay_fit",
        parameters=fit_params,
        samples=samples,
        estimate=fitted if fitted is not None else 0.0,
        std_error=fit_se,
        fitted_exponent=fitted,
        seed=seed,
    ))
    return reports


def exclusion_rate(map: SkewProductMap, alpha: float) -> float:
    """The contraction-versus-threshold rate e^(d*alpha) |lambda|^k."""
    return math.exp(map.degree * alpha) * abs(map.lam) ** map.k


def exclusion_area(map: SkewProductMap, alpha: float, m: int, l_values,
                   samples: int, seed: int, horizon: int = MEMBERSHIP_HORIZON,
                   threads: int = 1) -> list[EstimateReport]:
    """First-failure statistics on the annulus |lambda|^(m+1) r0 <= |z| <
    |lambda|^m r0.

    Each z starts at (z, 0); its first-failure index is the minimal l with
    |xi_l| <= |z|^(k/d) e^(-alpha*l), or none within the horizon (such z,
    escaping ones included, count as never-failing).  One shared batch is
    classified once, so the per-l fractions partition the never-failing
    complement exactly.  Returns one K_area row per requested l plus a
    trailing decay-fit row whose parameters carry the never-failing
    fraction and the fit's r_squared.
    """
    rate = exclusion_rate(map, alpha)
    if rate >= 1.0:
        raise RateTooLarge(
            f"e^(d*alpha) |lambda|^k = {rate:.6g} >= 1; thresholds outrun "
            "the base contraction")
    if m < 0:
        raise PreconditionViolated(f"need m >= 0, got {m}")
    if samples <= 0:
        raise EmptySample(f"need samples > 0, got {samples}")
    if horizon < 1:
        raise PreconditionViolated(f"need horizon >= 1, got {horizon}")
    grid = _normalize_grid(l_values, "l", 1)
    if grid[-1] > horizon:
        raise PreconditionViolated(
            f"l = {grid[-1]} exceeds the membership horizon {horizon}")

    r_outer = abs(map.lam) ** m * map.r0
    r_inner = abs(map.lam) * r_outer

    def draw(gen: np.random.Generator, count: int) -> np.ndarray:
        return uniform_annulus(gen, count, r_inner, r_outer)

    z0 = draw_blocks(seed, "exclusion", samples, draw, threads)
    thr0 = np.abs(z0) ** (map.k / map.degree)
    w = np.zeros(samples, dtype=complex)
    zc = z0.copy()
    first_fail = np.zeros(samples, dtype=np.int64)  # 0 = never failed
    dead = np.zeros(samples, dtype=bool)
    for l in range(1, horizon + 1):
        active = ~dead
        if not np.any(active):
            break
        w[active] = map.fiber_value(zc[active], w[active])
        zc = zc * map.lam
        fail = active & (np.abs(w) <= thr0 * math.exp(-alpha * l))
        first_fail[fail] = l
        dead |= fail
        dead |= active & (np.abs(w) > map.escape_radius)

    counts = np.bincount(first_fail, minlength=horizon + 1)
    never_fraction = counts[0] / samples

    reports = []
    for l in grid:
        frac = counts[l] / samples
        reports.append(EstimateReport(
            quantity="K_area",
            parameters={"alpha": alpha, "m": m, "l": l},
            samples=samples,
            estimate=float(frac),
            std_error=_indicator_se(float(counts[l]), samples),
            fitted_exponent=None,
            seed=seed,
        ))
    populated = [(l, counts[l] / samples) for l in grid if counts[l] > 0]
    fit_params = {"alpha": alpha, "m": m, "l_min": grid[0], "l_max": grid[-1],
                  "cells": len(grid), "nonzero_cells": len(populated),
                  "never_failing_fraction": float(never_fraction),
                  "horizon": horizon}
    if len(populated) >= 2:
        gamma, r2, se = _fit_decay([l for l, _ in populated],
                                   [math.log(f) for _, f in populated])
        fit_params["r_squared"] = r2
        fitted, fit_se = gamma, se
    else:
        fit_params["r_squared"] = None
        fitted, fit_se = None, 0.0
    reports.append(EstimateReport(
        quantity="decay_fit",
        parameters=fit_params,
        samples=samples,
        estimate=fitted if fitted is not None else 0.0,
        std_error=fit_se,
        fitted_exponent=fitted,
        seed=seed,
    ))
    return reports


# ---------------------------------------------------------------------------
# base derivative of the fiber coordinate


@dataclass
class BaseDerivativeReport:
    """Forward-recursion value of X_l = d(xi_l)/dz at (z0, 0) with its
    normalized ratio, leading-term target, and finite-difference check."""

    z0: complex
    l: int
    k: int
    x_l: complex
    denominator: complex  # vertical derivative over steps 1..l-1
    ratio: complex
    x0_value: complex
    target: complex  # k * X0 * z0^(k-1)
    deviation: float
    bound: float  # half of k |X0| |z0|^(k-1)
    within_bound: bool
    sum_form: complex
    recursion_vs_sum_rel: float
    fd_value: complex
    fd_rel_deviation: float
    fd_step: float
    fd_dps: int  # 0 when the difference ran in doubles

    def to_json(self) -> dict:
        return {
            "z0_re": self.z0.real, "z0_im": self.z0.imag,
            "l": self.l, "k": self.k,
            "x_l_re": self.x_l.real, "x_l_im": self.x_l.imag,
            "ratio_re": self.ratio.real, "ratio_im": self.ratio.imag,
            "target_re": self.target.real, "target_im": self.target.imag,
            "deviation": self.deviation,
            "bound": self.bound,
            "within_bound": self.within_bound,
            "recursion_vs_sum_rel": self.recursion_vs_sum_rel,
            "fd_rel_deviation": self.fd_rel_deviation,
            "fd_step": self.fd_step,
            "fd_dps": self.fd_dps,
        }


def _fd_doubles(map: SkewProductMap, z0: complex, l: int, h: float) -> complex:
    def xi(z):
        w = 0.0 + 0.0j
        zc = z
        for _ in range(l):
            w = w**map.degree + map.c0_at(zc)
            zc = zc * map.lam
        return w

    return (xi(z0 + h) - xi(z0 - h)) / (2.0 * h)


def _recursion_doubles(map: SkewProductMap, z0: complex, l: int):
    d = map.degree
    xi = 0.0 + 0.0j
    x = 0.0 + 0.0j
    denom = 1.0 + 0.0j
    sum_form = 0.0 + 0.0j
    lam_pow = 1.0 + 0.0j
    max_denom = 1.0
    for j in range(l):
        zj = lam_pow * z0
        sum_form += lam_pow * map.coeff_deriv_at(0, zj) / denom
        x = d * xi ** (d - 1) * x + lam_pow * map.coeff_deriv_at(0, zj)
        xi = xi**d + map.c0_at(zj)
        lam_pow *= map.lam
        if j < l - 1:
            factor = d * xi ** (d - 1)
            if factor == 0:
                raise CriticalHit(j + 1)
            denom *= factor
            max_denom = max(max_denom, abs(denom))
    return x, denom, sum_form, max_denom


def _mp_recursion(map: SkewProductMap, z0: complex, l: int):
    """Orbit, recursion, denominator, and sum form at the active mpmath
    precision; also tracks the largest intermediate derivative product,
    which sets the finite-difference step."""
    from mpmath import mpc

    coeffs = [mpc(c) for c in map.fiber_coeffs[0]]
    dcoeffs = [i * c for i, c in enumerate(coeffs)][1:]
    lam = mpc(map.lam)
    d = map.degree

    def horner(cs, z):
        acc = mpc(0)
        for c in reversed(cs):
            acc = acc * z + c
        return acc

    xi = mpc(0)
    x = mpc(0)
    denom = mpc(1)
    sum_form = mpc(0)
    lam_pow = mpc(1)
    max_denom = abs(mpc(1))
    z0m = mpc(z0)
    for j in range(l):
        zj = lam_pow * z0m
        cp = horner(dcoeffs, zj)
        sum_form += lam_pow * cp / denom
        x = d * xi ** (d - 1) * x + lam_pow * cp
        xi = xi**d + horner(coeffs, zj)
        lam_pow *= lam
        if j < l - 1:
            factor = d * xi ** (d - 1)
            if factor == 0:
                raise CriticalHit(j + 1)
            denom *= factor
            max_denom = max(max_denom, abs(denom))
    return x, denom, sum_form, max_denom


def _fd_mpmath(map: SkewProductMap, z0: complex, l: int, h: float) -> complex:
    from mpmath import mpc

    coeffs = [mpc(c) for c in map.fiber_coeffs[0]]
    lam = mpc(map.lam)
    d = map.degree

    def c0(z):
        acc = mpc(0)
        for c in reversed(coeffs):
            acc = acc * z + c
        return acc

    def xi(z):
        w = mpc(0)
        zc = z
        for _ in range(l):
            w = w**d + c0(zc)
            zc = zc * lam
        return w

    hm = mpc(h)
    return complex((xi(mpc(z0) + hm) - xi(mpc(z0) - hm)) / (2 * hm))


def fiber_base_derivative(map: SkewProductMap, z0: complex, l: int,
                          x0_terms: int = 120) -> BaseDerivativeReport:
    """X_l by the forward recursion, its ratio to the vertical derivative,
    and the comparison against the leading term k X0 z0^(k-1).

    The recursion X_j = d xi_{j-1}^{d-1} X_{j-1} + lambda^{j-1} c'(lambda^{j-1} z0)
    starts from X_0 = 0 (the fiber start is constant in z).  The ratio
    divides by the vertical derivative accumulated over steps 1..l-1, which
    must not vanish.  For l <= 8 everything runs in doubles with the
    centered-difference step 1e-9 |z0|.  Deeper l is not double-computable:
    orbits brushing the critical point amplify rounding by the ratio of the
    largest to the smallest intermediate derivative product, so recursion,
    sum form, and finite difference all run in extended precision, with the
    step scaled down by the largest intermediate product.
    """
    if map.mode != "unicritical":
        raise PreconditionViolated(
            "base-derivative comparison runs on unicritical maps")
    z0 = complex(z0)
    if z0 == 0:
        raise ZeroBase("z0 must be nonzero")
    if abs(z0) >= map.r0:
        raise BaseOutsideDomain(f"|z0| = {abs(z0):.6g} >= r0 = {map.r0:.6g}")
    if l < 1:
        raise PreconditionViolated(f"need l >= 1, got {l}")

    if l <= 8:
        x, denom, sum_form, _ = _recursion_doubles(map, z0, l)
        h = 1e-9 * abs(z0)
        fd = _fd_doubles(map, z0, l, h)
        dps = 0
        x_c, denom_c, sum_c = x, denom, sum_form
    else:
        from mpmath import mp

        with mp.workdps(60):
            _, _, _, max_denom = _mp_recursion(map, z0, l)
            max_denom_f = float(min(max_denom, mp.mpf("1e300")))
        h = abs(z0) * min(1e-9, 1e-3 / max(1.0, max_denom_f))
        dps = max(60, int(math.ceil(25.0 - math.log10(h / abs(z0)))))
        with mp.workdps(dps):
            x, denom, sum_form, _ = _mp_recursion(map, z0, l)
            fd = _fd_mpmath(map, z0, l, h)
            x_c, denom_c, sum_c = complex(x), complex(denom), complex(sum_form)

    ratio = x_c / denom_c
    sum_rel = abs(ratio - sum_c) / max(abs(ratio), abs(sum_c), 1e-300)
    fd_rel = abs(fd - x_c) / max(abs(x_c), 1e-300)

    x0 = x0_constant(map, x0_terms).value
    target = map.k * x0 * z0 ** (map.k - 1)
    deviation = abs(ratio - target)
    bound = 0.5 * map.k * abs(x0) * abs(z0) ** (map.k - 1)

    return BaseDerivativeReport(
        z0=z0, l=l, k=map.k,
        x_l=x_c, denominator=denom_c, ratio=ratio,
        x0_value=x0, target=target,
        deviation=deviation, bound=bound, within_bound=deviation <= bound,
        sum_form=sum_c, recursion_vs_sum_rel=sum_rel,
        fd_value=fd, fd_rel_deviation=fd_rel, fd_step=h, fd_dps=dps,
    )


# ---------------------------------------------------------------------------
# serialization


def reports_to_csv(reports: list[EstimateReport]) -> str:
    """Uniform CSV: fixed columns plus a JSON parameters cell."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["quantity", "samples", "estimate", "std_error",
                     "fitted_exponent", "seed", "parameters"])
    for r in reports:
        writer.writerow([
            r.quantity,
            r.samples,
            f"{r.estimate:.17g}",
            f"{r.std_error:.17g}",
            "" if r.fitted_exponent is None else f"{r.fitted_exponent:.17g}",
            r.seed,
            json.dumps(r.parameters, sort_keys=True),
        ])
    return buf.getvalue()


def decay_cells_csv(reports: list[EstimateReport]) -> str:
    """Two-column (index, log_fraction) CSV over the populated area cells."""
    rows = [r for r in reports if r.quantity in ("K_area", "E_area") and r.estimate > 0]
    label = "l" if any(r.quantity == "K_area" for r in rows) else "n"
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([label, "log_fraction"])
    for r in rows:
        writer.writerow([r.parameters[label], f"{math.log(r.estimate):.17g}"])
    return buf.getvalue()

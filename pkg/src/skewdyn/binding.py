"""Binding times for orbit pairs, with the ratio and expansion audits.

A pair of starting points is "bound" while their fiber coordinates stay
within a slowly tightening relative distance of each other; the binding
time is the first step where the separation crosses the threshold
mu * min(|xi_n(x)|, |xi_n(y)|) / (n+1)^2.  While bound, the vertical
derivatives along the two orbits are comparable, and the derivative along
one orbit is bounded below by the separation divided by an accumulated
coefficient-difference sum W.  Both facts are audited numerically here.
"""

from __future__ import annotations

import cmath
import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import mc
from .core import SkewProductMap
from .errors import (
    BaseOutsideDomain,
    CriticalHit,
    HorizonNonPositive,
    PreconditionViolated,
)

OVERFLOW_GUARD = 1e100
DEFAULT_HORIZON = 10_000


def mu_constants(degree: int) -> tuple[float, float]:
    """Closeness constants (mu0, mu1) used for binding thresholds.

    mu0 = 0.07/d keeps the summed threshold series 2*mu0*pi^2/6 below
    1/(4d); mu1 = mu0/4 leaves room for the two-chain amplification
    2*mu1*(1+mu1) <= mu0.  check_mu_constants verifies both.
    """
    if degree < 2:
        raise ValueError("degree must be at least 2")
    mu0 = 0.07 / degree
    return mu0, mu0 / 4.0


def check_mu_constants(degree: int) -> dict:
    """Verify the two defining conditions at the worst case (equality)."""
    mu0, mu1 = mu_constants(degree)
    series_sum = 2.0 * mu0 * math.pi**2 / 6.0
    series_cap = 1.0 / (4.0 * degree)
    chain_lhs = 2.0 * mu1 * (1.0 + mu1)
    return {
        "mu0": mu0,
        "mu1": mu1,
        "series_sum": series_sum,
        "series_cap": series_cap,
        "series_ok": series_sum < series_cap,
        "chain_lhs": chain_lhs,
        "chain_cap": mu0,
        "chain_ok": chain_lhs <= mu0,
    }


@dataclass
class BindingRecord:
    """One audited pair: orbit data through min(binding_time, horizon).

    Arrays are indexed by step n = 0..n_last.  w_history[n-1] holds the
    accumulated sum W(x, y, n) for n >= 1; it is truncated early if the
    vertical derivative along x vanishes (critical_hit_at records where).
    """

    x: tuple[complex, complex]
    y: tuple[complex, complex]
    mu: float
    horizon: int
    binding_time: int | None
    censored: bool
    shadowing: bool = False
    overflow: bool = False
    critical_hit_at: int | None = None
    xi_x: np.ndarray = field(default_factory=lambda: np.zeros(0, complex))
    xi_y: np.ndarray = field(default_factory=lambda: np.zeros(0, complex))
    separations: np.ndarray = field(default_factory=lambda: np.zeros(0))
    thresholds: np.ndarray = field(default_factory=lambda: np.zeros(0))
    log_vder_x: np.ndarray = field(default_factory=lambda: np.zeros(0))
    log_vder_y: np.ndarray = field(default_factory=lambda: np.zeros(0))
    phase_x: np.ndarray = field(default_factory=lambda: np.zeros(0))
    phase_y: np.ndarray = field(default_factory=lambda: np.zeros(0))
    w_history: np.ndarray | None = None

    @property
    def n_last(self) -> int:
        return len(self.separations) - 1

    @property
    def w_final(self) -> float:
        if self.w_history is None or len(self.w_history) == 0:
            return math.nan
        return float(self.w_history[-1])


@dataclass
class BindingAudit:
    kind: str  # "derivative_ratio" or "derivative_expansion"
    n_checked: int
    max_deviation: float
    min_margin: float
    margins: np.ndarray
    passed: bool
    skipped: bool = False


def binding_time(
    map: SkewProductMap,
    x: tuple[complex, complex],
    y: tuple[complex, complex],
    mu: float,
    horizon: int = DEFAULT_HORIZON,
) -> BindingRecord:
    """First step where the pair's separation crosses the threshold.

    Equality counts as crossed.  If no step up to `horizon` crosses, the
    record is horizon-censored.  Identical starting points short-circuit
    to a censored "shadowing" record instead of looping.
    """
    if horizon <= 0:
        raise HorizonNonPositive(f"horizon must be positive, got {horizon}")
    mu0, _ = mu_constants(map.degree)
    if not 0.0 < mu <= mu0 + 1e-15:
        raise PreconditionViolated(f"mu must lie in (0, {mu0}], got {mu}")
    zx, wx = complex(x[0]), complex(x[1])
    zy, wy = complex(y[0]), complex(y[1])
    for z in (zx, zy):
        if abs(z) >= map.r0:
            raise BaseOutsideDomain(f"|z|={abs(z)} outside base disk of radius {map.r0}")

    if zx == zy and wx == wy:
        rec = BindingRecord(
            x=(zx, wx), y=(zy, wy), mu=mu, horizon=horizon,
            binding_time=None, censored=True, shadowing=True,
        )
        rec.xi_x = np.array([wx]); rec.xi_y = np.array([wy])
        rec.separations = np.array([0.0])
        rec.thresholds = np.array([mu * abs(wx)])
        rec.log_vder_x = np.array([0.0]); rec.log_vder_y = np.array([0.0])
        rec.phase_x = np.array([0.0]); rec.phase_y = np.array([0.0])
        rec.w_history = np.zeros(0)
        return rec

    unicritical = map.mode == "unicritical"
    xs = [wx]; ys = [wy]
    seps = [abs(wx - wy)]
    thrs = [mu * min(abs(wx), abs(wy))]
    lvx = [0.0]; lvy = [0.0]; phx = [0.0]; phy = [0.0]
    w_hist: list[float] = []
    w_sum = 2.0 * abs(wx - wy)
    crit_at: int | None = None
    b: int | None = None
    overflow = False

    n = 0
    while True:
        if seps[-1] >= thrs[-1]:
            b = n
            break
        if n >= horizon:
            break
        if max(abs(wx), abs(wy)) > OVERFLOW_GUARD:
            overflow = True
            break
        # advance both orbits one step, accumulating derivative cocycles
        fx = map.dfdw(zx, wx)
        fy = map.dfdw(zy, wy)
        mag_x, mag_y = abs(fx), abs(fy)
        lvx.append(lvx[-1] + (math.log(mag_x) if mag_x > 0 else -math.inf))
        lvy.append(lvy[-1] + (math.log(mag_y) if mag_y > 0 else -math.inf))
        phx.append(phx[-1] + (cmath.phase(fx) if mag_x > 0 else 0.0))
        phy.append(phy[-1] + (cmath.phase(fy) if mag_y > 0 else 0.0))
        if mag_x == 0 and crit_at is None:
            crit_at = n
        wx = map.fiber_value(zx, wx)
        wy = map.fiber_value(zy, wy)
        n += 1
        if unicritical and crit_at is None:
            dc = abs(map.c0_at(zx) - map.c0_at(zy))
            w_sum += 2.0 * dc * math.exp(-lvx[-1])
            w_hist.append(w_sum)
        zx *= map.lam
        zy *= map.lam
        xs.append(wx); ys.append(wy)
        seps.append(abs(wx - wy))
        thrs.append(mu * min(abs(wx), abs(wy)) / (n + 1) ** 2)

    rec = BindingRecord(
        x=(complex(x[0]), complex(x[1])), y=(complex(y[0]), complex(y[1])),
        mu=mu, horizon=horizon,
        binding_time=b, censored=b is None,
        overflow=overflow, critical_hit_at=crit_at,
    )
    rec.xi_x = np.array(xs); rec.xi_y = np.array(ys)
    rec.separations = np.array(seps); rec.thresholds = np.array(thrs)
    rec.log_vder_x = np.array(lvx); rec.log_vder_y = np.array(lvy)
    rec.phase_x = np.array(phx); rec.phase_y = np.array(phy)
    rec.w_history = np.array(w_hist) if unicritical else None
    return rec


def w_accumulator(
    map: SkewProductMap, x: tuple[complex, complex], y: tuple[complex, complex], n: int
) -> float:
    """Accumulated difference sum W(x, y, n).

    W = 2|w0 - w| + sum_{i=1}^n 2|c(lam^{i-1} z0) - c(lam^{i-1} z)| / |Df^i(x)(v)|,
    evaluated with log-scale derivative magnitudes.  Unicritical maps only:
    the sum compares the single varying fiber coefficient.
    """
    if n < 1:
        raise HorizonNonPositive(f"n must be at least 1, got {n}")
    if map.mode != "unicritical":
        raise PreconditionViolated("w accumulator requires a unicritical map")
    zx, wx = complex(x[0]), complex(x[1])
    zy, wy = complex(y[0]), complex(y[1])
    if zx == zy and wx == wy:
        return 0.0
    total = 2.0 * abs(wx - wy)
    log_d = 0.0
    z, w = zx, wx
    for i in range(1, n + 1):
        factor = map.dfdw(z, w)
        mag = abs(factor)
        if mag == 0:
            raise CriticalHit(i - 1)
        log_d += math.log(mag)
        dc = abs(map.c0_at(zx * map.lam ** (i - 1)) - map.c0_at(zy * map.lam ** (i - 1)))
        total += 2.0 * dc * math.exp(-log_d)
        z, w = map.step(z, w)
    return total


def audit_lemma_ratio(record: BindingRecord) -> BindingAudit:
    """Check |Df^m(x)(v) / Df^m(y)(v) - 1| < 1/2 for every m while bound."""
    if record.shadowing:
        return BindingAudit(
            kind="derivative_ratio", n_checked=0, max_deviation=0.0,
            min_margin=0.5, margins=np.zeros(0), passed=True, skipped=True,
        )
    n_limit = record.n_last if record.binding_time is None else record.binding_time
    if n_limit < 1:
        return BindingAudit(
            kind="derivative_ratio", n_checked=0, max_deviation=0.0,
            min_margin=0.5, margins=np.zeros(0), passed=True, skipped=True,
        )
    m = np.arange(1, n_limit + 1)
    log_ratio = record.log_vder_x[m] - record.log_vder_y[m]
    phase = record.phase_x[m] - record.phase_y[m]
    with np.errstate(over="ignore", invalid="ignore"):
        ratio = np.exp(log_ratio) * np.exp(1j * phase)
        dev = np.abs(ratio - 1.0)
    ok = np.isfinite(dev)
    dev = np.where(ok, dev, np.inf)
    margins = 0.5 - dev
    max_dev = float(dev.max()) if len(dev) else 0.0
    return BindingAudit(
        kind="derivative_ratio",
        n_checked=int(len(m)),
        max_deviation=max_dev,
        min_margin=float(margins.min()) if len(margins) else 0.5,
        margins=margins,
        passed=bool(max_dev < 0.5),
    )


def audit_lemma_expansion(record: BindingRecord, rel_slack: float = 1e-9) -> BindingAudit:
    """Check the derivative lower bounds against separation / W.

    General form at each bound step n: |Df^n(x)(v)| >= |xi_n(x)-xi_n(y)| / W(n).
    At a finite binding time b, additionally:
    |Df^b(x)(v)| >= mu |xi_b(x)| / (2 (b+1)^2 W(b)).
    Margins are relative slacks (lhs/rhs - 1).
    """
    if record.shadowing or record.w_history is None:
        return BindingAudit(
            kind="derivative_expansion", n_checked=0, max_deviation=0.0,
            min_margin=math.inf, margins=np.zeros(0), passed=True, skipped=True,
        )
    n_limit = record.n_last if record.binding_time is None else record.binding_time
    n_limit = min(n_limit, len(record.w_history))
    if n_limit < 1:
        return BindingAudit(
            kind="derivative_expansion", n_checked=0, max_deviation=0.0,
            min_margin=math.inf, margins=np.zeros(0), passed=True, skipped=True,
        )
    ns = np.arange(1, n_limit + 1)
    w_vals = record.w_history[ns - 1]
    seps = record.separations[ns]
    lhs_log = record.log_vder_x[ns]
    with np.errstate(divide="ignore", invalid="ignore"):
        rhs_log = np.log(seps) - np.log(w_vals)
        margins = np.expm1(lhs_log - rhs_log)
    # vacuous steps (zero separation): infinite slack
    margins = np.where(seps > 0, margins, np.inf)

    extra = []
    b = record.binding_time
    if b is not None and 1 <= b <= n_limit:
        rhs2 = record.mu * abs(record.xi_x[b]) / (2.0 * (b + 1) ** 2 * w_vals[b - 1])
        if rhs2 > 0:
            extra.append(math.expm1(record.log_vder_x[b] - math.log(rhs2)))
    all_margins = np.concatenate([margins, np.array(extra)]) if extra else margins
    min_margin = float(all_margins.min()) if len(all_margins) else math.inf
    return BindingAudit(
        kind="derivative_expansion",
        n_checked=int(n_limit),
        max_deviation=float(-min(min_margin, 0.0)),
        min_margin=min_margin,
        margins=all_margins,
        passed=bool(min_margin >= -rel_slack),
    )


def sample_bound_pairs(
    map: SkewProductMap,
    count: int,
    seed: int,
    mu: float | None = None,
    w_radius: float | None = None,
    threads: int = 1,
) -> list[tuple[tuple[complex, complex], tuple[complex, complex]]]:
    """Random nearby pairs whose initial separation sits below the threshold.

    Separations are drawn log-uniformly over three decades below mu*|w0| so
    the batch spans a range of binding times.
    """
    if mu is None:
        mu = mu_constants(map.degree)[0]
    if w_radius is None:
        w_radius = 0.45 * map.escape_radius

    def draw(gen: np.random.Generator, m: int) -> np.ndarray:
        z = mc.uniform_disk(gen, m, 0.9 * map.r0)
        w = mc.uniform_annulus(gen, m, 0.05 * w_radius, w_radius)
        scale = 10.0 ** (-3.0 * gen.random(m))
        dw = 0.9 * mu * np.abs(w) * scale * np.exp(2j * np.pi * gen.random(m))
        dz = 0.05 * map.r0 * 10.0 ** (-3.0 * gen.random(m)) * np.exp(2j * np.pi * gen.random(m))
        return np.column_stack([z, w, z + dz, w + dw])

    cols = mc.draw_blocks(seed, "binding_pairs", count, draw, threads=threads)
    return [((row[0], row[1]), (row[2], row[3])) for row in cols]


def audit_pair_batch(
    map: SkewProductMap,
    pairs,
    mu: float,
    horizon: int = DEFAULT_HORIZON,
    threads: int = 1,
) -> list[dict]:
    """Bind and audit each pair; rows keep the input order."""

    def work(item):
        idx, (x, y) = item
        rec = binding_time(map, x, y, mu, horizon)
        ratio = audit_lemma_ratio(rec)
        expansion = audit_lemma_expansion(rec)
        return {
            "pair_id": idx,
            "mu": mu,
            "binding_time": rec.binding_time,
            "censored": rec.censored,
            "W_final": rec.w_final,
            "min_margin_lemma23": ratio.min_margin if not ratio.skipped else math.nan,
            "min_margin_lemma24": expansion.min_margin if not expansion.skipped else math.nan,
            "record": rec,
            "ratio_audit": ratio,
            "expansion_audit": expansion,
        }

    return mc.map_blocks(list(enumerate(pairs)), work, threads=threads)


CSV_COLUMNS = [
    "pair_id", "mu", "binding_time", "censored",
    "W_final", "min_margin_lemma23", "min_margin_lemma24",
]


def binding_rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in rows:
        bt = row["binding_time"]
        writer.writerow([
            row["pair_id"],
            f"{row['mu']:.17g}",
            "" if bt is None else bt,
            int(row["censored"]),
            f"{row['W_final']:.17g}",
            f"{row['min_margin_lemma23']:.17g}",
            f"{row['min_margin_lemma24']:.17g}",
        ])
    return buf.getvalue()

"""
Post-hoc coverage calibration of a trained model.

A model fitted for a wide envelope can serve any narrower coverage target
without retraining: the interval at slice alpha shrinks monotonically as
alpha grows, so empirical coverage on a held-out calibration set is a
non-increasing function of alpha.  Inverting that function picks the slice
whose interval covers a requested fraction of targets.  Two inverters are
provided: a sampled lookup table with linear interpolation, and a
derivative-free shrinking-step search that needs no quantization choices.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .core import ALPHA_MIN, ModelParams, trs_batch
from .errors import FlatCurveError


# ---------------------------------------------------------------------------
# Interval quality metrics
# ---------------------------------------------------------------------------

def picp(y, lo, hi) -> float:
    """Prediction interval coverage probability.

    Fraction of targets with lo_i <= y_i <= hi_i; boundary hits count as
    covered.
    """
    y = np.asarray(y, dtype=float)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if y.shape != lo.shape or y.shape != hi.shape or y.ndim != 1:
        raise ValueError("y, lo, hi must be 1-D arrays of equal length")
    if y.size == 0:
        raise ValueError("coverage of an empty sample is undefined")
    return float(np.mean((lo <= y) & (y <= hi)))


def pinaw(y, lo, hi) -> float:
    """Prediction interval normalized average width.

    Mean interval width divided by the target range.
    """
    y = np.asarray(y, dtype=float)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if y.shape != lo.shape or y.shape != hi.shape or y.ndim != 1:
        raise ValueError("y, lo, hi must be 1-D arrays of equal length")
    if y.size == 0:
        raise ValueError("width of an empty sample is undefined")
    span = float(y.max() - y.min())
    if span <= 0.0:
        raise ValueError("target range is zero; width cannot be normalized")
    return float(np.mean(hi - lo) / span)


def coverage_at_alpha(params: ModelParams, X, y, alpha) -> float:
    """Empirical coverage of the slice-alpha interval on a dataset."""
    lo, hi = trs_batch(np.asarray(X, dtype=float), alpha, params)
    return picp(np.asarray(y, dtype=float), lo, hi)


# ---------------------------------------------------------------------------
# Lookup-table inverter
# ---------------------------------------------------------------------------

def _isotonic_decreasing(values: np.ndarray) -> np.ndarray:
    """Least-squares non-increasing fit by pool-adjacent-violators."""
    vals = list(-np.asarray(values, dtype=float))  # fit non-decreasing on -v
    level = []
    weight = []
    for v in vals:
        level.append(v)
        weight.append(1.0)
        while len(level) > 1 and level[-2] > level[-1]:
            w = weight[-2] + weight[-1]
            merged = (level[-2] * weight[-2] + level[-1] * weight[-1]) / w
            level[-2:] = [merged]
            weight[-2:] = [w]
    out = np.concatenate([np.full(int(w), lv) for lv, w in zip(level, weight)])
    return -out


@dataclass(frozen=True)
class CalibrationTable:
    """Sampled (alpha, coverage) pairs with alpha ascending.

    Coverage is non-increasing in alpha; sampling noise that breaks this is
    repaired isotonically at construction, since the underlying curve is
    monotone by interval nesting.
    """

    alphas: np.ndarray
    phis: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.alphas, dtype=float)
        p = np.asarray(self.phis, dtype=float)
        if a.ndim != 1 or a.shape != p.shape or a.size < 2:
            raise ValueError("need at least two (alpha, phi) pairs")
        if np.any(np.diff(a) <= 0.0):
            raise ValueError("alpha grid must be strictly increasing")
        if np.any(a < ALPHA_MIN) or np.any(a > 1.0):
            raise ValueError(f"alpha grid must lie in [{ALPHA_MIN}, 1]")
        if np.any(np.diff(p) > 0.0):
            p = _isotonic_decreasing(p)
        object.__setattr__(self, "alphas", a)
        object.__setattr__(self, "phis", p)

    def __len__(self) -> int:
        return self.alphas.size


@dataclass(frozen=True)
class LookupResult:
    alpha_star: float
    out_of_range: bool


def alpha_grid(delta: float) -> np.ndarray:
    """Quantized slice grid {alpha_min, delta, 2*delta, ..., 1}, deduplicated."""
    if not 0.0 < delta < 1.0:
        raise ValueError("step size must lie in (0, 1)")
    steps = np.arange(1, int(np.floor(1.0 / delta)) + 1) * delta
    pts = np.concatenate([[ALPHA_MIN], np.round(steps, 12), [1.0]])
    pts = np.unique(pts[pts >= ALPHA_MIN])
    if pts.size < 2:
        raise ValueError("grid collapsed to fewer than two points")
    return pts


def build_lookup_table(params: ModelParams, X, y, delta: float) -> CalibrationTable:
    """Sample the coverage curve on the quantized grid."""
    grid = alpha_grid(delta)
    phis = np.array([coverage_at_alpha(params, X, y, a) for a in grid])
    return CalibrationTable(alphas=grid, phis=phis)


def lookup_alpha(table: CalibrationTable, phi_d: float) -> LookupResult:
    """Invert the sampled curve at a coverage target.

    Interpolates alpha piecewise-linearly as a function of coverage.  A
    target outside the sampled coverage range clamps to the corresponding
    end slice and flags the result.  Flat (constant-coverage) runs are
    collapsed to their largest alpha, the narrowest interval achieving that
    coverage; a fully flat table cannot be inverted.
    """
    phis = table.phis
    alphas = table.alphas
    if phis.max() - phis.min() <= 0.0:
        raise FlatCurveError("coverage is constant across slices; cannot invert")
    if phi_d > phis.max():
        return LookupResult(alpha_star=float(alphas[int(np.argmax(phis))]),
                            out_of_range=True)
    if phi_d < phis.min():
        return LookupResult(alpha_star=float(alphas[int(np.argmin(phis))]),
                            out_of_range=True)
    # ascending-coverage orientation for interpolation; keep the largest
    # alpha wherever several slices share a coverage value
    phi_asc = phis[::-1]
    alpha_asc = alphas[::-1]
    keep = np.ones(phi_asc.size, dtype=bool)
    keep[1:] = np.diff(phi_asc) > 0.0
    a_star = float(np.interp(phi_d, phi_asc[keep], alpha_asc[keep]))
    return LookupResult(alpha_star=a_star, out_of_range=False)


def export_calibration_curve(table: CalibrationTable, path) -> None:
    """Write the sampled curve as a two-column CSV (alpha, phi)."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["alpha", "phi"])
        for a, p in zip(table.alphas, table.phis):
            writer.writerow([repr(float(a)), repr(float(p))])


def read_calibration_curve(path) -> CalibrationTable:
    """Read back a curve written by :func:`export_calibration_curve`."""
    path = Path(path)
    alphas = []
    phis = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["alpha", "phi"]:
            raise ValueError(f"unexpected curve header {header!r}")
        for row in reader:
            alphas.append(float(row[0]))
            phis.append(float(row[1]))
    return CalibrationTable(alphas=np.array(alphas), phis=np.array(phis))


# ---------------------------------------------------------------------------
# Derivative-free search inverter
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SearchConfig:
    """Settings of the shrinking-step coverage search."""

    phi_d: float
    alpha_init: float = 0.5
    delta: float = 0.25
    gamma: float = 0.5
    epsilon: float | None = None  # default max(0.005, 1/Q), resolved per dataset
    max_iters: int = 100
    delta_floor: float = 1e-4

    def __post_init__(self):
        if not 0.0 < self.phi_d < 0.99:
            raise ValueError("coverage target must lie in (0, 0.99)")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("shrink factor must lie in (0, 1)")
        if not ALPHA_MIN <= self.alpha_init <= 1.0:
            raise ValueError(f"alpha_init must lie in [{ALPHA_MIN}, 1]")
        if self.delta <= 0.0:
            raise ValueError("initial step must be positive")
        if self.epsilon is not None and self.epsilon <= 0.0:
            raise ValueError("tolerance must be positive")


@dataclass(frozen=True)
class CalibrationResult:
    phi_d: float
    alpha_star: float
    phi_achieved: float
    iterations: int
    converged: bool

    def as_dict(self) -> dict:
        return {"phi_d": self.phi_d, "alpha_star": self.alpha_star,
                "phi_achieved": self.phi_achieved,
                "iterations": self.iterations, "converged": self.converged}


def search_alpha(coverage_fn, cfg: SearchConfig) -> CalibrationResult:
    """
    Shrinking-step search for the slice matching a coverage target.

    Each iteration probes one step up and one step down (clipped to the
    admissible slice range), moves to whichever probe reduces the coverage
    error most (ties prefer the upward, narrower-interval side), and shrinks
    the step when neither helps.  Stops when the error drops below the
    tolerance; hitting the step floor or the iteration cap returns the best
    point seen with ``converged=False``.
    """
    if cfg.epsilon is None:
        raise ValueError("search over a bare coverage function needs an "
                         "explicit tolerance")
    alpha = float(min(max(cfg.alpha_init, ALPHA_MIN), 1.0))
    phi = float(coverage_fn(alpha))
    err = abs(phi - cfg.phi_d)
    best = (err, alpha, phi)
    iterations = 0
    delta = cfg.delta

    if err < cfg.epsilon:
        return CalibrationResult(cfg.phi_d, alpha, phi, 0, True)

    while iterations < cfg.max_iters:
        iterations += 1
        alpha_up = min(alpha + delta, 1.0)
        alpha_dn = max(alpha - delta, ALPHA_MIN)
        phi_up = float(coverage_fn(alpha_up))
        phi_dn = float(coverage_fn(alpha_dn))
        err_up = abs(phi_up - cfg.phi_d)
        err_dn = abs(phi_dn - cfg.phi_d)

        if err_up < err and err_dn < err:
            if err_up <= err_dn:
                alpha, phi, err = alpha_up, phi_up, err_up
            else:
                alpha, phi, err = alpha_dn, phi_dn, err_dn
        elif err_up < err:
            alpha, phi, err = alpha_up, phi_up, err_up
        elif err_dn < err:
            alpha, phi, err = alpha_dn, phi_dn, err_dn
        else:
            delta *= cfg.gamma
            if delta < cfg.delta_floor:
                break
            continue

        if err < best[0]:
            best = (err, alpha, phi)
        if err < cfg.epsilon:
            return CalibrationResult(cfg.phi_d, alpha, phi, iterations, True)

    _, alpha, phi = best
    return CalibrationResult(cfg.phi_d, alpha, phi, iterations, False)


def calibrate_search(params: ModelParams, X, y,
                     cfg: SearchConfig) -> CalibrationResult:
    """Run the coverage search against a calibration dataset.

    An unset tolerance defaults to max(0.005, 1/Q): empirical coverage on Q
    points moves in steps of 1/Q, so a finer tolerance is unreachable.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if cfg.epsilon is None:
        q = y.size
        if q == 0:
            raise ValueError("calibration set is empty")
        cfg = replace(cfg, epsilon=max(0.005, 1.0 / q))
    return search_alpha(lambda a: coverage_at_alpha(params, X, y, a), cfg)

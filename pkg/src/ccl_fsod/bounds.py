"""Closed-form generalization-bound calculators.

All Rademacher complexities and the domain gap are user-supplied scalars;
nothing here estimates them from data. Let ``s(n) = sqrt(ln(4/delta) / (2 n))``.

* ``lemma1_bound``: risk + (1-l)gamma + 2(1-l)R_b + 3(1-l)s(N_b)
  + 2 l R_n + 3 l s(N_n) + sqrt(ln(4/delta)/2 * ((1-l)^2/N_b + l^2/N_n))
* ``theorem1_approx``: (1-l)gamma + 2 l R_n + 4 l s(N_n)
* ``proposition1_bound``: the lemma's form over real and augmented data
  with ``N_e = k_e * N_r``.
* ``theorem2_compare``: the augmented estimate against 2 R_r + 4 s(N_r).
"""

from __future__ import annotations

import dataclasses
import itertools
import math
from dataclasses import dataclass

import numpy as np


class BoundError(ValueError):
    pass


@dataclass(frozen=True)
class BoundInputs:
    lambda_c: float = 0.5
    lambda_g: float = 0.5
    delta: float = 0.05
    N_b: int = 10000
    N_n: int = 100
    N_r: int = 100
    k_e: float = 3
    rademacher_base: float = 0.05
    rademacher_novel: float = 0.1
    rademacher_real: float = 0.1
    rademacher_aug: float = 0.05
    gamma_gap: float = 0.0
    empirical_risk: float = 0.0

    def validate(self) -> "BoundInputs":
        if not 0.0 < self.delta < 1.0:
            raise BoundError(f"delta must lie in (0, 1), got {self.delta}")
        for name in ("lambda_c", "lambda_g"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise BoundError(f"{name} must lie in [0, 1), got {v}")
        for name in ("N_b", "N_n", "N_r"):
            if getattr(self, name) <= 0:
                raise BoundError(f"{name} must be positive")
        if not self.k_e > 1:
            raise BoundError(f"k_e must exceed 1, got {self.k_e}")
        for name in ("rademacher_base", "rademacher_novel", "rademacher_real", "rademacher_aug",
                     "gamma_gap", "empirical_risk"):
            if getattr(self, name) < 0:
                raise BoundError(f"{name} must be nonnegative")
        return self

    @property
    def N_e(self) -> float:
        return self.k_e * self.N_r

    def replace(self, **changes) -> "BoundInputs":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_dict(cls, d: dict) -> "BoundInputs":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise BoundError(f"unknown bound parameters: {', '.join(unknown)}")
        return cls(**d)


def _log_term(delta: float) -> float:
    return math.log(4.0 / delta)


def _s(delta: float, n: float) -> float:
    return math.sqrt(_log_term(delta) / (2.0 * n))


def lemma1_bound(p: BoundInputs) -> float:
    p.validate()
    lc, a = p.lambda_c, _log_term(p.delta)
    return (
        p.empirical_risk
        + (1 - lc) * p.gamma_gap
        + 2 * (1 - lc) * p.rademacher_base
        + 3 * (1 - lc) * _s(p.delta, p.N_b)
        + 2 * lc * p.rademacher_novel
        + 3 * lc * _s(p.delta, p.N_n)
        + math.sqrt(a / 2 * ((1 - lc) ** 2 / p.N_b + lc ** 2 / p.N_n))
    )


def theorem1_approx(p: BoundInputs) -> float:
    p.validate()
    lc = p.lambda_c
    return (1 - lc) * p.gamma_gap + 2 * lc * p.rademacher_novel + 4 * lc * _s(p.delta, p.N_n)


def theorem1_slope(p: BoundInputs) -> float:
    """d theorem1_approx / d lambda_c (the bound is affine in lambda_c)."""
    p.validate()
    return -p.gamma_gap + 2 * p.rademacher_novel + 4 * _s(p.delta, p.N_n)


def no_augmentation_bound(p: BoundInputs) -> float:
    """risk + gamma + 2 R_r + 4 s(N_r): the augmented bound at lambda_g = 0."""
    p.validate()
    return p.empirical_risk + p.gamma_gap + 2 * p.rademacher_real + 4 * _s(p.delta, p.N_r)


def _augmented_terms(p: BoundInputs) -> float:
    lg, a = p.lambda_g, _log_term(p.delta)
    return (
        2 * (1 - lg) * p.rademacher_real
        + 3 * (1 - lg) * _s(p.delta, p.N_r)
        + 2 * lg * p.rademacher_aug
        + 3 * lg * _s(p.delta, p.N_e)
        + math.sqrt(a / 2 * ((1 - lg) ** 2 / p.N_r + lg ** 2 / p.N_e))
    )


def proposition1_bound(p: BoundInputs) -> float:
    p.validate()
    return p.empirical_risk + (1 - p.lambda_g) * p.gamma_gap + _augmented_terms(p)


@dataclass(frozen=True)
class Theorem2Result:
    sup_with: float
    sup_without: float
    intermediate: float
    holds: bool


def theorem2_compare(p: BoundInputs) -> Theorem2Result:
    """Compare the augmented-data estimate with the real-data-only bound.

    Empirical risks and the real/augmented gap are taken as 0, so
    ``sup_with`` is the augmented terms alone. ``intermediate`` is the
    looser estimate 2 R_r + 3 s(N_r) + sqrt(ln(4/delta)/2 * ((1-l)^2 + l^2/k_e)/N_r)
    that sits between the two.
    """
    p.validate()
    a, lg = _log_term(p.delta), p.lambda_g
    sup_with = _augmented_terms(p)
    sup_without = 2 * p.rademacher_real + 4 * _s(p.delta, p.N_r)
    intermediate = (
        2 * p.rademacher_real
        + 3 * _s(p.delta, p.N_r)
        + math.sqrt(a / 2 * ((1 - lg) ** 2 + lg ** 2 / p.k_e) / p.N_r)
    )
    return Theorem2Result(sup_with, sup_without, intermediate, sup_with < sup_without)


FORMULAS = {
    "lemma1": lemma1_bound,
    "thm1": theorem1_approx,
    "prop1": proposition1_bound,
}


def evaluate(formula: str, p: BoundInputs):
    if formula == "thm2":
        return dataclasses.asdict(theorem2_compare(p))
    if formula not in FORMULAS:
        raise BoundError(f"unknown formula {formula!r}")
    return FORMULAS[formula](p)


# -- grids -------------------------------------------------------------------

DEFAULT_THM2_GRID = {
    "k_e": list(range(2, 11)),
    "delta": [0.05],
    "N_r": [10, 20, 50, 100, 200, 500, 1000],
}


def grid_points(base: BoundInputs, grid: dict):
    """Cartesian product of ``grid`` values over ``base``, in key order."""
    keys = list(grid)
    for values in itertools.product(*(grid[k] for k in keys)):
        yield base.replace(**dict(zip(keys, values)))


def sweep(formula: str, base: BoundInputs, grid: dict) -> list[dict]:
    rows = []
    for p in grid_points(base, grid):
        row = {k: getattr(p, k) for k in grid}
        value = evaluate(formula, p)
        if isinstance(value, dict):
            row.update(value)
        else:
            row["value"] = value
        rows.append(row)
    return rows


@dataclass
class MonotonicityReport:
    which: str
    points: int = 0
    inside_condition: int = 0
    outside_condition: int = 0
    counterexamples: list = dataclasses.field(default_factory=list)
    outside_examples: list = dataclasses.field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.counterexamples


def monotonicity_check(which: str, base: BoundInputs, grid: dict, sweep_values=None) -> MonotonicityReport:
    """Check claimed monotonicity numerically over a parameter grid.

    ``which``:
      * ``"thm1-lambda_c"``: theorem1_approx should increase along
        ``sweep_values`` of lambda_c whenever 2 R_n + 4 s(N_n) > gamma.
      * ``"prop1-k_e"``: the augmented terms should decrease along
        ``sweep_values`` of k_e when lambda_g > 0.

    A counterexample is a point inside the condition where the expected
    direction fails; points outside the condition are tallied separately.
    """
    report = MonotonicityReport(which)
    if which == "thm1-lambda_c":
        values = np.linspace(0.0, 0.99, 34) if sweep_values is None else np.asarray(sweep_values)
        for p in grid_points(base, grid):
            seq = [theorem1_approx(p.replace(lambda_c=float(v))) for v in values]
            increasing = all(b > a for a, b in zip(seq, seq[1:]))
            inside = 2 * p.rademacher_novel + 4 * _s(p.delta, p.N_n) > p.gamma_gap
            report.points += 1
            if inside:
                report.inside_condition += 1
                if not increasing:
                    report.counterexamples.append(dataclasses.asdict(p))
            else:
                report.outside_condition += 1
                if len(report.outside_examples) < 10:
                    report.outside_examples.append(
                        {**dataclasses.asdict(p), "decreasing": all(b <= a for a, b in zip(seq, seq[1:]))}
                    )
    elif which == "prop1-k_e":
        values = np.arange(1.5, 20.5, 0.5) if sweep_values is None else np.asarray(sweep_values)
        for p in grid_points(base, grid):
            seq = [_augmented_terms(p.replace(k_e=float(v)).validate()) for v in values]
            decreasing = all(b < a for a, b in zip(seq, seq[1:]))
            report.points += 1
            if p.lambda_g > 0:
                report.inside_condition += 1
                if not decreasing:
                    report.counterexamples.append(dataclasses.asdict(p))
            else:
                report.outside_condition += 1
    else:
        raise BoundError(f"unknown monotonicity check {which!r}")
    return report

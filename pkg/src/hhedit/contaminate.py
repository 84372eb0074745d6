"""Synthetic-study contamination: detectable errors, MCAR blanking, and PRAM.

``inject_errors`` flags each household with a fixed probability; flagged
households redraw error locations and substituted values until the result
breaks at least one edit rule, so every injected error pattern is
detectable.  ``blank_missing`` independently blanks eligible cells at
per-variable rates (never the household-size cell).  ``pram`` keeps each
cell at its collected value with a fixed probability and otherwise redraws
it uniformly from the other categories.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import MISSING, Dataset
from .rules import RuleSet
from .schema import Schema
from .util import categorical_rows


class ContaminationError(ValueError):
    pass


@dataclass
class ContaminationSpec:
    rho: float = 0.2
    epsilon_true: dict[str, float] = field(default_factory=dict)
    missing_rates: dict[str, float] = field(default_factory=dict)
    substitution: dict[str, np.ndarray] | None = None  # None = uniform everywhere
    redraw_locations: bool = True
    attempt_cap: int = 100_000

    def validate(self, schema: Schema):
        if not (0.0 <= self.rho <= 1.0):
            raise ContaminationError("rho must lie in [0, 1]")
        for name, rate in {**self.epsilon_true, **self.missing_rates}.items():
            schema.require(name)
            if not (0.0 <= rate <= 1.0):
                raise ContaminationError(f"rate for {name} must lie in [0, 1]")
        if schema.size_variable in self.epsilon_true or schema.size_variable in self.missing_rates:
            raise ContaminationError("the household-size variable cannot be contaminated")
        for name, matrix in (self.substitution or {}).items():
            var = schema.require(name)
            m = np.asarray(matrix, dtype=float)
            if m.shape != (var.cardinality, var.cardinality):
                raise ContaminationError(f"substitution matrix for {name} has the wrong shape")
            if np.any(np.diag(m) != 0.0):
                raise ContaminationError(f"substitution matrix for {name} must have a zero diagonal")
            if np.max(np.abs(m.sum(axis=1) - 1.0)) > 1e-9 or np.any(m < 0):
                raise ContaminationError(f"substitution matrix for {name} rows must be stochastic")


@dataclass
class GroundTruth:
    """Sidecar truth for one contamination run, in dataset household order."""

    z: np.ndarray  # (n,) bool
    e_hh: list[np.ndarray]  # per household (q,) bool
    e_ind: list[np.ndarray]  # per household (size, p) bool
    original: Dataset


def _substitute_column(values, mask, var, spec, rng):
    """Redraw the masked entries of one code column away from their true value."""
    out = values.copy()
    rows = np.flatnonzero(mask)
    if rows.size == 0:
        return out
    x = values[rows]
    matrix = (spec.substitution or {}).get(var.name)
    if matrix is None:
        r = rng.integers(1, var.cardinality, size=rows.size)
        out[rows] = np.where(r >= x, r + 1, r)
    else:
        out[rows] = categorical_rows(rng, np.asarray(matrix, dtype=float)[x - 1]) + 1
    return out


def inject_errors(
    dataset: Dataset, spec: ContaminationSpec, ruleset: RuleSet, rng
) -> tuple[Dataset, GroundTruth]:
    """Produce a contaminated copy plus the true flags and error locations."""
    schema = dataset.schema
    spec.validate(schema)
    if not dataset.fully_observed():
        raise ContaminationError("inject_errors needs a fully observed dataset")
    if len(ruleset) == 0:
        raise ContaminationError("cannot make detectable errors without any rules")

    eps_hh = np.zeros(schema.q)
    eps_ind = np.zeros(schema.p)
    for name, rate in spec.epsilon_true.items():
        var = schema.require(name)
        if var.level == "household":
            eps_hh[schema.hh_position(name)] = rate
        else:
            eps_ind[schema.ind_position(name)] = rate

    n = len(dataset)
    z_flat = np.zeros(n, dtype=bool)
    e_hh_flat: list[np.ndarray] = [np.zeros(schema.q, dtype=bool) for _ in range(n)]
    e_ind_flat: list[np.ndarray] = [
        np.zeros((hh.size, schema.p), dtype=bool) for hh in dataset.households
    ]
    out = dataset.copy()

    for h, grp in dataset.groups().items():
        nh = len(grp.indices)
        z = rng.random(nh) < spec.rho
        for pos, flag in zip(grp.indices, z):
            z_flat[pos] = bool(flag)
        flagged = np.flatnonzero(z)
        if flagged.size == 0:
            continue
        clean_hh = grp.hh[flagged]
        clean_ind = grp.ind[flagged]
        nf = flagged.size
        y_hh = clean_hh.copy()
        y_ind = clean_ind.copy()
        cur_e_hh = np.zeros((nf, schema.q), dtype=bool)
        cur_e_ind = np.zeros((nf, h, schema.p), dtype=bool)
        pending = np.arange(nf)
        locations_fixed = False
        for attempt in range(spec.attempt_cap):
            if not pending.size:
                break
            if spec.redraw_locations or not locations_fixed:
                cur_e_hh[pending] = (rng.random((pending.size, schema.q)) < eps_hh[None, :])
                cur_e_ind[pending] = (
                    rng.random((pending.size, h, schema.p)) < eps_ind[None, None, :]
                )
                locations_fixed = True
            prop_hh = clean_hh[pending].copy()
            prop_ind = clean_ind[pending].copy()
            for k, var in enumerate(schema.household_vars):
                prop_hh[:, k] = _substitute_column(
                    prop_hh[:, k], cur_e_hh[pending, k], var, spec, rng
                )
            for k, var in enumerate(schema.individual_vars):
                for j in range(h):
                    prop_ind[:, j, k] = _substitute_column(
                        prop_ind[:, j, k], cur_e_ind[pending, j, k], var, spec, rng
                    )
            viol = ruleset.any_violation(prop_hh, prop_ind)
            done = np.flatnonzero(viol)
            y_hh[pending[done]] = prop_hh[done]
            y_ind[pending[done]] = prop_ind[done]
            pending = pending[~viol]
        if pending.size:
            stuck = [dataset.ids[grp.indices[flagged[i]]] for i in pending]
            raise ContaminationError(
                f"households {stuck} could not be made rule-violating within "
                f"{spec.attempt_cap} attempts; the rule set may be too permissive"
            )
        for row, i in enumerate(flagged):
            pos = int(grp.indices[i])
            out.households[pos].hh[:] = y_hh[row]
            out.households[pos].ind[:, :] = y_ind[row]
            e_hh_flat[pos] = cur_e_hh[row].copy()
            e_ind_flat[pos] = cur_e_ind[row].copy()

    truth = GroundTruth(z=z_flat, e_hh=e_hh_flat, e_ind=e_ind_flat, original=dataset)
    return out, truth


def blank_missing(dataset: Dataset, spec: ContaminationSpec, rng) -> Dataset:
    """Mark eligible cells missing, independently per cell at per-variable rates."""
    schema = dataset.schema
    spec.validate(schema)
    out = dataset.copy()
    for h, grp in out.groups().items():
        nh = len(grp.indices)
        for name, rate in spec.missing_rates.items():
            var = schema.require(name)
            if var.level == "household":
                k = schema.hh_position(name)
                mask = rng.random(nh) < rate
                for row, pos in enumerate(grp.indices):
                    if mask[row]:
                        out.households[int(pos)].hh[k] = MISSING
            else:
                k = schema.ind_position(name)
                mask = rng.random((nh, h)) < rate
                for row, pos in enumerate(grp.indices):
                    cells = np.flatnonzero(mask[row])
                    if cells.size:
                        out.households[int(pos)].ind[cells, k] = MISSING
    return out


def pram(dataset: Dataset, keep_prob: float, rng) -> Dataset:
    """Post-randomization: keep each cell with probability keep_prob, else
    redraw uniformly from the other categories.  The household-size cell and
    missing cells are left untouched."""
    if not (0.0 < keep_prob <= 1.0):
        raise ContaminationError("keep probability must lie in (0, 1]")
    schema = dataset.schema
    out = dataset.copy()
    for record in out.households:
        for k, var in enumerate(schema.household_vars):
            if k == schema.size_index or record.hh[k] == MISSING:
                continue
            if rng.random() >= keep_prob:
                r = int(rng.integers(1, var.cardinality))
                record.hh[k] = r + 1 if r >= record.hh[k] else r
        for k, var in enumerate(schema.individual_vars):
            col = record.ind[:, k]
            eligible = col != MISSING
            flip = (rng.random(record.size) >= keep_prob) & eligible
            rows = np.flatnonzero(flip)
            if rows.size:
                r = rng.integers(1, var.cardinality, size=rows.size)
                col[rows] = np.where(r >= col[rows], r + 1, r)
    return out

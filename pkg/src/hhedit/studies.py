"""Hand-built generating models for the bundled synthetic studies.

Two study setups live here: a compact six-variable recovery study with a
known four-class generator, and a generator for census-style populations
on the bundled example schema.  Both produce rule-satisfying data via the
truncated generative sampler, so a study's "clean" sample is exactly a
draw from the model the engine fits.
"""
from __future__ import annotations

import numpy as np

from .data import Dataset
from .model import NdpmpmParams, sample_household_truncated
from .rules import RuleSet, parse_rules
from .schema import Schema, load_schema

RECOVERY_SCHEMA_TEXT = """
sizes: [2, 3, 4]
variables:
- {name: HouseholdSize, level: household, cardinality: 3, role: size}
- {name: Ownership, level: household, cardinality: 2, labels: [owned, rented]}
- {name: HeadGender, level: household, cardinality: 2, labels: [male, female], head_of: Gender}
- {name: Gender, level: individual, cardinality: 2, labels: [male, female]}
- {name: AgeGroup, level: individual, cardinality: 4, ordered: true,
   labels: [child, young_adult, adult, senior]}
- {name: Relationship, level: individual, cardinality: 3,
   labels: [spouse, child, other_adult]}
"""

RECOVERY_RULES_TEXT = """
# Structural zeros for the recovery study.
rule spouse_not_child: forall p: p.Relationship == spouse and p.AgeGroup == child => violation
rule single_spouse: forall (a, b): a.Relationship == spouse and b.Relationship == spouse => violation
rule spouse_gender: forall p: p.Relationship == spouse and p.Gender == head.Gender => violation
rule child_not_senior: forall p: p.Relationship == child and p.AgeGroup == senior => violation
rule housemate_adult: forall p: p.Relationship == other_adult and p.AgeGroup == child => violation
"""

# Error rates within the stress-test range used for the bundled example.
RECOVERY_EPSILON_TRUE = {
    "HeadGender": 0.65,
    "Gender": 0.70,
    "AgeGroup": 0.85,
    "Relationship": 0.80,
}
RECOVERY_MISSING_RATES = {"Ownership": 0.2}


def recovery_schema() -> Schema:
    return load_schema(RECOVERY_SCHEMA_TEXT)


def recovery_rules(schema: Schema | None = None) -> RuleSet:
    return parse_rules(RECOVERY_RULES_TEXT, schema or recovery_schema())


def recovery_params() -> NdpmpmParams:
    """The known four-class generator for the recovery study.

    Rows are kept moderately diffuse on purpose: the study stresses the
    error-location inference, and near-deterministic cells would make the
    contaminated values trivially recoverable.
    """
    F, S = 4, 3
    pi = np.array([0.35, 0.30, 0.20, 0.15])
    u = _sticks_from_probs(pi)
    omega = np.array(
        [
            [0.62, 0.30, 0.08],
            [0.55, 0.35, 0.10],
            [0.25, 0.15, 0.60],
            [0.45, 0.30, 0.25],
        ]
    )
    v = np.stack([_sticks_from_probs(row) for row in omega])

    lam_size = np.array(
        [
            [0.55, 0.30, 0.15],
            [0.35, 0.40, 0.25],
            [0.60, 0.25, 0.15],
            [0.40, 0.30, 0.30],
        ]
    )
    lam_own = np.array([[0.72, 0.28], [0.33, 0.67], [0.55, 0.45], [0.48, 0.52]])
    # classes are gender-polarized: head gender anti-correlates with the
    # spouse-like member class, so gender flips leave a likelihood footprint
    lam_headgender = np.array([[0.88, 0.12], [0.15, 0.85], [0.55, 0.45], [0.75, 0.25]])

    # member classes: 0 spouse-like adult, 1 child, 2 other adult
    phi_gender = np.array(
        [
            [[0.10, 0.90], [0.51, 0.49], [0.45, 0.55]],
            [[0.85, 0.15], [0.49, 0.51], [0.52, 0.48]],
            [[0.38, 0.62], [0.50, 0.50], [0.48, 0.52]],
            [[0.20, 0.80], [0.50, 0.50], [0.50, 0.50]],
        ]
    )
    base_age = np.array(
        [
            [0.03, 0.32, 0.45, 0.20],  # spouse-like
            [0.68, 0.22, 0.08, 0.02],  # child
            [0.06, 0.34, 0.38, 0.22],  # other adult
        ]
    )
    tweaks = np.array([0.0, 0.04, -0.03, 0.02])
    phi_age = np.stack([_shift_rows(base_age, t) for t in tweaks])
    base_rel = np.array(
        [
            [0.80, 0.07, 0.13],
            [0.05, 0.78, 0.17],
            [0.09, 0.18, 0.73],
        ]
    )
    phi_rel = np.stack([_shift_rows(base_rel, t) for t in -tweaks])

    return NdpmpmParams(
        F=F,
        S=S,
        u=u,
        v=v,
        lam=[lam_size, lam_own, lam_headgender],
        phi=[phi_gender, phi_age, phi_rel],
        alpha=1.0,
        beta=1.0,
    )


def recovery_population(n: int, rng, params: NdpmpmParams | None = None) -> Dataset:
    """n rule-satisfying households drawn from the recovery generator."""
    schema = recovery_schema()
    ruleset = recovery_rules(schema)
    params = params or recovery_params()
    households = [
        sample_household_truncated(params, schema, ruleset, rng) for _ in range(n)
    ]
    return Dataset(schema, households)


# ---------------------------------------------------------------------------
# Census-style population on the bundled example schema

def acs_style_params(schema: Schema) -> NdpmpmParams:
    """A four-class generator over the bundled 11-variable schema.

    Ages are discretized normals per class; spouse presence is kept high so
    that gender inconsistencies are usually detectable.
    """
    F, S = 4, 3
    pi = np.array([0.42, 0.25, 0.18, 0.15])
    u = _sticks_from_probs(pi)
    # member classes: 0 spouse, 1 child/grandchild, 2 other adult
    omega = np.array(
        [
            [0.60, 0.32, 0.08],
            [0.50, 0.38, 0.12],
            [0.62, 0.18, 0.20],
            [0.35, 0.30, 0.35],
        ]
    )
    v = np.stack([_sticks_from_probs(row) for row in omega])

    def hh_var(name):
        return schema.hh_position(name)

    lam = [None] * schema.q
    lam[hh_var("Ownership")] = np.array([[0.78, 0.22], [0.38, 0.62], [0.80, 0.20], [0.52, 0.48]])
    lam[hh_var("HouseholdSize")] = np.array(
        [
            [0.52, 0.22, 0.17, 0.06, 0.03],
            [0.50, 0.21, 0.18, 0.08, 0.03],
            [0.55, 0.20, 0.15, 0.07, 0.03],
            [0.45, 0.22, 0.19, 0.09, 0.05],
        ]
    )
    lam[hh_var("HeadGender")] = np.array([[0.58, 0.42], [0.48, 0.52], [0.55, 0.45], [0.50, 0.50]])
    lam[hh_var("HeadRace")] = np.stack(
        [
            _mix([(0.70, 1), (0.10, 2), (0.08, 6), (0.12, None)], 9),
            _mix([(0.45, 1), (0.30, 2), (0.10, 7), (0.15, None)], 9),
            _mix([(0.80, 1), (0.08, 2), (0.12, None)], 9),
            _mix([(0.35, 1), (0.20, 2), (0.20, 6), (0.25, None)], 9),
        ]
    )
    lam[hh_var("HeadHispanic")] = np.stack(
        [
            _mix([(0.85, 1), (0.07, 2), (0.08, None)], 5),
            _mix([(0.60, 1), (0.25, 2), (0.15, None)], 5),
            _mix([(0.90, 1), (0.10, None)], 5),
            _mix([(0.55, 1), (0.20, 2), (0.25, None)], 5),
        ]
    )
    lam[hh_var("HeadAge")] = np.stack(
        [
            _discrete_normal(39, 9, 96, lo=18),
            _discrete_normal(31, 8, 96, lo=18),
            _discrete_normal(63, 9, 96, lo=30),
            _discrete_normal(46, 14, 96, lo=18),
        ]
    )

    def ind_var(name):
        return schema.ind_position(name)

    phi = [None] * schema.p
    phi[ind_var("Gender")] = np.array(
        [
            [[0.45, 0.55], [0.51, 0.49], [0.48, 0.52]],
            [[0.52, 0.48], [0.50, 0.50], [0.47, 0.53]],
            [[0.46, 0.54], [0.49, 0.51], [0.53, 0.47]],
            [[0.50, 0.50], [0.51, 0.49], [0.49, 0.51]],
        ]
    )
    race_rows = [
        _mix([(0.70, 1), (0.10, 2), (0.08, 6), (0.12, None)], 9),
        _mix([(0.45, 1), (0.30, 2), (0.10, 7), (0.15, None)], 9),
        _mix([(0.80, 1), (0.08, 2), (0.12, None)], 9),
        _mix([(0.35, 1), (0.20, 2), (0.20, 6), (0.25, None)], 9),
    ]
    phi[ind_var("Race")] = np.stack([np.stack([row] * S) for row in race_rows])
    hisp_rows = [
        _mix([(0.85, 1), (0.07, 2), (0.08, None)], 5),
        _mix([(0.60, 1), (0.25, 2), (0.15, None)], 5),
        _mix([(0.90, 1), (0.10, None)], 5),
        _mix([(0.55, 1), (0.20, 2), (0.25, None)], 5),
    ]
    phi[ind_var("Hispanic")] = np.stack([np.stack([row] * S) for row in hisp_rows])
    spouse_age = [
        _discrete_normal(37, 9, 96, lo=16),
        _discrete_normal(29, 8, 96, lo=16),
        _discrete_normal(61, 9, 96, lo=25),
        _discrete_normal(44, 14, 96, lo=16),
    ]
    child_age = [
        _discrete_normal(11, 6, 96, hi=30),
        _discrete_normal(7, 5, 96, hi=25),
        _discrete_normal(30, 8, 96, hi=50),
        _discrete_normal(16, 9, 96, hi=40),
    ]
    other_age = [
        _discrete_normal(36, 14, 96, lo=15),
        _discrete_normal(30, 12, 96, lo=15),
        _discrete_normal(55, 16, 96, lo=15),
        _discrete_normal(40, 18, 96, lo=15),
    ]
    phi[ind_var("Age")] = np.stack(
        [np.stack([spouse_age[g], child_age[g], other_age[g]]) for g in range(F)]
    )
    # labels: spouse, bio child, adopted, step, sibling, parent, grandchild,
    # parent-in-law, child-in-law, other relative, boarder, other nonrelative
    rel_spouse = _mix([(0.86, 1), (0.04, 11), (0.10, None)], 12)
    rel_child = _mix([(0.62, 2), (0.05, 3), (0.06, 4), (0.15, 7), (0.12, None)], 12)
    rel_other = _mix(
        [(0.12, 5), (0.14, 6), (0.08, 8), (0.10, 9), (0.18, 10), (0.20, 11), (0.18, 12)], 12
    )
    phi[ind_var("Relationship")] = np.stack(
        [np.stack([rel_spouse, rel_child, rel_other]) for _ in range(F)]
    )
    return NdpmpmParams(F=F, S=S, u=u, v=v, lam=lam, phi=phi, alpha=1.0, beta=1.0)


def acs_style_population(n: int, rng, schema: Schema, ruleset: RuleSet) -> Dataset:
    params = acs_style_params(schema)
    households = [
        sample_household_truncated(params, schema, ruleset, rng) for _ in range(n)
    ]
    return Dataset(schema, households)


# ---------------------------------------------------------------------------
# helpers

def _sticks_from_probs(probs: np.ndarray) -> np.ndarray:
    """Invert stick-breaking: fractions whose stick gives these probabilities."""
    probs = np.asarray(probs, dtype=np.float64)
    probs = probs / probs.sum()
    remaining = 1.0 - np.concatenate([[0.0], np.cumsum(probs[:-1])])
    u = probs / remaining
    u[-1] = 1.0
    return np.clip(u, 0.0, 1.0)


def _shift_rows(base: np.ndarray, t: float) -> np.ndarray:
    """Blend rows toward (t > 0) or away from (t < 0) the uniform row."""
    d = base.shape[-1]
    out = base * (1.0 - t) + t / d
    if np.any(out <= 0):
        raise ValueError("row shift left a nonpositive probability")
    return out


def _discrete_normal(mean_years, sd, d, lo=0, hi=None) -> np.ndarray:
    """Probabilities over codes 1..d from a rounded normal over 0..d-1 years."""
    hi = d - 1 if hi is None else hi
    years = np.arange(d)
    dens = np.exp(-0.5 * ((years - mean_years) / sd) ** 2)
    dens[(years < lo) | (years > hi)] = 0.0
    dens += 1e-6  # keep all codes possible
    return dens / dens.sum()


def _mix(weighted_codes, d) -> np.ndarray:
    """Row with given mass on specific codes; a (w, None) entry spreads w
    uniformly over the remaining categories."""
    row = np.zeros(d)
    spread = 0.0
    used = []
    for weight, code in weighted_codes:
        if code is None:
            spread += weight
        else:
            row[code - 1] += weight
            used.append(code - 1)
    rest = [i for i in range(d) if i not in used]
    if spread and rest:
        row[rest] += spread / len(rest)
    return row / row.sum()

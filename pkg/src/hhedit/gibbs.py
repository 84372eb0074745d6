"""Gibbs sampler for joint editing and imputation of household microdata.

Per sweep the sampler (i) redraws the per-variable error rates from their
Beta full conditionals, (ii) rejection-samples plausible true values for
every flagged household from the per-cell tilted categoricals given its
current latent classes, (iii) regenerates the augmented pool of
rule-violating households for each size under the cap-and-weight scheme,
(iv) redraws latent household and member classes, and (v) redraws the
mixture parameters from their conjugate conditionals with augmented
counts weighted by the integer 1/psi_h.  Flags are observed, not latent:
a household is flagged exactly when its reported values violate a rule or
contain a missing cell.

All randomness flows through substreams keyed on (seed, sweep, phase,
size, block), so results are bit-identical for any thread count.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, Household, SizeGroup
from .measurement import ErrorModelConfig, ErrorState, update_epsilon
from .model import (
    AttemptCapExceeded,
    Hyperparams,
    NdpmpmParams,
    log_class_weights,
    sample_values_batch,
)
from .rules import RuleSet
from .schema import Schema
from .util import (
    PHASE_AUGMENT,
    PHASE_EPSILON,
    PHASE_IMPUTE,
    PHASE_INIT,
    PHASE_LATENT,
    PHASE_PARAMS,
    categorical_logit_rows,
    categorical_rows,
    map_blocks,
    substream,
)

_IMPUTE_BLOCK = 512


class ConfigError(ValueError):
    pass


@dataclass
class GibbsConfig:
    iterations: int = 10_000
    burn_in: int = 5_000
    thin: int = 5
    n_imputations: int = 50
    F: int = 20
    S: int = 15
    psi: float | dict[int, float] = 1.0
    seed: int = 0
    threads: int = 1
    error_prone: list[str] | None = None
    eps_prior_a: float = 1.0
    eps_prior_b: float = 1.0
    count_missing_in_epsilon: bool = True
    fixed_epsilon: dict[str, float] = field(default_factory=dict)
    flag_all: bool = False
    impute_attempt_cap: int = 1_000_000
    augment_attempt_cap: int = 100_000_000
    trace_probs: tuple[str, ...] = ()
    hyper: Hyperparams = field(default_factory=Hyperparams)

    def psi_for(self, h: int) -> float:
        if isinstance(self.psi, dict):
            if h not in self.psi:
                raise ConfigError(f"no augmentation weight configured for size {h}")
            return float(self.psi[h])
        return float(self.psi)

    def inv_psi_for(self, h: int) -> int:
        psi = self.psi_for(h)
        if not (0.0 < psi <= 1.0):
            raise ConfigError(f"psi for size {h} must lie in (0, 1]")
        inv = 1.0 / psi
        if abs(inv - round(inv)) > 1e-9:
            raise ConfigError(f"1/psi for size {h} must be a positive integer (psi={psi})")
        return int(round(inv))

    def validate(self, schema: Schema) -> None:
        if self.iterations < 1 or self.burn_in < 0 or self.thin < 1:
            raise ConfigError("iterations, burn_in, thin must be positive")
        if self.burn_in >= self.iterations:
            raise ConfigError("burn_in must be smaller than iterations")
        retained = (self.iterations - self.burn_in) // self.thin
        if retained < self.n_imputations:
            raise ConfigError(
                f"only {retained} retained sweeps for {self.n_imputations} imputed datasets"
            )
        if self.F < 1 or self.S < 1:
            raise ConfigError("class counts F and S must be positive")
        for h in schema.sizes:
            self.inv_psi_for(h)


@dataclass
class ClassedData:
    """Per-size class assignments plus values, for observed or augmented data."""

    g: dict[int, np.ndarray]
    m: dict[int, np.ndarray]
    hh: dict[int, np.ndarray]
    ind: dict[int, np.ndarray]

    @classmethod
    def empty(cls) -> "ClassedData":
        return cls({}, {}, {}, {})


@dataclass
class _Group:
    """Mutable sampler state for all households of one size."""

    size: int
    indices: np.ndarray
    y_hh: np.ndarray
    y_ind: np.ndarray
    miss_hh: np.ndarray
    miss_ind: np.ndarray
    z: np.ndarray
    x_hh: np.ndarray
    x_ind: np.ndarray
    e_hh: np.ndarray
    e_ind: np.ndarray
    g: np.ndarray
    m: np.ndarray


@dataclass
class GibbsResult:
    imputed: list[Dataset]
    traces: list[tuple[int, str, float]]
    params: NdpmpmParams
    occupancy: dict[str, tuple[int, int]]
    flagged: int


def derive_flags(group_hh: np.ndarray, group_ind: np.ndarray, ruleset: RuleSet) -> np.ndarray:
    """Flag mask for one size group: rule violation or any missing cell."""
    missing = (group_hh == 0).any(axis=1) | (group_ind == 0).any(axis=(1, 2))
    z = missing.copy()
    obs = np.flatnonzero(~missing)
    if obs.size:
        z[obs] = ruleset.any_violation(group_hh[obs], group_ind[obs])
    return z


# ---------------------------------------------------------------------------
# S2 + S3: imputation of flagged households

def _tilted_hh_weights(params, schema, eps_hh, prone_hh, G, y, miss):
    """Per-cell proposal weights for household variables (size cell excluded)."""
    weights = {}
    for k in range(schema.q):
        if k == schema.size_index:
            continue
        d = schema.household_vars[k].cardinality
        base = params.lam[k][G]
        w = base.copy()
        obs = np.flatnonzero(~miss[:, k])
        if obs.size:
            codes = y[obs, k] - 1
            if prone_hh[k]:
                eps = eps_hh[k]
                w[obs] = base[obs] * (eps / (d - 1))
                w[obs, codes] = base[obs, codes] * (1.0 - eps)
            else:
                w[obs] = 0.0
                w[obs, codes] = 1.0
        weights[k] = w
    return weights


def _tilted_ind_weights(params, schema, eps_ind, prone_ind, G, M, y, miss):
    """Per-variable proposal weights for member cells, shape (n, h, d_k)."""
    weights = {}
    for k in range(schema.p):
        d = schema.individual_vars[k].cardinality
        base = params.phi[k][G[:, None], M]  # (n, h, d)
        w = base.copy()
        obs = ~miss[:, :, k]
        rows, cols = np.nonzero(obs)
        if rows.size:
            codes = y[rows, cols, k] - 1
            if prone_ind[k]:
                eps = eps_ind[k]
                w[rows, cols] = base[rows, cols] * (eps / (d - 1))
                w[rows, cols, codes] = base[rows, cols, codes] * (1.0 - eps)
            else:
                w[rows, cols] = 0.0
                w[rows, cols, codes] = 1.0
        weights[k] = w
    return weights


def _impute_rows(
    params: NdpmpmParams,
    schema: Schema,
    size: int,
    y_hh: np.ndarray,
    y_ind: np.ndarray,
    miss_hh: np.ndarray,
    miss_ind: np.ndarray,
    G: np.ndarray,
    M: np.ndarray,
    cur_hh: np.ndarray,
    cur_ind: np.ndarray,
    eps_hh: np.ndarray,
    eps_ind: np.ndarray,
    error_config: ErrorModelConfig,
    ruleset: RuleSet,
    rng,
    cap: int,
    household_ids=None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Rejection-sample plausible true values for a block of flagged households.

    Every household redraws all of its non-size cells per attempt from the
    tilted per-cell categoricals until the draw passes the rules.  When a
    household exhausts the attempt cap its latent classes are resampled
    once from their full conditionals given the current values; a second
    exhaustion raises.
    """
    nf = y_hh.shape[0]
    G = G.copy()
    M = M.copy()
    hw = _tilted_hh_weights(params, schema, eps_hh, error_config.prone_hh, G, y_hh, miss_hh)
    iw = _tilted_ind_weights(params, schema, eps_ind, error_config.prone_ind, G, M, y_ind, miss_ind)

    x_hh = np.empty_like(y_hh)
    x_ind = np.empty_like(y_ind)
    pending = np.arange(nf)
    attempts = np.zeros(nf, dtype=np.int64)
    retried = np.zeros(nf, dtype=bool)
    rule_hits = {rid: 0 for rid in ruleset.rule_ids}
    logs = None
    multiplicity = 1  # attempts drawn per household per round; grows for stragglers

    while pending.size:
        npend = pending.size
        t = int(min(multiplicity, max(1, cap - attempts[pending].max())))
        rows = np.repeat(pending, t)
        prop_hh = np.empty((npend * t, schema.q), dtype=y_hh.dtype)
        prop_hh[:, schema.size_index] = schema.code_for_size(size)
        for k, w in hw.items():
            prop_hh[:, k] = categorical_rows(rng, w[rows]) + 1
        prop_ind = np.empty((npend * t, size, schema.p), dtype=y_ind.dtype)
        for k, w in iw.items():
            prop_ind[:, :, k] = categorical_rows(rng, w[rows]) + 1

        fired = ruleset.violation_matrix(prop_hh, prop_ind)
        viol = fired.any(axis=0) if fired.size else np.zeros(npend * t, dtype=bool)
        for r, rid in enumerate(ruleset.rule_ids):
            rule_hits[rid] += int(fired[r].sum())
        ok_grid = (~viol).reshape(npend, t)
        first = np.argmax(ok_grid, axis=1)  # first passing attempt, in draw order
        hit = ok_grid[np.arange(npend), first]
        chosen = np.flatnonzero(hit)
        take = chosen * t + first[chosen]
        x_hh[pending[chosen]] = prop_hh[take]
        x_ind[pending[chosen]] = prop_ind[take]
        attempts[pending] += np.where(hit, first + 1, t)
        pending = pending[~hit]
        multiplicity = min(multiplicity * 4, 64)

        stuck = pending[attempts[pending] >= cap]
        if stuck.size:
            hopeless = stuck[retried[stuck]]
            if hopeless.size:
                ids = (
                    [household_ids[i] for i in hopeless]
                    if household_ids is not None
                    else hopeless.tolist()
                )
                raise AttemptCapExceeded(
                    f"imputation attempt cap {cap} exhausted for households {ids} (size {size})",
                    size=size,
                    rule_hits=rule_hits,
                    household_ids=ids,
                )
            # resample latent classes given the current (valid) values, then retry
            # once; fall back to uniform classes when no valid values exist yet
            if (cur_hh[stuck] == 0).any() or (cur_ind[stuck] == 0).any():
                g_new = rng.integers(0, params.F, size=stuck.size)
                m_new = rng.integers(0, params.S, size=(stuck.size, size))
            else:
                if logs is None:
                    logs = params.log_arrays()
                g_new, m_new = _latent_rows(params, logs, cur_hh[stuck], cur_ind[stuck], rng)
            G[stuck] = g_new
            M[stuck] = m_new
            sub_hw = _tilted_hh_weights(
                params, schema, eps_hh, error_config.prone_hh, g_new, y_hh[stuck], miss_hh[stuck]
            )
            for k in hw:
                hw[k][stuck] = sub_hw[k]
            sub_iw = _tilted_ind_weights(
                params,
                schema,
                eps_ind,
                error_config.prone_ind,
                g_new,
                m_new,
                y_ind[stuck],
                miss_ind[stuck],
            )
            for jk in iw:
                iw[jk][stuck] = sub_iw[jk]
            attempts[stuck] = 0
            retried[stuck] = True

    e_hh = miss_hh | (~miss_hh & (x_hh != y_hh))
    e_ind = miss_ind | (~miss_ind & (x_ind != y_ind))
    return x_hh, x_ind, e_hh, e_ind


def step_impute_household(
    params: NdpmpmParams,
    schema: Schema,
    eps_hh: np.ndarray,
    eps_ind: np.ndarray,
    observed: Household,
    z: bool,
    g: int,
    m: np.ndarray,
    ruleset: RuleSet,
    rng,
    error_config: ErrorModelConfig | None = None,
    cap: int = 1_000_000,
    current: Household | None = None,
) -> tuple[Household, np.ndarray, np.ndarray]:
    """Single-household S2+S3: plausible true values plus error indicators."""
    if not z:
        return (
            Household(observed.hh.copy(), observed.ind.copy()),
            np.zeros(schema.q, dtype=bool),
            np.zeros((observed.size, schema.p), dtype=bool),
        )
    if error_config is None:
        error_config = ErrorModelConfig.build(schema)
    cur = current if current is not None else observed
    x_hh, x_ind, e_hh, e_ind = _impute_rows(
        params,
        schema,
        observed.size,
        observed.hh[None, :],
        observed.ind[None, :, :],
        observed.hh[None, :] == 0,
        observed.ind[None, :, :] == 0,
        np.array([g]),
        m[None, :],
        cur.hh[None, :],
        cur.ind[None, :, :],
        eps_hh,
        eps_ind,
        error_config,
        ruleset,
        rng,
        cap,
    )
    return Household(x_hh[0], x_ind[0]), e_hh[0], e_ind[0]


# ---------------------------------------------------------------------------
# S4: cap-and-weight augmentation

def _augment_size(
    params: NdpmpmParams,
    schema: Schema,
    h: int,
    target: int,
    ruleset: RuleSet,
    rng,
    budget: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, int, int]:
    """Generate rule-violating households of size h until ``target`` candidate
    draws have passed the rules; returns the violators, their classes, the
    violator count t0, and the number of candidates drawn."""
    size_k = schema.size_index
    weights = params.pi * params.lam[size_k][:, schema.code_for_size(h) - 1]
    total = weights.sum()
    if total <= 0:
        raise AttemptCapExceeded(f"size {h} has zero probability under the current parameters", size=h)
    cum = np.cumsum(weights / total)

    bad_hh, bad_ind, bad_g, bad_m = [], [], [], []
    t0 = 0
    t1 = 0
    drawn = 0
    batch = max(128, min(target + 64, 65_536))
    while t1 < target:
        if drawn >= budget:
            raise AttemptCapExceeded(
                f"augmentation attempt cap exhausted at size {h} "
                f"({drawn} draws, {t1}/{target} accepted)",
                size=h,
            )
        b = int(min(batch, budget - drawn))
        drawn += b
        G0 = np.searchsorted(cum, rng.random(b)).astype(np.int64)
        G0 = np.minimum(G0, params.F - 1)
        M0 = categorical_rows(
            rng, np.broadcast_to(params.omega[G0][:, None, :], (b, h, params.S))
        ).astype(np.int64)
        hh, ind = sample_values_batch(params, schema, G0, M0, h, rng)
        viol = ruleset.any_violation(hh, ind)
        passes = np.cumsum(~viol)
        need = target - t1
        if passes[-1] >= need:
            cut = int(np.searchsorted(passes, need))  # index of the need-th pass
            keep = viol[: cut + 1]
            t1 = target
        else:
            keep = viol
            t1 += int(passes[-1])
            batch = min(batch * 2, 262_144)
        rows = np.flatnonzero(keep)
        t0 += rows.size
        if rows.size:
            bad_hh.append(hh[rows])
            bad_ind.append(ind[rows])
            bad_g.append(G0[rows])
            bad_m.append(M0[rows])

    if bad_hh:
        return (
            np.concatenate(bad_hh),
            np.concatenate(bad_ind),
            np.concatenate(bad_g),
            np.concatenate(bad_m),
            t0,
            drawn,
        )
    empty_hh = np.empty((0, schema.q), dtype=np.int32)
    empty_ind = np.empty((0, h, schema.p), dtype=np.int32)
    return empty_hh, empty_ind, np.empty(0, dtype=np.int64), np.empty((0, h), dtype=np.int64), 0, drawn


def step_augment(
    params: NdpmpmParams,
    schema: Schema,
    observed_counts: dict[int, int],
    config: GibbsConfig,
    ruleset: RuleSet,
    rng_for_size,
) -> tuple[ClassedData, dict[int, int]]:
    """S4 over all sizes.  ``rng_for_size`` maps a size to its generator.

    With no rules nothing can violate, so the augmented pool is empty by
    construction and no draws are spent.
    """
    augmented = ClassedData.empty()
    t0_by_size: dict[int, int] = {}
    if len(ruleset) == 0:
        return augmented, {h: 0 for h in observed_counts}
    budget = config.augment_attempt_cap
    for h in sorted(observed_counts):
        target = int(np.ceil(observed_counts[h] * config.psi_for(h)))
        if target == 0:
            t0_by_size[h] = 0
            continue
        hh, ind, g0, m0, t0, drawn = _augment_size(
            params, schema, h, target, ruleset, rng_for_size(h), budget
        )
        budget -= drawn
        t0_by_size[h] = t0
        if t0:
            augmented.hh[h] = hh
            augmented.ind[h] = ind
            augmented.g[h] = g0
            augmented.m[h] = m0
    return augmented, t0_by_size


# ---------------------------------------------------------------------------
# S5: latent class assignment

def _latent_rows(params, logs, x_hh, x_ind, rng) -> tuple[np.ndarray, np.ndarray]:
    n, h, _ = x_ind.shape
    logw, member_fs, inv = log_class_weights(logs, x_hh, x_ind)
    G = categorical_logit_rows(rng, logw)
    logits = member_fs[inv, np.repeat(G, h)]
    M = categorical_logit_rows(rng, logits).reshape(n, h)
    return G, M


def step_latent(
    params: NdpmpmParams,
    groups_hh: dict[int, np.ndarray],
    groups_ind: dict[int, np.ndarray],
    rng_for_size,
) -> tuple[dict[int, np.ndarray], dict[int, np.ndarray]]:
    """Draw household classes then member classes for every size group."""
    logs = params.log_arrays()
    g_out, m_out = {}, {}
    for h in sorted(groups_hh):
        g_out[h], m_out[h] = _latent_rows(params, logs, groups_hh[h], groups_ind[h], rng_for_size(h))
    return g_out, m_out


# ---------------------------------------------------------------------------
# S6-S11: parameter updates

def sufficient_counts(
    schema: Schema,
    F: int,
    S: int,
    observed: ClassedData,
    augmented: ClassedData,
    inv_psi: dict[int, int],
) -> tuple[np.ndarray, np.ndarray, list[np.ndarray], list[np.ndarray]]:
    """Weighted class/value tallies feeding the conjugate updates.

    Observed households count with weight 1; augmented households of size h
    count with integer weight 1/psi_h.  Exact integer arithmetic.
    """
    U = np.zeros(F, dtype=np.int64)
    V = np.zeros((F, S), dtype=np.int64)
    eta = [np.zeros((F, v.cardinality), dtype=np.int64) for v in schema.household_vars]
    nu = [np.zeros((F, S, v.cardinality), dtype=np.int64) for v in schema.individual_vars]

    def accumulate(data: ClassedData, weight_for):
        for h, g in data.g.items():
            w = weight_for(h)
            m = data.m[h]
            hh = data.hh[h]
            ind = data.ind[h]
            U[:] += w * np.bincount(g, minlength=F)
            gm = (np.repeat(g, h) * S + m.ravel()).astype(np.int64)
            V[:] += w * np.bincount(gm, minlength=F * S).reshape(F, S)
            for k, var in enumerate(schema.household_vars):
                d = var.cardinality
                flat = g * d + (hh[:, k].astype(np.int64) - 1)
                eta[k][:] += w * np.bincount(flat, minlength=F * d).reshape(F, d)
            for k, var in enumerate(schema.individual_vars):
                d = var.cardinality
                flat = gm * d + (ind[:, :, k].ravel().astype(np.int64) - 1)
                nu[k][:] += w * np.bincount(flat, minlength=F * S * d).reshape(F, S, d)

    accumulate(observed, lambda h: 1)
    accumulate(augmented, lambda h: inv_psi[h])
    return U, V, eta, nu


def step_update_params(
    schema: Schema,
    F: int,
    S: int,
    counts,
    hyper: Hyperparams,
    alpha: float,
    beta: float,
    rng,
) -> NdpmpmParams:
    """Draw new sticks, category rows, and concentrations from their
    conditionals; ``alpha``/``beta`` are the incoming values used by the
    stick draws before their own update."""
    U, V, eta, nu = counts
    tiny = 1e-15

    u = np.ones(F)
    if F > 1:
        tail = U[::-1].cumsum()[::-1] - U  # sum over later classes
        u[:-1] = rng.beta(1.0 + U[:-1], alpha + tail[:-1])
        u[:-1] = np.clip(u[:-1], tiny, 1.0 - tiny)
    v = np.ones((F, S))
    if S > 1:
        tail_v = V[:, ::-1].cumsum(axis=1)[:, ::-1] - V
        v[:, :-1] = rng.beta(1.0 + V[:, :-1], beta + tail_v[:, :-1])
        v[:, :-1] = np.clip(v[:, :-1], tiny, 1.0 - tiny)

    lam = []
    for k in range(schema.q):
        draws = rng.standard_gamma(1.0 + eta[k])
        lam.append(draws / draws.sum(axis=-1, keepdims=True))
    phi = []
    for k in range(schema.p):
        draws = rng.standard_gamma(1.0 + nu[k])
        phi.append(draws / draws.sum(axis=-1, keepdims=True))

    alpha_new = rng.gamma(
        hyper.a_alpha + F - 1, 1.0 / (hyper.b_alpha - np.log1p(-u[:-1]).sum())
    )
    beta_new = rng.gamma(
        hyper.a_beta + F * (S - 1), 1.0 / (hyper.b_beta - np.log1p(-v[:, :-1]).sum())
    )
    return NdpmpmParams(F=F, S=S, u=u, v=v, lam=lam, phi=phi, alpha=alpha_new, beta=beta_new)


# ---------------------------------------------------------------------------
# Traces

def _parse_trace_spec(spec: str, schema: Schema):
    parts = spec.split(":")
    if parts[0] == "marginal" and len(parts) == 3:
        var = schema.require(parts[1])
        return ("marginal", var.level, schema.hh_position(parts[1]) if var.level == "household" else schema.ind_position(parts[1]), int(parts[2]), spec)
    if parts[0] == "bivariate" and len(parts) == 5:
        v1, v2 = schema.require(parts[1]), schema.require(parts[3])
        def pos(v, name):
            return schema.hh_position(name) if v.level == "household" else schema.ind_position(name)
        return ("bivariate", (v1.level, pos(v1, parts[1]), int(parts[2])), (v2.level, pos(v2, parts[3]), int(parts[4])), spec)
    raise ConfigError(f"unrecognized trace spec {spec!r}")


def _cell_values(groups: dict[int, _Group], level: str, pos: int):
    if level == "household":
        return np.concatenate([grp.x_hh[:, pos] for grp in groups.values()])
    return np.concatenate([grp.x_ind[:, :, pos].ravel() for grp in groups.values()])


def _trace_probability(groups, parsed) -> float:
    if parsed[0] == "marginal":
        _, level, pos, code, _ = parsed
        vals = _cell_values(groups, level, pos)
        return float((vals == code).mean())
    _, left, right, _ = parsed
    if left[0] == right[0] == "household":
        a = _cell_values(groups, *left[:2])
        b = _cell_values(groups, *right[:2])
        return float(((a == left[2]) & (b == right[2])).mean())
    # any individual-level variable: evaluate per person, broadcasting household values
    hits, total = 0, 0
    for grp in groups.values():
        h = grp.x_ind.shape[1]

        def per_person(side):
            level, pos, code = side
            if level == "household":
                return np.repeat(grp.x_hh[:, pos] == code, h)
            return (grp.x_ind[:, :, pos] == code).ravel()

        joint = per_person(left) & per_person(right)
        hits += int(joint.sum())
        total += joint.size
    return hits / total if total else 0.0


# ---------------------------------------------------------------------------
# Driver

def run_gibbs(dataset: Dataset, ruleset: RuleSet, config: GibbsConfig) -> GibbsResult:
    schema = dataset.schema
    config.validate(schema)
    error_config = ErrorModelConfig.build(
        schema,
        error_prone=config.error_prone,
        prior_a=config.eps_prior_a,
        prior_b=config.eps_prior_b,
        count_missing=config.count_missing_in_epsilon,
        fixed=config.fixed_epsilon,
    )
    seed = config.seed
    groups: dict[int, _Group] = {}
    for h, grp in dataset.groups().items():
        y_hh = grp.hh.astype(np.int32)
        y_ind = grp.ind.astype(np.int32)
        z = (
            np.ones(len(grp.indices), dtype=bool)
            if config.flag_all
            else derive_flags(y_hh, y_ind, ruleset)
        )
        groups[h] = _Group(
            size=h,
            indices=grp.indices,
            y_hh=y_hh,
            y_ind=y_ind,
            miss_hh=y_hh == 0,
            miss_ind=y_ind == 0,
            z=z,
            x_hh=y_hh.copy(),
            x_ind=y_ind.copy(),
            e_hh=np.zeros_like(y_hh, dtype=bool),
            e_ind=np.zeros_like(y_ind, dtype=bool),
            g=np.zeros(len(grp.indices), dtype=np.int64),
            m=np.zeros((len(grp.indices), h), dtype=np.int64),
        )

    params = NdpmpmParams.from_prior(schema, config.F, config.S, config.hyper, substream(seed, 0, PHASE_INIT, 0))
    init_rng = substream(seed, 0, PHASE_INIT, 1)
    for h in sorted(groups):
        grp = groups[h]
        n = len(grp.indices)
        grp.g = init_rng.integers(0, config.F, size=n)
        grp.m = init_rng.integers(0, config.S, size=(n, h))

    eps_hh, eps_ind = error_config.initial_eps()
    init_eps_hh = np.full(schema.q, 0.5)
    init_eps_ind = np.full(schema.p, 0.5)
    _impute_all(
        groups, params, schema, init_eps_hh, init_eps_ind, error_config, ruleset, config,
        sweep=0, seed=seed,
    )

    observed_counts = {h: len(grp.indices) for h, grp in groups.items()}
    parsed_traces = [_parse_trace_spec(s, schema) for s in config.trace_probs]
    prone_names = [
        v.name for k, v in enumerate(schema.household_vars) if error_config.prone_hh[k]
    ] + [v.name for k, v in enumerate(schema.individual_vars) if error_config.prone_ind[k]]

    retained = (config.iterations - config.burn_in) // config.thin
    emit_at = set()
    if config.n_imputations > 0:
        positions = np.unique(np.round(np.linspace(0, retained - 1, config.n_imputations)).astype(int))
        if positions.size != config.n_imputations:
            raise ConfigError("could not space the imputed datasets evenly; reduce L or thin")
        emit_at = {int(r) for r in positions}

    traces: list[tuple[int, str, float]] = []
    imputed: list[Dataset] = []
    occ_house: list[int] = []
    occ_member: list[int] = []

    for sweep in range(1, config.iterations + 1):
        # S1: error rates from their Beta conditionals
        state = ErrorState(
            z={h: grp.z for h, grp in groups.items()},
            e_hh={h: grp.e_hh for h, grp in groups.items()},
            e_ind={h: grp.e_ind for h, grp in groups.items()},
            eps_hh=eps_hh,
            eps_ind=eps_ind,
        )
        eps_hh, eps_ind = update_epsilon(
            state,
            error_config,
            substream(seed, sweep, PHASE_EPSILON),
            missing_hh={h: grp.miss_hh for h, grp in groups.items()},
            missing_ind={h: grp.miss_ind for h, grp in groups.items()},
        )

        # S2 + S3: plausible true values and error indicators
        _impute_all(
            groups, params, schema, eps_hh, eps_ind, error_config, ruleset, config,
            sweep=sweep, seed=seed,
        )

        # S4: augmented rule-violating households
        augmented, _ = step_augment(
            params,
            schema,
            observed_counts,
            config,
            ruleset,
            lambda h: substream(seed, sweep, PHASE_AUGMENT, h),
        )

        # S5: latent classes for the observed-side households
        g_new, m_new = step_latent(
            params,
            {h: grp.x_hh for h, grp in groups.items()},
            {h: grp.x_ind for h, grp in groups.items()},
            lambda h: substream(seed, sweep, PHASE_LATENT, h),
        )
        for h, grp in groups.items():
            grp.g = g_new[h]
            grp.m = m_new[h]

        # S6-S11: mixture parameters
        observed_cd = ClassedData(
            g={h: grp.g for h, grp in groups.items()},
            m={h: grp.m for h, grp in groups.items()},
            hh={h: grp.x_hh for h, grp in groups.items()},
            ind={h: grp.x_ind for h, grp in groups.items()},
        )
        counts = sufficient_counts(
            schema,
            config.F,
            config.S,
            observed_cd,
            augmented,
            {h: config.inv_psi_for(h) for h in schema.sizes},
        )
        params = step_update_params(
            schema,
            config.F,
            config.S,
            counts,
            config.hyper,
            params.alpha,
            params.beta,
            substream(seed, sweep, PHASE_PARAMS),
        )

        # traces
        traces.append((sweep, "alpha", float(params.alpha)))
        traces.append((sweep, "beta", float(params.beta)))
        for name in prone_names:
            var = schema.require(name)
            val = (
                eps_hh[schema.hh_position(name)]
                if var.level == "household"
                else eps_ind[schema.ind_position(name)]
            )
            traces.append((sweep, f"epsilon:{name}", float(val)))
        occ_h = len(np.unique(np.concatenate([grp.g for grp in groups.values()])))
        occ_m = len(np.unique(np.concatenate([grp.m.ravel() for grp in groups.values()])))
        traces.append((sweep, "occupancy:household", float(occ_h)))
        traces.append((sweep, "occupancy:member", float(occ_m)))
        for parsed in parsed_traces:
            traces.append((sweep, parsed[-1], _trace_probability(groups, parsed)))

        # emission after burn-in and thinning
        if sweep > config.burn_in and (sweep - config.burn_in) % config.thin == 0:
            r = (sweep - config.burn_in) // config.thin - 1
            occ_house.append(occ_h)
            occ_member.append(occ_m)
            if r in emit_at:
                snap = {
                    h: SizeGroup(grp.indices, grp.x_hh.copy(), grp.x_ind.copy())
                    for h, grp in groups.items()
                }
                for h, grp in snap.items():
                    if ruleset.any_violation(grp.hh, grp.ind).any():
                        raise AssertionError("emitted dataset contains a rule violation")
                imputed.append(Dataset.from_groups(schema, snap, len(dataset), ids=dataset.ids))

    occupancy = {
        "household": (min(occ_house), max(occ_house)) if occ_house else (0, 0),
        "member": (min(occ_member), max(occ_member)) if occ_member else (0, 0),
    }
    flagged = int(sum(grp.z.sum() for grp in groups.values()))
    return GibbsResult(
        imputed=imputed, traces=traces, params=params, occupancy=occupancy, flagged=flagged
    )


def _impute_all(groups, params, schema, eps_hh, eps_ind, error_config, ruleset, config, sweep, seed):
    """S2+S3 over every size group, blocked for deterministic parallelism."""
    for h in sorted(groups):
        grp = groups[h]
        flagged = np.flatnonzero(grp.z)
        if flagged.size == 0:
            grp.e_hh[:] = False
            grp.e_ind[:] = False
            continue
        blocks = [flagged[i : i + _IMPUTE_BLOCK] for i in range(0, flagged.size, _IMPUTE_BLOCK)]

        def work(item):
            bi, rows = item
            return _impute_rows(
                params,
                schema,
                h,
                grp.y_hh[rows],
                grp.y_ind[rows],
                grp.miss_hh[rows],
                grp.miss_ind[rows],
                grp.g[rows],
                grp.m[rows],
                grp.x_hh[rows],
                grp.x_ind[rows],
                eps_hh,
                eps_ind,
                error_config,
                ruleset,
                substream(seed, sweep, PHASE_IMPUTE, h, bi),
                config.impute_attempt_cap,
                household_ids=grp.indices[rows],
            )

        results = map_blocks(work, list(enumerate(blocks)), config.threads)
        for rows, (x_hh, x_ind, e_hh, e_ind) in zip(blocks, results):
            grp.x_hh[rows] = x_hh
            grp.x_ind[rows] = x_ind
            grp.e_hh[rows] = e_hh
            grp.e_ind[rows] = e_ind
        clean = np.flatnonzero(~grp.z)
        grp.x_hh[clean] = grp.y_hh[clean]
        grp.x_ind[clean] = grp.y_ind[clean]
        grp.e_hh[clean] = False
        grp.e_ind[clean] = False

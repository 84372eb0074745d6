"""Truncated nested Dirichlet-process mixture of products of multinomials.

Households belong to one of F latent classes (weights ``pi`` from a
truncated stick-breaking prior with concentration ``alpha``); within a
household class each member belongs to one of S member classes (per-class
weights ``omega`` with concentration ``beta``).  Household-level variables
follow per-class categoricals ``lam``; individual-level variables follow
per-(class, member-class) categoricals ``phi``.  The truncated variant
conditions the generative law on passing all structural-zero rules, which
is realized by rejection.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Household
from .rules import RuleSet
from .schema import Schema

CHECKPOINT_VERSION = 1


class ModelError(ValueError):
    pass


class AttemptCapExceeded(RuntimeError):
    """A rejection loop hit its attempt cap; carries diagnostic context."""

    def __init__(self, message, size=None, rule_hits=None, household_ids=None):
        super().__init__(message)
        self.size = size
        self.rule_hits = dict(rule_hits or {})
        self.household_ids = list(household_ids or [])


@dataclass
class Hyperparams:
    a_alpha: float = 0.25
    b_alpha: float = 0.25
    a_beta: float = 0.25
    b_beta: float = 0.25

    def __post_init__(self):
        if min(self.a_alpha, self.b_alpha, self.a_beta, self.b_beta) <= 0:
            raise ModelError("Gamma hyperparameters must be strictly positive")


def stick_break(fractions: np.ndarray) -> np.ndarray:
    """Map stick fractions (last entry exactly 1) to a probability vector."""
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.ndim != 1 or fr.size == 0:
        raise ModelError("stick fractions must be a nonempty vector")
    if np.any(fr < 0) or np.any(fr > 1):
        raise ModelError("stick fractions must lie in [0, 1]")
    if fr[-1] != 1.0:
        raise ModelError("final stick fraction must be exactly 1")
    remaining = np.concatenate([[1.0], np.cumprod(1.0 - fr[:-1])])
    return fr * remaining


@dataclass
class NdpmpmParams:
    """Full parameter state of the mixture."""

    F: int
    S: int
    u: np.ndarray  # (F,) stick fractions, u[-1] = 1
    v: np.ndarray  # (F, S) stick fractions, v[:, -1] = 1
    lam: list[np.ndarray] = field(default_factory=list)  # per household var: (F, d_k)
    phi: list[np.ndarray] = field(default_factory=list)  # per individual var: (F, S, d_k)
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        self.pi = stick_break(self.u)
        self.omega = np.stack([stick_break(self.v[g]) for g in range(self.F)])

    def refresh(self):
        """Recompute pi/omega after u/v were replaced in place."""
        self.__post_init__()

    def validate(self, tol: float = 1e-12):
        if abs(self.pi.sum() - 1.0) > tol:
            raise ModelError("household class probabilities do not sum to 1")
        if np.max(np.abs(self.omega.sum(axis=1) - 1.0)) > tol:
            raise ModelError("member class probabilities do not sum to 1")
        for arr in self.lam:
            if np.max(np.abs(arr.sum(axis=-1) - 1.0)) > tol or np.any(arr < 0):
                raise ModelError("household category probabilities are not simplex rows")
        for arr in self.phi:
            if np.max(np.abs(arr.sum(axis=-1) - 1.0)) > tol or np.any(arr < 0):
                raise ModelError("individual category probabilities are not simplex rows")
        if self.alpha <= 0 or self.beta <= 0:
            raise ModelError("concentrations must be positive")

    @classmethod
    def from_prior(cls, schema: Schema, F: int, S: int, hyper: Hyperparams, rng) -> "NdpmpmParams":
        alpha = rng.gamma(hyper.a_alpha, 1.0 / hyper.b_alpha)
        beta = rng.gamma(hyper.a_beta, 1.0 / hyper.b_beta)
        u = np.append(rng.beta(1.0, alpha, size=F - 1), 1.0) if F > 1 else np.array([1.0])
        v = np.ones((F, S))
        if S > 1:
            v[:, :-1] = rng.beta(1.0, beta, size=(F, S - 1))
        lam = [rng.dirichlet(np.ones(var.cardinality), size=F) for var in schema.household_vars]
        phi = [
            rng.dirichlet(np.ones(var.cardinality), size=(F, S))
            for var in schema.individual_vars
        ]
        return cls(F=F, S=S, u=u, v=v, lam=lam, phi=phi, alpha=alpha, beta=beta)

    def log_arrays(self):
        """Snapshot of log probabilities used by likelihood evaluations."""
        with np.errstate(divide="ignore"):
            return (
                np.log(self.pi),
                np.log(self.omega),
                [np.log(a) for a in self.lam],
                [np.log(a) for a in self.phi],
            )


# ---------------------------------------------------------------------------
# Generative sampling

def sample_values_batch(
    params: NdpmpmParams,
    schema: Schema,
    G: np.ndarray,
    M: np.ndarray,
    size: int,
    rng,
) -> tuple[np.ndarray, np.ndarray]:
    """Fill household and member values for given class assignments.

    The household-size cell is pinned to the code for ``size``; all other
    cells are independent categorical draws from their class rows.
    """
    from .util import categorical_rows

    n = G.shape[0]
    hh = np.empty((n, schema.q), dtype=np.int32)
    for k in range(schema.q):
        if k == schema.size_index:
            hh[:, k] = schema.code_for_size(size)
        else:
            hh[:, k] = categorical_rows(rng, params.lam[k][G]) + 1
    ind = np.empty((n, size, schema.p), dtype=np.int32)
    for k in range(schema.p):
        ind[:, :, k] = categorical_rows(rng, params.phi[k][G[:, None], M]) + 1
    return hh, ind


def sample_household_untruncated(
    params: NdpmpmParams, schema: Schema, rng, size: int | None = None
) -> tuple[Household, int, np.ndarray]:
    """One draw from the untruncated generative law.

    With ``size`` given the size cell is pinned; otherwise the size is
    drawn from its own household-level categorical.  Returns the household
    plus its class and member-class assignments.
    """
    from .util import categorical_rows

    g = int(categorical_rows(rng, params.pi[None, :])[0])
    if size is None:
        size_code = int(categorical_rows(rng, params.lam[schema.size_index][g][None, :])[0]) + 1
        size = schema.size_for_code(size_code)
    m = categorical_rows(rng, np.repeat(params.omega[g][None, :], size, axis=0))
    hh, ind = sample_values_batch(params, schema, np.array([g]), m[None, :], size, rng)
    return Household(hh[0], ind[0]), g, m


def sample_household_truncated(
    params: NdpmpmParams,
    schema: Schema,
    ruleset: RuleSet,
    rng,
    size: int | None = None,
    max_attempts: int = 1_000_000,
) -> Household:
    """Rejection-sample a household that violates no rule."""
    rule_hits = {rid: 0 for rid in ruleset.rule_ids}
    for _ in range(max_attempts):
        household, _, _ = sample_household_untruncated(params, schema, rng, size=size)
        bad, fired = ruleset.violates(household)
        if not bad:
            return household
        for rid in fired:
            rule_hits[rid] += 1
    raise AttemptCapExceeded(
        f"no rule-satisfying household generated in {max_attempts} attempts"
        + (f" at size {size}" if size is not None else ""),
        size=size,
        rule_hits=rule_hits,
    )


def synthesize_households(
    params: NdpmpmParams,
    schema: Schema,
    ruleset: RuleSet,
    n: int,
    rng,
    max_attempts: int = 100_000_000,
) -> list[Household]:
    """Batched generative sampling of n rule-satisfying households."""
    from .util import categorical_rows

    out: list[Household] = []
    rule_hits = {rid: 0 for rid in ruleset.rule_ids}
    drawn = 0
    batch = max(256, n)
    while len(out) < n:
        if drawn >= max_attempts:
            raise AttemptCapExceeded(
                f"synthesis exceeded {max_attempts} candidate draws", rule_hits=rule_hits
            )
        b = min(batch, max_attempts - drawn)
        drawn += b
        G = categorical_rows(rng, np.repeat(params.pi[None, :], b, axis=0))
        size_codes = categorical_rows(rng, params.lam[schema.size_index][G]) + 1
        accepted: list[tuple[int, Household]] = []
        for code in np.unique(size_codes):
            h = schema.size_for_code(int(code))
            sel = np.flatnonzero(size_codes == code)
            M = categorical_rows(
                rng, params.omega[G[sel]][:, None, :].repeat(h, axis=1).reshape(-1, params.S)
            ).reshape(len(sel), h)
            hh, ind = sample_values_batch(params, schema, G[sel], M, h, rng)
            viol = ruleset.any_violation(hh, ind)
            if viol.any():
                fired = ruleset.violation_matrix(hh, ind)
                for r, rid in enumerate(ruleset.rule_ids):
                    rule_hits[rid] += int(fired[r].sum())
            for row in np.flatnonzero(~viol):
                accepted.append((int(sel[row]), Household(hh[row].copy(), ind[row].copy())))
        # keep draw order so truncating to n does not skew the size mix
        accepted.sort(key=lambda item: item[0])
        out.extend(hh for _, hh in accepted)
    return out[:n]


# ---------------------------------------------------------------------------
# Likelihood pieces

def household_mixture_weight(params: NdpmpmParams, schema: Schema, household: Household) -> np.ndarray:
    """Per-class joint terms of one fully observed household.

    Entry g is pi_g * prod_k lam[k][g, x_k] * prod_j sum_m omega[g, m]
    * prod_k phi[k][g, m, x_jk]; the total over g is the household's
    untruncated likelihood.
    """
    w = params.pi.copy()
    for k in range(schema.q):
        w = w * params.lam[k][:, household.hh[k] - 1]
    for j in range(household.size):
        inner = params.omega.copy()
        for k in range(schema.p):
            inner = inner * params.phi[k][:, :, household.ind[j, k] - 1]
        w = w * inner.sum(axis=1)
    return w


def save_params(params: NdpmpmParams, schema: Schema, target) -> None:
    """Write a parameter checkpoint (versioned .npz, row-major arrays)."""
    payload = {
        "format_version": np.array([CHECKPOINT_VERSION]),
        "F": np.array([params.F]),
        "S": np.array([params.S]),
        "u": params.u,
        "v": params.v,
        "alpha": np.array([params.alpha]),
        "beta": np.array([params.beta]),
        "household_vars": np.array([v.name for v in schema.household_vars]),
        "individual_vars": np.array([v.name for v in schema.individual_vars]),
    }
    for k, arr in enumerate(params.lam):
        payload[f"lam_{k}"] = arr
    for k, arr in enumerate(params.phi):
        payload[f"phi_{k}"] = arr
    np.savez(target, **payload)


def load_params(source, schema: Schema) -> NdpmpmParams:
    """Read a checkpoint and validate it against a schema."""
    with np.load(source, allow_pickle=False) as data:
        version = int(data["format_version"][0])
        if version != CHECKPOINT_VERSION:
            raise ModelError(f"unsupported checkpoint version {version}")
        names_hh = [str(x) for x in data["household_vars"]]
        names_ind = [str(x) for x in data["individual_vars"]]
        if names_hh != [v.name for v in schema.household_vars] or names_ind != [
            v.name for v in schema.individual_vars
        ]:
            raise ModelError("checkpoint variables do not match the schema")
        params = NdpmpmParams(
            F=int(data["F"][0]),
            S=int(data["S"][0]),
            u=data["u"],
            v=data["v"],
            lam=[data[f"lam_{k}"] for k in range(schema.q)],
            phi=[data[f"phi_{k}"] for k in range(schema.p)],
            alpha=float(data["alpha"][0]),
            beta=float(data["beta"][0]),
        )
    for k, var in enumerate(schema.household_vars):
        if params.lam[k].shape != (params.F, var.cardinality):
            raise ModelError(f"checkpoint array for {var.name} has the wrong shape")
    for k, var in enumerate(schema.individual_vars):
        if params.phi[k].shape != (params.F, params.S, var.cardinality):
            raise ModelError(f"checkpoint array for {var.name} has the wrong shape")
    params.validate(tol=1e-9)
    return params


def log_class_weights(
    logs, hh: np.ndarray, ind: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized log per-class weights for a size group.

    Returns (logw (n, F), member_log (n, h, F, S) gathered lazily via the
    unique-profile table, profile inverse).  ``logs`` is the tuple from
    ``NdpmpmParams.log_arrays``.
    """
    log_pi, log_omega, log_lam, log_phi = logs
    n, h, p = ind.shape
    F, S = log_omega.shape

    logw = np.broadcast_to(log_pi, (n, F)).copy()
    for k in range(len(log_lam)):
        logw += log_lam[k][:, hh[:, k] - 1].T

    # members with identical value profiles share one (F, S) table row
    cards = np.array([arr.shape[-1] for arr in log_phi], dtype=np.int64)
    strides = np.concatenate([[1], np.cumprod(cards[:-1])])
    codes = ((ind.reshape(-1, p).astype(np.int64) - 1) * strides).sum(axis=1)
    uniq, inv = np.unique(codes, return_inverse=True)
    # decode unique profiles back to per-variable values
    table = np.zeros((len(uniq), F, S))
    rest = uniq.copy()
    for k in range(p):
        vals = rest % cards[k]
        rest //= cards[k]
        table += np.moveaxis(log_phi[k][:, :, vals], -1, 0)
    member_fs = table + log_omega  # (U, F, S)
    mmax = member_fs.max(axis=2, keepdims=True)
    safe = np.where(np.isfinite(mmax), mmax, 0.0)  # classes with zero mass stay -inf
    with np.errstate(divide="ignore"):
        member_f = np.log(np.exp(member_fs - safe).sum(axis=2)) + safe[:, :, 0]  # (U, F)
    logw += member_f[inv].reshape(n, h, F).sum(axis=1)
    return logw, member_fs, inv

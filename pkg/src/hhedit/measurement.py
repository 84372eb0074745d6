"""Reporting and error-location models plus the error-rate updates.

A flagged household (one that violates an edit rule or contains missing
cells) gets per-cell binary error indicators: independent Bernoulli draws
with a per-variable rate for the variables designated error-prone, zero
elsewhere.  A cell in error reports a value drawn uniformly from the
other d_k - 1 categories; a clean cell reports the true value.  Missing
cells always carry an error indicator of 1 and, by default, count toward
the error-rate updates.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import MISSING
from .schema import Schema


class MeasurementError(ValueError):
    pass


def reporting_prob(y: int, x: int, e: int, d_k: int) -> float:
    """P(reported = y | true = x, error flag e) under uniform substitution."""
    if d_k < 2:
        raise MeasurementError("reporting model needs at least two categories")
    if not (1 <= y <= d_k and 1 <= x <= d_k):
        raise MeasurementError("codes outside 1..d_k")
    if e == 0:
        return 1.0 if y == x else 0.0
    return 0.0 if y == x else 1.0 / (d_k - 1)


def sample_reported(x, e, d_k: int, rng):
    """Draw reported values; array-shaped inputs broadcast elementwise."""
    if d_k < 2:
        raise MeasurementError("reporting model needs at least two categories")
    x = np.asarray(x)
    e = np.asarray(e)
    r = rng.integers(1, d_k, size=x.shape)  # uniform over 1..d_k-1
    substituted = np.where(r >= x, r + 1, r)  # skip the true value
    out = np.where(e.astype(bool), substituted, x)
    return out if out.shape else out.item()


@dataclass
class ErrorModelConfig:
    """Which variables are error-prone, their priors, and counting rules."""

    prone_hh: np.ndarray  # (q,) bool
    prone_ind: np.ndarray  # (p,) bool
    prior_a_hh: np.ndarray
    prior_b_hh: np.ndarray
    prior_a_ind: np.ndarray
    prior_b_ind: np.ndarray
    count_missing: bool = True
    fixed_hh: np.ndarray | None = None  # NaN = free, else pinned rate
    fixed_ind: np.ndarray | None = None

    @classmethod
    def build(
        cls,
        schema: Schema,
        error_prone: list[str] | None = None,
        prior_a: float = 1.0,
        prior_b: float = 1.0,
        count_missing: bool = True,
        fixed: dict[str, float] | None = None,
    ) -> "ErrorModelConfig":
        """Resolve a configuration from variable names.

        ``error_prone=None`` marks every variable except the household-size
        variable as error-prone.
        """
        q, p = schema.q, schema.p
        prone_hh = np.zeros(q, dtype=bool)
        prone_ind = np.zeros(p, dtype=bool)
        if error_prone is None:
            prone_hh[:] = True
            prone_hh[schema.size_index] = False
            prone_ind[:] = True
        else:
            for name in error_prone:
                var = schema.require(name)
                if name == schema.size_variable:
                    raise MeasurementError("the household-size variable cannot be error-prone")
                if var.level == "household":
                    prone_hh[schema.hh_position(name)] = True
                else:
                    prone_ind[schema.ind_position(name)] = True
        fixed_hh = np.full(q, np.nan)
        fixed_ind = np.full(p, np.nan)
        for name, rate in (fixed or {}).items():
            var = schema.require(name)
            if not (0.0 < rate < 1.0):
                raise MeasurementError(f"fixed error rate for {name} must lie in (0, 1)")
            if var.level == "household":
                fixed_hh[schema.hh_position(name)] = rate
            else:
                fixed_ind[schema.ind_position(name)] = rate
        return cls(
            prone_hh=prone_hh,
            prone_ind=prone_ind,
            prior_a_hh=np.full(q, prior_a),
            prior_b_hh=np.full(q, prior_b),
            prior_a_ind=np.full(p, prior_a),
            prior_b_ind=np.full(p, prior_b),
            count_missing=count_missing,
            fixed_hh=fixed_hh,
            fixed_ind=fixed_ind,
        )

    def initial_eps(self) -> tuple[np.ndarray, np.ndarray]:
        """Prior means, with pinned rates already substituted."""
        eps_hh = self.prior_a_hh / (self.prior_a_hh + self.prior_b_hh)
        eps_ind = self.prior_a_ind / (self.prior_a_ind + self.prior_b_ind)
        if self.fixed_hh is not None:
            pin = ~np.isnan(self.fixed_hh)
            eps_hh[pin] = self.fixed_hh[pin]
        if self.fixed_ind is not None:
            pin = ~np.isnan(self.fixed_ind)
            eps_ind[pin] = self.fixed_ind[pin]
        return eps_hh, eps_ind


@dataclass
class ErrorState:
    """Grouped-by-size error indicators plus the current error rates."""

    z: dict[int, np.ndarray]  # size -> (n_h,) bool
    e_hh: dict[int, np.ndarray]  # size -> (n_h, q) bool
    e_ind: dict[int, np.ndarray]  # size -> (n_h, h, p) bool
    eps_hh: np.ndarray
    eps_ind: np.ndarray


def sample_error_locations(
    z: int,
    eps_hh: np.ndarray,
    eps_ind: np.ndarray,
    prone_hh: np.ndarray,
    prone_ind: np.ndarray,
    size: int,
    rng,
) -> tuple[np.ndarray, np.ndarray]:
    """Error indicators for one household: all zero when z = 0, else
    independent Bernoulli(eps_k) on the error-prone cells."""
    q, p = eps_hh.shape[0], eps_ind.shape[0]
    e_hh = np.zeros(q, dtype=bool)
    e_ind = np.zeros((size, p), dtype=bool)
    if not z:
        return e_hh, e_ind
    e_hh[:] = (rng.random(q) < eps_hh) & prone_hh
    e_ind[:, :] = (rng.random((size, p)) < eps_ind[None, :]) & prone_ind[None, :]
    return e_hh, e_ind


def epsilon_counts(
    state: ErrorState,
    missing_hh: dict[int, np.ndarray] | None = None,
    missing_ind: dict[int, np.ndarray] | None = None,
    count_missing: bool = True,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Per-variable error and non-error cell counts over flagged households.

    Household-level variables contribute one cell per flagged household,
    individual-level ones a cell per member.  With ``count_missing=False``
    missing cells drop out of both tallies (they always have e = 1, so the
    non-error side never included them).
    """
    q = state.eps_hh.shape[0]
    p = state.eps_ind.shape[0]
    a_hh = np.zeros(q, dtype=np.int64)
    b_hh = np.zeros(q, dtype=np.int64)
    a_ind = np.zeros(p, dtype=np.int64)
    b_ind = np.zeros(p, dtype=np.int64)
    for h, z in state.z.items():
        if not z.any():
            continue
        flagged = np.flatnonzero(z)
        e_hh = state.e_hh[h][flagged]
        e_ind = state.e_ind[h][flagged]
        a_cells_hh = e_hh.sum(axis=0)
        a_cells_ind = e_ind.sum(axis=(0, 1))
        if not count_missing:
            if missing_hh is None or missing_ind is None:
                raise MeasurementError("count_missing=False needs the missing-cell masks")
            a_cells_hh = a_cells_hh - (e_hh & missing_hh[h][flagged]).sum(axis=0)
            a_cells_ind = a_cells_ind - (e_ind & missing_ind[h][flagged]).sum(axis=(0, 1))
        a_hh += a_cells_hh.astype(np.int64)
        b_hh += (~e_hh).sum(axis=0).astype(np.int64)
        a_ind += a_cells_ind.astype(np.int64)
        b_ind += (~e_ind).sum(axis=(0, 1)).astype(np.int64)
    return a_hh, b_hh, a_ind, b_ind


def update_epsilon(
    state: ErrorState,
    config: ErrorModelConfig,
    rng,
    missing_hh: dict[int, np.ndarray] | None = None,
    missing_ind: dict[int, np.ndarray] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Conjugate Beta draw of every per-variable error rate."""
    a_hh, b_hh, a_ind, b_ind = epsilon_counts(
        state, missing_hh, missing_ind, count_missing=config.count_missing
    )
    eps_hh = rng.beta(config.prior_a_hh + a_hh, config.prior_b_hh + b_hh)
    eps_ind = rng.beta(config.prior_a_ind + a_ind, config.prior_b_ind + b_ind)
    if config.fixed_hh is not None:
        pin = ~np.isnan(config.fixed_hh)
        eps_hh[pin] = config.fixed_hh[pin]
    if config.fixed_ind is not None:
        pin = ~np.isnan(config.fixed_ind)
        eps_ind[pin] = config.fixed_ind[pin]
    return eps_hh, eps_ind

"""Estimand queries, multiple-imputation pooling, and evaluation reports.

Queries are proportions: marginal/bivariate/trivariate category cells, or
household-level predicates written in the edit-rule expression language.
Cell queries over household-level variables (and predicates) average over
households; any query touching an individual-level variable averages over
individuals, with household values broadcast to each member.  Pooling
follows the standard combining rules: the total variance is the
within-imputation mean plus (1 + 1/L) times the between-imputation
variance, with the usual large-sample degrees of freedom.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np
from scipy import stats

from .data import Dataset
from .rules import Rule, parse_predicate
from .schema import HOUSEHOLD, Schema


class AnalysisError(ValueError):
    pass


@dataclass
class EstimandQuery:
    kind: str  # marginal | bivariate | trivariate | predicate
    name: str
    cells: tuple[tuple[str, int], ...] = ()
    predicate: Rule | None = None

    @classmethod
    def marginal(cls, variable: str, category: int) -> "EstimandQuery":
        return cls("marginal", f"marginal:{variable}:{category}", ((variable, category),))

    @classmethod
    def cell(cls, *pairs: tuple[str, int]) -> "EstimandQuery":
        kind = {1: "marginal", 2: "bivariate", 3: "trivariate"}[len(pairs)]
        name = kind + "".join(f":{v}:{c}" for v, c in pairs)
        return cls(kind, name, tuple(pairs))

    @classmethod
    def household_predicate(cls, name: str, text: str, schema: Schema) -> "EstimandQuery":
        return cls("predicate", name, predicate=parse_predicate(text, schema, name=name))


@dataclass
class MIResult:
    estimate: float  # pooled point estimate
    within: float  # mean within-imputation variance
    between: float  # between-imputation variance
    total: float
    df: float
    ci_low: float
    ci_high: float
    n_imputations: int


def evaluate_query(dataset: Dataset, query: EstimandQuery) -> tuple[float, float]:
    """Proportion and its sampling variance p(1-p)/units on a complete dataset."""
    if not dataset.fully_observed():
        raise AnalysisError("queries need a complete dataset; impute first")
    schema = dataset.schema
    groups = dataset.groups()

    if query.kind == "predicate":
        hits = total = 0
        for grp in groups.values():
            mask = query.predicate.fire_mask(grp.hh, grp.ind)
            hits += int(mask.sum())
            total += mask.size
    else:
        levels = [schema.require(v).level for v, _ in query.cells]
        for variable, category in query.cells:
            var = schema.require(variable)
            if not (1 <= category <= var.cardinality):
                raise AnalysisError(f"category {category} outside 1..{var.cardinality} for {variable}")
        if all(level == HOUSEHOLD for level in levels):
            hits = total = 0
            for grp in groups.values():
                mask = np.ones(grp.hh.shape[0], dtype=bool)
                for variable, category in query.cells:
                    mask &= grp.hh[:, schema.hh_position(variable)] == category
                hits += int(mask.sum())
                total += mask.size
        else:
            hits = total = 0
            for grp in groups.values():
                h = grp.ind.shape[1]
                mask = np.ones((grp.hh.shape[0], h), dtype=bool)
                for variable, category in query.cells:
                    if schema.require(variable).level == HOUSEHOLD:
                        mask &= (grp.hh[:, schema.hh_position(variable)] == category)[:, None]
                    else:
                        mask &= grp.ind[:, :, schema.ind_position(variable)] == category
                hits += int(mask.sum())
                total += mask.size
    if total == 0:
        raise AnalysisError("query has no units to average over")
    p = hits / total
    return p, p * (1.0 - p) / total


def rubin_combine(estimates: Iterable[float], variances: Iterable[float]) -> MIResult:
    """Pool per-imputation estimates and variances into one interval."""
    q = np.asarray(list(estimates), dtype=float)
    u = np.asarray(list(variances), dtype=float)
    L = q.size
    if L < 2 or u.size != L:
        raise AnalysisError("pooling needs at least two matched estimates and variances")
    qbar = float(q.mean())
    ubar = float(u.mean())
    b = 0.0 if q.max() == q.min() else float(q.var(ddof=1))
    total = ubar + (1.0 + 1.0 / L) * b
    if b == 0.0:
        df = math.inf
        half = 1.959963984540054 * math.sqrt(ubar)
    else:
        df = (L - 1) * (1.0 + ubar / ((1.0 + 1.0 / L) * b)) ** 2
        half = float(stats.t.ppf(0.975, df)) * math.sqrt(total)
    return MIResult(
        estimate=qbar,
        within=ubar,
        between=b,
        total=total,
        df=df,
        ci_low=qbar - half,
        ci_high=qbar + half,
        n_imputations=L,
    )


def pool_query(imputed: list[Dataset], query: EstimandQuery) -> MIResult:
    pairs = [evaluate_query(ds, query) for ds in imputed]
    return rubin_combine([p for p, _ in pairs], [v for _, v in pairs])


# ---------------------------------------------------------------------------
# Query batteries

def marginal_battery(schema: Schema) -> list[EstimandQuery]:
    out = []
    for var in schema.variables:
        for c in range(1, var.cardinality + 1):
            out.append(EstimandQuery.cell((var.name, c)))
    return out


def bivariate_battery(schema: Schema) -> Iterator[EstimandQuery]:
    names = [v.name for v in schema.variables]
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            vi, vj = schema.variables[i], schema.variables[j]
            for ci in range(1, vi.cardinality + 1):
                for cj in range(1, vj.cardinality + 1):
                    yield EstimandQuery.cell((vi.name, ci), (vj.name, cj))


def trivariate_battery(schema: Schema) -> Iterator[EstimandQuery]:
    """Lazily streamed; the full battery is far too large to materialize."""
    n = len(schema.variables)
    for i in range(n):
        for j in range(i + 1, n):
            for k in range(j + 1, n):
                vi, vj, vk = schema.variables[i], schema.variables[j], schema.variables[k]
                for ci in range(1, vi.cardinality + 1):
                    for cj in range(1, vj.cardinality + 1):
                        for ck in range(1, vk.cardinality + 1):
                            yield EstimandQuery.cell(
                                (vi.name, ci), (vj.name, cj), (vk.name, ck)
                            )


def parse_query_file(text: str, schema: Schema) -> list[EstimandQuery]:
    """One query per line: ``marginal Var cat``, ``bivariate V1 c1 V2 c2``,
    ``trivariate ...``, ``predicate name: <expression>``, or
    ``battery marginal|bivariate|trivariate``."""
    queries: list[EstimandQuery] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        head, _, rest = line.partition(" ")
        try:
            if head == "battery":
                battery = {
                    "marginal": marginal_battery,
                    "bivariate": bivariate_battery,
                    "trivariate": trivariate_battery,
                }[rest.strip()]
                queries.extend(battery(schema))
            elif head in ("marginal", "bivariate", "trivariate"):
                tokens = rest.split()
                expected = {"marginal": 2, "bivariate": 4, "trivariate": 6}[head]
                if len(tokens) != expected:
                    raise AnalysisError(f"{head} takes {expected // 2} variable/category pairs")
                pairs = tuple(
                    (tokens[i], int(tokens[i + 1])) for i in range(0, len(tokens), 2)
                )
                for variable, _ in pairs:
                    schema.require(variable)
                queries.append(EstimandQuery.cell(*pairs))
            elif head == "predicate":
                name, _, expr = rest.partition(":")
                if not expr.strip():
                    raise AnalysisError("predicate needs 'name: expression'")
                queries.append(
                    EstimandQuery.household_predicate(name.strip(), expr.strip(), schema)
                )
            else:
                raise AnalysisError(f"unknown query kind {head!r}")
        except (KeyError, ValueError) as exc:
            raise AnalysisError(f"query file line {lineno}: {exc}") from exc
    return queries


# ---------------------------------------------------------------------------
# Evaluation report

@dataclass
class ReportRow:
    name: str
    kind: str
    truth: float
    estimate: float
    ci_low: float
    ci_high: float
    covered: bool
    abs_dev: float


@dataclass
class Report:
    rows: list[ReportRow]
    summary: dict[str, dict[str, float]] = field(default_factory=dict)

    def build_summary(self):
        self.summary = {}
        for kind in sorted({r.kind for r in self.rows}):
            devs = [r.abs_dev for r in self.rows if r.kind == kind]
            cover = [r.covered for r in self.rows if r.kind == kind]
            self.summary[kind] = {
                "count": float(len(devs)),
                "max_abs_dev": float(max(devs)),
                "mean_abs_dev": float(np.mean(devs)),
                "coverage": float(np.mean(cover)),
            }
        return self


def evaluation_report(
    imputed: list[Dataset], truth: Dataset, queries: Iterable[EstimandQuery]
) -> Report:
    """Per-query truth value, pooled estimate, interval, and coverage flag."""
    for ds in imputed:
        if ds.schema is not truth.schema and ds.schema.serialize() != truth.schema.serialize():
            raise AnalysisError("imputed datasets and truth use different schemas")
    rows = []
    for query in queries:
        target, _ = evaluate_query(truth, query)
        pooled = pool_query(imputed, query)
        rows.append(
            ReportRow(
                name=query.name,
                kind=query.kind,
                truth=target,
                estimate=pooled.estimate,
                ci_low=pooled.ci_low,
                ci_high=pooled.ci_high,
                covered=pooled.ci_low <= target <= pooled.ci_high,
                abs_dev=abs(pooled.estimate - target),
            )
        )
    return Report(rows).build_summary()

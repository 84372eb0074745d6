"""Command-line pipeline: validate, contaminate, fit, analyze, synthesize.

Exit codes: 0 on success, 2 on any validation or configuration failure,
3 on a sampler diagnostic failure (a rejection loop exhausted its cap).
"""
from __future__ import annotations

import argparse
import csv
import glob
import io
import os
import sys

import numpy as np

from .analyze import (
    AnalysisError,
    bivariate_battery,
    marginal_battery,
    parse_query_file,
    pool_query,
    trivariate_battery,
)
from .config import RunConfig, load_config
from .contaminate import ContaminationError, GroundTruth, blank_missing, inject_errors, pram
from .data import MISSING, DataError, Dataset, read_microdata, write_microdata
from .gibbs import ConfigError, derive_flags, run_gibbs
from .measurement import MeasurementError
from .model import AttemptCapExceeded, ModelError, load_params, save_params, synthesize_households
from .rules import RuleError, parse_rules
from .schema import SchemaError, load_schema
from .util import substream

_USER_ERRORS = (
    SchemaError,
    RuleError,
    DataError,
    ConfigError,
    ContaminationError,
    AnalysisError,
    MeasurementError,
    ModelError,
    FileNotFoundError,
)


def _read_text(path: str) -> str:
    with io.open(path, "r", encoding="utf-8") as fh:
        return fh.read()


def _load_inputs(args, need_rules=True, need_data=False):
    schema = load_schema(args.schema)
    ruleset = parse_rules(_read_text(args.rules), schema) if need_rules else None
    dataset = None
    if getattr(args, "data", None):
        dataset = read_microdata(args.data, schema)
    elif need_data:
        raise DataError("this command needs --data")
    return schema, ruleset, dataset


def _config_for(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.fit.seed = args.seed
    if getattr(args, "threads", None):
        cfg.threads = args.threads
        cfg.fit.threads = args.threads
    return cfg


def _out_path(args, name: str) -> str:
    os.makedirs(args.out_dir, exist_ok=True)
    return os.path.join(args.out_dir, name)


# ---------------------------------------------------------------------------
# Commands

def cmd_validate(args) -> int:
    schema, ruleset, dataset = _load_inputs(args)
    print(f"schema: {schema.q} household and {schema.p} individual variables, sizes {list(schema.sizes)}")
    print(f"rules: {len(ruleset)} compiled, all sizes satisfiable")
    if dataset is None:
        return 0
    n = len(dataset)
    print(f"data: {n} households, {dataset.n_individuals} individual records")
    counts = {rid: 0 for rid in ruleset.rule_ids}
    flagged = 0
    for h, grp in dataset.groups().items():
        z = derive_flags(grp.hh, grp.ind, ruleset)
        flagged += int(z.sum())
        observed = ~((grp.hh == MISSING).any(axis=1) | (grp.ind == MISSING).any(axis=(1, 2)))
        rows = np.flatnonzero(observed)
        if rows.size:
            fired = ruleset.violation_matrix(grp.hh[rows], grp.ind[rows])
            for r, rid in enumerate(ruleset.rule_ids):
                counts[rid] += int(fired[r].sum())
    print(f"flagged households (violating or missing): {flagged} ({flagged / n:.1%})")
    for rid, cnt in counts.items():
        print(f"  rule {rid}: {cnt} violations")
    total_cells = {v.name: 0 for v in schema.variables}
    missing_cells = {v.name: 0 for v in schema.variables}
    for record in dataset.households:
        for k, var in enumerate(schema.household_vars):
            total_cells[var.name] += 1
            missing_cells[var.name] += int(record.hh[k] == MISSING)
        for k, var in enumerate(schema.individual_vars):
            total_cells[var.name] += record.size
            missing_cells[var.name] += int((record.ind[:, k] == MISSING).sum())
    for name in total_cells:
        if missing_cells[name]:
            print(f"  missing {name}: {missing_cells[name] / total_cells[name]:.1%}")
    return 0


def _write_truth(truth: GroundTruth, contaminated: Dataset, path: str) -> None:
    schema = truth.original.schema
    with io.open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["household_id", "person_index", "variable", "kind", "original"])
        for pos, hid in enumerate(truth.original.ids):
            if truth.z[pos]:
                writer.writerow([hid, "", "", "flagged", ""])
            orig = truth.original.households[pos]
            cont = contaminated.households[pos]
            for k, var in enumerate(schema.household_vars):
                if truth.e_hh[pos][k]:
                    writer.writerow([hid, 0, var.name, "error", int(orig.hh[k])])
                if cont.hh[k] == MISSING:
                    writer.writerow([hid, 0, var.name, "missing", int(orig.hh[k])])
            for j in range(orig.size):
                for k, var in enumerate(schema.individual_vars):
                    if truth.e_ind[pos][j, k]:
                        writer.writerow([hid, j + 1, var.name, "error", int(orig.ind[j, k])])
                    if cont.ind[j, k] == MISSING:
                        writer.writerow([hid, j + 1, var.name, "missing", int(orig.ind[j, k])])


def cmd_contaminate(args) -> int:
    schema, ruleset, dataset = _load_inputs(args, need_data=True)
    cfg = _config_for(args)
    contaminated, truth = inject_errors(
        dataset, cfg.contaminate, ruleset, substream(cfg.seed, 101)
    )
    if cfg.contaminate.missing_rates:
        contaminated = blank_missing(contaminated, cfg.contaminate, substream(cfg.seed, 102))
    if cfg.pram_keep is not None:
        contaminated = pram(contaminated, cfg.pram_keep, substream(cfg.seed, 103))
    write_microdata(contaminated, _out_path(args, "contaminated.csv"))
    _write_truth(truth, contaminated, _out_path(args, "truth.csv"))
    print(f"contaminated {int(truth.z.sum())} of {len(dataset)} households")
    return 0


def cmd_fit(args) -> int:
    schema, ruleset, dataset = _load_inputs(args, need_data=True)
    cfg = _config_for(args)
    result = run_gibbs(dataset, ruleset, cfg.fit)
    width = len(str(len(result.imputed)))
    for i, imp in enumerate(result.imputed, start=1):
        write_microdata(imp, _out_path(args, f"imputed_{i:0{width}d}.csv"))
    with io.open(_out_path(args, "traces.csv"), "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["iteration", "name", "value"])
        for it, name, value in result.traces:
            writer.writerow([it, name, repr(float(value))])
    save_params(result.params, schema, _out_path(args, "params.npz"))
    with io.open(_out_path(args, "summary.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"households: {len(dataset)}\n")
        fh.write(f"flagged: {result.flagged}\n")
        fh.write(f"imputed datasets: {len(result.imputed)}\n")
        occ_h, occ_m = result.occupancy["household"], result.occupancy["member"]
        fh.write(f"occupied household classes (post burn-in): {occ_h[0]}..{occ_h[1]} of {cfg.fit.F}\n")
        fh.write(f"occupied member classes (post burn-in): {occ_m[0]}..{occ_m[1]} of {cfg.fit.S}\n")
    print(
        f"fit complete: {len(result.imputed)} imputed datasets, "
        f"occupancy {result.occupancy['household']}/{result.occupancy['member']}"
    )
    return 0


def cmd_analyze(args) -> int:
    schema = load_schema(args.schema)
    cfg = _config_for(args)
    pattern = cfg.analyze.imputed
    if not os.path.isabs(pattern):
        pattern = os.path.join(cfg.base_dir, pattern)
    paths = sorted(glob.glob(pattern))
    if len(paths) < 2:
        raise AnalysisError(f"need at least two imputed files matching {pattern!r}")
    imputed = [read_microdata(p, schema) for p in paths]

    queries = []
    if cfg.analyze.queries:
        qpath = cfg.analyze.queries
        if not os.path.isabs(qpath):
            qpath = os.path.join(cfg.base_dir, qpath)
        queries.extend(parse_query_file(_read_text(qpath), schema))
    for battery in cfg.analyze.batteries:
        maker = {
            "marginal": marginal_battery,
            "bivariate": bivariate_battery,
            "trivariate": trivariate_battery,
        }.get(battery)
        if maker is None:
            raise AnalysisError(f"unknown battery {battery!r}")
        queries.extend(maker(schema))
    if not queries:
        raise AnalysisError("no queries configured; set analyze.queries or analyze.batteries")

    truth = read_microdata(args.data, schema) if args.data else None
    out = _out_path(args, "report.csv")
    with io.open(out, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if truth is None:
            writer.writerow(["name", "kind", "estimate", "ci_low", "ci_high"])
            for query in queries:
                pooled = pool_query(imputed, query)
                writer.writerow(
                    [query.name, query.kind, pooled.estimate, pooled.ci_low, pooled.ci_high]
                )
            print(f"wrote {out} ({len(queries)} queries, no truth data given)")
            return 0
        from .analyze import evaluation_report

        report = evaluation_report(imputed, truth, queries)
        writer.writerow(
            ["name", "kind", "truth", "estimate", "ci_low", "ci_high", "covered", "abs_dev"]
        )
        for row in report.rows:
            writer.writerow(
                [row.name, row.kind, row.truth, row.estimate, row.ci_low, row.ci_high,
                 int(row.covered), row.abs_dev]
            )
    with io.open(_out_path(args, "summary.txt"), "w", encoding="utf-8") as fh:
        for kind, entry in report.summary.items():
            fh.write(
                f"{kind}: n={int(entry['count'])} max_abs_dev={entry['max_abs_dev']:.4f} "
                f"mean_abs_dev={entry['mean_abs_dev']:.4f} coverage={entry['coverage']:.3f}\n"
            )
    print(f"wrote {out} ({len(report.rows)} queries)")
    return 0


def cmd_synthesize(args) -> int:
    schema, ruleset, _ = _load_inputs(args)
    cfg = _config_for(args)
    ckpt = cfg.synthesize.checkpoint
    if not os.path.isabs(ckpt):
        candidate = os.path.join(cfg.base_dir, ckpt)
        ckpt = candidate if os.path.exists(candidate) else ckpt
    params = load_params(ckpt, schema)
    households = synthesize_households(
        params,
        schema,
        ruleset,
        cfg.synthesize.n,
        substream(cfg.seed, 104),
        max_attempts=cfg.synthesize.attempt_cap,
    )
    out = Dataset(schema, households)
    write_microdata(out, _out_path(args, "synthetic.csv"))
    print(f"wrote {cfg.synthesize.n} synthetic households")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hhedit",
        description="Edit-imputation engine for household-nested categorical microdata",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=False, rules=True, config=False, out=False):
        p.add_argument("--schema", required=True, help="schema YAML file")
        if rules:
            p.add_argument("--rules", required=True, help="edit rules file")
        if data is not None:
            p.add_argument("--data", required=data, help="microdata CSV")
        if config:
            p.add_argument("--config", help="run configuration YAML")
        if out:
            p.add_argument("--out-dir", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the configured seed")
        p.add_argument("--threads", type=int, default=None, help="worker threads")

    p = sub.add_parser("validate", help="check schema, rules, and optionally data")
    common(p)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("contaminate", help="inject detectable errors and blank values")
    common(p, data=True, config=True, out=True)
    p.set_defaults(func=cmd_contaminate)

    p = sub.add_parser("fit", help="run the sampler and emit imputed datasets")
    common(p, data=True, config=True, out=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("analyze", help="pool estimands over imputed datasets")
    common(p, data=False, rules=False, config=True, out=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("synthesize", help="generate rule-satisfying households from a checkpoint")
    common(p, data=None, config=True, out=True)
    p.set_defaults(func=cmd_synthesize)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except AttemptCapExceeded as exc:
        print(f"sampler diagnostic failure: {exc}", file=sys.stderr)
        if exc.rule_hits:
            for rid, cnt in sorted(exc.rule_hits.items(), key=lambda kv: -kv[1]):
                if cnt:
                    print(f"  rejections by rule {rid}: {cnt}", file=sys.stderr)
        return 3
    except _USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

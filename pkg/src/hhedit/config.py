"""One run-configuration file for every command, with per-command sections.

Top level: ``seed`` and ``threads``.  Sections: ``fit`` (sampler settings),
``contaminate`` (error injection, blanking, PRAM), ``synthesize``
(checkpoint and count), ``analyze`` (imputed-file glob, query file or
batteries).  Every sampler default is overridable here.
"""
from __future__ import annotations

import io
import os
from dataclasses import dataclass, field, fields

import yaml

from .contaminate import ContaminationSpec
from .gibbs import ConfigError, GibbsConfig
from .model import Hyperparams


@dataclass
class SynthesizeConfig:
    n: int = 1000
    checkpoint: str = "params.npz"
    attempt_cap: int = 100_000_000


@dataclass
class AnalyzeConfig:
    imputed: str = "imputed_*.csv"  # glob, relative to the config file
    queries: str | None = None  # query file path
    batteries: list[str] = field(default_factory=list)


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 1
    fit: GibbsConfig = field(default_factory=GibbsConfig)
    contaminate: ContaminationSpec = field(default_factory=ContaminationSpec)
    synthesize: SynthesizeConfig = field(default_factory=SynthesizeConfig)
    analyze: AnalyzeConfig = field(default_factory=AnalyzeConfig)
    pram_keep: float | None = None
    base_dir: str = "."


def _build(cls, section: dict, name: str):
    allowed = {f.name for f in fields(cls)}
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in [{name}]: {sorted(unknown)}")
    return cls(**section)


def load_config(source, base_dir: str | None = None) -> RunConfig:
    """Parse a YAML run configuration (path, text, or open file)."""
    if hasattr(source, "read"):
        text = source.read()
    else:
        text = str(source)
        looks_like_path = "\n" not in text and (
            os.path.exists(text) or text.endswith((".yaml", ".yml"))
        )
        if looks_like_path:
            base_dir = base_dir or os.path.dirname(os.path.abspath(text))
            with io.open(text, "r", encoding="utf-8") as fh:
                text = fh.read()
    try:
        doc = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"configuration does not parse: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a mapping")

    cfg = RunConfig(base_dir=base_dir or ".")
    cfg.seed = int(doc.pop("seed", 0))
    cfg.threads = int(doc.pop("threads", 0) or _default_threads())
    cfg.pram_keep = doc.pop("pram_keep", None)
    if cfg.pram_keep is not None:
        cfg.pram_keep = float(cfg.pram_keep)

    fit = dict(doc.pop("fit", {}) or {})
    if "psi" in fit and isinstance(fit["psi"], dict):
        fit["psi"] = {int(k): float(v) for k, v in fit["psi"].items()}
    if "hyper" in fit:
        fit["hyper"] = _build(Hyperparams, dict(fit["hyper"]), "fit.hyper")
    if "trace_probs" in fit:
        fit["trace_probs"] = tuple(fit["trace_probs"])
    fit.setdefault("seed", cfg.seed)
    fit.setdefault("threads", cfg.threads)
    cfg.fit = _build(GibbsConfig, fit, "fit")

    cont = dict(doc.pop("contaminate", {}) or {})
    cfg.contaminate = _build(ContaminationSpec, cont, "contaminate")
    cfg.synthesize = _build(SynthesizeConfig, dict(doc.pop("synthesize", {}) or {}), "synthesize")
    cfg.analyze = _build(AnalyzeConfig, dict(doc.pop("analyze", {}) or {}), "analyze")
    if doc:
        raise ConfigError(f"unknown top-level configuration keys: {sorted(doc)}")
    return cfg


def _default_threads() -> int:
    env = os.environ.get("HHEDIT_THREADS", "").strip()
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"HHEDIT_THREADS must be an integer, got {env!r}") from None
    return 1

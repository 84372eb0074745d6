"""Bundled example schema, rules, and configuration."""
from importlib import resources as _resources

from ..rules import RuleSet, parse_rules
from ..schema import Schema, load_schema


def _read(name: str) -> str:
    return _resources.files(__package__).joinpath(name).read_text(encoding="utf-8")


def example_schema() -> Schema:
    """The bundled census-style 11-variable schema."""
    return load_schema(_read("acs_schema.yaml"))


def default_acs_rules(schema: Schema | None = None) -> RuleSet:
    """The documented exemplary rule set over ages, genders, and
    relationship-to-head, compiled against the bundled schema (or a
    compatible caller-supplied one)."""
    return parse_rules(_read("acs_rules.txt"), schema or example_schema())


def example_config_text() -> str:
    return _read("acs_config.yaml")

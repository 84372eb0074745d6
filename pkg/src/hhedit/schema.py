"""Variable catalogue: household/individual variables, category spaces, allowed sizes.

A schema declares q household-level and p individual-level categorical
variables.  Category codes are 1-based integers 1..d_k everywhere; label
strings are presentation-only.  One household-level variable is designated
the household-size variable; its category codes map bijectively onto the
set of allowed household sizes, where "size" means the number of
individual-level records a household carries.  Schemas that keep the
household head's characteristics at household level mark each such
variable with ``head_of: <individual variable>`` so that edit rules can
refer to the head.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from functools import cached_property

import yaml

HOUSEHOLD = "household"
INDIVIDUAL = "individual"


class SchemaError(ValueError):
    """Raised when a schema document is malformed or inconsistent."""


@dataclass(frozen=True)
class Variable:
    name: str
    level: str
    cardinality: int
    labels: tuple[str, ...] | None = None
    ordered: bool = False
    head_of: str | None = None

    def __post_init__(self):
        if self.level not in (HOUSEHOLD, INDIVIDUAL):
            raise SchemaError(f"variable {self.name!r}: level must be household or individual")
        if self.cardinality < 2:
            raise SchemaError(f"variable {self.name!r}: cardinality must be >= 2")
        if self.labels is not None and len(self.labels) != self.cardinality:
            raise SchemaError(
                f"variable {self.name!r}: {len(self.labels)} labels for {self.cardinality} categories"
            )

    def label_code(self, label: str) -> int:
        """1-based code for a label string."""
        if self.labels is None:
            raise SchemaError(f"variable {self.name!r} has no labels")
        try:
            return self.labels.index(label) + 1
        except ValueError:
            raise SchemaError(f"variable {self.name!r} has no category labelled {label!r}") from None


@dataclass(frozen=True)
class Schema:
    variables: tuple[Variable, ...]
    sizes: tuple[int, ...]
    size_variable: str
    size_map: dict[int, int] = field(default_factory=dict)  # category code -> size

    def __post_init__(self):
        names = [v.name for v in self.variables]
        dupes = {n for n in names if names.count(n) > 1}
        if dupes:
            raise SchemaError(f"duplicate variable names: {sorted(dupes)}")
        if not self.sizes or any(h < 1 for h in self.sizes):
            raise SchemaError("allowed sizes must be positive integers")
        if len(set(self.sizes)) != len(self.sizes):
            raise SchemaError("allowed sizes contain duplicates")
        object.__setattr__(self, "sizes", tuple(sorted(self.sizes)))
        if self.size_variable not in names:
            raise SchemaError(f"size variable {self.size_variable!r} is not declared")
        sv = self.variables[names.index(self.size_variable)]
        if sv.level != HOUSEHOLD:
            raise SchemaError("size variable must be household-level")
        if not self.size_map:
            object.__setattr__(self, "size_map", {c + 1: h for c, h in enumerate(self.sizes)})
        if sorted(self.size_map.keys()) != list(range(1, sv.cardinality + 1)):
            raise SchemaError("size_map must cover category codes 1..d_k of the size variable")
        if sorted(self.size_map.values()) != list(self.sizes):
            raise SchemaError("size_map must map categories bijectively onto the allowed sizes")
        if self.q < 1 or self.p < 1:
            raise SchemaError("schema needs at least one household and one individual variable")
        for v in self.variables:
            if v.head_of is not None:
                if v.level != HOUSEHOLD:
                    raise SchemaError(f"head_of only applies to household variables ({v.name})")
                target = self.find(v.head_of)
                if target is None or target.level != INDIVIDUAL:
                    raise SchemaError(
                        f"variable {v.name!r}: head_of target {v.head_of!r} is not an individual variable"
                    )
                if target.cardinality != v.cardinality:
                    raise SchemaError(
                        f"variable {v.name!r}: cardinality differs from head_of target {v.head_of!r}"
                    )

    @cached_property
    def household_vars(self) -> tuple[Variable, ...]:
        return tuple(v for v in self.variables if v.level == HOUSEHOLD)

    @cached_property
    def individual_vars(self) -> tuple[Variable, ...]:
        return tuple(v for v in self.variables if v.level == INDIVIDUAL)

    @property
    def q(self) -> int:
        return len(self.household_vars)

    @property
    def p(self) -> int:
        return len(self.individual_vars)

    @cached_property
    def size_index(self) -> int:
        """Position of the size variable among household variables."""
        return [v.name for v in self.household_vars].index(self.size_variable)

    def find(self, name: str) -> Variable | None:
        for v in self.variables:
            if v.name == name:
                return v
        return None

    def require(self, name: str) -> Variable:
        v = self.find(name)
        if v is None:
            raise SchemaError(f"unknown variable {name!r}")
        return v

    def hh_position(self, name: str) -> int:
        for i, v in enumerate(self.household_vars):
            if v.name == name:
                return i
        raise SchemaError(f"{name!r} is not a household variable")

    def ind_position(self, name: str) -> int:
        for i, v in enumerate(self.individual_vars):
            if v.name == name:
                return i
        raise SchemaError(f"{name!r} is not an individual variable")

    def head_counterpart(self, individual_name: str) -> Variable | None:
        for v in self.household_vars:
            if v.head_of == individual_name:
                return v
        return None

    def size_for_code(self, code: int) -> int:
        try:
            return self.size_map[int(code)]
        except KeyError:
            raise SchemaError(f"size code {code} outside the declared size map") from None

    def code_for_size(self, h: int) -> int:
        for code, size in self.size_map.items():
            if size == h:
                return code
        raise SchemaError(f"household size {h} is not an allowed size")

    def serialize(self) -> str:
        doc = {
            "sizes": list(self.sizes),
            "size_map": {int(k): int(v) for k, v in sorted(self.size_map.items())},
            "variables": [],
        }
        for v in self.variables:
            entry: dict = {"name": v.name, "level": v.level, "cardinality": v.cardinality}
            if v.name == self.size_variable:
                entry["role"] = "size"
            if v.labels is not None:
                entry["labels"] = list(v.labels)
            if v.ordered:
                entry["ordered"] = True
            if v.head_of is not None:
                entry["head_of"] = v.head_of
            doc["variables"].append(entry)
        return yaml.safe_dump(doc, sort_keys=False)


def load_schema(source) -> Schema:
    """Parse a schema document (YAML text, path, or open file)."""
    if hasattr(source, "read"):
        text = source.read()
    else:
        text = str(source)
        if "\n" not in text and (text.endswith((".yaml", ".yml")) or "/" in text):
            with io.open(text, "r", encoding="utf-8") as fh:
                text = fh.read()
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise SchemaError(f"schema document does not parse: {exc}") from exc
    if not isinstance(doc, dict) or "variables" not in doc or "sizes" not in doc:
        raise SchemaError("schema document needs 'variables' and 'sizes' entries")

    variables = []
    size_name = None
    for entry in doc["variables"]:
        if not isinstance(entry, dict) or "name" not in entry:
            raise SchemaError(f"malformed variable entry: {entry!r}")
        try:
            card = int(entry.get("cardinality"))
        except (TypeError, ValueError):
            raise SchemaError(f"variable {entry['name']!r}: cardinality must be an integer") from None
        labels = entry.get("labels")
        variables.append(
            Variable(
                name=str(entry["name"]),
                level=str(entry.get("level", "")),
                cardinality=card,
                labels=tuple(str(x) for x in labels) if labels is not None else None,
                ordered=bool(entry.get("ordered", False)),
                head_of=entry.get("head_of"),
            )
        )
        if entry.get("role") == "size":
            if size_name is not None:
                raise SchemaError("more than one variable declared with role: size")
            size_name = variables[-1].name
    if size_name is None:
        raise SchemaError("no variable declared with role: size")

    size_map = {}
    if "size_map" in doc:
        size_map = {int(k): int(v) for k, v in doc["size_map"].items()}
    return Schema(
        variables=tuple(variables),
        sizes=tuple(int(h) for h in doc["sizes"]),
        size_variable=size_name,
        size_map=size_map,
    )


def cell_index(schema: Schema, variable: str, member: int | None = None, size: int | None = None) -> int:
    """Stable flat coordinate of one cell within a household record.

    Household cells occupy 0..q-1 in declaration order; member j's cells
    occupy q + (j-1)*p .. q + j*p - 1.  Bijective for any fixed size.
    """
    var = schema.require(variable)
    if var.level == HOUSEHOLD:
        if member is not None:
            raise SchemaError(f"household variable {variable!r} takes no member index")
        return schema.hh_position(variable)
    if member is None:
        raise SchemaError(f"individual variable {variable!r} needs a member index")
    if member < 1 or (size is not None and member > size):
        raise SchemaError(f"member index {member} outside 1..{size}")
    return schema.q + (member - 1) * schema.p + schema.ind_position(variable)

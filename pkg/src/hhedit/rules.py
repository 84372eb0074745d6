"""Structural-zero rule language: parsing, compilation, and evaluation.

A rules file holds statements of the form::

    rule <id>: forall p: p.Age < 16 and p.Relationship == spouse => violation
    rule <id>: forall (a, b): a.Relationship == spouse and b.Relationship == spouse => violation
    rule <id>: head.Age < 16 => violation

``#`` starts a comment.  A rule fires on a household when its predicate is
true for some binding of the quantified members (any member for ``forall x``,
any ordered pair of distinct members for ``forall (a, b)``); a household
violates the rule set when any rule fires.  References:

* ``<binding>.<Var>``  an individual variable of the bound member,
* ``head.<Var>``       the household-level head counterpart of individual
                       variable ``Var`` (declared via ``head_of``),
* ``<Var>``            a household-level variable.

Comparisons are ``== != < <= > >=`` plus ``in {a, b}`` / ``not in {...}``;
order comparisons and ``+/- <int>`` offsets require variables declared
``ordered``.  Bare identifiers on the constant side resolve against the
compared variable's labels; integer literals are raw 1-based codes.
Evaluation is total on fully observed households and referentially
transparent.
"""
from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .data import MISSING, Household
from .schema import HOUSEHOLD, INDIVIDUAL, Schema

_SATZ_CHECK_SEED = 909_090


class RuleError(ValueError):
    """Raised for rule syntax errors, resolution failures, or misuse."""


# ---------------------------------------------------------------------------
# Tokenizer

_TOKEN_RE = re.compile(
    r"""(?P<ws>[ \t\r]+)
      | (?P<comment>\#[^\n]*)
      | (?P<nl>\n)
      | (?P<op>=>|==|!=|<=|>=|<|>|[(){},.:+\-])
      | (?P<int>\d+)
      | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
    """,
    re.VERBOSE,
)

_KEYWORDS = {"rule", "forall", "and", "or", "not", "in", "violation"}


@dataclass(frozen=True)
class Token:
    kind: str  # "op" | "int" | "ident" | "kw" | "eof"
    value: str
    line: int
    col: int


def _tokenize(text: str) -> list[Token]:
    tokens = []
    line, col, pos = 1, 1, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise RuleError(f"line {line}:{col}: unexpected character {text[pos]!r}")
        kind = m.lastgroup
        value = m.group()
        if kind == "nl":
            line += 1
            col = 1
        elif kind not in ("ws", "comment"):
            tok_kind = "kw" if (kind == "ident" and value in _KEYWORDS) else kind
            tokens.append(Token(tok_kind, value, line, col))
            col += len(value)
        else:
            col += len(value)
        pos = m.end()
    tokens.append(Token("eof", "", line, col))
    return tokens


# ---------------------------------------------------------------------------
# Expression tree

class _Ctx:
    """Evaluation context for one size group."""

    __slots__ = ("hh", "ind", "bindings", "extra")

    def __init__(self, hh: np.ndarray, ind: np.ndarray, bindings: tuple[str, ...]):
        self.hh = hh
        self.ind = ind
        self.bindings = bindings
        self.extra = len(bindings)


@dataclass(frozen=True)
class VarRef:
    level: str  # household / individual
    index: int  # position within household_vars or individual_vars
    binding: str | None
    offset: int = 0
    name: str = ""

    def eval(self, ctx: _Ctx) -> np.ndarray:
        if self.level == HOUSEHOLD:
            arr = ctx.hh[:, self.index]
            arr = arr.reshape(arr.shape[0], *([1] * ctx.extra))
        else:
            base = ctx.ind[:, :, self.index]
            if ctx.extra == 1:
                arr = base
            else:
                axis = ctx.bindings.index(self.binding)
                arr = base[:, :, None] if axis == 0 else base[:, None, :]
        if self.offset:
            return arr.astype(np.int64) + self.offset
        return arr


@dataclass(frozen=True)
class Const:
    value: int

    def eval(self, ctx: _Ctx):
        return np.int64(self.value)


_CMP = {
    "==": np.equal,
    "!=": np.not_equal,
    "<": np.less,
    "<=": np.less_equal,
    ">": np.greater,
    ">=": np.greater_equal,
}


@dataclass(frozen=True)
class Compare:
    op: str
    left: VarRef | Const
    right: VarRef | Const

    def eval(self, ctx: _Ctx) -> np.ndarray:
        return _CMP[self.op](self.left.eval(ctx), self.right.eval(ctx))


@dataclass(frozen=True)
class InSet:
    ref: VarRef
    codes: tuple[int, ...]
    negate: bool

    def eval(self, ctx: _Ctx) -> np.ndarray:
        arr = self.ref.eval(ctx)
        out = np.isin(arr, np.asarray(self.codes))
        return ~out if self.negate else out


@dataclass(frozen=True)
class Not:
    operand: object

    def eval(self, ctx):
        return ~self.operand.eval(ctx)


@dataclass(frozen=True)
class BoolOp:
    op: str  # "and" | "or"
    terms: tuple

    def eval(self, ctx):
        out = self.terms[0].eval(ctx)
        for term in self.terms[1:]:
            out = (out & term.eval(ctx)) if self.op == "and" else (out | term.eval(ctx))
        return out


# ---------------------------------------------------------------------------
# Parser

class _Parser:
    def __init__(self, tokens: list[Token], schema: Schema):
        self.tokens = tokens
        self.schema = schema
        self.pos = 0
        self.bindings: tuple[str, ...] = ()

    def peek(self) -> Token:
        return self.tokens[self.pos]

    def advance(self) -> Token:
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def fail(self, message: str, tok: Token | None = None):
        tok = tok or self.peek()
        raise RuleError(f"line {tok.line}:{tok.col}: {message}")

    def expect(self, kind: str, value: str | None = None) -> Token:
        tok = self.peek()
        if tok.kind != kind or (value is not None and tok.value != value):
            want = value or kind
            self.fail(f"expected {want!r}, found {tok.value!r}")
        return self.advance()

    # statements ------------------------------------------------------------

    def parse_rules(self) -> list["Rule"]:
        rules = []
        while self.peek().kind != "eof":
            self.expect("kw", "rule")
            name = self.expect("ident").value
            self.expect("op", ":")
            rules.append(self.parse_body(name))
        return rules

    def parse_body(self, name: str) -> "Rule":
        kind = "global"
        negate = False
        negated_paren = False
        self.bindings = ()
        # `not forall ...` / `not (forall ...)` negates the whole quantified
        # test, giving "no member/pair satisfies ..." semantics
        start = self.pos
        if self.peek().kind == "kw" and self.peek().value == "not":
            self.advance()
            if self.peek().kind == "op" and self.peek().value == "(":
                self.advance()
                negated_paren = True
            if self.peek().kind == "kw" and self.peek().value == "forall":
                negate = True
            else:
                negated_paren = False
                self.pos = start
        if self.peek().kind == "kw" and self.peek().value == "forall":
            self.advance()
            if self.peek().kind == "op" and self.peek().value == "(":
                self.advance()
                a = self.expect("ident").value
                self.expect("op", ",")
                b = self.expect("ident").value
                self.expect("op", ")")
                if a == b or "head" in (a, b):
                    self.fail("pair bindings must be two distinct names other than 'head'")
                self.bindings = (a, b)
                kind = "pair"
            else:
                a = self.expect("ident").value
                if a == "head":
                    self.fail("'head' is reserved and cannot be bound")
                self.bindings = (a,)
                kind = "person"
            self.expect("op", ":")
        expr = self.parse_or()
        if negated_paren:
            self.expect("op", ")")
        if self.peek().kind == "op" and self.peek().value == "=>":
            self.advance()
            self.expect("kw", "violation")
        return Rule(id=name, kind=kind, bindings=self.bindings, expr=expr, negate=negate)

    # expressions -----------------------------------------------------------

    def parse_or(self):
        terms = [self.parse_and()]
        while self.peek().kind == "kw" and self.peek().value == "or":
            self.advance()
            terms.append(self.parse_and())
        return terms[0] if len(terms) == 1 else BoolOp("or", tuple(terms))

    def parse_and(self):
        terms = [self.parse_not()]
        while self.peek().kind == "kw" and self.peek().value == "and":
            self.advance()
            terms.append(self.parse_not())
        return terms[0] if len(terms) == 1 else BoolOp("and", tuple(terms))

    def parse_not(self):
        if self.peek().kind == "kw" and self.peek().value == "not":
            self.advance()
            return Not(self.parse_not())
        if self.peek().kind == "op" and self.peek().value == "(":
            self.advance()
            expr = self.parse_or()
            self.expect("op", ")")
            return expr
        return self.parse_comparison()

    def parse_comparison(self):
        left_tok = self.peek()
        left = self.parse_operand()
        tok = self.peek()
        if tok.kind == "kw" and tok.value == "in":
            self.advance()
            return self.finish_set(left, left_tok, negate=False)
        if tok.kind == "kw" and tok.value == "not":
            self.advance()
            self.expect("kw", "in")
            return self.finish_set(left, left_tok, negate=True)
        if tok.kind != "op" or tok.value not in _CMP:
            self.fail(f"expected a comparison operator, found {tok.value!r}")
        op = self.advance().value
        right_tok = self.peek()
        right = self.parse_operand()
        return self.finish_compare(op, left, right, left_tok, right_tok)

    def parse_operand(self):
        tok = self.peek()
        if tok.kind == "int":
            self.advance()
            return ("int", int(tok.value), tok)
        if tok.kind == "ident":
            name = self.advance().value
            if self.peek().kind == "op" and self.peek().value == ".":
                self.advance()
                attr = self.expect("ident").value
                ref = self.resolve_ref(name, attr, tok)
            elif self.schema.find(name) is not None:
                var = self.schema.require(name)
                if var.level != HOUSEHOLD:
                    self.fail(f"individual variable {name!r} needs a member binding", tok)
                ref = VarRef(HOUSEHOLD, self.schema.hh_position(name), None, name=name)
            else:
                return ("label", name, tok)
            offset = 0
            if self.peek().kind == "op" and self.peek().value in ("+", "-"):
                sign = -1 if self.advance().value == "-" else 1
                offset = sign * int(self.expect("int").value)
                if not self.ref_variable(ref).ordered:
                    self.fail(f"offset arithmetic needs an ordered variable ({ref.name})", tok)
                ref = VarRef(ref.level, ref.index, ref.binding, offset, ref.name)
            return ("ref", ref, tok)
        self.fail(f"expected a variable, label, or code, found {tok.value!r}")

    def resolve_ref(self, holder: str, attr: str, tok: Token) -> VarRef:
        if holder == "head":
            counterpart = self.schema.head_counterpart(attr)
            if counterpart is None:
                self.fail(f"no household variable declares head_of: {attr}", tok)
            return VarRef(HOUSEHOLD, self.schema.hh_position(counterpart.name), None, name=counterpart.name)
        if holder not in self.bindings:
            self.fail(f"unknown member binding {holder!r}", tok)
        var = self.schema.find(attr)
        if var is None:
            self.fail(f"unknown variable {attr!r}", tok)
        if var.level != INDIVIDUAL:
            self.fail(f"{attr!r} is household-level; reference it without a binding", tok)
        return VarRef(INDIVIDUAL, self.schema.ind_position(attr), holder, name=attr)

    def ref_variable(self, ref: VarRef):
        pool = self.schema.household_vars if ref.level == HOUSEHOLD else self.schema.individual_vars
        return pool[ref.index]

    def finish_compare(self, op, left, right, left_tok, right_tok):
        lkind, lval, _ = left
        rkind, rval, _ = right
        if lkind != "ref" and rkind != "ref":
            self.fail("comparison needs at least one variable reference", left_tok)
        if lkind == "ref" and rkind == "ref":
            ordered = self.ref_variable(lval).ordered and self.ref_variable(rval).ordered
            if op not in ("==", "!=") and not ordered:
                self.fail(
                    f"order comparison between {lval.name!r} and {rval.name!r} needs ordered variables",
                    left_tok,
                )
            return Compare(op, lval, rval)
        # one ref, one constant; put the ref on the left
        if lkind == "ref":
            ref, const_kind, const_val, const_tok = lval, rkind, rval, right_tok
        else:
            flip = {"<": ">", "<=": ">=", ">": "<", ">=": "<="}
            op = flip.get(op, op)
            ref, const_kind, const_val, const_tok = rval, lkind, lval, left_tok
        var = self.ref_variable(ref)
        if op not in ("==", "!=") and not var.ordered:
            self.fail(f"order comparison on unordered variable {var.name!r}", const_tok)
        code = self.resolve_constant(var, const_kind, const_val, const_tok, strict=op in ("==", "!="))
        return Compare(op, ref, Const(code))

    def finish_set(self, left, left_tok, negate: bool):
        if left[0] != "ref":
            self.fail("membership test needs a variable reference on the left", left_tok)
        ref = left[1]
        var = self.ref_variable(ref)
        self.expect("op", "{")
        codes = []
        while True:
            tok = self.peek()
            if tok.kind == "int":
                self.advance()
                codes.append(self.resolve_constant(var, "int", int(tok.value), tok, strict=True))
            elif tok.kind == "ident":
                self.advance()
                codes.append(self.resolve_constant(var, "label", tok.value, tok, strict=True))
            else:
                self.fail("expected a code or label inside { }")
            if self.peek().kind == "op" and self.peek().value == ",":
                self.advance()
                continue
            break
        self.expect("op", "}")
        return InSet(ref, tuple(codes), negate)

    def resolve_constant(self, var, kind, value, tok, strict: bool) -> int:
        if kind == "label":
            try:
                return var.label_code(value)
            except Exception:
                self.fail(f"variable {var.name!r} has no category labelled {value!r}", tok)
        code = int(value)
        if strict and not (1 <= code <= var.cardinality):
            self.fail(f"code {code} outside 1..{var.cardinality} for {var.name!r}", tok)
        return code


# ---------------------------------------------------------------------------
# Compiled rules

@dataclass(frozen=True)
class Rule:
    id: str
    kind: str  # "global" | "person" | "pair"
    bindings: tuple[str, ...]
    expr: object
    negate: bool = False

    def fire_mask(self, hh: np.ndarray, ind: np.ndarray) -> np.ndarray:
        """Boolean (n,) mask of households on which this rule fires."""
        n, h = ind.shape[0], ind.shape[1]
        value = self.expr.eval(_Ctx(hh, ind, self.bindings))
        if self.kind == "global":
            out = np.broadcast_to(value, (n,)).astype(bool)
        elif self.kind == "person":
            out = np.broadcast_to(value, (n, h)).any(axis=1)
        else:
            mask = np.broadcast_to(value, (n, h, h)) & ~np.eye(h, dtype=bool)
            out = mask.any(axis=(1, 2))
        return ~out if self.negate else out


class RuleSet:
    """Compiled structural-zero constraints bound to a schema."""

    def __init__(self, rules: tuple[Rule, ...], schema: Schema):
        self.rules = tuple(rules)
        self.schema = schema
        ids = [r.id for r in self.rules]
        if len(set(ids)) != len(ids):
            raise RuleError("duplicate rule ids")

    def __len__(self) -> int:
        return len(self.rules)

    @property
    def rule_ids(self) -> list[str]:
        return [r.id for r in self.rules]

    def violation_matrix(self, hh: np.ndarray, ind: np.ndarray) -> np.ndarray:
        """(n_rules, n) boolean fire mask over a size group."""
        if not self.rules:
            return np.zeros((0, hh.shape[0]), dtype=bool)
        return np.stack([rule.fire_mask(hh, ind) for rule in self.rules])

    def any_violation(self, hh: np.ndarray, ind: np.ndarray) -> np.ndarray:
        out = np.zeros(hh.shape[0], dtype=bool)
        for rule in self.rules:
            out |= rule.fire_mask(hh, ind)
        return out

    def violates(self, household: Household) -> tuple[bool, list[str]]:
        """Whether a fully observed household breaks any rule, and which."""
        if np.any(household.hh == MISSING) or np.any(household.ind == MISSING):
            raise RuleError("household has missing cells; impute or mask before rule checking")
        size_code = int(household.hh[self.schema.size_index])
        if self.schema.size_for_code(size_code) not in self.schema.sizes:
            raise RuleError("household size outside the allowed sizes")
        hh = household.hh[None, :]
        ind = household.ind[None, :, :]
        fired = [rule.id for rule in self.rules if bool(rule.fire_mask(hh, ind)[0])]
        return bool(fired), fired


def _uniform_households(schema: Schema, h: int, count: int, rng) -> tuple[np.ndarray, np.ndarray]:
    hh = np.empty((count, schema.q), dtype=np.int32)
    for k, var in enumerate(schema.household_vars):
        hh[:, k] = rng.integers(1, var.cardinality + 1, size=count)
    hh[:, schema.size_index] = schema.code_for_size(h)
    ind = np.empty((count, h, schema.p), dtype=np.int32)
    for k, var in enumerate(schema.individual_vars):
        ind[:, :, k] = rng.integers(1, var.cardinality + 1, size=(count, h))
    return hh, ind


def check_satisfiable(ruleset: RuleSet, draws: int = 1_000_000) -> None:
    """Randomized search showing every size admits a rule-passing household.

    A rule set with empty support for some size would make every rejection
    loop diverge, so failure aborts the load.
    """
    if not ruleset.rules:
        return
    rng = np.random.default_rng(_SATZ_CHECK_SEED)
    chunk = 20_000
    for h in ruleset.schema.sizes:
        remaining = draws
        found = False
        while remaining > 0 and not found:
            take = min(chunk, remaining)
            hh, ind = _uniform_households(ruleset.schema, h, take, rng)
            found = bool((~ruleset.any_violation(hh, ind)).any())
            remaining -= take
        if not found:
            raise RuleError(
                f"no rule-satisfying household of size {h} found in {draws} random draws; "
                "the rule set leaves no support for this size"
            )


def parse_rules(text: str, schema: Schema, check_draws: int = 1_000_000) -> RuleSet:
    """Compile a rules document against a schema.

    Raises RuleError with line/column positions for syntax problems,
    unknown names, and type mismatches, or when some household size has
    no rule-satisfying household.
    """
    rules = _Parser(_tokenize(text), schema).parse_rules()
    ruleset = RuleSet(tuple(rules), schema)
    check_satisfiable(ruleset, draws=check_draws)
    return ruleset


def parse_predicate(text: str, schema: Schema, name: str = "predicate") -> Rule:
    """Compile a bare predicate (the rule grammar without the 'rule id:' head).

    Used for household-level estimand queries; `fire_mask` gives the
    per-household truth value.
    """
    parser = _Parser(_tokenize(text), schema)
    rule = parser.parse_body(name)
    if parser.peek().kind != "eof":
        parser.fail("trailing input after predicate")
    return rule

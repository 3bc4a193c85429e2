"""Clause-level SQL parsing and canonicalisation for Exact Set Match.

Covers the SELECT fragment that Spider-style datasets use: joins, nested
subqueries, set operators, GROUP BY/HAVING, ORDER BY/LIMIT, CASE, CAST and
WITH. Window functions are rejected.

Parsing happens in two passes. The first builds a raw tree that still carries
table and column aliases; the second resolves aliases against a scope chain
and turns commutative parts (select lists, AND/OR chains, equality operands)
into sorted tuples so that plain ``==`` on :class:`SqlClauseSet` is set
equality.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from typing import Mapping, Sequence


class SqlParseError(Exception):
    def __init__(self, message: str, token_index: int, offset: int):
        super().__init__(f"{message} at token {token_index} (char {offset})")
        self.token_index = token_index
        self.offset = offset


RESERVED = frozenset(
    """select from where group order by having limit offset union intersect except join on as and
    or not in like glob between is null inner left right full outer cross natural asc desc distinct
    case when then else end exists with all using over cast""".split()
)

_TOKEN = re.compile(
    r"""
    (?P<ws>\s+|--[^\n]*)
  | (?P<num>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)
  | (?P<str>'(?:[^']|'')*')
  | (?P<dstr>"(?:[^"]|"")*")
  | (?P<qid>`[^`]*`|\[[^\]]*\])
  | (?P<id>[A-Za-z_][A-Za-z0-9_$]*)
  | (?P<op><=|>=|<>|!=|==|\|\||[=<>+\-*/%(),.;?])
    """,
    re.X,
)


@dataclass(frozen=True)
class Token:
    kind: str  # num, str, id, qid, op
    value: str
    offset: int
    index: int  # 1-based

    @property
    def low(self) -> str:
        return self.value.lower()


def tokenize(sql: str) -> list[Token]:
    out: list[Token] = []
    pos = 0
    while pos < len(sql):
        m = _TOKEN.match(sql, pos)
        if not m:
            raise SqlParseError(f"unexpected character {sql[pos]!r}", len(out) + 1, pos)
        kind = m.lastgroup
        if kind != "ws":
            text = m.group()
            if kind == "str":
                text = text[1:-1].replace("''", "'")
            elif kind == "dstr":
                # double quotes hold string values in this corpus' SQL
                kind, text = "str", text[1:-1].replace('""', '"')
            elif kind == "qid":
                kind, text = "id", text[1:-1]
            out.append(Token(kind, text, pos, len(out) + 1))
        pos = m.end()
    return out


# ---------------------------------------------------------------------------
# canonical clause set


@dataclass(frozen=True)
class SqlClauseSet:
    distinct: bool = False
    select_items: tuple = ()
    from_tables: tuple = ()
    join_conditions: tuple = ()
    where_conditions: tuple = ()
    group_by_items: tuple = ()
    having_conditions: tuple = ()
    order_by_items: tuple = ()
    limit_value: str | None = None
    set_operators: tuple = ()
    ctes: tuple = ()

    @property
    def nested(self) -> tuple["SqlClauseSet", ...]:
        """Every subquery clause set reachable from this query, depth first."""
        found: list[SqlClauseSet] = []

        def walk(node):
            if isinstance(node, SqlClauseSet):
                found.append(node)
                for part in _fields(node):
                    walk(part)
            elif isinstance(node, tuple):
                for part in node:
                    walk(part)

        for part in _fields(self):
            walk(part)
        return tuple(found)


def _fields(cs: SqlClauseSet):
    return (
        cs.select_items, cs.from_tables, cs.join_conditions, cs.where_conditions, cs.group_by_items,
        cs.having_conditions, cs.order_by_items, cs.set_operators, cs.ctes,
    )


def _key(x):
    return repr(x)


def _msort(items) -> tuple:
    return tuple(sorted(items, key=_key))


# ---------------------------------------------------------------------------
# raw parser


@dataclass
class _RawQuery:
    distinct: bool = False
    select: list = field(default_factory=list)  # (expr, alias)
    sources: list = field(default_factory=list)  # (kind, source, alias)
    join_conds: list = field(default_factory=list)
    where: object = None
    group: list = field(default_factory=list)
    having: object = None
    order: list = field(default_factory=list)
    limit: object = None
    offset: object = None
    setops: list = field(default_factory=list)  # (op, _RawQuery)
    ctes: list = field(default_factory=list)  # (name, _RawQuery)


class _Parser:
    def __init__(self, sql: str):
        self.sql = sql
        self.toks = tokenize(sql)
        self.i = 0

    # token helpers
    def peek(self, ahead=0) -> Token | None:
        j = self.i + ahead
        return self.toks[j] if j < len(self.toks) else None

    def error(self, msg, tok: Token | None = None):
        tok = tok or self.peek()
        if tok is None:
            raise SqlParseError(f"{msg} (unexpected end of input)", len(self.toks) + 1, len(self.sql))
        raise SqlParseError(f"{msg}, found {tok.value!r}", tok.index, tok.offset)

    def at_kw(self, *words, ahead=0) -> bool:
        t = self.peek(ahead)
        return t is not None and t.kind == "id" and t.low in words

    def at_op(self, *ops, ahead=0) -> bool:
        t = self.peek(ahead)
        return t is not None and t.kind == "op" and t.value in ops

    def take(self) -> Token:
        t = self.peek()
        if t is None:
            self.error("unexpected end of input")
        self.i += 1
        return t

    def expect_kw(self, word):
        if not self.at_kw(word):
            self.error(f"expected {word.upper()}")
        return self.take()

    def expect_op(self, op):
        if not self.at_op(op):
            self.error(f"expected {op!r}")
        return self.take()

    def accept_kw(self, *words) -> bool:
        if self.at_kw(*words):
            self.i += 1
            return True
        return False

    def accept_op(self, op) -> bool:
        if self.at_op(op):
            self.i += 1
            return True
        return False

    def ident(self, what="identifier") -> str:
        t = self.peek()
        if t is None or t.kind != "id" or t.low in RESERVED:
            self.error(f"expected {what}")
        self.i += 1
        return t.value

    # statements
    def parse_statement(self) -> _RawQuery:
        if not self.at_kw("select", "with"):
            self.error("expected SELECT or WITH")
        q = self.query()
        self.accept_op(";")
        if self.peek() is not None:
            self.error("unexpected trailing input")
        return q

    def query(self) -> _RawQuery:
        ctes = []
        if self.accept_kw("with"):
            while True:
                name = self.ident("CTE name")
                self.expect_kw("as")
                self.expect_op("(")
                ctes.append((name, self.query()))
                self.expect_op(")")
                if not self.accept_op(","):
                    break
        q = self.set_operand()
        q.ctes = ctes
        while self.at_kw("union", "intersect", "except"):
            op = self.take().low
            if op == "union" and self.accept_kw("all"):
                op = "union all"
            q.setops.append((op, self.set_operand()))
        if self.accept_kw("order"):
            self.expect_kw("by")
            while True:
                e = self.expr()
                direction = "asc"
                if self.at_kw("asc", "desc"):
                    direction = self.take().low
                q.order.append((e, direction))
                if not self.accept_op(","):
                    break
        if self.accept_kw("limit"):
            q.limit = self.expr()
            if self.accept_kw("offset"):
                q.offset = self.expr()
            elif self.accept_op(","):
                q.offset, q.limit = q.limit, self.expr()
        return q

    def set_operand(self) -> _RawQuery:
        if self.at_op("(") and self.at_kw("select", "with", ahead=1):
            self.take()
            q = self.query()
            self.expect_op(")")
            return q
        return self.select_core()

    def select_core(self) -> _RawQuery:
        q = _RawQuery()
        self.expect_kw("select")
        if self.accept_kw("distinct"):
            q.distinct = True
        else:
            self.accept_kw("all")
        while True:
            e = self.expr(allow_star=True)
            alias = None
            if self.accept_kw("as"):
                alias = self.ident("column alias")
            elif self.peek() is not None and self.peek().kind == "id" and self.peek().low not in RESERVED:
                alias = self.ident()
            q.select.append((e, alias))
            if not self.accept_op(","):
                break
        if self.accept_kw("from"):
            self.from_clause(q)
        if self.accept_kw("where"):
            q.where = self.expr()
        if self.accept_kw("group"):
            self.expect_kw("by")
            q.group.append(self.expr())
            while self.accept_op(","):
                q.group.append(self.expr())
        if self.accept_kw("having"):
            q.having = self.expr()
        return q

    def from_clause(self, q: _RawQuery):
        q.sources.append(("inner",) + self.table_ref())
        while True:
            if self.accept_op(","):
                q.sources.append(("inner",) + self.table_ref())
                continue
            kind = None
            start = self.i
            self.accept_kw("natural")
            if self.accept_kw("left", "right", "full"):
                kind = self.toks[self.i - 1].low
                self.accept_kw("outer")
            elif self.accept_kw("inner", "cross"):
                kind = "inner"
            if not self.accept_kw("join"):
                if self.i != start:
                    self.error("expected JOIN")
                return
            q.sources.append((kind or "inner",) + self.table_ref())
            if self.accept_kw("on"):
                q.join_conds.append(self.expr())
            elif self.at_kw("using"):
                self.error("USING joins are not supported")

    def table_ref(self):
        if self.accept_op("("):
            if not self.at_kw("select", "with"):
                self.error("expected subquery")
            sub = self.query()
            self.expect_op(")")
            source = ("rawsub", sub)
        else:
            source = self.ident("table name")
        alias = None
        if self.accept_kw("as"):
            alias = self.ident("table alias")
        elif self.peek() is not None and self.peek().kind == "id" and self.peek().low not in RESERVED:
            alias = self.ident()
        return source, alias

    # expressions
    def expr(self, allow_star=False):
        return self.or_expr(allow_star)

    def or_expr(self, allow_star=False):
        items = [self.and_expr(allow_star)]
        while self.accept_kw("or"):
            items.append(self.and_expr())
        return items[0] if len(items) == 1 else ("or", tuple(items))

    def and_expr(self, allow_star=False):
        items = [self.not_expr(allow_star)]
        while self.accept_kw("and"):
            items.append(self.not_expr())
        return items[0] if len(items) == 1 else ("and", tuple(items))

    def not_expr(self, allow_star=False):
        if self.accept_kw("not"):
            return ("not", self.not_expr())
        return self.predicate(allow_star)

    def predicate(self, allow_star=False):
        left = self.concat(allow_star)
        while True:
            if self.at_op("=", "==", "!=", "<>", "<", "<=", ">", ">="):
                op = self.take().value
                left = ("cmp", {"==": "=", "<>": "!="}.get(op, op), left, self.concat())
                continue
            negated = False
            if self.at_kw("not") and self.at_kw("in", "like", "glob", "between", ahead=1):
                self.take()
                negated = True
            if self.accept_kw("in"):
                self.expect_op("(")
                if self.at_kw("select", "with"):
                    rhs = ("rawsub", self.query())
                else:
                    vals = [self.expr()]
                    while self.accept_op(","):
                        vals.append(self.expr())
                    rhs = ("list", tuple(vals))
                self.expect_op(")")
                left = ("in", negated, left, rhs)
            elif self.at_kw("like", "glob"):
                op = self.take().low
                left = (op, negated, left, self.concat())
            elif self.accept_kw("between"):
                lo = self.concat()
                self.expect_kw("and")
                left = ("between", negated, left, lo, self.concat())
            elif self.accept_kw("is"):
                neg = self.accept_kw("not")
                self.expect_kw("null")
                left = ("is_null", neg, left)
            else:
                if negated:
                    self.error("dangling NOT")
                return left

    def concat(self, allow_star=False):
        left = self.additive(allow_star)
        while self.at_op("||"):
            self.take()
            left = ("bin", "||", left, self.additive())
        return left

    def additive(self, allow_star=False):
        left = self.term(allow_star)
        while self.at_op("+", "-"):
            op = self.take().value
            left = ("bin", op, left, self.term())
        return left

    def term(self, allow_star=False):
        left = self.unary(allow_star)
        while self.at_op("*", "/", "%"):
            op = self.take().value
            left = ("bin", op, left, self.unary())
        return left

    def unary(self, allow_star=False):
        if self.accept_op("-"):
            inner = self.unary()
            if inner[0] == "num":
                return ("num", "-" + inner[1])
            return ("neg", inner)
        if self.accept_op("+"):
            return self.unary()
        return self.primary(allow_star)

    def primary(self, allow_star=False):
        t = self.peek()
        if t is None:
            self.error("expected expression")
        if t.kind == "num":
            self.i += 1
            return ("num", t.value)
        if t.kind == "str":
            self.i += 1
            return ("str", t.value)
        if t.kind == "op":
            if t.value == "(":
                self.i += 1
                if self.at_kw("select", "with"):
                    sub = self.query()
                    self.expect_op(")")
                    return ("rawsub", sub)
                e = self.expr()
                self.expect_op(")")
                return e
            if t.value == "*" and allow_star:
                self.i += 1
                return ("col", None, "*")
            if t.value == "?":
                self.i += 1
                return ("val",)
            self.error("expected expression")
        low = t.low
        if low == "null":
            self.i += 1
            return ("null",)
        if low == "exists":
            self.i += 1
            self.expect_op("(")
            sub = self.query()
            self.expect_op(")")
            return ("exists", False, ("rawsub", sub))
        if low == "case":
            return self.case_expr()
        if low == "cast":
            self.i += 1
            self.expect_op("(")
            e = self.expr()
            self.expect_kw("as")
            type_name = self.ident("type name").lower()
            self.expect_op(")")
            return ("cast", e, type_name)
        if low in RESERVED:
            self.error("expected expression")
        name = self.ident()
        if self.at_op("("):
            return self.call(name)
        if self.accept_op("."):
            if self.accept_op("*"):
                return ("col", name, "*")
            return ("col", name, self.ident("column name"))
        return ("col", None, name)

    def call(self, name):
        self.expect_op("(")
        distinct = self.accept_kw("distinct")
        args = []
        if self.accept_op("*"):
            args.append(("col", None, "*"))
        elif not self.at_op(")"):
            args.append(self.expr())
            while self.accept_op(","):
                args.append(self.expr())
        self.expect_op(")")
        if self.at_kw("over", "filter"):
            self.error("window functions are not supported")
        return ("func", name.lower(), distinct, tuple(args))

    def case_expr(self):
        self.expect_kw("case")
        operand = None if self.at_kw("when") else self.expr()
        whens = []
        while self.accept_kw("when"):
            cond = self.expr()
            self.expect_kw("then")
            whens.append((cond, self.expr()))
        if not whens:
            self.error("expected WHEN")
        other = self.expr() if self.accept_kw("else") else None
        self.expect_kw("end")
        return ("case", operand, tuple(whens), other)


# ---------------------------------------------------------------------------
# canonicalisation


def canonical_number(text: str) -> str:
    try:
        d = Decimal(text)
    except InvalidOperation:
        return text
    if d == d.to_integral_value():
        return str(int(d))
    return format(d.normalize(), "f")


@dataclass
class _Scope:
    aliases: dict  # lower alias/table -> canonical table name
    tables: list  # canonical names of FROM sources in this scope
    select_aliases: dict
    parent: "_Scope | None" = None

    def lookup(self, qualifier: str):
        s = self
        while s is not None:
            if qualifier in s.aliases:
                return s.aliases[qualifier]
            s = s.parent
        return None


class _Canon:
    def __init__(self, schema: Mapping[str, Sequence[str]] | None, ignore_values: bool):
        self.schema = {t.lower(): {c.lower() for c in cols} for t, cols in (schema or {}).items()}
        self.ignore_values = ignore_values

    def query(self, q: _RawQuery, parent: _Scope | None, top_order=True) -> SqlClauseSet:
        ctes = tuple((name.lower(), self.query(sub, parent)) for name, sub in q.ctes)
        aliases, tables = {}, []
        sources = []
        n_sub = 0
        for kind, src, alias in q.sources:
            if isinstance(src, tuple):
                n_sub += 1
                name = f"_sub{n_sub}"
                entry = (kind, ("sub", self.query(src[1], parent), name))
            else:
                name = src.lower()
                entry = (kind, name)
                aliases.setdefault(name, name)
            if alias:
                aliases[alias.lower()] = name
            tables.append(name)
            sources.append(entry)
        scope = _Scope(aliases, tables, {}, parent)
        select_items = []
        for e, alias in q.select:
            ce = self.expr(e, scope)
            if alias:
                scope.select_aliases[alias.lower()] = ce
            select_items.append(ce)
        # select aliases are visible to ORDER BY / GROUP BY / HAVING only
        where = self.conjuncts(q.where, scope, use_select_aliases=False)
        join = []
        for c in q.join_conds:
            join.extend(self.conjuncts(c, scope, use_select_aliases=False))
        group = [self.expr(g, scope, True) for g in q.group]
        having = self.conjuncts(q.having, scope, use_select_aliases=True)
        order = tuple((self.expr(e, scope, True), d) for e, d in q.order)
        limit = None
        if q.limit is not None:
            limit = self._limit_text(self.expr(q.limit, scope))
            if q.offset is not None:
                limit += " offset " + self._limit_text(self.expr(q.offset, scope))
        setops = []
        for op, sub in q.setops:
            setops.append((op, self.query(sub, parent)))
        return SqlClauseSet(
            distinct=q.distinct,
            select_items=_msort(select_items),
            from_tables=_msort(sources),
            join_conditions=_msort(join),
            where_conditions=_msort(where),
            group_by_items=_msort(group),
            having_conditions=_msort(having),
            order_by_items=order,
            limit_value=limit,
            set_operators=tuple(setops),
            ctes=ctes,
        )

    @staticmethod
    def _limit_text(e):
        if e[0] == "num":
            return e[1]
        if e[0] == "val":
            return "?"
        return render_expr(e)

    def conjuncts(self, cond, scope, use_select_aliases):
        if cond is None:
            return []
        c = self.expr(cond, scope, use_select_aliases)
        return list(c[1]) if c[0] == "and" else [c]

    def column(self, qualifier, name, scope: _Scope, use_select_aliases):
        low = name.lower()
        if qualifier is None:
            if use_select_aliases and low in scope.select_aliases:
                return scope.select_aliases[low]
            if low == "*":
                return ("col", None, "*")
            table = self.owner(low, scope)
            return ("col", table, low)
        table = scope.lookup(qualifier.lower()) or qualifier.lower()
        return ("col", table, low)

    def owner(self, column, scope: _Scope):
        """Table that an unqualified column belongs to, when it can be told."""
        s = scope
        while s is not None:
            real = [t for t in s.tables]
            if self.schema:
                hits = [t for t in real if column in self.schema.get(t, ())]
                if len(hits) == 1:
                    return hits[0]
                if hits:
                    return None
            elif len(real) == 1:
                return real[0]
            elif real:
                return None
            s = s.parent
        return None

    def expr(self, e, scope: _Scope, use_select_aliases=False):
        x = lambda n: self.expr(n, scope, use_select_aliases)  # noqa: E731
        tag = e[0]
        if tag == "num":
            return ("val",) if self.ignore_values else ("num", canonical_number(e[1]))
        if tag == "str":
            return ("val",) if self.ignore_values else ("str", e[1])
        if tag in ("null", "val"):
            return e
        if tag == "col":
            return self.column(e[1], e[2], scope, use_select_aliases)
        if tag == "rawsub":
            return ("sub", self.query(e[1], scope))
        if tag == "func":
            return ("func", e[1], e[2], tuple(x(a) for a in e[3]))
        if tag == "neg":
            return ("neg", x(e[1]))
        if tag == "bin":
            return ("bin", e[1], x(e[2]), x(e[3]))
        if tag == "cmp":
            op, l, r = e[1], x(e[2]), x(e[3])
            if op in ("=", "!="):
                l, r = sorted((l, r), key=_key)
            elif op in (">", ">="):
                op, l, r = {">": "<", ">=": "<="}[op], r, l
            return ("cmp", op, l, r)
        if tag in ("and", "or"):
            flat = []
            for item in e[1]:
                c = x(item)
                flat.extend(c[1] if c[0] == tag else [c])
            return (tag, _msort(flat))
        if tag == "not":
            inner = x(e[1])
            if inner[0] in ("in", "like", "glob", "between", "is_null", "exists"):
                return (inner[0], not inner[1]) + inner[2:]
            if inner[0] == "cmp" and inner[1] in ("=", "!="):
                return ("cmp", "!=" if inner[1] == "=" else "=") + inner[2:]
            if inner[0] == "not":
                return inner[1]
            return ("not", inner)
        if tag == "in":
            rhs = e[3]
            if rhs[0] == "list":
                rhs = ("list", _msort(x(v) for v in rhs[1]))
            else:
                rhs = x(rhs)
            return ("in", e[1], x(e[2]), rhs)
        if tag in ("like", "glob"):
            return (tag, e[1], x(e[2]), x(e[3]))
        if tag == "between":
            return ("between", e[1], x(e[2]), x(e[3]), x(e[4]))
        if tag == "is_null":
            return ("is_null", e[1], x(e[2]))
        if tag == "exists":
            return ("exists", e[1], x(e[2]))
        if tag == "case":
            operand = x(e[1]) if e[1] is not None else None
            whens = tuple((x(c), x(v)) for c, v in e[2])
            other = x(e[3]) if e[3] is not None else None
            return ("case", operand, whens, other)
        if tag == "cast":
            return ("cast", x(e[1]), e[2])
        raise ValueError(f"unknown node {tag}")


def parse_sql_clauses(
    sql: str, schema: Mapping[str, Sequence[str]] | None = None, ignore_values: bool = False
) -> SqlClauseSet:
    """Parse one SELECT/WITH statement into its canonical clause set.

    ``schema`` (table -> columns) lets unqualified columns be attributed to
    their table when the FROM clause lists several tables.
    """
    raw = _Parser(sql).parse_statement()
    return _Canon(schema, ignore_values).query(raw, None)


def has_top_level_order_by(sql: str) -> bool:
    try:
        return bool(parse_sql_clauses(sql).order_by_items)
    except SqlParseError:
        depth = 0
        toks = []
        try:
            toks = tokenize(sql)
        except SqlParseError:
            return bool(re.search(r"\border\s+by\b", sql, re.I))
        for a, b in zip(toks, toks[1:]):
            if a.value == "(":
                depth += 1
            elif a.value == ")":
                depth -= 1
            elif depth == 0 and a.low == "order" and b.low == "by":
                return True
        return False


# ---------------------------------------------------------------------------
# rendering


def _quote(s: str) -> str:
    return "'" + s.replace("'", "''") + "'"


_PREDICATES = frozenset(["cmp", "like", "glob", "in", "between", "is_null", "and", "or", "not", "exists"])


def _operand(e) -> str:
    text = render_expr(e)
    return f"({text})" if e[0] in _PREDICATES else text


def render_expr(e) -> str:
    tag = e[0]
    if tag == "num":
        return e[1]
    if tag == "str":
        return _quote(e[1])
    if tag == "null":
        return "NULL"
    if tag == "val":
        return "?"
    if tag == "col":
        return e[2] if e[1] is None else f"{e[1]}.{e[2]}"
    if tag == "sub":
        return f"({render(e[1])})"
    if tag == "func":
        args = ", ".join(render_expr(a) for a in e[3])
        return f"{e[1]}({'DISTINCT ' if e[2] else ''}{args})"
    if tag == "neg":
        return f"-({render_expr(e[1])})"
    if tag == "bin":
        return f"({_operand(e[2])} {e[1]} {_operand(e[3])})"
    if tag == "cmp":
        return f"{_operand(e[2])} {e[1]} {_operand(e[3])}"
    if tag in ("and", "or"):
        return f" {tag.upper()} ".join(f"({render_expr(i)})" for i in e[1])
    if tag == "not":
        return f"NOT ({render_expr(e[1])})"
    neg = "NOT " if len(e) > 1 and e[1] is True else ""
    if tag == "in":
        rhs = e[3]
        if rhs[0] == "list":
            return f"{_operand(e[2])} {neg}IN ({', '.join(render_expr(v) for v in rhs[1])})"
        return f"{_operand(e[2])} {neg}IN {render_expr(rhs)}"
    if tag in ("like", "glob"):
        return f"{_operand(e[2])} {neg}{tag.upper()} {_operand(e[3])}"
    if tag == "between":
        return f"{_operand(e[2])} {neg}BETWEEN {_operand(e[3])} AND {_operand(e[4])}"
    if tag == "is_null":
        return f"{_operand(e[2])} IS {'NOT ' if e[1] else ''}NULL"
    if tag == "exists":
        return f"{neg}EXISTS {render_expr(e[2])}"
    if tag == "case":
        parts = ["CASE"]
        if e[1] is not None:
            parts.append(render_expr(e[1]))
        for c, v in e[2]:
            parts.append(f"WHEN {render_expr(c)} THEN {render_expr(v)}")
        if e[3] is not None:
            parts.append(f"ELSE {render_expr(e[3])}")
        parts.append("END")
        return " ".join(parts)
    if tag == "cast":
        return f"CAST({render_expr(e[1])} AS {e[2]})"
    raise ValueError(f"unknown node {tag}")


def _render_source(entry) -> str:
    src = entry[1]
    if isinstance(src, tuple):
        return f"({render(src[1])}) AS {src[2]}"
    return src


def _render_core(cs: SqlClauseSet) -> str:
    out = ["SELECT"]
    if cs.distinct:
        out.append("DISTINCT")
    out.append(", ".join(render_expr(e) for e in cs.select_items))
    if cs.from_tables:
        first, rest = cs.from_tables[0], cs.from_tables[1:]
        parts = [_render_source(first)]
        for entry in rest:
            kw = "JOIN" if entry[0] == "inner" else f"{entry[0].upper()} JOIN"
            parts.append(f"{kw} {_render_source(entry)}")
        text = " ".join(parts)
        if cs.join_conditions:
            text += " ON " + " AND ".join(f"({render_expr(c)})" for c in cs.join_conditions)
        out.append("FROM " + text)
    if cs.where_conditions:
        out.append("WHERE " + " AND ".join(f"({render_expr(c)})" for c in cs.where_conditions))
    if cs.group_by_items:
        out.append("GROUP BY " + ", ".join(render_expr(g) for g in cs.group_by_items))
    if cs.having_conditions:
        out.append("HAVING " + " AND ".join(f"({render_expr(c)})" for c in cs.having_conditions))
    return " ".join(out)


def render(cs: SqlClauseSet) -> str:
    """SQL text whose parse is ``cs`` again."""
    out = []
    if cs.ctes:
        out.append("WITH " + ", ".join(f"{n} AS ({render(q)})" for n, q in cs.ctes))
    out.append(_render_core(cs))
    for op, sub in cs.set_operators:
        simple = not (sub.set_operators or sub.order_by_items or sub.limit_value or sub.ctes)
        out.append(f"{op.upper()} {_render_core(sub) if simple else '(' + render(sub) + ')'}")
    if cs.order_by_items:
        out.append("ORDER BY " + ", ".join(f"{render_expr(e)} {d.upper()}" for e, d in cs.order_by_items))
    if cs.limit_value is not None:
        out.append(f"LIMIT {cs.limit_value.upper()}")
    return " ".join(out)

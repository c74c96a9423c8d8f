"""Line-level statement graphs with control- and data-dependency edges.

Graphs come from two places: ``import_graph`` reads a code-property-graph
export (one JSON per function, e.g. produced by an adapter around Joern),
and ``build_graph_builtin`` runs a small intra-procedural analyzer over a
C subset so nothing external is needed.
"""

from __future__ import annotations

import enum
import json
import logging
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple, Union

from .clex import KEYWORDS, TYPE_WORDS, Token, lex
from .cstdlib import is_stdlib_function

logger = logging.getLogger(__name__)


class GraphError(ValueError):
    pass


class StatementType(enum.Enum):
    FUNCTION_DECLARATION = "Function Declaration"
    IF_STATEMENT = "If Statement"
    WHILE_STATEMENT = "While Statement"
    FOR_STATEMENT = "For Statement"
    SWITCH_STATEMENT = "Switch Statement"
    RETURN_STATEMENT = "Return Statement"
    GOTO_STATEMENT = "Goto Statement"
    BREAK = "Break"
    CONTINUE = "Continue"
    JUMP_TARGET = "Jump Target"
    BUILTIN_FUNCTION_CALL = "Builtin Function Call"
    EXTERNAL_FUNCTION_CALL = "External Function Call"
    ASSIGNMENT_OPERATION = "Assignment Operation"
    ARITHMETIC_OPERATION = "Arithmetic Operation"
    COMPARISON_OPERATION = "Comparison Operation"
    ACCESS_OPERATION = "Access Operation"
    LOGICAL_OPERATION = "Logical Operation"
    CAST_OPERATION = "Cast Operation"
    OTHER_OPERATION = "Other Operation"


class EdgeKind(str, enum.Enum):
    CONTROL = "control_dep"
    DATA = "data_dep"
    SELF = "self_loop"


@dataclass(frozen=True)
class StatementNode:
    line_no: int
    code_text: str
    stmt_type: StatementType
    raw_types: Tuple[str, ...] = ()


@dataclass(frozen=True)
class DependencyEdge:
    src_line: int
    dst_line: int
    kind: EdgeKind
    variable: Optional[str] = None


@dataclass(frozen=True)
class StatementGraph:
    function_id: str
    nodes: Tuple[StatementNode, ...]
    edges: Tuple[DependencyEdge, ...]
    self_loops_added: bool = False

    @property
    def lines(self) -> List[int]:
        return [n.line_no for n in self.nodes]

    def node_index(self) -> Dict[int, int]:
        return {n.line_no: i for i, n in enumerate(self.nodes)}

    def adjacency_pairs(self, symmetric: bool = False) -> List[Tuple[int, int]]:
        """Unique (src, dst) node-index pairs; parallel edges collapse to one."""
        idx = self.node_index()
        pairs = set()
        for e in self.edges:
            s, d = idx[e.src_line], idx[e.dst_line]
            pairs.add((s, d))
            if symmetric:
                pairs.add((d, s))
        return sorted(pairs)

    def to_json(self) -> dict:
        return {
            "function_id": self.function_id,
            "nodes": [
                {
                    "line_no": n.line_no,
                    "code_text": n.code_text,
                    "stmt_type": n.stmt_type.name,
                    "raw_types": list(n.raw_types),
                }
                for n in self.nodes
            ],
            "edges": [
                {"src": e.src_line, "dst": e.dst_line, "kind": e.kind.value, "variable": e.variable}
                for e in self.edges
            ],
            "self_loops_added": self.self_loops_added,
        }

    @classmethod
    def from_json(cls, d: dict) -> "StatementGraph":
        return cls(
            function_id=d["function_id"],
            nodes=tuple(
                StatementNode(n["line_no"], n["code_text"], StatementType[n["stmt_type"]], tuple(n["raw_types"]))
                for n in d["nodes"]
            ),
            edges=tuple(
                DependencyEdge(e["src"], e["dst"], EdgeKind(e["kind"]), e.get("variable")) for e in d["edges"]
            ),
            self_loops_added=bool(d.get("self_loops_added", False)),
        )


def _make_graph(
    function_id: str,
    nodes: Iterable[StatementNode],
    edges: Iterable[DependencyEdge],
    self_loops_added: bool = False,
) -> StatementGraph:
    nodes = tuple(sorted(nodes, key=lambda n: n.line_no))
    seen: Set[DependencyEdge] = set()
    uniq = []
    for e in edges:
        if e not in seen:
            seen.add(e)
            uniq.append(e)
    uniq.sort(key=lambda e: (e.src_line, e.dst_line, e.kind.value, e.variable or ""))
    return StatementGraph(function_id, nodes, tuple(uniq), self_loops_added)


# --------------------------------------------------------------------------- statement types

_CONTROL_KINDS = {
    "IF": StatementType.IF_STATEMENT,
    "ELSE": StatementType.IF_STATEMENT,
    "WHILE": StatementType.WHILE_STATEMENT,
    "DO": StatementType.WHILE_STATEMENT,
    "FOR": StatementType.FOR_STATEMENT,
    "SWITCH": StatementType.SWITCH_STATEMENT,
    "BREAK": StatementType.BREAK,
    "CONTINUE": StatementType.CONTINUE,
    "GOTO": StatementType.GOTO_STATEMENT,
}

_ARITHMETIC_OPS = {
    "addition", "subtraction", "multiplication", "division", "modulo", "plus", "minus",
    "preIncrement", "postIncrement", "preDecrement", "postDecrement", "shiftLeft",
    "arithmeticShiftRight", "logicalShiftRight", "and", "or", "xor", "not", "exponentiation",
}
_COMPARISON_OPS = {"lessThan", "greaterThan", "lessEqualsThan", "greaterEqualsThan", "equals", "notEquals"}
_ACCESS_OPS = {
    "fieldAccess", "indirectFieldAccess", "indexAccess", "indirectIndexAccess", "indirection",
    "addressOf", "memberAccess", "indirectMemberAccess", "pointerShift", "getElementPtr",
}
_LOGICAL_OPS = {"logicalAnd", "logicalOr", "logicalNot"}

# most significant first
_OPERATOR_PRIORITY = (
    StatementType.ASSIGNMENT_OPERATION,
    StatementType.LOGICAL_OPERATION,
    StatementType.COMPARISON_OPERATION,
    StatementType.ARITHMETIC_OPERATION,
    StatementType.CAST_OPERATION,
    StatementType.ACCESS_OPERATION,
    StatementType.OTHER_OPERATION,
)


def operator_group(name: str) -> StatementType:
    """Map a ``<operator>.xxx`` call name to one of the operator categories."""
    op = name.split(".", 1)[1] if name.startswith("<operator>.") else name
    if op.startswith("assignment"):
        return StatementType.ASSIGNMENT_OPERATION
    if op in _ARITHMETIC_OPS:
        return StatementType.ARITHMETIC_OPERATION
    if op in _COMPARISON_OPS:
        return StatementType.COMPARISON_OPERATION
    if op in _ACCESS_OPS:
        return StatementType.ACCESS_OPERATION
    if op in _LOGICAL_OPS:
        return StatementType.LOGICAL_OPERATION
    if op == "cast":
        return StatementType.CAST_OPERATION
    return StatementType.OTHER_OPERATION


def _raw_category(raw: str) -> Tuple[int, Optional[StatementType]]:
    """(precedence class, type); class 0 = control, 1 = call, 2 = operator, 3 = unknown."""
    if raw == "METHOD":
        return 0, StatementType.FUNCTION_DECLARATION
    if raw == "RETURN":
        return 0, StatementType.RETURN_STATEMENT
    if raw == "JUMP_TARGET":
        return 0, StatementType.JUMP_TARGET
    if raw.startswith("CONTROL_STRUCTURE"):
        kind = raw.partition(":")[2].upper()
        return 0, _CONTROL_KINDS.get(kind, StatementType.OTHER_OPERATION)
    if raw.startswith("CALL:"):
        name = raw[5:]
        if name.startswith("<operator>.") or name.startswith("<operators>."):
            return 2, operator_group(name.replace("<operators>.", "<operator>."))
        if is_stdlib_function(name):
            return 1, StatementType.BUILTIN_FUNCTION_CALL
        return 1, StatementType.EXTERNAL_FUNCTION_CALL
    return 3, None


def _pick_type(raw_types: Sequence[str]) -> Optional[StatementType]:
    best: Dict[int, List[StatementType]] = {}
    for raw in raw_types:
        cls, t = _raw_category(raw)
        if t is not None:
            best.setdefault(cls, []).append(t)
    if 0 in best:
        return best[0][0]
    if 1 in best:
        return best[1][0]
    if 2 in best:
        return min(best[2], key=_OPERATOR_PRIORITY.index)
    return None


def classify_statement(node: StatementNode) -> StatementType:
    """Statement category by fixed precedence: control > call > operator > other.

    Raw types are tried first; when none is recognized the line text is
    scanned instead. Never fails, falling back to ``OTHER_OPERATION``.
    """
    t = _pick_type(node.raw_types)
    if t is None:
        t = _pick_type(raw_types_for_text(node.code_text))
    return t or StatementType.OTHER_OPERATION


# --------------------------------------------------------------------------- token helpers

_ASSIGN_OPS = {
    "=": "assignment",
    "+=": "assignmentPlus",
    "-=": "assignmentMinus",
    "*=": "assignmentMultiplication",
    "/=": "assignmentDivision",
    "%=": "assignmentModulo",
    "&=": "assignmentAnd",
    "|=": "assignmentOr",
    "^=": "assignmentXor",
    "<<=": "assignmentShiftLeft",
    ">>=": "assignmentArithmeticShiftRight",
}
_BINARY_OPS = {
    "+": "addition", "-": "subtraction", "*": "multiplication", "/": "division", "%": "modulo",
    "&": "and", "|": "or", "^": "xor", "<<": "shiftLeft", ">>": "arithmeticShiftRight",
    "<": "lessThan", ">": "greaterThan", "<=": "lessEqualsThan", ">=": "greaterEqualsThan",
    "==": "equals", "!=": "notEquals", "&&": "logicalAnd", "||": "logicalOr",
}
_UNARY_OPS = {"+": "plus", "-": "minus", "*": "indirection", "&": "addressOf", "!": "logicalNot", "~": "not"}
_CONTROL_WORDS = {"if", "while", "for", "do", "switch", "return", "break", "continue", "goto", "case", "default", "else"}


def _is_operand_end(tok: Optional[Token]) -> bool:
    if tok is None:
        return False
    if tok.kind in ("number", "string", "char"):
        return True
    if tok.kind == "ident":
        return tok.text not in KEYWORDS or tok.text in ("this", "true", "false", "NULL", "nullptr")
    return tok.text in (")", "]", "++", "--")


def _is_typeish(tok: Token) -> bool:
    return tok.kind == "ident" and (tok.text in TYPE_WORDS or tok.text.endswith("_t"))


def _cast_end(toks: Sequence[Token], i: int) -> Optional[int]:
    """If toks[i] == '(' opens a cast like ``(unsigned int *)``, index of ')'."""
    j = i + 1
    saw_type = False
    while j < len(toks):
        t = toks[j]
        if t.text == ")":
            break
        if _is_typeish(t) or t.text in ("struct", "union", "enum"):
            saw_type = True
        elif t.kind == "ident" and j > i + 1 and toks[j - 1].text in ("struct", "union", "enum"):
            pass
        elif t.text == "*":
            pass
        else:
            return None
        j += 1
    if j >= len(toks) or not saw_type:
        return None
    nxt = toks[j + 1] if j + 1 < len(toks) else None
    if nxt is None:
        return None
    if nxt.kind in ("ident", "number", "string", "char") or nxt.text in ("(", "*", "&", "-", "!", "~", "+"):
        return j
    return None


def scan_raw_types(toks: Sequence[Token], skip_decl_type: bool = False) -> List[str]:
    """Operator and call raw types in token order (Joern-style names)."""
    out: List[str] = []
    i = 0
    n = len(toks)
    while i < n:
        t = toks[i]
        prev = toks[i - 1] if i > 0 else None
        nxt = toks[i + 1] if i + 1 < n else None
        if t.kind == "ident":
            if t.text == "sizeof":
                out.append("CALL:<operator>.sizeOf")
            elif nxt is not None and nxt.text == "(" and t.text not in KEYWORDS:
                out.append(f"CALL:{t.text}")
        elif t.kind == "punct":
            s = t.text
            if s in _ASSIGN_OPS:
                out.append(f"CALL:<operator>.{_ASSIGN_OPS[s]}")
            elif s in ("++", "--"):
                base = "Increment" if s == "++" else "Decrement"
                out.append(f"CALL:<operator>.{'post' if _is_operand_end(prev) else 'pre'}{base}")
            elif s == "(":
                end = _cast_end(toks, i)
                if end is not None and not _is_operand_end(prev):
                    out.append("CALL:<operator>.cast")
                    i = end + 1
                    continue
            elif s == "[":
                out.append("CALL:<operator>.indexAccess")
            elif s == ".":
                out.append("CALL:<operator>.fieldAccess")
            elif s == "->":
                out.append("CALL:<operator>.indirectFieldAccess")
            elif s == "?":
                out.append("CALL:<operator>.conditional")
            elif s in _BINARY_OPS and _is_operand_end(prev):
                out.append(f"CALL:<operator>.{_BINARY_OPS[s]}")
            elif s in _UNARY_OPS:
                out.append(f"CALL:<operator>.{_UNARY_OPS[s]}")
        i += 1
    return out


def raw_types_for_text(text: str) -> List[str]:
    """Best-effort raw types for a single line of code, used as a fallback."""
    toks = lex(text, skip_directives=False).tokens
    if not toks:
        return []
    first = toks[0].text
    if first in ("if", "while", "for", "do", "switch", "break", "continue", "goto"):
        return [f"CONTROL_STRUCTURE:{first.upper()}"] + scan_raw_types(toks[1:])
    if first == "else":
        rest = raw_types_for_text(text[text.find("else") + 4 :])
        return rest
    if first == "return":
        return ["RETURN"] + scan_raw_types(toks[1:])
    if first in ("case", "default") or (
        len(toks) >= 2 and toks[0].kind == "ident" and toks[1].text == ":" and first not in KEYWORDS
    ):
        return ["JUMP_TARGET"]
    if first == "}" and len(toks) > 1:
        return raw_types_for_text(text[text.find("}") + 1 :])
    return scan_raw_types(toks)


# --------------------------------------------------------------------------- def/use extraction


def _depths(toks: Sequence[Token]) -> List[int]:
    d = 0
    out = []
    for t in toks:
        if t.text in (")", "]", "}"):
            d = max(d - 1, 0)
        out.append(d)
        if t.text in ("(", "[", "{"):
            d += 1
    return out


def _split_top(toks: Sequence[Token], sep: str) -> List[List[Token]]:
    parts: List[List[Token]] = [[]]
    for t, d in zip(toks, _depths(toks)):
        if d == 0 and t.text == sep:
            parts.append([])
        else:
            parts[-1].append(t)
    return parts


def _is_variable(toks: Sequence[Token], i: int) -> bool:
    t = toks[i]
    if t.kind != "ident" or t.text in KEYWORDS or t.text in TYPE_WORDS:
        return False
    if i > 0 and toks[i - 1].text in (".", "->", "::", "goto"):
        return False
    if i + 1 < len(toks) and toks[i + 1].text == "(":
        return False
    return True


def _plain_target(toks: Sequence[Token], k: int) -> Optional[int]:
    """Index of a plain identifier written by the operator at ``k``, if any."""
    j = k - 1
    if j < 0 or not _is_variable(toks, j):
        return None
    if j > 0:
        p = toks[j - 1]
        if p.text in (".", "->"):
            return None
        if p.text in ("*", "&") and not _is_operand_end(toks[j - 2] if j > 1 else None):
            return None
    return j


def _expr_defs_uses(toks: Sequence[Token]) -> Tuple[Set[str], Set[str], Set[str]]:
    defs: Set[str] = set()
    weak: Set[str] = set()
    uses: Set[str] = set()
    skip_use: Set[int] = set()
    depths = _depths(toks)
    for k, t in enumerate(toks):
        if t.kind != "punct":
            continue
        if t.text in _ASSIGN_OPS:
            j = _plain_target(toks, k)
            if j is not None:
                defs.add(toks[j].text)
                if t.text == "=":
                    skip_use.add(j)
        elif t.text in ("++", "--"):
            cand = None
            if k > 0 and _is_operand_end(toks[k - 1]):
                cand = _plain_target(toks, k)
            elif k + 1 < len(toks) and _is_variable(toks, k + 1):
                after = toks[k + 2].text if k + 2 < len(toks) else ""
                if after not in (".", "->", "["):
                    cand = k + 1
            if cand is not None:
                defs.add(toks[cand].text)
        elif t.text == "&" and depths[k] > 0 and k > 0 and toks[k - 1].text in ("(", ","):
            # &x passed as a call argument: the callee may write x
            if k + 1 < len(toks) and _is_variable(toks, k + 1):
                after = toks[k + 2].text if k + 2 < len(toks) else ""
                if after not in (".", "->", "["):
                    weak.add(toks[k + 1].text)
    for i in range(len(toks)):
        if i not in skip_use and _is_variable(toks, i):
            uses.add(toks[i].text)
    return defs, weak, uses


def _looks_like_declaration(toks: Sequence[Token]) -> bool:
    if not toks:
        return False
    t0 = toks[0]
    if t0.kind != "ident":
        return False
    if t0.text in TYPE_WORDS:
        return True
    if t0.text in KEYWORDS:
        return False
    if len(toks) < 2:
        return False
    t1 = toks[1]
    if t1.kind == "ident" and t1.text not in KEYWORDS:
        return True
    if t1.text == "::":
        return False
    if t1.text in ("*", "&"):
        j = 1
        while j < len(toks) and toks[j].text in ("*", "&", "const"):
            j += 1
        if j < len(toks) and toks[j].kind == "ident" and toks[j].text not in KEYWORDS:
            nxt = toks[j + 1].text if j + 1 < len(toks) else ";"
            return nxt in ("=", ";", ",", "[", ")") or j + 1 >= len(toks)
    return False


def _declarator_name(lhs: Sequence[Token]) -> Optional[int]:
    depths = _depths(lhs)
    cands = [
        i
        for i, t in enumerate(lhs)
        if t.kind == "ident" and t.text not in KEYWORDS and t.text not in TYPE_WORDS and depths[i] == 0
    ]
    if cands:
        return cands[-1]
    inner = [i for i, t in enumerate(lhs) if t.kind == "ident" and t.text not in KEYWORDS and depths[i] == 1]
    return inner[0] if inner else None


def _decl_defs_uses(toks: Sequence[Token]) -> Tuple[Set[str], Set[str], Set[str], bool]:
    defs: Set[str] = set()
    weak: Set[str] = set()
    uses: Set[str] = set()
    has_init = False
    for k, part in enumerate(_split_top(toks, ",")):
        pieces = _split_top(part, "=")
        lhs = pieces[0]
        if k == 0:
            # the leading type words belong to the first declarator only
            pass
        name_i = _declarator_name(lhs)
        if name_i is not None:
            defs.add(lhs[name_i].text)
            # array sizes and similar on the declarator side are uses
            for i in range(name_i + 1, len(lhs)):
                if _is_variable(lhs, i):
                    uses.add(lhs[i].text)
        if len(pieces) > 1:
            has_init = True
            init = [t for p in pieces[1:] for t in p]
            d, w, u = _expr_defs_uses(init)
            defs |= d
            weak |= w
            uses |= u
    return defs, weak, uses, has_init


def _header_params(toks: Sequence[Token]) -> Set[str]:
    try:
        open_i = next(i for i, t in enumerate(toks) if t.text == "(")
    except StopIteration:
        return set()
    depth = 0
    close_i = len(toks)
    for i in range(open_i, len(toks)):
        if toks[i].text == "(":
            depth += 1
        elif toks[i].text == ")":
            depth -= 1
            if depth == 0:
                close_i = i
                break
    params: Set[str] = set()
    for part in _split_top(toks[open_i + 1 : close_i], ","):
        if not part or (len(part) == 1 and part[0].text in ("void", "...")):
            continue
        i = _declarator_name(part)
        if i is not None:
            params.add(part[i].text)
    return params


# --------------------------------------------------------------------------- parser


@dataclass
class _Stmt:
    kind: str
    line: int
    toks: List[Token] = field(default_factory=list)
    body: List["_Stmt"] = field(default_factory=list)
    orelse: List["_Stmt"] = field(default_factory=list)
    init: List[Token] = field(default_factory=list)
    step: List[Token] = field(default_factory=list)
    name: str = ""
    unparsable: bool = False


class _Parser:
    def __init__(self, toks: List[Token]):
        self.toks = toks
        self.i = 0

    def peek(self, k: int = 0) -> Optional[Token]:
        j = self.i + k
        return self.toks[j] if j < len(self.toks) else None

    def take(self) -> Token:
        t = self.toks[self.i]
        self.i += 1
        return t

    def at(self, text: str) -> bool:
        t = self.peek()
        return t is not None and t.text == text

    def balanced(self, open_: str = "(", close: str = ")") -> List[Token]:
        """Consume a parenthesized group; returns the inner tokens."""
        if not self.at(open_):
            return []
        self.take()
        depth = 1
        inner: List[Token] = []
        while self.peek() is not None:
            t = self.take()
            if t.text == open_:
                depth += 1
            elif t.text == close:
                depth -= 1
                if depth == 0:
                    return inner
            inner.append(t)
        return inner

    def block_items(self) -> List[_Stmt]:
        items = []
        while self.peek() is not None and not self.at("}"):
            s = self.statement()
            if s is not None:
                items.append(s)
        return items

    def sub(self) -> List[_Stmt]:
        """A governed statement: a braced block flattens to its items."""
        if self.peek() is None:
            return []
        if self.at("{"):
            self.take()
            items = self.block_items()
            if self.at("}"):
                self.take()
            return items
        s = self.statement()
        return [s] if s is not None else []

    def statement(self) -> Optional[_Stmt]:
        t = self.peek()
        if t is None:
            return None
        s = t.text
        if s == ";":
            self.take()
            return None
        if s == "{":
            self.take()
            items = self.block_items()
            if self.at("}"):
                self.take()
            return _Stmt("block", t.line, body=items)
        if s == "}":
            # stray closer; skip it
            self.take()
            return None
        if t.kind == "ident":
            if s == "if":
                self.take()
                cond = self.balanced()
                then = self.sub()
                orelse: List[_Stmt] = []
                if self.at("else"):
                    self.take()
                    orelse = self.sub()
                return _Stmt("if", t.line, toks=cond, body=then, orelse=orelse)
            if s in ("while", "switch"):
                self.take()
                cond = self.balanced()
                return _Stmt(s, t.line, toks=cond, body=self.sub())
            if s == "for":
                self.take()
                inner = self.balanced()
                parts = _split_top(inner, ";")
                parts += [[]] * (3 - len(parts))
                return _Stmt("for", t.line, init=parts[0], toks=parts[1], step=parts[2], body=self.sub())
            if s == "do":
                self.take()
                body = self.sub()
                line = t.line
                cond: List[Token] = []
                if self.at("while"):
                    line = self.take().line
                    cond = self.balanced()
                if self.at(";"):
                    self.take()
                return _Stmt("do", line, toks=cond, body=body)
            if s in ("return", "break", "continue", "goto"):
                self.take()
                toks, ok = self.until_semicolon()
                st = _Stmt(s, t.line, toks=toks, unparsable=not ok)
                if s == "goto" and toks:
                    st.name = toks[0].text
                return st
            if s in ("case", "default"):
                self.take()
                toks = []
                while self.peek() is not None and not self.at(":"):
                    toks.append(self.take())
                if self.at(":"):
                    self.take()
                return _Stmt("case", t.line, toks=toks)
            nxt = self.peek(1)
            if nxt is not None and nxt.text == ":" and s not in KEYWORDS:
                self.take()
                self.take()
                return _Stmt("label", t.line, name=s)
            if s == "else":
                # dangling else without if; treat the rest as its own statement
                self.take()
                return self.statement()
        return self.simple()

    def until_semicolon(self) -> Tuple[List[Token], bool]:
        toks: List[Token] = []
        depth = 0
        while self.peek() is not None:
            t = self.peek()
            if depth == 0 and t.text == ";":
                self.take()
                return toks, True
            if depth == 0 and t.text == "}":
                return toks, False
            if t.text in ("(", "[", "{"):
                depth += 1
            elif t.text in (")", "]", "}"):
                depth -= 1
            toks.append(self.take())
        return toks, False

    def simple(self) -> _Stmt:
        start = self.peek()
        toks: List[Token] = []
        depth = 0
        while self.peek() is not None:
            t = self.peek()
            if depth == 0 and t.text == ";":
                self.take()
                return _Stmt("simple", start.line, toks=toks, unparsable=_has_invalid(toks))
            if depth == 0 and t.text == "}":
                break
            if depth == 0 and t.text == "{":
                prev = toks[-1].text if toks else ""
                if prev not in ("=", ",", "(", "{", "return"):
                    # statement-like macro followed by a block, e.g. list_for_each(...) { ... }
                    return _Stmt("macro", start.line, toks=toks, body=self.sub())
            if t.text in ("(", "[", "{"):
                depth += 1
            elif t.text in (")", "]", "}"):
                depth -= 1
            toks.append(self.take())
        return _Stmt("simple", start.line, toks=toks, unparsable=True)


def _has_invalid(toks: Sequence[Token]) -> bool:
    return any(t.kind == "invalid" for t in toks)


def _find_function_header(toks: List[Token]) -> Optional[int]:
    """Index of the body's '{' if the tokens start with a function definition."""
    depth = 0
    for i, t in enumerate(toks):
        if t.text in ("(", "["):
            depth += 1
        elif t.text in (")", "]"):
            depth -= 1
        elif depth == 0 and t.text in (";", "="):
            return None
        elif depth == 0 and t.text == "{":
            head = toks[:i]
            if not head or head[0].text in _CONTROL_WORDS:
                return None
            # skip trailing qualifiers such as const / noexcept / attribute macros
            j = len(head) - 1
            while j >= 0 and head[j].kind == "ident" and head[j].text in ("const", "override", "noexcept", "final"):
                j -= 1
            if j < 0 or head[j].text != ")":
                return None
            # find the matching '(' and require a name before it
            d = 0
            while j >= 0:
                if head[j].text == ")":
                    d += 1
                elif head[j].text == "(":
                    d -= 1
                    if d == 0:
                        break
                j -= 1
            if j <= 0 or head[j - 1].kind != "ident" or head[j - 1].text in KEYWORDS:
                return None
            return i
    return None


# --------------------------------------------------------------------------- CFG + reaching definitions


@dataclass
class _Point:
    line: Optional[int]
    defs: Set[str] = field(default_factory=set)
    weak: Set[str] = field(default_factory=set)
    uses: Set[str] = field(default_factory=set)


class _CfgBuilder:
    def __init__(self) -> None:
        self.points: List[_Point] = []
        self.succ: List[Set[int]] = []
        self.labels: Dict[str, int] = {}
        self.gotos: List[Tuple[int, str]] = []
        self.loop_ctx: List[dict] = []
        self.exit = self.point(None)
        self.raw: Dict[int, List[str]] = {}
        self.control: Set[Tuple[int, int]] = set()
        self.node_lines: Set[int] = set()
        self.unparsable_lines: Set[int] = set()

    def point(self, line: Optional[int], defs=(), weak=(), uses=()) -> int:
        self.points.append(_Point(line, set(defs), set(weak), set(uses)))
        self.succ.append(set())
        return len(self.points) - 1

    def connect(self, preds: Iterable[int], p: int) -> None:
        for q in preds:
            self.succ[q].add(p)

    def note(self, line: int, raw: Iterable[str]) -> None:
        self.node_lines.add(line)
        self.raw.setdefault(line, []).extend(raw)

    def expr_point(self, line: int, toks: Sequence[Token], preds: List[int]) -> int:
        if _looks_like_declaration(toks):
            d, w, u, _ = _decl_defs_uses(toks)
        else:
            d, w, u = _expr_defs_uses(toks)
        p = self.point(line, d, w, u)
        self.connect(preds, p)
        return p

    def govern(self, header_line: int, children: Sequence[_Stmt]) -> None:
        for c in children:
            if c.kind == "block":
                self.govern(header_line, c.body)
            elif c.line != header_line:
                self.control.add((header_line, c.line))

    def emit_list(self, stmts: Sequence[_Stmt], preds: List[int]) -> List[int]:
        for s in stmts:
            preds = self.emit(s, preds)
        return preds

    def emit(self, s: _Stmt, preds: List[int]) -> List[int]:
        k = s.kind
        if k == "block":
            return self.emit_list(s.body, preds)
        if k == "simple":
            if s.unparsable:
                warnings.warn(f"could not parse statement on line {s.line}", stacklevel=4)
                self.unparsable_lines.add(s.line)
                _, _, uses = _expr_defs_uses(s.toks)
                p = self.point(s.line, uses=uses)
                self.connect(preds, p)
                self.note(s.line, ["UNKNOWN"])
                return [p]
            is_decl = _looks_like_declaration(s.toks)
            if is_decl:
                _, _, _, has_init = _decl_defs_uses(s.toks)
                init_toks = [t for part in _split_top(s.toks, ",") for p_ in _split_top(part, "=")[1:] for t in p_]
                raw = (["CALL:<operator>.assignment"] if has_init else ["LOCAL"]) + scan_raw_types(init_toks)
            else:
                raw = scan_raw_types(s.toks)
            self.note(s.line, raw)
            return [self.expr_point(s.line, s.toks, preds)]
        if k == "if":
            self.note(s.line, ["CONTROL_STRUCTURE:IF"] + scan_raw_types(s.toks))
            c = self.expr_point(s.line, s.toks, preds)
            self.govern(s.line, s.body)
            self.govern(s.line, s.orelse)
            out = self.emit_list(s.body, [c])
            out += self.emit_list(s.orelse, [c]) if s.orelse else [c]
            return out
        if k in ("while", "macro"):
            raw = ["CONTROL_STRUCTURE:WHILE"] if k == "while" else []
            self.note(s.line, raw + scan_raw_types(s.toks))
            c = self.expr_point(s.line, s.toks, preds)
            self.govern(s.line, s.body)
            ctx = {"breaks": [], "continues": []}
            self.loop_ctx.append(ctx)
            out = self.emit_list(s.body, [c])
            self.loop_ctx.pop()
            self.connect(out + ctx["continues"], c)
            return [c] + ctx["breaks"]
        if k == "do":
            self.note(s.line, ["CONTROL_STRUCTURE:DO"] + scan_raw_types(s.toks))
            entry = self.point(None)
            self.connect(preds, entry)
            self.govern(s.line, s.body)
            ctx = {"breaks": [], "continues": []}
            self.loop_ctx.append(ctx)
            out = self.emit_list(s.body, [entry])
            self.loop_ctx.pop()
            c = self.expr_point(s.line, s.toks, out + ctx["continues"])
            self.connect([c], entry)
            return [c] + ctx["breaks"]
        if k == "for":
            self.note(
                s.line,
                ["CONTROL_STRUCTURE:FOR"] + scan_raw_types(s.init) + scan_raw_types(s.toks) + scan_raw_types(s.step),
            )
            i = self.expr_point(s.line, s.init, preds)
            c = self.expr_point(s.line, s.toks, [i])
            self.govern(s.line, s.body)
            ctx = {"breaks": [], "continues": []}
            self.loop_ctx.append(ctx)
            out = self.emit_list(s.body, [c])
            self.loop_ctx.pop()
            st = self.expr_point(s.line, s.step, out + ctx["continues"])
            self.connect([st], c)
            return ([c] if s.toks else []) + ctx["breaks"]
        if k == "switch":
            self.note(s.line, ["CONTROL_STRUCTURE:SWITCH"] + scan_raw_types(s.toks))
            c = self.expr_point(s.line, s.toks, preds)
            self.govern(s.line, s.body)
            ctx = {"breaks": [], "continues": None, "switch": c, "default": False}
            self.loop_ctx.append(ctx)
            out = self.emit_list(s.body, [])
            self.loop_ctx.pop()
            # continue inside a switch belongs to the enclosing loop
            return out + ctx["breaks"] + ([] if ctx["default"] else [c])
        if k == "case":
            self.note(s.line, ["JUMP_TARGET"])
            p = self.point(s.line)
            self.connect(preds, p)
            sw = next((c for c in reversed(self.loop_ctx) if "switch" in c), None)
            if sw is not None:
                self.connect([sw["switch"]], p)
                if s.toks == [] or (s.toks and s.toks[0].text == "default") or s.kind == "case" and not s.toks:
                    sw["default"] = True
            return [p]
        if k == "label":
            self.note(s.line, ["JUMP_TARGET"])
            p = self.point(s.line)
            self.connect(preds, p)
            self.labels[s.name] = p
            return [p]
        if k == "return":
            self.note(s.line, ["RETURN"] + scan_raw_types(s.toks))
            p = self.expr_point(s.line, s.toks, preds)
            self.connect([p], self.exit)
            return []
        if k in ("break", "continue"):
            self.note(s.line, [f"CONTROL_STRUCTURE:{k.upper()}"])
            p = self.point(s.line)
            self.connect(preds, p)
            for ctx in reversed(self.loop_ctx):
                if k == "break":
                    ctx["breaks"].append(p)
                    break
                if ctx["continues"] is not None:
                    ctx["continues"].append(p)
                    break
            return []
        if k == "goto":
            self.note(s.line, ["CONTROL_STRUCTURE:GOTO"])
            p = self.point(s.line)
            self.connect(preds, p)
            self.gotos.append((p, s.name))
            return []
        raise AssertionError(f"unknown statement kind {k}")

    def finish(self) -> None:
        for p, name in self.gotos:
            self.succ[p].add(self.labels.get(name, self.exit))

    def reaching_definitions(self) -> List[Set[Tuple[str, int]]]:
        n = len(self.points)
        preds: List[List[int]] = [[] for _ in range(n)]
        for p, ss in enumerate(self.succ):
            for q in ss:
                preds[q].append(p)
        gen = []
        for pt in self.points:
            gen.append({(v, pt.line) for v in pt.defs | pt.weak} if pt.line is not None else set())
        ins: List[Set[Tuple[str, int]]] = [set() for _ in range(n)]
        outs: List[Set[Tuple[str, int]]] = [set(g) for g in gen]
        work = list(range(n))
        queued = [True] * n
        while work:
            p = work.pop(0)
            queued[p] = False
            new_in: Set[Tuple[str, int]] = set()
            for q in preds[p]:
                new_in |= outs[q]
            ins[p] = new_in
            kill = self.points[p].defs
            new_out = gen[p] | {d for d in new_in if d[0] not in kill}
            if new_out != outs[p]:
                outs[p] = new_out
                for s in self.succ[p]:
                    if not queued[s]:
                        queued[s] = True
                        work.append(s)
        return ins


def _line_text(code_lines: Sequence[str], line: int) -> str:
    return code_lines[line - 1].strip() if 0 < line <= len(code_lines) else ""


def build_graph_builtin(code: str, function_id: str = "") -> StatementGraph:
    """Statement graph for a C function (or bare statement list) in the supported subset.

    Control edges run from each control-structure header (and the function
    header) to the statements it directly governs. Data edges are def-use
    pairs from a reaching-definitions pass over the statement CFG. Writes
    through pointers, fields or array elements are not tracked as
    definitions.
    """
    toks = lex(code).tokens
    body_start = _find_function_header(toks)
    b = _CfgBuilder()
    if body_start is not None:
        head = toks[:body_start]
        hline = head[0].line
        b.note(hline, ["METHOD"])
        entry = b.point(hline, defs=_header_params(head))
        parser = _Parser(toks[body_start + 1 :])
        items = parser.block_items()
        if parser.at("}"):
            parser.take()
        # anything after the closing brace is parsed as extra top-level statements
        while parser.peek() is not None:
            s = parser.statement()
            if s is not None:
                items.append(s)
        b.govern(hline, items)
    else:
        entry = b.point(None)
        parser = _Parser(toks)
        items = []
        while parser.peek() is not None:
            s = parser.statement()
            if s is not None:
                items.append(s)
    out = b.emit_list(items, [entry])
    b.connect(out, b.exit)
    b.finish()

    ins = b.reaching_definitions()
    edges: List[DependencyEdge] = []
    for p, pt in enumerate(b.points):
        if pt.line is None:
            continue
        for v in sorted(pt.uses):
            for var, dline in ins[p]:
                if var == v and dline != pt.line and dline not in b.unparsable_lines:
                    edges.append(DependencyEdge(dline, pt.line, EdgeKind.DATA, v))
    for src, dst in sorted(b.control):
        if src != dst:
            edges.append(DependencyEdge(src, dst, EdgeKind.CONTROL))

    lines = code.split("\n")
    nodes = []
    for line in sorted(b.node_lines):
        text = _line_text(lines, line)
        if not text:
            continue
        raw = tuple(b.raw.get(line, ()))
        node = StatementNode(line, text, StatementType.OTHER_OPERATION, raw)
        if line in b.unparsable_lines and len(raw) == 1:
            stype = StatementType.OTHER_OPERATION
        else:
            stype = classify_statement(node)
        nodes.append(replace(node, stmt_type=stype))
    present = {n.line_no for n in nodes}
    edges = [e for e in edges if e.src_line in present and e.dst_line in present]
    return _make_graph(function_id, nodes, edges)


# --------------------------------------------------------------------------- import


def _outer_callee(toks: Sequence[Token]) -> Optional[str]:
    """Callee name when the whole expression is a call such as ``a->f(x)``."""
    if len(toks) < 3 or toks[-1].text != ")":
        return None
    depth = 0
    open_i = None
    for i in range(len(toks) - 1, -1, -1):
        if toks[i].text == ")":
            depth += 1
        elif toks[i].text == "(":
            depth -= 1
            if depth == 0:
                open_i = i
                break
    if open_i is None or open_i == 0:
        return None
    name = toks[open_i - 1]
    if name.kind != "ident" or name.text in KEYWORDS:
        return None
    # anything but member access in front means the call is a sub-expression
    for t in toks[: open_i - 1]:
        if t.kind == "punct" and t.text not in (".", "->"):
            return None
    return name.text


def _normalize_raw_type(node_type: str, code: str) -> str:
    t = node_type.strip()
    if ":" in t:
        return t
    up = t.upper()
    if up == "CALL":
        toks = lex(code, skip_directives=False).tokens
        callee = _outer_callee(toks)
        if callee is not None:
            return f"CALL:{callee}"
        ops = scan_raw_types(toks)
        if ops:
            return min(ops, key=lambda r: _OPERATOR_PRIORITY.index(_raw_category(r)[1] or StatementType.OTHER_OPERATION)
                       if _raw_category(r)[0] == 2 else 99)
        return "CALL"
    if up == "CONTROL_STRUCTURE":
        toks = lex(code, skip_directives=False).tokens
        kw = toks[0].text.upper() if toks else ""
        return f"CONTROL_STRUCTURE:{kw}" if kw else "CONTROL_STRUCTURE"
    return up


def import_graph(export: Union[dict, str, Path], code: str, function_id: str = "") -> StatementGraph:
    """Build a line-level graph from a GraphExport JSON object or file.

    Sub-line nodes sharing a line are merged (raw types in node-id order),
    nodes without a line number are dropped, edges are re-targeted to line
    pairs and deduplicated, and self-edges created by merging are removed.
    """
    if not isinstance(export, dict):
        with open(export, encoding="utf-8") as fh:
            export = json.load(fh)
    code_lines = code.split("\n")
    n_lines = len(code_lines)
    node_line: Dict[int, Optional[int]] = {}
    by_line: Dict[int, List[Tuple[int, str]]] = {}
    for raw in export.get("nodes", []):
        nid = int(raw["id"])
        line = raw.get("line")
        node_line[nid] = line
        if line is None:
            continue
        line = int(line)
        if line < 1 or line > n_lines:
            raise GraphError(f"node {nid} is on line {line}, but the code has {n_lines} lines")
        by_line.setdefault(line, []).append((nid, _normalize_raw_type(str(raw.get("type", "")), str(raw.get("code", "")))))

    nodes = []
    for line, subs in by_line.items():
        text = _line_text(code_lines, line)
        if not text:
            logger.warning("dropping node(s) on blank line %d of %s", line, function_id)
            continue
        raw_types = tuple(t for _, t in sorted(subs))
        node = StatementNode(line, text, StatementType.OTHER_OPERATION, raw_types)
        nodes.append(replace(node, stmt_type=classify_statement(node)))
    present = {n.line_no for n in nodes}

    kinds = {"CDG": EdgeKind.CONTROL, "DDG": EdgeKind.DATA}
    edges = []
    for raw in export.get("edges", []):
        src, dst = int(raw["src"]), int(raw["dst"])
        for nid in (src, dst):
            if nid not in node_line:
                raise GraphError(f"edge references unknown node id {nid}")
        etype = str(raw.get("etype", "")).upper()
        if etype not in kinds:
            raise GraphError(f"unsupported edge type {raw.get('etype')!r}")
        sl, dl = node_line[src], node_line[dst]
        if sl is None or dl is None or sl == dl:
            continue
        if sl not in present or dl not in present:
            continue
        var = raw.get("var") if kinds[etype] is EdgeKind.DATA else None
        edges.append(DependencyEdge(int(sl), int(dl), kinds[etype], var))
    return _make_graph(function_id, nodes, edges)


# --------------------------------------------------------------------------- graph transforms


def add_self_loops(graph: StatementGraph) -> StatementGraph:
    if graph.self_loops_added:
        raise GraphError("self loops were already added to this graph")
    loops = [DependencyEdge(n.line_no, n.line_no, EdgeKind.SELF) for n in graph.nodes]
    return _make_graph(graph.function_id, graph.nodes, list(graph.edges) + loops, True)


def view(graph: StatementGraph, kind: str) -> StatementGraph:
    """``"PDG"`` keeps every edge; ``"CDG"`` drops data-dependency edges."""
    kind = kind.upper()
    if kind == "PDG":
        return graph
    if kind != "CDG":
        raise ValueError(f"unknown graph view {kind!r}")
    edges = tuple(e for e in graph.edges if e.kind is not EdgeKind.DATA)
    return replace(graph, edges=edges)


def has_dependencies(graph: StatementGraph) -> bool:
    return any(e.kind is not EdgeKind.SELF and e.src_line != e.dst_line for e in graph.edges)


def save_graphs(graphs: Iterable[StatementGraph], path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for g in graphs:
            fh.write(json.dumps(g.to_json()) + "\n")


def load_graphs(path: Union[str, Path]) -> Dict[str, StatementGraph]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            if raw.strip():
                g = StatementGraph.from_json(json.loads(raw))
                out[g.function_id] = g
    return out

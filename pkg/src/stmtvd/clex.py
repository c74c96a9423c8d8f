"""A small, error-tolerant lexer for C/C++ function bodies.

Only what the rest of the package needs: comment blanking, a token stream
with line numbers, and a note on whether the text ended inside a literal.
"""

from __future__ import annotations

import re
import warnings
from dataclasses import dataclass
from typing import Iterator, List, Optional

__all__ = ["Token", "LexResult", "strip_comments", "lex", "KEYWORDS", "TYPE_WORDS"]

# longest first, so the alternation is greedy in the right way
PUNCTUATORS = sorted(
    """
    ... <<= >>= -> ++ -- << >> <= >= == != && || += -= *= /= %= &= ^= |= ::
    ## { } [ ] ( ) ; , : ? . + - * / % & | ^ ~ ! = < > #
    """.split(),
    key=len,
    reverse=True,
)

KEYWORDS = frozenset(
    """
    auto break case char const continue default do double else enum extern
    float for goto if inline int long register restrict return short signed
    sizeof static struct switch typedef union unsigned void volatile while
    _Bool bool true false NULL nullptr class new delete this template typename
    namespace using public private protected virtual operator
    """.split()
)

# words that can start a declaration
TYPE_WORDS = frozenset(
    """
    char short int long float double void signed unsigned const volatile
    static extern register auto struct union enum _Bool bool inline restrict
    """.split()
)

_IDENT = re.compile(r"[A-Za-z_$][A-Za-z0-9_$]*")
_NUMBER = re.compile(r"(?:0[xX][0-9a-fA-F']+|\d[\d']*\.?\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?)[uUlLfF]*")


@dataclass(frozen=True)
class Token:
    kind: str  # ident | number | string | char | punct | invalid
    text: str
    line: int  # 1-based
    offset: int


@dataclass
class LexResult:
    tokens: List[Token]
    # "string", "char", "comment" when the text ends inside one of those
    unterminated: Optional[str] = None


def strip_comments(code: str) -> str:
    """Blank out ``//`` and ``/* */`` comments, keeping newlines and columns.

    String and character literals are left alone, so ``"a // b"`` survives.
    An unterminated block comment blanks everything to the end of the text
    and emits a warning.
    """
    out = list(code)
    i, n = 0, len(code)
    while i < n:
        c = code[i]
        if c == "/" and i + 1 < n and code[i + 1] == "/":
            j = i
            while j < n and code[j] != "\n":
                # backslash-newline continues a line comment
                if code[j] == "\\" and j + 1 < n and code[j + 1] == "\n":
                    out[j] = " "
                    j += 2
                    continue
                out[j] = " "
                j += 1
            i = j
        elif c == "/" and i + 1 < n and code[i + 1] == "*":
            end = code.find("*/", i + 2)
            stop = n if end < 0 else end + 2
            for j in range(i, stop):
                if code[j] != "\n":
                    out[j] = " "
            if end < 0:
                warnings.warn("unterminated block comment; blanked to end of text", stacklevel=2)
            i = stop
        elif c in "\"'":
            i = _skip_literal(code, i)
        else:
            i += 1
    return "".join(out)


def _skip_literal(code: str, i: int) -> int:
    quote = code[i]
    j = i + 1
    n = len(code)
    while j < n:
        ch = code[j]
        if ch == "\\":
            j += 2
            continue
        if ch == quote:
            return j + 1
        if ch == "\n":
            # C literals cannot span lines; stop here
            return j
        j += 1
    return n


def _line_starts(code: str) -> List[int]:
    starts = [0]
    for m in re.finditer("\n", code):
        starts.append(m.end())
    return starts


def lex(code: str, skip_directives: bool = True) -> LexResult:
    """Tokenize ``code``. Comments are skipped; so are preprocessor lines."""
    tokens: List[Token] = []
    unterminated: Optional[str] = None
    i, n = 0, len(code)
    line = 1
    at_line_start = True
    while i < n:
        c = code[i]
        if c == "\n":
            line += 1
            i += 1
            at_line_start = True
            continue
        if c in " \t\r\f\v":
            i += 1
            continue
        if c == "\\" and i + 1 < n and code[i + 1] == "\n":
            i += 2
            line += 1
            continue
        if code.startswith("//", i):
            while i < n and code[i] != "\n":
                i += 1
            continue
        if code.startswith("/*", i):
            end = code.find("*/", i + 2)
            if end < 0:
                line += code.count("\n", i)
                unterminated = "comment"
                break
            line += code.count("\n", i, end)
            i = end + 2
            continue
        if c == "#" and at_line_start and skip_directives:
            while i < n and code[i] != "\n":
                if code[i] == "\\" and i + 1 < n and code[i + 1] == "\n":
                    line += 1
                    i += 2
                    continue
                i += 1
            continue
        at_line_start = False
        if c in "\"'":
            j = i + 1
            closed = False
            while j < n:
                ch = code[j]
                if ch == "\\" and j + 1 < n:
                    if code[j + 1] == "\n":
                        line += 1
                    j += 2
                    continue
                if ch == c:
                    closed = True
                    j += 1
                    break
                if ch == "\n":
                    break
                j += 1
            kind = "string" if c == '"' else "char"
            tokens.append(Token(kind, code[i:j], line, i))
            if not closed:
                if j >= n:
                    unterminated = kind
                    break
                # unterminated on this line; keep lexing the next
            i = j
            continue
        m = _IDENT.match(code, i)
        if m:
            # prefixed literals such as L"x" or u8"x"
            if m.end() < n and code[m.end()] in "\"'" and m.group() in ("L", "u", "U", "u8", "R"):
                i = m.end()
                continue
            tokens.append(Token("ident", m.group(), line, i))
            i = m.end()
            continue
        m = _NUMBER.match(code, i)
        if m and m.end() > i:
            tokens.append(Token("number", m.group(), line, i))
            i = m.end()
            continue
        for p in PUNCTUATORS:
            if code.startswith(p, i):
                tokens.append(Token("punct", p, line, i))
                i += len(p)
                break
        else:
            tokens.append(Token("invalid", c, line, i))
            i += 1
    return LexResult(tokens, unterminated)


def iter_texts(tokens: List[Token]) -> Iterator[str]:
    for t in tokens:
        yield t.text

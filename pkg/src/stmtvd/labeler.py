"""Statement-level ground truth from a fix commit's before/after code.

The two versions are aligned into one merged listing. Blanking the added
lines gives a before-view, blanking the deleted lines an after-view; both
share the merged line numbering, so dependencies found in the after-view
can be mapped back onto before-version lines.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple, Union

from .codegraph import EdgeKind, StatementGraph
from .corpus import FunctionSample

CONTEXT, DELETED, ADDED = "context", "deleted", "added"


@dataclass(frozen=True)
class MergedLine:
    origin: str
    # context lines carry both texts; they can differ in whitespace only
    before_text: Optional[str]
    after_text: Optional[str]

    @property
    def text(self) -> str:
        return self.before_text if self.before_text is not None else self.after_text  # type: ignore[return-value]


@dataclass(frozen=True)
class DiffResult:
    merged_lines: Tuple[MergedLine, ...]
    before_line_of: Dict[int, int]  # merged index (1-based) -> before line
    after_line_of: Dict[int, int]

    def lines_with(self, origin: str) -> List[int]:
        return [i for i, m in enumerate(self.merged_lines, start=1) if m.origin == origin]

    @property
    def deleted(self) -> List[int]:
        return self.lines_with(DELETED)

    @property
    def added(self) -> List[int]:
        return self.lines_with(ADDED)

    def before_text(self) -> str:
        return "\n".join(m.before_text for m in self.merged_lines if m.origin != ADDED)  # type: ignore[misc]

    def after_text(self) -> str:
        return "\n".join(m.after_text for m in self.merged_lines if m.origin != DELETED)  # type: ignore[misc]

    def before_view(self) -> str:
        """Merged listing with added lines blanked."""
        return "\n".join("" if m.origin == ADDED else m.before_text for m in self.merged_lines)  # type: ignore[misc]

    def after_view(self) -> str:
        """Merged listing with deleted lines blanked."""
        return "\n".join("" if m.origin == DELETED else m.after_text for m in self.merged_lines)  # type: ignore[misc]


def _norm(line: str) -> str:
    return " ".join(line.split())


def _lcs_pairs(a: Sequence[str], b: Sequence[str]) -> List[Tuple[int, int]]:
    n, m = len(a), len(b)
    # dp[i][j] = LCS length of a[i:], b[j:]
    dp = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n - 1, -1, -1):
        row, nxt = dp[i], dp[i + 1]
        for j in range(m - 1, -1, -1):
            row[j] = nxt[j + 1] + 1 if a[i] == b[j] else max(nxt[j], row[j + 1])
    pairs = []
    i = j = 0
    while i < n and j < m:
        if a[i] == b[j]:
            pairs.append((i, j))
            i += 1
            j += 1
        elif dp[i + 1][j] >= dp[i][j + 1]:
            i += 1
        else:
            j += 1
    return pairs


def compute_diff(before: str, after: str) -> DiffResult:
    """Line-level LCS diff; lines compare equal after whitespace normalization.

    Within a changed hunk deleted lines come before added lines.
    """
    a = before.split("\n")
    b = after.split("\n")
    na, nb = [_norm(x) for x in a], [_norm(x) for x in b]
    # trim the common prefix and suffix first; the DP is quadratic
    p = 0
    while p < len(a) and p < len(b) and na[p] == nb[p]:
        p += 1
    s = 0
    while s < len(a) - p and s < len(b) - p and na[len(a) - 1 - s] == nb[len(b) - 1 - s]:
        s += 1
    mid = _lcs_pairs(na[p : len(a) - s], nb[p : len(b) - s])
    matches = [(i, i) for i in range(p)]
    matches += [(i + p, j + p) for i, j in mid]
    matches += [(len(a) - s + k, len(b) - s + k) for k in range(s)]

    merged: List[MergedLine] = []
    bi = ai = 0

    def flush(to_a: int, to_b: int) -> None:
        nonlocal bi, ai
        while bi < to_a:
            merged.append(MergedLine(DELETED, a[bi], None))
            bi += 1
        while ai < to_b:
            merged.append(MergedLine(ADDED, None, b[ai]))
            ai += 1

    for i, j in matches:
        flush(i, j)
        merged.append(MergedLine(CONTEXT, a[i], b[j]))
        bi, ai = i + 1, j + 1
    flush(len(a), len(b))

    before_of: Dict[int, int] = {}
    after_of: Dict[int, int] = {}
    bl = al = 0
    for k, m in enumerate(merged, start=1):
        if m.origin != ADDED:
            bl += 1
            before_of[k] = bl
        if m.origin != DELETED:
            al += 1
            after_of[k] = al
    return DiffResult(tuple(merged), before_of, after_of)


def dependent_lines(after_graph: StatementGraph, added: Iterable[int], deps: str = "both") -> Set[int]:
    """Lines one dependency edge away from an added line.

    ``deps="out"`` follows edges leaving an added line, ``"in"`` edges
    arriving at one, ``"both"`` takes the union. Self loops are ignored and
    the added lines themselves are never returned.
    """
    if deps not in ("both", "in", "out"):
        raise ValueError(f"deps must be 'both', 'in' or 'out', not {deps!r}")
    added = set(added)
    out: Set[int] = set()
    for e in after_graph.edges:
        if e.kind is EdgeKind.SELF or e.src_line == e.dst_line:
            continue
        if deps in ("both", "out") and e.src_line in added:
            out.add(e.dst_line)
        if deps in ("both", "in") and e.dst_line in added:
            out.add(e.src_line)
    return out - added


@dataclass(frozen=True)
class LabelSet:
    function_id: str
    labels: Dict[int, int]  # before line -> 0/1 over every statement line
    provenance: Dict[int, str] = field(default_factory=dict)

    @property
    def vulnerable_lines(self) -> List[int]:
        return sorted(k for k, v in self.labels.items() if v)

    def to_row(self) -> dict:
        return {
            "id": self.function_id,
            "vul_lines": self.vulnerable_lines,
            "provenance": {str(k): self.provenance[k] for k in sorted(self.provenance)},
        }


def derive_labels(
    sample: FunctionSample,
    after_graph: Optional[StatementGraph],
    diff: Optional[DiffResult],
    before_graph: StatementGraph,
    deps: str = "both",
) -> LabelSet:
    """Label before-version statements: deleted lines plus dependents of added lines.

    ``after_graph`` must be built on ``diff.after_view()`` so that its line
    numbers are merged indices. Only lines that are statement nodes of
    ``before_graph`` can receive a label; a deleted line wins over a
    dependent one.
    """
    statement_lines = set(before_graph.lines)
    labels = {ln: 0 for ln in statement_lines}
    prov: Dict[int, str] = {}
    if not sample.function_vulnerable or diff is None:
        return LabelSet(sample.id, labels, prov)
    for k in diff.deleted:
        ln = diff.before_line_of[k]
        if ln in statement_lines:
            labels[ln] = 1
            prov[ln] = "deleted"
    if after_graph is not None and diff.added:
        for k in sorted(dependent_lines(after_graph, diff.added, deps)):
            ln = diff.before_line_of.get(k)
            if ln is None or ln not in statement_lines or ln in prov:
                continue
            labels[ln] = 1
            prov[ln] = "dependent"
    return LabelSet(sample.id, labels, prov)


def write_labels(label_sets: Iterable[LabelSet], path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ls in label_sets:
            fh.write(json.dumps(ls.to_row()) + "\n")


def read_label_rows(path: Union[str, Path]) -> Dict[str, dict]:
    rows = {}
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            if raw.strip():
                row = json.loads(raw)
                rows[row["id"]] = row
    return rows


def label_sample(sample: FunctionSample, build=None, deps: str = "both") -> Tuple[LabelSet, StatementGraph]:
    """Diff, build both graphs with ``build`` (builtin analyzer by default) and label.

    Returns the labels together with the before-version graph they refer to.
    """
    if build is None:
        from .codegraph import build_graph_builtin as build
    before_graph = build(sample.code_before, sample.id)
    if not sample.function_vulnerable:
        return derive_labels(sample, None, None, before_graph, deps), before_graph
    diff = compute_diff(sample.code_before, sample.code_after)
    after_graph = build(diff.after_view(), sample.id) if diff.added else None
    return derive_labels(sample, after_graph, diff, before_graph, deps), before_graph

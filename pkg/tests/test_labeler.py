from functools import lru_cache
from importlib import resources

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stmtvd.codegraph import DependencyEdge, EdgeKind, StatementGraph, StatementNode, StatementType, build_graph_builtin, import_graph
from stmtvd.corpus import FunctionSample
from stmtvd.labeler import compute_diff, dependent_lines, derive_labels, label_sample, read_label_rows, write_labels
from stmtvd.synthetic import planted_corpus

DATA = resources.files("stmtvd") / "data"


def fixture_sample():
    return FunctionSample("fig1", "linux", "c", DATA.joinpath("fig1_before.c").read_text(), DATA.joinpath("fig1_after.c").read_text(), 1)


def lcs_length(a, b):
    @lru_cache(maxsize=None)
    def go(i, j):
        if i == len(a) or j == len(b):
            return 0
        if a[i] == b[j]:
            return 1 + go(i + 1, j + 1)
        return max(go(i + 1, j), go(i, j + 1))

    return go(0, 0)


# --------------------------------------------------------------------------- diff


def test_identical_texts_are_all_context():
    d = compute_diff("a;\nb;\n", "a;\nb;\n")
    assert d.deleted == [] and d.added == []
    assert all(m.origin == "context" for m in d.merged_lines)


def test_one_modified_line():
    d = compute_diff("a;\nb;\nc;", "a;\nB;\nc;")
    assert [m.origin for m in d.merged_lines] == ["context", "deleted", "added", "context"]
    assert d.before_line_of[2] == 2 and d.after_line_of[3] == 2
    assert 3 not in d.before_line_of and 2 not in d.after_line_of


def test_whitespace_only_changes_are_context():
    d = compute_diff("if (a)\n\tb();", "if (a)\n    b();")
    assert d.deleted == [] and d.added == []


def test_fixture_diff():
    s = fixture_sample()
    d = compute_diff(s.code_before, s.code_after)
    assert [d.before_line_of[k] for k in d.deleted] == [22]
    assert d.added == [23]
    view = d.after_view().split("\n")
    assert view[21] == "" and "hrtimer_forward" in view[22]


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from(["a;", "b;", "c;", "  a;", "d();"]), max_size=9), st.lists(st.sampled_from(["a;", "b;", "c;", "e;"]), max_size=9))
def test_diff_projections_and_minimality(before_lines, after_lines):
    before, after = "\n".join(before_lines), "\n".join(after_lines)
    d = compute_diff(before, after)
    assert d.before_text() == before
    assert d.after_text() == after
    norm = lambda xs: [" ".join(x.split()) for x in xs]  # noqa: E731
    context = sum(m.origin == "context" for m in d.merged_lines)
    assert context == lcs_length(tuple(norm(before.split("\n"))), tuple(norm(after.split("\n"))))
    assert sorted(d.before_line_of.values()) == list(range(1, len(before.split("\n")) + 1))
    assert sorted(d.after_line_of.values()) == list(range(1, len(after.split("\n")) + 1))


# --------------------------------------------------------------------------- dependents


def graph(lines, edges):
    nodes = tuple(StatementNode(ln, "x;", StatementType.OTHER_OPERATION) for ln in lines)
    return StatementGraph("g", nodes, tuple(DependencyEdge(s, d, k) for s, d, k in edges))


def test_fixture_dependents():
    s = fixture_sample()
    d = compute_diff(s.code_before, s.code_after)
    after = import_graph(str(DATA / "fig2_after_view.graph.json"), d.after_view())
    assert dependent_lines(after, d.added) == {3, 19, 21}


def test_no_added_lines_or_isolated_added_line():
    g = graph([1, 2, 3], [(1, 2, EdgeKind.DATA)])
    assert dependent_lines(g, []) == set()
    assert dependent_lines(g, [3]) == set()


def test_direction_modes():
    g = graph([1, 2, 3, 4], [(1, 2, EdgeKind.DATA), (2, 3, EdgeKind.CONTROL), (2, 2, EdgeKind.SELF), (3, 4, EdgeKind.DATA)])
    assert dependent_lines(g, [2], "in") == {1}
    assert dependent_lines(g, [2], "out") == {3}
    assert dependent_lines(g, [2]) == {1, 3}
    with pytest.raises(ValueError):
        dependent_lines(g, [2], "sideways")


# --------------------------------------------------------------------------- labels


def test_fixture_labels_and_provenance():
    s = fixture_sample()
    d = compute_diff(s.code_before, s.code_after)
    before = import_graph(str(DATA / "fig2_before.graph.json"), s.code_before)
    after = import_graph(str(DATA / "fig2_after_view.graph.json"), d.after_view())
    ls = derive_labels(s, after, d, before)
    assert ls.vulnerable_lines == [3, 19, 21, 22]
    assert ls.provenance == {22: "deleted", 3: "dependent", 19: "dependent", 21: "dependent"}
    assert set(ls.labels) == set(before.lines)


def test_fixture_labels_with_builtin_analyzer():
    ls, _ = label_sample(fixture_sample())
    assert ls.vulnerable_lines == [3, 19, 21, 22]


def test_deleted_line_only():
    before = "int f(int a)\n{\n\ta = a + 1;\n\treturn a;\n}\n"
    after = "int f(int a)\n{\n\treturn a;\n}\n"
    ls, _ = label_sample(FunctionSample("d", "p", "c", before, after, 1))
    assert ls.vulnerable_lines == [3]
    assert ls.provenance == {3: "deleted"}


def test_non_vulnerable_sample_is_all_zero():
    s = fixture_sample()
    clean = FunctionSample("n", "p", "c", s.code_before, s.code_after, 0)
    ls, g = label_sample(clean)
    assert ls.vulnerable_lines == [] and set(ls.labels) == set(g.lines)


def test_labels_only_on_before_statements():
    s = fixture_sample()
    ls, g = label_sample(s, deps="both")
    assert set(ls.vulnerable_lines) <= set(g.lines)


def test_planted_corpus_labels_match_labeler():
    for p in planted_corpus(60, 3):
        ls, _ = label_sample(p.sample, build_graph_builtin, deps="out")
        assert tuple(ls.vulnerable_lines) == p.vulnerable_lines


def test_label_rows_round_trip(tmp_path):
    ls, _ = label_sample(fixture_sample())
    write_labels([ls], tmp_path / "labels.jsonl")
    rows = read_label_rows(tmp_path / "labels.jsonl")
    assert rows["fig1"]["vul_lines"] == [3, 19, 21, 22]
    assert rows["fig1"]["provenance"]["22"] == "deleted"

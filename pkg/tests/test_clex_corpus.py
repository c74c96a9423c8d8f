import json
import warnings
from collections import Counter
from importlib import resources

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from pygments.lexers import CLexer
from pygments.token import Comment

from stmtvd.clex import lex, strip_comments
from stmtvd.corpus import (
    CorpusError,
    DuplicateIdError,
    FunctionSample,
    clean,
    detect_truncation,
    ingest,
    is_cosmetic_change,
    make_cross_project_split,
    make_random_split,
    undersample_train,
    write_samples,
)


def row(i, **kw):
    r = {
        "id": f"x{i}",
        "project": "qemu",
        "commit_id": "abc",
        "cve_id": None,
        "func_before": "int f(void)\n{\n\treturn 0;\n}\n",
        "func_after": "int f(void)\n{\n\treturn 1;\n}\n",
        "vul": 1,
    }
    r.update(kw)
    return r


def write_rows(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    return path


def sample(i, vul=0, project="p", before="int f() { return 0; }\n", after=None):
    return FunctionSample(f"s{i}", project, "c", before, after if after is not None else before, vul)


# --------------------------------------------------------------------------- ingest


def test_ingest_keeps_file_order(tmp_path):
    path = write_rows(tmp_path / "d.jsonl", [row(3), row(1), row(2, extra={"a": 1})])
    samples = ingest(path)
    assert [s.id for s in samples] == ["x3", "x1", "x2"]
    assert samples[2].metadata == {"extra": '{"a": 1}'}


def test_missing_field_names_the_row(tmp_path):
    bad = row(2)
    del bad["func_before"]
    path = write_rows(tmp_path / "d.jsonl", [row(1), bad])
    with pytest.raises(CorpusError) as err:
        ingest(path)
    assert err.value.line_no == 2
    assert "func_before" in str(err.value)


def test_duplicate_id_rejects_file(tmp_path):
    path = write_rows(tmp_path / "d.jsonl", [row(1, id="x1"), row(2, id="x1")])
    with pytest.raises(DuplicateIdError):
        ingest(path)


def test_bad_json_and_label(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text('{"id": \n')
    with pytest.raises(CorpusError, match="line 1"):
        ingest(path)
    write_rows(path, [row(1, vul=2)])
    with pytest.raises(CorpusError, match="vul"):
        ingest(path)


def test_write_then_ingest_round_trip(tmp_path):
    samples = ingest(write_rows(tmp_path / "a.jsonl", [row(1), row(2, cve_id="CVE-1")]))
    write_samples(samples, tmp_path / "b.jsonl")
    assert ingest(tmp_path / "b.jsonl") == samples


# --------------------------------------------------------------------------- comments


def test_line_comment_blanked_to_same_length():
    assert strip_comments("int x; // note") == "int x;        "


def test_block_comment_keeps_line_numbers():
    code = "a = 1;\n/* one\n two\n three */\nb = 2;\n"
    out = strip_comments(code)
    assert out.split("\n")[0] == "a = 1;"
    assert out.split("\n")[4] == "b = 2;"
    assert out.count("\n") == code.count("\n")
    assert out.split("\n")[1:4] == [" " * 6, " " * 4, " " * 9]


def test_comment_markers_inside_literals_survive():
    code = 'p = "a // b"; c = \'/\'; q = "/* x */";'
    assert strip_comments(code) == code


def test_unterminated_block_comment_warns():
    with pytest.warns(UserWarning, match="unterminated"):
        out = strip_comments("a;\n/* open\nb;")
    assert out == "a;\n       \n  "


def _reference_blanking(code):
    """Blank what the pygments C lexer calls a comment (directives excluded)."""
    out = []
    for tok, text in CLexer(stripnl=False, ensurenl=False).get_tokens(code):
        if tok in (Comment.Single, Comment.Multiline):
            out.append("".join("\n" if c == "\n" else " " for c in text))
        else:
            out.append(text)
    return "".join(out)


def _fixture_functions():
    data = resources.files("stmtvd") / "data"
    codes = [data.joinpath("fig1_before.c").read_text(), data.joinpath("fig1_after.c").read_text()]
    for line in data.joinpath("demo_corpus.jsonl").read_text().splitlines():
        r = json.loads(line)
        codes += [r["func_before"], r["func_after"]]
    codes.append('/* lead */ int f(char *s) {\n\t// "not a string"\n\tputs("/* no */ // no"); /* a\n b */ return \'"\';\n}\n')
    return codes


def test_strip_comments_matches_reference_lexer():
    for code in _fixture_functions():
        assert strip_comments(code) == _reference_blanking(code)


@settings(max_examples=200, deadline=None)
@given(st.text(alphabet='ab /*"\'\\\n;', max_size=60))
def test_strip_comments_preserves_layout(code):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        out = strip_comments(code)
    assert len(out) == len(code)
    assert [i for i, c in enumerate(out) if c == "\n"] == [i for i, c in enumerate(code) if c == "\n"]
    # only comment characters change, and they become spaces
    assert all(o == c or o == " " for o, c in zip(out, code))
    assert strip_comments(out) == out


def test_lex_records_lines():
    toks = lex("int a;\n\n  b = a + 1;\n").tokens
    assert [(t.text, t.line) for t in toks][-6:] == [("b", 3), ("=", 3), ("a", 3), ("+", 3), ("1", 3), (";", 3)]


# --------------------------------------------------------------------------- cosmetic and truncation


def test_cosmetic_change_examples():
    assert is_cosmetic_change("if (a)\n\tb();\n", "if (a)\n    b();\n")
    assert not is_cosmetic_change("int count = 0;", "int total = 0;")
    before = strip_comments("x = 1; /* old text */")
    after = strip_comments("x = 1; /* new, longer text */")
    assert is_cosmetic_change(before, after)


def test_truncation_examples():
    assert not detect_truncation("void f() { return; }")
    assert detect_truncation("void f() { if (a) {")
    assert detect_truncation('void f() { puts("abc')
    assert detect_truncation("void f() { x = (a]; }")
    assert detect_truncation("void f() { /* cut")


def test_clean_reasons():
    cosmetic = sample(1, vul=1, before="int f() {\nreturn 0;\n}\n", after="int f() {\n    return 0;\n}\n")
    truncated = sample(2, vul=1, before="int f() { if (a) {", after="int f() { if (b) {")
    fine = sample(3, before="int f() { return 0; } // done\n")
    kept, report = clean([cosmetic, truncated, fine])
    assert (report.removed_cosmetic, report.removed_truncated, report.kept) == (1, 1, 1)
    assert kept[0].id == "s3"
    assert kept[0].code_before == "int f() { return 0; } " + " " * len("// done") + "\n"


def test_clean_is_idempotent():
    samples = [sample(i, vul=i % 2, before=f"int f() {{ return {i}; }} /* c */\n", after=f"int f() {{ return {i + 1}; }}\n") for i in range(6)]
    once, _ = clean(samples)
    twice, report = clean(once)
    assert twice == once and report.kept == len(once)


# --------------------------------------------------------------------------- splits


@pytest.mark.parametrize("n,sizes", [(100, (80, 10, 10)), (10, (8, 1, 1))])
def test_random_split_sizes(n, sizes):
    split = make_random_split([sample(i) for i in range(n)], 0)
    assert (len(split.train), len(split.validation), len(split.test)) == sizes


def test_random_split_is_deterministic_and_a_partition():
    samples = [sample(i) for i in range(57)]
    a = make_random_split(samples, 3)
    assert a == make_random_split(samples, 3)
    assert a != make_random_split(samples, 4)
    assert sorted(a.train + a.validation + a.test) == sorted(s.id for s in samples)


def test_random_split_needs_ten_samples():
    with pytest.raises(CorpusError):
        make_random_split([sample(i) for i in range(9)], 0)


def _split_with(train_vul, train_nonvul):
    samples = [sample(i, vul=1) for i in range(train_vul)] + [sample(100 + i) for i in range(train_nonvul)]
    samples += [sample(500 + i, vul=i % 2) for i in range(4)]
    from stmtvd.corpus import DatasetSplit

    split = DatasetSplit(
        train=tuple(s.id for s in samples[: train_vul + train_nonvul]),
        validation=("s500", "s501"),
        test=("s502", "s503"),
        split_kind="random",
        seed=0,
    )
    return split, samples


def test_undersampling_balances_training():
    split, samples = _split_with(5, 50)
    out = undersample_train(split, samples, 0)
    label = {s.id: s.function_vulnerable for s in samples}
    assert Counter(label[i] for i in out.train) == {1: 5, 0: 5}
    assert out.validation == split.validation and out.test == split.test
    assert out == undersample_train(split, samples, 0)


def test_undersampling_never_oversamples():
    split, samples = _split_with(5, 3)
    assert undersample_train(split, samples, 0) == split


def test_undersampling_needs_vulnerable_functions():
    split, samples = _split_with(0, 6)
    with pytest.raises(CorpusError):
        undersample_train(split, samples, 0)


def test_cross_project_split():
    samples = [sample(i, project=["qemu", "linux", "ffmpeg"][i % 3]) for i in range(30)]
    split = make_cross_project_split(samples, "qemu", 0)
    proj = {s.id: s.project for s in samples}
    assert {proj[i] for i in split.test} == {"qemu"} and len(split.test) == 10
    assert "qemu" not in {proj[i] for i in split.train + split.validation}
    other = make_cross_project_split(samples, "linux", 0)
    assert not set(split.test) & set(other.test)


def test_cross_project_errors():
    samples = [sample(i, project="qemu") for i in range(5)]
    with pytest.raises(CorpusError, match="qemu"):
        make_cross_project_split(samples, "chrome", 0)
    with pytest.raises(CorpusError, match="empty"):
        make_cross_project_split(samples, "qemu", 0)

import json
from importlib import resources

import pytest

from stmtvd.cli import UsageError, main, parse_config_text, prediction_record, render_prediction
from stmtvd.codegraph import build_graph_builtin
from stmtvd.corpus import FunctionSample
from stmtvd.gnn import ModelConfig, save_checkpoint
from stmtvd.metrics import FunctionPrediction
from stmtvd.trainer import TrainConfig, build_vocabulary, labeled_function, to_graph_samples, train

DATA = resources.files("stmtvd") / "data"

SMALL = """\
# tiny model for tests
in_dim = 16
hidden_dims = [16, 16]
mlp_dim = 16
dropout = 0.0
max_epochs = 3
patience = 3
batch_size = 8
"""


@pytest.fixture
def run_dir(tmp_path):
    (tmp_path / "small.cfg").write_text(SMALL)
    return tmp_path


def run(run_dir, *args):
    return main([*args, "--run-dir", str(run_dir / "run"), "--config", str(run_dir / "small.cfg")])


def prepare(run_dir):
    assert run(run_dir, "ingest", "--dataset", "demo") == 0
    assert run(run_dir, "label") == 0
    assert run(run_dir, "graph") == 0


@pytest.mark.filterwarnings("ignore:no vulnerable statements")
def test_demo_pipeline(run_dir, capsys):
    prepare(run_dir)
    assert run(run_dir, "train") == 0
    out = run_dir / "run"
    for name in ("samples.jsonl", "cleaning_report.json", "labels.jsonl", "graphs.jsonl", "checkpoint.bin", "history.jsonl", "config.json", "split.json"):
        assert (out / name).exists(), name
    report = json.loads((out / "report.json").read_text())
    for key in ("f1", "prec", "rec", "rocauc", "prauc", "n5", "map5", "ndcg5", "mfr", "first_rank_histogram", "per_type", "threshold", "confusion"):
        assert key in report, key
    assert report["split_kind"] == "random"
    assert "test F1" in capsys.readouterr().out
    before = report["f1"]
    assert run(run_dir, "evaluate") == 0
    assert json.loads((out / "report.json").read_text())["f1"] == before


def test_evaluate_without_artifacts_fails(tmp_path, capsys):
    assert main(["evaluate", "--run-dir", str(tmp_path / "empty")]) == 1
    assert "missing artifact" in capsys.readouterr().err
    assert main(["evaluate"]) == 1


def test_crossproject_holds_out_one_project(run_dir):
    prepare(run_dir)
    assert run(run_dir, "crossproject", "--project", "qemu") == 0
    split = json.loads((run_dir / "run" / "split.json").read_text())
    projects = {json.loads(line)["id"]: json.loads(line)["project"] for line in (run_dir / "run" / "samples.jsonl").read_text().splitlines()}
    assert {projects[i] for i in split["test"]} == {"qemu"}
    assert "qemu" not in {projects[i] for i in split["train"] + split["validation"]}
    report = json.loads((run_dir / "run" / "report.json").read_text())
    assert report["target_project"] == "qemu"


def test_unknown_project_and_bad_config(run_dir, capsys):
    prepare(run_dir)
    assert run(run_dir, "crossproject", "--project", "chrome") == 1
    (run_dir / "small.cfg").write_text("learning_rte = 0.1\n")
    assert run(run_dir, "train") == 1
    assert "learning_rte" in capsys.readouterr().err


def test_missing_dataset(tmp_path):
    assert main(["ingest", "--dataset", str(tmp_path / "nope.jsonl"), "--run-dir", str(tmp_path)]) == 1


# --------------------------------------------------------------------------- predict


@pytest.fixture(scope="module")
def fixture_checkpoint(tmp_path_factory):
    """A model overfit on the fixture function with only the deleted line positive."""
    code = DATA.joinpath("fig1_before.c").read_text()
    graph = build_graph_builtin(code, "fig1_before")
    item = labeled_function(FunctionSample("fig1_before", "linux", "c", code, code, 1), graph, [22])
    vocab = build_vocabulary([item])
    samples = to_graph_samples([item], vocab=vocab)
    mc = ModelConfig(vocab_size=len(vocab), in_dim=16, hidden_dims=(16, 16), mlp_dim=16, dropout=0.0)
    trained = train(TrainConfig(model=mc, learning_rate=2e-2, max_epochs=200, patience=200), samples, [])
    path = tmp_path_factory.mktemp("ckpt") / "model.bin"
    save_checkpoint(path, trained.model, 0.5, vocab.to_json())
    return path


def test_predict_ranks_the_deleted_line_first(fixture_checkpoint, tmp_path, capsys):
    func = tmp_path / "fig1_before.c"
    func.write_text(DATA.joinpath("fig1_before.c").read_text())
    out = tmp_path / "pred.json"
    assert main(["predict", "--checkpoint", str(fixture_checkpoint), "--function", str(func), "--output", str(out)]) == 0
    record = json.loads(out.read_text())
    assert record["verdict"] == 1
    assert record["top_k"][0] == 22
    assert len(record["top_k"]) == 5
    line22 = next(e for e in record["lines"] if e["line_no"] == 22)
    assert line22["rank"] == 1 and line22["flagged"]
    listing = capsys.readouterr().out
    assert "top 5 lines:" in listing and "1. line 22" in listing


def test_predict_top_k(fixture_checkpoint, tmp_path, capsys):
    func = tmp_path / "f.c"
    func.write_text(DATA.joinpath("fig1_before.c").read_text())
    assert main(["predict", "--checkpoint", str(fixture_checkpoint), "--function", str(func), "--top-k", "3"]) == 0
    record = json.loads(capsys.readouterr().out.splitlines()[0])
    assert len(record["top_k"]) == 3
    assert main(["predict", "--checkpoint", str(fixture_checkpoint), "--function", str(func), "--top-k", "0"]) == 1


def test_predict_errors(fixture_checkpoint, tmp_path):
    assert main(["predict", "--checkpoint", str(tmp_path / "none.bin"), "--function", "x.c"]) == 1
    assert main(["predict", "--checkpoint", str(fixture_checkpoint), "--function", str(tmp_path / "none.c")]) == 1
    (tmp_path / "junk.bin").write_bytes(b"not a checkpoint")
    assert main(["predict", "--checkpoint", str(tmp_path / "junk.bin"), "--function", str(tmp_path / "none.c")]) == 1


def _pred(graph, stmt, gated, flagged, func_pred):
    n = len(stmt)
    lines = [node.line_no for node in graph.nodes]
    return FunctionPrediction("f", lines, ["OTHER_OPERATION"] * n, [0] * n, list(stmt), list(gated), [int(x) for x in flagged], 0, func_pred)


def test_non_vulnerable_verdict_flags_nothing():
    code = "int f(int a)\n{\n\tint b = a;\n\treturn b;\n}\n"
    g = build_graph_builtin(code, "f")
    n = len(g.nodes)
    rec = prediction_record("f", g, _pred(g, [0.9] * n, [0.0] * n, [False] * n, 0), 0.5, 2)
    assert rec["verdict"] == 0
    assert not any(e["flagged"] for e in rec["lines"])
    # ranking falls back to line order on ties
    assert rec["top_k"] == [g.nodes[0].line_no, g.nodes[1].line_no]


def test_render_format():
    code = "int f(int a)\n{\n\treturn a;\n}\n"
    g = build_graph_builtin(code, "f")
    n = len(g.nodes)
    scores = [0.75 if node.line_no == 3 else 0.25 for node in g.nodes]
    rec = prediction_record("f", g, _pred(g, scores, scores, [s >= 0.5 for s in scores], 1), 0.5, 1)
    text = render_prediction(code, rec)
    lines = text.splitlines()
    assert lines[1] == "   2            | {"
    assert lines[2] == "   3 0.750000 * | \treturn a;"
    assert lines[-1] == "  1. line 3 (0.750000): return a;"
    assert n == len(rec["lines"])


def test_record_scores_are_rounded_and_ranked():
    code = "int f(int a)\n{\n\ta = a + 1;\n\treturn a;\n}\n"
    g = build_graph_builtin(code, "f")
    gated = [0.1234567, 0.9, 0.9][: len(g.nodes)]
    rec = prediction_record("f", g, _pred(g, gated, gated, [False] * len(gated), 1), 0.95, 3)
    assert rec["lines"][0]["score"] == 0.123457
    ranks = [e["rank"] for e in rec["lines"]]
    assert sorted(ranks) == list(range(1, len(g.nodes) + 1))


# --------------------------------------------------------------------------- config


def test_parse_config_text():
    cfg = parse_config_text("a = 1\nb = [1, 2]  # note\nc = gat\n\nd = true\n")
    assert cfg == {"a": 1, "b": [1, 2], "c": "gat", "d": True}
    assert parse_config_text('{"x": 0.5}') == {"x": 0.5}
    with pytest.raises(UsageError):
        parse_config_text("just words")


def test_flags_override_config(run_dir):
    prepare(run_dir)
    assert run(run_dir, "train", "--gnn", "gcn", "--func-branch", "off", "--seed", "3") == 0
    saved = json.loads((run_dir / "run" / "config.json").read_text())
    assert saved["model"]["gnn_type"] == "gcn"
    assert saved["model"]["use_function_branch"] is False
    assert saved["seed"] == 3

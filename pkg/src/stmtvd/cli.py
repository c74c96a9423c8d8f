"""Command-line entry points.

Every stage reads and writes files in one working directory (``--run-dir``)::

    stmtvd ingest --dataset big_vul.jsonl --run-dir work/
    stmtvd label --run-dir work/
    stmtvd graph --run-dir work/
    stmtvd train --run-dir work/ --config train.cfg
    stmtvd evaluate --run-dir work/
    stmtvd crossproject --run-dir work/ --project qemu
    stmtvd predict --checkpoint work/checkpoint.bin --function f.c

Exit status: 0 on success, 1 on invalid input or a missing artifact, 2 when
a run fails (divergence, encoder unreachable, unexpected errors).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from dataclasses import replace
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from . import codegraph, corpus, labeler
from .clex import strip_comments
from .codegraph import GraphError, StatementGraph, build_graph_builtin, has_dependencies, load_graphs, save_graphs
from .corpus import CorpusError, DatasetSplit, FunctionSample
from .embed import EncoderClient, EncoderConfig, EncoderError, PretrainedEncoder, Vocabulary
from .gnn import CheckpointError, ModelConfig, load_checkpoint, save_checkpoint
from .trainer import (
    LabeledFunction,
    TrainConfig,
    TrainingDivergedError,
    build_vocabulary,
    evaluate,
    labeled_function,
    predict,
    to_graph_samples,
    train,
)

logger = logging.getLogger("stmtvd")

SAMPLES = "samples.jsonl"
CLEANING = "cleaning_report.json"
LABELS = "labels.jsonl"
GRAPHS = "graphs.jsonl"
CONFIG = "config.json"
CHECKPOINT = "checkpoint.bin"
HISTORY = "history.jsonl"
REPORT = "report.json"
SPLIT = "split.json"


class UsageError(Exception):
    """Bad input or missing artifact; maps to exit status 1."""


# --------------------------------------------------------------------------- config


def parse_config_text(text: str) -> Dict[str, object]:
    """Flat ``key = value`` lines (``#`` comments) or a flat JSON object.

    Values are read as JSON when possible (numbers, true/false, lists) and
    as bare strings otherwise.
    """
    stripped = text.strip()
    if stripped.startswith("{"):
        data = json.loads(stripped)
        if not isinstance(data, dict):
            raise UsageError("config JSON must be an object")
        return data
    out: Dict[str, object] = {}
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {no}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    return out


MODEL_KEYS = set(ModelConfig.__dataclass_fields__) - {"vocab_size"}
TRAIN_KEYS = set(TrainConfig.__dataclass_fields__) - {"model"}
OTHER_KEYS = {
    "backend", "encoder_url", "stmt_max_tokens", "func_max_tokens", "min_count",
    "deps", "undersample", "drop_without_edges", "top_k", "n5_mode", "val_fraction",
}


def load_settings(args) -> Tuple[TrainConfig, Dict[str, object]]:
    raw: Dict[str, object] = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        raw = parse_config_text(path.read_text(encoding="utf-8"))
    unknown = set(raw) - MODEL_KEYS - TRAIN_KEYS - OTHER_KEYS
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    model_kw = {k: v for k, v in raw.items() if k in MODEL_KEYS}
    if isinstance(model_kw.get("hidden_dims"), (int, str)):
        hd = model_kw["hidden_dims"]
        model_kw["hidden_dims"] = [int(x) for x in str(hd).split(",")]
    if args.gnn:
        model_kw["gnn_type"] = None if args.gnn == "none" else args.gnn
    if args.graph:
        model_kw["graph_view"] = args.graph
    if args.func_branch:
        model_kw["use_function_branch"] = args.func_branch == "on"
    train_kw = {k: v for k, v in raw.items() if k in TRAIN_KEYS}
    if args.seed is not None:
        train_kw["seed"] = args.seed
    other = {k: v for k, v in raw.items() if k in OTHER_KEYS}
    if args.backend:
        other["backend"] = args.backend
    other.setdefault("backend", "trainable")
    try:
        cfg = TrainConfig(model=ModelConfig(**model_kw), **train_kw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None
    return cfg, other


# --------------------------------------------------------------------------- artifacts


def _run_dir(args) -> Path:
    if not args.run_dir:
        raise UsageError("--run-dir is required")
    d = Path(args.run_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _need(path: Path) -> Path:
    if not path.exists():
        raise UsageError(f"missing artifact: {path}")
    return path


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def demo_corpus_path() -> Path:
    return Path(str(resources.files("stmtvd") / "data" / "demo_corpus.jsonl"))


def _samples(run_dir: Path) -> List[FunctionSample]:
    return corpus.ingest(_need(run_dir / SAMPLES))


def _labels(run_dir: Path) -> Dict[str, List[int]]:
    rows = labeler.read_label_rows(_need(run_dir / LABELS))
    return {k: list(v["vul_lines"]) for k, v in rows.items()}


def _graphs(run_dir: Path) -> Dict[str, StatementGraph]:
    return load_graphs(_need(run_dir / GRAPHS))


def _labeled(samples, labels, graphs, view_kind: str, drop_without_edges: bool) -> Dict[str, LabeledFunction]:
    out = {}
    for s in samples:
        g = graphs.get(s.id)
        if g is None or not g.nodes:
            continue
        if drop_without_edges and not has_dependencies(codegraph.view(g, view_kind)):
            continue
        out[s.id] = labeled_function(s, g, labels.get(s.id, ()))
    return out


def _encoder(other: Dict[str, object], vocab_needed: bool):
    backend = other.get("backend", "trainable")
    if backend == "trainable":
        return None
    url = other.get("encoder_url") or os.environ.get("STMTVD_ENCODER_URL")
    if not url:
        raise UsageError("the pretrained backend needs encoder_url in the config or STMTVD_ENCODER_URL")
    client = EncoderClient(str(url))
    cfg = EncoderConfig(
        backend="pretrained",
        dim=client.dim,
        stmt_max_tokens=int(other.get("stmt_max_tokens", 64)),
        func_max_tokens=int(other.get("func_max_tokens", 512)),
        cache_dir=os.environ.get("STMTVD_CACHE"),
        url=str(url),
    )
    return PretrainedEncoder(client, cfg)


def _featurize(items, model_cfg: ModelConfig, vocab: Optional[Vocabulary], encoder):
    if encoder is None:
        return to_graph_samples(items, vocab=vocab)
    return to_graph_samples(items, encoder=encoder)


# --------------------------------------------------------------------------- commands


def cmd_ingest(args) -> int:
    if not args.dataset:
        raise UsageError("--dataset is required")
    path = demo_corpus_path() if args.dataset == "demo" else Path(args.dataset)
    if not path.exists():
        raise UsageError(f"dataset not found: {path}")
    run_dir = _run_dir(args)
    samples = corpus.ingest(path)
    kept, report = corpus.clean(samples)
    corpus.write_samples(kept, run_dir / SAMPLES)
    _write_json(run_dir / CLEANING, report.to_json())
    print(f"ingested {report.input} samples, kept {report.kept}")
    return 0


def cmd_graph(args) -> int:
    run_dir = _run_dir(args)
    samples = _samples(run_dir)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        graphs = [build_graph_builtin(s.code_before, s.id) for s in samples]
    save_graphs(graphs, run_dir / GRAPHS)
    print(f"wrote {len(graphs)} graphs")
    return 0


def cmd_label(args) -> int:
    run_dir = _run_dir(args)
    _, other = load_settings(args)
    deps = str(other.get("deps", "both"))
    samples = _samples(run_dir)
    sets = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for s in samples:
            ls, _ = labeler.label_sample(s, deps=deps)
            sets.append(ls)
    labeler.write_labels(sets, run_dir / LABELS)
    print(f"labeled {len(sets)} functions, {sum(len(s.vulnerable_lines) for s in sets)} vulnerable lines")
    return 0


def _train_and_report(args, run_dir: Path, split: DatasetSplit) -> int:
    cfg, other = load_settings(args)
    samples = _samples(run_dir)
    labels = _labels(run_dir)
    graphs = _graphs(run_dir)
    if other.get("undersample", True):
        split = corpus.undersample_train(split, samples, cfg.seed)
    _write_json(run_dir / SPLIT, split.to_json())
    items = _labeled(samples, labels, graphs, cfg.model.graph_view, bool(other.get("drop_without_edges", True)))
    part = {k: [items[i] for i in getattr(split, k) if i in items] for k in ("train", "validation", "test")}
    if not part["train"]:
        raise UsageError("no usable training functions after filtering")
    encoder = _encoder(other, True)
    vocab = None
    model_cfg = cfg.model
    if encoder is None:
        vocab = build_vocabulary(part["train"], int(other.get("min_count", 1)))
        model_cfg = replace(model_cfg, vocab_size=len(vocab))
    else:
        model_cfg = replace(model_cfg, vocab_size=0, in_dim=encoder.client.dim)
    cfg = replace(cfg, model=model_cfg)
    feats = {k: _featurize(v, model_cfg, vocab, encoder) for k, v in part.items()}
    trained = train(cfg, feats["train"], feats["validation"])
    extra = {"backend": other.get("backend", "trainable")}
    if encoder is not None:
        extra["encoder_url"] = encoder.config.url
    save_checkpoint(run_dir / CHECKPOINT, trained.model, trained.threshold, vocab.to_json() if vocab else None, extra)
    _write_json(run_dir / CONFIG, {**cfg.to_dict(), **{k: v for k, v in other.items()}})
    with open(run_dir / HISTORY, "w", encoding="utf-8") as fh:
        for rec in trained.history:
            fh.write(json.dumps(rec) + "\n")
    if feats["test"]:
        report = evaluate(trained.model, feats["test"], trained.threshold, n5_mode=str(other.get("n5_mode", "vulnerable")))
        out = report.to_json()
        out["split_kind"] = split.split_kind
        if split.target_project:
            out["target_project"] = split.target_project
        _write_json(run_dir / REPORT, out)
        print(f"test F1 {report.f1:.4f} (threshold {trained.threshold:.4f})")
    return 0


def cmd_train(args) -> int:
    run_dir = _run_dir(args)
    cfg, _ = load_settings(args)
    samples = _samples(run_dir)
    split = corpus.make_random_split(samples, cfg.seed)
    return _train_and_report(args, run_dir, split)


def cmd_crossproject(args) -> int:
    if not args.project:
        raise UsageError("--project is required")
    run_dir = _run_dir(args)
    cfg, other = load_settings(args)
    samples = _samples(run_dir)
    split = corpus.make_cross_project_split(samples, args.project, cfg.seed, float(other.get("val_fraction", 0.1)))
    return _train_and_report(args, run_dir, split)


def cmd_evaluate(args) -> int:
    run_dir = _run_dir(args)
    ckpt = Path(args.checkpoint) if args.checkpoint else run_dir / CHECKPOINT
    _need(ckpt)
    split = DatasetSplit.from_json(json.loads(_need(run_dir / SPLIT).read_text(encoding="utf-8")))
    model, threshold, vocab_tokens, extra = load_checkpoint(ckpt)
    _, other = load_settings(args)
    samples = _samples(run_dir)
    items = _labeled(samples, _labels(run_dir), _graphs(run_dir), model.config.graph_view, bool(other.get("drop_without_edges", True)))
    test = [items[i] for i in split.test if i in items]
    if not test:
        raise UsageError("no usable test functions")
    vocab = Vocabulary.from_json(vocab_tokens) if vocab_tokens is not None else None
    encoder = None if vocab is not None else _encoder({**other, "backend": "pretrained", "encoder_url": extra.get("encoder_url")}, False)
    feats = _featurize(test, model.config, vocab, encoder)
    report = evaluate(model, feats, threshold, n5_mode=str(other.get("n5_mode", "vulnerable")))
    out = report.to_json()
    out["split_kind"] = split.split_kind
    _write_json(run_dir / REPORT, out)
    print(f"test F1 {report.f1:.4f}")
    return 0


def prediction_record(function_id: str, graph: StatementGraph, pred, threshold: float, top_k: int) -> dict:
    scores = [round(float(s), 6) for s in pred.gated_prob]
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], graph.nodes[i].line_no))
    rank = {i: r for r, i in enumerate(order, start=1)}
    lines = [
        {
            "line_no": n.line_no,
            "code_text": n.code_text,
            "score": scores[i],
            "stmt_score": round(float(pred.stmt_prob[i]), 6),
            "rank": rank[i],
            "flagged": bool(pred.predicted[i]),
            "stmt_type": n.stmt_type.name,
        }
        for i, n in enumerate(graph.nodes)
    ]
    return {
        "function_id": function_id,
        "threshold": threshold,
        "verdict": pred.func_pred if pred.func_pred is not None else int(any(pred.predicted)),
        "lines": lines,
        "top_k": [graph.nodes[i].line_no for i in order[:top_k]],
    }


def render_prediction(code: str, record: dict) -> str:
    """Source listing with a score column; ``*`` marks lines at or above the threshold."""
    by_line = {e["line_no"]: e for e in record["lines"]}
    out = []
    for no, text in enumerate(code.rstrip("\n").split("\n"), start=1):
        e = by_line.get(no)
        if e is None:
            out.append(f"{no:4d}            | {text}")
        else:
            mark = "*" if e["flagged"] else " "
            out.append(f"{no:4d} {e['score']:.6f} {mark} | {text}")
    out.append("")
    out.append(f"top {len(record['top_k'])} lines:")
    for r, ln in enumerate(record["top_k"], start=1):
        e = by_line[ln]
        out.append(f"  {r}. line {ln} ({e['score']:.6f}): {e['code_text']}")
    return "\n".join(out) + "\n"


def cmd_predict(args) -> int:
    if not args.checkpoint and not args.run_dir:
        raise UsageError("--checkpoint (or --run-dir) is required")
    ckpt = Path(args.checkpoint) if args.checkpoint else Path(args.run_dir) / CHECKPOINT
    _need(ckpt)
    if not args.function:
        raise UsageError("--function is required")
    fpath = _need(Path(args.function))
    model, threshold, vocab_tokens, extra = load_checkpoint(ckpt)
    code = strip_comments(fpath.read_text(encoding="utf-8"))
    function_id = fpath.stem
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        graph = build_graph_builtin(code, function_id)
    if not graph.nodes:
        raise UsageError(f"no statements found in {fpath}")
    if not has_dependencies(codegraph.view(graph, model.config.graph_view)):
        warnings.warn("function has no dependency edges; prediction uses statement features only", stacklevel=1)
    sample = FunctionSample(function_id, "", "", code, code, 0)
    item = labeled_function(sample, graph, ())
    if vocab_tokens is not None:
        feats = to_graph_samples([item], vocab=Vocabulary.from_json(vocab_tokens))
    else:
        _, other = load_settings(args)
        enc = _encoder({**other, "backend": "pretrained", "encoder_url": extra.get("encoder_url")}, False)
        feats = to_graph_samples([item], encoder=enc)
    pred = predict(model, feats, threshold)[0]
    record = prediction_record(function_id, graph, pred, threshold, args.top_k)
    text = render_prediction(code, record)
    if args.output:
        Path(args.output).write_text(json.dumps(record, indent=2) + "\n", encoding="utf-8")
    else:
        print(json.dumps(record))
    sys.stdout.write(text)
    return 0


# --------------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stmtvd", description="statement-level vulnerability detection")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config")
        sp.add_argument("--run-dir")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--backend", choices=["pretrained", "trainable"])
        sp.add_argument("--gnn", choices=["gat", "gcn", "none"])
        sp.add_argument("--graph", choices=["pdg", "cdg"])
        sp.add_argument("--func-branch", choices=["on", "off"])
        return sp

    s = common(sub.add_parser("ingest", help="read, clean and store a dataset"))
    s.add_argument("--dataset", help="JSONL file, or 'demo' for the bundled corpus")
    s.set_defaults(func=cmd_ingest)
    common(sub.add_parser("label", help="derive statement labels from the diffs")).set_defaults(func=cmd_label)
    common(sub.add_parser("graph", help="build statement graphs")).set_defaults(func=cmd_graph)
    common(sub.add_parser("train", help="train on a random split and report test metrics")).set_defaults(func=cmd_train)
    s = common(sub.add_parser("evaluate", help="evaluate a checkpoint on the stored test split"))
    s.add_argument("--checkpoint")
    s.set_defaults(func=cmd_evaluate)
    s = common(sub.add_parser("crossproject", help="hold out one project as the test set"))
    s.add_argument("--project")
    s.set_defaults(func=cmd_crossproject)
    s = common(sub.add_parser("predict", help="score the lines of one function"))
    s.add_argument("--checkpoint")
    s.add_argument("--function", help="file holding one C function")
    s.add_argument("--top-k", type=int, default=5)
    s.add_argument("--output", help="write the JSON record here instead of stdout")
    s.set_defaults(func=cmd_predict)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "top_k", 1) is not None and getattr(args, "top_k", 1) < 1:
        print("error: --top-k must be at least 1", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except (UsageError, CorpusError, GraphError, CheckpointError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TrainingDivergedError, EncoderError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - last-resort exit status
        logger.debug("unexpected failure", exc_info=True)
        print(f"run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

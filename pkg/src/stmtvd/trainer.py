"""Training loop, threshold selection, hyperparameter search and repeated runs."""

from __future__ import annotations

import copy
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .codegraph import StatementGraph, build_graph_builtin, has_dependencies
from .corpus import FunctionSample
from .embed import Vocabulary, token_ids
from .gnn import (
    GraphSample,
    ModelConfig,
    StatementDetector,
    collate,
    loss,
    model_forward,
    predict_statements,
)
from .metrics import EvalReport, FunctionPrediction, evaluate_predictions

logger = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; ``model`` holds the last finite parameters."""

    def __init__(self, message: str, model: StatementDetector, epoch: int):
        super().__init__(message)
        self.model = model
        self.epoch = epoch


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    learning_rate: float = 1e-3
    batch_size: int = 16
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.max_epochs <= 0 or self.patience <= 0:
            raise ValueError("learning_rate, batch_size, max_epochs and patience must be positive")
        if self.patience > self.max_epochs:
            raise ValueError("patience must not exceed max_epochs")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        model = ModelConfig.from_dict(d.pop("model", {}))
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(model=model, **known)


@dataclass
class TrainedModel:
    model: StatementDetector
    config: TrainConfig
    threshold: float
    history: List[dict]
    best_epoch: int


# --------------------------------------------------------------------------- data preparation


@dataclass
class LabeledFunction:
    sample: FunctionSample
    graph: StatementGraph
    labels: np.ndarray  # per graph node


def labeled_function(sample: FunctionSample, graph: StatementGraph, vulnerable_lines: Sequence[int]) -> LabeledFunction:
    vul = set(vulnerable_lines)
    return LabeledFunction(sample, graph, np.array([1 if n.line_no in vul else 0 for n in graph.nodes], dtype=np.int64))


def build_labeled(
    samples: Sequence[FunctionSample],
    vulnerable_lines: Dict[str, Sequence[int]],
    graph_fn: Callable[[str, str], StatementGraph] = build_graph_builtin,
    drop_without_edges: bool = True,
    graph_view: str = "PDG",
) -> List[LabeledFunction]:
    """Attach graphs and per-node labels; functions without dependencies are dropped."""
    from .codegraph import view

    out = []
    for s in samples:
        g = graph_fn(s.code_before, s.id)
        if not g.nodes:
            continue
        if drop_without_edges and not has_dependencies(view(g, graph_view)):
            logger.debug("drop %s: no dependency edges", s.id)
            continue
        out.append(labeled_function(s, g, vulnerable_lines.get(s.id, ())))
    return out


def build_vocabulary(items: Sequence[LabeledFunction], min_count: int = 1) -> Vocabulary:
    return Vocabulary.build((it.sample.code_before for it in items), min_count)


def to_graph_samples(items: Sequence[LabeledFunction], vocab: Optional[Vocabulary] = None, encoder=None) -> List[GraphSample]:
    """Token ids (trainable backend) or encoder vectors (pretrained backend) per function."""
    out = []
    for it in items:
        gs = GraphSample(it.sample.id, it.graph, it.labels, it.sample.function_vulnerable)
        if vocab is not None:
            gs.func_tokens, gs.stmt_tokens = token_ids(vocab, it.sample.code_before, it.graph)
        elif encoder is not None:
            gs.embeddings = encoder.encode(it.sample.code_before, it.graph)
        else:
            raise ValueError("either a vocabulary or an encoder is required")
        out.append(gs)
    return out


# --------------------------------------------------------------------------- threshold


def f1_at(scores: np.ndarray, labels: np.ndarray, t: float) -> float:
    pred = scores >= t
    tp = int(np.sum(pred & labels))
    fp = int(np.sum(pred & ~labels))
    fn = int(np.sum(~pred & labels))
    return 2 * tp / (2 * tp + fp + fn) if tp else 0.0


def select_threshold(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Threshold with the best F1 over {unique scores} + {0, 1}; ties go to the smallest."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if not y.any():
        raise ValueError("validation set has no positive statements")
    grid = np.unique(np.concatenate([s, [0.0, 1.0]]))
    best_t, best_f = None, -1.0
    for t in grid:
        f = f1_at(s, y, float(t))
        if f > best_f:
            best_t, best_f = float(t), f
    return best_t  # type: ignore[return-value]


# --------------------------------------------------------------------------- training


def _batches(samples: Sequence[GraphSample], order: Sequence[int], size: int) -> List[List[GraphSample]]:
    return [[samples[i] for i in order[k : k + size]] for k in range(0, len(order), size)]


def _dtype_of(model: StatementDetector) -> torch.dtype:
    return next(model.parameters()).dtype


@torch.no_grad()
def evaluate_loss(model: StatementDetector, samples: Sequence[GraphSample], batch_size: int = 64) -> float:
    if not samples:
        return float("nan")
    total, count = 0.0, 0
    for chunk in _batches(samples, list(range(len(samples))), batch_size):
        b = collate(chunk, model.config, _dtype_of(model))
        out = model_forward(model, b, train_mode=False, gating_mode="soft")
        total += float(loss(out, b, model.config)) * len(chunk)
        count += len(chunk)
    return total / count


def train(
    config: TrainConfig,
    train_samples: Sequence[GraphSample],
    val_samples: Sequence[GraphSample],
    dtype: torch.dtype = torch.float32,
) -> TrainedModel:
    """Adam on the combined loss with early stopping on validation loss.

    Deterministic for a fixed ``config.seed``. The best epoch's parameters
    are restored and the decision threshold is tuned on ``val_samples``.
    """
    if not train_samples:
        raise ValueError("empty training set")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    model = StatementDetector(config.model).to(dtype)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)
    history: List[dict] = []
    best_val = math.inf
    best_state = copy.deepcopy(model.state_dict())
    best_epoch = 0
    monitor = val_samples if val_samples else train_samples
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(train_samples))
        running, seen = 0.0, 0
        for chunk in _batches(train_samples, order, config.batch_size):
            b = collate(chunk, config.model, dtype)
            out = model_forward(model, b, train_mode=True, gating_mode="soft")
            value = loss(out, b, config.model)
            if not torch.isfinite(value):
                model.load_state_dict(best_state)
                raise TrainingDivergedError(f"non-finite loss in epoch {epoch}", model, epoch)
            opt.zero_grad()
            value.backward()
            # a bad gradient never reaches the parameters, so they stay the last finite ones
            if not all(p.grad is None or torch.all(torch.isfinite(p.grad)) for p in model.parameters()):
                raise TrainingDivergedError(f"non-finite gradient in epoch {epoch}", model, epoch)
            opt.step()
            running += value.item() * len(chunk)
            seen += len(chunk)
        val_loss = evaluate_loss(model, monitor)
        history.append({"epoch": epoch, "train_loss": running / seen, "val_loss": val_loss})
        if val_loss < best_val:
            best_val, best_epoch = val_loss, epoch
            best_state = copy.deepcopy(model.state_dict())
        elif epoch - best_epoch >= config.patience:
            break
    model.load_state_dict(best_state)
    model.eval()
    threshold = 0.5
    if val_samples:
        preds = predict(model, val_samples, 0.5)
        scores = np.concatenate([p.gated_prob for p in preds])
        labels = np.concatenate([p.labels for p in preds])
        try:
            threshold = select_threshold(scores, labels)
        except ValueError:
            warnings.warn("no vulnerable statements in validation; keeping threshold 0.5", stacklevel=2)
    return TrainedModel(model, config, threshold, history, best_epoch)


@torch.no_grad()
def predict(model: StatementDetector, samples: Sequence[GraphSample], threshold: float, batch_size: int = 64) -> List[FunctionPrediction]:
    """Hard-gated predictions per function."""
    out: List[FunctionPrediction] = []
    for chunk in _batches(samples, list(range(len(samples))), batch_size):
        b = collate(chunk, model.config, _dtype_of(model))
        res = model_forward(model, b, train_mode=False, gating_mode="hard")
        flagged = predict_statements(res, b, threshold)
        verdict = res.function_verdict()
        for gi, s in enumerate(chunk):
            m = (b.node_graph == gi).numpy()
            out.append(
                FunctionPrediction(
                    function_id=s.function_id,
                    lines=list(s.lines),
                    stmt_types=b.stmt_types[gi],
                    labels=[int(v) for v in np.asarray(s.stmt_labels)],
                    stmt_prob=res.stmt_prob[m].double().tolist(),
                    gated_prob=res.gated_prob[m].double().tolist(),
                    predicted=flagged[m].tolist(),
                    func_label=int(s.func_label),
                    func_pred=None if verdict is None else int(verdict[gi]),
                )
            )
    return out


def evaluate(model: StatementDetector, samples: Sequence[GraphSample], threshold: float, **kwargs) -> EvalReport:
    return evaluate_predictions(predict(model, samples, threshold), threshold, **kwargs)


def statement_f1(model: StatementDetector, samples: Sequence[GraphSample], threshold: float) -> float:
    return evaluate(model, samples, threshold).f1


# --------------------------------------------------------------------------- search


@dataclass(frozen=True)
class SearchSpace:
    lr_range: Tuple[float, float] = (1e-4, 1e-2)
    hidden: Tuple[int, ...] = (64, 128, 256)
    dropout_range: Tuple[float, float] = (0.1, 0.5)
    heads: Tuple[int, ...] = (1, 2, 4)
    batch_size: Tuple[int, ...] = (16, 32, 64)

    def sample(self, rng: np.random.Generator, base: TrainConfig) -> TrainConfig:
        lo, hi = np.log(self.lr_range[0]), np.log(self.lr_range[1])
        lr = float(np.exp(rng.uniform(lo, hi)))
        hidden = int(rng.choice(self.hidden))
        dropout = float(rng.uniform(*self.dropout_range))
        heads = int(rng.choice(self.heads))
        batch = int(rng.choice(self.batch_size))
        n_layers = len(base.model.hidden_dims) or 2
        model = replace(base.model, hidden_dims=(hidden,) * n_layers, mlp_dim=hidden, dropout=dropout, heads=heads)
        return replace(base, model=model, learning_rate=lr, batch_size=batch)


def random_search(
    space: SearchSpace,
    budget: int,
    seed: int,
    evaluate_fn: Callable[[TrainConfig], float],
    base: Optional[TrainConfig] = None,
) -> Tuple[TrainConfig, List[Tuple[TrainConfig, float]]]:
    """Sample ``budget`` configs and keep the one with the lowest validation loss.

    ``evaluate_fn`` trains a config and returns its validation loss; the
    first config wins ties.
    """
    if budget < 1:
        raise ValueError("budget must be at least 1")
    base = base or TrainConfig()
    rng = np.random.default_rng(seed)
    trials = []
    for _ in range(budget):
        cfg = space.sample(rng, base)
        trials.append((cfg, float(evaluate_fn(cfg))))
    best = min(range(len(trials)), key=lambda i: (trials[i][1], i))
    return trials[best][0], trials


def validation_loss_of(train_samples: Sequence[GraphSample], val_samples: Sequence[GraphSample]) -> Callable[[TrainConfig], float]:
    def run(cfg: TrainConfig) -> float:
        trained = train(cfg, train_samples, val_samples)
        return evaluate_loss(trained.model, val_samples)

    return run


def repeated_runs(
    config: TrainConfig,
    train_samples: Sequence[GraphSample],
    val_samples: Sequence[GraphSample],
    test_samples: Sequence[GraphSample],
    n: int = 10,
    seeds: Optional[Sequence[int]] = None,
) -> List[EvalReport]:
    """Train and test ``n`` times with distinct seeds."""
    if n < 2:
        raise ValueError("repeated runs need n >= 2")
    seeds = list(seeds) if seeds is not None else [config.seed + i for i in range(n)]
    if len(seeds) != n or len(set(seeds)) != n:
        raise ValueError("need n distinct seeds")
    reports = []
    for s in seeds:
        trained = train(replace(config, seed=s), train_samples, val_samples)
        rep = evaluate(trained.model, test_samples, trained.threshold)
        rep.extra["seed"] = s
        reports.append(rep)
    return reports

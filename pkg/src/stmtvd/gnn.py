"""Graph layers, the gated statement/function classifier, its loss and checkpoints.

Edges are directed ``src -> dst`` and a node aggregates over its
in-neighbours (itself included via a self loop). Batches hold several
functions as one block-diagonal graph.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .codegraph import StatementGraph, view
from .embed import EmbeddingSet

# --------------------------------------------------------------------------- config


@dataclass
class ModelConfig:
    gnn_type: Optional[str] = "gat"  # "gat" | "gcn" | None
    graph_view: str = "PDG"
    use_function_branch: bool = True
    in_dim: int = 128
    hidden_dims: Tuple[int, ...] = (128, 128)
    mlp_dim: int = 128
    dropout: float = 0.3
    heads: int = 1
    gating_mode: str = "hard"
    symmetric: bool = False
    activation: Optional[str] = "relu"
    leaky_slope: float = 0.2
    # weight of the function-level term in the loss
    func_loss_weight: float = 1.0
    # multiply statement and function probabilities inside the statement loss term
    gate_statement_term: bool = True
    # > 0 means the model owns a trainable token-embedding table of this size
    vocab_size: int = 0

    def __post_init__(self):
        if isinstance(self.gnn_type, str):
            self.gnn_type = self.gnn_type.lower()
            if self.gnn_type == "none":
                self.gnn_type = None
        if self.gnn_type not in ("gat", "gcn", None):
            raise ValueError(f"unknown gnn_type {self.gnn_type!r}")
        self.graph_view = self.graph_view.upper()
        if self.graph_view not in ("PDG", "CDG"):
            raise ValueError(f"unknown graph_view {self.graph_view!r}")
        if self.gating_mode not in ("hard", "soft"):
            raise ValueError(f"unknown gating_mode {self.gating_mode!r}")
        self.hidden_dims = tuple(int(d) for d in self.hidden_dims)
        for d in self.hidden_dims:
            if d % self.heads:
                raise ValueError(f"hidden dim {d} is not divisible by {self.heads} heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if "hidden_dims" in known:
            known["hidden_dims"] = tuple(known["hidden_dims"])
        return cls(**known)


def _activation(name: Optional[str]):
    if name is None or name == "none":
        return None
    if name == "relu":
        return F.relu
    if name == "elu":
        return F.elu
    raise ValueError(f"unknown activation {name!r}")


# --------------------------------------------------------------------------- layers


def segment_softmax(scores: torch.Tensor, index: torch.Tensor, n: int) -> torch.Tensor:
    """Softmax of ``scores`` (E x H) within groups sharing ``index`` (E,)."""
    idx = index.unsqueeze(-1).expand_as(scores)
    shift = torch.full((n, scores.shape[1]), -torch.inf, dtype=scores.dtype, device=scores.device)
    shift = shift.scatter_reduce(0, idx, scores.detach(), reduce="amax", include_self=True)
    ex = torch.exp(scores - shift[index])
    denom = torch.zeros((n, scores.shape[1]), dtype=scores.dtype, device=scores.device).index_add(0, index, ex)
    return ex / denom[index]


class GATLayer(nn.Module):
    """Graph attention: z = W h, e_ij = LeakyReLU(a . [z_i || z_j]), softmax over in-neighbours j."""

    def __init__(self, d_in: int, d_out: int, heads: int = 1, leaky_slope: float = 0.2, activation: Optional[str] = "relu"):
        super().__init__()
        if d_out % heads:
            raise ValueError("d_out must be divisible by heads")
        self.heads = heads
        self.d_head = d_out // heads
        self.d_in, self.d_out = d_in, d_out
        self.W = nn.Linear(d_in, d_out, bias=False)
        # first half scores the receiving node, second half the neighbour
        self.a = nn.Parameter(torch.empty(heads, 2 * self.d_head))
        self.leaky_slope = leaky_slope
        self.activation = activation
        self.act = _activation(activation)
        nn.init.xavier_uniform_(self.W.weight)
        nn.init.xavier_uniform_(self.a)

    def attention(self, h: torch.Tensor, edge_index: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        n = h.shape[0]
        z = self.W(h).view(n, self.heads, self.d_head)
        src, dst = edge_index[0], edge_index[1]
        a_self, a_nbr = self.a[:, : self.d_head], self.a[:, self.d_head :]
        e = (z[dst] * a_self).sum(-1) + (z[src] * a_nbr).sum(-1)
        e = F.leaky_relu(e, self.leaky_slope)
        return z, segment_softmax(e, dst, n)

    def forward(self, h: torch.Tensor, edge_index: torch.Tensor) -> torch.Tensor:
        if h.shape[-1] != self.d_in:
            raise ValueError(f"GAT layer expects input dim {self.d_in}, got {h.shape[-1]}")
        n = h.shape[0]
        z, alpha = self.attention(h, edge_index)
        src, dst = edge_index[0], edge_index[1]
        msg = alpha.unsqueeze(-1) * z[src]
        out = torch.zeros_like(z).index_add(0, dst, msg).reshape(n, self.d_out)
        return self.act(out) if self.act else out


class GCNLayer(nn.Module):
    """h_i' = act(W sum_j h_j / sqrt(deg_i deg_j)); degrees are in-degrees with self loops."""

    def __init__(self, d_in: int, d_out: int, activation: Optional[str] = "relu"):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        self.W = nn.Linear(d_in, d_out, bias=False)
        self.activation = activation
        self.act = _activation(activation)
        nn.init.xavier_uniform_(self.W.weight)

    def forward(self, h: torch.Tensor, edge_index: torch.Tensor) -> torch.Tensor:
        if h.shape[-1] != self.d_in:
            raise ValueError(f"GCN layer expects input dim {self.d_in}, got {h.shape[-1]}")
        n = h.shape[0]
        src, dst = edge_index[0], edge_index[1]
        deg = torch.zeros(n, dtype=h.dtype, device=h.device).index_add(0, dst, torch.ones_like(dst, dtype=h.dtype))
        norm = (deg[dst] * deg[src]).rsqrt()
        agg = torch.zeros_like(h).index_add(0, dst, norm.unsqueeze(-1) * h[src])
        out = self.W(agg)
        return self.act(out) if self.act else out


# --------------------------------------------------------------------------- batches


@dataclass
class GraphSample:
    """One function ready for the model: graph, labels and either vectors or token ids."""

    function_id: str
    graph: StatementGraph
    stmt_labels: np.ndarray  # per node, node order
    func_label: int
    embeddings: Optional[EmbeddingSet] = None
    stmt_tokens: Optional[List[List[int]]] = None
    func_tokens: Optional[List[int]] = None

    @property
    def lines(self) -> List[int]:
        return self.graph.lines


@dataclass
class GraphBatch:
    n_graphs: int
    node_graph: torch.Tensor  # (N,) graph index of each node
    edge_index: torch.Tensor  # (2, E) with self loops
    stmt_labels: torch.Tensor
    func_labels: torch.Tensor
    stmt_x: Optional[torch.Tensor] = None
    func_x: Optional[torch.Tensor] = None
    stmt_tokens: Optional[Tuple[torch.Tensor, torch.Tensor]] = None  # (flat ids, offsets)
    func_tokens: Optional[Tuple[torch.Tensor, torch.Tensor]] = None
    lines: List[List[int]] = field(default_factory=list)
    function_ids: List[str] = field(default_factory=list)
    stmt_types: List[List[str]] = field(default_factory=list)

    @property
    def n_nodes(self) -> int:
        return int(self.node_graph.shape[0])


def edge_index_for(graph: StatementGraph, graph_view: str = "PDG", symmetric: bool = False) -> torch.Tensor:
    """Unique directed node-index pairs of the chosen view, plus one self loop per node."""
    g = view(graph, graph_view)
    pairs = set(g.adjacency_pairs(symmetric))
    pairs |= {(i, i) for i in range(len(g.nodes))}
    ordered = sorted(pairs)
    if not ordered:
        return torch.zeros((2, 0), dtype=torch.long)
    return torch.tensor(ordered, dtype=torch.long).t().contiguous()


def _flat_tokens(seqs: Sequence[Sequence[int]]) -> Tuple[torch.Tensor, torch.Tensor]:
    ids: List[int] = []
    offsets: List[int] = []
    for s in seqs:
        offsets.append(len(ids))
        # an empty bag would embed to zeros; use the unknown row instead
        ids.extend(s if len(s) else [0])
    return torch.tensor(ids, dtype=torch.long), torch.tensor(offsets, dtype=torch.long)


def collate(samples: Sequence[GraphSample], config: ModelConfig, dtype=torch.float32) -> GraphBatch:
    node_graph, edges, labels, flabels = [], [], [], []
    stmt_x, func_x = [], []
    stoks: List[Sequence[int]] = []
    ftoks: List[Sequence[int]] = []
    offset = 0
    for gi, s in enumerate(samples):
        n = len(s.graph.nodes)
        node_graph.extend([gi] * n)
        edges.append(edge_index_for(s.graph, config.graph_view, config.symmetric) + offset)
        labels.append(np.asarray(s.stmt_labels, dtype=np.int64).reshape(-1))
        flabels.append(int(s.func_label))
        if config.vocab_size > 0:
            if s.stmt_tokens is None or s.func_tokens is None:
                raise ValueError(f"{s.function_id}: token ids required by the trainable embedding")
            stoks.extend(s.stmt_tokens)
            ftoks.append(s.func_tokens)
        else:
            if s.embeddings is None:
                raise ValueError(f"{s.function_id}: embeddings required")
            stmt_x.append(np.asarray(s.embeddings.stmt_matrix))
            func_x.append(np.asarray(s.embeddings.function_vec))
        offset += n
    batch = GraphBatch(
        n_graphs=len(samples),
        node_graph=torch.tensor(node_graph, dtype=torch.long),
        edge_index=torch.cat(edges, dim=1) if edges else torch.zeros((2, 0), dtype=torch.long),
        stmt_labels=torch.from_numpy(np.concatenate(labels)) if labels else torch.zeros(0, dtype=torch.long),
        func_labels=torch.tensor(flabels, dtype=torch.long),
        lines=[s.lines for s in samples],
        function_ids=[s.function_id for s in samples],
        stmt_types=[[n.stmt_type.name for n in s.graph.nodes] for s in samples],
    )
    if config.vocab_size > 0:
        batch.stmt_tokens = _flat_tokens(stoks)
        batch.func_tokens = _flat_tokens(ftoks)
    else:
        batch.stmt_x = torch.as_tensor(np.concatenate(stmt_x, axis=0), dtype=dtype)
        batch.func_x = torch.as_tensor(np.stack(func_x), dtype=dtype)
    return batch


# --------------------------------------------------------------------------- model


@dataclass
class ModelOutput:
    stmt_logits: torch.Tensor  # (N, 2)
    stmt_prob: torch.Tensor  # (N,) pre-gate probability of the vulnerable class
    gated_prob: torch.Tensor  # (N,)
    func_logits: Optional[torch.Tensor] = None  # (G, 2)
    func_prob: Optional[torch.Tensor] = None  # (G,)

    def function_verdict(self) -> Optional[torch.Tensor]:
        """1 where the function head predicts vulnerable; ties go to non-vulnerable."""
        if self.func_logits is None:
            return None
        return (self.func_logits[:, 1] > self.func_logits[:, 0]).long()


class StatementDetector(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config
        self.embedding = nn.EmbeddingBag(c.vocab_size, c.in_dim, mode="mean") if c.vocab_size > 0 else None
        layers: List[nn.Module] = []
        d = c.in_dim
        if c.gnn_type is not None:
            for d_out in c.hidden_dims:
                if c.gnn_type == "gat":
                    layers.append(GATLayer(d, d_out, c.heads, c.leaky_slope, c.activation))
                else:
                    layers.append(GCNLayer(d, d_out, c.activation))
                d = d_out
        self.gnn_layers = nn.ModuleList(layers)
        self.mlp_in = d
        # the function vector skips the graph layers, so it may need resizing
        self.func_proj = nn.Linear(c.in_dim, d) if c.use_function_branch and c.in_dim != d else None
        self.shared_mlp = nn.Sequential(nn.Linear(d, c.mlp_dim), nn.ReLU(), nn.Dropout(c.dropout))
        self.stmt_head = nn.Linear(c.mlp_dim, 2)
        self.func_head = nn.Linear(c.mlp_dim, 2) if c.use_function_branch else None

    def _inputs(self, batch: GraphBatch) -> Tuple[torch.Tensor, torch.Tensor]:
        if self.embedding is not None:
            if batch.stmt_tokens is None or batch.func_tokens is None:
                raise ValueError("batch has no token ids for the trainable embedding")
            stmt_x = self.embedding(*batch.stmt_tokens)
            func_x = self.embedding(*batch.func_tokens)
        else:
            if batch.stmt_x is None or batch.func_x is None:
                raise ValueError("batch has no embedding vectors")
            stmt_x, func_x = batch.stmt_x, batch.func_x
        if stmt_x.shape[-1] != self.config.in_dim:
            raise ValueError(f"input layer expects dim {self.config.in_dim}, got {stmt_x.shape[-1]}")
        return stmt_x, func_x

    def node_representations(self, batch: GraphBatch) -> torch.Tensor:
        h, _ = self._inputs(batch)
        for layer in self.gnn_layers:
            h = layer(h, batch.edge_index)
        return h

    def forward(self, batch: GraphBatch, gating_mode: Optional[str] = None) -> ModelOutput:
        mode = gating_mode or self.config.gating_mode
        stmt_x, func_x = self._inputs(batch)
        h = stmt_x
        for layer in self.gnn_layers:
            h = layer(h, batch.edge_index)
        stmt_logits = self.stmt_head(self.shared_mlp(h))
        stmt_prob = torch.softmax(stmt_logits, dim=-1)[:, 1]
        if self.func_head is None:
            return ModelOutput(stmt_logits, stmt_prob, stmt_prob)
        f = func_x if self.func_proj is None else self.func_proj(func_x)
        func_logits = self.func_head(self.shared_mlp(f))
        func_prob = torch.softmax(func_logits, dim=-1)[:, 1]
        if mode == "hard":
            verdict = (func_logits[:, 1] > func_logits[:, 0]).to(stmt_prob.dtype)
            gated = stmt_prob * verdict[batch.node_graph]
        else:
            gated = stmt_prob * func_prob[batch.node_graph]
        return ModelOutput(stmt_logits, stmt_prob, gated, func_logits, func_prob)


def model_forward(model: StatementDetector, batch: GraphBatch, train_mode: bool = False, gating_mode: Optional[str] = None) -> ModelOutput:
    model.train(train_mode)
    return model(batch, gating_mode)


def predict_statements(output: ModelOutput, batch: GraphBatch, threshold: float) -> torch.Tensor:
    """Binary statement predictions; nothing is flagged in a function judged non-vulnerable."""
    pred = output.gated_prob >= threshold
    verdict = output.function_verdict()
    if verdict is not None:
        pred = pred & verdict.bool()[batch.node_graph]
    return pred.long()


# --------------------------------------------------------------------------- loss


def _log1mexp(x: torch.Tensor) -> torch.Tensor:
    """log(1 - exp(x)) for x < 0, accurate on both ends."""
    x = x.clamp(max=-1e-300)
    return torch.where(x > -0.6931471805599453, torch.log(-torch.expm1(x)), torch.log1p(-torch.exp(x)))


def loss_terms(output: ModelOutput, batch: GraphBatch, config: ModelConfig) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
    """(statement term, function term) of the training loss."""
    y = batch.stmt_labels
    ls = F.log_softmax(output.stmt_logits, dim=-1)
    if output.func_logits is not None and config.gate_statement_term:
        lf = F.log_softmax(output.func_logits, dim=-1)
        log_p = ls[:, 1] + lf[batch.node_graph, 1]
        log_q = _log1mexp(log_p)
        yf = y.to(log_p.dtype)
        stmt = -(yf * log_p + (1 - yf) * log_q).mean()
    else:
        stmt = F.nll_loss(ls, y)
    func = None
    if output.func_logits is not None:
        func = F.cross_entropy(output.func_logits, batch.func_labels)
    return stmt, func


def loss(output: ModelOutput, batch: GraphBatch, config: ModelConfig) -> torch.Tensor:
    """Mean statement cross-entropy plus the weighted function cross-entropy."""
    stmt, func = loss_terms(output, batch, config)
    return stmt if func is None else stmt + config.func_loss_weight * func


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, block: str):
        super().__init__(f"non-finite gradient in parameter block {block!r}")
        self.block = block


def gradients(model: StatementDetector, batch: GraphBatch) -> Dict[str, torch.Tensor]:
    """Gradient of the loss w.r.t. every parameter block (dropout off)."""
    model.zero_grad(set_to_none=True)
    out = model_forward(model, batch, train_mode=False)
    value = loss(out, batch, model.config)
    if not torch.isfinite(value):
        raise FloatingPointError(f"loss is not finite: {value.item()}")
    value.backward()
    grads = {}
    for name, p in model.named_parameters():
        g = p.grad if p.grad is not None else torch.zeros_like(p)
        if not torch.all(torch.isfinite(g)):
            raise NonFiniteGradientError(name)
        grads[name] = g.detach().clone()
    return grads


# --------------------------------------------------------------------------- checkpoints

MAGIC = b"STMTVDCK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(
    path: Union[str, Path],
    model: StatementDetector,
    threshold: float,
    vocab: Optional[Sequence[str]] = None,
    extra: Optional[dict] = None,
) -> None:
    """Write config, threshold and every tensor as row-major little-endian float64."""
    tensors = []
    blobs = []
    offset = 0
    for name, t in model.state_dict().items():
        arr = t.detach().cpu().numpy()
        blob = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset, "dtype": str(t.dtype).replace("torch.", "")})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "config": model.config.to_dict(),
        "threshold": float(threshold),
        "vocab": list(vocab) if vocab is not None else None,
        "extra": extra or {},
        "tensors": tensors,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(hbytes)))
        fh.write(hbytes)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path: Union[str, Path]) -> Tuple[StatementDetector, float, Optional[List[str]], dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    pos = len(MAGIC)
    version, hlen = struct.unpack_from("<IQ", data, pos)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos += struct.calcsize("<IQ")
    header = json.loads(data[pos : pos + hlen].decode("utf-8"))
    body = memoryview(data)[pos + hlen :]
    model = StatementDetector(ModelConfig.from_dict(header["config"]))
    state = {}
    for t in header["tensors"]:
        count = int(np.prod(t["shape"])) if t["shape"] else 1
        end = t["offset"] + 8 * count
        if end > len(body):
            raise CheckpointError(f"{path}: tensor {t['name']} is truncated")
        arr = np.frombuffer(body[t["offset"] : end], dtype="<f8").reshape(t["shape"])
        state[t["name"]] = torch.from_numpy(arr.copy()).to(getattr(torch, t["dtype"]))
    model.load_state_dict(state)
    # keep the parameter dtype the model was saved with
    first = header["tensors"][0]["dtype"] if header["tensors"] else "float32"
    model.to(getattr(torch, first))
    model.eval()
    return model, float(header["threshold"]), header["vocab"], header["extra"]

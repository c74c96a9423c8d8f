"""Statement and function feature vectors.

Two backends sit behind the same ``encode`` call:

* ``trainable`` -- mean of learned token-embedding rows (the table lives in
  the model and is trained with it); this module only maps text to ids.
* ``pretrained`` -- a frozen transformer served by an external process,
  reached over HTTP. Vectors are cached on disk by content hash.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import tempfile
import time
import urllib.error
import urllib.request
import warnings
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .codegraph import StatementGraph

logger = logging.getLogger(__name__)

UNK = "<unk>"

_WS_PUNCT = re.compile(
    r"[A-Za-z_]\w*|\d+\w*|->|\+\+|--|<<=|>>=|<=|>=|==|!=|&&|\|\||<<|>>|[+\-*/%&|^]=|[^\w\s]"
)


class EncoderError(RuntimeError):
    pass


class EncoderTransportError(EncoderError):
    """The encoder backend could not be reached after all retries."""


@dataclass
class EncoderConfig:
    backend: str = "trainable"  # "trainable" | "pretrained"
    dim: int = 128
    stmt_max_tokens: int = 64
    func_max_tokens: int = 512
    cache_dir: Optional[str] = None
    url: Optional[str] = None
    min_count: int = 1

    def __post_init__(self):
        if self.backend not in ("trainable", "pretrained"):
            raise ValueError(f"unknown encoder backend {self.backend!r}")
        if self.dim <= 0:
            raise ValueError("dim must be positive")
        if self.stmt_max_tokens <= 1 or self.func_max_tokens <= 1:
            raise ValueError("max_tokens must be greater than 1")


@dataclass
class EmbeddingSet:
    function_vec: np.ndarray
    stmt_matrix: np.ndarray

    def __post_init__(self):
        if self.stmt_matrix.ndim != 2 or self.function_vec.ndim != 1:
            raise EncoderError("function_vec must be 1-d and stmt_matrix 2-d")
        if self.stmt_matrix.shape[1] != self.function_vec.shape[0]:
            raise EncoderError(
                f"statement dim {self.stmt_matrix.shape[1]} != function dim {self.function_vec.shape[0]}"
            )
        if not (np.all(np.isfinite(self.function_vec)) and np.all(np.isfinite(self.stmt_matrix))):
            raise EncoderError("embedding contains non-finite values")


# --------------------------------------------------------------------------- tokenization


def tokenize(text: str, scheme: str = "whitespace_punct", backend=None) -> List[str]:
    """Split ``text`` into tokens.

    ``whitespace_punct`` keeps identifiers, numbers and (multi-character)
    operators; ``subword_bpe`` asks ``backend.tokenize`` for its subwords.
    """
    if scheme == "whitespace_punct":
        return _WS_PUNCT.findall(text)
    if scheme == "subword_bpe":
        if backend is None:
            raise ValueError("subword_bpe needs a backend that provides tokenize()")
        return list(backend.tokenize(text))
    raise ValueError(f"unknown tokenization scheme {scheme!r}")


# letters, digits and other symbols form separate pre-tokens
_PRETOKEN = re.compile(r"[A-Za-z]+|\d+|[^\sA-Za-z\d]+")


class BPETokenizer:
    """Minimal byte-pair-encoding tokenizer: learn merges, then apply them greedily by rank."""

    def __init__(self, merges: Sequence[Tuple[str, str]] = ()):
        self.merges = [tuple(m) for m in merges]
        self.ranks = {m: i for i, m in enumerate(self.merges)}

    @classmethod
    def train(cls, texts: Iterable[str], num_merges: int) -> "BPETokenizer":
        words = Counter(w for t in texts for w in _PRETOKEN.findall(t))
        vocab = {tuple(w): c for w, c in words.items()}
        merges: List[Tuple[str, str]] = []
        for _ in range(num_merges):
            pairs: Counter = Counter()
            for sym, c in vocab.items():
                for p in zip(sym, sym[1:]):
                    pairs[p] += c
            if not pairs:
                break
            # ties broken lexicographically so training is deterministic
            best = min(pairs, key=lambda p: (-pairs[p], p))
            merges.append(best)
            vocab = {_merge(sym, best): c for sym, c in vocab.items()}
        return cls(merges)

    def _encode_word(self, word: str) -> List[str]:
        sym = list(word)
        while len(sym) > 1:
            ranked = [(self.ranks.get(p, None), i) for i, p in enumerate(zip(sym, sym[1:]))]
            ranked = [(r, i) for r, i in ranked if r is not None]
            if not ranked:
                break
            _, i = min(ranked)
            sym[i : i + 2] = [sym[i] + sym[i + 1]]
        return sym

    def tokenize(self, text: str) -> List[str]:
        out: List[str] = []
        for w in _PRETOKEN.findall(text):
            out.extend(self._encode_word(w))
        return out


def _merge(sym: Tuple[str, ...], pair: Tuple[str, str]) -> Tuple[str, ...]:
    out = []
    i = 0
    while i < len(sym):
        if i + 1 < len(sym) and (sym[i], sym[i + 1]) == pair:
            out.append(sym[i] + sym[i + 1])
            i += 2
        else:
            out.append(sym[i])
            i += 1
    return tuple(out)


# --------------------------------------------------------------------------- trainable backend


class Vocabulary:
    """Token -> row index; row 0 is the shared unknown-token row."""

    def __init__(self, tokens: Sequence[str] = ()):
        self.itos = [UNK] + [t for t in tokens if t != UNK]
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    @classmethod
    def build(cls, texts: Iterable[str], min_count: int = 1) -> "Vocabulary":
        counts = Counter(tok for t in texts for tok in tokenize(t))
        kept = sorted(t for t, c in counts.items() if c >= min_count)
        return cls(kept)

    def __len__(self) -> int:
        return len(self.itos)

    def ids(self, text: str) -> List[int]:
        return [self.stoi.get(t, 0) for t in tokenize(text)]

    def to_json(self) -> List[str]:
        return list(self.itos[1:])

    @classmethod
    def from_json(cls, tokens: Sequence[str]) -> "Vocabulary":
        return cls(tokens)


def statement_texts(graph: StatementGraph) -> List[str]:
    return [n.code_text for n in graph.nodes]


def token_ids(vocab: Vocabulary, function_text: str, graph: StatementGraph) -> Tuple[List[int], List[List[int]]]:
    """Token ids of the whole function and of every statement (node order)."""
    return vocab.ids(function_text), [vocab.ids(t) for t in statement_texts(graph)]


def mean_rows(table: np.ndarray, ids: Sequence[int]) -> np.ndarray:
    """Mean of embedding-table rows; an empty statement maps to the unknown row."""
    if not ids:
        ids = [0]
    return table[np.asarray(ids)].mean(axis=0)


def encode_trainable(table: np.ndarray, vocab: Vocabulary, function_text: str, graph: StatementGraph) -> EmbeddingSet:
    """Averaged token vectors for a fixed (e.g. trained) embedding table."""
    fids, sids = token_ids(vocab, function_text, graph)
    stmt = np.stack([mean_rows(table, ids) for ids in sids]) if sids else np.zeros((0, table.shape[1]))
    return EmbeddingSet(mean_rows(table, fids), stmt)


# --------------------------------------------------------------------------- cache


class EmbeddingCache:
    """Content-addressed vectors, one file of little-endian float32 per entry."""

    def __init__(self, cache_dir: Union[str, Path], dim: Optional[int] = None):
        self.dir = Path(cache_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.dim = dim

    @staticmethod
    def content_hash(backend_id: str, mode: str, max_tokens: int, text: str) -> str:
        h = hashlib.sha256()
        for part in (backend_id, mode, str(max_tokens), text):
            h.update(part.encode("utf-8"))
            h.update(b"\x00")
        return h.hexdigest()

    def _path(self, key: str) -> Path:
        return self.dir / key[:2] / f"{key}.f32"

    def lookup(self, key: str) -> Optional[np.ndarray]:
        path = self._path(key)
        try:
            raw = path.read_bytes()
        except FileNotFoundError:
            return None
        vec = None
        if raw and len(raw) % 4 == 0:
            vec = np.frombuffer(raw, dtype="<f4").copy()
            if (self.dim is not None and vec.shape[0] != self.dim) or not np.all(np.isfinite(vec)):
                vec = None
        if vec is None:
            warnings.warn(f"corrupt embedding cache entry {path.name}; evicting", stacklevel=2)
            try:
                path.unlink()
            except FileNotFoundError:
                pass
        return vec

    def store(self, key: str, vec: np.ndarray) -> None:
        path = self._path(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        data = np.asarray(vec, dtype="<f4").tobytes()
        # write-then-rename so concurrent readers never see a partial file
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)


# --------------------------------------------------------------------------- pretrained backend


class EncoderClient:
    """HTTP client for an inference service exposing ``/info`` and ``/encode``.

    ``POST /encode`` takes ``{"texts": [...], "mode": "cls", "max_tokens": n}``
    and answers ``{"vectors": [[...], ...]}``; ``GET /info`` answers at least
    ``{"dim": d}`` and optionally ``"sep_token"`` and ``"model"``.
    """

    def __init__(self, url: str, timeout: float = 30.0, retries: int = 3, backoff: float = 0.5):
        self.url = url.rstrip("/")
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self._info: Optional[dict] = None

    def _request(self, path: str, payload: Optional[dict] = None) -> dict:
        data = None if payload is None else json.dumps(payload).encode("utf-8")
        last: Optional[Exception] = None
        for attempt in range(self.retries + 1):
            req = urllib.request.Request(
                self.url + path, data=data, headers={"Content-Type": "application/json"}
            )
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    return json.loads(resp.read().decode("utf-8"))
            except urllib.error.HTTPError as exc:
                # client errors will not fix themselves
                if 400 <= exc.code < 500:
                    raise EncoderError(f"{path}: HTTP {exc.code}") from exc
                last = exc
            except (urllib.error.URLError, OSError, ValueError) as exc:
                last = exc
            if attempt < self.retries:
                time.sleep(self.backoff * 2**attempt)
        raise EncoderTransportError(f"{self.url}{path} unreachable after {self.retries + 1} attempts: {last}")

    def info(self) -> dict:
        if self._info is None:
            info = self._request("/info")
            if int(info.get("dim", 0)) <= 0:
                raise EncoderError(f"backend advertised an invalid dim: {info.get('dim')!r}")
            self._info = info
        return self._info

    @property
    def dim(self) -> int:
        return int(self.info()["dim"])

    @property
    def sep_token(self) -> str:
        return str(self.info().get("sep_token", "</s>"))

    @property
    def backend_id(self) -> str:
        return str(self.info().get("model", self.url))

    def encode(self, texts: Sequence[str], max_tokens: int) -> np.ndarray:
        if not texts:
            return np.zeros((0, self.dim))
        resp = self._request("/encode", {"texts": list(texts), "mode": "cls", "max_tokens": max_tokens})
        vecs = np.asarray(resp.get("vectors"), dtype=np.float64)
        if vecs.ndim != 2 or vecs.shape[0] != len(texts):
            raise EncoderError(f"expected {len(texts)} vectors, got shape {vecs.shape}")
        if vecs.shape[1] != self.dim:
            raise EncoderError(f"backend returned dim {vecs.shape[1]}, advertised {self.dim}")
        return vecs

    def tokenize(self, text: str) -> List[str]:
        resp = self._request("/tokenize", {"texts": [text]})
        return list(resp["tokens"][0])


class PretrainedEncoder:
    """Frozen encoder behind ``EncoderClient``; every input gets a leading separator."""

    def __init__(self, client: EncoderClient, config: Optional[EncoderConfig] = None, cache: Optional[EmbeddingCache] = None):
        self.client = client
        self.config = config or EncoderConfig(backend="pretrained", dim=client.dim)
        if cache is None and self.config.cache_dir:
            cache = EmbeddingCache(self.config.cache_dir, client.dim)
        self.cache = cache

    def _vectors(self, texts: Sequence[str], max_tokens: int) -> np.ndarray:
        # empty natural-language slot: the code follows the separator directly
        inputs = [self.client.sep_token + t for t in texts]
        out: List[Optional[np.ndarray]] = [None] * len(inputs)
        keys = [EmbeddingCache.content_hash(self.client.backend_id, "cls", max_tokens, t) for t in inputs]
        if self.cache is not None:
            for i, k in enumerate(keys):
                out[i] = self.cache.lookup(k)
        todo = [i for i, v in enumerate(out) if v is None]
        if todo:
            fresh = self.client.encode([inputs[i] for i in todo], max_tokens)
            for i, vec in zip(todo, fresh):
                out[i] = vec.astype("<f4").astype(np.float64)
                if self.cache is not None:
                    self.cache.store(keys[i], vec)
        return np.stack([np.asarray(v, dtype=np.float64) for v in out]) if out else np.zeros((0, self.client.dim))

    def encode(self, function_text: str, graph: StatementGraph) -> EmbeddingSet:
        stmt = self._vectors(statement_texts(graph), self.config.stmt_max_tokens)
        func = self._vectors([function_text], self.config.func_max_tokens)[0]
        if stmt.shape[0] == 0:
            stmt = np.zeros((0, func.shape[0]))
        return EmbeddingSet(func, stmt)


def make_cache_from_env(dim: Optional[int] = None) -> Optional[EmbeddingCache]:
    path = os.environ.get("STMTVD_CACHE")
    return EmbeddingCache(path, dim) if path else None

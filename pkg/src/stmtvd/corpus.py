"""Dataset ingestion, cleaning and train/validation/test splitting.

Input is Big-Vul-style JSONL, one function pair per line::

    {"id": "...", "project": "...", "commit_id": "...", "cve_id": null,
     "func_before": "...", "func_after": "...", "vul": 0}
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .clex import lex, strip_comments

logger = logging.getLogger(__name__)

REQUIRED_KEYS = ("id", "project", "commit_id", "func_before", "func_after", "vul")
KNOWN_KEYS = frozenset(REQUIRED_KEYS) | {"cve_id"}


class CorpusError(ValueError):
    """Raised for malformed dataset files or impossible split requests."""

    def __init__(self, message: str, line_no: Optional[int] = None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


class DuplicateIdError(CorpusError):
    pass


@dataclass(frozen=True)
class FunctionSample:
    id: str
    project: str
    commit_id: str
    code_before: str
    code_after: str
    function_vulnerable: int
    cve_id: Optional[str] = None
    metadata: Dict[str, str] = field(default_factory=dict, compare=True, hash=False)

    def to_row(self) -> dict:
        row = {
            "id": self.id,
            "project": self.project,
            "commit_id": self.commit_id,
            "cve_id": self.cve_id,
            "func_before": self.code_before,
            "func_after": self.code_after,
            "vul": self.function_vulnerable,
        }
        for k, v in self.metadata.items():
            row.setdefault(k, v)
        return row


@dataclass(frozen=True)
class DatasetSplit:
    train: Tuple[str, ...]
    validation: Tuple[str, ...]
    test: Tuple[str, ...]
    split_kind: str  # "random" | "cross-project"
    seed: int
    target_project: Optional[str] = None

    def to_json(self) -> dict:
        d = asdict(self)
        for k in ("train", "validation", "test"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_json(cls, d: dict) -> "DatasetSplit":
        return cls(
            train=tuple(d["train"]),
            validation=tuple(d["validation"]),
            test=tuple(d["test"]),
            split_kind=d["split_kind"],
            seed=int(d["seed"]),
            target_project=d.get("target_project"),
        )


@dataclass
class CleaningReport:
    input: int = 0
    removed_cosmetic: int = 0
    removed_truncated: int = 0
    kept: int = 0

    def to_json(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------- ingest


def _parse_row(obj: object, line_no: int) -> FunctionSample:
    if not isinstance(obj, dict):
        raise CorpusError("row is not a JSON object", line_no)
    missing = [k for k in REQUIRED_KEYS if k not in obj]
    if missing:
        raise CorpusError(f"missing field(s) {', '.join(missing)}", line_no)
    for k in ("id", "project", "commit_id", "func_before", "func_after"):
        if not isinstance(obj[k], str):
            raise CorpusError(f"field {k!r} must be a string", line_no)
    if not obj["func_before"].strip():
        raise CorpusError("func_before is empty", line_no)
    vul = obj["vul"]
    if isinstance(vul, bool) or vul not in (0, 1):
        raise CorpusError(f"field 'vul' must be 0 or 1, got {vul!r}", line_no)
    cve = obj.get("cve_id")
    if cve is not None and not isinstance(cve, str):
        raise CorpusError("field 'cve_id' must be a string or null", line_no)
    meta = {k: v if isinstance(v, str) else json.dumps(v) for k, v in obj.items() if k not in KNOWN_KEYS}
    return FunctionSample(
        id=obj["id"],
        project=obj["project"],
        commit_id=obj["commit_id"],
        cve_id=cve,
        code_before=obj["func_before"],
        code_after=obj["func_after"],
        function_vulnerable=int(vul),
        metadata=meta,
    )


def ingest(path: Union[str, Path]) -> List[FunctionSample]:
    """Read a dataset JSONL file. Blank lines are skipped.

    Raises CorpusError (with ``line_no``) for the first malformed row and
    DuplicateIdError if any id repeats.
    """
    samples: List[FunctionSample] = []
    seen: Dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"invalid JSON ({exc.msg})", line_no) from None
            sample = _parse_row(obj, line_no)
            if sample.id in seen:
                raise DuplicateIdError(
                    f"duplicate id {sample.id!r} (first seen on line {seen[sample.id]})", line_no
                )
            seen[sample.id] = line_no
            samples.append(sample)
    return samples


def write_samples(samples: Iterable[FunctionSample], path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_row(), ensure_ascii=False) + "\n")


# --------------------------------------------------------------------------- cleaning


def code_tokens(code: str) -> List[str]:
    return [t.text for t in lex(code, skip_directives=False).tokens]


def is_cosmetic_change(before: str, after: str) -> bool:
    """True iff the two (comment-stripped) texts have identical token streams."""
    return code_tokens(before) == code_tokens(after)


_OPENERS = {"(": ")", "[": "]", "{": "}"}
_CLOSERS = {")", "]", "}"}


def detect_truncation(code: str) -> bool:
    """Heuristic check for a function cut off part-way through.

    True when bracket nesting is unbalanced at the end of the text or the
    text stops inside a string, character literal or block comment.
    """
    result = lex(code, skip_directives=True)
    if result.unterminated is not None:
        return True
    stack: List[str] = []
    for tok in result.tokens:
        if tok.kind != "punct":
            continue
        if tok.text in _OPENERS:
            stack.append(_OPENERS[tok.text])
        elif tok.text in _CLOSERS:
            if not stack or stack.pop() != tok.text:
                return True
    return bool(stack)


def clean(samples: Sequence[FunctionSample]) -> Tuple[List[FunctionSample], CleaningReport]:
    """Strip comments, then drop cosmetic-only fixes and truncated functions."""
    report = CleaningReport(input=len(samples))
    kept: List[FunctionSample] = []
    for s in samples:
        before = strip_comments(s.code_before)
        after = strip_comments(s.code_after)
        if s.function_vulnerable and is_cosmetic_change(before, after):
            report.removed_cosmetic += 1
            logger.debug("drop %s: cosmetic change only", s.id)
            continue
        if detect_truncation(before) or detect_truncation(after):
            report.removed_truncated += 1
            logger.debug("drop %s: truncated", s.id)
            continue
        if before == s.code_before and after == s.code_after:
            kept.append(s)
        else:
            kept.append(replace(s, code_before=before, code_after=after))
    report.kept = len(kept)
    return kept, report


# --------------------------------------------------------------------------- splits


def _bucket_sizes(n: int, val_frac: float = 0.1, test_frac: float = 0.1) -> Tuple[int, int, int]:
    n_val = int(np.floor(n * val_frac + 0.5))
    n_test = int(np.floor(n * test_frac + 0.5))
    return n - n_val - n_test, n_val, n_test


def make_random_split(samples: Sequence[FunctionSample], seed: int) -> DatasetSplit:
    """80:10:10 random split; validation and test keep the natural class ratio."""
    if len(samples) < 10:
        raise CorpusError(f"need at least 10 samples for a random split, got {len(samples)}")
    ids = [s.id for s in samples]
    order = np.random.default_rng(seed).permutation(len(ids))
    n_train, n_val, _ = _bucket_sizes(len(ids))
    shuffled = [ids[i] for i in order]
    return DatasetSplit(
        train=tuple(shuffled[:n_train]),
        validation=tuple(shuffled[n_train : n_train + n_val]),
        test=tuple(shuffled[n_train + n_val :]),
        split_kind="random",
        seed=seed,
    )


def undersample_train(split: DatasetSplit, samples: Sequence[FunctionSample], seed: int) -> DatasetSplit:
    """Drop non-vulnerable training functions until they match the vulnerable count."""
    if not split.train:
        raise CorpusError("training split is empty")
    label = {s.id: s.function_vulnerable for s in samples}
    vul = [i for i in split.train if label[i] == 1]
    nonvul = [i for i in split.train if label[i] == 0]
    if not vul:
        raise CorpusError("no vulnerable functions in the training split")
    if len(nonvul) <= len(vul):
        return split
    rng = np.random.default_rng(seed)
    keep = set(rng.choice(len(nonvul), size=len(vul), replace=False).tolist())
    kept_nonvul = {nonvul[i] for i in keep}
    train = tuple(i for i in split.train if label[i] == 1 or i in kept_nonvul)
    return replace(split, train=train)


def make_cross_project_split(
    samples: Sequence[FunctionSample],
    target_project: str,
    seed: int,
    val_fraction: float = 0.1,
) -> DatasetSplit:
    """Hold out every sample of ``target_project`` as the test set.

    The remaining projects are split 9:1 into train and validation.
    Undersampling is left to the caller.
    """
    projects = Counter(s.project for s in samples)
    if target_project not in projects:
        raise CorpusError(
            f"unknown project {target_project!r}; available: {', '.join(sorted(projects))}"
        )
    test = tuple(s.id for s in samples if s.project == target_project)
    rest = [s.id for s in samples if s.project != target_project]
    if not rest:
        raise CorpusError(f"project {target_project!r} covers every sample; training set would be empty")
    order = np.random.default_rng(seed).permutation(len(rest))
    shuffled = [rest[i] for i in order]
    n_val = int(np.floor(len(rest) * val_fraction + 0.5))
    if len(rest) - n_val < 1:
        n_val = len(rest) - 1
    return DatasetSplit(
        train=tuple(shuffled[n_val:]),
        validation=tuple(shuffled[:n_val]),
        test=test,
        split_kind="cross-project",
        seed=seed,
        target_project=target_project,
    )


def by_id(samples: Iterable[FunctionSample]) -> Dict[str, FunctionSample]:
    return {s.id: s for s in samples}

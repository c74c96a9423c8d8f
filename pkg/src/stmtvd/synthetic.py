"""Generated C functions with a planted buffer-copy bug.

Every function copies ``src`` into a fixed-size local buffer with a length
variable. In a vulnerable function the length reaching the copy comes
straight from ``get_packet_length``; a safe function clamps it first (or
uses ``sizeof`` outright). The copy line reads the same in both classes, so
only its data-dependency context tells them apart. Vulnerable samples come
with the fixed version (the clamp inserted), so they also work as input to
the diff-based labeler.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .corpus import FunctionSample

BUF_NAMES = ("buf", "tmp", "data", "out", "dst", "local")
LEN_NAMES = ("len", "n", "size", "count", "sz")
SRC_NAMES = ("src", "payload", "input", "msg")
PKT_NAMES = ("pkt", "skb", "req", "frame")
AUX_NAMES = ("ret", "flags", "status", "hdr", "off")
VERBS = ("parse", "handle", "read", "decode", "fill", "copy", "load", "recv")
NOUNS = ("header", "record", "frame", "option", "block", "entry", "chunk", "field")
COPY_CALLS = ("memcpy", "memmove")
PROJECTS = ("qemu", "linux", "ffmpeg")


@dataclass(frozen=True)
class PlantedSample:
    sample: FunctionSample
    vulnerable_lines: Tuple[int, ...]  # 1-based lines of code_before that read the unchecked length


def _filler(rng: np.random.Generator, aux: str, pkt: str) -> List[str]:
    k = int(rng.integers(1, 9))
    choice = int(rng.integers(0, 7))
    if choice == 0:
        return [f"\t{aux} += {k};"]
    if choice == 1:
        return [f"\tif ({aux} > {k})", f"\t\t{aux} = 0;"]
    if choice == 2:
        return [f"\tlog_debug(\"step %d\", {aux});"]
    if choice == 3:
        return [f"\t{aux} = {pkt}->flags & {k};"]
    if choice == 4:
        return [f"\tspin_lock(&{pkt}->lock);", f"\t{pkt}->seq++;", f"\tspin_unlock(&{pkt}->lock);"]
    if choice == 5:
        # a decoy call with the same source as the bug, unrelated to the copy
        return [f"\t{aux} = get_packet_length({pkt}) > {k};"]
    return [f"\t{aux} = {aux} * {k} - 1;"]


def make_function(rng: np.random.Generator, vulnerable: bool, index: int) -> Tuple[str, str, Tuple[int, ...]]:
    """(before, after, lines of before that read the unchecked length)."""
    buf, ln, src, pkt, aux = (
        str(rng.choice(BUF_NAMES)),
        str(rng.choice(LEN_NAMES)),
        str(rng.choice(SRC_NAMES)),
        str(rng.choice(PKT_NAMES)),
        str(rng.choice(AUX_NAMES)),
    )
    name = f"{rng.choice(VERBS)}_{rng.choice(NOUNS)}_{index}"
    size = int(rng.choice([16, 32, 64, 128]))
    copy = str(rng.choice(COPY_CALLS))
    head = [
        f"static int {name}(struct packet *{pkt}, const char *{src})",
        "{",
        f"\tchar {buf}[{size}];",
        f"\tint {ln};",
        f"\tint {aux} = 0;",
    ]
    for _ in range(int(rng.integers(0, 3))):
        head += _filler(rng, aux, pkt)
    taint = f"\t{ln} = get_packet_length({pkt});"
    clamp = f"\t{ln} = MIN({ln}, sizeof({buf}));"
    between = []
    for _ in range(int(rng.integers(0, 2))):
        between += _filler(rng, aux, pkt)
    guarded = bool(rng.integers(0, 2))
    copy_line = f"\t{copy}({buf}, {src}, {ln});"
    tail_pre = [f"\tif ({ln} > 0) {{"] if guarded else []
    body_copy = ["\t" + copy_line] if guarded else [copy_line]
    tail_post = ["\t}"] if guarded else []
    tail = []
    for _ in range(int(rng.integers(0, 3))):
        tail += _filler(rng, aux, pkt)
    tail += [f"\treturn {aux};", "}"]

    safe_style = int(rng.integers(0, 2))
    if vulnerable:
        defs_before = [taint] + between
        defs_after = [taint, clamp] + between
    elif safe_style == 0:
        defs_before = defs_after = [taint, clamp] + between
    else:
        defs_before = defs_after = [f"\t{ln} = sizeof({buf});"] + between

    before = head + defs_before + tail_pre + body_copy + tail_post + tail
    after = head + defs_after + tail_pre + body_copy + tail_post + tail
    copy_no = len(head) + len(defs_before) + len(tail_pre) + 1
    # the guard reads the length too
    uses = (copy_no - 1, copy_no) if guarded else (copy_no,)
    return "\n".join(before) + "\n", "\n".join(after) + "\n", uses


def planted_corpus(n: int, seed: int, vulnerable_fraction: float = 0.5, projects: Sequence[str] = PROJECTS) -> List[PlantedSample]:
    """``n`` functions, ``round(n * vulnerable_fraction)`` of them vulnerable, in shuffled order."""
    rng = np.random.default_rng(seed)
    n_vul = int(round(n * vulnerable_fraction))
    flags = np.array([1] * n_vul + [0] * (n - n_vul))
    rng.shuffle(flags)
    out = []
    for i, v in enumerate(flags):
        before, after, uses = make_function(rng, bool(v), i)
        project = str(projects[i % len(projects)])
        sample = FunctionSample(
            id=f"syn-{seed}-{i}",
            project=project,
            commit_id=f"{seed:04x}{i:06x}",
            code_before=before,
            code_after=after,
            function_vulnerable=int(v),
            cve_id=f"CVE-2000-{1000 + i}" if v else None,
        )
        out.append(PlantedSample(sample, uses if v else ()))
    return out


def planted_labels(items: Sequence[PlantedSample]) -> Dict[str, Tuple[int, ...]]:
    return {p.sample.id: p.vulnerable_lines for p in items}

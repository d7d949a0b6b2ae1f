"""Shared test helpers.

``reference_scan`` is an independent oracle for the lexer: a stack-based
scanner written against the same surface grammar but structured differently
(explicit mode stack, regex dispatch for literals).  Tests compare the
implementation against it over the snippet corpus and randomized inputs.
"""

from __future__ import annotations

import math
import random
import re
from typing import List, Optional, Tuple

import numpy as np

_WS_RUN = re.compile(r"[ \t\r\n]+")
_CHAR_LIT = re.compile(r"'(?:\\(?:x[0-9a-fA-F]{2}|u\{[0-9a-fA-F]+\}|.)|[^'\\\n])'")
_IDENT_CH = re.compile(r"[A-Za-z0-9_'!?₀-₉-￿]")


class ReferenceScanError(Exception):
    def __init__(self, kind: str, offset: int):
        super().__init__(f"{kind} at {offset}")
        self.kind = kind
        self.offset = offset


def reference_scan(src: str) -> List[Tuple[str, str]]:
    """Oracle tokenization: list of (kind, text) spans covering src exactly."""
    spans: List[Tuple[str, str]] = []
    i = 0
    n = len(src)
    while i < n:
        m = _WS_RUN.match(src, i)
        if m:
            spans.append(("whitespace", m.group(0)))
            i = m.end()
            continue
        if src.startswith("--", i):
            end = src.find("\n", i)
            end = n if end == -1 else end
            spans.append(("line-comment", src[i:end]))
            i = end
            continue
        if src.startswith("/-", i):
            stack = [i]
            j = i + 2
            while j < n and stack:
                if src.startswith("/-", j):
                    stack.append(j)
                    j += 2
                elif src.startswith("-/", j):
                    stack.pop()
                    j += 2
                else:
                    j += 1
            if stack:
                raise ReferenceScanError("unterminated-comment", i)
            spans.append(("block-comment", src[i:j]))
            i = j
            continue
        if src[i] == '"':
            j = i + 1
            closed = False
            while j < n:
                if src[j] == "\\":
                    j += 2
                elif src[j] == '"':
                    j += 1
                    closed = True
                    break
                else:
                    j += 1
            if not closed or j > n:
                raise ReferenceScanError("unterminated-string", i)
            spans.append(("string-literal", src[i:j]))
            i = j
            continue
        # Code run.
        j = i
        while j < n:
            c = src[j]
            if c in ' \t\r\n"' or src.startswith("--", j) or src.startswith("/-", j):
                break
            if c == "'" and (j == i or not _IDENT_CH.match(src[j - 1])):
                m = _CHAR_LIT.match(src, j)
                if m:
                    j = m.end()
                    continue
            j += 1
        spans.append(("code", src[i:j]))
        i = j
    return spans


def reference_semantic_tokens(src: str) -> List[str]:
    return [text for kind, text in reference_scan(src) if kind in ("code", "string-literal")]


# --- randomized comment insertion --------------------------------------

_COMMENT_WORDS = ["note", "step", "case", "bound", "expand", "rewrite", "x", "qed"]


def _random_comment_text(rng: random.Random) -> str:
    return " ".join(rng.choices(_COMMENT_WORDS, k=rng.randint(1, 4)))


def token_boundaries(src: str) -> List[int]:
    """Byte offsets at which a comment may be inserted: every token edge."""
    from leanforge.corpus import lex_lean

    edges = {0, len(src)}
    for tok in lex_lean(src):
        edges.add(tok.start)
        edges.add(tok.end)
    return sorted(edges)


def _pad_left(out: str, pos: int, comment: str) -> str:
    # A separating space stops a `--` opener fusing with a preceding `-` or
    # `/` (e.g. `-` + `--` would lex as one `---` line comment).  Block
    # comments cannot fuse leftward, so they need no padding.
    if comment.startswith("--") and pos > 0 and out[pos - 1] in "-/":
        return " " + comment
    return comment


def insert_comments_reckless(src: str, rng: random.Random, count: int = 3) -> str:
    """Insert block or line comments at arbitrary token boundaries.

    Preserves the semantic token stream (token_equal) but may reshape lines,
    so tactic-step counts are not protected.
    """
    out = src
    for _ in range(count):
        edges = token_boundaries(out)
        pos = rng.choice(edges)
        text = _random_comment_text(rng)
        comment = f"/- {text} -/" if rng.random() < 0.5 else f"-- {text}\n"
        out = out[:pos] + _pad_left(out, pos, comment) + out[pos:]
    return out


def insert_comments_line_respecting(src: str, rng: random.Random, count: int = 3) -> str:
    """Insert comments without disturbing line structure.

    Three forms: an inline block comment (no newline) at a token boundary, a
    trailing line comment just before an existing newline, and a whole
    comment line duplicated onto the indentation of the following line.
    These mirror how commented proofs are actually written, and keep both
    token_equal and tactic-step counts intact.
    """
    out = src
    for _ in range(count):
        form = rng.randint(0, 2)
        text = _random_comment_text(rng)
        if form == 0:
            edges = token_boundaries(out)
            pos = rng.choice(edges)
            out = out[:pos] + _pad_left(out, pos, f"/- {text} -/") + out[pos:]
        elif form == 1 and "\n" in out:
            newlines = [i for i, ch in enumerate(out) if ch == "\n"]
            pos = rng.choice(newlines)
            out = out[:pos] + f" -- {text}" + out[pos:]
        else:
            line_starts = [0] + [i + 1 for i, ch in enumerate(out) if ch == "\n" and i + 1 <= len(out)]
            pos = rng.choice(line_starts)
            rest = out[pos:]
            indent = rest[: len(rest) - len(rest.lstrip(" \t"))]
            if "\n" in indent:
                indent = indent.split("\n")[0]
            out = out[:pos] + f"{indent}-- {text}\n" + out[pos:]
    return out


# --- random Lean-ish source generator -----------------------------------

_ATOMS = ["rfl", "simp", "h₀", "x", "Nat.add_zero", "(a+b)", "[h]", "norm_num", "ring"]


def random_leanish_source(rng: random.Random) -> str:
    """Small random source built from code atoms, strings, and comments."""
    parts: List[str] = []
    for _ in range(rng.randint(1, 12)):
        choice = rng.random()
        if choice < 0.5:
            parts.append(rng.choice(_ATOMS))
        elif choice < 0.65:
            parts.append('"s%d"' % rng.randint(0, 9))
        elif choice < 0.8:
            depth = rng.randint(1, 3)
            body = _random_comment_text(rng)
            comment = body
            for _ in range(depth):
                comment = f"/- {comment} -/"
            parts.append(comment)
        else:
            parts.append(f"-- {_random_comment_text(rng)}\n")
        parts.append(rng.choice([" ", "  ", "\n", "\n  ", " \t"]))
    return "".join(parts)


# --- retrieval oracles --------------------------------------------------------
#
# Written against the loss formula directly (scalar loops, no numpy
# broadcasting) so they share no code paths with the implementation.


def oracle_cosine(x, y) -> float:
    dot = sum(float(a) * float(b) for a, b in zip(x, y))
    nx = math.sqrt(sum(float(a) ** 2 for a in x))
    ny = math.sqrt(sum(float(b) ** 2 for b in y))
    return dot / (nx * ny)


def oracle_contrastive_loss(nl_rows, fl_rows, negatives, weights) -> float:
    """Direct per-pair evaluation of the contrastive objective."""
    rows = [list(map(float, row)) for row in weights]

    def project(vec):
        return [sum(w * float(x) for w, x in zip(row, vec)) for row in rows]

    a = [project(u) for u in nl_rows]
    b = [project(v) for v in fl_rows]
    total = 0.0
    for i, j in enumerate(negatives):
        total += (
            1.0
            - oracle_cosine(a[i], b[i])
            + 0.5 * (oracle_cosine(a[j], b[i]) + oracle_cosine(a[i], b[j]))
        )
    return total / len(nl_rows)


def fd_contrastive_gradient(batch, head, eps: float = 1e-5):
    """Central finite differences of contrastive_loss over every weight."""
    from leanforge import retrieval

    base = head.weights
    grad = np.zeros_like(base)
    for r in range(base.shape[0]):
        for c in range(base.shape[1]):
            plus = base.copy()
            plus[r, c] += eps
            minus = base.copy()
            minus[r, c] -= eps
            head_plus = retrieval.ProjectionHead(
                weights=plus, d_in=head.d_in, d_out=head.d_out, seed=head.seed
            )
            head_minus = retrieval.ProjectionHead(
                weights=minus, d_in=head.d_in, d_out=head.d_out, seed=head.seed
            )
            grad[r, c] = (
                retrieval.contrastive_loss(batch, head_plus)
                - retrieval.contrastive_loss(batch, head_minus)
            ) / (2.0 * eps)
    return grad


def rotation_matrix(dim: int, rotate_dims: int, angle: float):
    """Rotation acting on the first rotate_dims coordinates, identity beyond."""
    assert rotate_dims % 2 == 0 and rotate_dims <= dim
    out = np.eye(dim)
    c, s = math.cos(angle), math.sin(angle)
    for k in range(0, rotate_dims, 2):
        out[k, k] = c
        out[k, k + 1] = -s
        out[k + 1, k] = s
        out[k + 1, k + 1] = c
    return out


def rotated_pair_corpus(seed: int, count: int, dim: int, rotate_dims: int, angle: float):
    """Aligned (nl, fl) pairs where nl = R @ fl for a fixed rotation R.

    A head that screens out the rotated coordinates makes aligned pairs
    exactly parallel while leaving cross-pair geometry random.
    """
    from leanforge import retrieval

    rng = np.random.default_rng(seed)
    rot = rotation_matrix(dim, rotate_dims, angle)
    pairs = []
    for _ in range(count):
        fl = rng.normal(size=dim)
        fl /= np.linalg.norm(fl)
        nl = rot @ fl
        pairs.append((retrieval.embedding(nl), retrieval.embedding(fl)))
    return pairs

"""Arithmetic-expression domain: vocabulary, parser, sampler and objective.

Expressions are fixed-length token sequences (``SEQ_LEN`` ids, PAD-suffixed)
over a 12-symbol vocabulary. The grammar is

    S -> T (op T)*          op in {+, *, /}, left-associative, no precedence
    T -> sin ( S ) | exp ( S ) | ( S ) | x | 1 | 2 | 3
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

VOCAB: tuple[str, ...] = ("PAD", "x", "1", "2", "3", "+", "*", "/", "(", ")", "sin", "exp")
TOKEN_ID: dict[str, int] = {name: i for i, name in enumerate(VOCAB)}
PAD = 0
SEQ_LEN = 16
VOCAB_SIZE = len(VOCAB)

GRID = np.linspace(-10.0, 10.0, 1000)
TARGET_TEXT = "1 / 3 + x + sin ( x * x )"
MSE_CAP = 1e10
_MAGNITUDE_CAP = 1e10

_LEAVES = ("x", "1", "2", "3")
_OPS = ("+", "*", "/")
_FUNCS = ("sin", "exp")

TokenSequence = tuple[int, ...]


class GrammarError(ValueError):
    pass


class SamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class Leaf:
    symbol: str


@dataclass(frozen=True)
class Unary:
    fn: str
    child: "Ast"


@dataclass(frozen=True)
class Binary:
    op: str
    left: "Ast"
    right: "Ast"


Ast = Union[Leaf, Unary, Binary]


class _Overflow:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "OVERFLOW"

    def __bool__(self):
        return False


OVERFLOW = _Overflow()


# -- token sequences ---------------------------------------------------------


def tokenize(text: str, length: int = SEQ_LEN) -> TokenSequence:
    """Space-separated token names to a PAD-filled id tuple."""
    names = text.split()
    if len(names) > length:
        raise GrammarError(f"{len(names)} tokens exceed sequence length {length}")
    try:
        ids = [TOKEN_ID[name] for name in names]
    except KeyError as exc:
        raise GrammarError(f"unknown token {exc.args[0]!r}") from None
    return tuple(ids + [PAD] * (length - len(ids)))


def detokenize(seq: Sequence[int]) -> str:
    """Token names joined by spaces, PADs dropped."""
    return " ".join(VOCAB[t] for t in seq if t != PAD)


def _check_seq(seq: Sequence[int]) -> TokenSequence:
    out = tuple(int(t) for t in seq)
    if len(out) != SEQ_LEN:
        raise GrammarError(f"sequence length {len(out)} != {SEQ_LEN}")
    if any(t < 0 or t >= VOCAB_SIZE for t in out):
        raise GrammarError("token id out of range")
    return out


# -- parsing -----------------------------------------------------------------


class _Parser:
    def __init__(self, names: list[str]):
        self.names = names
        self.pos = 0

    def peek(self):
        return self.names[self.pos] if self.pos < len(self.names) else None

    def expect(self, name: str) -> bool:
        if self.peek() == name:
            self.pos += 1
            return True
        return False

    def expr(self):
        node = self.term()
        if node is None:
            return None
        while self.peek() in _OPS:
            op = self.names[self.pos]
            self.pos += 1
            right = self.term()
            if right is None:
                return None
            node = Binary(op, node, right)
        return node

    def term(self):
        tok = self.peek()
        if tok is None:
            return None
        if tok in _LEAVES:
            self.pos += 1
            return Leaf(tok)
        if tok in _FUNCS:
            self.pos += 1
            if not self.expect("("):
                return None
            child = self.expr()
            if child is None or not self.expect(")"):
                return None
            return Unary(tok, child)
        if tok == "(":
            self.pos += 1
            child = self.expr()
            if child is None or not self.expect(")"):
                return None
            return child
        return None


def parse(seq: Sequence[int]) -> Ast | None:
    """Parse a token sequence; ``None`` marks an invalid expression."""
    seq = _check_seq(seq)
    n = len(seq)
    while n and seq[n - 1] == PAD:
        n -= 1
    body = seq[:n]
    if not body or PAD in body:
        return None
    parser = _Parser([VOCAB[t] for t in body])
    tree = parser.expr()
    if tree is None or parser.pos != len(body):
        return None
    return tree


def is_valid(seq: Sequence[int]) -> bool:
    return parse(seq) is not None


def to_text(tree: Ast) -> str:
    """Render an AST back to (fully parenthesised where needed) token text."""
    if isinstance(tree, Leaf):
        return tree.symbol
    if isinstance(tree, Unary):
        return f"{tree.fn} ( {to_text(tree.child)} )"
    right = to_text(tree.right)
    if isinstance(tree.right, Binary):
        right = f"( {right} )"
    return f"{to_text(tree.left)} {tree.op} {right}"


# -- sampling ----------------------------------------------------------------


def _sample_expr(rng: np.random.Generator, budget: list[int], depth: int) -> list[str]:
    out = _sample_term(rng, budget, depth)
    while budget[0] > 2 and rng.random() < 0.6 / (1 + depth):
        out.append(_OPS[rng.integers(len(_OPS))])
        budget[0] -= 1
        out.extend(_sample_term(rng, budget, depth))
    return out


def _sample_term(rng: np.random.Generator, budget: list[int], depth: int) -> list[str]:
    remaining = budget[0]
    # Wrapping needs at least 3 extra slots; favour leaves as the budget shrinks.
    p_leaf = 1.0 if remaining < 4 else min(1.0, 0.3 + 0.2 * depth + 1.5 / remaining)
    if rng.random() < p_leaf:
        budget[0] -= 1
        return [_LEAVES[rng.integers(len(_LEAVES))]]
    kind = rng.integers(3)
    if kind < 2:
        budget[0] -= 3
        return [_FUNCS[kind], "("] + _sample_expr(rng, budget, depth + 1) + [")"]
    budget[0] -= 2
    return ["("] + _sample_expr(rng, budget, depth + 1) + [")"]


def sample_expression(rng: np.random.Generator, max_tokens: int = SEQ_LEN) -> TokenSequence:
    """Draw a random valid expression of at most ``max_tokens`` tokens."""
    if not 1 <= max_tokens <= SEQ_LEN:
        raise ValueError(f"max_tokens must be in [1, {SEQ_LEN}]")
    for _ in range(100):
        budget = [max_tokens]
        names = _sample_expr(rng, budget, 0)
        if len(names) <= max_tokens:
            seq = tokenize(" ".join(names))
            if is_valid(seq):
                return seq
    raise SamplingError(f"could not sample an expression within {max_tokens} tokens")


# -- evaluation --------------------------------------------------------------


def _eval_array(tree: Ast, x: np.ndarray) -> np.ndarray:
    """Vectorised evaluation; NaN marks an overflowed or undefined point."""
    if isinstance(tree, Leaf):
        if tree.symbol == "x":
            return x.astype(np.float64, copy=True)
        return np.full(x.shape, float(tree.symbol))
    if isinstance(tree, Unary):
        child = _eval_array(tree.child, x)
        out = np.sin(child) if tree.fn == "sin" else np.exp(child)
    else:
        left = _eval_array(tree.left, x)
        right = _eval_array(tree.right, x)
        if tree.op == "+":
            out = left + right
        elif tree.op == "*":
            out = left * right
        else:
            out = left / right
    out[~np.isfinite(out) | (np.abs(out) > _MAGNITUDE_CAP)] = np.nan
    return out


def evaluate(tree: Ast, x: float):
    """Evaluate at a single point; returns ``OVERFLOW`` on blow-up."""
    with np.errstate(all="ignore"):
        val = float(_eval_array(tree, np.array([float(x)]))[0])
    return OVERFLOW if math.isnan(val) else val


def target_values(x: np.ndarray = GRID) -> np.ndarray:
    return 1.0 / 3.0 + x + np.sin(x * x)


_TARGET = target_values()


def mse(tree: Ast) -> float:
    with np.errstate(all="ignore"):
        vals = _eval_array(tree, GRID)
        if np.isnan(vals).any():
            return MSE_CAP
        err = float(np.mean((vals - _TARGET) ** 2))
    return err if math.isfinite(err) and err <= MSE_CAP else MSE_CAP


def objective(seq: Sequence[int]) -> float | None:
    """``-log(1 + MSE)`` against the target on the grid; ``None`` if invalid."""
    tree = parse(seq)
    if tree is None:
        return None
    err = mse(tree)
    return -math.log1p(err) if err > 0 else 0.0


# -- one-hot encoding --------------------------------------------------------


def one_hot(seq: Sequence[int]) -> np.ndarray:
    """``(VOCAB_SIZE, SEQ_LEN)`` matrix with one column per position."""
    seq = _check_seq(seq)
    out = np.zeros((VOCAB_SIZE, SEQ_LEN))
    out[list(seq), np.arange(SEQ_LEN)] = 1.0
    return out


def one_hot_batch(seqs: Iterable[Sequence[int]]) -> np.ndarray:
    """Stack of one-hot matrices flattened position-major, shape ``(n, L*D)``."""
    ids = np.asarray([_check_seq(s) for s in seqs], dtype=np.int64)
    out = np.zeros((len(ids), SEQ_LEN, VOCAB_SIZE))
    rows = np.arange(len(ids))[:, None]
    out[rows, np.arange(SEQ_LEN)[None, :], ids] = 1.0
    return out.reshape(len(ids), SEQ_LEN * VOCAB_SIZE)


def argmax_decode(probs) -> TokenSequence:
    """Column-wise argmax; ties go to the lowest token id."""
    p = np.asarray(probs, dtype=np.float64)
    if p.shape != (VOCAB_SIZE, SEQ_LEN):
        raise GrammarError(f"expected shape {(VOCAB_SIZE, SEQ_LEN)}, got {p.shape}")
    return tuple(int(t) for t in np.argmax(p, axis=0))


# -- dataset text format -----------------------------------------------------


def write_dataset(path: str | Path, seqs: Iterable[Sequence[int]]) -> None:
    lines = [detokenize(s) + "\n" for s in seqs]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(lines)


def read_dataset(path: str | Path) -> list[TokenSequence]:
    with open(path, encoding="utf-8") as fh:
        return [tokenize(line) for line in fh.read().splitlines() if line.strip()]

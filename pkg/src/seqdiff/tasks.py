"""Synthetic reasoning-task generators and JSONL corpus ingestion.

Every generated answer is exact arithmetic / boolean evaluation; the rationale
formats are deterministic so a trained model can be graded by exact match on
the parsed final answer.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
from dataclasses import dataclass, field

logger = logging.getLogger(__name__)

__all__ = [
    "Example",
    "gen_mult",
    "gen_bool",
    "load_jsonl",
    "write_jsonl",
    "split_by_question",
]


@dataclass(frozen=True)
class Example:
    question: str
    rationales: tuple[str, ...]
    answer: str

    def __post_init__(self):
        if not self.answer:
            raise ValueError("answer must be non-empty")
        object.__setattr__(self, "rationales", tuple(self.rationales))

    def target_text(self) -> str:
        """Rationales joined by spaces followed by the '#### <answer>' tail."""
        head = " ".join(self.rationales)
        tail = f"#### {self.answer}"
        return f"{head} {tail}" if head else tail

    def to_json(self) -> dict:
        return {"question": self.question, "rationales": list(self.rationales), "answer": self.answer}


def _mult_example(a: int, b: int) -> Example:
    """Long multiplication: one partial product per digit of b (LSB first), then running sums."""
    partials = []
    rationales = []
    for j, ch in enumerate(reversed(str(b))):
        m = int(ch) * 10**j
        p = a * m
        rationales.append(f"<<{a}*{m}={p}>>")
        partials.append(p)
    acc = partials[0]
    for p in partials[1:]:
        rationales.append(f"<<{acc}+{p}={acc + p}>>")
        acc += p
    return Example(question=f"{a} * {b}", rationales=tuple(rationales), answer=str(a * b))


def gen_mult(
    digits_a: int,
    digits_b: int,
    mode: str = "enumerate",
    n: int | None = None,
    seed: int | None = None,
) -> list[Example]:
    """Multiplication problems with digits_a-digit × digits_b-digit operands."""
    if digits_a < 1 or digits_b < 1:
        raise ValueError("digit counts must be >= 1")
    lo_a, hi_a = 10 ** (digits_a - 1), 10**digits_a
    lo_b, hi_b = 10 ** (digits_b - 1), 10**digits_b
    if mode == "enumerate":
        if digits_a + digits_b > 5:
            raise ValueError(
                f"enumerate mode limited to digits_a+digits_b <= 5, got {digits_a}+{digits_b}"
            )
        return [_mult_example(a, b) for a in range(lo_a, hi_a) for b in range(lo_b, hi_b)]
    if mode == "sample":
        if n is None or seed is None:
            raise ValueError("sample mode requires n and seed")
        rng = random.Random(seed)
        return [_mult_example(rng.randrange(lo_a, hi_a), rng.randrange(lo_b, hi_b)) for _ in range(n)]
    raise ValueError(f"unknown mode {mode!r}")


# Boolean expression trees: ("lit", bool) | ("not", node) | ("and"/"or", left, right)


def _bool_tree(depth: int, rng: random.Random):
    if depth <= 1:
        return ("lit", rng.random() < 0.5)
    op = rng.choice(["not", "and", "or"])
    if op == "not":
        return ("not", _bool_tree(depth - 1, rng))
    deep = _bool_tree(depth - 1, rng)
    other = _bool_tree(rng.randint(1, depth - 1), rng)
    return (op, deep, other) if rng.random() < 0.5 else (op, other, deep)


def _render(node, outer: bool = False) -> str:
    kind = node[0]
    if kind == "lit":
        return str(node[1])
    if kind == "not":
        body = f"not {_render(node[1])}"
    else:
        body = f"{_render(node[1])} {kind} {_render(node[2])}"
    return body if outer else f"({body})"


def _reduce_once(node):
    """Reduce the leftmost innermost reducible node; returns (new_node, step_text) or None."""
    kind = node[0]
    if kind == "lit":
        return None
    children = node[1:]
    if all(c[0] == "lit" for c in children):
        if kind == "not":
            val = not children[0][1]
        elif kind == "and":
            val = children[0][1] and children[1][1]
        else:
            val = children[0][1] or children[1][1]
        return ("lit", val), f"{_render(node)}={val}"
    for i, c in enumerate(children):
        sub = _reduce_once(c)
        if sub is not None:
            new_c, step = sub
            return (kind, *children[:i], new_c, *children[i + 1 :]), step
    raise AssertionError("non-literal node with no reducible child")


def _bool_example(tree) -> Example:
    rationales = []
    node = tree
    while node[0] != "lit":
        node, step = _reduce_once(node)
        rationales.append(step)
    return Example(question=_render(tree, outer=True), rationales=tuple(rationales), answer=str(node[1]))


def gen_bool(max_depth: int, n: int, seed: int) -> list[Example]:
    """Fully parenthesized boolean expressions with innermost-first reduction steps."""
    if max_depth < 1:
        raise ValueError("max_depth must be >= 1")
    rng = random.Random(seed)
    return [_bool_example(_bool_tree(rng.randint(1, max_depth), rng)) for _ in range(n)]


def load_jsonl(path, lenient: bool = False) -> list[Example]:
    """Read Examples from JSONL with schema {question, rationales, answer}.

    Malformed lines raise with the offending line number, or are logged and
    skipped when ``lenient`` is set.
    """
    out: list[Example] = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                if not isinstance(row, dict):
                    raise ValueError("not a JSON object")
                for key, typ in (("question", str), ("rationales", list), ("answer", str)):
                    if key not in row:
                        raise ValueError(f"missing field {key!r}")
                    if not isinstance(row[key], typ):
                        raise ValueError(f"field {key!r} has wrong type")
                if not all(isinstance(r, str) for r in row["rationales"]):
                    raise ValueError("rationales must be strings")
                out.append(
                    Example(question=row["question"], rationales=tuple(row["rationales"]), answer=row["answer"])
                )
            except (json.JSONDecodeError, ValueError) as e:
                if lenient:
                    logger.warning("%s line %d skipped: %s", path, lineno, e)
                    continue
                raise ValueError(f"{path} line {lineno}: {e}") from e
    return out


def write_jsonl(examples, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for ex in examples:
            f.write(json.dumps(ex.to_json()) + "\n")


def split_by_question(examples, test_frac: float = 0.1) -> tuple[list[Example], list[Example]]:
    """Stable hash-based split: a question always lands in the same bucket."""
    train, test = [], []
    cut = int(round(test_frac * 100))
    for ex in examples:
        bucket = int(hashlib.sha1(ex.question.encode("utf-8")).hexdigest(), 16) % 100
        (test if bucket < cut else train).append(ex)
    return train, test

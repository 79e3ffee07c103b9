"""Synthetic verifiable tasks: modular arithmetic chains.

A query is a left-to-right chain ``d0 op1 d1 ... opk dk =`` evaluated modulo
``M``.  Responses are token sequences; the answer is the digit that follows the
last ``ANS`` marker.  Prompt templates mirror the four rollout prompts used by
the trainer (plain, concise, concise+hint, hint).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

PAD, END, ANS, HINT_OPEN, HINT_SEP, HINT_CLOSE, CONCISE, EQ, THINK = range(9)
PLUS, MINUS, TIMES = 9, 10, 11
OPERATORS = (PLUS, MINUS, TIMES)
DIGIT0 = 12

_OP_SYMBOL = {PLUS: "+", MINUS: "-", TIMES: "*"}
_RESERVED_NAMES = {
    PAD: "<pad>",
    END: "<end>",
    ANS: "<ans>",
    HINT_OPEN: "<hint>",
    HINT_SEP: ",",
    HINT_CLOSE: "</hint>",
    CONCISE: "<concise>",
    EQ: "=",
    THINK: "<think>",
}


@dataclass(frozen=True)
class Vocab:
    """Token layout for modulus ``M``: reserved ids, operators, then digits."""

    modulus: int

    def __post_init__(self):
        if self.modulus < 2:
            raise ValueError(f"modulus must be >= 2, got {self.modulus}")

    @property
    def size(self) -> int:
        return DIGIT0 + self.modulus

    def digit(self, value: int) -> int:
        if not 0 <= value < self.modulus:
            raise ValueError(f"digit {value} outside [0, {self.modulus})")
        return DIGIT0 + value

    def is_digit(self, token: int) -> bool:
        return DIGIT0 <= token < DIGIT0 + self.modulus

    def decode_digit(self, token: int) -> int:
        return token - DIGIT0

    def token_str(self, token: int) -> str:
        if token in _RESERVED_NAMES:
            return _RESERVED_NAMES[token]
        if token in _OP_SYMBOL:
            return _OP_SYMBOL[token]
        if self.is_digit(token):
            return str(token - DIGIT0)
        raise ValueError(f"token {token} outside vocabulary of size {self.size}")

    def render(self, tokens: Sequence[int]) -> str:
        return " ".join(self.token_str(int(t)) for t in tokens)


@dataclass(frozen=True)
class Query:
    id: str
    prompt_tokens: tuple[int, ...]
    truth: int
    difficulty: int
    modulus: int


class HintVariant(str, enum.Enum):
    PLAIN = "Plain"
    CONCISE = "Concise"
    CONCISE_HINT = "ConciseHint"
    HINT = "Hint"


@dataclass(frozen=True)
class HintSpec:
    variant: HintVariant = HintVariant.PLAIN
    wrong_answers: tuple[int, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "variant", HintVariant(self.variant))
        answers = tuple(sorted(set(int(a) for a in self.wrong_answers)))
        object.__setattr__(self, "wrong_answers", answers)
        if self.variant in (HintVariant.PLAIN, HintVariant.CONCISE) and answers:
            raise ValueError(f"{self.variant.value} hints carry no answers")

    @property
    def concise(self) -> bool:
        return self.variant in (HintVariant.CONCISE, HintVariant.CONCISE_HINT)

    @property
    def has_answers(self) -> bool:
        return self.variant in (HintVariant.HINT, HintVariant.CONCISE_HINT)


PLAIN = HintSpec()


def _apply(op: int, a: int, b: int, modulus: int) -> int:
    if op == PLUS:
        return (a + b) % modulus
    if op == MINUS:
        return (a - b) % modulus
    if op == TIMES:
        return (a * b) % modulus
    raise ValueError(f"not an operator token: {op}")


def evaluate_prompt(prompt_tokens: Sequence[int], modulus: int) -> int:
    """Evaluate a plain chain prompt left to right, modulo ``modulus``."""
    vocab = Vocab(modulus)
    toks = list(prompt_tokens)
    if len(toks) < 4 or toks[-1] != EQ or len(toks) % 2 != 0:
        raise ValueError("malformed chain prompt")
    body = toks[:-1]
    if not all(vocab.is_digit(t) for t in body[0::2]):
        raise ValueError("expected digit tokens at even offsets")
    acc = vocab.decode_digit(body[0])
    for op, tok in zip(body[1::2], body[2::2]):
        acc = _apply(op, acc, vocab.decode_digit(tok), modulus)
    return acc


def generate_task(seed: int, difficulty: int, modulus: int) -> Query:
    """Deterministic chain of ``difficulty`` operations on digits mod ``modulus``."""
    if modulus < 2:
        raise ValueError(f"modulus must be >= 2, got {modulus}")
    if difficulty < 1:
        raise ValueError(f"difficulty must be >= 1, got {difficulty}")
    vocab = Vocab(modulus)
    rng = np.random.default_rng([seed, difficulty, modulus])
    digits = rng.integers(0, modulus, size=difficulty + 1)
    ops = rng.integers(0, len(OPERATORS), size=difficulty)
    tokens = [vocab.digit(int(digits[0]))]
    for op, d in zip(ops, digits[1:]):
        tokens += [OPERATORS[int(op)], vocab.digit(int(d))]
    tokens.append(EQ)
    truth = evaluate_prompt(tokens, modulus)
    return Query(
        id=f"m{modulus}-d{difficulty}-s{seed}",
        prompt_tokens=tuple(tokens),
        truth=truth,
        difficulty=difficulty,
        modulus=modulus,
    )


def render_prompt(q: Query, h: HintSpec = PLAIN) -> tuple[int, ...]:
    vocab = Vocab(q.modulus)
    tokens = list(q.prompt_tokens)
    if h.concise:
        tokens = [CONCISE] + tokens
    if h.has_answers:
        hint = [HINT_OPEN]
        for i, a in enumerate(h.wrong_answers):
            if i:
                hint.append(HINT_SEP)
            hint.append(vocab.digit(a))
        hint.append(HINT_CLOSE)
        tokens += hint
    return tuple(tokens)


def prompt_overhead(h: HintSpec) -> int:
    """Number of tokens ``render_prompt`` adds on top of the plain prompt."""
    n = int(h.concise)
    if h.has_answers:
        k = len(h.wrong_answers)
        n += 2 + k + max(k - 1, 0)
    return n


def parse_prompt(tokens: Sequence[int], modulus: int) -> tuple[tuple[int, ...], HintSpec]:
    """Inverse of ``render_prompt``: recover the plain prompt and its hint."""
    vocab = Vocab(modulus)
    toks = list(tokens)
    concise = bool(toks) and toks[0] == CONCISE
    if concise:
        toks = toks[1:]
    answers: list[int] = []
    hinted = bool(toks) and toks[-1] == HINT_CLOSE
    if hinted:
        try:
            start = len(toks) - 1 - toks[::-1].index(HINT_OPEN)
        except ValueError:
            raise ValueError("hint close without hint open") from None
        inner = toks[start + 1:-1]
        for i, t in enumerate(inner):
            if i % 2 == 1:
                if t != HINT_SEP:
                    raise ValueError("malformed hint separator")
            elif not vocab.is_digit(t):
                raise ValueError("malformed hint answer")
            else:
                answers.append(vocab.decode_digit(t))
        toks = toks[:start]
    if hinted and concise:
        variant = HintVariant.CONCISE_HINT
    elif hinted:
        variant = HintVariant.HINT
    elif concise:
        variant = HintVariant.CONCISE
    else:
        variant = HintVariant.PLAIN
    return tuple(toks), HintSpec(variant, tuple(answers))


def extract_answer(response_tokens: Sequence[int], truncated: bool, modulus: int) -> Optional[int]:
    """Digit right after the last ``ANS`` before ``END``; ``None`` if truncated or malformed."""
    if truncated:
        return None
    toks = list(response_tokens)
    if END in toks:
        toks = toks[: toks.index(END)]
    try:
        last = len(toks) - 1 - toks[::-1].index(ANS)
    except ValueError:
        return None
    if last + 1 >= len(toks):
        return None
    tok = toks[last + 1]
    if DIGIT0 <= tok < DIGIT0 + modulus:
        return tok - DIGIT0
    return None


def verify(q: Query, answer: Optional[int]) -> int:
    return int(answer is not None and answer == q.truth)


def extract_answers_batch(tokens: np.ndarray, lengths: np.ndarray, max_len: int,
                          modulus: int) -> np.ndarray:
    """Vectorized ``extract_answer`` over padded sampler output; -1 marks no answer."""
    tokens = np.asarray(tokens)
    lengths = np.asarray(lengths)
    N = tokens.shape[0]
    rows = np.arange(N)
    last_tok = tokens[rows, np.maximum(lengths - 1, 0)]
    ended = (lengths > 0) & (last_tok == END)
    truncated = (lengths == max_len) & ~ended
    body_end = np.where(ended, lengths - 1, lengths)
    pos = np.arange(tokens.shape[1])
    is_ans = (tokens == ANS) & (pos[None, :] < body_end[:, None])
    last = np.where(is_ans.any(axis=1), tokens.shape[1] - 1 - np.argmax(is_ans[:, ::-1], axis=1), -1)
    nxt = last + 1
    ok = (last >= 0) & (nxt < body_end) & ~truncated
    tok = tokens[rows, np.minimum(nxt, tokens.shape[1] - 1)]
    ok &= (tok >= DIGIT0) & (tok < DIGIT0 + modulus)
    return np.where(ok, tok - DIGIT0, -1)

"""From decoded sequences to per-label answer distributions."""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ShapeMismatch, Unparseable
from .uq_core import AnswerDistribution, ProbabilityMatrix

log = logging.getLogger(__name__)

# characters the answer token may carry around a label id, e.g. "{3" or "3:"
_TRIM = " \t\r\n{}[]()<>.,:;'\"`*#"


@dataclass(frozen=True)
class TokenScore:
    token: str
    logprob: float
    top_alternatives: tuple[tuple[str, float], ...] = ()

    def __post_init__(self):
        if not self.logprob <= 0:
            raise ValueError(f"logprob must be <= 0, got {self.logprob}")
        alts = tuple((str(t), float(lp)) for t, lp in self.top_alternatives)
        if any(a[1] < b[1] for a, b in zip(alts, alts[1:])):
            raise ValueError("top_alternatives must be sorted by descending logprob")
        object.__setattr__(self, "top_alternatives", alts)

    @property
    def probability(self) -> float:
        return math.exp(self.logprob)


@dataclass(frozen=True)
class GeneratedSequence:
    text: str
    tokens: tuple[TokenScore, ...]
    sequence_logprob: float | None = None

    def __post_init__(self):
        tokens = tuple(self.tokens)
        object.__setattr__(self, "tokens", tokens)
        total = math.fsum(t.logprob for t in tokens)
        if self.sequence_logprob is None:
            object.__setattr__(self, "sequence_logprob", total)
        elif abs(self.sequence_logprob - total) > 1e-6:
            raise ValueError(
                f"sequence_logprob {self.sequence_logprob} != sum of token logprobs {total}"
            )

    def to_dict(self) -> dict:
        return {
            "text": self.text,
            "sequence_logprob": self.sequence_logprob,
            "tokens": [
                {"token": t.token, "logprob": t.logprob,
                 "top_alternatives": [list(a) for a in t.top_alternatives]}
                for t in self.tokens
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratedSequence":
        tokens = tuple(
            TokenScore(t["token"], float(t["logprob"]),
                       tuple((a[0], float(a[1])) for a in t.get("top_alternatives", ())))
            for t in d["tokens"]
        )
        return cls(d["text"], tokens, float(d["sequence_logprob"]))


@dataclass(frozen=True)
class LabelSpace:
    """Ordered class labels with contiguous ids starting at 0."""

    names: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(str(n) for n in self.names))
        if not self.names:
            raise ValueError("label space is empty")

    @classmethod
    def from_pairs(cls, pairs) -> "LabelSpace":
        pairs = sorted((int(i), str(n)) for i, n in pairs)
        ids = [i for i, _ in pairs]
        if ids != list(range(len(ids))):
            raise ValueError(f"label ids must be distinct and contiguous from 0, got {ids}")
        return cls(tuple(n for _, n in pairs))

    @classmethod
    def numeric(cls, k: int) -> "LabelSpace":
        return cls(tuple(str(i) for i in range(k)))

    @property
    def k(self) -> int:
        return len(self.names)

    @property
    def labels(self) -> list[tuple[int, str]]:
        return list(enumerate(self.names))

    def name(self, label_id: int) -> str:
        return self.names[label_id]


@dataclass(frozen=True)
class ExtractedAnswer:
    label_id: int
    probability: float
    source_token_index: int


def _digit_token(text: str) -> str | None:
    s = text.strip(_TRIM)
    return s if s.isdigit() else None


def extract_label(seq: GeneratedSequence, space: LabelSpace) -> ExtractedAnswer:
    """Locate the token that answers the question and read off its label.

    Label ids are searched first: the earliest token whose trimmed text is a
    digit string naming a valid id wins. When a number is split over several
    consecutive digit tokens the longest run naming a valid id is used, with
    the probability of its first token. If no id is found, the earliest
    case-insensitive occurrence of a label name in the token text is used.

    Raises:
        Unparseable: if neither an id nor a name is found.
    """
    tokens = seq.tokens
    for i, tok in enumerate(tokens):
        digits = _digit_token(tok.token)
        if digits is None:
            continue
        run = [digits]
        j = i + 1
        # a following digit token continues the number only if nothing separates them
        while (j < len(tokens) and tokens[j].token == tokens[j].token.lstrip()
               and tokens[j - 1].token == tokens[j - 1].token.rstrip()
               and tokens[j].token.strip().isdigit()):
            run.append(tokens[j].token.strip())
            j += 1
        for end in range(len(run), 0, -1):
            label = int("".join(run[:end]))
            if label < space.k:
                return ExtractedAnswer(label, tok.probability, i)

    joined = "".join(t.token for t in tokens).lower()
    best = None
    for label_id, name in space.labels:
        m = re.search(r"(?<![a-z])" + re.escape(name.lower()) + r"(?![a-z])", joined)
        if m and (best is None or (m.start(), -len(name)) < (best[0], -best[2])):
            best = (m.start(), label_id, len(name))
    if best is not None:
        offset, pos = 0, best[0]
        for i, tok in enumerate(tokens):
            if offset + len(tok.token) > pos:
                return ExtractedAnswer(best[1], tok.probability, i)
            offset += len(tok.token)
    raise Unparseable(f"no label id or name in {seq.text!r}")


def aggregate(seqs: Sequence[GeneratedSequence], space: LabelSpace) -> AnswerDistribution:
    """Sum answer-token probabilities per label over the decoded sequences.

    Unparseable sequences are skipped and counted. When none parses, the
    result is a uniform mass of 1/K per label with ``fallback`` set.
    """
    if len(seqs) == 0:
        raise ValueError("aggregate needs at least one sequence")
    per_label: list[list[float]] = [[] for _ in range(space.k)]
    skipped = 0
    for seq in seqs:
        try:
            ans = extract_label(seq, space)
        except Unparseable:
            skipped += 1
            continue
        per_label[ans.label_id].append(ans.probability)
    # fsum keeps the result independent of sequence order
    mass = np.array([math.fsum(v) for v in per_label])
    if skipped == len(seqs) or not mass.sum() > 0:
        log.warning("no usable answer in %d sequences; using uniform answer distribution", len(seqs))
        return AnswerDistribution(np.full(space.k, 1.0 / space.k), n_skipped=skipped, fallback=True)
    if skipped:
        log.info("skipped %d of %d unparseable sequences", skipped, len(seqs))
    return AnswerDistribution(mass, n_skipped=skipped)


def build_matrix(dists: Sequence[AnswerDistribution]) -> ProbabilityMatrix:
    """Stack per-demo-set distributions as the columns of a K x L matrix."""
    if len(dists) == 0:
        raise ShapeMismatch("need at least one answer distribution")
    return ProbabilityMatrix.from_columns(dists)

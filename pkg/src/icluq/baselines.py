"""Comparison uncertainty scores: likelihood, token entropy and semantic entropy.

All scores follow the same sign convention: higher means more uncertain.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Hashable, Literal, Sequence

import numpy as np

from .answer_extraction import GeneratedSequence, LabelSpace, extract_label
from .errors import EmptySequence, MissingAlternatives, Unparseable
from .uq_core import entropy


@dataclass(frozen=True)
class UncertaintyScore:
    value: float
    method: Literal["likelihood", "token_entropy", "semantic"]
    n_sequences_used: int

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError(f"{self.method} score is not finite: {self.value}")


def likelihood_uncertainty(seqs: Sequence[GeneratedSequence]) -> UncertaintyScore:
    """Mean over sequences of the negated, length-normalized log-likelihood."""
    per_seq = []
    for s in seqs:
        if not s.tokens:
            raise EmptySequence(f"sequence {s.text!r} has no tokens")
        per_seq.append(-math.fsum(t.logprob for t in s.tokens) / len(s.tokens))
    if not per_seq:
        raise EmptySequence("no sequences")
    return UncertaintyScore(math.fsum(per_seq) / len(per_seq), "likelihood", len(per_seq))


def _token_entropy(alternatives) -> float:
    lps = np.array([lp for _, lp in alternatives])
    p = np.exp(lps - lps.max())
    return entropy(p / p.sum())


def token_entropy_uncertainty(seqs: Sequence[GeneratedSequence]) -> UncertaintyScore:
    """Mean over sequences of the mean per-token entropy.

    Each token's distribution is its top-k alternatives, renormalized.
    """
    per_seq = []
    for s in seqs:
        if not s.tokens:
            raise EmptySequence(f"sequence {s.text!r} has no tokens")
        hs = []
        for t in s.tokens:
            if not t.top_alternatives:
                raise MissingAlternatives(f"token {t.token!r} carries no top alternatives")
            hs.append(_token_entropy(t.top_alternatives))
        per_seq.append(math.fsum(hs) / len(hs))
    if not per_seq:
        raise EmptySequence("no sequences")
    return UncertaintyScore(math.fsum(per_seq) / len(per_seq), "token_entropy", len(per_seq))


_OTHER = object()


def label_equivalence(space: LabelSpace) -> Callable[[GeneratedSequence], Hashable]:
    """Cluster key: the extracted label, with every unparseable answer in one cluster."""

    def key(seq: GeneratedSequence) -> Hashable:
        try:
            return extract_label(seq, space).label_id
        except Unparseable:
            return _OTHER

    return key


def semantic_uncertainty(seqs: Sequence[GeneratedSequence], space: LabelSpace,
                         cluster_key: Callable[[GeneratedSequence], Hashable] | None = None) -> UncertaintyScore:
    """Entropy over meaning clusters weighted by sequence probability.

    Sequences fall in the same cluster when ``cluster_key`` maps them to the
    same value; by default that is the extracted label. Cluster mass is the
    sum of ``exp(sequence_logprob)`` over members, renormalized over the
    returned hypotheses.
    """
    if not seqs:
        raise EmptySequence("no sequences")
    key = cluster_key or label_equivalence(space)
    clusters: dict[Hashable, list[float]] = {}
    for s in seqs:
        clusters.setdefault(key(s), []).append(s.sequence_logprob)
    # log-sum-exp per cluster keeps tiny sequence probabilities from underflowing
    logm = np.array([np.logaddexp.reduce(sorted(v)) for v in clusters.values()])
    mass = np.exp(logm - logm.max())
    return UncertaintyScore(entropy(mass / mass.sum()), "semantic", len(seqs))

import math
import random

import pytest

from icluq.answer_extraction import GeneratedSequence, LabelSpace, TokenScore
from icluq.baselines import likelihood_uncertainty, semantic_uncertainty, token_entropy_uncertainty
from icluq.errors import EmptySequence, MissingAlternatives

# mpmath, 30 digits: H(0.7, 0.3) and H(0.8, 0.2)
H_73 = 0.610864302054893463
H_82 = 0.500402423538187880

SPACE = LabelSpace.numeric(3)


def seq_from_logprobs(lps, alts=None):
    toks = tuple(TokenScore(f"t{i}", lp, alts[i] if alts else ()) for i, lp in enumerate(lps))
    return GeneratedSequence("".join(t.token for t in toks), toks)


def answer(label, p):
    lp = math.log(p)
    return GeneratedSequence(str(label), (TokenScore(str(label), lp),))


def two_point_alts(p):
    return (("a", math.log(p)), ("b", math.log(1 - p))) if p >= 0.5 else (("b", math.log(1 - p)), ("a", math.log(p)))


class TestLikelihood:
    def test_single(self):
        assert likelihood_uncertainty([seq_from_logprobs([-0.1, -0.3])]).value == pytest.approx(0.2, abs=1e-15)

    def test_certain(self):
        assert likelihood_uncertainty([seq_from_logprobs([0.0, 0.0])]).value == 0.0

    def test_mean_over_sequences(self):
        score = likelihood_uncertainty([seq_from_logprobs([-0.2]), seq_from_logprobs([-0.4, -0.4])])
        assert score.value == pytest.approx(0.3, abs=1e-15)
        assert score.n_sequences_used == 2 and score.method == "likelihood"

    def test_empty(self):
        with pytest.raises(EmptySequence):
            likelihood_uncertainty([GeneratedSequence("", ())])


class TestTokenEntropy:
    def test_point_mass(self):
        s = seq_from_logprobs([0.0, -0.1], alts=[(("a", 0.0),), (("b", -0.1),)])
        assert token_entropy_uncertainty([s]).value == 0.0

    def test_renormalized_two_alternatives(self):
        # 0.35 / 0.15 renormalizes to (0.7, 0.3)
        s = seq_from_logprobs([math.log(0.35)], alts=[(("a", math.log(0.35)), ("b", math.log(0.15)))])
        assert token_entropy_uncertainty([s]).value == pytest.approx(H_73, abs=1e-12)

    def test_mean_of_token_entropies(self):
        s = seq_from_logprobs([-0.1, -0.2], alts=[two_point_alts(0.7), two_point_alts(0.8)])
        assert token_entropy_uncertainty([s]).value == pytest.approx((H_73 + H_82) / 2, abs=1e-12)

    def test_missing_alternatives(self):
        with pytest.raises(MissingAlternatives):
            token_entropy_uncertainty([seq_from_logprobs([-0.1])])


class TestSemantic:
    def test_one_cluster(self):
        assert semantic_uncertainty([answer(1, 0.5), answer(1, 0.2)], SPACE).value == 0.0

    def test_two_clusters(self):
        seqs = [answer(0, 0.5), answer(0, 0.3), answer(1, 0.2)]
        assert semantic_uncertainty(seqs, SPACE).value == pytest.approx(H_82, abs=1e-12)

    def test_uniform_three(self):
        seqs = [answer(0, 0.2), answer(1, 0.2), answer(2, 0.2)]
        assert semantic_uncertainty(seqs, SPACE).value == pytest.approx(math.log(3), abs=1e-12)

    def test_unparseable_share_a_cluster(self):
        junk = [GeneratedSequence("hm", (TokenScore("hm", math.log(0.25)),)),
                GeneratedSequence("eh", (TokenScore("eh", math.log(0.25)),))]
        score = semantic_uncertainty([answer(0, 0.5)] + junk, SPACE)
        assert score.value == pytest.approx(math.log(2), abs=1e-12)

    def test_custom_equivalence(self):
        seqs = [answer(0, 0.5), answer(1, 0.5)]
        assert semantic_uncertainty(seqs, SPACE, cluster_key=lambda s: "same").value == 0.0


def test_invariants():
    rng = random.Random(5)
    for _ in range(50):
        seqs = [seq_from_logprobs([-rng.uniform(0, 3) for _ in range(rng.randint(1, 4))],
                                  alts=None) for _ in range(rng.randint(1, 6))]
        answers = [answer(rng.randrange(3), rng.uniform(0.01, 1)) for _ in range(rng.randint(1, 8))]
        lik = likelihood_uncertainty(seqs).value
        sem = semantic_uncertainty(answers, SPACE).value
        assert lik >= 0
        assert sem <= math.log(len({s.text for s in answers}) + 1) + 1e-12
        shuffled = answers[:]
        rng.shuffle(shuffled)
        assert semantic_uncertainty(shuffled, SPACE).value == pytest.approx(sem, abs=1e-12)
        rev = seqs[::-1]
        assert likelihood_uncertainty(rev).value == lik

import numpy as np
import pytest
from scipy.special import logsumexp

from icluq.answer_extraction import LabelSpace, extract_label
from icluq.errors import ValidationError
from icluq.llm_gateway import GenerationCall, GenerationRequest
from icluq.simulator import (
    SimInstance, SimulatorSource, SimWorld, cell_log_probs, concept_log_probs, config_offsets,
    ground_truth_decomposition, knob_sweep, make_dataset, pipeline_decomposition, sim_answer_distribution,
    sim_generate, with_knobs,
)

WORLD = SimWorld()
INST = SimInstance(0, 2)


def reference_cell(seed, instance_id, true_label, demo_id, config_id, k=6, alpha=2.0, tau=0.5, acc=0.6):
    """Straight-line rewrite of one cell draw, used as a cross-check."""
    base = np.full(k, (1 - acc) / (k - 1))
    base[true_label] = acc
    a = alpha * base
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 1, instance_id, demo_id])))
    g = np.log(rng.gamma(a + 1.0)) + np.log(rng.random(k)) / a
    logc = g - logsumexp(g)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 2, instance_id, config_id])))
    z = logc + tau * rng.standard_normal(k)
    return np.exp(z - logsumexp(z))


def test_golden_cell_matches_reference():
    got = sim_answer_distribution(WORLD, INST, 0, 0)
    np.testing.assert_allclose(got, reference_cell(7, 0, 2, 0, 0), rtol=0, atol=1e-15)
    assert got.sum() == pytest.approx(1.0, abs=1e-12)


def test_cells_independent_of_batching():
    full = cell_log_probs(WORLD, INST, [3, 1, 4], [1, 5, 9, 2])
    for j, d in enumerate([3, 1, 4]):
        for m, c in enumerate([1, 5, 9, 2]):
            np.testing.assert_array_equal(full[j, m], cell_log_probs(WORLD, INST, [d], [c])[0, 0])


def test_config_noise_is_shared_across_demo_sets():
    a = config_offsets(WORLD, INST, [0, 1])
    b = config_offsets(WORLD, SimInstance(0, 5), [0, 1])
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, config_offsets(WORLD, SimInstance(1, 2), [0, 1]))


def test_small_concentration_stays_finite():
    w = with_knobs(WORLD, concept_concentration=1e-3)
    lp = concept_log_probs(w, INST, range(50))
    assert np.all(np.isfinite(lp) | (lp == -np.inf))
    np.testing.assert_allclose(np.exp(logsumexp(lp, axis=1)), 1.0, atol=1e-12)


def test_zero_noise_gives_one_hot_columns():
    rep = pipeline_decomposition(with_knobs(WORLD, config_noise=0.0), INST, 6, 8)
    assert rep.epistemic == 0.0


def test_huge_concentration_gives_identical_columns():
    rep = pipeline_decomposition(with_knobs(WORLD, concept_concentration=1e9, config_noise=0.0), INST, 6, 8)
    assert rep.aleatoric == pytest.approx(0.0, abs=1e-9) and rep.epistemic == 0.0


def test_restricted_labels_renormalize():
    lp = cell_log_probs(WORLD, INST, [0], [0], labels=[0, 3, 5])[0, 0]
    full = cell_log_probs(WORLD, INST, [0], [0])[0, 0]
    np.testing.assert_allclose(np.exp(lp), np.exp(full[[0, 3, 5]]) / np.exp(full[[0, 3, 5]]).sum())


def test_generated_sequence_parses_to_argmax():
    seq = sim_generate(WORLD, INST, 2, 3)
    probs = sim_answer_distribution(WORLD, INST, 2, 3)
    ans = extract_label(seq, LabelSpace.numeric(6))
    assert ans.label_id == int(np.argmax(probs))
    assert ans.probability == pytest.approx(probs.max(), rel=1e-12)


def test_source_uses_ood_world_and_label_map():
    ood = with_knobs(WORLD, concept_concentration=0.125)
    src = SimulatorSource(WORLD, ood)
    req = GenerationRequest("p", num_sequences=5)
    ind = src.generate(GenerationCall(req, "x", 0, 0, 2))
    out = src.generate(GenerationCall(req, "x", 0, 0, 2, condition="ood"))
    assert [s.sequence_logprob for s in ind] != [s.sequence_logprob for s in out]
    masked = src.generate(GenerationCall(req, "x", 0, 0, 2, label_map=(0, 1, 3)))
    assert all(s.text in {"0", "1", "2"} for s in masked)
    with pytest.raises(ValidationError):
        src.generate(GenerationCall(req, "x", 0, 0, None))


def test_world_validation():
    for kw in ({"k": 1}, {"concept_concentration": 0}, {"config_noise": -1}, {"base_accuracy": 0.1}):
        with pytest.raises(ValidationError):
            SimWorld(**kw)


def test_make_dataset():
    train = make_dataset(WORLD, 12, "train")
    assert train.class_counts() == (2,) * 6
    test = make_dataset(WORLD, 30, "test")
    assert len({i.id for i in test.instances}) == 30


def test_oracle_needs_enough_samples():
    with pytest.raises(ValidationError):
        ground_truth_decomposition(WORLD, INST, 4, 4, 100)


def test_pipeline_agrees_with_oracle_default_world():
    cell, = knob_sweep([2.0], [0.5], n_instances=3, l_sets=16, m_configs=16, mc_samples=16 * 16 * 20)
    assert cell.agrees, cell


def test_no_noise_limit_is_base_distribution():
    w = with_knobs(WORLD, concept_concentration=1e9, config_noise=0.0)
    for d, c in [(0, 0), (3, 7), (11, 2)]:
        got = sim_answer_distribution(w, INST, d, c)
        assert np.max(np.abs(got - w.base_distribution(INST.true_label))) < 1e-3


def test_repeat_call_identical():
    np.testing.assert_array_equal(sim_answer_distribution(WORLD, INST, 5, 9), sim_answer_distribution(WORLD, INST, 5, 9))


def test_sequence_shape():
    from icluq.simulator import sequence_from_log_probs

    seq = sequence_from_log_probs(np.log([0.7, 0.2, 0.1]))
    assert seq.text == "0" and seq.tokens[0].logprob == pytest.approx(-0.35667494393873245, abs=1e-12)
    assert len(seq.tokens[0].top_alternatives) == 3
    with np.errstate(divide="ignore"):
        det = sequence_from_log_probs(np.log([1.0, 0.0]))
    assert det.text == "0" and det.tokens[0].logprob == 0.0


def _oracle(alpha, tau, mc=20_000):
    w = with_knobs(WORLD, concept_concentration=alpha, config_noise=tau)
    return ground_truth_decomposition(w, INST, 4, 4, mc).report


def test_oracle_no_concept_spread_has_no_au():
    assert _oracle(1e9, 0.0).aleatoric < 1e-3


def test_oracle_eu_grows_with_config_noise():
    assert _oracle(1e9, 2.0).epistemic > _oracle(1e9, 0.5).epistemic


def test_oracle_au_grows_with_concept_spread():
    au = [_oracle(a, 0.5).aleatoric for a in (1e9, 8.0, 2.0, 0.5)]
    assert all(x < y for x, y in zip(au, au[1:])), au

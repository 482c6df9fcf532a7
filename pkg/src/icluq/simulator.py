"""Synthetic in-context classifier with tunable demonstration and configuration noise.

A :class:`SimWorld` produces, for every (instance, demo set, configuration)
cell, a label distribution built in three steps:

1. a base distribution puts ``base_accuracy`` on the true label and spreads
   the rest evenly;
2. the demo set picks a *concept* ``c ~ Dirichlet(alpha * base)``, which
   replaces the base log-probabilities with ``log c`` (small ``alpha`` means
   demo sets disagree a lot);
3. the configuration adds i.i.d. Gaussian logit noise of scale ``tau``,
   shared by all demo sets of the same instance.

All randomness comes from Philox streams keyed by
``(seed, stream, instance_id, demo_set_id | config_id)``, so any cell can be
computed on its own, in any order.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy import stats
from scipy.special import logsumexp

from .answer_extraction import GeneratedSequence, LabelSpace, TokenScore
from .errors import ValidationError
from .llm_gateway import GenerationCall, sort_sequences
from .prompting import Dataset, Instance
from .uq_core import UncertaintyReport

_CONCEPT, _CONFIG, _LABEL = 1, 2, 3
ORACLE_ID_OFFSET = 1 << 30
OOD_DEMO_OFFSET = 1 << 20


@dataclass(frozen=True)
class SimWorld:
    k: int = 6
    concept_concentration: float = 2.0
    config_noise: float = 0.5
    base_accuracy: float = 0.6
    seed: int = 7

    def __post_init__(self):
        if self.k < 2:
            raise ValidationError("k must be >= 2")
        if not self.concept_concentration > 0:
            raise ValidationError("concept_concentration must be > 0")
        if not self.config_noise >= 0:
            raise ValidationError("config_noise must be >= 0")
        if not 1 / self.k < self.base_accuracy < 1:
            raise ValidationError(f"base_accuracy must lie in (1/k, 1), got {self.base_accuracy}")

    def base_distribution(self, true_label: int) -> np.ndarray:
        p = np.full(self.k, (1 - self.base_accuracy) / (self.k - 1))
        p[true_label] = self.base_accuracy
        return p


@dataclass(frozen=True)
class SimInstance:
    instance_id: int
    true_label: int


def _stream(world: SimWorld, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([world.seed, *key])))


def _log_dirichlet(rng: np.random.Generator, alpha: np.ndarray) -> np.ndarray:
    # log Gamma(a) = log Gamma(a + 1) + log(U) / a keeps small shapes finite
    g = np.log(rng.gamma(alpha + 1.0)) + np.log(rng.random(alpha.size)) / alpha
    return g - logsumexp(g)


def concept_log_probs(world: SimWorld, instance: SimInstance, demo_set_ids: Sequence[int]) -> np.ndarray:
    """Concept log-probabilities, one row per demo set."""
    alpha = world.concept_concentration * world.base_distribution(instance.true_label)
    return np.stack([
        _log_dirichlet(_stream(world, _CONCEPT, instance.instance_id, int(d)), alpha) for d in demo_set_ids
    ])


def config_offsets(world: SimWorld, instance: SimInstance, config_ids: Sequence[int]) -> np.ndarray:
    """Gaussian logit noise, one row per configuration."""
    if world.config_noise == 0:
        return np.zeros((len(config_ids), world.k))
    return np.stack([
        world.config_noise * _stream(world, _CONFIG, instance.instance_id, int(c)).standard_normal(world.k)
        for c in config_ids
    ])


def cell_log_probs(world: SimWorld, instance: SimInstance, demo_set_ids: Sequence[int],
                   config_ids: Sequence[int], labels: Sequence[int] | None = None) -> np.ndarray:
    """Log-probabilities for every (demo set, config) cell, shape L x M x K'.

    ``labels`` restricts the answer to the advertised subset of labels (in
    that order); the mass of the others, the true label included, is
    redistributed by renormalization.
    """
    logits = concept_log_probs(world, instance, demo_set_ids)[:, None, :] + \
        config_offsets(world, instance, config_ids)[None, :, :]
    if labels is not None:
        logits = logits[..., list(labels)]
    return logits - logsumexp(logits, axis=-1, keepdims=True)


def sim_answer_distribution(world: SimWorld, instance: SimInstance, demo_set_id: int, config_id: int,
                            labels: Sequence[int] | None = None) -> np.ndarray:
    return np.exp(cell_log_probs(world, instance, [demo_set_id], [config_id], labels)[0, 0])


def sequence_from_log_probs(logp: np.ndarray) -> GeneratedSequence:
    """One-token sequence answering with the argmax label id."""
    order = np.argsort(-logp, kind="stable")
    alts = tuple((str(int(i)), float(logp[i])) for i in order)
    top = alts[0]
    return GeneratedSequence(top[0], (TokenScore(top[0], top[1], alts),), top[1])


def sim_generate(world: SimWorld, instance: SimInstance, demo_set_id: int, config_id: int,
                 labels: Sequence[int] | None = None) -> GeneratedSequence:
    return sequence_from_log_probs(cell_log_probs(world, instance, [demo_set_id], [config_id], labels)[0, 0])


def sim_label(world: SimWorld, instance_id: int) -> int:
    return int(_stream(world, _LABEL, instance_id).integers(world.k))


def make_dataset(world: SimWorld, n: int, split: str = "test", name: str | None = None,
                 label_space: LabelSpace | None = None, first_id: int = 0) -> Dataset:
    """Synthetic dataset with labels drawn from the world's label stream.

    A train split is balanced instead (``n // k`` instances per class) so that
    class-stratified demo sampling always works.
    """
    space = label_space or LabelSpace.numeric(world.k)
    if split == "train":
        labels = [i % world.k for i in range(n)]
    else:
        labels = [sim_label(world, first_id + i) for i in range(n)]
    insts = tuple(Instance(f"synthetic {split} instance {first_id + i}", lab, f"sim-{split}-{first_id + i}")
                  for i, lab in enumerate(labels))
    return Dataset(name or f"sim_{split}", insts, space, split)


class SimulatorSource:
    """Generation source backed by a :class:`SimWorld`.

    Calls tagged ``condition="ood"`` use ``ood_world`` and fresh demo-set ids.
    Configurations ``0..M-1`` supply the M sequences of a call.
    """

    def __init__(self, world: SimWorld, ood_world: SimWorld | None = None):
        self.world = world
        self.ood_world = ood_world or world

    @property
    def identity(self) -> str:
        w = self.world
        return (f"simulator:k={w.k},alpha={w.concept_concentration!r},tau={w.config_noise!r},"
                f"acc={w.base_accuracy!r},seed={w.seed}")

    def generate(self, call: GenerationCall) -> list[GeneratedSequence]:
        if call.true_label is None:
            raise ValidationError("simulator calls need the instance's true label")
        world, demo_id = self.world, call.demo_set_id
        if call.condition == "ood":
            world, demo_id = self.ood_world, demo_id + OOD_DEMO_OFFSET
        inst = SimInstance(call.instance_index, call.true_label)
        logp = cell_log_probs(world, inst, [demo_id], range(call.request.num_sequences), call.label_map)[0]
        return sort_sequences(sequence_from_log_probs(row) for row in logp)


@dataclass(frozen=True)
class GroundTruth:
    """Oracle decomposition with its uncertainty.

    ``se_*`` is the standard error of the oracle mean. ``spread_*`` is the
    standard deviation of a single L x M estimate, i.e. how far one pipeline
    run is expected to land from the mean.
    """

    report: UncertaintyReport
    se_total: float
    se_epistemic: float
    se_aleatoric: float
    spread_total: float
    spread_epistemic: float
    spread_aleatoric: float
    n_replicates: int

    def tolerance(self, component: str, n_sigma: float = 3.0) -> float:
        se = getattr(self, f"se_{component}")
        spread = getattr(self, f"spread_{component}")
        return n_sigma * float(np.hypot(se, spread))

    def agrees(self, other: UncertaintyReport, n_sigma: float = 3.0) -> bool:
        return all(
            abs(getattr(other, c) - getattr(self.report, c)) <= self.tolerance(c, n_sigma)
            for c in ("total", "epistemic", "aleatoric")
        )


def ground_truth_decomposition(world: SimWorld, instance: SimInstance, l_sets: int, m_configs: int,
                               mc_samples: int) -> GroundTruth:
    """Monte-Carlo reference for the L x M estimator on fresh draws.

    Each replicate draws ``l_sets`` new demo sets and ``m_configs`` new
    configurations (ids disjoint from the ones pipelines use), forms the
    argmax-weighted answer distribution of every demo set directly from the
    cell probabilities and evaluates the entropies with scipy. There are
    ``mc_samples // (l_sets * m_configs)`` replicates.
    """
    cells = l_sets * m_configs
    if mc_samples < 10 * cells:
        raise ValidationError(f"mc_samples must be >= 10 * l_sets * m_configs = {10 * cells}")
    n_rep = mc_samples // cells
    out = np.empty((n_rep, 3))
    for r in range(n_rep):
        demo_ids = ORACLE_ID_OFFSET + r * l_sets + np.arange(l_sets)
        cfg_ids = ORACLE_ID_OFFSET + r * m_configs + np.arange(m_configs)
        p = np.exp(cell_log_probs(world, instance, demo_ids, cfg_ids))
        winner = p.argmax(axis=-1)
        mass = (p.max(axis=-1)[..., None] * (winner[..., None] == np.arange(world.k))).sum(axis=1)
        cols = mass / mass.sum(axis=1, keepdims=True)
        eu = float(np.mean(stats.entropy(cols, axis=1)))
        tot = float(stats.entropy(cols.mean(axis=0)))
        out[r] = (tot, eu, tot - eu)
    mean = out.mean(axis=0)
    spread = out.std(axis=0, ddof=1)
    se = spread / np.sqrt(n_rep)
    report = UncertaintyReport(float(mean[0]), float(mean[1]), float(mean[2]), "entropy",
                               {"source": "monte_carlo_oracle", "replicates": n_rep})
    return GroundTruth(report, *map(float, se), *map(float, spread), n_replicates=n_rep)


def with_knobs(world: SimWorld, **kw) -> SimWorld:
    return replace(world, **kw)


def pipeline_decomposition(world: SimWorld, instance: SimInstance, l_sets: int, m_configs: int) -> UncertaintyReport:
    """Run the real extraction + decomposition path on simulated sequences."""
    from .answer_extraction import aggregate, build_matrix
    from .uq_core import decompose_entropy

    space = LabelSpace.numeric(world.k)
    logp = cell_log_probs(world, instance, range(l_sets), range(m_configs))
    dists = [aggregate([sequence_from_log_probs(row) for row in logp[j]], space) for j in range(l_sets)]
    return decompose_entropy(build_matrix(dists))


@dataclass(frozen=True)
class SweepCell:
    """Pipeline vs oracle for one (alpha, tau) world, averaged over instances."""

    alpha: float
    tau: float
    pipeline: dict
    oracle: dict
    tolerance: dict

    @property
    def agrees(self) -> bool:
        return all(abs(self.pipeline[c] - self.oracle[c]) <= self.tolerance[c] for c in self.pipeline)


def knob_sweep(alphas: Sequence[float], taus: Sequence[float], n_instances: int = 4, l_sets: int = 32,
               m_configs: int = 32, mc_samples: int | None = None, base: SimWorld | None = None,
               n_sigma: float = 3.0) -> list[SweepCell]:
    """Compare pipeline and oracle on every (alpha, tau) pair.

    The tolerance of an instance-average is ``n_sigma`` times the root sum of
    squared per-instance sigmas, divided by the number of instances.
    """
    base = base or SimWorld()
    mc_samples = mc_samples or 10 * l_sets * m_configs
    out = []
    for a in alphas:
        for t in taus:
            w = with_knobs(base, concept_concentration=a, config_noise=t)
            insts = [SimInstance(i, sim_label(w, i)) for i in range(n_instances)]
            pipe = [pipeline_decomposition(w, x, l_sets, m_configs) for x in insts]
            orc = [ground_truth_decomposition(w, x, l_sets, m_configs, mc_samples) for x in insts]
            comps = ("total", "epistemic", "aleatoric")
            out.append(SweepCell(
                a, t,
                {c: float(np.mean([getattr(r, c) for r in pipe])) for c in comps},
                {c: float(np.mean([getattr(g.report, c) for g in orc])) for c in comps},
                {c: n_sigma * float(np.sqrt(sum(g.tolerance(c, 1.0) ** 2 for g in orc))) / n_instances
                 for c in comps},
            ))
    return out

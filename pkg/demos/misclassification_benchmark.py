"""
Does uncertainty flag wrong answers?
====================================

Run the misclassification protocol on the synthetic benchmark, then replay a
recorded trace over the bundled emotion test split. No model is needed for
either; the same code talks to a live completions endpoint when
``--source live`` is used on the command line.
"""

from importlib.resources import files

from icluq.llm_gateway import ReplaySource
from icluq.prompting import load_bundled
from icluq.protocols import EvalConfig, report_markdown, run_misclassification
from icluq.simulator import SimulatorSource, SimWorld, make_dataset

world = SimWorld(k=6, concept_concentration=2.0, config_noise=0.5, base_accuracy=0.6, seed=7)
test = make_dataset(world, 200, "test")
train = make_dataset(world, 60, "train")

report = run_misclassification(test, train, EvalConfig(l_sets=4, m_sequences=10), SimulatorSource(world))
print(report_markdown(report))

# %%
# The bundled trace holds 4 demo sets x 10 sequences for each of 20 test
# sentences. Replaying it is exact, so the report is reproducible anywhere.

trace = files("icluq") / "data" / "traces" / "emotion_mini_test_trace.jsonl"
replayed = run_misclassification(load_bundled("emotion_mini_test"), load_bundled("emotion_mini"),
                                 EvalConfig(dataset_key="emotion"), ReplaySource(str(trace)))
print(report_markdown(replayed))
for s in replayed.instances[:5]:
    print(s.instance_id, s.true_label, s.predicted_label, f"EU={s.scores['EU']:.3f} AU={s.scores['AU']:.3f}")

"""Datasets, demonstration sampling and prompt rendering."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Iterable, Literal, NamedTuple, Sequence

import numpy as np
import yaml

from .answer_extraction import LabelSpace
from .errors import ClassUnderrepresented, MalformedRecord, NotEnoughInstances, UnknownLabel

Strategy = Literal["random", "class"]

_NUMBER_WORDS = {
    1: "one", 2: "two", 3: "three", 4: "four", 5: "five", 6: "six", 7: "seven",
    8: "eight", 9: "nine", 10: "ten", 11: "eleven", 12: "twelve",
}


class Instance(NamedTuple):
    text: str
    label_id: int
    id: str


@dataclass(frozen=True)
class Dataset:
    name: str
    instances: tuple[Instance, ...]
    label_space: LabelSpace
    split: Literal["train", "test"] = "test"

    def __post_init__(self):
        object.__setattr__(self, "instances", tuple(self.instances))
        if not self.instances:
            raise MalformedRecord(f"dataset {self.name!r} has no instances")
        for inst in self.instances:
            if not 0 <= inst.label_id < self.label_space.k:
                raise UnknownLabel(f"label {inst.label_id} outside [0, {self.label_space.k})")

    def __len__(self):
        return len(self.instances)

    def class_counts(self) -> tuple[int, ...]:
        counts = [0] * self.label_space.k
        for inst in self.instances:
            counts[inst.label_id] += 1
        return tuple(counts)

    def restrict(self, keep_labels: Iterable[int]) -> "Dataset":
        """Drop instances outside ``keep_labels`` and renumber the rest 0..k'-1."""
        keep = sorted(set(keep_labels))
        remap = {old: new for new, old in enumerate(keep)}
        space = LabelSpace(tuple(self.label_space.name(i) for i in keep))
        kept = [Instance(i.text, remap[i.label_id], i.id) for i in self.instances if i.label_id in remap]
        return replace(self, instances=tuple(kept), label_space=space)


def _data_file(name: str) -> Path:
    return Path(str(resources.files("icluq") / "data" / name))


BUNDLED = {
    "emotion_mini": ("emotion_mini.jsonl", "emotion_labels.json", "train"),
    "emotion_mini_test": ("emotion_mini_test.jsonl", "emotion_labels.json", "test"),
    "financial_mini": ("financial_mini.jsonl", "financial_labels.json", "train"),
}


def load_label_space(path) -> LabelSpace:
    """Read a label-space file: a JSON list of ``{"id", "name"}`` objects or pairs."""
    with open(path, encoding="utf-8") as f:
        raw = json.load(f)
    pairs = [(e["id"], e["name"]) if isinstance(e, dict) else (e[0], e[1]) for e in raw]
    return LabelSpace.from_pairs(pairs)


def load_dataset(
    path,
    format: Literal["jsonl", "csv"] | None = None,
    label_space: LabelSpace | None = None,
    name: str | None = None,
    split: Literal["train", "test"] = "test",
) -> Dataset:
    """Load a dataset file with ``text`` and integer ``label`` fields.

    Without ``label_space`` the labels are taken to be 0..max(label) with
    their ids as names.
    """
    path = Path(path)
    fmt = format or ("csv" if path.suffix.lower() == ".csv" else "jsonl")
    records = []
    with open(path, encoding="utf-8", newline="") as f:
        if fmt == "jsonl":
            for lineno, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as e:
                    raise MalformedRecord(f"invalid JSON ({e.msg})", lineno) from None
                records.append((lineno, rec))
        elif fmt == "csv":
            for lineno, rec in enumerate(csv.DictReader(f), start=2):
                records.append((lineno, rec))
        else:
            raise ValueError(f"unknown dataset format {fmt!r}")

    instances = []
    for lineno, rec in records:
        if not isinstance(rec, dict) or "text" not in rec or "label" not in rec:
            raise MalformedRecord("record needs 'text' and 'label' fields", lineno)
        label = rec["label"]
        try:
            if isinstance(label, bool) or float(label) != int(float(label)):
                raise ValueError
            label = int(float(label))
        except (TypeError, ValueError):
            raise MalformedRecord(f"label {rec['label']!r} is not an integer", lineno) from None
        if label < 0 or (label_space is not None and label >= label_space.k):
            raise UnknownLabel(f"line {lineno}: label {label} not in label space")
        inst_id = str(rec.get("id") or f"{path.stem}-{len(instances)}")
        instances.append(Instance(str(rec["text"]), label, inst_id))

    if not instances:
        raise MalformedRecord(f"{path} contains no records")
    if label_space is None:
        label_space = LabelSpace.numeric(max(i.label_id for i in instances) + 1)
    return Dataset(name or path.stem, tuple(instances), label_space, split)


def load_bundled(name: str) -> Dataset:
    data_file, labels_file, split = BUNDLED[name]
    return load_dataset(_data_file(data_file), label_space=load_label_space(_data_file(labels_file)),
                        name=name, split=split)


def bundled_demo_counts() -> dict:
    """Per-dataset demonstration counts: ``random`` total and ``per_class``."""
    with open(_data_file("demo_counts.json"), encoding="utf-8") as f:
        return json.load(f)


def _rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def _seed_tuple(seed) -> tuple[int, ...]:
    return tuple(int(s) for s in seed) if isinstance(seed, (tuple, list)) else (int(seed),)


class Demo(NamedTuple):
    text: str
    label_id: int
    label_name: str


@dataclass(frozen=True)
class DemoSet:
    demos: tuple[Demo, ...]
    source_ids: tuple[int, ...]
    strategy: Strategy


def _demo_set(train: Dataset, idx, strategy: Strategy) -> DemoSet:
    idx = tuple(int(i) for i in idx)
    demos = tuple(
        Demo(train.instances[i].text, train.instances[i].label_id,
             train.label_space.name(train.instances[i].label_id))
        for i in idx
    )
    return DemoSet(demos, idx, strategy)


def sample_random(train: Dataset, n: int, seed) -> DemoSet:
    """``n`` distinct training instances drawn uniformly, labels unconstrained."""
    if n > len(train):
        raise NotEnoughInstances(f"asked for {n} demonstrations, {train.name} has {len(train)}")
    idx = _rng(seed).choice(len(train), size=n, replace=False)
    return _demo_set(train, idx, "random")


def sample_class(train: Dataset, per_class: int, seed) -> DemoSet:
    """``per_class`` demonstrations for every class, in shuffled order."""
    rng = _rng(seed)
    labels = np.array([i.label_id for i in train.instances])
    chosen = []
    for c in range(train.label_space.k):
        pool = np.flatnonzero(labels == c)
        if pool.size < per_class:
            raise ClassUnderrepresented(c, train.label_space.name(c), pool.size, per_class)
        chosen.append(rng.choice(pool, size=per_class, replace=False))
    idx = np.concatenate(chosen)
    return _demo_set(train, idx[rng.permutation(idx.size)], "class")


def sample_demo_batches(train: Dataset, strategy: Strategy, size: int, l_sets: int, seed) -> list[DemoSet]:
    """Draw ``l_sets`` independent demo sets.

    ``size`` is the total count for the random strategy and the per-class
    count for the class strategy. Set ``k`` uses the sub-seed ``(*seed, k)``,
    so it does not depend on how many sets are drawn.
    """
    if l_sets < 1:
        raise ValueError("l_sets must be >= 1")
    sampler = {"random": sample_random, "class": sample_class}[strategy]
    base = _seed_tuple(seed)
    return [sampler(train, size, base + (k,)) for k in range(l_sets)]


@dataclass(frozen=True)
class PromptTemplate:
    system_prompt: str
    task_description: str
    demo_header: str
    demo_block_format: str
    test_block_format: str


def load_template(path) -> PromptTemplate:
    with open(path, encoding="utf-8") as f:
        raw = yaml.safe_load(f)
    try:
        return PromptTemplate(**{k: raw[k] for k in PromptTemplate.__dataclass_fields__})
    except (KeyError, TypeError) as e:
        raise MalformedRecord(f"template {path} is missing section {e}") from None


def default_template() -> PromptTemplate:
    return load_template(_data_file("template_default.yaml"))


def render_legend(space: LabelSpace) -> str:
    return "; ".join(f"{i}: {name}" for i, name in space.labels)


def render_prompt(template: PromptTemplate, demos: DemoSet | Sequence[Demo], test_text: str,
                  space: LabelSpace) -> str:
    """Assemble system prompt, task description, examples and test query.

    The legend comes from ``space`` (the test task); each example keeps its
    own label name. The result ends with ``"Category: "``.
    """
    demo_list = demos.demos if isinstance(demos, DemoSet) else tuple(demos)
    parts = [
        template.system_prompt,
        template.task_description.format(
            num_classes=_NUMBER_WORDS.get(space.k, str(space.k)), legend=render_legend(space)
        ),
    ]
    if demo_list:
        parts.append(template.demo_header)
        parts.extend(
            template.demo_block_format.format(index=i, text=d.text, label_id=d.label_id, label_name=d.label_name)
            for i, d in enumerate(demo_list, start=1)
        )
    parts.append(template.test_block_format.format(text=test_text))
    return "\n".join(parts)

"""Experiment protocols: misclassification, OOD-demonstration and semantic-OOD detection.

Each protocol scores every evaluated item with the entropy decomposition
(``EU``, ``AU``, ``total``) and the three baselines, attaches a 0/1
detection label, and reports AUPR/AUROC per method.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from .answer_extraction import LabelSpace, aggregate, build_matrix, extract_label
from .baselines import likelihood_uncertainty, semantic_uncertainty, token_entropy_uncertainty
from .errors import AllLabelsMasked, IcluqError, MissingAlternatives, NoPositives, SingleClass, Unparseable, UpstreamError, ValidationError
from .llm_gateway import GenerationCall, GenerationRequest
from .metrics import aupr, auroc, pr_points, roc_points
from .prompting import Dataset, PromptTemplate, bundled_demo_counts, default_template, render_prompt, sample_demo_batches
from .uq_core import decompose_entropy, pooled_distribution

log = logging.getLogger(__name__)

METHODS = ("EU", "AU", "total", "likelihood", "token_entropy", "semantic")
Protocol = Literal["misclassification", "ood_demo", "semantic_ood"]


@dataclass(frozen=True)
class EvalConfig:
    """Every knob of an experiment run; the CLI and config files mirror it."""

    l_sets: int = 4
    m_sequences: int = 10
    max_new_tokens: int = 16
    strategy: Literal["random", "class"] = "random"
    n_demos: int | None = None
    per_class: int | None = None
    dataset_key: str | None = None
    seed: int = 0
    decode_params: dict = field(default_factory=dict)
    logprob_top_k: int = 5
    pooling: Literal["uniform", "raw_sum"] = "uniform"
    prediction_rule: Literal["pooled", "majority"] = "pooled"
    max_workers: int = 1

    def demo_size(self) -> int:
        table = bundled_demo_counts().get(self.dataset_key or "", {})
        if self.strategy == "random":
            return self.n_demos if self.n_demos is not None else table.get("random", 6)
        return self.per_class if self.per_class is not None else table.get("per_class", 1)

    def fingerprint_payload(self) -> dict:
        # worker count never changes results, so it stays out of the fingerprint
        d = asdict(self)
        d.pop("max_workers")
        return d


@dataclass(frozen=True)
class ScoredInstance:
    instance_id: str
    scores: dict
    predicted_label: int
    true_label: int
    detection_label: int
    condition: str = "in_domain"


@dataclass
class EvalReport:
    protocol: str
    metrics: dict  # method -> (aupr | None, auroc | None)
    accuracy: float
    counts: dict
    config_fingerprint: str
    trace_fingerprint: str
    instances: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)


class ProtocolFailure(UpstreamError):
    """A run stopped part-way; ``partial`` holds the items finished before the error."""

    def __init__(self, cause: Exception, partial: list, failed_index: int):
        super().__init__(f"{type(cause).__name__}: {cause}")
        self.cause = cause
        self.partial = partial
        self.failed_index = failed_index


@dataclass(frozen=True)
class _Item:
    index: int
    instance: object
    train: Dataset
    condition: str


def _majority(seq_lists, space: LabelSpace) -> int:
    votes = np.zeros(space.k)
    for seqs in seq_lists:
        for s in seqs:
            try:
                votes[extract_label(s, space).label_id] += 1
            except Unparseable:
                pass
    return int(np.argmax(votes))


def _safe(fn, *args) -> float | None:
    try:
        return fn(*args).value
    except MissingAlternatives:
        return None


def _evaluate(item: _Item, source, config: EvalConfig, space: LabelSpace, template: PromptTemplate,
              label_map: tuple[int, ...] | None) -> tuple[ScoredInstance, list[str]]:
    inst = item.instance
    demo_sets = sample_demo_batches(item.train, config.strategy, config.demo_size(), config.l_sets,
                                    seed=(config.seed, item.index))
    seq_lists, trace_keys = [], []
    for j, demos in enumerate(demo_sets):
        req = GenerationRequest(render_prompt(template, demos, inst.text, space), config.m_sequences,
                                config.max_new_tokens, dict(config.decode_params), config.logprob_top_k)
        seqs = source.generate(GenerationCall(req, inst.id, j, item.index, inst.label_id, label_map,
                                              item.condition))
        seq_lists.append(seqs)
        body = json.dumps([s.to_dict() for s in seqs], sort_keys=True)
        trace_keys.append(req.fingerprint + ":" + hashlib.sha256(body.encode()).hexdigest())

    dists = [aggregate(seqs, space) for seqs in seq_lists]
    matrix = build_matrix(dists)
    rep = decompose_entropy(matrix, config.pooling)
    if config.prediction_rule == "majority":
        local_pred = _majority(seq_lists, space)
    else:
        local_pred = int(np.argmax(pooled_distribution(matrix, "uniform")))
    predicted = label_map[local_pred] if label_map else local_pred

    every_seq = [s for seqs in seq_lists for s in seqs]
    scores = {
        "EU": rep.epistemic,
        "AU": rep.aleatoric,
        "total": rep.total,
        "likelihood": likelihood_uncertainty(every_seq).value,
        "token_entropy": _safe(token_entropy_uncertainty, every_seq),
        "semantic": math.fsum(semantic_uncertainty(seqs, space).value for seqs in seq_lists) / len(seq_lists),
        "_fallback_columns": sum(d.fallback for d in dists),
        "_skipped_sequences": sum(d.n_skipped for d in dists),
    }
    scored = ScoredInstance(inst.id, scores, predicted, inst.label_id, 0, item.condition)
    return scored, trace_keys


def _run_items(items: Sequence[_Item], source, config, space, template, label_map, detect):
    def work(item):
        return _evaluate(item, source, config, space, template, label_map)

    done, keys = [], []
    with ThreadPoolExecutor(max_workers=max(1, config.max_workers)) as pool:
        results = pool.map(work, items)
        try:
            for pos, (scored, trace_keys) in enumerate(results):
                done.append(_with_detection(scored, detect(items[pos], scored)))
                keys.extend(trace_keys)
        except IcluqError as e:
            raise ProtocolFailure(e, done, len(done)) from e
    return done, keys


def _with_detection(s: ScoredInstance, label: int) -> ScoredInstance:
    return ScoredInstance(s.instance_id, s.scores, s.predicted_label, s.true_label, int(label), s.condition)


def _dataset_digest(ds: Dataset) -> str:
    h = hashlib.sha256()
    h.update(json.dumps([ds.name, list(ds.label_space.names)]).encode())
    for inst in ds.instances:
        h.update(json.dumps([inst.id, inst.text, inst.label_id]).encode())
    return h.hexdigest()


def _config_fingerprint(protocol: str, config: EvalConfig, datasets: Sequence[Dataset], extra: dict,
                        source_identity: str) -> str:
    payload = {
        "protocol": protocol,
        "config": config.fingerprint_payload(),
        "datasets": [_dataset_digest(d) for d in datasets],
        "extra": extra,
        "source": source_identity,
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def _metric(fn, scores, labels) -> float | None:
    try:
        return fn(scores, labels)
    except (SingleClass, NoPositives):
        return None


def _assemble(protocol, items: list[ScoredInstance], keys, config_fp, accuracy_items, metadata) -> EvalReport:
    labels = [s.detection_label for s in items]
    metrics = {}
    for m in METHODS:
        vals = [s.scores[m] for s in items]
        if any(v is None for v in vals):
            metrics[m] = (None, None)
            continue
        metrics[m] = (_metric(aupr, vals, labels), _metric(auroc, vals, labels))
    correct = [s.predicted_label == s.true_label for s in accuracy_items]
    counts = {
        "n_items": len(items),
        "n_positive": int(sum(labels)),
        "n_negative": len(labels) - int(sum(labels)),
        "fallback_columns": int(sum(s.scores["_fallback_columns"] for s in items)),
        "skipped_sequences": int(sum(s.scores["_skipped_sequences"] for s in items)),
    }
    trace_fp = hashlib.sha256("\n".join(keys).encode()).hexdigest()
    meta = {"baseline_pooling": "mean over all L x M sequences; semantic: mean over demo sets", **metadata}
    return EvalReport(protocol, metrics, float(np.mean(correct)) if correct else float("nan"), counts,
                      config_fp, trace_fp, items, meta)


def run_misclassification(test: Dataset, demo_source: Dataset, config: EvalConfig, source,
                          template: PromptTemplate | None = None) -> EvalReport:
    """Detection label 1 marks a misclassified test instance."""
    template = template or default_template()
    items = [_Item(i, inst, demo_source, "in_domain") for i, inst in enumerate(test.instances)]
    done, keys = _run_items(items, source, config, test.label_space, template, None,
                            lambda item, s: s.predicted_label != s.true_label)
    fp = _config_fingerprint("misclassification", config, [test, demo_source], {}, source.identity)
    return _assemble("misclassification", done, keys, fp, done, {})


def run_ood_demo_detection(test: Dataset, in_domain_demos: Dataset, ood_demos: Dataset, config: EvalConfig,
                           source, template: PromptTemplate | None = None) -> EvalReport:
    """Every test instance is run with in-domain demos (label 0) and OOD demos (label 1)."""
    template = template or default_template()
    items = []
    for i, inst in enumerate(test.instances):
        items.append(_Item(i, inst, in_domain_demos, "in_domain"))
        items.append(_Item(i, inst, ood_demos, "ood"))
    done, keys = _run_items(items, source, config, test.label_space, template, None,
                            lambda item, s: item.condition == "ood")
    fp = _config_fingerprint("ood_demo", config, [test, in_domain_demos, ood_demos], {}, source.identity)
    in_domain = [s for s in done if s.condition == "in_domain"]
    return _assemble("ood_demo", done, keys, fp, in_domain, {})


def run_semantic_ood(test: Dataset, masked_labels: Sequence[int], config: EvalConfig, source,
                     demo_source: Dataset | None = None, template: PromptTemplate | None = None) -> EvalReport:
    """Hide ``masked_labels`` from the prompt; instances of those classes get label 1.

    The advertised classes are renumbered 0..k'-1 in the legend and demos;
    predictions are mapped back to the original ids.
    """
    masked = sorted(set(int(m) for m in masked_labels))
    if not masked:
        raise ValidationError("semantic-OOD needs at least one masked label")
    if any(not 0 <= m < test.label_space.k for m in masked):
        raise ValidationError(f"masked labels {masked} outside the label space")
    keep = [c for c in range(test.label_space.k) if c not in masked]
    if not keep:
        raise AllLabelsMasked("every label is masked")
    template = template or default_template()
    train = (demo_source or test).restrict(keep)
    sub_space = train.label_space
    items = [_Item(i, inst, train, "in_domain") for i, inst in enumerate(test.instances)]
    done, keys = _run_items(items, source, config, sub_space, template, tuple(keep),
                            lambda item, s: s.true_label in masked)
    fp = _config_fingerprint("semantic_ood", config, [test, demo_source or test], {"masked": masked},
                             source.identity)
    in_dist = [s for s in done if s.detection_label == 0]
    return _assemble("semantic_ood", done, keys, fp, in_dist, {"masked_labels": masked})


# --- report output --------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return "undefined"
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def report_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["protocol", "method", "aupr", "auroc", "accuracy", "n_items", "n_positive",
                "config_fingerprint", "trace_fingerprint"])
    for m, (ap, roc) in report.metrics.items():
        w.writerow([report.protocol, m, _fmt(ap), _fmt(roc), _fmt(report.accuracy), report.counts["n_items"],
                    report.counts["n_positive"], report.config_fingerprint, report.trace_fingerprint])
    return buf.getvalue()


def instances_csv(items: Sequence[ScoredInstance]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["instance_id", "condition", "true_label", "predicted_label", "detection_label", *METHODS])
    for s in items:
        w.writerow([s.instance_id, s.condition, s.true_label, s.predicted_label, s.detection_label,
                    *(_fmt(s.scores[m]) for m in METHODS)])
    return buf.getvalue()


def report_markdown(report: EvalReport) -> str:
    lines = [
        f"# {report.protocol} report",
        "",
        f"accuracy: {report.accuracy:.4f}  ",
        f"items: {report.counts['n_items']} (positive {report.counts['n_positive']}, "
        f"negative {report.counts['n_negative']})  ",
        f"config fingerprint: `{report.config_fingerprint[:16]}`  ",
        f"trace fingerprint: `{report.trace_fingerprint[:16]}`",
        "",
        "| method | AUPR | AUROC |",
        "|---|---|---|",
    ]
    for m, (ap, roc) in report.metrics.items():
        show = lambda v: "undefined" if v is None else f"{v:.4f}"  # noqa: E731
        lines.append(f"| {m} | {show(ap)} | {show(roc)} |")
    return "\n".join(lines) + "\n"


def write_report(report: EvalReport, out_dir, emit_points: bool = False) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "report.csv": report_csv(report),
        "instances.csv": instances_csv(report.instances),
        "report.md": report_markdown(report),
    }
    if emit_points:
        labels = [s.detection_label for s in report.instances]
        for m in METHODS:
            vals = [s.scores[m] for s in report.instances]
            if any(v is None for v in vals):
                continue
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(["curve", "x", "y", "threshold"])
            try:
                for x, y, t in zip(*roc_points(vals, labels)):
                    w.writerow(["roc", repr(float(x)), repr(float(y)), repr(float(t))])
                for x, y, t in zip(*pr_points(vals, labels)):
                    w.writerow(["pr", repr(float(x)), repr(float(y)), repr(float(t))])
            except (SingleClass, NoPositives):
                continue
            files[f"points_{m}.csv"] = buf.getvalue()
    paths = {}
    for name, text in files.items():
        p = out / name
        p.write_text(text, encoding="utf-8")
        paths[name] = p
    return paths


def write_failure(failure: ProtocolFailure, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "instances.partial.csv").write_text(instances_csv(failure.partial), encoding="utf-8")
    manifest = {
        "error": type(failure.cause).__name__,
        "message": str(failure.cause),
        "completed_items": len(failure.partial),
        "failed_item_index": failure.failed_index,
    }
    p = out / "failure.json"
    p.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return p

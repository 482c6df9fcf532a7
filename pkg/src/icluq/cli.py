"""Command-line entry point: ``icluq run | decompose | simulate | metrics | render``.

Exit codes: 0 success, 1 validation or usage error, 2 upstream failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import yaml

from .answer_extraction import LabelSpace, aggregate, build_matrix
from .errors import UpstreamError, ValidationError
from .llm_gateway import CompletionsClient, EndpointConfig, LiveSource, RecordingSource, ReplaySource, read_trace
from .metrics import aupr, auroc
from .prompting import BUNDLED, Dataset, bundled_demo_counts, default_template, load_bundled, load_dataset, \
    load_label_space, load_template, render_prompt, sample_demo_batches
from .protocols import EvalConfig, ProtocolFailure, report_markdown, run_misclassification, \
    run_ood_demo_detection, run_semantic_ood, write_failure, write_report
from .simulator import SimulatorSource, SimWorld, knob_sweep, make_dataset
from .uq_core import decompose_entropy

log = logging.getLogger("icluq")

BUNDLED_TRACES = Path(__file__).parent / "data" / "traces"

# defaults for `run`; a config file overrides these and explicit flags override the file
RUN_DEFAULTS = {
    "protocol": "misclassification",
    "source": "simulator",
    "trace": None,
    "replay_mode": "strict",
    "endpoint_config": None,
    "dataset": None,
    "demo_dataset": None,
    "ood_demo_dataset": None,
    "label_space": None,
    "template": None,
    "strategy": "random",
    "n_demos": None,
    "per_class": None,
    "dataset_key": None,
    "l_sets": 4,
    "m_sequences": 10,
    "max_new_tokens": 16,
    "logprob_top_k": 5,
    "decode_params": {},
    "seed": 0,
    "pooling": "uniform",
    "prediction_rule": "pooled",
    "workers": 1,
    "mask_labels": None,
    "out_dir": "icluq_out",
    "emit_points": False,
    "sim_k": 6,
    "sim_alpha": 2.0,
    "sim_tau": 0.5,
    "sim_accuracy": 0.6,
    "sim_seed": 7,
    "sim_instances": 200,
    "sim_train_size": 60,
    "ood_ratio": 1 / 16,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.replace(" ", "").split(",") if x]


def _float_list(text: str) -> list[float]:
    return [float(x) for x in text.replace(" ", "").split(",") if x]


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="icluq", description="Uncertainty decomposition for in-context classification.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="run an evaluation protocol")
    r.add_argument("--config", help="YAML file with any of the options below (flags win)")
    r.add_argument("--protocol", choices=["misclassification", "ood_demo", "semantic_ood"])
    r.add_argument("--source", choices=["live", "replay", "simulator"])
    r.add_argument("--trace", help="trace file to replay from, or to record into for live/simulator runs")
    r.add_argument("--replay-mode", choices=["strict", "record_on_miss"])
    r.add_argument("--endpoint-config", help="YAML endpoint settings (url, model, api_key, chat, timeout)")
    r.add_argument("--dataset", help="test set: bundled name or .jsonl/.csv path")
    r.add_argument("--demo-dataset", help="demonstration pool: bundled name or path")
    r.add_argument("--ood-demo-dataset", help="OOD demonstration pool for the ood_demo protocol")
    r.add_argument("--label-space", help="label-space JSON for dataset files")
    r.add_argument("--template", help="YAML prompt template")
    r.add_argument("--strategy", choices=["random", "class"])
    r.add_argument("--n-demos", type=int, help="demos per set for the random strategy")
    r.add_argument("--per-class", type=int, help="demos per class for the class strategy")
    r.add_argument("--dataset-key", help=f"row of the demo-count table: {', '.join(bundled_demo_counts())}")
    r.add_argument("--l-sets", type=int)
    r.add_argument("--m-sequences", type=int)
    r.add_argument("--max-new-tokens", type=int)
    r.add_argument("--logprob-top-k", type=int)
    r.add_argument("--seed", type=int)
    r.add_argument("--pooling", choices=["uniform", "raw_sum"])
    r.add_argument("--prediction-rule", choices=["pooled", "majority"])
    r.add_argument("--workers", type=int, help="instances evaluated concurrently")
    r.add_argument("--mask-labels", type=_int_list, help="comma-separated label ids hidden from prompts")
    r.add_argument("--out-dir")
    r.add_argument("--emit-points", action="store_true", default=None, help="also write ROC/PR curve points")
    r.add_argument("--sim-k", type=int)
    r.add_argument("--sim-alpha", type=float, help="concept concentration")
    r.add_argument("--sim-tau", type=float, help="configuration noise scale")
    r.add_argument("--sim-accuracy", type=float)
    r.add_argument("--sim-seed", type=int)
    r.add_argument("--sim-instances", type=int)
    r.add_argument("--sim-train-size", type=int)
    r.add_argument("--ood-ratio", type=float, help="OOD concept concentration as a fraction of --sim-alpha")

    d = sub.add_parser("decompose", help="per-instance decomposition of a recorded trace")
    d.add_argument("--trace", required=True)
    g = d.add_mutually_exclusive_group(required=True)
    g.add_argument("--label-space", help="bundled dataset name or label-space JSON")
    g.add_argument("--k", type=int, help="numeric labels 0..k-1")
    d.add_argument("--pooling", choices=["uniform", "raw_sum"], default="uniform")

    s = sub.add_parser("simulate", help="pipeline vs Monte-Carlo oracle over an alpha/tau grid")
    s.add_argument("--alphas", type=_float_list, default=[8.0, 2.0, 0.5])
    s.add_argument("--taus", type=_float_list, default=[0.0, 0.5, 2.0])
    s.add_argument("--instances", type=int, default=4)
    s.add_argument("--l-sets", type=int, default=32)
    s.add_argument("--m-configs", type=int, default=32)
    s.add_argument("--mc-samples", type=int, default=None, help="default: 20 replicates")
    s.add_argument("--k", type=int, default=6)
    s.add_argument("--accuracy", type=float, default=0.6)
    s.add_argument("--seed", type=int, default=7)

    m = sub.add_parser("metrics", help="AUROC and AUPR from a score,label CSV")
    m.add_argument("--scores", required=True)

    rd = sub.add_parser("render", help="print the prompts built for one test instance")
    rd.add_argument("--dataset", default="emotion_mini_test")
    rd.add_argument("--demo-dataset", default="emotion_mini")
    rd.add_argument("--label-space")
    rd.add_argument("--template")
    rd.add_argument("--index", type=int, default=0)
    rd.add_argument("--strategy", choices=["random", "class"], default="random")
    rd.add_argument("--size", type=int, default=6, help="demos (random) or demos per class (class)")
    rd.add_argument("--l-sets", type=int, default=1)
    rd.add_argument("--seed", type=int, default=0)
    rd.add_argument("--mask-labels", type=_int_list)
    return p


# --- helpers ----------------------------------------------------------------


def _space(spec: str | None) -> LabelSpace | None:
    if spec is None:
        return None
    if spec in BUNDLED:
        return load_bundled(spec).label_space
    return load_label_space(spec)


def _dataset(spec: str, space: LabelSpace | None, split: str) -> Dataset:
    if spec in BUNDLED:
        return load_bundled(spec)
    return load_dataset(spec, label_space=space, split=split)


def _merge(args: argparse.Namespace) -> dict:
    opts = dict(RUN_DEFAULTS)
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            loaded = yaml.safe_load(fh) or {}
        if not isinstance(loaded, dict):
            raise ValidationError(f"{args.config}: config must be a mapping")
        for key, val in loaded.items():
            key = key.replace("-", "_")
            if key not in opts:
                raise ValidationError(f"{args.config}: unknown option {key!r}")
            opts[key] = val
    for key in opts:
        val = getattr(args, key, None)
        if val is not None:
            opts[key] = val
    return opts


def _dataset_key(opts: dict, test: Dataset) -> str | None:
    if opts["dataset_key"]:
        return opts["dataset_key"]
    head = test.name.split("_")[0]
    return head if head in bundled_demo_counts() else None


def _source(opts: dict, k: int):
    kind, trace = opts["source"], opts["trace"]
    if kind == "simulator":
        world = SimWorld(k, opts["sim_alpha"], opts["sim_tau"], opts["sim_accuracy"], opts["sim_seed"])
        ood = SimWorld(k, opts["sim_alpha"] * opts["ood_ratio"], opts["sim_tau"], opts["sim_accuracy"],
                       opts["sim_seed"])
        src = SimulatorSource(world, ood)
    elif kind == "replay":
        if not trace:
            raise ValidationError("--source replay needs --trace")
        fallback = None
        if opts["replay_mode"] == "record_on_miss":
            fallback = LiveSource(CompletionsClient(EndpointConfig.from_env(opts["endpoint_config"])))
        return ReplaySource(_trace_path(trace), opts["replay_mode"], fallback)
    else:
        src = LiveSource(CompletionsClient(EndpointConfig.from_env(opts["endpoint_config"])))
    return RecordingSource(src, trace) if trace else src


def _trace_path(spec: str) -> Path:
    """A file path, or the name of a trace bundled with the package."""
    p = Path(spec)
    if p.exists():
        return p
    bundled = BUNDLED_TRACES / (spec if spec.endswith(".jsonl") else spec + ".jsonl")
    return bundled if bundled.exists() else p


def _datasets(opts: dict):
    space = _space(opts["label_space"])
    if opts["dataset"]:
        test = _dataset(opts["dataset"], space, "test")
        demos = _dataset(opts["demo_dataset"] or opts["dataset"], space or test.label_space, "train")
        ood = _dataset(opts["ood_demo_dataset"], None, "train") if opts["ood_demo_dataset"] else None
        return test, demos, ood
    if opts["source"] != "simulator":
        raise ValidationError("--dataset is required unless --source simulator")
    world = SimWorld(opts["sim_k"], opts["sim_alpha"], opts["sim_tau"], opts["sim_accuracy"], opts["sim_seed"])
    test = make_dataset(world, opts["sim_instances"], "test")
    demos = make_dataset(world, opts["sim_train_size"], "train")
    ood = make_dataset(world, opts["sim_train_size"], "train", name="sim_ood_train", first_id=10 ** 6)
    return test, demos, ood


# --- subcommands --------------------------------------------------------------


def cmd_run(args) -> int:
    opts = _merge(args)
    test, demos, ood = _datasets(opts)
    config = EvalConfig(
        l_sets=opts["l_sets"], m_sequences=opts["m_sequences"], max_new_tokens=opts["max_new_tokens"],
        strategy=opts["strategy"], n_demos=opts["n_demos"], per_class=opts["per_class"],
        dataset_key=_dataset_key(opts, test), seed=opts["seed"], decode_params=dict(opts["decode_params"]),
        logprob_top_k=opts["logprob_top_k"], pooling=opts["pooling"], prediction_rule=opts["prediction_rule"],
        max_workers=opts["workers"],
    )
    template = load_template(opts["template"]) if opts["template"] else default_template()
    source = _source(opts, test.label_space.k)
    out_dir = Path(opts["out_dir"])
    try:
        if opts["protocol"] == "misclassification":
            report = run_misclassification(test, demos, config, source, template)
        elif opts["protocol"] == "ood_demo":
            if ood is None:
                raise ValidationError("ood_demo needs --ood-demo-dataset")
            report = run_ood_demo_detection(test, demos, ood, config, source, template)
        else:
            if not opts["mask_labels"]:
                raise ValidationError("semantic_ood needs --mask-labels")
            report = run_semantic_ood(test, opts["mask_labels"], config, source, demos, template)
    except ProtocolFailure as e:
        manifest = write_failure(e, out_dir)
        print(f"error: {e} (partial results in {manifest.parent})", file=sys.stderr)
        return 2 if isinstance(e.cause, UpstreamError) else 1
    paths = write_report(report, out_dir, bool(opts["emit_points"]))
    sys.stdout.write(report_markdown(report))
    print(f"\nwrote {', '.join(sorted(paths))} to {out_dir}")
    return 0


def cmd_decompose(args) -> int:
    space = LabelSpace.numeric(args.k) if args.k else _space(args.label_space)
    by_instance: dict[str, dict[int, list]] = {}
    seen = set()
    for rec in read_trace(_trace_path(args.trace)):
        if rec.fingerprint in seen:
            continue
        seen.add(rec.fingerprint)
        by_instance.setdefault(rec.instance_id, {})[rec.demo_set_id] = list(rec.sequences)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["instance_id", "l_demo_sets", "total", "epistemic", "aleatoric"])
    for inst_id, sets in by_instance.items():
        dists = [aggregate(sets[j], space) for j in sorted(sets)]
        rep = decompose_entropy(build_matrix(dists), args.pooling)
        w.writerow([inst_id, len(dists), repr(rep.total), repr(rep.epistemic), repr(rep.aleatoric)])
    return 0


def cmd_simulate(args) -> int:
    mc = args.mc_samples or 20 * args.l_sets * args.m_configs
    base = SimWorld(k=args.k, base_accuracy=args.accuracy, seed=args.seed)
    cells = knob_sweep(args.alphas, args.taus, args.instances, args.l_sets, args.m_configs, mc, base)
    print("| alpha | tau | EU pipeline | EU oracle | AU pipeline | AU oracle | agrees |")
    print("|---|---|---|---|---|---|---|")
    for c in cells:
        print(f"| {c.alpha:g} | {c.tau:g} | {c.pipeline['epistemic']:.4f} | {c.oracle['epistemic']:.4f} "
              f"| {c.pipeline['aleatoric']:.4f} | {c.oracle['aleatoric']:.4f} | {'yes' if c.agrees else 'NO'} |")
    return 0 if all(c.agrees for c in cells) else 1


def cmd_metrics(args) -> int:
    scores, labels = [], []
    with open(args.scores, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"score", "label"} <= set(reader.fieldnames):
            raise ValidationError(f"{args.scores}: header must contain score,label")
        for row in reader:
            scores.append(float(row["score"]))
            labels.append(int(row["label"]))
    print(f"auroc {auroc(scores, labels)!r}")
    print(f"aupr {aupr(scores, labels)!r}")
    return 0


def cmd_render(args) -> int:
    space = _space(args.label_space)
    test = _dataset(args.dataset, space, "test")
    train = _dataset(args.demo_dataset, space or test.label_space, "train")
    if args.mask_labels:
        keep = [c for c in range(test.label_space.k) if c not in set(args.mask_labels)]
        train = train.restrict(keep)
    inst = test.instances[args.index]
    template = load_template(args.template) if args.template else default_template()
    for j, demos in enumerate(sample_demo_batches(train, args.strategy, args.size, args.l_sets, (args.seed, args.index))):
        if args.l_sets > 1:
            print(f"===== demo set {j} =====")
        print(render_prompt(template, demos, inst.text, train.label_space))
    return 0


COMMANDS = {"run": cmd_run, "decompose": cmd_decompose, "simulate": cmd_simulate, "metrics": cmd_metrics,
            "render": cmd_render}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:  # usage errors and --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UpstreamError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    except (ValidationError, ValueError, OSError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v`` or directly with
``python3 tests/test_acceptance.py``.
"""

import math
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent))

from conftest import StubLLM, emotion_responder  # noqa: E402
from icluq.cli import main  # noqa: E402
from icluq.metrics import aupr, auroc  # noqa: E402
from icluq.prompting import load_bundled  # noqa: E402
from icluq.protocols import EvalConfig, run_semantic_ood  # noqa: E402
from icluq.simulator import SimulatorSource, SimWorld, knob_sweep  # noqa: E402
from icluq.uq_core import ProbabilityMatrix, decompose_entropy, decompose_variance  # noqa: E402

GOLDEN = Path(__file__).parent / "golden"

# mpmath, 30 digits: H(0.7, 0.3), H(0.8, 0.2), H(0.6, 0.4)
H_73 = 0.610864302054893463
H_82 = 0.500402423538187880
H_64 = 0.673011667009256435


RESULTS: list[str] = []  # shown in the pytest terminal summary


def report(name: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    RESULTS.append(line)
    if __name__ == "__main__":
        print(line, flush=True)
    assert ok, detail


def _quiet(argv) -> int:
    import contextlib
    import io

    with contextlib.redirect_stdout(io.StringIO()), contextlib.redirect_stderr(io.StringIO()):
        return main(argv)


def test_live_endpoint_smoke():
    stub = StubLLM(emotion_responder)
    try:
        with tempfile.TemporaryDirectory() as tmp:
            cfg = Path(tmp) / "endpoint.yaml"
            cfg.write_text(f"url: {stub.url}\nmodel: llama-2-7b-chat\n")
            code = _quiet(["run", "--protocol", "misclassification", "--source", "live", "--endpoint-config", str(cfg),
                           "--dataset", "emotion_mini_test", "--demo-dataset", "emotion_mini",
                           "--out-dir", str(Path(tmp) / "out")])
            rows = (Path(tmp) / "out" / "report.csv").read_text().splitlines() if code == 0 else []
        ok = code == 0 and len(rows) == 7 and len(stub.requests) == 80
        report("live endpoint smoke", ok, f"exit {code}, {len(stub.requests)} requests, {len(rows) - 1} method rows")
    finally:
        stub.close()


def test_decomposition_identities():
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    worst_sum, worst_au, eu_ok = 0.0, 0.0, True
    for _ in range(1000):
        k, l = int(rng.integers(1, 17)), int(rng.integers(1, 17))
        m = rng.dirichlet(rng.uniform(0.05, 5.0, size=k), size=l).T
        r = decompose_entropy(ProbabilityMatrix(m))
        worst_sum = max(worst_sum, abs(r.total - r.epistemic - r.aleatoric))
        worst_au = min(worst_au, r.aleatoric)
        eu_ok &= 0 <= r.epistemic <= math.log(k) + 1e-12
    dt = time.perf_counter() - t0
    ok = worst_sum <= 1e-12 and worst_au >= -1e-12 and eu_ok and dt < 5
    report("decomposition identities", ok,
           f"1000 matrices, max |total-EU-AU| {worst_sum:.1e}, min AU {worst_au:.1e}, EU in [0, ln K] {eu_ok}, {dt:.2f}s")


def test_closed_form_cases():
    same = decompose_entropy(ProbabilityMatrix(np.array([[0.3, 0.3, 0.3], [0.5, 0.5, 0.5], [0.2, 0.2, 0.2]])))
    onehot = decompose_entropy(ProbabilityMatrix(np.eye(2)))
    mixed = decompose_entropy(ProbabilityMatrix(np.array([[0.8, 0.6], [0.2, 0.4]])))
    eu_ref = (H_82 + H_64) / 2
    au_ref = H_73 - eu_ref
    ok = (same.aleatoric == 0.0 and onehot.epistemic == 0.0 and abs(onehot.aleatoric - math.log(2)) <= 1e-12
          and abs(mixed.epistemic - eu_ref) <= 1e-9 and abs(mixed.aleatoric - au_ref) <= 1e-9)
    report("closed-form cases", ok,
           f"identical AU {same.aleatoric}, one-hot EU {onehot.epistemic} AU-ln2 {onehot.aleatoric - math.log(2):.1e}, "
           f"[[.8,.6],[.2,.4]] EU {mixed.epistemic:.10f} (oracle {eu_ref:.10f}) AU {mixed.aleatoric:.10f} "
           f"(oracle {au_ref:.10f})")


def test_law_of_total_variance():
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        m, l = int(rng.integers(1, 33)), int(rng.integers(1, 33))
        if m * l < 2:
            l = 2
        g = rng.normal(size=(m, l)) * rng.uniform(0.1, 10)
        r = decompose_variance(g)
        worst = max(worst, abs(r.epistemic + r.aleatoric - np.var(g.ravel())))
    dt = time.perf_counter() - t0
    report("law of total variance", worst <= 1e-10 and dt < 5, f"1000 grids, max error {worst:.1e}, {dt:.2f}s")


def _brute_auroc(s, y):
    pos = [a for a, b in zip(s, y) if b]
    neg = [a for a, b in zip(s, y) if not b]
    return sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg) / (len(pos) * len(neg))


def _brute_aupr(s, y):
    ap, prev = 0.0, 0.0
    for t in sorted(set(s), reverse=True):
        tp = sum(1 for a, b in zip(s, y) if a >= t and b)
        pred = sum(1 for a in s if a >= t)
        ap += (tp / sum(y) - prev) * tp / pred
        prev = tp / sum(y)
    return ap


def test_metric_oracles():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(500):
        n = int(rng.integers(2, 51))
        s = (rng.integers(0, max(2, n // 3), size=n) / 4.0).tolist()
        y = rng.integers(0, 2, size=n)
        y[0], y[1] = 0, 1
        y = y.tolist()
        worst = max(worst, abs(auroc(s, y) - _brute_auroc(s, y)), abs(aupr(s, y) - _brute_aupr(s, y)))
    hand = auroc([0.9, 0.8, 0.8, 0.1], [1, 0, 1, 0])
    report("metric oracles", worst <= 1e-9 and hand == 0.875, f"500 tied cases, max error {worst:.1e}, hand case {hand}")


def _spearman_one(xs) -> bool:
    return all(a < b for a, b in zip(xs, xs[1:]))


def test_simulator_knob_separation():
    alphas, taus = [8.0, 2.0, 0.5], [0.0, 0.5, 2.0]
    t0 = time.perf_counter()
    cells = {(c.alpha, c.tau): c for c in knob_sweep(alphas, taus, n_instances=4, l_sets=32, m_configs=32,
                                                     mc_samples=32 * 32 * 20)}
    dt = time.perf_counter() - t0
    eu_mono = all(_spearman_one([cells[a, t].pipeline["epistemic"] for t in taus]) for a in alphas)
    # concept spread grows as alpha shrinks
    au_mono = all(_spearman_one([cells[a, t].pipeline["aleatoric"] for a in alphas]) for t in taus)
    agree = sum(c.agrees for c in cells.values())
    ok = eu_mono and au_mono and agree == len(cells) and dt < 60
    report("simulator knob separation", ok,
           f"EU monotone in tau {eu_mono}, AU monotone in concept spread {au_mono}, "
           f"oracle agreement {agree}/{len(cells)} within 3 sigma, {dt:.1f}s")


def test_synthetic_misclassification_benchmark():
    with tempfile.TemporaryDirectory() as tmp:
        code = _quiet(["run", "--protocol", "misclassification", "--source", "simulator", "--out-dir", tmp])
        same = code == 0 and all((Path(tmp) / f).read_bytes() == (GOLDEN / "misclassification" / f).read_bytes()
                                 for f in ("report.csv", "instances.csv"))
    rows = {r.split(",")[1]: r.split(",") for r in (GOLDEN / "misclassification" / "report.csv").read_text().splitlines()[1:]}
    eu, au = float(rows["EU"][3]), float(rows["AU"][3])
    report("synthetic misclassification benchmark", same and eu > 0.5 and au > 0.5,
           f"golden reproduced bit-exactly {same}, AUROC(EU) {eu:.4f}, AUROC(AU) {au:.4f}")


def test_replay_determinism():
    args = ["run", "--protocol", "misclassification", "--source", "replay", "--trace", "emotion_mini_test_trace",
            "--dataset", "emotion_mini_test", "--demo-dataset", "emotion_mini"]
    with tempfile.TemporaryDirectory() as tmp:
        codes = [_quiet([*args, "--out-dir", str(Path(tmp) / d)]) for d in ("a", "b")]
        same = codes == [0, 0] and all((Path(tmp) / "a" / f).read_bytes() == (Path(tmp) / "b" / f).read_bytes()
                                       for f in ("report.csv", "instances.csv"))
        n = len((Path(tmp) / "a" / "instances.csv").read_text().splitlines()) - 1 if same else 0
    report("replay determinism", same and n == 20, f"exit codes {codes}, {n} instances, byte-identical CSVs {same}")


class _PromptLog:
    def __init__(self, inner):
        self.inner, self.prompts = inner, []

    @property
    def identity(self):
        return self.inner.identity

    def generate(self, call):
        self.prompts.append(call.request.prompt)
        return self.inner.generate(call)


def test_semantic_ood_masking():
    test, train = load_bundled("emotion_mini_test"), load_bundled("emotion_mini")
    masked_names = [test.label_space.name(i) for i in (1, 2)]
    bad = 0
    n = 0
    for strategy in ("random", "class"):
        src = _PromptLog(SimulatorSource(SimWorld()))
        run_semantic_ood(test, {1, 2}, EvalConfig(strategy=strategy), src, train)
        for p in src.prompts:
            n += 1
            legend = p.split("[", 1)[1].split("]", 1)[0]
            demo_cats = [line.split("Category:", 1)[1] for line in p.splitlines() if line.startswith("Example")]
            if any(name in legend for name in masked_names) or legend.count(":") != 4:
                bad += 1
            elif any(name in c for c in demo_cats for name in masked_names):
                bad += 1
    report("semantic-OOD masking", bad == 0 and n > 0,
           f"{n} prompts checked, {bad} mention {masked_names} in legend or demo block")


if __name__ == "__main__":
    failed = 0
    for name, fn in list(globals().items()):
        if name.startswith("test_") and callable(fn):
            try:
                fn()
            except AssertionError:
                failed += 1
    sys.exit(1 if failed else 0)

"""Freeze the synthetic benchmark reports used as golden files by the tests.

The default simulator world is first checked against the Monte-Carlo oracle;
nothing is written if the pipeline disagrees with it.
"""

import shutil
import sys
from pathlib import Path

from icluq.cli import main
from icluq.simulator import knob_sweep

GOLDEN = Path(__file__).resolve().parents[1] / "tests" / "golden"
RUNS = {
    "misclassification": [],
    "ood_demo": [],
    "semantic_ood": ["--mask-labels", "1,2"],
}

if __name__ == "__main__":
    cell, = knob_sweep([2.0], [0.5], n_instances=8, l_sets=32, m_configs=32, mc_samples=32 * 32 * 20)
    print(f"oracle check: pipeline {cell.pipeline} oracle {cell.oracle} tol {cell.tolerance}")
    if not cell.agrees:
        sys.exit("pipeline disagrees with the oracle; goldens not written")
    for protocol, extra in RUNS.items():
        out = GOLDEN / protocol
        shutil.rmtree(out, ignore_errors=True)
        code = main(["run", "--protocol", protocol, "--source", "simulator", "--out-dir", str(out), *extra])
        if code:
            sys.exit(code)
        (out / "report.md").unlink()

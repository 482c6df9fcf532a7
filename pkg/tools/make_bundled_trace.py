"""Regenerate the bundled 20-instance replay trace.

The generations come from the simulator (k=6 world, default knobs) run over
the bundled emotion test split with emotion training demos, L=4, M=10.
"""

from pathlib import Path

from icluq.cli import main

TRACE = Path(__file__).resolve().parents[1] / "src" / "icluq" / "data" / "traces" / "emotion_mini_test_trace.jsonl"

if __name__ == "__main__":
    TRACE.unlink(missing_ok=True)
    raise SystemExit(main([
        "run", "--protocol", "misclassification", "--source", "simulator",
        "--dataset", "emotion_mini_test", "--demo-dataset", "emotion_mini",
        "--seed", "0", "--trace", str(TRACE), "--out-dir", "/tmp/icluq_bundled_trace_run",
    ]))

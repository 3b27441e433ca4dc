"""The full command-line workflow: synth, extract, eval, report.

Run:  python demos/06_command_line.py [work_dir]
Each step is the same as typing ``specemo <args>`` in a shell.
"""

import json
import sys
from pathlib import Path

from specemo.cli import main

work = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/06")
work.mkdir(parents=True, exist_ok=True)


def run(*args):
    print("\n$ specemo", " ".join(args))
    code = main(list(args))
    print(f"(exit {code})")
    return code


run("synth", "--out", str(work / "data"), "--classes", "4", "--speakers", "5", "--seed", "7")
config = {
    "schema_version": 1,
    "experiment": "demo",
    "dataset": {"manifest": "data/synth.csv"},
    "train": {"mode": "am", "epochs": 10},
    "eval": {"fold_kind": "by_speaker", "k": 5, "seed": 0},
    "report": {"attention_samples": 4},
    "output_dir": "runs",
}
(work / "config.json").write_text(json.dumps(config, indent=2))
run("extract", "--config", str(work / "config.json"))
run("extract", "--config", str(work / "config.json"))  # second pass is all cache hits
run("eval", "--config", str(work / "config.json"), "--run-id", "demo")
run("report", str(work / "runs" / "demo"))
print("\nartifacts:", sorted(p.name for p in (work / "runs" / "demo").iterdir()))

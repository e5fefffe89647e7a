"""The full four-cell experiment on a synthetic corpus, offline.

Takes about four minutes on one CPU core. Equivalent shell commands:

    leafbg prepare  --config hermetic --synthetic 60
    leafbg segment  --config hermetic --backend baseline
    leafbg matrix   --config hermetic
    leafbg evaluate --config hermetic
"""
# %%
import json
import sys
import time
from pathlib import Path

from leafbg import cli

work = Path(sys.argv[1] if len(sys.argv) > 1 else "work/hermetic-demo")
common = ["--config", "hermetic", "--out", str(work)]

# %% each stage is independent; rerunning one reuses what is already on disk
t0 = time.perf_counter()
for stage in (["prepare", "--synthetic", "60"], ["segment"], ["matrix"], ["evaluate"]):
    print(f"\n$ leafbg {' '.join(stage + common)}")
    code = cli.main(stage + common)
    if code:
        sys.exit(code)
print(f"\nfinished in {(time.perf_counter() - t0) / 60:.1f} min")

# %% the report is plain JSON
report = json.loads((work / "report" / "report.json").read_text())
for cell, body in sorted(report["cells"].items()):
    print(cell, body["confusion"], f"accuracy {body['metrics']['accuracy']:.3f}")
print("dataset_2 - dataset_1 accuracy:", report["delta_accuracy"])

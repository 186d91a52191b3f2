# # Comparing distillation methods
#
# The harness runs the staged pipeline from a YAML file: teacher, importance
# profile, one student per (method, seed), then a report. Here we shrink the
# shipped config to three seeds and ten student epochs so it finishes in
# well under a minute; pass the full config to the CLI for the real thing:
#
#     flexkd train-teacher --config configs/planted.yaml
#     flexkd score   --config configs/planted.yaml
#     flexkd distill --config configs/planted.yaml
#     flexkd compare --config configs/planted.yaml

# +
import json
import tempfile
from pathlib import Path

from flexkd import harness

root = Path(__file__).resolve().parents[1] if "__file__" in globals() else Path.cwd()
out = Path(tempfile.mkdtemp(prefix="flexkd-demo-"))
cfg = harness.load_config(
    root / "configs" / "planted.yaml",
    {"output_dir": str(out), "seeds": [0, 1, 2], "student.train.epochs": 10},
)
# -

# +
harness.cmd_train_teacher(cfg)
harness.cmd_score(cfg)
harness.cmd_distill(cfg)
report = json.loads(harness.cmd_compare(cfg).read_text())
print((out / "report.md").read_text())
# -

# Each run leaves its loss trace behind, one JSON record per step.

# +
trace = (harness.run_dir(cfg, "flexkd", 0) / "trace.jsonl").read_text().splitlines()
print(trace[0])
print(trace[-1])

"""Why a token budget hurts late answers: run the acceptance pipeline once
(about five minutes), then compare concat and hierarchical answers by
answer page on 20-page documents.

    python demos/04_concat_vs_hierarchical.py runs/demo
"""
# %%
import json
import sys
from pathlib import Path

from hivt5.cli import run

out = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/demo")
config = Path(__file__).resolve().parents[1] / "configs" / "acceptance.cfg"


def cli(*args):
    code = run([args[0], "--config", str(config), "--out-dir", str(out), *args[1:]])
    assert code == 0, args


# %% full pipeline, skipping stages that already finished
for stage, product in (("gen-data", "raw.json"), ("build", "corpus.json"), ("pretrain", "pretrain.ckpt"),
                       ("train", "train.ckpt"), ("finetune", "finetune.ckpt")):
    if not (out / product).exists():
        cli(stage)

# %% both setups on the same 20-page documents
rows = {}
for setup, budget in (("hierarchical", 1024), ("concat", 256)):
    cli("eval", "--eval-corpus", "long_probe", "--eval-split", "train", "--setup", setup,
        "--budget", str(budget), "--force")
    report = json.loads((out / "eval" / f"finetune-long_probe-train-{setup}-{budget}" / "report.json").read_text())
    rows[setup] = {r["answer_page"]: r["accuracy"] for r in report["breakdown"]}

# %% accuracy by (0-based) answer page
# concat is weak even on early pages: one merged 8-page input is unlike anything seen in training.
# Past the budget it has nothing to read at all.
print("page  hierarchical  concat@256")
for page in sorted(rows["hierarchical"]):
    print(f"{page:4d}  {rows['hierarchical'][page]:12.2f}  {rows['concat'].get(page, float('nan')):10.2f}")

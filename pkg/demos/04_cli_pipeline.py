"""
Driving the staged pipeline from the command line
=================================================

The same calls work from a shell as ``stylepad <subcommand> ...``. Sizes here
are tiny so the walk-through finishes in seconds; the numbers it prints are not
meaningful accuracies.
"""
import sys
import tempfile
from pathlib import Path

from stylepad.cli import main

work = Path(tempfile.mkdtemp(prefix="stylepad-demo-"))


def run(*argv):
    print("$ stylepad", " ".join(argv))
    code = main(list(argv))
    if code:
        sys.exit(code)


# %%
run("prepare", "--synthetic", str(work / "data"), "--per-class", "6", "--length", "32")

(work / "exp.cfg").write_text(
    "dataset = data/manifest.json\n"
    "out_dir = runs/di2s\n"
    "targets = T0, T1\n"
    "seeds = 0, 1\n"
    "style_epochs = 2\n"
    "diff_steps = 20\n"
    "T = 20\n"
    "unet_dim = 8\n"
    "tsc_epochs = 3\n"
)

# %%
# One stage at a time for a single (target, seed).
common = ["--config", str(work / "exp.cfg"), "--target", "T0", "--seed", "0"]
for stage in ("prepare", "pretrain-style", "train-diffusion", "generate", "train-tsc", "eval"):
    run(stage, *common)

# %%
# Or every target and seed at once; finished stages are skipped with --resume.
run("pipeline", "--config", str(work / "exp.cfg"), "--resume")
run("pipeline", "--config", str(work / "exp.cfg"), "--method", "erm", "--out-dir", str(work / "runs/erm"))
run("compare", str(work / "runs/di2s/run_report.json"), str(work / "runs/erm/run_report.json"), "--labels", "di2s,erm")
run("export-embeddings", *common, "--space", "style", "--out", str(work / "style.csv"))
print("artifacts in", work)

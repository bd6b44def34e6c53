"""
The command line, end to end
============================

synth -> run -> re-cluster at another cut -> graph -> reports.
Everything lands in a temporary directory.
"""
import json
import subprocess
import sys
import tempfile
from pathlib import Path


def stance(*args):
    cmd = [sys.executable, "-m", "stance.cli", *map(str, args)]
    print("$ stance", " ".join(map(str, args)))
    r = subprocess.run(cmd, capture_output=True, text=True)
    for line in r.stderr.splitlines()[-3:]:
        print("   ", line)
    return r.returncode


d = Path(tempfile.mkdtemp(prefix="stance_demo_"))
stance("synth", "--seed", 3, "--out", d / "corpus")
stance("run", "--config", d / "corpus/run_config.json", "--out", d / "run")

man = json.loads((d / "run/manifest.json").read_text())
print("stages:", {k: v["seconds"] for k, v in man["stages"].items()})
print("common:", man["dimensions"]["common"])
print("cluster:", man["dimensions"]["cluster"])

# the same run is refused without --force
print("exit code:", stance("run", "--config", d / "corpus/run_config.json", "--out", d / "run"))

stance("cluster", "--scores", d / "run/compose/common_scores.csv", "--percentile", 50, "--out", d / "p50")
stance("graph", "--matrix", d / "run/graph/co_retweet.mtx", "--assignments", d / "p50/assignments.csv",
       "--level", "user", "--out", d / "p50/users.graphml")
stance("report", "top-influencers", "--run", d / "run", "--k", 3, "--out", d / "top.csv")
print((d / "top.csv").read_text())
stance("report", "biplot", "--run", d / "run", "--pc-x", 1, "--pc-y", 1, "--out", d / "biplot.csv")
print("outputs in", d)

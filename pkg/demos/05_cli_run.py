"""Drive the command line tool: synthesize an archive, run every stage, read the report.

Equivalent shell session:

    firstreply synth --synth-dir demo --synth-hateful 3 --synth-nonhateful 3 --synth-users 800
    firstreply all --config demo/pipeline.toml
"""

import json
import sys
import tempfile
from pathlib import Path

from firstreply.cli import main

with tempfile.TemporaryDirectory() as tmp:
    root = Path(tmp) / "demo"
    rc = main(["synth", "--synth-dir", str(root), "--synth-hateful", "3",
               "--synth-nonhateful", "3", "--synth-users", "800"])
    if rc:
        sys.exit(rc)
    rc = main(["all", "--config", str(root / "pipeline.toml"), "--replications", "20"])
    if rc:
        sys.exit(rc)

    summary = json.loads((root / "out" / "report" / "summary.json").read_text())
    print("\nhateful communities found:", ", ".join(summary["hateful_communities"]))
    print(f"annotator agreement (Fleiss kappa): {summary['fleiss_kappa']:.2f}")
    for key, value in summary["mean_err"].items():
        print(f"mean ERR {key:<22} {value:.3f}")
    for ctype, value in summary["mean_percent_increase"].items():
        print(f"nicer-reply growth, {ctype:<11} {value:+.2f}%")

    # a stage whose inputs are missing fails with a data error (exit code 3)
    print("\nrunning 'stats' in an empty directory:")
    print("exit code", main(["stats", "--output", str(Path(tmp) / "empty")]))

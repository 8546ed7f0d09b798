"""
The command-line harness
========================

Every experiment is also a ``jano`` subcommand driven by a YAML config. Each
writes CSV and JSON results plus ``manifest.json`` with sha256 hashes, so a
rerun can be diffed file by file. Files that hold wall-clock measurements are
listed separately in the manifest because they change between runs.
"""

import json
import tempfile
from pathlib import Path

from jano.cli import main

config = Path(__file__).resolve().parents[1] / "configs" / "minimal.yaml"
out = Path(tempfile.mkdtemp(prefix="jano-demo-"))

for command in ("simulate", "analyze", "run", "ablate", "constancy"):
    code = main([command, "--config", str(config), "--out", str(out / command)])
    print(f"jano {command:<9} exit {code}")

run = json.loads((out / "run" / "summary.json").read_text())["scenes"][0]
print(f"run: token-step fraction {run['token_step_fraction']:.3f}, relative L2 {run['rel_l2']:.3f} "
      "(untrained toy network, so the error says nothing about quality)")

manifest = json.loads((out / "run" / "manifest.json").read_text())
print("hashed files:", len(manifest["files"]), "timing-dependent:", manifest["timing_dependent"])

# a config error names the offending key and exits with code 2
bad = out / "bad.yaml"
bad.write_text(config.read_text().replace("canvas: [4, 4, 16, 16]", "canvas: [4, 4, 16]"))
print("bad canvas -> exit", main(["simulate", "--config", str(bad), "--out", str(out / "bad")]))
